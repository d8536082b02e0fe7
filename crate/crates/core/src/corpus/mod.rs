//! Caption-corpus statistics (size, length, English-word ratio, vocabulary)
//! and threshold filtering, computed in one streaming pass.

#[cfg(test)]
mod tests;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::split_words;
use crate::faults::{self, Fault};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: record {record}: {source}")]
    Io {
        path: PathBuf,
        record: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid filter policy: {0}")]
    Policy(String),
}

/// A token made only of ASCII letters.
pub fn is_english(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_alphabetic())
}

/// Summary of a corpus. Lengths are in word tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub examples: u64,
    pub mean_length: f64,
    /// Population standard deviation.
    pub std_length: f64,
    /// English tokens over all tokens.
    pub english_ratio: f64,
    /// Mean of per-caption ratios over captions with at least one token.
    pub caption_english_ratio: f64,
    pub unique_tokens: usize,
}

impl CorpusReport {
    /// `key=value` lines, each key prefixed with `prefix`.
    pub fn key_values(&self, prefix: &str) -> String {
        format!(
            "{prefix}examples={}\n{prefix}caption_length_mean={:.6}\n{prefix}caption_length_std={:.6}\n\
             {prefix}en_word_ratio={:.6}\n{prefix}en_word_ratio_per_caption={:.6}\n{prefix}unique_tokens={}\n",
            self.examples,
            self.mean_length,
            self.std_length,
            self.english_ratio,
            self.caption_english_ratio,
            self.unique_tokens
        )
    }
}

impl fmt::Display for CorpusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("Examples", self.examples.to_string()),
            (
                "Caption length",
                format!("{:.3} ± {:.3}", self.mean_length, self.std_length),
            ),
            ("En-word ratio", format!("{:.4}", self.english_ratio)),
            ("En-word ratio (per caption)", format!("{:.4}", self.caption_english_ratio)),
            ("Unique tokens", self.unique_tokens.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<28} {v:>16}")?;
        }
        Ok(())
    }
}

/// Mergeable running sums. Everything that feeds the headline numbers is
/// an integer, so shards combine exactly in any order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    examples: u64,
    tokens: u64,
    squares: u128,
    english: u64,
    nonempty: u64,
    caption_ratio_sum: f64,
    vocabulary: HashSet<String>,
}

impl CorpusStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, caption: &str) {
        let words = split_words(caption);
        let n = words.len() as u64;
        let english = words.iter().filter(|w| is_english(w)).count() as u64;
        self.examples += 1;
        self.tokens += n;
        self.squares += u128::from(n) * u128::from(n);
        self.english += english;
        if n > 0 {
            self.nonempty += 1;
            self.caption_ratio_sum += english as f64 / n as f64;
        }
        self.vocabulary.extend(words);
    }

    pub fn merge(&mut self, other: CorpusStats) {
        self.examples += other.examples;
        self.tokens += other.tokens;
        self.squares += other.squares;
        self.english += other.english;
        self.nonempty += other.nonempty;
        self.caption_ratio_sum += other.caption_ratio_sum;
        if other.vocabulary.len() > self.vocabulary.len() {
            let mine = std::mem::replace(&mut self.vocabulary, other.vocabulary);
            self.vocabulary.extend(mine);
        } else {
            self.vocabulary.extend(other.vocabulary);
        }
    }

    pub fn report(&self) -> CorpusReport {
        let n = self.examples;
        if n == 0 {
            return CorpusReport {
                examples: 0,
                mean_length: 0.0,
                std_length: 0.0,
                english_ratio: 0.0,
                caption_english_ratio: 0.0,
                unique_tokens: 0,
            };
        }
        let sum = u128::from(self.tokens);
        // n²·var = n·Σx² − (Σx)², exact in integers
        let scaled_var = u128::from(n) * self.squares - sum * sum;
        let denom = if faults::is_active(Fault::CorpusStd) && n > 1 {
            u128::from(n) * u128::from(n - 1)
        } else {
            u128::from(n) * u128::from(n)
        };
        CorpusReport {
            examples: n,
            mean_length: self.tokens as f64 / n as f64,
            std_length: (scaled_var as f64 / denom as f64).sqrt(),
            english_ratio: if self.tokens == 0 { 0.0 } else { self.english as f64 / self.tokens as f64 },
            caption_english_ratio: if self.nonempty == 0 {
                0.0
            } else {
                self.caption_ratio_sum / self.nonempty as f64
            },
            unique_tokens: self.vocabulary.len(),
        }
    }
}

pub fn analyze<'a>(captions: impl IntoIterator<Item = &'a str>) -> CorpusReport {
    let mut stats = CorpusStats::new();
    captions.into_iter().for_each(|c| stats.add(c));
    stats.report()
}

/// Bounds a caption must meet to be kept. Lengths are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    pub min_length: usize,
    pub max_length: Option<usize>,
    pub min_english_ratio: f64,
}

impl Default for FilterPolicy {
    /// Keeps everything.
    fn default() -> Self {
        Self {
            min_length: 0,
            max_length: None,
            min_english_ratio: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Length,
    Ratio,
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if let Some(max) = self.max_length {
            if self.min_length > max {
                return Err(CorpusError::Policy(format!(
                    "min_length {} exceeds max_length {max}",
                    self.min_length
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.min_english_ratio) {
            return Err(CorpusError::Policy(format!(
                "min_english_ratio must lie in [0, 1], got {}",
                self.min_english_ratio
            )));
        }
        Ok(())
    }

    /// The first rule `caption` breaks, length before ratio.
    pub fn check(&self, caption: &str) -> Option<Rule> {
        let words = split_words(caption);
        let n = words.len();
        if n < self.min_length || self.max_length.is_some_and(|m| n > m) {
            return Some(Rule::Length);
        }
        let english = words.iter().filter(|w| is_english(w)).count();
        let ratio = if n == 0 { 0.0 } else { english as f64 / n as f64 };
        (ratio < self.min_english_ratio).then_some(Rule::Ratio)
    }
}

/// Rejections per rule; each rejected caption counts once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RejectionTally {
    pub length: u64,
    pub ratio: u64,
}

impl RejectionTally {
    pub fn total(&self) -> u64 {
        self.length + self.ratio
    }
}

/// Passes each kept caption to `keep` and tallies the rest.
pub fn filter<'a>(
    captions: impl IntoIterator<Item = &'a str>,
    policy: &FilterPolicy,
    mut keep: impl FnMut(&'a str),
) -> Result<RejectionTally, CorpusError> {
    policy.validate()?;
    let mut tally = RejectionTally::default();
    for c in captions {
        match policy.check(c) {
            None => keep(c),
            Some(Rule::Length) => tally.length += 1,
            Some(Rule::Ratio) => tally.ratio += 1,
        }
    }
    Ok(tally)
}

/// Streams captions from a manifest (`image<TAB>caption[<TAB>label]`) or a
/// plain file with one caption per line. A file is a manifest when its
/// first non-blank line has a tab. Blank lines are skipped in both.
pub struct CaptionReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    manifest: Option<bool>,
    record: usize,
}

impl CaptionReader {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            record: 0,
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            manifest: None,
            record: 0,
        })
    }
}

impl Iterator for CaptionReader {
    type Item = Result<String, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(CorpusError::Io {
                        path: self.path.clone(),
                        record: self.record + 1,
                        source,
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            self.record += 1;
            let manifest = *self.manifest.get_or_insert(line.contains('\t'));
            let caption = if manifest {
                line.split('\t').nth(1).unwrap_or("").to_string()
            } else {
                line
            };
            return Some(Ok(caption));
        }
    }
}

/// Analyzes a file, optionally filtering first. Returns the report of the
/// whole file and, with a policy, the tally and the report of what was kept.
pub fn analyze_file(
    path: &Path,
    policy: Option<&FilterPolicy>,
) -> Result<(CorpusReport, Option<(RejectionTally, CorpusReport)>), CorpusError> {
    if let Some(p) = policy {
        p.validate()?;
    }
    let mut all = CorpusStats::new();
    let mut kept = CorpusStats::new();
    let mut tally = RejectionTally::default();
    for caption in CaptionReader::open(path)? {
        let caption = caption?;
        all.add(&caption);
        if let Some(p) = policy {
            match p.check(&caption) {
                None => kept.add(&caption),
                Some(Rule::Length) => tally.length += 1,
                Some(Rule::Ratio) => tally.ratio += 1,
            }
        }
    }
    Ok((all.report(), policy.map(|_| (tally, kept.report()))))
}
