use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;

use super::AugmentError;

const DEFAULT_SYNONYMS: &str = include_str!("../../data/synonyms.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextStrategy {
    SynonymReplacement,
    RandomSwap,
    RandomDeletion,
}

/// Word → alternative words.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynonymTable {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymTable {
    /// Parses `word<TAB>alt1,alt2,...` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, AugmentError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| AugmentError::Synonyms {
                line: i + 1,
                message: m.into(),
            };
            let (word, alts) = line.split_once('\t').ok_or_else(|| bad("expected word<TAB>alternatives"))?;
            let word = word.trim().to_lowercase();
            let alts: Vec<String> = alts
                .split(',')
                .map(|a| a.trim().to_lowercase())
                .filter(|a| !a.is_empty() && *a != word)
                .collect();
            if word.is_empty() || alts.is_empty() {
                return Err(bad("empty word or alternative list"));
            }
            entries.insert(word, alts);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AugmentError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The small table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_SYNONYMS).expect("bundled synonym table parses")
    }

    /// Every word appearing in the table.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .flat_map(|(w, alts)| std::iter::once(w.as_str()).chain(alts.iter().map(String::as_str)))
    }

    /// Drops entries and alternatives that are not in `vocab`.
    pub fn restricted_to(&self, vocab: &Vocab) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|(w, _)| vocab.contains(w))
            .filter_map(|(w, alts)| {
                let alts: Vec<String> = alts.iter().filter(|a| vocab.contains(a)).cloned().collect();
                (!alts.is_empty()).then(|| (w.clone(), alts))
            })
            .collect();
        Self { entries }
    }

    pub fn alternatives(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextAugPolicy {
    pub strategies: Vec<TextStrategy>,
    /// Fraction of words each strategy touches.
    pub rate: f64,
    pub synonyms: SynonymTable,
}

impl Default for TextAugPolicy {
    fn default() -> Self {
        Self {
            strategies: vec![
                TextStrategy::SynonymReplacement,
                TextStrategy::RandomSwap,
                TextStrategy::RandomDeletion,
            ],
            rate: 0.1,
            synonyms: SynonymTable::builtin(),
        }
    }
}

impl TextAugPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(AugmentError::Policy(format!("text rate must lie in [0, 1), got {}", self.rate)));
        }
        if self.strategies.is_empty() {
            return Err(AugmentError::Policy("no text strategy enabled".into()));
        }
        Ok(())
    }
}

/// Applies one uniformly chosen strategy to `words`, deterministically
/// under `seed`.
pub fn augment_text(words: &[String], policy: &TextAugPolicy, seed: u64) -> Result<Vec<String>, AugmentError> {
    if words.is_empty() {
        return Err(AugmentError::EmptyCaption);
    }
    if policy.rate == 0.0 || policy.strategies.is_empty() {
        return Ok(words.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strategy = policy.strategies[rng.random_range(0..policy.strategies.len())];
    let count = ((policy.rate * words.len() as f64) as usize).max(1);
    Ok(match strategy {
        TextStrategy::SynonymReplacement => {
            let mut candidates: Vec<usize> = (0..words.len())
                .filter(|&i| policy.synonyms.alternatives(&words[i]).is_some())
                .collect();
            candidates.shuffle(&mut rng);
            let mut out = words.to_vec();
            for &i in candidates.iter().take(count) {
                let alts = policy.synonyms.alternatives(&words[i]).expect("filtered above");
                out[i] = alts[rng.random_range(0..alts.len())].clone();
            }
            out
        }
        TextStrategy::RandomSwap => {
            let mut out = words.to_vec();
            if out.len() >= 2 {
                for _ in 0..count {
                    let i = rng.random_range(0..out.len());
                    let j = rng.random_range(0..out.len());
                    out.swap(i, j);
                }
            }
            out
        }
        TextStrategy::RandomDeletion => {
            let drop: Vec<usize> = (0..words.len()).filter(|_| rng.random::<f64>() < policy.rate).collect();
            if drop.len() == words.len() {
                vec![words[rng.random_range(0..words.len())].clone()]
            } else {
                delete_words(words, &drop)
            }
        }
    })
}

/// `words` without the given indices; the last remaining word is never
/// removed.
pub fn delete_words(words: &[String], indices: &[usize]) -> Vec<String> {
    let out: Vec<String> = words
        .iter()
        .enumerate()
        .filter(|(i, _)| !indices.contains(i))
        .map(|(_, w)| w.clone())
        .collect();
    if out.is_empty() {
        words[..1].to_vec()
    } else {
        out
    }
}

pub fn swap_words(words: &[String], i: usize, j: usize) -> Vec<String> {
    let mut out = words.to_vec();
    out.swap(i, j);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn zero_rate_is_identity() {
        let p = TextAugPolicy {
            rate: 0.0,
            ..TextAugPolicy::default()
        };
        for seed in 0..10 {
            assert_eq!(augment_text(&w("a photo of a cat"), &p, seed).unwrap(), w("a photo of a cat"));
        }
    }

    #[test]
    fn swap_on_single_word_is_identity() {
        let p = TextAugPolicy {
            strategies: vec![TextStrategy::RandomSwap],
            rate: 0.5,
            ..TextAugPolicy::default()
        };
        assert_eq!(augment_text(&w("cat"), &p, 3).unwrap(), w("cat"));
    }

    #[test]
    fn forced_deletions() {
        let words = w("a b c");
        assert_eq!(delete_words(&words, &[1]), w("a c"));
        assert_eq!(delete_words(&words, &[0]), w("b c"));
        assert_eq!(delete_words(&words, &[2]), w("a b"));
        assert_eq!(delete_words(&words, &[0, 1, 2]), w("a"));
        assert_eq!(swap_words(&words, 0, 2), w("c b a"));
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(matches!(
            augment_text(&[], &TextAugPolicy::default(), 0),
            Err(AugmentError::EmptyCaption)
        ));
    }

    #[test]
    fn synonyms_replace_from_table() {
        let p = TextAugPolicy {
            strategies: vec![TextStrategy::SynonymReplacement],
            rate: 0.9,
            synonyms: SynonymTable::parse("big\tlarge,huge\n").unwrap(),
        };
        let out = augment_text(&w("a big dog"), &p, 1).unwrap();
        assert_eq!(out[0], "a");
        assert!(out[1] == "large" || out[1] == "huge");
    }

    #[test]
    fn synonym_parsing_and_restriction() {
        assert!(matches!(
            SynonymTable::parse("ok\ta\nbroken line\n"),
            Err(AugmentError::Synonyms { line: 2, .. })
        ));
        let t = SynonymTable::parse("big\tlarge,huge\nsmall\ttiny\n").unwrap();
        let vocab = Vocab::from_words(w("big large small")).unwrap();
        let r = t.restricted_to(&vocab);
        assert_eq!(r.alternatives("big"), Some(&["large".to_string()][..]));
        assert!(r.alternatives("small").is_none());
        assert!(SynonymTable::builtin().len() > 10);
    }

    proptest! {
        #[test]
        fn length_and_determinism(words in prop::collection::vec("[a-e]", 1..12), seed in any::<u64>()) {
            let p = TextAugPolicy { rate: 0.3, ..TextAugPolicy::default() };
            let out = augment_text(&words, &p, seed).unwrap();
            prop_assert!(!out.is_empty() && out.len() <= words.len());
            prop_assert_eq!(out, augment_text(&words, &p, seed).unwrap());
        }
    }
}
