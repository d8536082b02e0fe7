use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// Number of ids reserved for special tokens.
pub const RESERVED_TOKENS: usize = 5;

const SPECIALS: [&str; RESERVED_TOKENS] = ["<pad>", "<start>", "<end>", "<mask>", "<unk>"];

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Word-level vocabulary. Ids below [`RESERVED_TOKENS`] are special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;
    fn try_from(words: Vec<String>) -> Result<Self, String> {
        Vocab::from_words(words[RESERVED_TOKENS.min(words.len())..].to_vec())
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Padded token ids of one caption and the validity of each position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Vocab {
    /// Builds a vocabulary from the most frequent words of `texts`, ties
    /// broken alphabetically, capped so the total size is at most
    /// `max_size`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(RESERVED_TOKENS);
        Self::from_words(ranked.into_iter().take(keep).map(|(w, _)| w).collect()).expect("distinct words")
    }

    /// Builds a vocabulary from non-special words in id order.
    pub fn from_words(words: Vec<String>) -> Result<Self, String> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {w:?}"));
            }
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.get(word).is_some_and(|&i| i >= RESERVED_TOKENS)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED_TOKENS..]
    }

    /// `[start, words…, end, pad…]`, truncated so the end token survives.
    pub fn tokenize(&self, text: &str, context_length: usize) -> Tokenized {
        let words: Vec<usize> = split_words(text).iter().map(|w| self.id(w)).collect();
        self.wrap(&words, context_length)
    }

    /// Wraps content ids with start/end and pads to `context_length`.
    pub fn wrap(&self, content: &[usize], context_length: usize) -> Tokenized {
        assert!(context_length >= 2, "context must hold start and end tokens");
        let keep = content.len().min(context_length - 2);
        let mut ids = Vec::with_capacity(context_length);
        ids.push(START);
        ids.extend_from_slice(&content[..keep]);
        ids.push(END);
        let mask = (0..context_length).map(|i| i < ids.len()).collect();
        ids.resize(context_length, PAD);
        Tokenized { ids, mask }
    }

    /// Words of the non-special ids, in order.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= RESERVED_TOKENS || id == UNK)
            .filter_map(|&id| self.word(id).map(str::to_string))
            .collect()
    }
}

/// Equal-length token sequences stacked row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    mask: Vec<bool>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    /// Positions holding [`PAD`] are treated as padding.
    pub fn new(rows: &[Vec<usize>]) -> Self {
        let masks: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|&id| id != PAD).collect()).collect();
        Self::with_mask(rows, &masks)
    }

    /// Explicit validity mask; ids at invalid positions are ignored.
    pub fn with_mask(rows: &[Vec<usize>], masks: &[Vec<bool>]) -> Self {
        assert!(!rows.is_empty(), "empty token batch");
        let len = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == len), "ragged token batch");
        assert!(
            masks.len() == rows.len() && masks.iter().all(|m| m.len() == len),
            "mask shape differs from ids"
        );
        Self {
            ids: rows.concat(),
            mask: masks.concat(),
            batch: rows.len(),
            len,
        }
    }

    pub fn from_tokenized(rows: &[Tokenized]) -> Self {
        Self::with_mask(
            &rows.iter().map(|t| t.ids.clone()).collect::<Vec<_>>(),
            &rows.iter().map(|t| t.mask.clone()).collect::<Vec<_>>(),
        )
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.len..(b + 1) * self.len]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch).map(|b| self.row(b).to_vec()).collect()
    }
}
