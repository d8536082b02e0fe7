//! Zero-shot classification by prompt ensembling.

use std::fmt;
use std::path::Path;

use crate::data::{split_words, Image, TokenBatch, Vocab};
use crate::encoders::{ClipModel, EncoderError};

const CLIP_PROMPTS: &str = include_str!("../../data/prompts_clip.txt");
const DESK_PROMPTS: &str = include_str!("../../data/prompts_desk.txt");

pub const LABEL_SLOT: &str = "{label}";

/// Rows embedded per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ZeroShotError {
    #[error("prompt file: {0}")]
    Prompts(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Caption templates, each holding exactly one `{label}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self, ZeroShotError> {
        if templates.is_empty() {
            return Err(ZeroShotError::Prompts("no templates".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            let slots = t.matches(LABEL_SLOT).count();
            if slots != 1 {
                return Err(ZeroShotError::Prompts(format!(
                    "template {} ({t:?}) has {slots} {LABEL_SLOT} slots, expected exactly one",
                    i + 1
                )));
            }
        }
        Ok(Self { templates })
    }

    /// One template per non-blank line.
    pub fn parse(text: &str) -> Result<Self, ZeroShotError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, ZeroShotError> {
        let text = std::fs::read_to_string(path).map_err(|e| ZeroShotError::Prompts(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The 80-template ImageNet ensemble.
    pub fn clip() -> Self {
        Self::parse(CLIP_PROMPTS).expect("bundled prompts parse")
    }

    /// A 7-template subset for small models.
    pub fn desk() -> Self {
        Self::parse(DESK_PROMPTS).expect("bundled prompts parse")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn fill(&self, label: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace(LABEL_SLOT, label)).collect()
    }
}

/// One unit vector per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierMatrix {
    rows: Vec<Vec<f64>>,
}

impl ClassifierMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.rows.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect())
    }
}

/// Mean of `vectors`, rescaled to unit length.
pub fn mean_normalize(vectors: &[Vec<f64>]) -> Result<Vec<f64>, ZeroShotError> {
    let Some(first) = vectors.first() else {
        return Err(ZeroShotError::Contract("cannot average zero vectors".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(ZeroShotError::Contract("averaged prompt embeddings cancel out".into()));
    }
    Ok(mean.into_iter().map(|x| x / norm).collect())
}

/// Embeds every filled template per class and averages the pooled
/// embeddings into one unit row per class.
pub fn build_classifier(
    model: &ClipModel,
    vocab: &Vocab,
    class_names: &[String],
    prompts: &PromptSet,
) -> Result<ClassifierMatrix, ZeroShotError> {
    if class_names.is_empty() {
        return Err(ZeroShotError::Contract("no classes".into()));
    }
    let context = model.config().text.context_length;
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        if split_words(name).is_empty() {
            return Err(ZeroShotError::Contract(format!("class name {name:?} has no tokens")));
        }
        let tokens: Vec<_> = prompts.fill(name).iter().map(|c| vocab.tokenize(c, context)).collect();
        let mut pooled = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(EVAL_CHUNK) {
            let sets = model.embed_texts(&TokenBatch::from_tokenized(chunk))?;
            pooled.extend(sets.into_iter().map(|s| s.pooled));
        }
        rows.push(mean_normalize(&pooled)?);
    }
    Ok(ClassifierMatrix::new(rows))
}

/// Highest-scoring class per embedding; ties resolve to the lowest id.
pub fn classify(embeddings: &[Vec<f64>], classifier: &ClassifierMatrix) -> Vec<usize> {
    embeddings
        .iter()
        .map(|e| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, row) in classifier.rows.iter().enumerate() {
                let s: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect()
}

/// Embeds images in chunks and classifies them.
pub fn classify_images(model: &ClipModel, images: &[Image], classifier: &ClassifierMatrix) -> Result<Vec<usize>, ZeroShotError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let sets = model.embed_images(&crate::data::stack_images(chunk))?;
        let pooled: Vec<Vec<f64>> = sets.into_iter().map(|s| s.pooled).collect();
        out.extend(classify(&pooled, classifier));
    }
    Ok(out)
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, ZeroShotError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(ZeroShotError::Contract(format!(
            "need equal, non-empty prediction and label lists, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Accuracy with per-class breakdown and confusion counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub accuracy: f64,
    /// `confusion[label][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn new(class_names: Vec<String>, predictions: &[usize], labels: &[usize]) -> Result<Self, ZeroShotError> {
        let accuracy = top1_accuracy(predictions, labels)?;
        let k = class_names.len();
        let mut confusion = vec![vec![0; k]; k];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= k || l >= k {
                return Err(ZeroShotError::Contract(format!("class id out of range for {k} classes")));
            }
            confusion[l][p] += 1;
        }
        Ok(Self {
            class_names,
            accuracy,
            confusion,
        })
    }

    /// `(correct, total)` for class `k`.
    pub fn class_counts(&self, k: usize) -> (usize, usize) {
        (self.confusion[k][k], self.confusion[k].iter().sum())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "top1_accuracy={:.6}", self.accuracy)?;
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  correct  total  accuracy", "class")?;
        for (k, name) in self.class_names.iter().enumerate() {
            let (c, t) = self.class_counts(k);
            let acc = if t == 0 { 0.0 } else { c as f64 / t as f64 };
            writeln!(f, "{name:<width$}  {c:>7}  {t:>5}  {acc:>8.4}")?;
        }
        writeln!(f, "confusion (rows: label, columns: prediction)")?;
        for (k, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
            writeln!(f, "{:<width$} {}", self.class_names[k], cells.join(""))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
