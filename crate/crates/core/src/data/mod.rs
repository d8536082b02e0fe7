//! Tokenizer, image I/O, manifests and the synthetic dataset.

mod image;
mod synthetic;
mod vocab;

pub use image::{read_farbfeld, stack_images, write_farbfeld, Image, CHANNELS};
pub use synthetic::{
    caption_templates, class_color, class_name, class_shape, generate_synthetic, ShapeKind, SyntheticSpec,
    COLORS, MAX_CLASSES, SYNTHETIC_PREFIX, SYNTHETIC_SIZE,
};
pub use vocab::{split_words, TokenBatch, Tokenized, Vocab, END, MASK, PAD, RESERVED_TOKENS, START, UNK};

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Where a record's pixels come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

/// One image-caption pair, optionally labelled with a class name.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub image: ImageSource,
    pub caption: String,
    pub label: Option<String>,
}

impl PairRecord {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            caption: spec.caption(),
            label: Some(class_name(spec.class)),
            image: ImageSource::Synthetic(spec),
        }
    }

    /// Loads or renders the image and checks it is `size × size`.
    pub fn load_image(&self, size: usize) -> Result<Image, DataError> {
        let img = match &self.image {
            ImageSource::Synthetic(spec) => spec.render(),
            ImageSource::File(path) => File::open(path)
                .and_then(|f| read_farbfeld(BufReader::new(f)))
                .map_err(|source| DataError::Io {
                    path: path.clone(),
                    source,
                })?,
        };
        if img.width() != size || img.height() != size {
            return Err(DataError::Invalid(format!(
                "image {} is {}x{}, expected {size}x{size}",
                self.image_field(),
                img.width(),
                img.height()
            )));
        }
        Ok(img)
    }

    fn image_field(&self) -> String {
        match &self.image {
            ImageSource::Synthetic(spec) => spec.to_string(),
            ImageSource::File(p) => p.display().to_string(),
        }
    }
}

/// Parses a manifest: UTF-8 lines `image<TAB>caption[<TAB>label]`. Blank
/// lines are skipped; relative image paths resolve against the manifest's
/// directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(format!(
                "expected image<TAB>caption[<TAB>label], found {} field(s)",
                fields.len()
            )));
        }
        let image = if fields[0].starts_with(SYNTHETIC_PREFIX) {
            ImageSource::Synthetic(fields[0].parse().map_err(parse_err)?)
        } else if fields[0].is_empty() {
            return Err(parse_err("empty image field".into()));
        } else {
            ImageSource::File(base.join(fields[0]))
        };
        let caption = fields[1].to_string();
        if split_words(&caption).is_empty() {
            return Err(parse_err("caption has no tokens".into()));
        }
        let label = fields.get(2).map(|s| s.to_string()).filter(|s| !s.is_empty());
        records.push(PairRecord { image, caption, label });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let image = match &r.image {
            ImageSource::Synthetic(spec) => spec.to_string(),
            ImageSource::File(p) => {
                let rel = path.parent().and_then(|base| p.strip_prefix(base).ok()).unwrap_or(p);
                rel.display().to_string()
            }
        };
        let line = match &r.label {
            Some(l) => format!("{image}\t{}\t{l}", r.caption),
            None => format!("{image}\t{}", r.caption),
        };
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Sorted distinct labels of `records`; a record's class id is its label's
/// position here.
pub fn class_names(records: &[PairRecord]) -> Vec<String> {
    let mut names: Vec<String> = records.iter().filter_map(|r| r.label.clone()).collect();
    names.sort();
    names.dedup();
    names
}

/// Seeded, drop-last batching over a record set.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    records: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(records: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Invalid("batch size must be positive".into()));
        }
        if records < batch_size {
            return Err(DataError::Invalid(format!(
                "{records} records cannot fill a batch of {batch_size}"
            )));
        }
        Ok(Self {
            records,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records / self.batch_size
    }

    /// Record indices of every batch of `epoch`; the final partial batch is
    /// dropped.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.records).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Yields shuffled batches of records from a manifest for one epoch.
pub fn load_pairs(
    path: &Path,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<PairRecord>>, DataError> {
    let records = read_manifest(path)?;
    let plan = BatchPlan::new(records.len(), batch_size, seed)?;
    Ok(plan
        .epoch(epoch)
        .into_iter()
        .map(move |idx| idx.iter().map(|&i| records[i].clone()).collect()))
}
