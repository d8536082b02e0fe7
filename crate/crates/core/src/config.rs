//! Run configuration: one TOML document covering data, model, optimizer,
//! losses and augmentation, with dotted-path overrides.
//!
//! Defaults depend on the variant: the loss table starts from the chosen
//! variant's term set, and the user's file and overrides are merged on top.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::ImageAugPolicy;
use crate::data::{generate_synthetic, read_manifest, DataError, PairRecord, Vocab};
use crate::encoders::ModelConfig;
use crate::supervision::{LossConfig, Variant};
use crate::trainer::{TextAugSettings, TrainConfig, TrainError, TrainSettings};
use crate::zeroshot::PromptSet;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl From<TrainError> for ConfigError {
    fn from(e: TrainError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// The generated synthetic dataset used when no manifests are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub train_seed: u64,
    pub val_seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            classes: 8,
            train_per_class: 100,
            val_per_class: 25,
            train_seed: 1,
            val_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest; the synthetic set when absent.
    pub train: Option<PathBuf>,
    /// Labelled validation manifest; the synthetic set when absent.
    pub val: Option<PathBuf>,
    /// `desk`, `clip`, or a template file with one `{label}` per line.
    pub prompts: String,
    /// Vocabulary cap; the model's `vocab_size` when absent.
    pub vocab_size: Option<usize>,
    pub synthetic: SyntheticData,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            prompts: "desk".into(),
            vocab_size: None,
            synthetic: SyntheticData::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { depths: vec![1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub image_aug: ImageAugPolicy,
    pub text_aug: TextAugSettings,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Clip)
    }
}

pub const CONFIG_FILE: &str = "config.toml";

impl RunConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            out_dir: PathBuf::from("runs").join(variant.name()),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                variant,
                ..TrainConfig::default()
            },
            loss: LossConfig::for_variant(variant),
            image_aug: ImageAugPolicy::default(),
            text_aug: TextAugSettings::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Reads `file` (if any), applies `key.path=value` overrides, fills in
    /// the variant's defaults and validates the result.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                text.parse::<Table>().map_err(|e| ConfigError::Parse {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            set_path(&mut user, key, parse_value(raw))?;
        }
        let variant = match user.get("train").and_then(|t| t.get("variant")) {
            None => Variant::Clip,
            Some(Value::String(s)) => s.parse::<Variant>().map_err(ConfigError::Invalid)?,
            Some(other) => {
                return Err(ConfigError::Invalid(format!(
                    "train.variant must be a string, got {other}; valid variants: {}",
                    Variant::valid_names()
                )))
            }
        };
        let mut merged = Table::try_from(Self::for_variant(variant)).expect("defaults serialize");
        merge(&mut merged, user);
        let mut config: RunConfig = serde_path_to_error::deserialize(Value::Table(merged))
            .map_err(|e| ConfigError::Invalid(format!("{}: {}", e.path(), e.inner())))?;
        config.absolutize();
        config.validate()?;
        Ok(config)
    }

    fn absolutize(&mut self) {
        let abs = |p: &mut PathBuf| {
            if let Ok(a) = std::path::absolute(&*p) {
                *p = a;
            }
        };
        abs(&mut self.out_dir);
        self.data.train.as_mut().map(abs);
        self.data.val.as_mut().map(abs);
        self.text_aug.synonyms.as_mut().map(abs);
        if !matches!(self.data.prompts.as_str(), "desk" | "clip") {
            let mut p = PathBuf::from(&self.data.prompts);
            abs(&mut p);
            self.data.prompts = p.display().to_string();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.settings().validate()?;
        let s = &self.data.synthetic;
        if self.data.train.is_none() || self.data.val.is_none() {
            if !(2..=crate::data::MAX_CLASSES).contains(&s.classes) {
                return Err(ConfigError::Invalid(format!(
                    "data.synthetic.classes must be in [2, {}], got {}",
                    crate::data::MAX_CLASSES,
                    s.classes
                )));
            }
            if s.train_per_class == 0 || s.val_per_class == 0 {
                return Err(ConfigError::Invalid("data.synthetic needs at least one example per class".into()));
            }
        }
        if self.data.vocab_size.is_some_and(|v| v > self.model.text.vocab_size) {
            return Err(ConfigError::Invalid(format!(
                "data.vocab_size {} exceeds model.text.vocab_size {}",
                self.data.vocab_size.unwrap_or_default(),
                self.model.text.vocab_size
            )));
        }
        if self.sweep.depths.is_empty() || self.sweep.depths.contains(&0) {
            return Err(ConfigError::Invalid(format!(
                "sweep.depths must be a non-empty list of positive depths, got {:?}",
                self.sweep.depths
            )));
        }
        Ok(())
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            image_aug: self.image_aug.clone(),
            text_aug: self.text_aug.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        let path = dir.join(CONFIG_FILE);
        std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, self.to_toml()))
            .map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(path)
    }

    pub fn train_records(&self) -> Result<Vec<PairRecord>, DataError> {
        let s = &self.data.synthetic;
        match &self.data.train {
            Some(p) => read_manifest(p),
            None => generate_synthetic(s.classes, s.train_per_class, s.train_seed),
        }
    }

    pub fn val_records(&self) -> Result<Vec<PairRecord>, DataError> {
        let s = &self.data.synthetic;
        match &self.data.val {
            Some(p) => read_manifest(p),
            None => generate_synthetic(s.classes, s.val_per_class, s.val_seed),
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, crate::zeroshot::ZeroShotError> {
        prompt_set(&self.data.prompts)
    }

    /// Vocabulary of the training captions.
    pub fn vocab(&self, train: &[PairRecord]) -> Vocab {
        let cap = self.data.vocab_size.unwrap_or(self.model.text.vocab_size);
        Vocab::build(train.iter().map(|r| r.caption.as_str()), cap)
    }
}

/// `desk`, `clip`, or a template file.
pub fn prompt_set(spec: &str) -> Result<PromptSet, crate::zeroshot::ZeroShotError> {
    match spec {
        "desk" => Ok(PromptSet::desk()),
        "clip" => Ok(PromptSet::clip()),
        path => PromptSet::load(Path::new(path)),
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(ConfigError::Invalid(format!("override {s:?} has an empty key segment")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            ConfigError::Invalid(format!("cannot set {key}: {} is not a table", parts[..=i].join(".")))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursive merge of `over` into `base`. A table whose `kind` differs
/// from the base's replaces it whole, since its fields belong to another
/// variant.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[&str]) -> Vec<(String, String)> {
        pairs.iter().map(|s| parse_override(s).unwrap()).collect()
    }

    #[test]
    fn defaults_resolve_and_validate() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.train.variant, Variant::Clip);
        assert_eq!(c.loss, LossConfig::for_variant(Variant::Clip));
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn variant_selects_loss_defaults_and_overrides_win() {
        let c = RunConfig::resolve(None, &set(&["train.variant=defilip", "loss.lambda=0.5", "train.epochs=0"])).unwrap();
        let mut want = LossConfig::for_variant(Variant::Defilip);
        want.lambda = 0.5;
        assert_eq!(c.loss, want);
        assert_eq!(c.train.epochs, 0);
    }

    #[test]
    fn unknown_variant_lists_the_valid_ones() {
        let err = RunConfig::resolve(None, &set(&["train.variant=blip"])).unwrap_err().to_string();
        for v in ["clip", "slip", "filip", "declip", "defilip"] {
            assert!(err.contains(v), "{err}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = RunConfig::resolve(None, &set(&["train.epoch=3"])).unwrap_err().to_string();
        assert!(err.contains("train") && err.contains("epoch"), "{err}");
        let err = RunConfig::resolve(None, &set(&["model.text.depth=\"two\""])).unwrap_err().to_string();
        assert!(err.contains("model.text.depth"), "{err}");
        let err = RunConfig::resolve(None, &set(&["train.base_lr=0.01"])).unwrap_err().to_string();
        assert!(err.contains("peak_lr"), "{err}");
    }

    #[test]
    fn image_kind_switch_replaces_the_table() {
        let c = RunConfig::resolve(None, &set(&["model.image.kind=conv"])).unwrap();
        assert!(matches!(c.model.image, crate::encoders::ImageConfig::Conv(_)));
    }

    #[test]
    fn file_round_trips_through_the_resolved_copy() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[train]\nvariant = \"slip\"\nseed = 5\n[sweep]\ndepths = [1, 3]\n").unwrap();
        let c = RunConfig::resolve(Some(&file), &[]).unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.sweep.depths, [1, 3]);
        let copy = c.write_to(dir.path()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&copy), &[]).unwrap(), c);
    }

    #[test]
    fn malformed_files_and_overrides_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.toml");
        std::fs::write(&file, "[train\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&file), &[]), Err(ConfigError::Parse { .. })));
        assert!(matches!(
            RunConfig::resolve(Some(&dir.path().join("none.toml")), &[]),
            Err(ConfigError::Io { .. })
        ));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        assert!(RunConfig::resolve(None, &set(&["train.epochs.x=1"])).is_err());
    }

    #[test]
    fn bare_words_become_strings() {
        assert_eq!(parse_value("desk"), Value::String("desk".into()));
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }
}
