use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Vocab;
use crate::encoders::ClipModel;
use crate::supervision::NNQueue;

use super::{PairSet, TrainError, TrainSettings, Trainer};

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const QUEUE_VECTORS: &str = "nn_queue.vectors";
const QUEUE_STEPS: &str = "nn_queue.steps";

/// Counters restored on resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateMeta {
    pub step: u64,
    pub adam_step: u64,
    pub best_top1: Option<f64>,
}

/// The text block of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub vocab: Vocab,
    pub state: StateMeta,
    pub settings: TrainSettings,
}

impl CheckpointMeta {
    pub fn parse(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        toml::from_str(&ckpt.config).map_err(|e| TrainError::Mismatch(format!("checkpoint config: {e}")))
    }

    /// Rebuilds the model alone, for evaluation.
    pub fn load_model(&self, ckpt: &Checkpoint) -> Result<ClipModel, TrainError> {
        let mut model = ClipModel::new(&self.settings.model, self.settings.train.seed)?;
        model.load_tensors(|name| ckpt.tensor(name))?;
        Ok(model)
    }
}

impl Trainer {
    /// Parameters, optimizer moments, neighbor queue and counters.
    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let meta = CheckpointMeta {
            vocab: self.vocab.clone(),
            state: StateMeta {
                step: self.step,
                adam_step: self.adam.step,
                best_top1: self.best_top1,
            },
            settings: self.settings.clone(),
        };
        let config = toml::to_string(&meta).map_err(|e| TrainError::Config(format!("serializing config: {e}")))?;
        let params = self.model.params();
        let mut tensors = Vec::new();
        for id in params.ids() {
            tensors.push((params.name(id).to_string(), params.get(id).clone()));
        }
        for (k, id) in params.ids().enumerate() {
            tensors.push((format!("{ADAM_M}{}", params.name(id)), self.adam.m[k].clone()));
            tensors.push((format!("{ADAM_V}{}", params.name(id)), self.adam.v[k].clone()));
        }
        if let Some((vectors, steps)) = self.queue.to_tensors() {
            tensors.push((QUEUE_VECTORS.into(), vectors));
            tensors.push((QUEUE_STEPS.into(), steps));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Continues a run from `ckpt` on the same training data.
    pub fn resume(ckpt: &Checkpoint, data: PairSet) -> Result<Self, TrainError> {
        let meta = CheckpointMeta::parse(ckpt)?;
        meta.settings.validate()?;
        let model = meta.load_model(ckpt)?;
        let mut trainer = Self::assemble(meta.settings, meta.vocab, data, model)?;
        let params = trainer.model.params();
        for (k, id) in params.ids().enumerate() {
            let name = params.name(id);
            for (prefix, slot) in [(ADAM_M, &mut trainer.adam.m[k]), (ADAM_V, &mut trainer.adam.v[k])] {
                let t = ckpt
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| TrainError::Mismatch(format!("missing optimizer state {prefix}{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(TrainError::Mismatch(format!("optimizer state {prefix}{name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        trainer.adam.step = meta.state.adam_step;
        let queue_parts = match (ckpt.tensor(QUEUE_VECTORS), ckpt.tensor(QUEUE_STEPS)) {
            (Some(v), Some(s)) => Some((v, s)),
            (None, None) => None,
            _ => return Err(TrainError::Mismatch("incomplete neighbor queue state".into())),
        };
        trainer.queue = NNQueue::from_tensors(
            trainer.settings.loss.queue_capacity,
            trainer.settings.model.embed_dim(),
            queue_parts,
        )?;
        if meta.state.step > trainer.total_steps() {
            return Err(TrainError::Mismatch(format!(
                "checkpoint is at step {} but the run has only {} steps",
                meta.state.step,
                trainer.total_steps()
            )));
        }
        trainer.step = meta.state.step;
        trainer.best_top1 = meta.state.best_top1;
        Ok(trainer)
    }
}

/// Vocabulary and model of a checkpoint.
pub fn load_for_eval(ckpt: &Checkpoint) -> Result<(Vocab, ClipModel), TrainError> {
    let meta = CheckpointMeta::parse(ckpt)?;
    let model = meta.load_model(ckpt)?;
    Ok((meta.vocab, model))
}
