//! Image and text encoders, their projection heads and the learnable
//! temperature, bundled as a [`ClipModel`].

mod config;
mod image;
mod layers;
mod text;
#[cfg(test)]
mod tests;

pub use config::{ConvConfig, ImageConfig, ModelConfig, TextConfig, VitConfig, MAX_CONTEXT_LENGTH};
pub use image::{ConvEncoder, ImageEncoder, VitEncoder};
pub use text::TextEncoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TokenBatch;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use layers::Linear;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// Initial value of the learnable temperature.
pub const TAU_INIT: f64 = 0.07;
/// Bounds applied to the temperature after every optimizer step.
pub const TAU_MIN: f64 = 0.005;
pub const TAU_MAX: f64 = 100.0;

/// Log-space clamp bounds whose exponentials land inside `[TAU_MIN, TAU_MAX]`
/// despite rounding in `ln`/`exp`.
fn log_tau_bounds() -> (f64, f64) {
    let mut lo = TAU_MIN.ln();
    while lo.exp() < TAU_MIN {
        lo = lo.next_up();
    }
    let mut hi = TAU_MAX.ln();
    while hi.exp() > TAU_MAX {
        hi = hi.next_down();
    }
    (lo, hi)
}

/// Graph handles for one modality's embeddings.
///
/// `tokens` stacks every sample's token embeddings; sample `b` owns rows
/// `offsets[b]..offsets[b + 1]`. It is `None` only when no sample has any
/// token.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub pooled: Var,
    pub tokens: Option<Var>,
    pub offsets: Vec<usize>,
}

impl Embeddings {
    pub fn batch(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Registers value-level embedding sets as graph constants.
    pub fn from_sets(g: &mut Graph, sets: &[EmbeddingSet]) -> crate::tensor::Result<Self> {
        if sets.is_empty() {
            return Err(TensorError::Contract("empty embedding batch".into()));
        }
        let pooled = Tensor::from_rows(&sets.iter().map(|s| s.pooled.clone()).collect::<Vec<_>>())?;
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        for s in sets {
            rows.extend(s.valid_tokens().map(<[f64]>::to_vec));
            offsets.push(rows.len());
        }
        let tokens = if rows.is_empty() {
            None
        } else {
            Some(g.constant(Tensor::from_rows(&rows)?))
        };
        Ok(Self {
            pooled: g.constant(pooled),
            tokens,
            offsets,
        })
    }

    /// Copies the values out of the graph.
    pub fn to_sets(&self, g: &Graph) -> Vec<EmbeddingSet> {
        let pooled = g.value(self.pooled);
        (0..self.batch())
            .map(|b| {
                let tokens: Vec<Vec<f64>> = match self.tokens {
                    Some(t) => (self.offsets[b]..self.offsets[b + 1])
                        .map(|r| g.value(t).row(r).to_vec())
                        .collect(),
                    None => Vec::new(),
                };
                EmbeddingSet {
                    pooled: pooled.row(b).to_vec(),
                    mask: vec![true; tokens.len()],
                    tokens,
                }
            })
            .collect()
    }
}

/// Output of one encoder forward pass.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub embeddings: Embeddings,
    /// Pre-projection pooled features, `[N × width]`.
    pub pooled_hidden: Var,
    /// Final hidden states, `[N·sequence_len × width]`.
    pub hidden: Var,
    /// Sequence positions contributing a token embedding, per sample.
    pub positions: Vec<Vec<usize>>,
    pub sequence_len: usize,
    pub overlapping_receptive_fields: bool,
}

/// Value-level embeddings of a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub pooled: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl EmbeddingSet {
    /// A set whose tokens are all valid.
    pub fn new(pooled: Vec<f64>, tokens: Vec<Vec<f64>>) -> Self {
        let mask = vec![true; tokens.len()];
        Self { pooled, tokens, mask }
    }

    pub fn token_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t.as_slice())
    }
}

/// Both towers plus the heads used by the self-supervised terms.
#[derive(Clone, Debug)]
pub struct ClipModel {
    config: ModelConfig,
    params: ParamStore,
    image: ImageEncoder,
    text: TextEncoder,
    log_tau: ParamId,
    ssl_head: Linear,
    mlm_head: Linear,
}

impl ClipModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let image = match &config.image {
            ImageConfig::Vit(c) => ImageEncoder::Vit(VitEncoder::new(c, &mut params, &mut rng)),
            ImageConfig::Conv(c) => ImageEncoder::Conv(ConvEncoder::new(c, &mut params, &mut rng)),
        };
        let text = TextEncoder::new(&config.text, &mut params, &mut rng);
        let log_tau = params.add("logit_scale.log_tau", Tensor::scalar(TAU_INIT.ln()), false);
        let width = config.image.width();
        let ssl_head = Linear::new(&mut params, "ssl_head", width, config.embed_dim(), true, &mut rng);
        let mlm_head = Linear::new(
            &mut params,
            "mlm_head",
            config.text.width,
            config.text.vocab_size,
            true,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            params,
            image,
            text,
            log_tau,
            ssl_head,
            mlm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.log_tau
    }

    pub fn encode_image(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<EncodedBatch, EncoderError> {
        Ok(self.image.forward(g, p, images)?)
    }

    pub fn encode_text(&self, g: &mut Graph, p: &Bound, tokens: &TokenBatch) -> Result<EncodedBatch, EncoderError> {
        Ok(self.text.forward(g, p, tokens)?)
    }

    /// `τ = exp(log τ)` as a differentiable scalar.
    pub fn temperature_var(&self, g: &mut Graph, p: &Bound) -> Var {
        g.exp(p[self.log_tau])
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.log_tau).item().exp()
    }

    pub fn set_temperature(&mut self, tau: f64) {
        self.params.set(self.log_tau, Tensor::scalar(tau.ln()));
        self.clamp_temperature();
    }

    /// Clamps `τ` into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) {
        let log_tau = self.params.get(self.log_tau).item();
        let clamped = log_tau.clamp(log_tau_bounds().0, log_tau_bounds().1);
        if clamped != log_tau {
            self.params.set(self.log_tau, Tensor::scalar(clamped));
        }
    }

    /// Unit-norm embeddings for the image self-supervision branch.
    pub fn ssl_embed(&self, g: &mut Graph, p: &Bound, encoded: &EncodedBatch) -> Result<Var, EncoderError> {
        let z = self.ssl_head.forward(g, p, encoded.pooled_hidden)?;
        Ok(g.l2_normalize(z, 1)?)
    }

    /// Vocabulary logits at the given flat rows of an encoded text batch.
    pub fn mlm_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        encoded: &EncodedBatch,
        rows: &[usize],
    ) -> Result<Var, EncoderError> {
        let h = g.gather_rows(encoded.hidden, rows)?;
        Ok(self.mlm_head.forward(g, p, h)?)
    }

    /// Embeds images without tracking gradients.
    pub fn embed_images(&self, images: &Tensor) -> Result<Vec<EmbeddingSet>, EncoderError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.encode_image(&mut g, &p, images)?;
        Ok(out.embeddings.to_sets(&g))
    }

    /// Embeds token batches without tracking gradients.
    pub fn embed_texts(&self, tokens: &TokenBatch) -> Result<Vec<EmbeddingSet>, EncoderError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.encode_text(&mut g, &p, tokens)?;
        Ok(out.embeddings.to_sets(&g))
    }

    /// Replaces every parameter with the identically named, identically
    /// shaped tensor from `tensors`.
    pub fn load_tensors<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<(), EncoderError> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let t = lookup(&name).ok_or_else(|| EncoderError::Mismatch(format!("missing tensor {name}")))?;
            let expected = self.params.get(id).shape();
            if t.shape() != expected {
                return Err(EncoderError::Mismatch(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    expected
                )));
            }
            self.params.set(id, t.clone());
        }
        Ok(())
    }
}
