use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_image, augment_text, ImageAugPolicy, TextAugPolicy};
use crate::data::{stack_images, Image, TokenBatch, Vocab};
use crate::encoders::ClipModel;
use crate::params::Bound;
use crate::supervision::{
    clip_loss, filip_loss, iss_loss, mask_tokens, mvs_loss, nns_loss, reduce_tokens, tss_loss, LossConfig,
    MaskedTokens, NNQueue, Objective, Term,
};
use crate::tensor::{Graph, Tensor, Var};

use super::TrainError;

/// Stream tags keeping the per-sample random draws independent.
const STREAM_VIEW_A: u64 = 1;
const STREAM_VIEW_B: u64 = 2;
const STREAM_TEXT: u64 = 3;
const STREAM_MASK: u64 = 4;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seed that depends on every part, in order.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| mix(acc ^ mix(p)))
}

/// Everything the objective needs for one step, fixed before the forward
/// pass so that the loss is a pure function of the parameters.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub images: Tensor,
    pub tokens: TokenBatch,
    /// Two independently augmented views of every image.
    pub views: Option<(Tensor, Tensor)>,
    pub text_aug: Option<TokenBatch>,
    pub masked: Option<MaskedTokens>,
    pub step: u64,
}

/// Inputs shared by every batch.
pub struct BatchContext<'a> {
    pub vocab: &'a Vocab,
    pub context_length: usize,
    pub loss: &'a LossConfig,
    pub image_aug: &'a ImageAugPolicy,
    pub text_aug: &'a TextAugPolicy,
    pub seed: u64,
}

impl BatchContext<'_> {
    fn tokenize(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.vocab.id(w)).collect()
    }

    /// Draws the augmentations and masks of one step. Sample `k` of the
    /// batch is identified by its record index so draws do not depend on
    /// batch position.
    pub fn prepare(
        &self,
        step: u64,
        records: &[usize],
        images: &[Image],
        captions: &[Vec<String>],
    ) -> Result<PreparedBatch, TrainError> {
        let originals: Vec<Image> = records.iter().map(|&r| images[r].clone()).collect();
        let tokenized: Vec<_> = records
            .iter()
            .map(|&r| self.vocab.wrap(&self.tokenize(&captions[r]), self.context_length))
            .collect();
        let tokens = TokenBatch::from_tokenized(&tokenized);
        let seed_for = |stream: u64, r: usize| derive_seed(&[self.seed, step, stream, r as u64]);

        let views = if self.loss.iss || self.loss.mvs {
            let view = |stream| {
                let v: Vec<Image> = records
                    .iter()
                    .map(|&r| augment_image(&images[r], self.image_aug, seed_for(stream, r)))
                    .collect();
                stack_images(&v)
            };
            Some((view(STREAM_VIEW_A), view(STREAM_VIEW_B)))
        } else {
            None
        };
        let text_aug = if self.loss.mvs {
            let mut rows = Vec::with_capacity(records.len());
            for &r in records {
                let words = augment_text(&captions[r], self.text_aug, seed_for(STREAM_TEXT, r))?;
                rows.push(self.vocab.wrap(&self.tokenize(&words), self.context_length));
            }
            Some(TokenBatch::from_tokenized(&rows))
        } else {
            None
        };
        let masked = if self.loss.tss {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, step, STREAM_MASK]));
            Some(mask_tokens(&tokens, self.vocab.len(), self.loss.mask_rate, &mut rng))
        } else {
            None
        };
        Ok(PreparedBatch {
            images: stack_images(&originals),
            tokens,
            views,
            text_aug,
            masked,
            step,
        })
    }
}

/// Terms that had nothing to work on this step and contributed zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Skips {
    /// Every sequence lacked a maskable token.
    pub tss: bool,
    /// The neighbor queue held no earlier entry.
    pub nns: bool,
}

pub struct BuiltObjective {
    pub objective: Objective,
    /// Pooled text embeddings of the original captions.
    pub text_pooled: Var,
    pub skips: Skips,
}

/// Builds the weighted objective of `loss` over one prepared batch.
pub fn build_objective(
    model: &ClipModel,
    g: &mut Graph,
    p: &Bound,
    batch: &PreparedBatch,
    loss: &LossConfig,
    queue: &NNQueue,
) -> Result<BuiltObjective, TrainError> {
    let tau = model.temperature_var(g, p);
    let image = model.encode_image(g, p, &batch.images)?;
    let text = model.encode_text(g, p, &batch.tokens)?;
    let mut parts = Vec::new();
    let mut skips = Skips::default();

    if loss.clip {
        let s = clip_loss(g, image.embeddings.pooled, text.embeddings.pooled, tau)?;
        parts.extend([(Term::Clip, s.mean), (Term::ImageSide, s.image_side), (Term::TextSide, s.text_side)]);
    }
    let views = match &batch.views {
        Some((a, b)) if loss.iss || loss.mvs => Some((model.encode_image(g, p, a)?, model.encode_image(g, p, b)?)),
        _ => None,
    };
    if loss.iss {
        let (a, b) = views.as_ref().ok_or_else(|| missing("augmented image views"))?;
        let za = model.ssl_embed(g, p, a)?;
        let zb = model.ssl_embed(g, p, b)?;
        parts.push((Term::Iss, iss_loss(g, za, zb, loss.ssl_temperature)?));
    }
    if loss.tss {
        let masked = batch.masked.as_ref().ok_or_else(|| missing("masked captions"))?;
        let value = if masked.rows.is_empty() {
            None
        } else {
            let encoded = model.encode_text(g, p, &masked.batch)?;
            let logits = model.mlm_logits(g, p, &encoded, &masked.rows)?;
            tss_loss(g, logits, &masked.targets)?
        };
        parts.push((Term::Tss, value.unwrap_or_else(|| {
            skips.tss = true;
            g.constant(Tensor::scalar(0.0))
        })));
    }
    if loss.mvs {
        let (a, _) = views.as_ref().ok_or_else(|| missing("augmented image views"))?;
        let text_aug = batch.text_aug.as_ref().ok_or_else(|| missing("augmented captions"))?;
        let t = model.encode_text(g, p, text_aug)?;
        let v = mvs_loss(
            g,
            image.embeddings.pooled,
            a.embeddings.pooled,
            text.embeddings.pooled,
            t.embeddings.pooled,
            tau,
        )?;
        parts.push((Term::Mvs, v));
    }
    if loss.nns {
        let queries = rows_of(g.value(text.embeddings.pooled));
        let v = match queue.retrieve(&queries, batch.step) {
            Some(neighbors) => {
                let nb = g.constant(Tensor::from_rows(&neighbors)?);
                nns_loss(g, image.embeddings.pooled, nb, tau)?
            }
            None => {
                skips.nns = true;
                g.constant(Tensor::scalar(0.0))
            }
        };
        parts.push((Term::Nns, v));
    }
    if loss.fas {
        let (ri, rt) = reduce_tokens(g, &image.embeddings, &text.embeddings, loss.filip_token_fraction)?;
        parts.push((Term::Fas, filip_loss(g, &ri, &rt, tau)?.mean));
    }
    Ok(BuiltObjective {
        objective: Objective::assemble(g, loss, &parts)?,
        text_pooled: text.embeddings.pooled,
        skips,
    })
}

pub(crate) fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn missing(what: &str) -> TrainError {
    TrainError::Config(format!("prepared batch lacks {what}"))
}
