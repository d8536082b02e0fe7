//! The loss terms evaluated on plain vectors, for inspection and tests.

use crate::encoders::{EmbeddingSet, Embeddings};
use crate::faults::{self, Fault};
use crate::tensor::{Graph, Tensor, TensorError};

use super::{clip_loss, filip_loss, info_nce, iss_loss, mvs_loss, nns_loss, reduce_tokens, LossBreakdown, LossConfig, LossError, NNQueue, Objective, Term};

fn rows(g: &mut Graph, v: &[Vec<f64>]) -> Result<crate::tensor::Var, TensorError> {
    if v.is_empty() {
        return Err(TensorError::Contract("empty embedding batch".into()));
    }
    Ok(g.constant(Tensor::from_rows(v)?))
}

fn pooled(sets: &[EmbeddingSet]) -> Vec<Vec<f64>> {
    sets.iter().map(|s| s.pooled.clone()).collect()
}

pub fn info_nce_value(left: &[Vec<f64>], right: &[Vec<f64>], tau: f64) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let (l, r) = (rows(&mut g, left)?, rows(&mut g, right)?);
    let t = g.constant(Tensor::scalar(tau));
    let v = info_nce(&mut g, l, r, t)?;
    Ok(g.value(v).item())
}

pub fn iss_value(view_a: &[Vec<f64>], view_b: &[Vec<f64>], tau: f64) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let (a, b) = (rows(&mut g, view_a)?, rows(&mut g, view_b)?);
    let v = iss_loss(&mut g, a, b, tau)?;
    Ok(g.value(v).item())
}

/// Contrastive loss on pooled embeddings with both directional halves.
pub fn clip_breakdown(image: &[EmbeddingSet], text: &[EmbeddingSet], tau: f64) -> Result<LossBreakdown, TensorError> {
    let mut g = Graph::new();
    let (i, t) = (rows(&mut g, &pooled(image))?, rows(&mut g, &pooled(text))?);
    let tau = g.constant(Tensor::scalar(tau));
    let s = clip_loss(&mut g, i, t, tau)?;
    let get = |v| g.value(v).item();
    Ok(LossBreakdown {
        total: get(s.mean),
        terms: vec![
            (Term::Clip, get(s.mean)),
            (Term::ImageSide, get(s.image_side)),
            (Term::TextSide, get(s.text_side)),
        ],
    })
}

/// Nearest-neighbor loss against `queue` at `step`, with the retrieved
/// entry indices. Returns zero and no indices when nothing is retrievable.
pub fn nns_value(
    image: &[Vec<f64>],
    text: &[Vec<f64>],
    queue: &NNQueue,
    step: u64,
    tau: f64,
) -> Result<(f64, Option<Vec<usize>>), TensorError> {
    let Some(idx) = text.iter().map(|q| queue.nearest(q, step)).collect::<Option<Vec<_>>>() else {
        return Ok((0.0, None));
    };
    let neighbors: Vec<Vec<f64>> = idx.iter().map(|&i| queue.get(i).to_vec()).collect();
    let mut g = Graph::new();
    let (i, n) = (rows(&mut g, image)?, rows(&mut g, &neighbors)?);
    let tau = g.constant(Tensor::scalar(tau));
    let v = nns_loss(&mut g, i, n, tau)?;
    Ok((g.value(v).item(), Some(idx)))
}

/// Token-wise maximum similarity of one image-text pair with the matched
/// token index on the opposite side for every token.
#[derive(Clone, Debug, PartialEq)]
pub struct FilipMatch {
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub image_matches: Vec<usize>,
    pub text_matches: Vec<usize>,
}

fn best_match(query: &[f64], candidates: &[&[f64]]) -> (usize, f64) {
    let keep_last = faults::is_active(Fault::FilipTiebreak);
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in candidates.iter().enumerate() {
        let s: f64 = query.iter().zip(*c).map(|(a, b)| a * b).sum();
        if k == 0 || s > best.1 || (keep_last && s == best.1) {
            best = (k, s);
        }
    }
    best
}

pub fn filip_match(image: &EmbeddingSet, text: &EmbeddingSet) -> Result<FilipMatch, TensorError> {
    let it: Vec<&[f64]> = image.valid_tokens().collect();
    let tt: Vec<&[f64]> = text.valid_tokens().collect();
    if it.is_empty() || tt.is_empty() {
        return Err(TensorError::Degenerate {
            op: "filip_similarity",
            detail: format!("{} image and {} text tokens unmasked", it.len(), tt.len()),
        });
    }
    let side = |queries: &[&[f64]], candidates: &[&[f64]]| {
        let picks: Vec<(usize, f64)> = queries.iter().map(|q| best_match(q, candidates)).collect();
        let mean = picks.iter().map(|p| p.1).sum::<f64>() / picks.len() as f64;
        (mean, picks.into_iter().map(|p| p.0).collect::<Vec<_>>())
    };
    let (image_to_text, image_matches) = side(&it, &tt);
    let (text_to_image, text_matches) = side(&tt, &it);
    Ok(FilipMatch {
        image_to_text,
        text_to_image,
        image_matches,
        text_matches,
    })
}

/// Everything the composite objectives consume, as plain values.
#[derive(Clone, Debug, Default)]
pub struct LossInputs {
    pub image: Vec<EmbeddingSet>,
    pub text: Vec<EmbeddingSet>,
    pub image_aug: Option<Vec<EmbeddingSet>>,
    pub text_aug: Option<Vec<EmbeddingSet>>,
    /// Self-supervision embeddings of two augmented image views.
    pub ssl_views: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    /// Masked-token loss, computed by the text model. `None` counts as an
    /// empty mask set.
    pub tss: Option<f64>,
    /// Retrieved neighbor texts; `None` is a cold queue.
    pub neighbors: Option<Vec<Vec<f64>>>,
}

fn missing(what: &str) -> LossError {
    LossError::Config(format!("{what} required by the enabled terms but not supplied"))
}

/// Evaluates every enabled term and the weighted total.
pub fn evaluate(inputs: &LossInputs, config: &LossConfig, tau: f64) -> Result<LossBreakdown, LossError> {
    config.validate()?;
    if inputs.image.len() != inputs.text.len() {
        return Err(TensorError::Contract(format!(
            "batch mismatch: {} images vs {} texts",
            inputs.image.len(),
            inputs.text.len()
        ))
        .into());
    }
    let mut g = Graph::new();
    let tau = g.constant(Tensor::scalar(tau));
    let image = Embeddings::from_sets(&mut g, &inputs.image)?;
    let text = Embeddings::from_sets(&mut g, &inputs.text)?;
    let mut parts = Vec::new();
    if config.clip {
        let s = clip_loss(&mut g, image.pooled, text.pooled, tau)?;
        parts.extend([(Term::Clip, s.mean), (Term::ImageSide, s.image_side), (Term::TextSide, s.text_side)]);
    }
    if config.iss {
        let (a, b) = inputs.ssl_views.as_ref().ok_or_else(|| missing("ssl views"))?;
        let (a, b) = (rows(&mut g, a)?, rows(&mut g, b)?);
        parts.push((Term::Iss, iss_loss(&mut g, a, b, config.ssl_temperature)?));
    }
    if config.tss {
        parts.push((Term::Tss, g.constant(Tensor::scalar(inputs.tss.unwrap_or(0.0)))));
    }
    if config.mvs {
        let ia = inputs.image_aug.as_ref().ok_or_else(|| missing("augmented images"))?;
        let ta = inputs.text_aug.as_ref().ok_or_else(|| missing("augmented texts"))?;
        let (ia, ta) = (rows(&mut g, &pooled(ia))?, rows(&mut g, &pooled(ta))?);
        parts.push((Term::Mvs, mvs_loss(&mut g, image.pooled, ia, text.pooled, ta, tau)?));
    }
    if config.nns {
        let v = match &inputs.neighbors {
            Some(nb) => {
                let nb = rows(&mut g, nb)?;
                nns_loss(&mut g, image.pooled, nb, tau)?
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        parts.push((Term::Nns, v));
    }
    if config.fas {
        let (ri, rt) = reduce_tokens(&mut g, &image, &text, config.filip_token_fraction)?;
        parts.push((Term::Fas, filip_loss(&mut g, &ri, &rt, tau)?.mean));
    }
    let objective = Objective::assemble(&mut g, config, &parts)?;
    Ok(objective.breakdown(&g))
}

fn require(config: &LossConfig, fas: bool) -> Result<(), LossError> {
    if !(config.clip && config.iss && config.tss && config.mvs && config.nns) || config.fas != fas {
        return Err(LossError::Config(format!(
            "composite objective needs clip, iss, tss, mvs and nns enabled and fas {}",
            if fas { "enabled" } else { "disabled" }
        )));
    }
    Ok(())
}

/// Contrastive, self-supervised, multi-view and neighbor terms combined.
pub fn declip_loss(inputs: &LossInputs, config: &LossConfig, tau: f64) -> Result<LossBreakdown, LossError> {
    require(config, false)?;
    evaluate(inputs, config, tau)
}

/// The composite objective plus the fine-grained alignment term.
pub fn defilip_loss(inputs: &LossInputs, config: &LossConfig, tau: f64) -> Result<LossBreakdown, LossError> {
    require(config, true)?;
    evaluate(inputs, config, tau)
}
