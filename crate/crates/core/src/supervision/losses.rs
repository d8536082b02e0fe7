//! Loss terms as graph operations.

use crate::encoders::Embeddings;
use crate::faults::{self, Fault};
use crate::tensor::{Graph, Result, TensorError, Var};

use super::ATTENTION_MASKED;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Rejects embeddings whose rows are not unit vectors.
pub fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    if t.rank() != 2 {
        return Err(TensorError::Contract(format!("{what}: expected a matrix, got {:?}", t.shape())));
    }
    for r in 0..t.shape()[0] {
        let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(TensorError::Contract(format!(
                "{what}: row {r} has norm {norm}, embeddings must be unit-normalized"
            )));
        }
    }
    Ok(())
}

fn check_tau(g: &Graph, tau: Var) -> Result<()> {
    let t = g.value(tau);
    if t.numel() != 1 || !(t.item() > 0.0) {
        return Err(TensorError::Contract(format!("temperature must be a positive scalar, got {:?}", t.data())));
    }
    Ok(())
}

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean over `i` of `−log softmaxⱼ(leftᵢ·rightⱼ / τ)` at `j = i`.
pub fn info_nce(g: &mut Graph, left: Var, right: Var, tau: Var) -> Result<Var> {
    check_tau(g, tau)?;
    check_unit_rows(g, left, "info_nce left")?;
    check_unit_rows(g, right, "info_nce right")?;
    let (nl, nr) = (g.shape(left)[0], g.shape(right)[0]);
    if nl != nr {
        return Err(TensorError::Contract(format!("batch mismatch: {nl} vs {nr}")));
    }
    let logits = g.matmul_nt(left, right)?;
    let logits = g.div_scalar(logits, tau)?;
    g.cross_entropy(logits, &diagonal(nl))
}

/// Image-to-text, text-to-image and their mean.
#[derive(Clone, Copy, Debug)]
pub struct Symmetric {
    pub image_side: Var,
    pub text_side: Var,
    pub mean: Var,
}

/// Symmetric InfoNCE between matched image and text embeddings.
pub fn clip_loss(g: &mut Graph, image: Var, text: Var, tau: Var) -> Result<Symmetric> {
    let image_side = info_nce(g, image, text, tau)?;
    let text_side = if faults::is_active(Fault::ClipSymmetry) {
        image_side
    } else {
        info_nce(g, text, image, tau)?
    };
    let mean = g.lin_comb(&[(image_side, 0.5), (text_side, 0.5)])?;
    Ok(Symmetric {
        image_side,
        text_side,
        mean,
    })
}

/// NT-Xent over two views of the same `N` images: each of the `2N`
/// embeddings has its sibling view as positive and every other embedding as
/// negative.
pub fn iss_loss(g: &mut Graph, view_a: Var, view_b: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::Contract(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(g, view_a, "iss view a")?;
    check_unit_rows(g, view_b, "iss view b")?;
    let n = g.shape(view_a)[0];
    if g.shape(view_b)[0] != n {
        return Err(TensorError::Contract("iss views differ in batch size".into()));
    }
    let z = g.concat0(&[view_a, view_b])?;
    let sim = g.matmul_nt(z, z)?;
    let sim = g.scale(sim, 1.0 / tau);
    let mut mask = crate::tensor::Tensor::zeros(&[2 * n, 2 * n]);
    for i in 0..2 * n {
        mask.data_mut()[i * 2 * n + i] = ATTENTION_MASKED;
    }
    let mask = g.constant(mask);
    let logits = g.add(sim, mask)?;
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    g.cross_entropy(logits, &targets)
}

/// Token-wise maximum similarity matrices of a batch.
///
/// `image_to_text[i][j]` averages, over image tokens of `i`, the best match
/// among text tokens of `j`; `text_to_image[j][i]` swaps the roles.
pub fn filip_similarity(g: &mut Graph, image: &Embeddings, text: &Embeddings) -> Result<(Var, Var)> {
    let (Some(it), Some(tt)) = (image.tokens, text.tokens) else {
        return Err(TensorError::Degenerate {
            op: "filip_similarity",
            detail: "token embeddings missing".into(),
        });
    };
    check_unit_rows(g, it, "image tokens")?;
    check_unit_rows(g, tt, "text tokens")?;
    let s = g.matmul_nt(it, tt)?;
    let image_to_text = g.block_max_mean(s, &image.offsets, &text.offsets, false)?;
    let by_text = g.block_max_mean(s, &image.offsets, &text.offsets, true)?;
    let text_to_image = g.transpose(by_text)?;
    Ok((image_to_text, text_to_image))
}

/// Symmetric contrastive loss over token-wise maximum similarities.
pub fn filip_loss(g: &mut Graph, image: &Embeddings, text: &Embeddings, tau: Var) -> Result<Symmetric> {
    check_tau(g, tau)?;
    if image.batch() != text.batch() {
        return Err(TensorError::Contract(format!(
            "batch mismatch: {} vs {}",
            image.batch(),
            text.batch()
        )));
    }
    let n = image.batch();
    let (i2t, t2i) = filip_similarity(g, image, text)?;
    let li = g.div_scalar(i2t, tau)?;
    let image_side = g.cross_entropy(li, &diagonal(n))?;
    let lt = g.div_scalar(t2i, tau)?;
    let text_side = g.cross_entropy(lt, &diagonal(n))?;
    let mean = g.lin_comb(&[(image_side, 0.5), (text_side, 0.5)])?;
    Ok(Symmetric {
        image_side,
        text_side,
        mean,
    })
}

/// Indices (ascending) of the `⌈fraction·n⌉` highest-scoring of `n` tokens,
/// at least one. Equal scores keep the lower index.
pub fn select_topk_tokens(scores: &[f64], fraction: f64) -> Vec<usize> {
    assert!(fraction > 0.0 && fraction <= 1.0, "token fraction must lie in (0, 1]");
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// Keeps the highest-scoring fraction of each sample's tokens on both sides.
/// A token's score is its best similarity against every opposite-modality
/// token in the batch.
pub fn reduce_tokens(g: &mut Graph, image: &Embeddings, text: &Embeddings, fraction: f64) -> Result<(Embeddings, Embeddings)> {
    if fraction >= 1.0 {
        return Ok((image.clone(), text.clone()));
    }
    let (Some(it), Some(tt)) = (image.tokens, text.tokens) else {
        return Err(TensorError::Degenerate {
            op: "select_topk_tokens",
            detail: "token embeddings missing".into(),
        });
    };
    let sim = g.matmul_nt(it, tt)?;
    let s = g.value(sim).clone();
    let (ri, rt) = (s.shape()[0], s.shape()[1]);
    let row_best: Vec<f64> = (0..ri).map(|r| s.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let col_best: Vec<f64> = (0..rt)
        .map(|c| (0..ri).map(|r| s.data()[r * rt + c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let reduce = |g: &mut Graph, e: &Embeddings, tokens: Var, best: &[f64]| -> Result<Embeddings> {
        let mut rows = Vec::new();
        let mut offsets = vec![0];
        for b in 0..e.batch() {
            let seg = e.offsets[b]..e.offsets[b + 1];
            let keep = select_topk_tokens(&best[seg.clone()], fraction);
            rows.extend(keep.iter().map(|&k| seg.start + k));
            offsets.push(rows.len());
        }
        Ok(Embeddings {
            pooled: e.pooled,
            tokens: Some(g.gather_rows(tokens, &rows)?),
            offsets,
        })
    };
    Ok((reduce(g, image, it, &row_best)?, reduce(g, text, tt, &col_best)?))
}

/// Mean of the three symmetric losses pairing augmented and original views,
/// leaving the original pairing to the plain contrastive term.
pub fn mvs_loss(g: &mut Graph, image: Var, image_aug: Var, text: Var, text_aug: Var, tau: Var) -> Result<Var> {
    let a = clip_loss(g, image_aug, text, tau)?.mean;
    let b = clip_loss(g, image, text_aug, tau)?.mean;
    let c = clip_loss(g, image_aug, text_aug, tau)?.mean;
    let third = 1.0 / 3.0;
    g.lin_comb(&[(a, third), (b, third), (c, third)])
}

/// Symmetric InfoNCE between images and their texts' retrieved neighbors.
pub fn nns_loss(g: &mut Graph, image: Var, neighbors: Var, tau: Var) -> Result<Var> {
    Ok(clip_loss(g, image, neighbors, tau)?.mean)
}

/// Mean cross-entropy of masked-token predictions. Returns `None` when
/// nothing was masked.
pub fn tss_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    g.cross_entropy(logits, targets).map(Some)
}
