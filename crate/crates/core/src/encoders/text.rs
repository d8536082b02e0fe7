use rand::Rng;

use super::config::TextConfig;
use super::layers::{key_mask, Block, Linear, Norm, INIT_STD};
use super::{Embeddings, EncodedBatch};
use crate::data::{TokenBatch, END, PAD, START};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Result, TensorError};

/// Transformer text tower with a depth that can be swept freely.
///
/// Attention is bidirectional with padded keys masked out, so padding
/// never influences the embeddings of real positions. The pooled output is
/// taken at the end-of-text position.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextConfig,
    token_embedding: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_final: Norm,
    proj: Linear,
}

impl TextEncoder {
    pub(crate) fn new(config: &TextConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let c = config;
        Self {
            config: c.clone(),
            token_embedding: store.add(
                "text.token_embedding",
                truncated_normal(&[c.vocab_size, c.width], INIT_STD, rng),
                true,
            ),
            pos: store.add(
                "text.pos",
                truncated_normal(&[c.context_length, c.width], INIT_STD, rng),
                true,
            ),
            blocks: (0..c.depth)
                .map(|i| Block::new(store, &format!("text.block{i}"), c.width, c.heads, rng))
                .collect(),
            ln_final: Norm::new(store, "text.ln_final", c.width),
            proj: Linear::new(store, "text.proj", c.width, c.embed_dim, false, rng),
        }
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<EncodedBatch> {
        let c = &self.config;
        let (n, len) = (batch.batch(), batch.len());
        if len > c.context_length {
            return Err(TensorError::Shape {
                op: "encode_text",
                lhs: vec![n, len],
                rhs: vec![n, c.context_length],
            });
        }
        // padded positions are never attended, so their ids are replaced
        let ids: Vec<usize> = batch
            .ids()
            .iter()
            .zip(batch.mask())
            .map(|(&id, &valid)| if valid { id } else { PAD })
            .collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(TensorError::Index {
                op: "encode_text",
                index: bad,
                bound: c.vocab_size,
            });
        }
        let x = g.gather_rows(p[self.token_embedding], &ids)?;
        let x = g.reshape(x, &[n, len, c.width])?;
        let pos = if len == c.context_length {
            p[self.pos]
        } else {
            g.gather_rows(p[self.pos], &(0..len).collect::<Vec<_>>())?
        };
        let x = g.add_suffix(x, pos)?;
        let mut x = g.reshape(x, &[n * len, c.width])?;

        let valid: Vec<Vec<bool>> = (0..n)
            .map(|b| batch.row_mask(b).to_vec())
            .collect();
        let mask = g.constant(key_mask(&valid, c.heads));
        for block in &self.blocks {
            x = block.forward(g, p, x, n, len, Some(mask))?;
        }
        let hidden = self.ln_final.forward(g, p, x)?;

        let eot_rows: Vec<usize> = (0..n)
            .map(|b| b * len + valid[b].iter().rposition(|&v| v).unwrap_or(0))
            .collect();
        let pooled_hidden = g.gather_rows(hidden, &eot_rows)?;
        let pooled = self.proj.forward(g, p, pooled_hidden)?;
        let pooled = g.l2_normalize(pooled, 1)?;

        let positions: Vec<Vec<usize>> = (0..n)
            .map(|b| {
                (0..len)
                    .filter(|&t| valid[b][t] && ids[b * len + t] != START && ids[b * len + t] != END)
                    .collect()
            })
            .collect();
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        for (b, pos) in positions.iter().enumerate() {
            rows.extend(pos.iter().map(|&t| b * len + t));
            offsets.push(rows.len());
        }
        let tokens = if rows.is_empty() {
            None
        } else {
            let h = g.gather_rows(hidden, &rows)?;
            let t = self.proj.forward(g, p, h)?;
            Some(g.l2_normalize(t, 1)?)
        };
        Ok(EncodedBatch {
            embeddings: Embeddings {
                pooled,
                tokens,
                offsets,
            },
            pooled_hidden,
            hidden,
            positions,
            sequence_len: len,
            overlapping_receptive_fields: false,
        })
    }
}
