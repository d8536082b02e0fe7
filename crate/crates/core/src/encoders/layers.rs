//! Building blocks shared by the encoders: linear maps, layer norms and
//! pre-norm transformer blocks.

use rand::Rng;

use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Additive attention-mask value for keys that must be ignored. Large
/// enough that `exp` underflows to exactly zero after max-subtraction.
pub(crate) const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(&[input, output], INIT_STD, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output]), false));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_suffix(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p[self.gain], p[self.bias])
    }
}

/// Scalar parameters in one [`Block`] of width `d`.
pub(crate) fn block_parameter_count(d: usize) -> usize {
    let norms = 2 * 2 * d;
    let attn = d * 3 * d + 3 * d + d * d + d;
    let mlp = d * 4 * d + 4 * d + 4 * d * d + d;
    norms + attn + mlp
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    width: usize,
    heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), width, 3 * width, true, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, true, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, 4 * width, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * width, width, true, rng),
            width,
            heads,
        }
    }

    /// `x` is `[batch·tokens × width]`; `key_mask`, when given, is an
    /// additive `[batch·heads × tokens × tokens]` constant.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        batch: usize,
        tokens: usize,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        let (d, h) = (self.width, self.heads);
        let dh = d / h;
        let normed = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, normed)?;
        let qkv = g.reshape(qkv, &[batch, tokens, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, batch * h, tokens, dh])?;
        let q = g.index_axis0(qkv, 0)?;
        let k = g.index_axis0(qkv, 1)?;
        let v = g.index_axis0(qkv, 2)?;
        let scores = g.bmm(q, k, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mask) = key_mask {
            scores = g.add(scores, mask)?;
        }
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, h, tokens, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * tokens, d])?;
        let attn_out = self.out.forward(g, p, ctx)?;
        let x = g.add(x, attn_out)?;

        let normed = self.ln2.forward(g, p, x)?;
        let hidden = self.fc1.forward(g, p, normed)?;
        let hidden = g.gelu(hidden);
        let mlp_out = self.fc2.forward(g, p, hidden)?;
        g.add(x, mlp_out)
    }
}

/// Builds the additive key mask for a batch of sequences, where
/// `valid[b][t]` says whether position `t` of sequence `b` may be attended.
pub(crate) fn key_mask(valid: &[Vec<bool>], heads: usize) -> Tensor {
    let tokens = valid.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(valid.len() * heads * tokens * tokens);
    for row in valid {
        for _ in 0..heads * tokens {
            data.extend(row.iter().map(|&ok| if ok { 0.0 } else { MASKED }));
        }
    }
    Tensor::new(vec![valid.len() * heads, tokens, tokens], data).expect("mask shape")
}
