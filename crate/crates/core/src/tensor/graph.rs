use std::sync::Arc;

use super::kernels::{self, axis_extents, gemm};
use super::{Result, Tensor, TensorError};
use crate::faults::{self, Fault};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Exp(Var),
    Matmul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    IndexAxis0(Var, usize),
    Concat0(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Softmax(Var, usize),
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    LinComb(Vec<(Var, f64)>),
    Im2Col { x: Var, kernel: usize },
    AvgPool2(Var),
    BlockMaxMean { s: Var, routes: Vec<(usize, usize)>, inv_count: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Nodes are stored in creation order, which is a topological order: an
/// operation can only reference nodes that already exist.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a leaf whose storage is shared with the caller (model
    /// parameters), avoiding a copy per forward pass.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// was reachable and tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shape(v).to_vec(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|o| self.nodes[o.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------
    // elementwise and scalar ops
    // ----------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of
    /// `a` (bias and positional-embedding broadcast).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_suffix", sa, sb));
        }
        let bd = self.data(b);
        let width = bd.len();
        let data = self
            .data(a)
            .chunks(width)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::AddSuffix(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(out, Op::Scale(a, c), &[a])
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(shape_err(op, t.shape(), &[1]));
        }
        Ok(t.data()[0])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar("mul_scalar", s)?;
        let data = self.data(a).iter().map(|x| x * sv).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    /// Divides every element of `a` by the single-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar("div_scalar", s)?;
        let data = self.data(a).iter().map(|x| x / sv).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::DivScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Weighted sum `Σ wᵢ·xᵢ` of equally shaped tensors, accumulated in the
    /// order given.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(TensorError::Contract("lin_comb of no terms".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err("lin_comb", &shape, self.shape(v)));
            }
            for (d, x) in data.iter_mut().zip(self.data(v)) {
                *d += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::LinComb(terms.to_vec()), &vars))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "mean_axis: axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::MeanAxis(a, axis), &[a]))
    }

    // ----------------------------------------------------------------
    // linear algebra
    // ----------------------------------------------------------------

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut c, false);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::Matmul { a, b, trans_b }, &[a, b]))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]` (or `b[B×n×k]ᵀ` with
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("bmm", sa, sb));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![batch, m, n], c)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    // ----------------------------------------------------------------
    // layout
    // ----------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Contract(format!(
                "permute: {perm:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let data = kernels::permute(self.data(a), &shape, perm);
        let out = Tensor::new(perm.iter().map(|&p| shape[p]).collect(), data)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(TensorError::Contract("transpose expects a matrix".into()));
        }
        self.permute(a, &[1, 0])
    }

    /// Slice `a[index]` along the leading axis.
    pub fn index_axis0(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if index >= shape[0] {
            return Err(TensorError::Index {
                op: "index_axis0",
                index,
                bound: shape[0],
            });
        }
        let mut out_shape = shape[1..].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let width: usize = out_shape.iter().product();
        let data = self.data(a)[index * width..(index + 1) * width].to_vec();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::IndexAxis0(a, index), &[a]))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat0 of no tensors".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat0", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat0(parts.to_vec()), parts))
    }

    /// Selects rows (slices along the leading axis) by index; repeated
    /// indices are allowed. This is also the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if indices.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let width: usize = shape[1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= shape[0] {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: shape[0],
                });
            }
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    // ----------------------------------------------------------------
    // normalisation and losses
    // ----------------------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax: axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |l: usize| base + l * inner;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Slices with
    /// norm below `1e-12` are rejected rather than regularised.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "l2_normalize: axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let norm = (0..len)
                    .map(|l| src[base + l * inner].powi(2))
                    .sum::<f64>()
                    .sqrt();
                if !(norm >= NORM_FLOOR) {
                    return Err(TensorError::Degenerate {
                        op: "l2_normalize",
                        detail: format!("slice norm {norm:e} below {NORM_FLOOR:e}"),
                    });
                }
                for l in 0..len {
                    out[base + l * inner] = src[base + l * inner] / norm;
                }
                norms.push(norm);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::L2Normalize { x: a, axis, norms }, &[a]))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`
    /// (both shaped like the last axis), `ε = 1e-5`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layernorm", &shape, self.shape(gain)));
        }
        let src = self.data(x);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
            inv_std.push(is);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean cross-entropy of `logits[R×C]` against class `targets` (one per
    /// row). Returns a single-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                total += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= total;
            }
            loss += max + total.ln() - row[targets[r]];
        }
        loss /= rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----------------------------------------------------------------
    // convolution helpers (channels-last)
    // ----------------------------------------------------------------

    /// Extracts zero-padded `kernel×kernel` windows (stride 1, "same"
    /// padding) from `x[N×H×W×C]`, giving `[N·H·W × kernel·kernel·C]`.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || kernel.is_multiple_of(2) {
            return Err(TensorError::Contract(format!(
                "im2col expects NHWC input and odd kernel, got {shape:?} / {kernel}"
            )));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.data(x);
        let cols = kernel * kernel * c;
        let mut out = vec![0.0; n * h * w * cols];
        for_each_window(n, h, w, c, kernel, |dst, s| out[dst..dst + c].copy_from_slice(&src[s..s + c]));
        let out = Tensor::new(vec![n * h * w, cols], out)?;
        Ok(self.push(out, Op::Im2Col { x, kernel }, &[x]))
    }

    /// 2×2 average pooling with stride 2 over `x[N×H×W×C]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
            return Err(TensorError::Contract(format!(
                "avg_pool2 expects NHWC with even H and W, got {shape:?}"
            )));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let s = ((b * h + y) * w + xx) * c;
                    let d = ((b * ho + y / 2) * wo + xx / 2) * c;
                    for ch in 0..c {
                        out[d + ch] += 0.25 * src[s + ch];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, ho, wo, c], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    // ----------------------------------------------------------------
    // token-wise maximum similarity
    // ----------------------------------------------------------------

    /// Segment-wise max-then-mean reduction of a similarity matrix.
    ///
    /// `s` is `[Ra × Cb]`, with its rows partitioned into segments by
    /// `row_offsets` (length `Na + 1`) and its columns by `col_offsets`
    /// (length `Nb + 1`). The result is `[Na × Nb]`:
    ///
    /// * `by_columns = false`: entry `(i, j)` is the mean over rows `r` of
    ///   segment `i` of the maximum over columns `c` of segment `j`;
    /// * `by_columns = true`: the mean over columns of segment `j` of the
    ///   maximum over rows of segment `i`.
    ///
    /// Ties resolve to the lowest index. Empty segments are rejected.
    pub fn block_max_mean(
        &mut self,
        s: Var,
        row_offsets: &[usize],
        col_offsets: &[usize],
        by_columns: bool,
    ) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        check_offsets("block_max_mean rows", row_offsets, shape[0])?;
        check_offsets("block_max_mean columns", col_offsets, shape[1])?;
        let cols = shape[1];
        let (na, nb) = (row_offsets.len() - 1, col_offsets.len() - 1);
        let src = self.data(s);
        let keep_last = faults::is_active(Fault::FilipTiebreak);
        let better = |cand: f64, best: f64| if keep_last { cand >= best } else { cand > best };
        let mut out = vec![0.0; na * nb];
        let mut routes = Vec::new();
        let mut inv_count = vec![0.0; na * nb];
        for i in 0..na {
            let rows_i = row_offsets[i]..row_offsets[i + 1];
            for j in 0..nb {
                let cols_j = col_offsets[j]..col_offsets[j + 1];
                let o = i * nb + j;
                let (outer, count) = if by_columns {
                    (cols_j.clone(), cols_j.len())
                } else {
                    (rows_i.clone(), rows_i.len())
                };
                let mut acc = 0.0;
                for p in outer {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    let candidates = if by_columns { rows_i.clone() } else { cols_j.clone() };
                    for q in candidates {
                        let flat = if by_columns { q * cols + p } else { p * cols + q };
                        if best_idx == usize::MAX || better(src[flat], best) {
                            best = src[flat];
                            best_idx = flat;
                        }
                    }
                    acc += best;
                    routes.push((best_idx, o));
                }
                out[o] = acc / count as f64;
                inv_count[o] = 1.0 / count as f64;
            }
        }
        let out = Tensor::new(vec![na, nb], out)?;
        Ok(self.push(
            out,
            Op::BlockMaxMean {
                s,
                routes,
                inv_count,
            },
            &[s],
        ))
    }

    // ----------------------------------------------------------------
    // reverse pass
    // ----------------------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`. Populates the
    /// gradient of every tracked node reachable from it; previous gradients
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn check_offsets(what: &str, offsets: &[usize], total: usize) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == total
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if !ok {
        return Err(TensorError::Contract(format!(
            "{what}: offsets {offsets:?} do not partition {total} entries"
        )));
    }
    if offsets.windows(2).any(|w| w[0] == w[1]) {
        return Err(TensorError::Degenerate {
            op: "block_max_mean",
            detail: format!("{what}: empty segment"),
        });
    }
    Ok(())
}

/// Calls `f(dst_offset, src_offset)` for every in-bounds pixel of every
/// window used by `im2col`, where both offsets address a run of `c` values.
fn for_each_window(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    mut f: impl FnMut(usize, usize),
) {
    let pad = (kernel / 2) as isize;
    let cols = kernel * kernel * c;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * cols;
                for dy in 0..kernel {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..kernel {
                        let sx = x as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = row + (dy * kernel + dx) * c;
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g, 1.0));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g, 1.0));
        }
        Op::AddSuffix(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g, 1.0));
            accumulate(nodes, grads, *b, |gb| {
                let width = gb.len();
                for chunk in g.chunks(width) {
                    add_into(gb, chunk, 1.0);
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |ga| add_into(ga, g, *c)),
        Op::MulScalar(a, s) => {
            let sv = val(*s).data()[0];
            accumulate(nodes, grads, *a, |ga| add_into(ga, g, sv));
            let ad = val(*a).data();
            accumulate(nodes, grads, *s, |gs| {
                gs[0] += g.iter().zip(ad).map(|(g, x)| g * x).sum::<f64>();
            });
        }
        Op::DivScalar(a, s) => {
            let sv = val(*s).data()[0];
            accumulate(nodes, grads, *a, |ga| add_into(ga, g, 1.0 / sv));
            accumulate(nodes, grads, *s, |gs| {
                gs[0] -= g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / sv;
            });
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, |ga| {
            for ((d, g), y) in ga.iter_mut().zip(g).zip(y) {
                *d += g * y;
            }
        }),
        Op::Gelu(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |ga| {
                for ((d, g), &x) in ga.iter_mut().zip(g).zip(x) {
                    *d += g * kernels::gelu_grad(x);
                }
            });
        }
        Op::LinComb(terms) => {
            for &(v, w) in terms {
                accumulate(nodes, grads, v, |gv| add_into(gv, g, w));
            }
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => accumulate(nodes, grads, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            ga.iter_mut().for_each(|d| *d += s);
        }),
        Op::MeanAxis(a, axis) => {
            let (outer, len, inner) = axis_extents(val(*a).shape(), *axis);
            let inv = 1.0 / len as f64;
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for k in 0..inner {
                            ga[base + k] += g[o * inner + k] * inv;
                        }
                    }
                }
            });
        }
        Op::Matmul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = node.value.shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                // ga[m×k] += g[m×n] · op(b)ᵀ
                gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, true);
            });
            accumulate(nodes, grads, *b, |gb| {
                let mut tmp = vec![0.0; gb.len()];
                if *trans_b {
                    // gb[n×k] = gᵀ · a
                    gemm(n, m, k, g, true, av.data(), false, &mut tmp, false);
                } else {
                    // gb[k×n] = aᵀ · g
                    gemm(k, m, n, av.data(), true, g, false, &mut tmp, false);
                }
                let w = if faults::is_active(Fault::MatmulGrad) { 1.01 } else { 1.0 };
                add_into(gb, &tmp, w);
            });
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            accumulate(nodes, grads, *a, |ga| {
                for t in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        false,
                        &bv.data()[t * k * n..(t + 1) * k * n],
                        !*trans_b,
                        &mut ga[t * m * k..(t + 1) * m * k],
                        true,
                    );
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av.data()[t * m * k..(t + 1) * m * k];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gt, true, at, false, dst, true);
                    } else {
                        gemm(k, m, n, at, true, gt, false, dst, true);
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| add_into(ga, g, 1.0)),
        Op::Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let back = kernels::permute(g, node.value.shape(), &inverse);
            accumulate(nodes, grads, *a, |ga| add_into(ga, &back, 1.0));
        }
        Op::IndexAxis0(a, index) => {
            let width = g.len();
            accumulate(nodes, grads, *a, |ga| {
                add_into(&mut ga[index * width..(index + 1) * width], g, 1.0)
            });
        }
        Op::Concat0(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                accumulate(nodes, grads, p, |gp| add_into(gp, &g[offset..offset + len], 1.0));
                offset += len;
            }
        }
        Op::GatherRows(a, indices) => {
            let width = g.len() / indices.len();
            accumulate(nodes, grads, *a, |ga| {
                for (r, &src) in indices.iter().enumerate() {
                    add_into(
                        &mut ga[src * width..(src + 1) * width],
                        &g[r * width..(r + 1) * width],
                        1.0,
                    );
                }
            });
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                        for l in 0..len {
                            let idx = base + l * inner;
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let norm = norms[o * inner + k];
                        let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                        for l in 0..len {
                            let idx = base + l * inner;
                            gx[idx] += (g[idx] - y[idx] * dot) / norm;
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gd = val(*gain).data();
            let d = gd.len();
            let rows = g.len() / d;
            accumulate(nodes, grads, *x, |gx| {
                let mut dh = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dh[j] = gr[j] * gd[j];
                        sum_dh += dh[j];
                        sum_dh_h += dh[j] * hr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for chunk in g.chunks(d) {
                    add_into(gb, chunk, 1.0);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let rows = targets.len();
            let classes = probs.len() / rows;
            let s = g[0] / rows as f64;
            accumulate(nodes, grads, *logits, |gl| {
                add_into(gl, probs, s);
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * classes + t] -= s;
                }
            });
        }
        Op::Im2Col { x, kernel } => {
            let s = val(*x).shape();
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            accumulate(nodes, grads, *x, |gx| {
                for_each_window(n, h, w, c, *kernel, |dst, src| {
                    add_into(&mut gx[src..src + c], &g[dst..dst + c], 1.0)
                });
            });
        }
        Op::AvgPool2(x) => {
            let s = val(*x).shape();
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            accumulate(nodes, grads, *x, |gx| {
                for b in 0..n {
                    for yy in 0..h {
                        for xx in 0..w {
                            let src = ((b * h + yy) * w + xx) * c;
                            let d = ((b * ho + yy / 2) * wo + xx / 2) * c;
                            add_into(&mut gx[src..src + c], &g[d..d + c], 0.25);
                        }
                    }
                }
            });
        }
        Op::BlockMaxMean {
            s,
            routes,
            inv_count,
        } => accumulate(nodes, grads, *s, |gs| {
            for &(flat, o) in routes {
                gs[flat] += g[o] * inv_count[o];
            }
        }),
    }
}
