use rand::Rng;

use super::config::{ConvConfig, VitConfig};
use super::layers::{Block, Linear, Norm, INIT_STD};
use super::{Embeddings, EncodedBatch};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError};

fn check_images(images: &Tensor, channels: usize, size: usize) -> Result<usize> {
    let s = images.shape();
    if s.len() != 4 || s[1] != channels || s[2] != size || s[3] != size {
        return Err(TensorError::Shape {
            op: "encode_image",
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), channels, size, size],
        });
    }
    Ok(s[0])
}

/// Pixels are centered and scaled channel-wise before either tower sees
/// them, mapping the `[0, 1]` range to `[-2, 2]`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

fn normalize_pixels(images: &Tensor) -> Tensor {
    let mut out = images.clone();
    for v in out.data_mut() {
        *v = (*v - PIXEL_MEAN) / PIXEL_STD;
    }
    out
}

/// ViT-style encoder: non-overlapping patches, a class token and learned
/// positional embeddings, followed by pre-norm transformer blocks.
///
/// The embedded sequence enters the first block without its own layer
/// norm, so at small widths the attention branches are not dwarfed by a
/// unit-scale residual stream.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    config: VitConfig,
    patch: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_post: Norm,
    proj: Linear,
}

impl VitEncoder {
    pub(crate) fn new(config: &VitConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let c = config;
        let patch_dim = c.channels * c.patch_size * c.patch_size;
        let tokens = c.num_patches() + 1;
        Self {
            config: c.clone(),
            patch: Linear::new(store, "visual.patch", patch_dim, c.width, true, rng),
            cls: store.add("visual.cls", truncated_normal(&[1, c.width], INIT_STD, rng), true),
            pos: store.add("visual.pos", truncated_normal(&[tokens, c.width], INIT_STD, rng), true),
            blocks: (0..c.depth)
                .map(|i| Block::new(store, &format!("visual.block{i}"), c.width, c.heads, rng))
                .collect(),
            ln_post: Norm::new(store, "visual.ln_post", c.width),
            proj: Linear::new(store, "visual.proj", c.width, c.embed_dim, false, rng),
        }
    }

    /// Rearranges `[N×C×H×W]` into `[N·P × C·p·p]` patch rows.
    fn patchify(&self, images: &Tensor, n: usize) -> Tensor {
        let c = &self.config;
        let (p, side) = (c.patch_size, c.image_size);
        let grid = side / p;
        let patch_dim = c.channels * p * p;
        let src = images.data();
        let mut out = vec![0.0; n * grid * grid * patch_dim];
        for b in 0..n {
            for py in 0..grid {
                for px in 0..grid {
                    let row = (b * grid * grid + py * grid + px) * patch_dim;
                    for ch in 0..c.channels {
                        for iy in 0..p {
                            for ix in 0..p {
                                let s = ((b * c.channels + ch) * side + py * p + iy) * side + px * p + ix;
                                out[row + (ch * p + iy) * p + ix] = src[s];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n * grid * grid, patch_dim], out).expect("patch shape")
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<EncodedBatch> {
        let c = &self.config;
        let n = check_images(images, c.channels, c.image_size)?;
        let np = c.num_patches();
        let t = np + 1;
        let patches = g.constant(self.patchify(images, n));
        let x = self.patch.forward(g, p, patches)?;
        // rows 0..n·np are patches, row n·np is the class token
        let stacked = g.concat0(&[x, p[self.cls]])?;
        let order: Vec<usize> = (0..n)
            .flat_map(|b| std::iter::once(n * np).chain(b * np..(b + 1) * np))
            .collect();
        let x = g.gather_rows(stacked, &order)?;
        let x = g.reshape(x, &[n, t, c.width])?;
        let x = g.add_suffix(x, p[self.pos])?;
        let mut x = g.reshape(x, &[n * t, c.width])?;
        for block in &self.blocks {
            x = block.forward(g, p, x, n, t, None)?;
        }
        let hidden = self.ln_post.forward(g, p, x)?;

        let cls_rows: Vec<usize> = (0..n).map(|b| b * t).collect();
        let pooled_hidden = g.gather_rows(hidden, &cls_rows)?;
        let pooled = self.proj.forward(g, p, pooled_hidden)?;
        let pooled = g.l2_normalize(pooled, 1)?;

        let patch_rows: Vec<usize> = (0..n).flat_map(|b| b * t + 1..(b + 1) * t).collect();
        let token_hidden = g.gather_rows(hidden, &patch_rows)?;
        let tokens = self.proj.forward(g, p, token_hidden)?;
        let tokens = g.l2_normalize(tokens, 1)?;

        Ok(EncodedBatch {
            embeddings: Embeddings {
                pooled,
                tokens: Some(tokens),
                offsets: (0..=n).map(|b| b * np).collect(),
            },
            pooled_hidden,
            hidden,
            positions: vec![(0..np).collect(); n],
            sequence_len: np,
            overlapping_receptive_fields: false,
        })
    }
}

/// Small ConvNet stand-in: `conv → GELU → (pool)` stages in channels-last
/// layout. Grid cells of the last stage serve as image tokens; their
/// receptive fields overlap.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    config: ConvConfig,
    pos: ParamId,
    stages: Vec<Linear>,
    ln_post: Norm,
    proj: Linear,
}

impl ConvEncoder {
    pub(crate) fn new(config: &ConvConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut input = config.channels;
        let mut stages = Vec::new();
        for (i, (&out, &k)) in config.stage_channels.iter().zip(&config.kernel_sizes).enumerate() {
            stages.push(Linear::new(store, &format!("visual.conv{i}"), k * k * input, out, true, rng));
            input = out;
        }
        let side = config.image_size;
        Self {
            config: config.clone(),
            pos: store.add(
                "visual.pos",
                truncated_normal(&[side, side, config.channels], INIT_STD, rng),
                true,
            ),
            stages,
            ln_post: Norm::new(store, "visual.ln_post", input),
            proj: Linear::new(store, "visual.proj", input, config.embed_dim, false, rng),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<EncodedBatch> {
        let c = &self.config;
        let n = check_images(images, c.channels, c.image_size)?;
        let side = c.image_size;
        let nhwc = images.permuted(&[0, 2, 3, 1])?;
        let x = g.constant(nhwc);
        let mut x = g.add_suffix(x, p[self.pos])?;
        let mut side = side;
        for (i, stage) in self.stages.iter().enumerate() {
            let cols = g.im2col(x, c.kernel_sizes[i])?;
            let y = stage.forward(g, p, cols)?;
            let y = g.gelu(y);
            x = g.reshape(y, &[n, side, side, c.stage_channels[i]])?;
            if c.pool[i] {
                x = g.avg_pool2(x)?;
                side /= 2;
            }
        }
        let width = c.width();
        let cells = side * side;
        let rows = g.reshape(x, &[n * cells, width])?;
        let hidden = self.ln_post.forward(g, p, rows)?;
        let grid = g.reshape(hidden, &[n, cells, width])?;
        let pooled_hidden = g.mean_axis(grid, 1)?;
        let pooled = self.proj.forward(g, p, pooled_hidden)?;
        let pooled = g.l2_normalize(pooled, 1)?;
        let tokens = self.proj.forward(g, p, hidden)?;
        let tokens = g.l2_normalize(tokens, 1)?;
        Ok(EncodedBatch {
            embeddings: Embeddings {
                pooled,
                tokens: Some(tokens),
                offsets: (0..=n).map(|b| b * cells).collect(),
            },
            pooled_hidden,
            hidden,
            positions: vec![(0..cells).collect(); n],
            sequence_len: cells,
            overlapping_receptive_fields: true,
        })
    }
}

/// Either image tower.
#[derive(Clone, Debug)]
pub enum ImageEncoder {
    Vit(VitEncoder),
    Conv(ConvEncoder),
}

impl ImageEncoder {
    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<EncodedBatch> {
        let images = &normalize_pixels(images);
        match self {
            ImageEncoder::Vit(e) => e.forward(g, p, images),
            ImageEncoder::Conv(e) => e.forward(g, p, images),
        }
    }
}
