use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;

use super::AugmentError;

/// Random image transformations, applied as crop-and-resize, color jitter,
/// grayscale, Gaussian blur and horizontal flip, in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageAugPolicy {
    /// Range of the crop's area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Range of the crop's width/height ratio.
    pub crop_ratio: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub flip_prob: f64,
}

impl Default for ImageAugPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
        }
    }
}

impl ImageAugPolicy {
    /// A policy that leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Policy(m));
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("crop_ratio must satisfy 0 < lo <= hi, got ({rlo}, {rhi})"));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return bad(format!("blur_sigma must satisfy 0 < lo <= hi, got ({slo}, {shi})"));
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&s) {
                return bad(format!("{name} must lie in [0, 1), got {s}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad(format!("hue must lie in [0, 0.5], got {}", self.hue));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Augments `image` deterministically under `seed`. The output has the
/// input's shape and values in `[0, 1]`.
pub fn augment_image(image: &Image, policy: &ImageAugPolicy, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = random_resized_crop(image, policy, &mut rng);
    if rng.random::<f64>() < policy.jitter_prob {
        color_jitter(&mut img, policy, &mut rng);
    }
    if rng.random::<f64>() < policy.grayscale_prob {
        grayscale(&mut img);
    }
    if rng.random::<f64>() < policy.blur_prob {
        let sigma = uniform(&mut rng, policy.blur_sigma);
        img = gaussian_blur(&img, sigma, blur_kernel_size(img.width().max(img.height())));
    }
    if rng.random::<f64>() < policy.flip_prob {
        flip_horizontal(&mut img);
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn random_resized_crop(image: &Image, policy: &ImageAugPolicy, rng: &mut impl Rng) -> Image {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let area = w * h;
    let (log_lo, log_hi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale);
        let ratio = uniform(rng, (log_lo, log_hi)).exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng.random_range(0..=(w - cw) as usize);
            let y0 = rng.random_range(0..=(h - ch) as usize);
            crop = Some((x0, y0, cw as usize, ch as usize));
            break;
        }
    }
    // fall back to the largest centered crop within the ratio bounds
    let (x0, y0, cw, ch) = crop.unwrap_or_else(|| {
        let ratio = w / h;
        let (cw, ch) = if ratio < policy.crop_ratio.0 {
            (w, (w / policy.crop_ratio.0).round())
        } else if ratio > policy.crop_ratio.1 {
            ((h * policy.crop_ratio.1).round(), h)
        } else {
            (w, h)
        };
        (((w - cw) / 2.0) as usize, ((h - ch) / 2.0) as usize, cw as usize, ch as usize)
    });
    if (x0, y0, cw, ch) == (0, 0, image.width(), image.height()) {
        return image.clone();
    }
    resize_bilinear(image, x0, y0, cw, ch, image.width(), image.height())
}

/// Bilinearly resamples the `cw × ch` window at `(x0, y0)` to `ow × oh`,
/// aligning pixel centers.
fn resize_bilinear(image: &Image, x0: usize, y0: usize, cw: usize, ch: usize, ow: usize, oh: usize) -> Image {
    let mut out = Image::filled(ow, oh, [0.0; 3]);
    let sx = cw as f64 / ow as f64;
    let sy = ch as f64 / oh as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
        let iy1 = (iy + 1).min(ch - 1);
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
            let ix1 = (ix + 1).min(cw - 1);
            for c in 0..3 {
                let p = |y: usize, x: usize| image.get(c, y0 + y, x0 + x);
                let top = p(iy, ix) * (1.0 - tx) + p(iy, ix1) * tx;
                let bottom = p(iy1, ix) * (1.0 - tx) + p(iy1, ix1) * tx;
                out.set(c, oy, ox, top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp_all(img: &mut Image) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Brightness, contrast, saturation and hue, always in that order.
fn color_jitter(img: &mut Image, policy: &ImageAugPolicy, rng: &mut impl Rng) {
    let factor = |rng: &mut ChaCha8Rng, s: f64| uniform(rng, (1.0 - s, 1.0 + s));
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let b = factor(&mut local, policy.brightness);
    let c = factor(&mut local, policy.contrast);
    let s = factor(&mut local, policy.saturation);
    let h = uniform(&mut local, (-policy.hue, policy.hue));
    let n = img.width() * img.height();

    for v in img.data_mut() {
        *v *= b;
    }
    clamp_all(img);

    let d = img.data().to_vec();
    let mean = (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i])).sum::<f64>() / n as f64;
    for v in img.data_mut() {
        *v = (*v - mean) * c + mean;
    }
    clamp_all(img);

    let d = img.data().to_vec();
    let data = img.data_mut();
    for i in 0..n {
        let gray = luma(d[i], d[n + i], d[2 * n + i]);
        for ch in 0..3 {
            data[ch * n + i] = (d[ch * n + i] - gray) * s + gray;
        }
    }
    clamp_all(img);

    if h != 0.0 {
        let data = img.data_mut();
        for i in 0..n {
            let (hh, ss, vv) = rgb_to_hsv(data[i], data[n + i], data[2 * n + i]);
            let (r, g, b) = hsv_to_rgb((hh + h).rem_euclid(1.0), ss, vv);
            data[i] = r;
            data[n + i] = g;
            data[2 * n + i] = b;
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub(crate) fn grayscale(img: &mut Image) {
    let n = img.width() * img.height();
    let data = img.data_mut();
    for i in 0..n {
        let g = luma(data[i], data[n + i], data[2 * n + i]);
        data[i] = g;
        data[n + i] = g;
        data[2 * n + i] = g;
    }
}

/// Odd kernel size closest to a tenth of the image side, at least 3.
pub fn blur_kernel_size(side: usize) -> usize {
    let k = (side as f64 / 10.0).round() as usize;
    (if k.is_multiple_of(2) { k + 1 } else { k }).max(3)
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64, kernel: usize) -> Image {
    let half = (kernel / 2) as isize;
    let weights: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut tmp = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img.get(c, y as usize, reflect(x + k as isize - half, w)))
                    .sum();
                tmp.set(c, y as usize, x as usize, v);
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp.get(c, reflect(y + k as isize - half, h), x as usize))
                    .sum();
                out.set(c, y as usize, x as usize, v);
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut Image) {
    let (w, h) = (img.width(), img.height());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w / 2 {
                let a = img.get(c, y, x);
                let b = img.get(c, y, w - 1 - x);
                img.set(c, y, x, b);
                img.set(c, y, w - 1 - x, a);
            }
        }
    }
}
