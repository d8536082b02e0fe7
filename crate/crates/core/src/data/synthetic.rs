//! Procedural image-caption pairs with known classes.
//!
//! Each class is a (shape, color) combination drawn on a noisy background.
//! Rendering is a pure function of a [`SyntheticSpec`], so manifests can
//! reference images by spec string instead of storing pixels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::{DataError, PairRecord};

pub const SYNTHETIC_PREFIX: &str = "synthetic:";
pub const SYNTHETIC_SIZE: usize = 32;

const CAPTION_TEMPLATES: &str = include_str!("../../data/prompts_clip.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether the point `(dx, dy)` relative to the center lies inside a
    /// shape of half-size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            ShapeKind::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
            ShapeKind::Cross => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("purple", [0.6, 0.1, 0.8]),
    ("orange", [1.0, 0.55, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

/// Most classes the generator can produce with distinct (shape, color).
pub const MAX_CLASSES: usize = COLORS.len() * ShapeKind::ALL.len();

pub fn class_shape(class: usize) -> ShapeKind {
    ShapeKind::ALL[(class + class / COLORS.len()) % ShapeKind::ALL.len()]
}

pub fn class_color(class: usize) -> usize {
    class % COLORS.len()
}

/// Human-readable class name such as `"red circle"`.
pub fn class_name(class: usize) -> String {
    format!("{} {}", COLORS[class_color(class)].0, class_shape(class).name())
}

pub fn caption_templates() -> Vec<&'static str> {
    CAPTION_TEMPLATES.lines().filter(|l| !l.trim().is_empty()).collect()
}

/// Everything needed to render one synthetic image and its caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub class: usize,
    /// Shape center in pixels.
    pub x: usize,
    pub y: usize,
    /// Shape half-size in pixels.
    pub radius: usize,
    pub template: usize,
    pub noise_seed: u64,
}

impl SyntheticSpec {
    pub fn shape(&self) -> ShapeKind {
        class_shape(self.class)
    }

    pub fn caption(&self) -> String {
        let templates = caption_templates();
        templates[self.template % templates.len()].replace("{label}", &class_name(self.class))
    }

    pub fn render(&self) -> Image {
        let n = SYNTHETIC_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let base = COLORS[class_color(self.class)].1;
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        let mut img = Image::filled(n, n, [0.0; 3]);
        let r = self.radius as f64;
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - self.x as f64;
                let dy = y as f64 - self.y as f64;
                let inside = self.shape().contains(dx, dy, r);
                for (c, &b) in base.iter().enumerate() {
                    let noise: f64 = rng.random_range(-0.25..0.25);
                    let v = if inside {
                        b + tint[c] + 0.2 * noise
                    } else {
                        0.5 + noise
                    };
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        img
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{SYNTHETIC_PREFIX}class={},x={},y={},r={},template={},noise={}",
            self.class, self.x, self.y, self.radius, self.template, self.noise_seed
        )
    }
}

impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let body = s
            .strip_prefix(SYNTHETIC_PREFIX)
            .ok_or_else(|| format!("missing {SYNTHETIC_PREFIX:?} prefix"))?;
        let mut fields = [None; 6];
        const KEYS: [&str; 6] = ["class", "x", "y", "r", "template", "noise"];
        for part in body.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("malformed field {part:?}"))?;
            let slot = KEYS.iter().position(|&key| key == k).ok_or_else(|| format!("unknown field {k:?}"))?;
            fields[slot] = Some(v.parse::<u64>().map_err(|e| format!("field {k}: {e}"))?);
        }
        let get = |i: usize| fields[i].ok_or_else(|| format!("missing field {}", KEYS[i]));
        let spec = SyntheticSpec {
            class: get(0)? as usize,
            x: get(1)? as usize,
            y: get(2)? as usize,
            radius: get(3)? as usize,
            template: get(4)? as usize,
            noise_seed: get(5)?,
        };
        if spec.class >= MAX_CLASSES {
            return Err(format!("class {} exceeds the {MAX_CLASSES} available", spec.class));
        }
        Ok(spec)
    }
}

/// `per_class` records for each of `classes` classes, grouped by class and
/// deterministic under `seed`.
pub fn generate_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<Vec<PairRecord>, DataError> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(DataError::Invalid(format!(
            "synthetic class count must be in [2, {MAX_CLASSES}], got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = caption_templates().len();
    let mut records = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for _ in 0..per_class {
            let radius = rng.random_range(7..=10);
            let spec = SyntheticSpec {
                class,
                x: rng.random_range(radius..SYNTHETIC_SIZE - radius),
                y: rng.random_range(radius..SYNTHETIC_SIZE - radius),
                radius,
                template: rng.random_range(0..templates),
                noise_seed: rng.random(),
            };
            records.push(PairRecord::synthetic(spec));
        }
    }
    Ok(records)
}
