//! Contrastive, self-supervised and fine-grained loss terms and the rules
//! that weight them into one objective.

mod losses;
mod masking;
pub mod oracle;
mod queue;
mod values;
#[cfg(test)]
mod tests;

pub use losses::{
    check_unit_rows, clip_loss, filip_loss, filip_similarity, info_nce, iss_loss, mvs_loss, nns_loss,
    reduce_tokens, select_topk_tokens, tss_loss, Symmetric,
};
pub use masking::{mask_tokens, MaskedTokens};
pub use queue::NNQueue;
pub use values::{
    clip_breakdown, declip_loss, defilip_loss, evaluate, filip_match, info_nce_value, iss_value, nns_value,
    FilipMatch, LossInputs,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result as TensorResult, TensorError, Var};

pub(crate) const ATTENTION_MASKED: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Named supervision recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clip,
    Slip,
    Filip,
    Declip,
    Defilip,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Clip, Variant::Slip, Variant::Filip, Variant::Declip, Variant::Defilip];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clip => "clip",
            Variant::Slip => "slip",
            Variant::Filip => "filip",
            Variant::Declip => "declip",
            Variant::Defilip => "defilip",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; valid variants: {}", Self::valid_names()))
    }
}

/// Which terms are active and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub clip: bool,
    pub iss: bool,
    pub tss: bool,
    pub mvs: bool,
    pub nns: bool,
    pub fas: bool,
    /// Image self-supervision scale when no other self-supervised term is on.
    pub alpha_slip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Fixed temperature of the image self-supervision term.
    pub ssl_temperature: f64,
    pub filip_token_fraction: f64,
    pub queue_capacity: usize,
    pub mask_rate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Clip)
    }
}

impl LossConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (clip, iss, tss, mvs, nns, fas) = match variant {
            Variant::Clip => (true, false, false, false, false, false),
            Variant::Slip => (true, true, false, false, false, false),
            Variant::Filip => (false, false, false, false, false, true),
            Variant::Declip => (true, true, true, true, true, false),
            Variant::Defilip => (true, true, true, true, true, true),
        };
        Self {
            clip,
            iss,
            tss,
            mvs,
            nns,
            fas,
            alpha_slip: 1.0,
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.2,
            lambda: 0.2,
            ssl_temperature: 0.1,
            filip_token_fraction: 1.0,
            queue_capacity: 1024,
            mask_rate: 0.15,
        }
    }

    /// Any of the text-side, multi-view or neighbor terms switches the
    /// weighting to the composite scheme.
    pub fn composite(&self) -> bool {
        self.tss || self.mvs || self.nns
    }

    pub fn weights(&self) -> Weights {
        let composite = self.composite();
        let clip = if !self.clip {
            0.0
        } else if composite {
            1.0 - self.alpha - self.beta - self.gamma
        } else {
            1.0
        };
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        Weights {
            clip,
            iss: on(self.iss, if composite { self.alpha } else { self.alpha_slip }),
            tss: on(self.tss, self.alpha),
            mvs: on(self.mvs, self.beta),
            nns: on(self.nns, self.gamma),
            fas: on(self.fas, if self.clip { self.lambda } else { 1.0 }),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::Config(m));
        if !(self.clip || self.iss || self.tss || self.mvs || self.nns || self.fas) {
            return bad("no loss term enabled".into());
        }
        if !self.clip && !self.fas {
            return bad("either clip or fas must be enabled".into());
        }
        for (name, w) in [
            ("alpha_slip", self.alpha_slip),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a finite non-negative weight, got {w}"));
            }
        }
        if self.composite() && self.clip && 1.0 - self.alpha - self.beta - self.gamma <= 0.0 {
            return bad(format!(
                "1 - alpha - beta - gamma must be positive, got 1 - {} - {} - {}",
                self.alpha, self.beta, self.gamma
            ));
        }
        if !(self.filip_token_fraction > 0.0 && self.filip_token_fraction <= 1.0) {
            return bad(format!(
                "filip_token_fraction must lie in (0, 1], got {}",
                self.filip_token_fraction
            ));
        }
        if !(self.ssl_temperature > 0.0) {
            return bad(format!("ssl_temperature must be positive, got {}", self.ssl_temperature));
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate));
        }
        Ok(())
    }

    pub fn enabled(&self, term: Term) -> bool {
        match term {
            Term::Clip | Term::ImageSide | Term::TextSide => self.clip,
            Term::Iss => self.iss,
            Term::Tss => self.tss,
            Term::Mvs => self.mvs,
            Term::Nns => self.nns,
            Term::Fas => self.fas,
        }
    }
}

/// Per-term weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub clip: f64,
    pub iss: f64,
    pub tss: f64,
    pub mvs: f64,
    pub nns: f64,
    pub fas: f64,
}

impl Weights {
    /// Weight of `term` in the total; the two directional halves of the
    /// contrastive term are reported only.
    pub fn of(&self, term: Term) -> Option<f64> {
        match term {
            Term::Clip => Some(self.clip),
            Term::Iss => Some(self.iss),
            Term::Tss => Some(self.tss),
            Term::Mvs => Some(self.mvs),
            Term::Nns => Some(self.nns),
            Term::Fas => Some(self.fas),
            Term::ImageSide | Term::TextSide => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Clip,
    ImageSide,
    TextSide,
    Iss,
    Tss,
    Mvs,
    Nns,
    Fas,
}

impl Term {
    /// Canonical order used for totals and log lines.
    pub const ALL: [Term; 8] = [
        Term::Clip,
        Term::ImageSide,
        Term::TextSide,
        Term::Iss,
        Term::Tss,
        Term::Mvs,
        Term::Nns,
        Term::Fas,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Term::Clip => "L_CLIP",
            Term::ImageSide => "L_I",
            Term::TextSide => "L_T",
            Term::Iss => "L_ISS",
            Term::Tss => "L_TSS",
            Term::Mvs => "L_MVS",
            Term::Nns => "L_NNS",
            Term::Fas => "L_FAS",
        }
    }
}

/// Values of every enabled term and their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(Term, f64)>,
}

impl LossBreakdown {
    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }

    /// Recomputes the total from the term values with the same
    /// accumulation order as the objective.
    pub fn reconstruct_total(&self, weights: &Weights) -> f64 {
        let mut total = 0.0;
        for &(term, value) in &self.terms {
            if let Some(w) = weights.of(term) {
                total += w * value;
            }
        }
        total
    }

    /// `total=… L_CLIP=… …` with six decimals.
    pub fn format_fields(&self) -> String {
        let mut s = format!("total={:.6}", self.total);
        for (term, value) in &self.terms {
            s.push_str(&format!(" {}={:.6}", term.label(), value));
        }
        s
    }
}

/// Graph handles of an assembled objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(Term, Var)>,
}

impl Objective {
    /// Weights the enabled terms into one scalar. `parts` must contain every
    /// enabled term; the contrastive halves are optional extras.
    pub fn assemble(g: &mut Graph, config: &LossConfig, parts: &[(Term, Var)]) -> TensorResult<Self> {
        let weights = config.weights();
        let mut terms = Vec::new();
        let mut weighted = Vec::new();
        for term in Term::ALL {
            let found = parts.iter().find(|(t, _)| *t == term).map(|&(_, v)| v);
            match (config.enabled(term), found) {
                (true, Some(v)) => {
                    terms.push((term, v));
                    if let Some(w) = weights.of(term) {
                        weighted.push((v, w));
                    }
                }
                (true, None) if weights.of(term).is_some() => {
                    return Err(TensorError::Contract(format!("enabled term {} not supplied", term.label())));
                }
                _ => {}
            }
        }
        let total = g.lin_comb(&weighted)?;
        Ok(Self { total, terms })
    }

    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            terms: self.terms.iter().map(|&(t, v)| (t, g.value(v).item())).collect(),
        }
    }
}
