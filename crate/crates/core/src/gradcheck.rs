//! Central finite-difference checking of graph gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it checks.

use crate::tensor::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Entries whose analytic gradient magnitude exceeded the mask floor.
    pub checked: usize,
    pub passed: usize,
    /// Entries skipped by the mask.
    pub masked: usize,
    pub max_rel_err: f64,
    /// (input index, flat element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Entries that missed the tolerance at `step` but met it against the
    /// extrapolated estimate.
    pub adjudicated: usize,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub mask_floor: f64,
    /// Step `H` of a Richardson-extrapolated second opinion,
    /// `(4·D(H/2) − D(H)) / 3`, consulted only for entries that fail at
    /// `step`. Its rounding floor is about `H / step` times lower, which
    /// matters for gradients that are small next to the function's
    /// partials: there `step`-sized differences drown in `ε·|f| / step`.
    pub adjudication_step: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            mask_floor: 1e-8,
            adjudication_step: Some(1e-3),
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn evaluate<F>(inputs: &[Tensor], track: bool, f: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    compare(inputs, opts, &f, |work| {
        let (g, _, loss) = evaluate(work, false, &f)?;
        Ok(vec![g.value(loss).item()])
    }, &Tensor::scalar(1.0))
}

/// Like [`check_gradients`] for the scalar `Σ wᵢ·yᵢ`, where `f` builds an
/// output `y` shaped like `weights`.
///
/// The central difference is taken per output element before contracting,
/// so outputs a perturbation leaves bitwise unchanged contribute exactly
/// zero instead of adding `ε·|Σ wᵢ·yᵢ|` of cancellation noise. The quotient
/// is the same one [`check_gradients`] forms; only its rounding differs.
pub fn check_contracted<F>(inputs: &[Tensor], weights: &Tensor, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let contracted = |g: &mut Graph, v: &[Var]| {
        let y = f(g, v)?;
        let n = weights.numel();
        let w = g.constant(weights.clone().reshaped(vec![n, 1])?);
        let flat = g.reshape(y, &[1, n])?;
        let dot = g.matmul(flat, w)?;
        g.reshape(dot, &[1])
    };
    compare(inputs, opts, &contracted, |work| {
        let (g, _, y) = evaluate(work, false, &f)?;
        Ok(g.value(y).data().to_vec())
    }, weights)
}

fn compare<L, O>(inputs: &[Tensor], opts: GradCheckOptions, loss: &L, outputs: O, weights: &Tensor) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph, &[Var]) -> Result<Var>,
    O: Fn(&[Tensor]) -> Result<Vec<f64>>,
{
    let (mut g, vars, l) = evaluate(inputs, true, loss)?;
    g.backward(l)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        masked: 0,
        max_rel_err: 0.0,
        worst: None,
        adjudicated: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for e in 0..grad.numel() {
            let a = grad.data()[e];
            if a.abs() <= opts.mask_floor {
                report.masked += 1;
                continue;
            }
            let mut quotient = |h: f64| -> Result<f64> {
                let original = work[ti].data()[e];
                work[ti].data_mut()[e] = original + h;
                let plus = outputs(&work)?;
                work[ti].data_mut()[e] = original - h;
                let minus = outputs(&work)?;
                work[ti].data_mut()[e] = original;
                let mut diff = 0.0;
                for ((p, m), w) in plus.iter().zip(&minus).zip(weights.data()) {
                    diff += w * (p - m);
                }
                Ok(diff / (2.0 * h))
            };
            let numeric = quotient(opts.step)?;
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err <= opts.tolerance {
                report.passed += 1;
            } else if let Some(big) = opts.adjudication_step {
                let extrapolated = (4.0 * quotient(big / 2.0)? - quotient(big)?) / 3.0;
                if relative_error(a, extrapolated) <= opts.tolerance {
                    report.passed += 1;
                    report.adjudicated += 1;
                }
            }
            if err >= report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, e, a, numeric));
            }
        }
    }
    Ok(report)
}
