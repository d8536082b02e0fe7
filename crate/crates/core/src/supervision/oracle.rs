//! Direct nested-loop evaluations of the loss formulas, independent of the
//! graph engine. Used as references by tests and the `verify` command.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−log(exp(s_pos) / Σ exp(s))` via log-sum-exp.
fn nll(logits: &[f64], positive: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    lse - logits[positive]
}

pub fn info_nce(left: &[Vec<f64>], right: &[Vec<f64>], tau: f64) -> f64 {
    let n = left.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| dot(&left[i], &right[j]) / tau).collect();
        total += nll(&logits, i);
    }
    total / n as f64
}

pub fn clip(image: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> (f64, f64, f64) {
    let li = info_nce(image, text, tau);
    let lt = info_nce(text, image, tau);
    (li, lt, (li + lt) / 2.0)
}

pub fn iss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = (i + n) % (2 * n);
        let others: Vec<usize> = (0..2 * n).filter(|&k| k != i).collect();
        let logits: Vec<f64> = others.iter().map(|&k| dot(all[i], all[k]) / tau).collect();
        let p = others.iter().position(|&k| k == pos).unwrap();
        total += nll(&logits, p);
    }
    total / (2 * n) as f64
}

/// Mean over `queries` of the best dot product against `keys`, and the
/// lowest index achieving it for every query.
pub fn token_max(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let mut sum = 0.0;
    let mut picks = Vec::new();
    for q in queries {
        let sims: Vec<f64> = keys.iter().map(|k| dot(q, k)).collect();
        let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        picks.push(sims.iter().position(|&s| s == best).unwrap());
        sum += best;
    }
    (sum / queries.len() as f64, picks)
}

/// Fine-grained loss from per-sample token lists.
pub fn filip(image: &[Vec<Vec<f64>>], text: &[Vec<Vec<f64>>], tau: f64) -> (f64, f64, f64) {
    let n = image.len();
    let mut li = 0.0;
    let mut lt = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| token_max(&image[i], &text[j]).0 / tau).collect();
        li += nll(&row, i);
        let row: Vec<f64> = (0..n).map(|j| token_max(&text[i], &image[j]).0 / tau).collect();
        lt += nll(&row, i);
    }
    let (li, lt) = (li / n as f64, lt / n as f64);
    (li, lt, (li + lt) / 2.0)
}

/// Index of the cosine-nearest candidate, lowest index on ties.
pub fn nearest(query: &[f64], candidates: &[Vec<f64>]) -> usize {
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, c) in candidates.iter().enumerate() {
        let s = dot(query, c) / (norm(query) * norm(c));
        if s > best_sim {
            best = k;
            best_sim = s;
        }
    }
    best
}
