use rand::seq::index::sample;
use rand::Rng;

use crate::data::{TokenBatch, END, MASK, RESERVED_TOKENS, START};

/// Token batch prepared for masked-token prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    /// The corrupted input.
    pub batch: TokenBatch,
    /// Flat `b·len + t` positions to predict.
    pub rows: Vec<usize>,
    /// Original ids at those positions.
    pub targets: Vec<usize>,
    /// Sequences without any maskable token.
    pub skipped: usize,
}

/// Selects `rate` of each sequence's content tokens (at least one); each is
/// replaced by the mask id with probability 0.8, by a random word id with
/// probability 0.1 and left unchanged otherwise.
pub fn mask_tokens(batch: &TokenBatch, vocab_size: usize, rate: f64, rng: &mut impl Rng) -> MaskedTokens {
    let len = batch.len();
    let mut rows_ids = batch.rows();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut skipped = 0;
    for (b, ids) in rows_ids.iter_mut().enumerate() {
        let mask = batch.row_mask(b);
        let content: Vec<usize> = (0..len)
            .filter(|&t| mask[t] && ids[t] != START && ids[t] != END)
            .collect();
        if content.is_empty() {
            skipped += 1;
            continue;
        }
        let k = ((rate * content.len() as f64).round() as usize).clamp(1, content.len());
        let mut chosen: Vec<usize> = sample(rng, content.len(), k).into_iter().map(|i| content[i]).collect();
        chosen.sort_unstable();
        for t in chosen {
            rows.push(b * len + t);
            targets.push(ids[t]);
            let u: f64 = rng.random();
            if u < 0.8 {
                ids[t] = MASK;
            } else if u < 0.9 {
                ids[t] = rng.random_range(RESERVED_TOKENS..vocab_size);
            }
        }
    }
    let masks: Vec<Vec<bool>> = (0..batch.batch()).map(|b| batch.row_mask(b).to_vec()).collect();
    MaskedTokens {
        batch: TokenBatch::with_mask(&rows_ids, &masks),
        rows,
        targets,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PAD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_at_least_one_content_token() {
        let batch = TokenBatch::new(&[vec![START, 7, 8, END, PAD], vec![START, END, PAD, PAD, PAD]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_tokens(&batch, 20, 0.15, &mut rng);
        assert_eq!(m.rows.len(), 1);
        assert!(m.rows[0] == 1 || m.rows[0] == 2);
        assert_eq!(m.skipped, 1);
        assert_eq!(m.targets[0], batch.ids()[m.rows[0]]);
    }

    #[test]
    fn replacement_split_is_roughly_80_10_10() {
        let row: Vec<usize> = std::iter::once(START)
            .chain((0..98).map(|i| RESERVED_TOKENS + i % 50))
            .chain(std::iter::once(END))
            .collect();
        let batch = TokenBatch::new(&vec![row; 100]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_tokens(&batch, 60, 0.15, &mut rng);
        assert_eq!(m.rows.len(), 100 * 15);
        let masked = m.rows.iter().filter(|&&r| m.batch.ids()[r] == MASK).count() as f64 / m.rows.len() as f64;
        let same = m
            .rows
            .iter()
            .zip(&m.targets)
            .filter(|&(&r, &t)| m.batch.ids()[r] == t)
            .count() as f64
            / m.rows.len() as f64;
        assert!((masked - 0.8).abs() < 0.05, "{masked}");
        assert!(same > 0.07 && same < 0.16, "{same}");
    }
}
