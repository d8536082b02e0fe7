use std::collections::VecDeque;

use crate::tensor::{Tensor, TensorError};

/// FIFO store of past text embeddings for nearest-neighbor retrieval.
///
/// Every entry remembers the step that inserted it; lookups during that
/// step skip it, so a batch never retrieves its own texts.
#[derive(Clone, Debug, PartialEq)]
pub struct NNQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Vec<f64>, u64)>,
}

impl NNQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry `i`, oldest first.
    pub fn get(&self, i: usize) -> &[f64] {
        &self.entries[i].0
    }

    pub fn push(&mut self, v: Vec<f64>, step: u64) {
        assert_eq!(v.len(), self.dim, "queue entry dimension");
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "queue entries must be unit vectors (norm {norm})");
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((v, step));
    }

    pub fn extend(&mut self, vs: impl IntoIterator<Item = Vec<f64>>, step: u64) {
        for v in vs {
            self.push(v, step);
        }
    }

    /// Index of the entry with the highest cosine similarity to `query`,
    /// ignoring entries inserted at `step`. Ties go to the oldest entry.
    pub fn nearest(&self, query: &[f64], step: u64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (v, stamp)) in self.entries.iter().enumerate() {
            if *stamp == step {
                continue;
            }
            let sim: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Neighbors for every query, or `None` if no entry is eligible.
    pub fn retrieve(&self, queries: &[Vec<f64>], step: u64) -> Option<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|q| self.nearest(q, step).map(|i| self.get(i).to_vec()))
            .collect()
    }

    /// Entries as `[len × dim]` plus their insertion steps.
    pub fn to_tensors(&self) -> Option<(Tensor, Tensor)> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flat_map(|(v, _)| v.iter().copied()).collect();
        let steps = self.entries.iter().map(|&(_, s)| s as f64).collect();
        Some((
            Tensor::new(vec![self.len(), self.dim], data).expect("queue shape"),
            Tensor::new(vec![self.len()], steps).expect("queue steps"),
        ))
    }

    pub fn from_tensors(capacity: usize, dim: usize, parts: Option<(&Tensor, &Tensor)>) -> Result<Self, TensorError> {
        let mut q = Self::new(capacity, dim);
        if let Some((vectors, steps)) = parts {
            let n = steps.numel();
            if vectors.shape() != [n, dim] || n > capacity {
                return Err(TensorError::Contract(format!(
                    "queue state {:?} does not fit capacity {capacity} and dimension {dim}",
                    vectors.shape()
                )));
            }
            for i in 0..n {
                q.entries.push_back((vectors.row(i).to_vec(), steps.data()[i] as u64));
            }
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn fifo_eviction_in_order() {
        let mut q = NNQueue::new(3, 4);
        for i in 0..5 {
            q.push(unit(i % 4, 4), i as u64);
        }
        assert_eq!(q.len(), 3);
        assert_eq!(q.get(0), unit(2, 4).as_slice());
        assert_eq!(q.get(1), unit(3, 4).as_slice());
        assert_eq!(q.get(2), unit(0, 4).as_slice());
    }

    #[test]
    fn same_step_entries_are_invisible() {
        let mut q = NNQueue::new(8, 2);
        q.push(unit(0, 2), 1);
        q.push(unit(1, 2), 2);
        assert_eq!(q.nearest(&unit(1, 2), 2), Some(0));
        assert_eq!(q.nearest(&unit(1, 2), 3), Some(1));
        let mut fresh = NNQueue::new(4, 2);
        fresh.push(unit(0, 2), 7);
        assert_eq!(fresh.nearest(&unit(0, 2), 7), None);
        assert!(fresh.retrieve(&[unit(0, 2)], 7).is_none());
    }

    #[test]
    fn ties_pick_oldest() {
        let mut q = NNQueue::new(4, 2);
        q.push(unit(0, 2), 0);
        q.push(unit(0, 2), 0);
        assert_eq!(q.nearest(&unit(0, 2), 1), Some(0));
    }

    #[test]
    fn tensor_round_trip() {
        let mut q = NNQueue::new(4, 2);
        q.push(unit(0, 2), 3);
        q.push(unit(1, 2), 4);
        let (v, s) = q.to_tensors().unwrap();
        assert_eq!(NNQueue::from_tensors(4, 2, Some((&v, &s))).unwrap(), q);
        assert!(NNQueue::from_tensors(1, 2, Some((&v, &s))).is_err());
    }
}
