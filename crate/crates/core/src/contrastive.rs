//! Similarities, InfoNCE, the memory bank, the negative queue and the BYOL
//! regression loss.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

const EPS: f64 = 1e-12;

/// `⟨a, b⟩ / (‖a‖ ‖b‖)`, with norms floored at 1e-12.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    dot / (na * nb)
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    v.iter().map(|x| x / n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub dim: usize,
    pub negatives: usize,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.dim == 0 {
            return invalid("embedding dimension must be positive");
        }
        Ok(())
    }
}

/// Where the negatives for a batch of queries come from.
#[derive(Clone, Copy, Debug)]
pub enum Negatives {
    None,
    /// `[B, m, d]`: a separate set for every query.
    PerQuery(Var),
    /// `[M, d]`: one set shared by all queries.
    Shared(Var),
}

/// Batch InfoNCE, averaged over queries. `q` and `k_pos` are `[B, d]` and
/// must already be L2-normalized.
///
/// ```
/// use pretext::contrastive::{info_nce, Negatives};
/// use pretext::tensor::{Tape, Tensor};
/// let mut tape = Tape::default();
/// let q = tape.constant(&Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
/// let n = tape.constant(&Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
/// let loss = info_nce(&mut tape, q, q, Negatives::Shared(n), 1.0).unwrap();
/// let want = (1.0 + (-1.0f64).exp()).ln();
/// assert!((tape.item(loss).unwrap() - want).abs() < 1e-6);
/// ```
pub fn info_nce(tape: &mut Tape, q: Var, k_pos: Var, negatives: Negatives, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    let qs = tape.shape(q).to_vec();
    if qs.len() != 2 || tape.shape(k_pos) != qs.as_slice() {
        return shape_err(format!("info_nce expects matching [B, d] inputs, got {qs:?} and {:?}", tape.shape(k_pos)));
    }
    let (b, d) = (qs[0], qs[1]);
    let prod = tape.mul(q, k_pos)?;
    let pos = tape.sum(prod, &[1], true)?;
    let logits = match negatives {
        Negatives::None => pos,
        Negatives::Shared(n) => {
            let ns = tape.shape(n).to_vec();
            if ns.len() != 2 || ns[1] != d {
                return shape_err(format!("shared negatives must be [M, {d}], got {ns:?}"));
            }
            let nt = tape.transpose(n)?;
            let neg = tape.matmul(q, nt)?;
            tape.concat(&[pos, neg], 1)?
        }
        Negatives::PerQuery(n) => {
            let ns = tape.shape(n).to_vec();
            if ns.len() != 3 || ns[0] != b || ns[2] != d {
                return shape_err(format!("per-query negatives must be [{b}, m, {d}], got {ns:?}"));
            }
            let q3 = tape.reshape(q, &[b, 1, d])?;
            let prod = tape.mul(n, q3)?;
            let neg = tape.sum(prod, &[2], false)?;
            tape.concat(&[pos, neg], 1)?
        }
    };
    let scaled = tape.mul_scalar(logits, 1.0 / tau)?;
    tape.cross_entropy(scaled, &vec![0; b])
}

/// `2 − 2·⟨q̂, ẑ⟩` averaged over the batch; inputs are `[B, d]`.
pub fn byol_loss(tape: &mut Tape, q: Var, z: Var) -> Result<Var> {
    if tape.shape(q) != tape.shape(z) || tape.shape(q).len() != 2 {
        return shape_err("byol_loss expects matching [B, d] inputs");
    }
    let qn = tape.l2_normalize(q, 1, EPS)?;
    let zn = tape.l2_normalize(z, 1, EPS)?;
    let prod = tape.mul(qn, zn)?;
    let cos = tape.sum(prod, &[1], false)?;
    let mean = tape.mean_all(cos)?;
    let scaled = tape.mul_scalar(mean, -2.0)?;
    tape.add_scalar(scaled, 2.0)
}

/// One unit-norm embedding per dataset index.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    n: usize,
    d: usize,
    momentum: f64,
    vectors: Vec<f64>,
}

impl MemoryBank {
    /// Rows drawn uniformly on the unit sphere (normalized Gaussians).
    pub fn new(n: usize, d: usize, momentum: f64, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return invalid("memory bank needs at least one row and one dimension");
        }
        if !(0.0..=1.0).contains(&momentum) {
            return invalid(format!("bank momentum {momentum} outside [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            vectors.extend(normalize(&row));
        }
        Ok(MemoryBank { n, d, momentum, vectors })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn lookup(&self, idx: usize) -> Result<&[f64]> {
        if idx >= self.n {
            return invalid(format!("bank index {idx} out of range for {} rows", self.n));
        }
        Ok(&self.vectors[idx * self.d..(idx + 1) * self.d])
    }

    /// `m` distinct row indices, uniformly without replacement, never `exclude`.
    pub fn sample_negatives<R: Rng + ?Sized>(&self, exclude: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
        if exclude >= self.n {
            return invalid(format!("bank index {exclude} out of range for {} rows", self.n));
        }
        if m > self.n - 1 {
            return invalid(format!("cannot draw {m} negatives from {} other rows", self.n - 1));
        }
        Ok(rand::seq::index::sample(rng, self.n - 1, m)
            .into_iter()
            .map(|i| if i >= exclude { i + 1 } else { i })
            .collect())
    }

    /// Stacks the given rows into a `[k, d]` tensor.
    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.lookup(i)?);
        }
        Tensor::from_vec(&[indices.len(), self.d], data)
    }

    /// `row ← normalize(m_b·row + (1 − m_b)·v)`.
    pub fn update(&mut self, idx: usize, v: &[f64]) -> Result<()> {
        if v.len() != self.d {
            return shape_err(format!("bank expects {}-vectors, got {}", self.d, v.len()));
        }
        let m = self.momentum;
        let mixed: Vec<f64> = self.lookup(idx)?.iter().zip(v).map(|(r, x)| m * r + (1.0 - m) * x).collect();
        // An antipodal update cancels out; fall back to the new vector.
        let row = if mixed.iter().map(|x| x * x).sum::<f64>() < 1e-24 { normalize(v) } else { normalize(&mixed) };
        self.vectors[idx * self.d..(idx + 1) * self.d].copy_from_slice(&row);
        Ok(())
    }
}

/// Fixed-capacity FIFO of embeddings, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Self {
        NegativeQueue { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push<I: IntoIterator<Item = Vec<f64>>>(&mut self, batch: I) {
        for v in batch {
            self.entries.push_back(v);
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
    }

    /// Owned copy of the contents, oldest to newest.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().cloned().collect()
    }

    /// The contents as an `[len, d]` tensor, or `None` when empty.
    pub fn as_tensor(&self) -> Result<Option<Tensor>> {
        let Some(first) = self.entries.front() else {
            return Ok(None);
        };
        let d = first.len();
        let data: Vec<f64> = self.entries.iter().flat_map(|v| v.iter().copied()).collect();
        Tensor::from_vec(&[self.entries.len(), d], data).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let a = [0.6, 0.8];
        assert!((cosine_sim(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&a, &[-0.6, -0.8]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &a), 0.0);
    }

    fn constant(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.constant(&Tensor::from_vec(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn no_negatives_gives_zero() {
        let mut tape = Tape::default();
        let q = constant(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let k = constant(&mut tape, &[2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let l = info_nce(&mut tape, q, k, Negatives::None, 0.1).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
        assert!(info_nce(&mut tape, q, k, Negatives::None, 0.0).is_err());
    }

    #[test]
    fn shared_and_per_query_agree() {
        let mut tape = Tape::default();
        let q = constant(&mut tape, &[2, 2], vec![0.6, 0.8, 1.0, 0.0]);
        let k = constant(&mut tape, &[2, 2], vec![0.8, 0.6, 0.0, 1.0]);
        let shared = constant(&mut tape, &[3, 2], vec![1.0, 0.0, 0.0, 1.0, -0.6, 0.8]);
        let per = constant(&mut tape, &[2, 3, 2], [1.0, 0.0, 0.0, 1.0, -0.6, 0.8].repeat(2));
        let a = info_nce(&mut tape, q, k, Negatives::Shared(shared), 0.5).unwrap();
        let b = info_nce(&mut tape, q, k, Negatives::PerQuery(per), 0.5).unwrap();
        assert!((tape.item(a).unwrap() - tape.item(b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn byol_cases() {
        for (z, want) in [(vec![2.0, 0.0], 0.0), (vec![-1.0, 0.0], 4.0), (vec![0.0, 3.0], 2.0)] {
            let mut tape = Tape::default();
            let q = constant(&mut tape, &[1, 2], vec![1.0, 0.0]);
            let z = constant(&mut tape, &[1, 2], z);
            let l = byol_loss(&mut tape, q, z).unwrap();
            assert!((tape.item(l).unwrap() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn bank_basics() {
        let bank = MemoryBank::new(100, 128, 0.5, 3).unwrap();
        for i in 0..100 {
            let n: f64 = bank.lookup(i).unwrap().iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(bank, MemoryBank::new(100, 128, 0.5, 3).unwrap());
        let mut total = 0.0;
        for i in 0..100 {
            for j in i + 1..100 {
                total += cosine_sim(bank.lookup(i).unwrap(), bank.lookup(j).unwrap()).abs();
            }
        }
        assert!(total / 4950.0 < 0.2);
        assert!(bank.lookup(100).is_err());
    }

    #[test]
    fn bank_sampling() {
        let bank = MemoryBank::new(2, 4, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(bank.sample_negatives(0, 1, &mut rng).unwrap(), vec![1]);
        }
        let bank = MemoryBank::new(20, 4, 0.5, 0).unwrap();
        for ex in 0..20 {
            let mut s = bank.sample_negatives(ex, 19, &mut rng).unwrap();
            assert!(!s.contains(&ex));
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 19);
        }
        assert!(bank.sample_negatives(0, 20, &mut rng).is_err());
    }

    #[test]
    fn bank_update_rule() {
        let v = normalize(&[1.0, 2.0, 3.0]);
        let mut bank = MemoryBank::new(3, 3, 0.0, 1).unwrap();
        bank.update(1, &v).unwrap();
        assert_eq!(bank.lookup(1).unwrap(), v.as_slice());
        let mut fixed = MemoryBank::new(3, 3, 1.0, 1).unwrap();
        let before = fixed.lookup(2).unwrap().to_vec();
        fixed.update(2, &v).unwrap();
        for (a, b) in fixed.lookup(2).unwrap().iter().zip(&before) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn queue_fifo() {
        let mut q = NegativeQueue::new(3);
        assert!(q.as_tensor().unwrap().is_none());
        for x in 0..4 {
            q.push([vec![x as f64]]);
        }
        assert_eq!(q.snapshot(), vec![vec![1.0], vec![2.0], vec![3.0]]);
        q.push((10..15).map(|x| vec![x as f64]));
        assert_eq!(q.snapshot(), vec![vec![12.0], vec![13.0], vec![14.0]]);
        let snap = q.snapshot();
        q.push([vec![99.0]]);
        assert_eq!(snap[2], vec![14.0]);
    }
}
