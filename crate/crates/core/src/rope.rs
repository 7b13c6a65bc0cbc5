//! Rotary position embedding over adjacent pairs `[2i, 2i+1]` ("chunks").
//!
//! Only the paired-adjacent layout is supported. A chunk set decides which
//! pairs get rotated; every other pair passes through unchanged.

use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be even and >= 2, got {head_dim}"
            )));
        }
        if !(base > 1.0 && base.is_finite()) {
            return Err(Error::Config(format!("rope base must be > 1, got {base}")));
        }
        Ok(Self { head_dim, base })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn n_chunks(&self) -> usize {
        self.head_dim / 2
    }

    /// `θ_i = base^(−2i/d_h)` for every chunk.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_chunks())
            .map(|i| self.base.powf(-2.0 * i as f64 / self.head_dim as f64))
            .collect()
    }
}

/// Strictly increasing set of chunk indices, all below `d_h / 2`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkSet {
    indices: Vec<usize>,
}

impl ChunkSet {
    /// Accepts indices in any order; duplicates and out-of-range values fail.
    pub fn new(mut indices: Vec<usize>, n_chunks: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Selection(format!("duplicate chunk index {}", w[0])));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_chunks) {
            return Err(Error::Selection(format!(
                "chunk index {bad} out of range for {n_chunks} chunks"
            )));
        }
        Ok(Self { indices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full(n_chunks: usize) -> Self {
        Self {
            indices: (0..n_chunks).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Chunks not in the set, ascending.
    pub fn complement(&self, n_chunks: usize) -> Vec<usize> {
        (0..n_chunks).filter(|&i| !self.contains(i)).collect()
    }

    /// Membership mask of length `n_chunks`.
    pub fn mask(&self, n_chunks: usize) -> Vec<bool> {
        let mut m = vec![false; n_chunks];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn with(&self, i: usize) -> Self {
        let mut indices = self.indices.clone();
        if let Err(pos) = indices.binary_search(&i) {
            indices.insert(pos, i);
        }
        Self { indices }
    }
}

impl fmt::Display for ChunkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.indices)
    }
}

fn check_len(v: &[f64], p: &RopeParams) -> Result<()> {
    if v.len() != p.head_dim {
        return Err(Error::Shape(format!(
            "head vector of length {} but head_dim is {}",
            v.len(),
            p.head_dim
        )));
    }
    Ok(())
}

/// Rotates each chunk in `chunks` by `position · θ_i`; other chunks are copied.
pub fn rotate(vec: &[f64], position: i64, chunks: &ChunkSet, p: &RopeParams) -> Result<Vec<f64>> {
    check_len(vec, p)?;
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, position, chunks.indices(), &p.frequencies());
    Ok(out)
}

/// Unchecked variant used on hot paths; `freqs` must come from the same params.
pub(crate) fn rotate_in_place(v: &mut [f64], position: i64, chunks: &[usize], freqs: &[f64]) {
    for &i in chunks {
        let (s, c) = (position as f64 * freqs[i]).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// `q_i R(φ) k_iᵀ` for one chunk.
#[inline]
pub(crate) fn chunk_rotated_dot(q: &[f64], k: &[f64], i: usize, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let (q0, q1, k0, k1) = (q[2 * i], q[2 * i + 1], k[2 * i], k[2 * i + 1]);
    c * (q0 * k0 + q1 * k1) + s * (q0 * k1 - q1 * k0)
}

#[inline]
pub(crate) fn chunk_dot(q: &[f64], k: &[f64], i: usize) -> f64 {
    q[2 * i] * k[2 * i] + q[2 * i + 1] * k[2 * i + 1]
}

/// Score in relative form: rotated chunks use `R((m − n) θ_i)`, the rest
/// contribute a plain dot product.
pub fn relative_score(
    q: &[f64],
    k: &[f64],
    m: i64,
    n: i64,
    chunks: &ChunkSet,
    p: &RopeParams,
) -> Result<f64> {
    check_len(q, p)?;
    check_len(k, p)?;
    let freqs = p.frequencies();
    let delta = (m - n) as f64;
    let mask = chunks.mask(p.n_chunks());
    Ok((0..p.n_chunks())
        .map(|i| {
            if mask[i] {
                chunk_rotated_dot(q, k, i, delta * freqs[i])
            } else {
                chunk_dot(q, k, i)
            }
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(RopeParams::new(3, 10_000.0).is_err());
        assert!(RopeParams::new(0, 10_000.0).is_err());
        assert!(RopeParams::new(4, 1.0).is_err());
        assert!(RopeParams::new(4, f64::NAN).is_err());
    }

    #[test]
    fn frequency_schedule() {
        let f = RopeParams::new(4, 10_000.0).unwrap().frequencies();
        assert_eq!(f[0], 1.0);
        assert!((f[1] - 0.01).abs() < 1e-15);

        let f = RopeParams::new(8, 10_000.0).unwrap().frequencies();
        let expected = [1.0, 10_000f64.powf(-0.25), 0.01, 10_000f64.powf(-0.75)];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(f.windows(2).all(|w| w[0] > w[1]));

        for base in [2.0, 500_000.0] {
            assert_eq!(RopeParams::new(16, base).unwrap().frequencies()[0], 1.0);
        }
    }

    #[test]
    fn chunk_set_rules() {
        assert!(ChunkSet::new(vec![1, 1], 4).is_err());
        assert!(ChunkSet::new(vec![4], 4).is_err());
        let s = ChunkSet::new(vec![3, 0], 4).unwrap();
        assert_eq!(s.indices(), &[0, 3]);
        assert_eq!(s.complement(4), vec![1, 2]);
        assert_eq!(s.with(2).indices(), &[0, 2, 3]);
        assert_eq!(s.with(3), s);
    }

    #[test]
    fn rotate_identities() {
        let p = RopeParams::new(8, 10_000.0).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(rotate(&v, 0, &ChunkSet::full(4), &p).unwrap(), v);
        assert_eq!(rotate(&v, 17, &ChunkSet::empty(), &p).unwrap(), v);
        assert!(rotate(&v[..6], 1, &ChunkSet::full(4), &p).is_err());

        let p2 = RopeParams::new(2, 10_000.0).unwrap();
        let r = rotate(&[1.0, 0.0], 1, &ChunkSet::full(1), &p2).unwrap();
        assert!((r[0] - 1f64.cos()).abs() < 1e-15);
        assert!((r[1] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn relative_score_special_cases() {
        let p = RopeParams::new(4, 10_000.0).unwrap();
        let q = [0.3, -1.2, 0.7, 2.0];
        let k = [1.1, 0.4, -0.5, 0.9];
        let plain: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        let full = ChunkSet::full(2);
        assert!((relative_score(&q, &k, 5, 5, &full, &p).unwrap() - plain).abs() < 1e-15);
        assert!(
            (relative_score(&q, &k, 9, 2, &ChunkSet::empty(), &p).unwrap() - plain).abs() < 1e-15
        );

        let rq = rotate(&q, 9, &full, &p).unwrap();
        let rk = rotate(&k, 2, &full, &p).unwrap();
        let abs: f64 = rq.iter().zip(&rk).map(|(a, b)| a * b).sum();
        assert!((relative_score(&q, &k, 9, 2, &full, &p).unwrap() - abs).abs() < 1e-10);
    }
}
