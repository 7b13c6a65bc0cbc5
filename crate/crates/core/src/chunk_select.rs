//! Per-head elite chunk selection.
//!
//! The greedy search grows each head's rotated set one chunk at a time,
//! always adding the chunk whose partial-rotation scores land closest (L1)
//! to the fully rotated reference scores. Scores are always recomputed from
//! the unrotated `q`, `K` captured in one reference pass, so already-elite
//! chunks are never rotated twice.
//!
//! All `(layer, head)` pairs advance in lockstep: each candidate slot of each
//! iteration is one batched "forward pass" over the calibration batch, which
//! makes the pass count independent of the number of layers and heads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::attention::{layer_inputs, softmax, AttentionWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::vecmat;
use crate::rope::{chunk_dot, chunk_rotated_dot, ChunkSet};

/// Exhaustive search refuses to enumerate more subsets than this per head.
pub const EXHAUSTIVE_LIMIT: u128 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionMethod {
    Ropelite,
    Uniform,
    Contribution,
    Exhaustive,
}

impl SelectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Ropelite => "ropelite",
            SelectionMethod::Uniform => "uniform",
            SelectionMethod::Contribution => "contribution",
            SelectionMethod::Exhaustive => "exhaustive",
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ropelite" => Ok(Self::Ropelite),
            "uniform" => Ok(Self::Uniform),
            "contribution" => Ok(Self::Contribution),
            "exhaustive" => Ok(Self::Exhaustive),
            other => Err(Error::Input(format!("unknown selection method {other:?}"))),
        }
    }
}

/// Which scores the L1 distance compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    /// Scaled logits `q·kᵀ / sqrt(d_h)`.
    #[default]
    PreSoftmax,
    /// Causal softmax rows of the scaled logits.
    PostSoftmax,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::PreSoftmax => "pre",
            ScoreMode::PostSoftmax => "post",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::PreSoftmax),
            "post" => Ok(Self::PostSoftmax),
            other => Err(Error::Input(format!("unknown score mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EliteSelection {
    pub method: SelectionMethod,
    pub r: usize,
    /// `[layer][head]`
    pub layers: Vec<Vec<ChunkSet>>,
}

impl EliteSelection {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Selection(format!(
                "{} layers in selection, model has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (l, heads) in self.layers.iter().enumerate() {
            if heads.len() != cfg.n_heads {
                return Err(Error::Selection(format!(
                    "layer {l} has {} heads, model has {}",
                    heads.len(),
                    cfg.n_heads
                )));
            }
            for (h, set) in heads.iter().enumerate() {
                if set.len() != self.r {
                    return Err(Error::Selection(format!(
                        "layer {l} head {h} has {} chunks, expected r={}",
                        set.len(),
                        self.r
                    )));
                }
                if set.indices().iter().any(|&i| i >= cfg.n_chunks()) {
                    return Err(Error::Selection(format!(
                        "layer {l} head {h} set {set} exceeds {} chunks",
                        cfg.n_chunks()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same set for every head of every layer.
    pub fn uniform_sets(cfg: &ModelConfig, method: SelectionMethod, set: ChunkSet) -> Self {
        Self {
            method,
            r: set.len(),
            layers: vec![vec![set; cfg.n_heads]; cfg.n_layers],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    sequences: Vec<Vec<Vec<f64>>>,
}

impl CalibrationBatch {
    pub fn new(sequences: Vec<Vec<Vec<f64>>>, embed_dim: usize) -> Result<Self> {
        if !sequences.iter().any(|s| s.len() >= 2) {
            return Err(Error::Input(
                "calibration needs at least one sequence of length >= 2".into(),
            ));
        }
        if let Some(bad) = sequences.iter().flatten().find(|x| x.len() != embed_dim) {
            return Err(Error::Input(format!(
                "calibration embedding of length {}, expected {embed_dim}",
                bad.len()
            )));
        }
        if sequences.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "calibration contains non-finite values".into(),
            ));
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<Vec<f64>>] {
        &self.sequences
    }

    pub fn embed_dim(&self) -> usize {
        self.sequences.iter().flatten().next().map_or(0, Vec::len)
    }
}

/// Counters exposed by the search routines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Batched passes over the calibration data, shared by all layers and heads.
    pub forward_passes: u64,
    /// Distance evaluations for a single head.
    pub candidate_evaluations_per_head: u64,
}

/// `r·(d_h/2) − r(r−1)/2 + 1`: one reference pass plus one pass per candidate slot.
pub fn expected_forward_passes(n_chunks: usize, r: usize) -> u64 {
    let (n, r) = (n_chunks as u64, r as u64);
    r * n - r * r.saturating_sub(1) / 2 + 1
}

/// Per-chunk score contributions for one head, over every causal pair of
/// every calibration sequence. Pair order: sequence, then query position `m`,
/// then key position `n ≤ m`.
struct HeadScores {
    n_chunks: usize,
    /// `[chunk][pair]`, unrotated contribution, pre-scaled.
    plain: Vec<Vec<f64>>,
    /// `[chunk][pair]`, contribution under `R((m − n) θ_i)`, pre-scaled.
    rotated: Vec<Vec<f64>>,
    /// `(start, len)` of each softmax row within the pair list.
    rows: Vec<(usize, usize)>,
    /// Reference scores (all chunks rotated), softmaxed in post mode.
    reference: Vec<f64>,
    mode: ScoreMode,
}

impl HeadScores {
    fn new(q: &[Vec<Vec<f64>>], k: &[Vec<Vec<f64>>], freqs: &[f64], mode: ScoreMode) -> Self {
        let n_chunks = freqs.len();
        let scale = 1.0 / ((2 * n_chunks) as f64).sqrt();
        let mut plain = vec![Vec::new(); n_chunks];
        let mut rotated = vec![Vec::new(); n_chunks];
        let mut rows = Vec::new();
        let mut start = 0;
        for (qs, ks) in q.iter().zip(k) {
            for m in 0..qs.len() {
                for n in 0..=m {
                    let delta = (m - n) as f64;
                    for i in 0..n_chunks {
                        plain[i].push(chunk_dot(&qs[m], &ks[n], i) * scale);
                        rotated[i]
                            .push(chunk_rotated_dot(&qs[m], &ks[n], i, delta * freqs[i]) * scale);
                    }
                }
                rows.push((start, m + 1));
                start += m + 1;
            }
        }
        let mut hs = Self {
            n_chunks,
            plain,
            rotated,
            rows,
            reference: Vec::new(),
            mode,
        };
        hs.reference = hs.scores(&vec![true; n_chunks]);
        hs
    }

    /// Scores with the masked chunks rotated, summed in chunk order.
    fn scores(&self, rotated: &[bool]) -> Vec<f64> {
        let n_pairs = self.plain.first().map_or(0, Vec::len);
        let mut s = vec![0.0; n_pairs];
        for i in 0..self.n_chunks {
            let src = if rotated[i] {
                &self.rotated[i]
            } else {
                &self.plain[i]
            };
            for (acc, v) in s.iter_mut().zip(src) {
                *acc += v;
            }
        }
        if self.mode == ScoreMode::PostSoftmax {
            for &(start, len) in &self.rows {
                softmax(&mut s[start..start + len]);
            }
        }
        s
    }

    fn distance(&self, rotated: &[bool]) -> f64 {
        self.scores(rotated)
            .iter()
            .zip(&self.reference)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    fn distance_of(&self, set: &ChunkSet) -> f64 {
        self.distance(&set.mask(self.n_chunks))
    }
}

/// Unrotated per-layer projections: `[layer][sequence][position] -> (q, k)`.
struct Activations {
    q: Vec<Vec<Vec<Vec<f64>>>>,
    k: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Activations {
    fn capture(
        cfg: &ModelConfig,
        weights: &AttentionWeights,
        calib: &CalibrationBatch,
    ) -> Result<Self> {
        if calib.embed_dim() != cfg.embed_dim {
            return Err(Error::Input(format!(
                "calibration width {} does not match embed_dim {}",
                calib.embed_dim(),
                cfg.embed_dim
            )));
        }
        let traces = calib
            .sequences()
            .par_iter()
            .map(|seq| layer_inputs(cfg, weights, seq))
            .collect::<Result<Vec<_>>>()?;
        let mut q = vec![Vec::with_capacity(traces.len()); cfg.n_layers];
        let mut k = vec![Vec::with_capacity(traces.len()); cfg.n_layers];
        for trace in &traces {
            for (l, inputs) in trace.iter().enumerate() {
                let lw = &weights.layers[l];
                q[l].push(
                    inputs
                        .iter()
                        .map(|x| vecmat(x, &lw.wq))
                        .collect::<Result<Vec<_>>>()?,
                );
                k[l].push(
                    inputs
                        .iter()
                        .map(|x| vecmat(x, &lw.wk))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        Ok(Self { q, k })
    }

    /// Head slices for one `(layer, head)`: `[sequence][position]`.
    fn head(
        &self,
        layer: usize,
        head: usize,
        dh: usize,
    ) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
        let slice = |src: &Vec<Vec<Vec<f64>>>| {
            src.iter()
                .map(|seq| {
                    seq.iter()
                        .map(|v| v[head * dh..(head + 1) * dh].to_vec())
                        .collect()
                })
                .collect()
        };
        (slice(&self.q[layer]), slice(&self.k[layer]))
    }
}

fn check_r(cfg: &ModelConfig, r: usize) -> Result<()> {
    if r == 0 || r > cfg.n_chunks() {
        return Err(Error::Rank {
            rank: r,
            min: 1,
            max: cfg.n_chunks(),
        });
    }
    Ok(())
}

fn head_scores(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
    mode: ScoreMode,
) -> Result<Vec<HeadScores>> {
    weights.validate(cfg)?;
    let acts = Activations::capture(cfg, weights, calib)?;
    let freqs = cfg.rope.frequencies();
    let pairs: Vec<(usize, usize)> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h)))
        .collect();
    Ok(pairs
        .par_iter()
        .map(|&(l, h)| {
            let (q, k) = acts.head(l, h, cfg.head_dim);
            HeadScores::new(&q, &k, &freqs, mode)
        })
        .collect())
}

fn regroup(cfg: &ModelConfig, flat: Vec<ChunkSet>) -> Vec<Vec<ChunkSet>> {
    let mut it = flat.into_iter();
    (0..cfg.n_layers)
        .map(|_| it.by_ref().take(cfg.n_heads).collect())
        .collect()
}

/// Greedy elite-chunk search.
pub fn ropelite_search(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
    r: usize,
    mode: ScoreMode,
) -> Result<(EliteSelection, SearchStats)> {
    check_r(cfg, r)?;
    let heads = head_scores(cfg, weights, calib, mode)?;
    let n_chunks = cfg.n_chunks();
    let mut stats = SearchStats {
        forward_passes: 1,
        candidate_evaluations_per_head: 0,
    };
    let mut chosen: Vec<Vec<bool>> = vec![vec![false; n_chunks]; heads.len()];

    for iter in 0..r {
        let slots = n_chunks - iter;
        stats.forward_passes += slots as u64;
        stats.candidate_evaluations_per_head += slots as u64;
        let picks: Vec<usize> = heads
            .par_iter()
            .zip(&chosen)
            .map(|(hs, mask)| {
                let mut best: Option<(usize, f64)> = None;
                for j in (0..n_chunks).filter(|&j| !mask[j]) {
                    let mut cand = mask.clone();
                    cand[j] = true;
                    let dist = hs.distance(&cand);
                    if best.is_none_or(|(_, b)| dist < b) {
                        best = Some((j, dist));
                    }
                }
                best.expect("complement is non-empty while iter < r <= n_chunks")
                    .0
            })
            .collect();
        for (mask, j) in chosen.iter_mut().zip(picks) {
            mask[j] = true;
        }
    }

    let flat = chosen
        .iter()
        .map(|m| ChunkSet::new((0..n_chunks).filter(|&i| m[i]).collect(), n_chunks))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        EliteSelection {
            method: SelectionMethod::Ropelite,
            r,
            layers: regroup(cfg, flat),
        },
        stats,
    ))
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Advances `c` to the next `k`-combination of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Best subset of size `r` per head by full enumeration; ties go to the
/// lexicographically smallest subset.
pub fn exhaustive_search(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
    r: usize,
    mode: ScoreMode,
) -> Result<EliteSelection> {
    check_r(cfg, r)?;
    let n_chunks = cfg.n_chunks();
    let size = binomial(n_chunks, r);
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchSpace {
            size,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let heads = head_scores(cfg, weights, calib, mode)?;
    let flat: Vec<ChunkSet> = heads
        .par_iter()
        .map(|hs| {
            let mut combo: Vec<usize> = (0..r).collect();
            let mut best = (combo.clone(), f64::INFINITY);
            loop {
                let mut mask = vec![false; n_chunks];
                for &i in &combo {
                    mask[i] = true;
                }
                let dist = hs.distance(&mask);
                if dist < best.1 {
                    best = (combo.clone(), dist);
                }
                if !next_combination(&mut combo, n_chunks) {
                    break;
                }
            }
            ChunkSet::new(best.0, n_chunks)
        })
        .collect::<Result<_>>()?;
    Ok(EliteSelection {
        method: SelectionMethod::Exhaustive,
        r,
        layers: regroup(cfg, flat),
    })
}

/// Evenly spaced chunks `floor(j · (d_h/2) / r)`, identical for every head.
pub fn uniform_select(cfg: &ModelConfig, r: usize) -> Result<EliteSelection> {
    check_r(cfg, r)?;
    let n = cfg.n_chunks();
    let set = ChunkSet::new((0..r).map(|j| j * n / r).collect(), n)?;
    Ok(EliteSelection::uniform_sets(
        cfg,
        SelectionMethod::Uniform,
        set,
    ))
}

/// Per-chunk contribution `mean_t ‖q_{t,i}‖·‖k_{t,i}‖` for every head,
/// `[layer][head][chunk]`.
pub fn chunk_contributions(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
) -> Result<Vec<Vec<Vec<f64>>>> {
    weights.validate(cfg)?;
    let acts = Activations::capture(cfg, weights, calib)?;
    let n_chunks = cfg.n_chunks();
    let n_tokens: usize = calib.sequences().iter().map(Vec::len).sum();
    let norm = |v: &[f64], i: usize| (v[2 * i] * v[2 * i] + v[2 * i + 1] * v[2 * i + 1]).sqrt();
    Ok((0..cfg.n_layers)
        .map(|l| {
            (0..cfg.n_heads)
                .map(|h| {
                    let (q, k) = acts.head(l, h, cfg.head_dim);
                    (0..n_chunks)
                        .map(|i| {
                            let total: f64 = q
                                .iter()
                                .flatten()
                                .zip(k.iter().flatten())
                                .map(|(qt, kt)| norm(qt, i) * norm(kt, i))
                                .sum();
                            total / n_tokens as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Top-`r` chunks by contribution; ties go to the smaller index.
pub fn contribution_select(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
    r: usize,
) -> Result<EliteSelection> {
    check_r(cfg, r)?;
    let contrib = chunk_contributions(cfg, weights, calib)?;
    let n = cfg.n_chunks();
    let layers = contrib
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|scores| {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                    ChunkSet::new(order[..r].to_vec(), n)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EliteSelection {
        method: SelectionMethod::Contribution,
        r,
        layers,
    })
}

/// L1 distance of each head's selected set to the full-rotation reference,
/// `[layer][head]`.
pub fn selection_distances(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
    selection: &EliteSelection,
    mode: ScoreMode,
) -> Result<Vec<Vec<f64>>> {
    selection.validate(cfg)?;
    let heads = head_scores(cfg, weights, calib, mode)?;
    let flat: Vec<f64> = heads
        .iter()
        .zip(selection.layers.iter().flatten())
        .map(|(hs, set)| hs.distance_of(set))
        .collect();
    Ok(flat.chunks(cfg.n_heads).map(<[f64]>::to_vec).collect())
}

/// Dispatches on `method`. Returns search stats for the greedy search only.
pub fn select(
    method: SelectionMethod,
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    calib: &CalibrationBatch,
    r: usize,
    mode: ScoreMode,
) -> Result<(EliteSelection, Option<SearchStats>)> {
    match method {
        SelectionMethod::Ropelite => {
            ropelite_search(cfg, weights, calib, r, mode).map(|(s, st)| (s, Some(st)))
        }
        SelectionMethod::Exhaustive => Ok((exhaustive_search(cfg, weights, calib, r, mode)?, None)),
        SelectionMethod::Uniform => Ok((uniform_select(cfg, r)?, None)),
        SelectionMethod::Contribution => Ok((contribution_select(cfg, weights, calib, r)?, None)),
    }
}
