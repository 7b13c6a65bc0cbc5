//! Low-rank factorization of the non-elite key projection and the value
//! projection, plus the parameter and cache accounting around it.
//!
//! Separate mode (S-LRD) factorizes `W^k_rest ≈ A^k B^k` and `W^v ≈ A^v B^v`
//! independently. Joint mode (J-LRD) factorizes `[W^k_rest ‖ W^v] ≈ A^kv B^kv`
//! and splits `B^kv` column-wise into `[B^k ‖ B^v]`, so one latent per token
//! serves both keys and values.

use num_rational::Ratio;
use rayon::prelude::*;

use crate::attention::ModelConfig;
use crate::chunk_select::EliteSelection;
use crate::error::{Error, Result};
use crate::linalg::{factors_from_svd, matmul, svd, Matrix, SvdResult};
use crate::rope::ChunkSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorMode {
    Slrd,
    Jlrd,
}

impl FactorMode {
    pub fn name(self) -> &'static str {
        match self {
            FactorMode::Slrd => "slrd",
            FactorMode::Jlrd => "jlrd",
        }
    }
}

impl std::str::FromStr for FactorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slrd" => Ok(Self::Slrd),
            "jlrd" => Ok(Self::Jlrd),
            other => Err(Error::Input(format!(
                "unknown factorization mode {other:?}"
            ))),
        }
    }
}

/// Where each key column went when `W^k` was split by elite membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyLayout {
    pub n_heads: usize,
    pub head_dim: usize,
    /// Elite chunks per head.
    pub r: usize,
    pub elite: Vec<ChunkSet>,
    /// Original `W^k` column for each column of the elite block.
    pub elite_cols: Vec<usize>,
    /// Original `W^k` column for each column of the rest block.
    pub rest_cols: Vec<usize>,
}

impl KeyLayout {
    pub fn new(elite: &[ChunkSet], head_dim: usize) -> Result<Self> {
        let n_chunks = head_dim / 2;
        let r = elite.first().map_or(0, ChunkSet::len);
        if elite.iter().any(|s| s.len() != r) {
            return Err(Error::Selection(
                "elite sets differ in size across heads".into(),
            ));
        }
        if let Some(bad) = elite
            .iter()
            .find(|s| s.indices().iter().any(|&i| i >= n_chunks))
        {
            return Err(Error::Selection(format!(
                "chunk set {bad} exceeds {n_chunks} chunks"
            )));
        }
        let mut elite_cols = Vec::with_capacity(2 * r * elite.len());
        let mut rest_cols = Vec::with_capacity((head_dim - 2 * r) * elite.len());
        for (h, set) in elite.iter().enumerate() {
            let base = h * head_dim;
            for i in 0..n_chunks {
                let dst = if set.contains(i) {
                    &mut elite_cols
                } else {
                    &mut rest_cols
                };
                dst.extend([base + 2 * i, base + 2 * i + 1]);
            }
        }
        Ok(Self {
            n_heads: elite.len(),
            head_dim,
            r,
            elite: elite.to_vec(),
            elite_cols,
            rest_cols,
        })
    }

    pub fn kv_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Scatters an elite block and a rest block back into original column order.
    pub fn merge(&self, elite: &Matrix, rest: &Matrix) -> Result<Matrix> {
        if elite.cols() != self.elite_cols.len()
            || rest.cols() != self.rest_cols.len()
            || elite.rows() != rest.rows()
        {
            return Err(Error::Shape("blocks do not match key layout".into()));
        }
        let mut out = Matrix::zeros(elite.rows(), self.kv_dim());
        for r in 0..elite.rows() {
            for (j, &c) in self.elite_cols.iter().enumerate() {
                out.set(r, c, elite.get(r, j));
            }
            for (j, &c) in self.rest_cols.iter().enumerate() {
                out.set(r, c, rest.get(r, j));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeySplit {
    /// `d × 2r·n_h`
    pub elite: Matrix,
    /// `d × (d_h·n_h − 2r·n_h)`
    pub rest: Matrix,
    pub layout: KeyLayout,
}

/// Splits one layer's `W^k` by that layer's elite chunks.
pub fn split_key_projection(wk: &Matrix, elite: &EliteSelection, layer: usize) -> Result<KeySplit> {
    let sets = elite
        .layers
        .get(layer)
        .ok_or_else(|| Error::Selection(format!("no elite sets for layer {layer}")))?;
    let n_heads = sets.len().max(1);
    if !wk.cols().is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "{} key columns do not divide into {n_heads} heads",
            wk.cols()
        )));
    }
    split_key_columns(wk, sets, wk.cols() / n_heads)
}

pub fn split_key_columns(wk: &Matrix, sets: &[ChunkSet], head_dim: usize) -> Result<KeySplit> {
    let layout = KeyLayout::new(sets, head_dim)?;
    if wk.cols() != layout.kv_dim() {
        return Err(Error::Shape(format!(
            "W^k has {} columns, layout needs {}",
            wk.cols(),
            layout.kv_dim()
        )));
    }
    Ok(KeySplit {
        elite: wk.select_columns(&layout.elite_cols)?,
        rest: wk.select_columns(&layout.rest_cols)?,
        layout,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factorization {
    Joint {
        a_kv: Matrix,
        b_k: Matrix,
        b_v: Matrix,
    },
    Separate {
        a_k: Matrix,
        b_k: Matrix,
        a_v: Matrix,
        b_v: Matrix,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub factorization: Factorization,
    pub layout: KeyLayout,
}

impl LowRankFactors {
    pub fn mode(&self) -> FactorMode {
        match self.factorization {
            Factorization::Joint { .. } => FactorMode::Jlrd,
            Factorization::Separate { .. } => FactorMode::Slrd,
        }
    }

    /// Key-side latent width: `d_ckv` or `d_ck`.
    pub fn key_rank(&self) -> usize {
        self.a_k().cols()
    }

    /// Value-side latent width: `d_ckv` or `d_cv`.
    pub fn value_rank(&self) -> usize {
        self.a_v().cols()
    }

    /// Cached latent reals per token.
    pub fn latent_width(&self) -> usize {
        match self.mode() {
            FactorMode::Jlrd => self.key_rank(),
            FactorMode::Slrd => self.key_rank() + self.value_rank(),
        }
    }

    pub fn a_k(&self) -> &Matrix {
        match &self.factorization {
            Factorization::Joint { a_kv, .. } => a_kv,
            Factorization::Separate { a_k, .. } => a_k,
        }
    }

    pub fn a_v(&self) -> &Matrix {
        match &self.factorization {
            Factorization::Joint { a_kv, .. } => a_kv,
            Factorization::Separate { a_v, .. } => a_v,
        }
    }

    pub fn b_k(&self) -> &Matrix {
        match &self.factorization {
            Factorization::Joint { b_k, .. } | Factorization::Separate { b_k, .. } => b_k,
        }
    }

    pub fn b_v(&self) -> &Matrix {
        match &self.factorization {
            Factorization::Joint { b_v, .. } | Factorization::Separate { b_v, .. } => b_v,
        }
    }

    /// `B^kv = [B^k ‖ B^v]` for joint factors.
    pub fn b_kv(&self) -> Option<Matrix> {
        match &self.factorization {
            Factorization::Joint { b_k, b_v, .. } => Matrix::hconcat(&[b_k, b_v]).ok(),
            Factorization::Separate { .. } => None,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let l = &self.layout;
        if l.n_heads != cfg.n_heads || l.head_dim != cfg.head_dim {
            return Err(Error::Shape(
                "factor layout does not match model config".into(),
            ));
        }
        let d = cfg.embed_dim;
        let rest = l.rest_cols.len();
        let kv = cfg.kv_dim();
        let (ak, bk, av, bv) = (self.a_k(), self.b_k(), self.a_v(), self.b_v());
        let ok = ak.rows() == d
            && av.rows() == d
            && bk.shape() == (ak.cols(), rest)
            && bv.shape() == (av.cols(), kv);
        if !ok {
            return Err(Error::Shape(format!(
                "factor shapes A^k {:?} B^k {:?} A^v {:?} B^v {:?} inconsistent with d={d}, rest={rest}, kv={kv}",
                ak.shape(),
                bk.shape(),
                av.shape(),
                bv.shape()
            )));
        }
        Ok(())
    }

    /// `(Ŵ^k, Ŵ^v)` with the elite key columns taken verbatim from `wk_elite`.
    pub fn reassemble(&self, wk_elite: &Matrix) -> Result<(Matrix, Matrix)> {
        let rest = matmul(self.a_k(), self.b_k())?;
        let wk = self.layout.merge(wk_elite, &rest)?;
        let wv = matmul(self.a_v(), self.b_v())?;
        Ok((wk, wv))
    }
}

/// Rank-`rank` truncation, allowing `rank == 0` (empty factors).
fn truncate(s: Option<&SvdResult>, rows: usize, cols: usize, rank: usize) -> (Matrix, Matrix) {
    match s {
        Some(s) if rank > 0 => factors_from_svd(s, rank),
        _ => (Matrix::zeros(rows, 0), Matrix::zeros(0, cols)),
    }
}

fn svd_if_nonempty(m: &Matrix) -> Result<Option<SvdResult>> {
    if m.rows() == 0 || m.cols() == 0 {
        Ok(None)
    } else {
        svd(m).map(Some)
    }
}

fn check_rank(rank: usize, min: usize, max: usize) -> Result<()> {
    if rank < min || rank > max {
        return Err(Error::Rank { rank, min, max });
    }
    Ok(())
}

/// Joint factorization of `[W^k_rest ‖ W^v]` at rank `d_ckv`.
pub fn decompose_jlrd(split: &KeySplit, wv: &Matrix, d_ckv: usize) -> Result<LowRankFactors> {
    let joint = Matrix::hconcat(&[&split.rest, wv])?;
    check_rank(d_ckv, 1, joint.rows().min(joint.cols()))?;
    let s = svd(&joint)?;
    let (a_kv, b_kv) = factors_from_svd(&s, d_ckv);
    let k_cols = split.rest.cols();
    Ok(LowRankFactors {
        factorization: Factorization::Joint {
            a_kv,
            b_k: b_kv.column_block(0, k_cols)?,
            b_v: b_kv.column_block(k_cols, b_kv.cols())?,
        },
        layout: split.layout.clone(),
    })
}

/// Independent factorizations at ranks `d_ck` (may be 0 when no key columns
/// remain) and `d_cv`.
pub fn decompose_slrd(
    split: &KeySplit,
    wv: &Matrix,
    d_ck: usize,
    d_cv: usize,
) -> Result<LowRankFactors> {
    if split.rest.rows() != wv.rows() {
        return Err(Error::Shape("W^k_rest and W^v row counts differ".into()));
    }
    check_rank(d_ck, 0, split.rest.rows().min(split.rest.cols()))?;
    check_rank(d_cv, 1, wv.rows().min(wv.cols()))?;
    let sk = if d_ck > 0 {
        svd_if_nonempty(&split.rest)?
    } else {
        None
    };
    let (a_k, b_k) = truncate(sk.as_ref(), split.rest.rows(), split.rest.cols(), d_ck);
    let (a_v, b_v) = factors_from_svd(&svd(wv)?, d_cv);
    Ok(LowRankFactors {
        factorization: Factorization::Separate { a_k, b_k, a_v, b_v },
        layout: split.layout.clone(),
    })
}

/// Per-layer storage and cache accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    /// `W^k` plus `W^v` parameters of the unmodified layer, `2·d·d_h·n_h`.
    pub params_original: u64,
    /// Parameters after the split and factorization.
    pub params_after: u64,
    /// Cached reals per token per layer.
    pub cache_per_token_layer: u64,
    /// `cache_per_token_layer / (2·d_h·n_h)`.
    pub cache_ratio: Ratio<u64>,
}

impl CostReport {
    fn new(cfg: &ModelConfig, params_after: i128, cache: u64) -> Self {
        let kv = cfg.kv_dim() as u64;
        Self {
            params_original: 2 * cfg.embed_dim as u64 * kv,
            params_after: u64::try_from(params_after).expect("parameter count is non-negative"),
            cache_per_token_layer: cache,
            cache_ratio: Ratio::new(cache, 2 * kv),
        }
    }

    pub fn cache_percent(&self) -> f64 {
        *self.cache_ratio.numer() as f64 * 100.0 / *self.cache_ratio.denom() as f64
    }
}

/// `(2d_ck + 2d_cv + 2r·n_h)·d − 2d_ck·r·n_h`, valid because `d = d_h·n_h`.
pub fn cost_slrd(cfg: &ModelConfig, r: usize, d_ck: usize, d_cv: usize) -> CostReport {
    let (d, rn) = (cfg.embed_dim as i128, (r * cfg.n_heads) as i128);
    let (ck, cv) = (d_ck as i128, d_cv as i128);
    let params = (2 * ck + 2 * cv + 2 * rn) * d - 2 * ck * rn;
    CostReport::new(cfg, params, (2 * r * cfg.n_heads + d_ck + d_cv) as u64)
}

/// `2r·n_h·d + 3d_ckv·d − 2d_ckv·r·n_h`, valid because `d = d_h·n_h`.
pub fn cost_jlrd(cfg: &ModelConfig, r: usize, d_ckv: usize) -> CostReport {
    let (d, rn, c) = (
        cfg.embed_dim as i128,
        (r * cfg.n_heads) as i128,
        d_ckv as i128,
    );
    let params = 2 * rn * d + 3 * c * d - 2 * c * rn;
    CostReport::new(cfg, params, (2 * r * cfg.n_heads + d_ckv) as u64)
}

/// Splits a latent budget between `d_ck` and `d_cv` by repeatedly granting
/// one rank to whichever side drops the larger squared singular value.
/// Starts at `(1, 1)`; keys win ties.
pub fn greedy_rank_split(
    sigma_k: &[f64],
    sigma_v: &[f64],
    latent_budget: usize,
) -> Result<(usize, usize)> {
    if latent_budget < 2 || sigma_k.is_empty() || sigma_v.is_empty() {
        return Err(Error::Budget(format!(
            "latent budget {latent_budget} cannot seed ranks (1, 1)"
        )));
    }
    if latent_budget > sigma_k.len() + sigma_v.len() {
        return Err(Error::Budget(format!(
            "latent budget {latent_budget} exceeds combined max rank {}",
            sigma_k.len() + sigma_v.len()
        )));
    }
    let (mut ck, mut cv) = (1, 1);
    while ck + cv < latent_budget {
        let gk = sigma_k.get(ck).map(|s| s * s);
        let gv = sigma_v.get(cv).map(|s| s * s);
        match (gk, gv) {
            (Some(a), Some(b)) if a >= b => ck += 1,
            (Some(_), Some(_)) => cv += 1,
            (Some(_), None) => ck += 1,
            (None, Some(_)) => cv += 1,
            (None, None) => unreachable!("budget bounded by combined rank"),
        }
    }
    Ok((ck, cv))
}

/// `Σ_{i ≥ rank} σ_i²`, the squared Frobenius error of a rank-`rank` truncation.
pub fn tail_energy(sigma: &[f64], rank: usize) -> f64 {
    sigma.iter().skip(rank).map(|s| s * s).sum()
}

/// Greedy S-LRD split for a total per-token cache budget.
pub fn allocate_slrd_split(
    wk_rest: &Matrix,
    wv: &Matrix,
    cache_budget: usize,
    r: usize,
    cfg: &ModelConfig,
) -> Result<(usize, usize)> {
    let elite = 2 * r * cfg.n_heads;
    if cache_budget < elite + 2 {
        return Err(Error::Budget(format!(
            "budget {cache_budget} below minimum {} for r={r}",
            elite + 2
        )));
    }
    let sk = svd_if_nonempty(wk_rest)?
        .map(|s| s.sigma)
        .unwrap_or_default();
    let sv = svd(wv)?.sigma;
    greedy_rank_split(&sk, &sv, cache_budget - elite)
}

/// One `(r, d_ckv)` candidate of the allocation search.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedConfig {
    pub r: usize,
    pub d_ckv: usize,
    pub cost: CostReport,
    /// Lower is better.
    pub proxy: f64,
}

/// Allocation constraints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AllocationRequest {
    pub target_ratio: f64,
    /// `d_ckv` must be a multiple of this.
    pub alignment: usize,
    /// Accept any cache width whose ratio is within this distance of the
    /// target. Zero means exactly `round(target · 2·d_h·n_h)`.
    pub tolerance: f64,
}

/// Enumerates every joint configuration that hits the cache target, keeps
/// `d_ckv` aligned, and does not add parameters, then ranks by `proxy`
/// (ties: closeness to target, then smaller `r`, then smaller `d_ckv`).
pub fn allocate_configs<F>(
    cfg: &ModelConfig,
    req: AllocationRequest,
    proxy: F,
) -> Result<Vec<RankedConfig>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    if !(req.target_ratio > 0.0 && req.target_ratio <= 1.0) {
        return Err(Error::Input(format!(
            "target ratio must be in (0, 1], got {}",
            req.target_ratio
        )));
    }
    if req.alignment == 0 {
        return Err(Error::Input("alignment must be >= 1".into()));
    }
    if req.tolerance.is_nan() || req.tolerance < 0.0 {
        return Err(Error::Input("tolerance must be non-negative".into()));
    }
    let full = cfg.full_cache_width();
    let target_width = req.target_ratio * full as f64;
    let width_ok = |w: usize| {
        if req.tolerance == 0.0 {
            w == target_width.round() as usize
        } else {
            (w as f64 / full as f64 - req.target_ratio).abs() <= req.tolerance + 1e-12
        }
    };

    let all = feasible_configs(cfg, req.alignment);
    let chosen: Vec<(usize, usize, CostReport)> = all
        .iter()
        .filter(|(_, _, c)| width_ok(c.cache_per_token_layer as usize))
        .cloned()
        .collect();

    if chosen.is_empty() {
        let mut widths: Vec<u64> = all.iter().map(|c| c.2.cache_per_token_layer).collect();
        widths.sort_unstable();
        widths.dedup();
        widths.sort_by(|a, b| {
            let da = (*a as f64 - target_width).abs();
            let db = (*b as f64 - target_width).abs();
            da.total_cmp(&db).then(a.cmp(b))
        });
        let nearest = widths
            .iter()
            .take(3)
            .map(|w| format!("{w}/{full} ({:.3}%)", *w as f64 * 100.0 / full as f64))
            .collect();
        return Err(Error::Infeasible {
            target: req.target_ratio,
            nearest,
        });
    }

    let scored: Vec<RankedConfig> = chosen
        .par_iter()
        .map(|&(r, d_ckv, cost)| {
            Ok(RankedConfig {
                r,
                d_ckv,
                cost,
                proxy: proxy(r, d_ckv)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut ranked = scored;
    ranked.sort_by(|a, b| {
        let da = (a.cost.cache_per_token_layer as f64 - target_width).abs();
        let db = (b.cost.cache_per_token_layer as f64 - target_width).abs();
        a.proxy
            .total_cmp(&b.proxy)
            .then(da.total_cmp(&db))
            .then(a.r.cmp(&b.r))
            .then(a.d_ckv.cmp(&b.d_ckv))
    });
    Ok(ranked)
}

/// Every `(r, d_ckv)` with aligned `d_ckv` and no parameter growth.
pub fn feasible_configs(cfg: &ModelConfig, alignment: usize) -> Vec<(usize, usize, CostReport)> {
    let mut out = Vec::new();
    for r in 0..=cfg.n_chunks() {
        let max_ckv = cfg.embed_dim.min(2 * cfg.kv_dim() - 2 * r * cfg.n_heads);
        for d_ckv in (0..=max_ckv).step_by(alignment) {
            let cost = cost_jlrd(cfg, r, d_ckv);
            if cost.params_after <= cost.params_original {
                out.push((r, d_ckv, cost));
            }
        }
    }
    out
}

/// Frobenius proxy: `sqrt(Σ_layers Σ_{i ≥ d_ckv} σ_i²)` of `[W^k_rest ‖ W^v]`,
/// with spectra cached per `r`.
pub struct FrobeniusProxy {
    /// `spectra[r][layer]`; `None` for `r` values not supplied.
    spectra: Vec<Option<Vec<Vec<f64>>>>,
}

impl FrobeniusProxy {
    /// `selections[r]` supplies the elite sets used for each `r` considered.
    pub fn new(
        wk: &[&Matrix],
        wv: &[&Matrix],
        selections: &[Option<EliteSelection>],
        head_dim: usize,
    ) -> Result<Self> {
        let spectra = selections
            .par_iter()
            .map(|sel| {
                sel.as_ref()
                    .map(|sel| {
                        wk.iter()
                            .zip(wv)
                            .enumerate()
                            .map(|(l, (wk, wv))| {
                                let split = split_key_columns(wk, &sel.layers[l], head_dim)?;
                                let joint = Matrix::hconcat(&[&split.rest, wv])?;
                                Ok(svd(&joint)?.sigma)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spectra })
    }

    pub fn error(&self, r: usize, d_ckv: usize) -> Result<f64> {
        let layers = self
            .spectra
            .get(r)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Input(format!("no elite selection supplied for r={r}")))?;
        Ok(layers
            .iter()
            .map(|s| tail_energy(s, d_ckv))
            .sum::<f64>()
            .sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(v: &[usize], n: usize) -> ChunkSet {
        ChunkSet::new(v.to_vec(), n).unwrap()
    }

    #[test]
    fn split_hand_traced_columns() {
        let wk = Matrix::from_fn(3, 8, |r, c| (10 * r + c) as f64);
        let s = split_key_columns(&wk, &[cs(&[1], 2), cs(&[0], 2)], 4).unwrap();
        assert_eq!(s.layout.elite_cols, vec![2, 3, 4, 5]);
        assert_eq!(s.layout.rest_cols, vec![0, 1, 6, 7]);
        assert_eq!(s.elite, wk.select_columns(&[2, 3, 4, 5]).unwrap());
        assert_eq!(s.rest, wk.select_columns(&[0, 1, 6, 7]).unwrap());
        assert_eq!(s.layout.merge(&s.elite, &s.rest).unwrap(), wk);
    }

    #[test]
    fn split_degenerate_sets() {
        let wk = Matrix::from_fn(2, 8, |r, c| (r * 8 + c) as f64);
        let full = split_key_columns(&wk, &[ChunkSet::full(2), ChunkSet::full(2)], 4).unwrap();
        assert_eq!(full.rest.cols(), 0);
        let none = split_key_columns(&wk, &[ChunkSet::empty(), ChunkSet::empty()], 4).unwrap();
        assert_eq!(none.elite.cols(), 0);
        assert_eq!(none.rest, wk);
        assert!(matches!(
            split_key_columns(&wk, &[cs(&[0], 2), ChunkSet::empty()], 4),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn greedy_split_rules() {
        assert_eq!(
            greedy_rank_split(&[3.0, 2.0, 1.0], &[0.0, 0.0], 4).unwrap(),
            (3, 1)
        );
        // tie on 2.0: keys win
        assert_eq!(
            greedy_rank_split(&[5.0, 2.0], &[5.0, 2.0], 3).unwrap(),
            (2, 1)
        );
        assert!(greedy_rank_split(&[1.0], &[1.0], 3).is_err());
        assert!(greedy_rank_split(&[1.0], &[1.0], 1).is_err());
    }

    #[test]
    fn cost_reports_hit_expected_widths() {
        let cfg = ModelConfig::new(32, 32, 128, 4096).unwrap();
        let j = cost_jlrd(&cfg, 8, 1536);
        assert_eq!(j.cache_per_token_layer, 2048);
        assert_eq!(j.cache_ratio, Ratio::new(1, 4));
        let s = cost_slrd(&cfg, 8, 768, 768);
        assert_eq!(s.cache_per_token_layer, 2048);
        // full-rank factors keep the cache size but double the parameters
        let full = cost_slrd(&cfg, 0, 4096, 4096);
        assert_eq!(full.cache_per_token_layer, 8192);
        assert_eq!(full.params_after, 2 * full.params_original);
        let half = cost_slrd(&cfg, 0, 2048, 2048);
        assert_eq!(half.params_after, half.params_original);
        let none = cost_jlrd(&cfg, 0, 0);
        assert_eq!((none.params_after, none.cache_per_token_layer), (0, 0));
    }
}
