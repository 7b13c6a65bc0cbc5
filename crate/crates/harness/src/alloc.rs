//! Dimension allocation with a choice of ranking proxy.

use std::collections::BTreeMap;
use std::str::FromStr;

use elitekv_core::chunk_select::select;
use elitekv_core::linalg::dot;
use elitekv_core::lowrank::{allocate_configs, FrobeniusProxy, RankedConfig};
use elitekv_core::{
    decompose_jlrd, forward_compressed, forward_full, lowrank::AllocationRequest,
    split_key_projection, AttentionWeights, ChunkSet, CompressedModel, EliteSelection, Error,
    Matrix, ModelConfig, ScoreMode, SelectionMethod,
};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::format::CalibData;
use crate::synth::rng;

const STREAM_HELDOUT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxyKind {
    /// Rank every feasible config equally; order falls to the tie-breakers.
    None,
    Frobenius,
    Perplexity,
}

impl FromStr for ProxyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "frobenius" => Ok(Self::Frobenius),
            "perplexity" => Ok(Self::Perplexity),
            other => Err(HarnessError::Invalid(format!("unknown proxy {other:?}"))),
        }
    }
}

/// Elite selection for `r`, with `r = 0` meaning no rotated chunks.
pub fn select_r(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    calib: &CalibData,
    method: SelectionMethod,
    r: usize,
    mode: ScoreMode,
) -> Result<EliteSelection> {
    if r == 0 {
        return Ok(EliteSelection::uniform_sets(cfg, method, ChunkSet::empty()));
    }
    let batch = calib.batch()?;
    Ok(select(method, cfg, w, &batch, r, mode)?.0)
}

/// Everything a data-driven proxy needs besides the shape.
pub struct ProxyInputs<'a> {
    pub weights: &'a AttentionWeights,
    pub calib: &'a CalibData,
    pub method: SelectionMethod,
    pub score: ScoreMode,
    pub seed: u64,
}

/// Ranked feasible `(r, d_ckv)` configurations. `fixed_r` restricts the
/// search to one `r`.
pub fn allocate(
    cfg: &ModelConfig,
    req: AllocationRequest,
    proxy: ProxyKind,
    inputs: Option<&ProxyInputs<'_>>,
    fixed_r: Option<usize>,
) -> Result<Vec<RankedConfig>> {
    let keep = |c: &RankedConfig| fixed_r.is_none_or(|r| c.r == r);
    let shape_only: Vec<RankedConfig> = allocate_configs(cfg, req, |_, _| Ok(0.0))?
        .into_iter()
        .filter(keep)
        .collect();
    if shape_only.is_empty() {
        return Err(HarnessError::Core(Error::Infeasible {
            target: req.target_ratio,
            nearest: vec![format!(
                "no configuration with r = {}",
                fixed_r.unwrap_or(0)
            )],
        }));
    }
    if proxy == ProxyKind::None {
        return Ok(shape_only);
    }
    let inputs = inputs.ok_or_else(|| {
        HarnessError::Invalid("the frobenius and perplexity proxies need model weights".into())
    })?;

    let rs: Vec<usize> = shape_only
        .iter()
        .map(|c| c.r)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let selections: BTreeMap<usize, EliteSelection> = rs
        .par_iter()
        .map(|&r| {
            select_r(
                cfg,
                inputs.weights,
                inputs.calib,
                inputs.method,
                r,
                inputs.score,
            )
            .map(|s| (r, s))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let ranked = match proxy {
        ProxyKind::Frobenius => {
            let max_r = rs.last().copied().unwrap_or(0);
            let by_r: Vec<Option<EliteSelection>> =
                (0..=max_r).map(|r| selections.get(&r).cloned()).collect();
            let wk: Vec<&Matrix> = inputs.weights.layers.iter().map(|l| &l.wk).collect();
            let wv: Vec<&Matrix> = inputs.weights.layers.iter().map(|l| &l.wv).collect();
            let fp = FrobeniusProxy::new(&wk, &wv, &by_r, cfg.head_dim)?;
            allocate_configs(cfg, req, |r, d| fp.error(r, d))?
        }
        ProxyKind::Perplexity => {
            let held = HeldOut::new(cfg, inputs)?;
            allocate_configs(cfg, req, |r, d| match selections.get(&r) {
                Some(sel) => held.perplexity(cfg, inputs.weights, sel, d),
                // outside the fixed-r filter; dropped below
                None => Ok(f64::INFINITY),
            })?
        }
        ProxyKind::None => unreachable!(),
    };
    Ok(ranked.into_iter().filter(keep).collect())
}

/// Held-out sequences over the calibration vocabulary with the full model's
/// next-token distributions as targets.
pub struct HeldOut {
    table: Matrix,
    seqs: Vec<Vec<Vec<f64>>>,
    reference: Vec<Vec<Vec<f64>>>,
}

impl HeldOut {
    pub fn new(cfg: &ModelConfig, inputs: &ProxyInputs<'_>) -> Result<Self> {
        let calib = inputs.calib;
        let mut r = rng(inputs.seed, STREAM_HELDOUT);
        let len = calib.ids.first().map_or(8, Vec::len).max(2);
        let seqs: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| {
                let ids: Vec<u32> = (0..len)
                    .map(|_| r.random_range(0..calib.vocab() as u32))
                    .collect();
                calib.embed(&ids)
            })
            .collect();
        let table = calib.table.clone();
        let reference = seqs
            .iter()
            .map(|s| {
                forward_full(cfg, inputs.weights, s)?
                    .iter()
                    .map(|o| readout(&table, &o.hidden))
                    .collect::<elitekv_core::Result<Vec<_>>>()
            })
            .collect::<elitekv_core::Result<Vec<_>>>()?;
        Ok(Self {
            table,
            seqs,
            reference,
        })
    }

    /// `exp` of the mean cross-entropy of the compressed model's readout
    /// against the full model's. `d_ckv = 0` has no value path and scores
    /// `+inf`.
    pub fn perplexity(
        &self,
        cfg: &ModelConfig,
        w: &AttentionWeights,
        sel: &EliteSelection,
        d_ckv: usize,
    ) -> elitekv_core::Result<f64> {
        if d_ckv == 0 {
            return Ok(f64::INFINITY);
        }
        let factors = (0..cfg.n_layers)
            .map(|l| {
                decompose_jlrd(
                    &split_key_projection(&w.layers[l].wk, sel, l)?,
                    &w.layers[l].wv,
                    d_ckv,
                )
            })
            .collect::<elitekv_core::Result<Vec<_>>>()?;
        let model = CompressedModel::build(cfg, w, factors)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (seq, refs) in self.seqs.iter().zip(&self.reference) {
            for (out, p) in forward_compressed(&model, seq)?.iter().zip(refs) {
                let q = readout(&self.table, &out.hidden)?;
                total -= p
                    .iter()
                    .zip(&q)
                    .map(|(pi, qi)| pi * qi.max(1e-300).ln())
                    .sum::<f64>();
                count += 1;
            }
        }
        Ok((total / count as f64).exp())
    }
}

/// Tied-embedding readout `softmax(E · h)`.
pub fn readout(table: &Matrix, h: &[f64]) -> elitekv_core::Result<Vec<f64>> {
    if h.len() != table.cols() {
        return Err(Error::Shape(format!(
            "hidden of length {}, table is {:?}",
            h.len(),
            table.shape()
        )));
    }
    let mut logits: Vec<f64> = (0..table.rows()).map(|v| dot(table.row(v), h)).collect();
    elitekv_core::attention::softmax(&mut logits);
    Ok(logits)
}
