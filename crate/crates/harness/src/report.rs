//! JSON-lines report records.

use std::path::Path;

use elitekv_core::{CostReport, FactorMode, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::format::{read_bytes, write_bytes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Record {
    Search {
        method: String,
        r: usize,
        score: String,
        forward_passes: Option<u64>,
        expected_forward_passes: u64,
        /// Sum over heads of the L1 distance to the full-rotation scores.
        total_distance: f64,
    },
    Cost {
        mode: String,
        r: usize,
        d_ck: usize,
        d_cv: usize,
        params_original: u64,
        params_after: u64,
        cache_per_token_layer: u64,
        cache_full: u64,
        /// Exact, as `num/den` in lowest terms.
        cache_ratio: String,
        cache_percent: f64,
    },
    Allocation {
        rank: usize,
        r: usize,
        d_ckv: usize,
        proxy: f64,
        params_original: u64,
        params_after: u64,
        cache_per_token_layer: u64,
        cache_ratio: String,
    },
    Cache {
        layout: String,
        width: usize,
        ratio: String,
        tokens: usize,
        bytes: u64,
    },
    Equivalence {
        pair: String,
        tokens: usize,
        max_abs_delta: f64,
    },
    Factor {
        layer: usize,
        key_rank: usize,
        value_rank: usize,
        residual: f64,
        oracle: f64,
    },
    Verify {
        suite: String,
        property: String,
        residual: f64,
        tolerance: f64,
        pass: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
}

impl Record {
    /// Cost line; `d_ck` holds `d_ckv` for joint factors and `d_cv` repeats it.
    pub fn cost(
        cfg: &ModelConfig,
        mode: FactorMode,
        r: usize,
        d_ck: usize,
        d_cv: usize,
        c: &CostReport,
    ) -> Self {
        Record::Cost {
            mode: mode.name().to_string(),
            r,
            d_ck,
            d_cv,
            params_original: c.params_original,
            params_after: c.params_after,
            cache_per_token_layer: c.cache_per_token_layer,
            cache_full: cfg.full_cache_width() as u64,
            cache_ratio: c.cache_ratio.to_string(),
            cache_percent: c.cache_percent(),
        }
    }

    pub fn verify(suite: &str, property: &str, residual: f64, tolerance: f64) -> Self {
        Record::Verify {
            suite: suite.to_string(),
            property: property.to_string(),
            residual,
            tolerance,
            pass: residual <= tolerance,
            detail: None,
        }
    }

    pub fn failed(suite: &str, property: &str, detail: impl Into<String>) -> Self {
        Record::Verify {
            suite: suite.to_string(),
            property: property.to_string(),
            residual: f64::MAX,
            tolerance: 0.0,
            pass: false,
            detail: Some(detail.into()),
        }
    }

    pub fn passed(&self) -> bool {
        !matches!(self, Record::Verify { pass: false, .. })
    }

    pub fn to_line(&self) -> String {
        // non-finite values are not representable in JSON
        let mut s = serde_json::to_string(&self.sanitized()).expect("records serialize");
        s.push('\n');
        s
    }

    fn sanitized(&self) -> Record {
        let fix = |v: f64| if v.is_finite() { v } else { f64::MAX };
        let mut r = self.clone();
        match &mut r {
            Record::Search { total_distance, .. } => *total_distance = fix(*total_distance),
            Record::Allocation { proxy, .. } => *proxy = fix(*proxy),
            Record::Equivalence { max_abs_delta, .. } => *max_abs_delta = fix(*max_abs_delta),
            Record::Factor {
                residual, oracle, ..
            } => {
                *residual = fix(*residual);
                *oracle = fix(*oracle);
            }
            Record::Verify { residual, .. } => *residual = fix(*residual),
            Record::Cost { .. } | Record::Cache { .. } => {}
        }
        r
    }
}

pub fn to_jsonl(records: &[Record]) -> String {
    records.iter().map(Record::to_line).collect()
}

pub fn parse_jsonl(text: &str) -> std::result::Result<Vec<Record>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    write_bytes(path, to_jsonl(records).as_bytes())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| HarnessError::format(path, e.to_string()))?;
    parse_jsonl(&text).map_err(|e| HarnessError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use elitekv_core::cost_jlrd;

    #[test]
    fn records_round_trip_exactly() {
        let cfg = ModelConfig::new(32, 32, 128, 4096).unwrap();
        let recs = vec![
            Record::cost(
                &cfg,
                FactorMode::Jlrd,
                8,
                1536,
                1536,
                &cost_jlrd(&cfg, 8, 1536),
            ),
            Record::Equivalence {
                pair: "full-vs-ropelite".into(),
                tokens: 3,
                max_abs_delta: 0.1 + 0.2,
            },
            Record::verify("accounting", "width", 1e-300, 0.0),
        ];
        let text = to_jsonl(&recs);
        assert!(text.contains("\"cache_ratio\":\"1/4\""));
        assert!(text.contains("\"cache_full\":8192"));
        assert_eq!(parse_jsonl(&text).unwrap(), recs);
    }

    #[test]
    fn non_finite_values_are_clamped() {
        let r = Record::verify("s", "p", f64::NAN, 1.0);
        let back = parse_jsonl(&r.to_line()).unwrap();
        assert!(matches!(back[0], Record::Verify { residual, .. } if residual == f64::MAX));
    }
}
