//! JSON form of an elite-chunk selection.

use std::path::Path;

use elitekv_core::{ChunkSet, EliteSelection, ModelConfig, SelectionMethod};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::format::{read_bytes, write_bytes};

/// `{"method": "ropelite", "r": 2, "layers": [[[0, 3], [1, 2]], ...]}`:
/// per layer, per head, ascending chunk indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EliteDoc {
    pub method: String,
    pub r: usize,
    pub layers: Vec<Vec<Vec<usize>>>,
}

impl From<&EliteSelection> for EliteDoc {
    fn from(sel: &EliteSelection) -> Self {
        Self {
            method: sel.method.to_string(),
            r: sel.r,
            layers: sel
                .layers
                .iter()
                .map(|heads| heads.iter().map(|s| s.indices().to_vec()).collect())
                .collect(),
        }
    }
}

impl EliteDoc {
    pub fn into_selection(self, cfg: &ModelConfig) -> elitekv_core::Result<EliteSelection> {
        let method: SelectionMethod = self.method.parse()?;
        let n = cfg.n_chunks();
        let layers = self
            .layers
            .into_iter()
            .map(|heads| heads.into_iter().map(|idx| ChunkSet::new(idx, n)).collect())
            .collect::<elitekv_core::Result<Vec<Vec<_>>>>()?;
        let sel = EliteSelection {
            method,
            r: self.r,
            layers,
        };
        sel.validate(cfg)?;
        Ok(sel)
    }
}

pub fn to_json(sel: &EliteSelection) -> String {
    let mut s = serde_json::to_string(&EliteDoc::from(sel)).expect("elite doc serializes");
    s.push('\n');
    s
}

pub fn write_elite(path: &Path, sel: &EliteSelection) -> Result<()> {
    write_bytes(path, to_json(sel).as_bytes())
}

pub fn read_elite(path: &Path, cfg: &ModelConfig) -> Result<EliteSelection> {
    let bytes = read_bytes(path)?;
    let doc: EliteDoc =
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::format(path, e.to_string()))?;
    doc.into_selection(cfg)
        .map_err(|e| HarnessError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let cfg = ModelConfig::new(1, 2, 8, 16).unwrap();
        let sel = EliteSelection {
            method: SelectionMethod::Ropelite,
            r: 2,
            layers: vec![vec![
                ChunkSet::new(vec![0, 3], 4).unwrap(),
                ChunkSet::new(vec![1, 2], 4).unwrap(),
            ]],
        };
        let json = to_json(&sel);
        assert_eq!(
            json,
            "{\"method\":\"ropelite\",\"r\":2,\"layers\":[[[0,3],[1,2]]]}\n"
        );
        let doc: EliteDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(doc.into_selection(&cfg).unwrap(), sel);

        let bad: EliteDoc =
            serde_json::from_str("{\"method\":\"ropelite\",\"r\":2,\"layers\":[[[0,3],[1]]]}")
                .unwrap();
        assert!(bad.into_selection(&cfg).is_err());
    }
}
