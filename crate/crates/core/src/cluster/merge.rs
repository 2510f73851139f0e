//! Expert-curated mapping from raw k-means clusters to weighted meta-clusters.
//!
//! The map is a TOML file:
//!
//! ```toml
//! k = 100
//! drop = [97, 98, 99]
//!
//! [[meta]]
//! description = "tumor epithelium"
//! weight = 2.0
//! raw = [0, 4, 17]
//! ```
//!
//! Meta-cluster ids follow the order of the `[[meta]]` tables. Every raw id in
//! `[0, k)` must appear exactly once, either in a `raw` list or in `drop`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaCluster {
    pub description: String,
    pub weight: f64,
    pub raw: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeMap {
    pub k: u32,
    #[serde(default)]
    pub drop: Vec<u32>,
    #[serde(rename = "meta")]
    pub metas: Vec<MetaCluster>,
}

impl MergeMap {
    pub fn from_toml(text: &str) -> Result<Self> {
        let map: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("merge map serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.k as usize];
        let all = self.metas.iter().flat_map(|m| &m.raw).chain(&self.drop);
        for &id in all {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("raw cluster {id} outside [0, {})", self.k)))?;
            if *slot {
                return Err(Error::Config(format!("raw cluster {id} mapped twice")));
            }
            *slot = true;
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("raw cluster {id} is not mapped")));
        }
        if self.metas.is_empty() {
            return Err(Error::Config("merge map needs at least one meta-cluster".into()));
        }
        if self.metas.iter().any(|m| !(m.weight >= 0.0) || !m.weight.is_finite()) {
            return Err(Error::Config("meta-cluster weights must be finite and >= 0".into()));
        }
        if self.metas.iter().all(|m| m.weight == 0.0) {
            return Err(Error::Config("meta-cluster weights are all zero".into()));
        }
        Ok(())
    }

    /// Meta id of each raw id, `None` for dropped clusters.
    pub fn lookup_table(&self) -> Vec<Option<u32>> {
        let mut table = vec![None; self.k as usize];
        for (meta, m) in self.metas.iter().enumerate() {
            for &r in &m.raw {
                table[r as usize] = Some(meta as u32);
            }
        }
        table
    }

    pub fn weights(&self) -> Vec<f64> {
        self.metas.iter().map(|m| m.weight).collect()
    }

    /// Round-robin example: raw clusters `0..k-drop` go to meta `i % metas`,
    /// the last `drop` raw clusters are discarded.
    pub fn round_robin(k: u32, metas: u32, drop: u32) -> Result<Self> {
        if metas == 0 || drop + metas > k {
            return Err(Error::invalid("round-robin merge map needs k >= metas + drop"));
        }
        let kept = k - drop;
        let map = Self {
            k,
            drop: (kept..k).collect(),
            metas: (0..metas)
                .map(|m| MetaCluster {
                    description: format!("tissue cluster {m}"),
                    weight: 1.0,
                    raw: (0..kept).filter(|r| r % metas == m).collect(),
                })
                .collect(),
        };
        map.validate()?;
        Ok(map)
    }
}

/// Meta-cluster per raw label; `None` marks dropped rows.
pub fn apply_merge_map(raw_labels: &[u32], map: &MergeMap) -> Result<Vec<Option<u32>>> {
    let table = map.lookup_table();
    raw_labels
        .iter()
        .map(|&r| {
            table
                .get(r as usize)
                .copied()
                .ok_or_else(|| Error::invalid(format!("raw cluster {r} is not in the merge map")))
        })
        .collect()
}
