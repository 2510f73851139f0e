//! Two-level weighted sampling over (slide group x meta-cluster) buckets.
//!
//! Every draw picks a bucket with its target probability and then a tile
//! uniformly inside the bucket, with replacement. Draw `i` of a stream is a
//! pure function of `(seed, i)`, so a stream can be restarted at any offset.
//!
//! Bucket choice uses one uniform variate per draw. In the default
//! [`Selection::Stratified`] mode the variates form a randomly shifted
//! golden-ratio (Weyl) sequence: each variate is uniform on its own, and
//! empirical bucket frequencies track the target with `O(log n / n)` error
//! instead of `O(1 / sqrt(n))`. [`Selection::Independent`] draws the variates
//! i.i.d. from ChaCha8 instead.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, TileRef};
use crate::error::{Error, Result};

/// Fractional part of the golden ratio in 64-bit fixed point.
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// ChaCha 32-bit words consumed per draw (two u64 values).
const WORDS_PER_DRAW: u128 = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    /// `p(g, c) ∝ w_g * w_c` over non-empty buckets.
    #[default]
    Joint,
    /// Group first (`∝ w_g` over groups with drawable buckets), then
    /// meta-cluster within the group (`∝ w_c` over its non-empty buckets).
    TwoStage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    Stratified,
    Independent,
}

/// Sampling weights, read from TOML:
///
/// ```toml
/// combine = "joint"         # or "two-stage"
/// selection = "stratified"  # or "independent"
/// groups = [1.0, 4.0, 1.0]
/// metas = [1.0, 1.0, 0.5]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightTable {
    #[serde(default)]
    pub combine: Combine,
    #[serde(default)]
    pub selection: Selection,
    pub groups: Vec<f64>,
    pub metas: Vec<f64>,
}

impl WeightTable {
    pub fn new(groups: Vec<f64>, metas: Vec<f64>) -> Result<Self> {
        let t = Self {
            combine: Combine::Joint,
            selection: Selection::Stratified,
            groups,
            metas,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn uniform(groups: usize, metas: usize) -> Self {
        Self::new(vec![1.0; groups], vec![1.0; metas]).expect("uniform weights are valid")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("group", &self.groups), ("meta", &self.metas)] {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("{name} weights must be finite and >= 0")));
            }
            if !(w.iter().sum::<f64>() > 0.0) {
                return Err(Error::Config(format!("{name} weights need a positive sum")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("weight table serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BucketKey {
    pub group: u32,
    pub meta: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BucketEntry {
    group: u32,
    meta: u32,
    tiles: Vec<TileRef>,
}

/// Partition of the surviving tiles into (group, meta) buckets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<BucketEntry>", into = "Vec<BucketEntry>")]
pub struct SamplerIndex {
    buckets: BTreeMap<BucketKey, Vec<TileRef>>,
}

impl From<Vec<BucketEntry>> for SamplerIndex {
    fn from(entries: Vec<BucketEntry>) -> Self {
        let mut buckets: BTreeMap<BucketKey, Vec<TileRef>> = BTreeMap::new();
        for e in entries {
            buckets
                .entry(BucketKey { group: e.group, meta: e.meta })
                .or_default()
                .extend(e.tiles);
        }
        Self { buckets }
    }
}

impl From<SamplerIndex> for Vec<BucketEntry> {
    fn from(index: SamplerIndex) -> Self {
        index
            .buckets
            .into_iter()
            .map(|(k, tiles)| BucketEntry { group: k.group, meta: k.meta, tiles })
            .collect()
    }
}

impl SamplerIndex {
    pub fn from_buckets(buckets: BTreeMap<BucketKey, Vec<TileRef>>) -> Self {
        Self {
            buckets: buckets.into_iter().filter(|(_, t)| !t.is_empty()).collect(),
        }
    }

    pub fn buckets(&self) -> &BTreeMap<BucketKey, Vec<TileRef>> {
        &self.buckets
    }

    pub fn bucket_sizes(&self) -> BTreeMap<BucketKey, usize> {
        self.buckets.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    pub fn tile_count(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Buckets every tile with a surviving meta label by its slide's group.
/// `meta_labels[i]` belongs to `tiles[i]`; `None` marks a dropped tile.
pub fn build_index(
    catalog: &Catalog,
    tiles: &[TileRef],
    meta_labels: &[Option<u32>],
) -> Result<SamplerIndex> {
    if tiles.len() != meta_labels.len() {
        return Err(Error::invalid(format!(
            "{} tiles but {} meta labels",
            tiles.len(),
            meta_labels.len()
        )));
    }
    let mut buckets: BTreeMap<BucketKey, Vec<TileRef>> = BTreeMap::new();
    for (tile, meta) in tiles.iter().zip(meta_labels) {
        let Some(meta) = *meta else { continue };
        let slide = catalog
            .get(&tile.slide_id)
            .ok_or_else(|| Error::UnknownSlide(tile.slide_id.clone()))?;
        if slide.group_id < 0 {
            return Err(Error::invalid(format!("slide {} has no group assigned", slide.slide_id)));
        }
        buckets
            .entry(BucketKey { group: slide.group_id as u32, meta })
            .or_default()
            .push(tile.clone());
    }
    Ok(SamplerIndex::from_buckets(buckets))
}

/// Target probability of every drawable bucket, in bucket-key order.
pub fn target_distribution(index: &SamplerIndex, weights: &WeightTable) -> Result<Vec<(BucketKey, f64)>> {
    weights.validate()?;
    let weight_of = |w: &[f64], id: u32, what: &str| {
        w.get(id as usize).copied().ok_or_else(|| {
            Error::Config(format!("no {what} weight for id {id} (table has {})", w.len()))
        })
    };
    let mut masses = Vec::with_capacity(index.buckets.len());
    match weights.combine {
        Combine::Joint => {
            for key in index.buckets.keys() {
                let m = weight_of(&weights.groups, key.group, "group")?
                    * weight_of(&weights.metas, key.meta, "meta")?;
                masses.push((*key, m));
            }
        }
        Combine::TwoStage => {
            let mut meta_sums: BTreeMap<u32, f64> = BTreeMap::new();
            for key in index.buckets.keys() {
                *meta_sums.entry(key.group).or_default() += weight_of(&weights.metas, key.meta, "meta")?;
            }
            let mut group_total = 0.0;
            for (&g, &s) in &meta_sums {
                if s > 0.0 {
                    group_total += weight_of(&weights.groups, g, "group")?;
                }
            }
            for key in index.buckets.keys() {
                let s = meta_sums[&key.group];
                let m = if s > 0.0 && group_total > 0.0 {
                    weight_of(&weights.groups, key.group, "group")? / group_total
                        * (weight_of(&weights.metas, key.meta, "meta")? / s)
                } else {
                    0.0
                };
                masses.push((*key, m));
            }
        }
    }
    let total: f64 = masses.iter().map(|(_, m)| m).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weight mass on empty buckets only"));
    }
    Ok(masses.into_iter().map(|(k, m)| (k, m / total)).collect())
}

/// Precomputed cumulative distribution over drawable buckets.
#[derive(Debug, Clone)]
pub struct SamplingPlan<'a> {
    index: &'a SamplerIndex,
    selection: Selection,
    keys: Vec<BucketKey>,
    cumulative: Vec<f64>,
}

impl<'a> SamplingPlan<'a> {
    pub fn new(index: &'a SamplerIndex, weights: &WeightTable) -> Result<Self> {
        let target = target_distribution(index, weights)?;
        let mut keys = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (k, p) in target {
            if p > 0.0 {
                acc += p;
                keys.push(k);
                cumulative.push(acc);
            }
        }
        Ok(Self {
            index,
            selection: weights.selection,
            keys,
            cumulative,
        })
    }

    fn bucket_for(&self, u: f64) -> usize {
        let total = *self.cumulative.last().expect("plan has a drawable bucket");
        let target = u * total;
        self.cumulative
            .partition_point(|&c| c <= target)
            .min(self.keys.len() - 1)
    }

    pub fn stream(&self, seed: u64) -> SampleStream<'_, 'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = rng.next_u64();
        SampleStream {
            plan: self,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B),
            shift,
            position: 0,
        }
    }
}

/// Unbounded deterministic sequence of tiles.
#[derive(Debug, Clone)]
pub struct SampleStream<'p, 'a> {
    plan: &'p SamplingPlan<'a>,
    rng: ChaCha8Rng,
    shift: u64,
    position: u64,
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl SampleStream<'_, '_> {
    /// Repositions the stream so the next element is element `offset`.
    pub fn seek(&mut self, offset: u64) {
        self.position = offset;
        self.rng.set_word_pos(offset as u128 * WORDS_PER_DRAW);
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Bucket key and tile of the next draw.
    pub fn next_draw(&mut self) -> (BucketKey, &TileRef) {
        let bucket_bits = self.rng.next_u64();
        let tile_bits = self.rng.next_u64();
        let u = match self.plan.selection {
            Selection::Stratified => {
                unit_f64(self.shift.wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA)))
            }
            Selection::Independent => unit_f64(bucket_bits),
        };
        self.position += 1;
        let b = self.plan.bucket_for(u);
        let key = self.plan.keys[b];
        let tiles = &self.plan.index.buckets[&key];
        let j = ((tile_bits as u128 * tiles.len() as u128) >> 64) as usize;
        (key, &tiles[j])
    }
}

impl Iterator for SampleStream<'_, '_> {
    type Item = TileRef;

    fn next(&mut self) -> Option<TileRef> {
        Some(self.next_draw().1.clone())
    }
}

/// First `n` elements of the stream for `seed`.
pub fn draw(index: &SamplerIndex, weights: &WeightTable, n: usize, seed: u64) -> Result<Vec<TileRef>> {
    let plan = SamplingPlan::new(index, weights)?;
    Ok(plan.stream(seed).take(n).collect())
}

/// Bucket of each of the first `n` draws.
pub fn draw_buckets(
    index: &SamplerIndex,
    weights: &WeightTable,
    n: usize,
    seed: u64,
) -> Result<Vec<BucketKey>> {
    let plan = SamplingPlan::new(index, weights)?;
    let mut s = plan.stream(seed);
    Ok((0..n).map(|_| s.next_draw().0).collect())
}

/// Writes `group,meta,count,frequency,target` rows for an audit of `draws`.
pub fn write_frequency_csv<W: Write>(
    w: W,
    index: &SamplerIndex,
    weights: &WeightTable,
    draws: &[BucketKey],
) -> Result<()> {
    let target = target_distribution(index, weights)?;
    let mut counts: BTreeMap<BucketKey, usize> = BTreeMap::new();
    for k in draws {
        *counts.entry(*k).or_default() += 1;
    }
    let mut wr = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["group", "meta", "count", "frequency", "target"]).map_err(fmt)?;
    for (k, p) in target {
        let c = counts.get(&k).copied().unwrap_or(0);
        let f = if draws.is_empty() { 0.0 } else { c as f64 / draws.len() as f64 };
        wr.write_record([
            k.group.to_string(),
            k.meta.to_string(),
            c.to_string(),
            format!("{f:.6}"),
            format!("{p:.6}"),
        ])
        .map_err(fmt)?;
    }
    wr.flush().map_err(crate::binio::fmt_io)
}
