//! Per-patch color statistics and per-slide staining statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{crop_tile, Catalog, TileRef};
use crate::color::{rgb8_to_lab, rgb_to_hsv, rgb_to_lalphabeta};
use crate::error::{Error, Result};
use crate::image::{Image3, RgbImage};
use crate::stain::{StainMatrix, DEFAULT_EPS, DEFAULT_I0};

pub const FEATURE_DIM: usize = 36;
const REAL_BINS: usize = 1024;

/// Mean, standard deviation and median of each channel of RGB, CIELAB, HSV
/// and HED, in that order: index = `space * 9 + channel * 3 + stat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn mean(&self, space: usize, channel: usize) -> f64 {
        self.0[space * 9 + channel * 3]
    }

    pub fn std(&self, space: usize, channel: usize) -> f64 {
        self.0[space * 9 + channel * 3 + 1]
    }

    pub fn median(&self, space: usize, channel: usize) -> f64 {
        self.0[space * 9 + channel * 3 + 2]
    }
}

/// Two-pass mean and population standard deviation. Summing offsets from
/// the first value keeps constant inputs exact.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn median_u8(values: &[u8]) -> f64 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let kth = |k: usize| {
        let mut cum = 0;
        for (v, &c) in hist.iter().enumerate() {
            cum += c;
            if cum > k {
                return v as f64;
            }
        }
        255.0
    };
    let n = values.len();
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        0.5 * (kth(n / 2 - 1) + kth(n / 2))
    }
}

/// Exact median of real values: bucket into a uniform histogram over the
/// value range, then order only the bucket holding the requested rank.
pub fn exact_median(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if min == max {
        return min;
    }
    let scale = REAL_BINS as f64 / (max - min);
    let bin = |v: f64| (((v - min) * scale) as usize).min(REAL_BINS - 1);
    let mut counts = vec![0usize; REAL_BINS];
    for &v in values {
        counts[bin(v)] += 1;
    }
    let kth = |k: usize| {
        let mut before = 0;
        for (b, &c) in counts.iter().enumerate() {
            if before + c > k {
                let mut members: Vec<f64> = values.iter().copied().filter(|&v| bin(v) == b).collect();
                members.sort_by(f64::total_cmp);
                return members[k - before];
            }
            before += c;
        }
        max
    };
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        0.5 * (kth(n / 2 - 1) + kth(n / 2))
    }
}

/// The 36 color features of a patch, with HED channels from `stains`.
pub fn features_36_with(image: &RgbImage, stains: &StainMatrix) -> FeatureVector {
    let mut out = [0.0; FEATURE_DIM];
    let n = (image.width() * image.height()) as usize;
    if n == 0 {
        return FeatureVector(out);
    }
    for c in 0..3 {
        let raw: Vec<u8> = image.pixels().map(|p| p[c]).collect();
        let real: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let (m, s) = mean_std(&real);
        out[c * 3] = m;
        out[c * 3 + 1] = s;
        out[c * 3 + 2] = median_u8(&raw);
    }
    let spaces: [Image3; 3] = [
        Image3::from_rgb8(image, rgb8_to_lab),
        Image3::from_rgb(image, rgb_to_hsv),
        stains.deconvolve_rgb8(image, DEFAULT_I0, DEFAULT_EPS),
    ];
    for (s, converted) in spaces.iter().enumerate() {
        for c in 0..3 {
            let values = converted.channel(c);
            let (m, sd) = mean_std(&values);
            let base = (s + 1) * 9 + c * 3;
            out[base] = m;
            out[base + 1] = sd;
            out[base + 2] = exact_median(&values);
        }
    }
    FeatureVector(out)
}

pub fn features_36(image: &RgbImage) -> FeatureVector {
    features_36_with(image, &StainMatrix::hed())
}

/// Per-channel statistics of a slide in the l-alpha-beta transfer space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainStats {
    pub slide_id: String,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub patch_count: usize,
}

/// Streaming per-channel mean/variance (Chan et al. merge of Welford sums).
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: [f64; 3],
    m2: [f64; 3],
}

impl Moments {
    fn of(values: &[[f64; 3]]) -> Self {
        let n = values.len() as f64;
        let mut mean = [0.0; 3];
        let mut m2 = [0.0; 3];
        for c in 0..3 {
            let shift = values[0][c];
            mean[c] = shift + values.iter().map(|p| p[c] - shift).sum::<f64>() / n;
            m2[c] = values.iter().map(|p| (p[c] - mean[c]).powi(2)).sum();
        }
        Self { n, mean, m2 }
    }

    fn merge(self, other: Self) -> Self {
        if self.n == 0.0 {
            return other;
        }
        let n = self.n + other.n;
        let mut out = Self { n, ..self };
        for c in 0..3 {
            let delta = other.mean[c] - self.mean[c];
            out.mean[c] = self.mean[c] + delta * other.n / n;
            out.m2[c] = self.m2[c] + other.m2[c] + delta * delta * self.n * other.n / n;
        }
        out
    }
}

impl StainStats {
    /// Statistics of a single image.
    pub fn from_image(slide_id: impl Into<String>, image: &RgbImage) -> Self {
        let lab = Image3::from_rgb(image, rgb_to_lalphabeta);
        Self::from_moments(slide_id.into(), Moments::of(lab.pixels()), 1)
    }

    /// Statistics of already converted transfer-space pixels.
    pub fn from_transfer_pixels(slide_id: impl Into<String>, pixels: &[[f64; 3]]) -> Self {
        Self::from_moments(slide_id.into(), Moments::of(pixels), 1)
    }

    fn from_moments(slide_id: String, m: Moments, patch_count: usize) -> Self {
        Self {
            slide_id,
            mean: m.mean,
            std: m.m2.map(|v| (v / m.n).max(0.0).sqrt()),
            patch_count,
        }
    }
}

/// Pooled transfer-space statistics over up to `max_tiles` uniformly sampled
/// tiles of one slide.
pub fn slide_stain_stats(
    catalog: &Catalog,
    slide_id: &str,
    tiles: &[TileRef],
    max_tiles: usize,
    seed: u64,
) -> Result<StainStats> {
    if tiles.is_empty() {
        return Err(Error::invalid(format!("slide {slide_id}: no tissue tiles")));
    }
    let image = catalog.load_image(slide_id)?;
    stain_stats_from_image(&image, slide_id, tiles, max_tiles, seed)
}

pub fn stain_stats_from_image(
    image: &RgbImage,
    slide_id: &str,
    tiles: &[TileRef],
    max_tiles: usize,
    seed: u64,
) -> Result<StainStats> {
    if tiles.is_empty() || max_tiles == 0 {
        return Err(Error::invalid(format!("slide {slide_id}: no tissue tiles")));
    }
    let chosen: Vec<usize> = if tiles.len() <= max_tiles {
        (0..tiles.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, tiles.len(), max_tiles).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut acc = Moments::default();
    for &i in &chosen {
        let tile = crop_tile(image, &tiles[i])?;
        let lab = Image3::from_rgb(&tile, rgb_to_lalphabeta);
        acc = acc.merge(Moments::of(lab.pixels()));
    }
    Ok(StainStats::from_moments(slide_id.to_owned(), acc, chosen.len()))
}

/// Stain statistics keyed by slide id, persisted as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StainStatsTable(pub BTreeMap<String, StainStats>);

impl StainStatsTable {
    pub fn insert(&mut self, stats: StainStats) {
        self.0.insert(stats.slide_id.clone(), stats);
    }

    pub fn get(&self, slide_id: &str) -> Option<&StainStats> {
        self.0.get(slide_id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
