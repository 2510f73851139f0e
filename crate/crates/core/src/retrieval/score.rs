use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{crop_tile, Catalog, TileRef};
use crate::error::{Error, Result};

use super::{EmbeddingStore, Embedder, SlideEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoiTile {
    pub x: u32,
    pub y: u32,
}

/// Region of interest: a set of tiles of one slide. This is also the ROI
/// query file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRoi {
    pub slide_id: String,
    pub roi: Vec<RoiTile>,
}

impl QueryRoi {
    pub fn validate(&self) -> Result<()> {
        if self.roi.is_empty() {
            return Err(Error::invalid("ROI must contain at least one tile"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub rank: usize,
    pub slide_id: String,
    pub score: f64,
    pub diagnosis: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCell {
    pub x: u32,
    pub y: u32,
    pub similarity: f64,
}

/// Max-over-ROI cosine for every tile of one candidate slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub slide_id: String,
    pub tiles: Vec<SimilarityCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_slide: String,
    pub k: usize,
    pub entries: Vec<RankedEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maps: Vec<SimilarityMap>,
}

/// Cosine similarity. A zero-norm operand gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    cos_from(ab, aa, bb)
}

// sqrt(aa * bb) rather than a product of norms keeps identical vectors at
// exactly 1.
fn cos_from(ab: f64, aa: f64, bb: f64) -> f64 {
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Row-major vectors with their squared norms.
struct Rows<'a> {
    data: &'a [f64],
    sq: Vec<f64>,
    dim: usize,
}

impl<'a> Rows<'a> {
    fn new(data: &'a [f64], dim: usize) -> Self {
        let sq = data.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
        Self { data, sq, dim }
    }

    fn len(&self) -> usize {
        self.sq.len()
    }

    fn cos(&self, i: usize, other: &Rows, j: usize) -> f64 {
        let d = self.dim;
        let ab = self.data[i * d..(i + 1) * d]
            .iter()
            .zip(&other.data[j * d..(j + 1) * d])
            .map(|(x, y)| x * y)
            .sum();
        cos_from(ab, self.sq[i], other.sq[j])
    }
}

fn check_shape(data: &[f64], dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!("{what}: {} values do not form rows of dim {dim}", data.len())));
    }
    let n = data.len() / dim;
    if n == 0 {
        return Err(Error::invalid(format!("{what} has no vectors")));
    }
    Ok(n)
}

fn rows_slide_score(roi: &Rows, cand: &Rows, k: usize) -> f64 {
    let t = cand.len();
    let m = k.min(t);
    let mut sims = Vec::with_capacity(t);
    let mut total = 0.0;
    for i in 0..roi.len() {
        sims.clear();
        sims.extend((0..t).map(|j| roi.cos(i, cand, j)));
        sims.sort_unstable_by(|a, b| b.total_cmp(a));
        total += sims[..m].iter().sum::<f64>() / m as f64;
    }
    total / roi.len() as f64
}

/// Mean over ROI vectors of the mean of the `k` largest cosine similarities
/// to the candidate's tiles. Rows are row-major with width `dim`.
pub fn slide_score(roi: &[f64], candidate: &[f64], dim: usize, k: usize) -> Result<f64> {
    check_shape(roi, dim, "ROI")?;
    check_shape(candidate, dim, "candidate")?;
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    Ok(rows_slide_score(&Rows::new(roi, dim), &Rows::new(candidate, dim), k))
}

/// Similarity map of one candidate against ROI vectors.
pub fn similarity_map(roi: &[f64], candidate: &SlideEmbeddings, dim: usize) -> Result<SimilarityMap> {
    check_shape(roi, dim, "ROI")?;
    Ok(rows_similarity_map(&Rows::new(roi, dim), candidate, dim))
}

fn rows_similarity_map(roi: &Rows, candidate: &SlideEmbeddings, dim: usize) -> SimilarityMap {
    let data = candidate.vectors_f64();
    let cand = Rows::new(&data, dim);
    let tiles = candidate
        .coords
        .iter()
        .enumerate()
        .map(|(j, &(x, y))| SimilarityCell {
            x,
            y,
            similarity: (0..roi.len()).map(|i| roi.cos(i, &cand, j)).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    SimilarityMap { slide_id: candidate.slide_id.clone(), tiles }
}

/// Resolves ROI tiles to vectors (row-major, f64). Slides in the store use
/// their stored rows. Otherwise, when `source` is given, the tiles are cut
/// from the catalog image and embedded on the fly.
pub fn roi_vectors(
    store: &EmbeddingStore,
    roi: &QueryRoi,
    source: Option<(&Catalog, &BTreeMap<String, Vec<TileRef>>, &dyn Embedder)>,
) -> Result<Vec<f64>> {
    roi.validate()?;
    let dim = store.dim();
    if let Some(slide) = store.get(&roi.slide_id) {
        let mut out = Vec::with_capacity(roi.roi.len() * dim);
        for t in &roi.roi {
            let row = slide.row_of(t.x, t.y, dim).ok_or_else(|| outside_grid(roi, t))?;
            out.extend(row.iter().map(|&v| v as f64));
        }
        return Ok(out);
    }
    let Some((catalog, tiles, embedder)) = source else {
        return Err(Error::UnknownSlide(roi.slide_id.clone()));
    };
    if catalog.get(&roi.slide_id).is_none() {
        return Err(Error::UnknownSlide(roi.slide_id.clone()));
    }
    if embedder.dim() != dim {
        return Err(Error::invalid(format!("embedder dim {} differs from store dim {dim}", embedder.dim())));
    }
    let grid = tiles.get(&roi.slide_id).map(Vec::as_slice).unwrap_or_default();
    let refs = roi
        .roi
        .iter()
        .map(|t| grid.iter().find(|g| g.x == t.x && g.y == t.y).ok_or_else(|| outside_grid(roi, t)))
        .collect::<Result<Vec<_>>>()?;
    let image = catalog.load_image(&roi.slide_id)?;
    let mut out = Vec::with_capacity(refs.len() * dim);
    for r in refs {
        out.extend(embedder.embed(&crop_tile(&image, r)?).iter().map(|&v| v as f64));
    }
    Ok(out)
}

fn outside_grid(roi: &QueryRoi, t: &RoiTile) -> Error {
    Error::invalid(format!("ROI tile ({}, {}) is not in the tile grid of slide {}", t.x, t.y, roi.slide_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryOptions {
    /// Patch-level top-k.
    pub k: usize,
    pub top_n: usize,
    pub include_self: bool,
    pub with_maps: bool,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self { k: 5, top_n: 10, include_self: false, with_maps: false }
    }
}

/// Exhaustive search: scores every store slide (the query slide only when
/// `include_self`), ranks by score descending and slide id ascending.
pub fn query_topn(
    store: &EmbeddingStore,
    query_slide: &str,
    roi: &[f64],
    opts: &QueryOptions,
) -> Result<RankedResult> {
    let dim = store.dim();
    if store.is_empty() {
        return Err(Error::invalid("embedding store is empty"));
    }
    check_shape(roi, dim, "ROI")?;
    if opts.k == 0 || opts.top_n == 0 {
        return Err(Error::invalid("k and top_n must be >= 1"));
    }
    let roi = Rows::new(roi, dim);
    let candidates: Vec<&SlideEmbeddings> = store
        .slides()
        .iter()
        .filter(|s| opts.include_self || s.slide_id != query_slide)
        .filter(|s| s.tile_count() > 0)
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate slides besides the query"));
    }
    let mut scored: Vec<(f64, &SlideEmbeddings)> = candidates
        .par_iter()
        .map(|s| (rows_slide_score(&roi, &Rows::new(&s.vectors_f64(), dim), opts.k), *s))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.slide_id.cmp(&b.1.slide_id)));
    scored.truncate(opts.top_n);
    let maps = if opts.with_maps {
        scored.par_iter().map(|(_, s)| rows_similarity_map(&roi, s, dim)).collect()
    } else {
        Vec::new()
    };
    let entries = scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, s))| RankedEntry {
            rank: i + 1,
            slide_id: s.slide_id.clone(),
            score,
            diagnosis: (!s.diagnosis.is_empty()).then(|| s.diagnosis.clone()),
        })
        .collect();
    Ok(RankedResult { query_slide: query_slide.to_string(), k: opts.k, entries, maps })
}

/// Fraction of queries whose first `k` results contain the query's
/// diagnosis, for each `k` in `k_list`.
pub fn topk_accuracy(
    results: &[RankedResult],
    truths: &[String],
    k_list: &[usize],
    known: &BTreeSet<String>,
) -> Result<Vec<(usize, f64)>> {
    if results.is_empty() || results.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} results for {} ground-truth labels",
            results.len(),
            truths.len()
        )));
    }
    let max_k = k_list.iter().copied().max().unwrap_or(0);
    if max_k == 0 || k_list.contains(&0) {
        return Err(Error::invalid("k_list must be non-empty with k >= 1"));
    }
    for (r, t) in results.iter().zip(truths) {
        if !known.contains(t) {
            return Err(Error::invalid(format!("unknown diagnosis label {t:?}")));
        }
        if r.entries.len() < max_k {
            return Err(Error::invalid(format!(
                "query {} has {} results, fewer than k={max_k}",
                r.query_slide,
                r.entries.len()
            )));
        }
    }
    Ok(k_list
        .iter()
        .map(|&k| {
            let hits = results
                .iter()
                .zip(truths)
                .filter(|(r, t)| r.entries[..k].iter().any(|e| e.diagnosis.as_deref() == Some(t.as_str())))
                .count();
            (k, hits as f64 / results.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn oracle(roi: &[f64], cand: &[f64], dim: usize, k: usize) -> f64 {
        let p = roi.len() / dim;
        let t = cand.len() / dim;
        let mut total = 0.0;
        for i in 0..p {
            let mut sims = Vec::new();
            for j in 0..t {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for d in 0..dim {
                    ab += roi[i * dim + d] * cand[j * dim + d];
                    aa += roi[i * dim + d] * roi[i * dim + d];
                    bb += cand[j * dim + d] * cand[j * dim + d];
                }
                sims.push(ab / (aa.sqrt() * bb.sqrt()));
            }
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let m = k.min(t);
            total += sims[..m].iter().sum::<f64>() / m as f64;
        }
        total / p as f64
    }

    #[test]
    fn self_similarity() {
        let v = vec![0.3, -0.2, 0.9];
        let cand = [vec![1.0, 0.0, 0.0], v.clone()].concat();
        assert!((slide_score(&v, &cand, 3, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_is_zero() {
        let roi = vec![1.0, 0.0, 0.0, 0.0];
        let cand = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for k in 1..5 {
            assert_eq!(slide_score(&roi, &cand, 4, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_vector_scores_zero() {
        assert_eq!(slide_score(&[0.0, 0.0], &[1.0, 1.0], 2, 1).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let roi = random(&mut rng, 3 * 6);
            let cand = random(&mut rng, 10 * 6);
            let got = slide_score(&roi, &cand, 6, 5).unwrap();
            assert!((got - oracle(&roi, &cand, 6, 5)).abs() < 1e-6);
        }
    }

    #[test]
    fn k_equals_t_is_mean_of_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let roi = random(&mut rng, 4 * 5);
        let cand = random(&mut rng, 7 * 5);
        let mean: f64 = roi
            .chunks(5)
            .map(|r| cand.chunks(5).map(|c| cosine(r, c)).sum::<f64>() / 7.0)
            .sum::<f64>()
            / 4.0;
        assert!((slide_score(&roi, &cand, 5, 7).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn rescaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let roi = random(&mut rng, 3 * 8);
        let cand = random(&mut rng, 9 * 8);
        let scale = |v: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            v.chunks(8).flat_map(|r| {
                let s: f64 = rng.random_range(0.01..100.0);
                r.iter().map(move |x| x * s).collect::<Vec<_>>()
            }).collect()
        };
        let a = slide_score(&roi, &cand, 8, 3).unwrap();
        let b = slide_score(&scale(&roi, &mut rng), &scale(&cand, &mut rng), 8, 3).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn appending_best_match_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let roi = random(&mut rng, 2 * 4);
            let mut cand = random(&mut rng, 6 * 4);
            let before = slide_score(&roi, &cand, 4, 3).unwrap();
            let best = (0..6)
                .max_by(|&a, &b| cosine(&roi[..4], &cand[a * 4..a * 4 + 4]).total_cmp(&cosine(&roi[..4], &cand[b * 4..b * 4 + 4])))
                .unwrap();
            let copy = cand[best * 4..best * 4 + 4].to_vec();
            cand.extend(copy);
            assert!(slide_score(&roi, &cand, 4, 3).unwrap() >= before - 1e-12);
        }
    }

    fn store_of(slides: &[(&str, &str, Vec<f32>)], dim: usize) -> EmbeddingStore {
        EmbeddingStore::new(
            dim,
            slides
                .iter()
                .map(|(id, d, v)| SlideEmbeddings {
                    slide_id: id.to_string(),
                    diagnosis: d.to_string(),
                    coords: (0..(v.len() / dim) as u32).map(|i| (i * 256, 0)).collect(),
                    vectors: v.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_ranks_first_and_ties_by_id() {
        let q = vec![1.0f32, 0.0, 0.5, 0.0, 1.0, 0.0];
        let store = store_of(
            &[
                ("q", "A", q.clone()),
                ("zz", "B", vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
                ("dup", "A", q.clone()),
                ("aa", "B", vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            ],
            3,
        );
        let roi = QueryRoi { slide_id: "q".into(), roi: vec![RoiTile { x: 0, y: 0 }] };
        let v = roi_vectors(&store, &roi, None).unwrap();
        let opts = QueryOptions { k: 1, with_maps: true, ..Default::default() };
        let r = query_topn(&store, "q", &v, &opts).unwrap();
        let ids: Vec<_> = r.entries.iter().map(|e| e.slide_id.as_str()).collect();
        assert_eq!(ids, ["dup", "aa", "zz"]);
        assert_eq!(r.entries[0].score, 1.0);
        assert_eq!(r.entries[1].score, r.entries[2].score);
        assert_eq!(r.maps.len(), 3);
        assert_eq!(r.maps[0].tiles[0].similarity, 1.0);
    }

    #[test]
    fn roi_errors() {
        let store = store_of(&[("a", "", vec![1.0, 0.0])], 2);
        let empty = QueryRoi { slide_id: "a".into(), roi: vec![] };
        assert!(roi_vectors(&store, &empty, None).is_err());
        let off = QueryRoi { slide_id: "a".into(), roi: vec![RoiTile { x: 5, y: 0 }] };
        assert!(matches!(roi_vectors(&store, &off, None), Err(Error::InvalidInput(_))));
        let unknown = QueryRoi { slide_id: "b".into(), roi: vec![RoiTile { x: 0, y: 0 }] };
        assert!(matches!(roi_vectors(&store, &unknown, None), Err(Error::UnknownSlide(_))));
        let empty_store = EmbeddingStore::new(2, vec![]).unwrap();
        assert!(query_topn(&empty_store, "a", &[1.0, 0.0], &QueryOptions::default()).is_err());
    }

    fn result(q: &str, diags: &[&str]) -> RankedResult {
        RankedResult {
            query_slide: q.into(),
            k: 1,
            entries: diags
                .iter()
                .enumerate()
                .map(|(i, d)| RankedEntry { rank: i + 1, slide_id: format!("s{i}"), score: 0.0, diagnosis: Some(d.to_string()) })
                .collect(),
            maps: vec![],
        }
    }

    #[test]
    fn topk_accuracy_cases() {
        let known: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let rs = vec![result("q1", &["A", "B"]), result("q2", &["B", "A"])];
        let acc = topk_accuracy(&rs, &["A".into(), "B".into()], &[1, 2], &known).unwrap();
        assert_eq!(acc, vec![(1, 1.0), (2, 1.0)]);
        let acc = topk_accuracy(&rs, &["B".into(), "A".into()], &[1, 2], &known).unwrap();
        assert_eq!(acc, vec![(1, 0.0), (2, 1.0)]);
        let none = vec![result("q", &["B", "B"])];
        assert_eq!(topk_accuracy(&none, &["A".into()], &[1, 2], &known).unwrap(), vec![(1, 0.0), (2, 0.0)]);
        assert!(topk_accuracy(&rs, &["A".into(), "C".into()], &[1], &known).is_err());
        assert!(topk_accuracy(&rs, &["A".into(), "B".into()], &[10], &known).is_err());
    }
}
