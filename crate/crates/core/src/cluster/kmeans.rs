use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::*;
use crate::catalog::TileRef;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVCM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
    /// Points per work unit. Partial sums are reduced in chunk order, so the
    /// result does not depend on the number of threads.
    pub chunk_size: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 100,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            chunk_size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every assignment step, ending with the final assignment.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` (ties go to the lowest index) and its squared distance.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct Pass {
    labels: Vec<usize>,
    dists: Vec<f64>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    inertia: f64,
}

fn assign_pass(data: &[f64], dim: usize, centroids: &[f64], k: usize, chunk: usize) -> Pass {
    let parts: Vec<Pass> = data
        .par_chunks(chunk * dim)
        .map(|block| {
            let mut p = Pass {
                labels: Vec::with_capacity(block.len() / dim),
                dists: Vec::with_capacity(block.len() / dim),
                sums: vec![0.0; k * dim],
                counts: vec![0; k],
                inertia: 0.0,
            };
            for point in block.chunks_exact(dim) {
                let (j, d) = nearest(point, centroids, dim);
                p.labels.push(j);
                p.dists.push(d);
                p.counts[j] += 1;
                for (s, v) in p.sums[j * dim..(j + 1) * dim].iter_mut().zip(point) {
                    *s += v;
                }
                p.inertia += d;
            }
            p
        })
        .collect();
    let n = data.len() / dim;
    let mut out = Pass {
        labels: Vec::with_capacity(n),
        dists: Vec::with_capacity(n),
        sums: vec![0.0; k * dim],
        counts: vec![0; k],
        inertia: 0.0,
    };
    for p in parts {
        out.labels.extend(p.labels);
        out.dists.extend(p.dists);
        for (a, b) in out.sums.iter_mut().zip(&p.sums) {
            *a += b;
        }
        for (a, b) in out.counts.iter_mut().zip(&p.counts) {
            *a += b;
        }
        out.inertia += p.inertia;
    }
    out
}

fn kmeans_plus_plus(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                cum += d;
                if cum > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = point(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Lloyd's algorithm with seeded k-means++ initialization. `data` is
/// row-major `n x dim`. Clusters that empty out are reseeded at the point
/// farthest from its assigned centroid.
pub fn kmeans_fit(data: &[f64], dim: usize, params: &KMeansParams) -> Result<ClusterModel> {
    let k = params.k;
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::invalid("feature matrix is not a whole number of rows"));
    }
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs at least k={k} points, got {n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("k-means input contains non-finite values"));
    }
    let chunk = params.chunk_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(data, dim, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations_run = 0;

    for _ in 0..params.max_iter {
        let pass = assign_pass(data, dim, &centroids, k, chunk);
        history.push(pass.inertia);

        let mut updated = centroids.clone();
        for j in 0..k {
            if pass.counts[j] > 0 {
                let inv = 1.0 / pass.counts[j] as f64;
                for (u, s) in updated[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&pass.sums[j * dim..(j + 1) * dim])
                {
                    *u = s * inv;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| pass.counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| pass.dists[b].total_cmp(&pass.dists[a]).then(a.cmp(&b)));
            for (&j, &i) in empty.iter().zip(&order) {
                updated[j * dim..(j + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
            }
        }

        let shift = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        iterations_run += 1;
        if shift < params.tol && empty.is_empty() {
            break;
        }
    }

    let last = assign_pass(data, dim, &centroids, k, chunk);
    history.push(last.inertia);
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        inertia: last.inertia,
        iterations_run,
        inertia_history: history,
    })
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid of each row.
    pub fn predict(&self, data: &[f64]) -> Vec<usize> {
        data.par_chunks(self.dim)
            .map(|p| nearest(p, &self.centroids, self.dim).0)
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC).map_err(fmt_io)?;
        write_u32(w, VERSION).map_err(fmt_io)?;
        write_u32(w, self.k as u32).map_err(fmt_io)?;
        write_u32(w, self.dim as u32).map_err(fmt_io)?;
        for &c in &self.centroids {
            write_f32(w, c as f32).map_err(fmt_io)?;
        }
        write_f64(w, self.inertia).map_err(fmt_io)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        expect_version(r, VERSION)?;
        let k = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            centroids.push(read_f32(r)? as f64);
        }
        let inertia = read_f64(r)?;
        expect_eof(r)?;
        Ok(Self {
            k,
            dim,
            centroids,
            inertia,
            iterations_run: 0,
            inertia_history: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut Cursor::new(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Uniform sampling without replacement of up to `n` rows from every group.
/// Groups are visited in ascending order; returned row indices are sorted.
pub fn subsample_groups(group_of_row: &[u32], n: usize, seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &g) in group_of_row.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for rows in groups.values() {
        if rows.len() <= n {
            out.extend_from_slice(rows);
        } else {
            out.extend(
                rand::seq::index::sample(&mut rng, rows.len(), n)
                    .into_iter()
                    .map(|i| rows[i]),
            );
        }
    }
    out.sort_unstable();
    out
}

/// Per-slide subsample of `min(n, available)` tiles, preserving tile order.
pub fn subsample_patches(
    tiles_by_slide: &BTreeMap<String, Vec<TileRef>>,
    n_per_slide: usize,
    seed: u64,
) -> BTreeMap<String, Vec<TileRef>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tiles_by_slide
        .iter()
        .map(|(slide, tiles)| {
            let picked = if tiles.len() <= n_per_slide {
                tiles.clone()
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, tiles.len(), n_per_slide).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| tiles[i].clone()).collect()
            };
            (slide.clone(), picked)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(means: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..per {
                data.push(m[0] + noise.sample(&mut rng));
                data.push(m[1] + noise.sample(&mut rng));
                truth.push(c);
            }
        }
        (data, truth)
    }

    #[test]
    fn k1_is_global_mean() {
        let (data, _) = blobs(&[[0.0, 0.0], [5.0, 1.0]], 50, 1.0, 3);
        let m = kmeans_fit(&data, 2, &KMeansParams { k: 1, ..Default::default() }).unwrap();
        let n = 100.0;
        let mean = [0, 1].map(|d| data.iter().skip(d).step_by(2).sum::<f64>() / n);
        assert!((m.centroid(0)[0] - mean[0]).abs() < 1e-12);
        assert!((m.centroid(0)[1] - mean[1]).abs() < 1e-12);
        let var_n: f64 = data.chunks(2).map(|p| sq_dist(p, &mean)).sum();
        assert!((m.inertia - var_n).abs() < 1e-9 * var_n);
    }

    #[test]
    fn too_few_points() {
        assert!(kmeans_fit(&[0.0, 1.0], 1, &KMeansParams { k: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        let (data, _) = blobs(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [2.0, 2.0]], 80, 1.5, 11);
        let m = kmeans_fit(&data, 2, &KMeansParams { k: 12, seed: 5, ..Default::default() }).unwrap();
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0], "{:?}", m.inertia_history);
        }
        // Every point's label is its nearest centroid.
        let labels = m.predict(&data);
        for (p, &l) in data.chunks(2).zip(&labels) {
            assert_eq!(nearest(p, &m.centroids, 2).0, l);
        }
    }

    #[test]
    fn duplicated_data_same_centroids() {
        let (data, _) = blobs(&[[0.0, 0.0], [20.0, 0.0]], 100, 1.0, 2);
        let twice: Vec<f64> = data.iter().chain(&data).copied().collect();
        let p = KMeansParams { k: 2, seed: 1, ..Default::default() };
        let a = kmeans_fit(&data, 2, &p).unwrap();
        let b = kmeans_fit(&twice, 2, &p).unwrap();
        let mut ca: Vec<_> = a.centroids.chunks(2).map(|c| c.to_vec()).collect();
        let mut cb: Vec<_> = b.centroids.chunks(2).map(|c| c.to_vec()).collect();
        ca.sort_by(|x, y| x[0].total_cmp(&y[0]));
        cb.sort_by(|x, y| x[0].total_cmp(&y[0]));
        for (x, y) in ca.iter().zip(&cb) {
            assert!(sq_dist(x, y).sqrt() < 1e-9);
        }
    }

    #[test]
    fn deterministic_across_chunking() {
        let (data, _) = blobs(&[[0.0, 0.0], [4.0, 4.0]], 300, 1.0, 9);
        let p = KMeansParams { k: 5, seed: 4, chunk_size: 7, ..Default::default() };
        let a = kmeans_fit(&data, 2, &p).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| kmeans_fit(&data, 2, &p).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn model_bytes_round_trip() {
        let (data, _) = blobs(&[[0.0, 0.0], [4.0, 4.0]], 30, 1.0, 9);
        let m = kmeans_fit(&data, 2, &KMeansParams { k: 3, ..Default::default() }).unwrap();
        let bytes = m.to_bytes();
        let back = ClusterModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(ClusterModel::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    fn tiles(slide: &str, n: u32) -> Vec<TileRef> {
        (0..n).map(|i| TileRef { slide_id: slide.into(), x: i * 256, y: 0, size: 256 }).collect()
    }

    #[test]
    fn subsample_contract() {
        let mut by = BTreeMap::new();
        by.insert("a".to_string(), tiles("a", 100));
        by.insert("b".to_string(), tiles("b", 10_000));
        let s = subsample_patches(&by, 500, 7);
        assert_eq!(s["a"].len(), 100);
        assert_eq!(s["b"].len(), 500);
        let uniq: std::collections::HashSet<_> = s["b"].iter().collect();
        assert_eq!(uniq.len(), 500);
        assert_eq!(s, subsample_patches(&by, 500, 7));
        assert_ne!(s, subsample_patches(&by, 500, 8));
    }

    #[test]
    fn subsample_groups_contract() {
        let groups: Vec<u32> = (0..1000).map(|i| (i % 3) as u32).collect();
        let rows = subsample_groups(&groups, 100, 1);
        assert_eq!(rows.len(), 300);
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(rows, subsample_groups(&groups, 100, 1));
        assert_eq!(subsample_groups(&groups, 5000, 1).len(), 1000);
    }
}
