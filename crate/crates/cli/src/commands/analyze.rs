use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slidecurate_core::dump::read_labels_csv;
use slidecurate_core::pca::{component_heatmap, pca_fit, positional_mean_subtract};
use slidecurate_core::probe::{sweep, train_probe, LinearModel, ProbeReport, SweepConfig, TrainConfig};
use slidecurate_core::retrieval::EmbeddingStore;
use slidecurate_core::Error;

use crate::io::{create_dir, output, read_vectors};

#[derive(Debug, Args)]
pub struct ConceptMapArgs {
    /// Embedding store holding the slide.
    #[arg(long)]
    pub store: PathBuf,
    /// Slide to map.
    #[arg(long)]
    pub slide: String,
    /// Number of principal components to render.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    /// Tile step in pixels, for placing tiles on the grid.
    #[arg(long, default_value_t = 256)]
    pub tile_size: u32,
    /// Render both signs of each component instead of only the positive part.
    #[arg(long)]
    pub signed: bool,
    /// Directory for `component_<i>.png`, `eigenvalues.csv` and `scores.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn concept_map(a: ConceptMapArgs) -> Result<()> {
    if a.tile_size == 0 {
        bail!("--tile-size must be positive");
    }
    let store = EmbeddingStore::load(&a.store)?;
    let dim = store.dim();
    let target = store.get(&a.slide).ok_or_else(|| Error::UnknownSlide(a.slide.clone()))?;

    // Subtract the mean embedding of every grid position over the whole store.
    let mut positions = Vec::with_capacity(store.total_tiles());
    let mut all = Vec::with_capacity(store.total_tiles() * dim);
    let mut start = 0;
    for s in store.slides() {
        if s.slide_id == a.slide {
            start = positions.len();
        }
        positions.extend(s.coords.iter().copied());
        all.extend(s.vectors_f64());
    }
    let centered = positional_mean_subtract(&positions, &all, dim)?;
    let n = target.tile_count();
    let mut rows = centered[start * dim..(start + n) * dim].to_vec();
    for j in 0..dim {
        let mean = (0..n).map(|i| rows[i * dim + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| rows[i * dim + j] -= mean);
    }

    let pca = pca_fit(&rows, dim, a.components)?;
    let scores = pca.transform(&rows);
    let m = pca.n_components();
    let cells: Vec<(usize, usize)> = target
        .coords
        .iter()
        .map(|&(x, y)| ((x / a.tile_size) as usize, (y / a.tile_size) as usize))
        .collect();
    let cols = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let grid_rows = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;

    let dir = create_dir(&a.out_dir)?;
    for c in 0..m {
        let values: Vec<f64> = (0..n).map(|i| scores[i * m + c]).collect();
        // Cells without a tile take the lowest rendered value.
        let floor = if a.signed { values.iter().copied().fold(f64::INFINITY, f64::min) } else { 0.0 };
        let mut grid = vec![floor; cols * grid_rows];
        for (&(cx, cy), v) in cells.iter().zip(&values) {
            grid[cy * cols + cx] = *v;
        }
        let img = component_heatmap(&grid, cols, !a.signed)?;
        let path = dir.join(format!("component_{c}.png"));
        img.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
    }

    let mut w = output(Some(&dir.join("eigenvalues.csv")))?;
    writeln!(w, "component,eigenvalue")?;
    for (c, v) in pca.eigenvalues.iter().enumerate() {
        writeln!(w, "{c},{v}")?;
    }
    w.flush()?;

    let mut w = output(Some(&dir.join("scores.csv")))?;
    let header: Vec<String> = (0..m).map(|c| format!("pc{c}")).collect();
    writeln!(w, "x,y,{}", header.join(","))?;
    for (i, (x, y)) in target.coords.iter().enumerate() {
        let row: Vec<String> = (0..m).map(|c| scores[i * m + c].to_string()).collect();
        writeln!(w, "{x},{y},{}", row.join(","))?;
    }
    w.flush()?;
    tracing::info!(components = m, tiles = n, "concept maps written");
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Training vectors: a feature dump or an embedding store.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// `row,label` CSV for --embeddings.
    #[arg(long)]
    pub labels: PathBuf,
    /// Held-out vectors; without them a stratified split of the training
    /// rows is held out.
    #[arg(long, requires = "test_labels")]
    pub test_embeddings: Option<PathBuf>,
    /// `row,label` CSV for --test-embeddings.
    #[arg(long, requires = "test_embeddings")]
    pub test_labels: Option<PathBuf>,
    /// Fraction of each class held out when no test set is given.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Base learning rate of the cosine schedule.
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Training epochs.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid of (learning rate, weight decay) pairs (TOML, `grid` and
    /// optional `val_fraction`); overrides --lr and --weight-decay.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Output `metric,value` CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_labeled(vectors: &Path, labels_path: &Path) -> Result<(Vec<f64>, Vec<u32>, usize)> {
    let (data, dim) = read_vectors(vectors)?;
    let labels: Vec<u32> = read_labels_csv(labels_path)?
        .into_iter()
        .map(|l| u32::try_from(l).context("label exceeds u32"))
        .collect::<Result<_>>()?;
    if dim == 0 || data.len() != labels.len() * dim {
        bail!(
            "{} has {} rows but {} has {} labels",
            vectors.display(),
            data.len() / dim.max(1),
            labels_path.display(),
            labels.len()
        );
    }
    Ok((data, labels, dim))
}

/// Per class, holds out `round(fraction * count)` rows, keeping at least one
/// training row per class.
fn stratified_split(labels: &[u32], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rows in by_class.values_mut() {
        rows.shuffle(&mut rng);
        let n_test = ((rows.len() as f64 * fraction).round() as usize).min(rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn gather(data: &[f64], labels: &[u32], dim: usize, rows: &[usize]) -> (Vec<f64>, Vec<u32>) {
    let x = rows.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect();
    (x, rows.iter().map(|&i| labels[i]).collect())
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let (data, labels, dim) = load_labeled(&a.embeddings, &a.labels)?;
    let (train_x, train_y, test_x, test_y) = match (&a.test_embeddings, &a.test_labels) {
        (Some(te), Some(tl)) => {
            let (tx, ty, tdim) = load_labeled(te, tl)?;
            if tdim != dim {
                bail!("test dimension {tdim} differs from training dimension {dim}");
            }
            (data, labels, tx, ty)
        }
        _ => {
            if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
                bail!("--test-fraction must be in (0, 1)");
            }
            let (train, test) = stratified_split(&labels, a.test_fraction, a.seed);
            if test.is_empty() {
                bail!("the split left no test rows; pass a test set or a larger --test-fraction");
            }
            let (tx, ty) = gather(&data, &labels, dim, &train);
            let (vx, vy) = gather(&data, &labels, dim, &test);
            (tx, ty, vx, vy)
        }
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..Default::default()
    };
    let model: LinearModel = match &a.sweep {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let grid: SweepConfig = toml::from_str(&text).with_context(|| format!("{}: invalid sweep", path.display()))?;
            let out = sweep(&train_x, &train_y, dim, &cfg, &grid)?;
            for (lr, wd, acc) in &out.scores {
                tracing::info!(lr, weight_decay = wd, val_balanced_accuracy = acc, "sweep point");
            }
            tracing::info!(lr = out.best.0, weight_decay = out.best.1, "selected");
            out.model
        }
        None => train_probe(&train_x, &train_y, dim, &cfg)?.model,
    };
    let report = ProbeReport::evaluate(&model.predict(&test_x), &test_y)?;
    report.write_csv(output(a.out.as_deref())?)?;
    eprint!("{}", report.summary());
    Ok(())
}
