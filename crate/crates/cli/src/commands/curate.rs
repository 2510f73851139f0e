use std::collections::HashMap;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use slidecurate_core::augment::augment_tile_image;
use slidecurate_core::catalog::{assign_groups, crop_tile, load_manifest, read_tiles_jsonl, GroupRules, TileRef};
use slidecurate_core::cluster::{apply_merge_map, kmeans_fit, propagate_labels, subsample_groups, KMeansParams, MergeMap};
use slidecurate_core::dump::{read_labels_csv, read_optional_labels_csv, write_labels_csv, write_optional_labels_csv, FeatureDump};
use slidecurate_core::features::StainStatsTable;
use slidecurate_core::sampler::{build_index, write_frequency_csv, SamplerIndex, SamplingPlan, WeightTable};

use crate::io::{create_dir, output, write_jsonl};

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Feature dump to cluster.
    #[arg(long)]
    pub features: PathBuf,
    /// Number of clusters.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Maximum Lloyd iterations.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Convergence threshold on centroid movement.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fit on at most this many rows per slide group, then label all rows.
    #[arg(long, requires_all = ["manifest", "groups"])]
    pub subsample: Option<usize>,
    /// Manifest the dump was computed from; needed by --subsample.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Grouping rules (TOML); needed by --subsample.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Output cluster model.
    #[arg(long)]
    pub model: PathBuf,
    /// Output `row,label` CSV for every dump row.
    #[arg(long)]
    pub labels: PathBuf,
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let dump = FeatureDump::load(&a.features)?;
    let dim = dump.dim();
    let data: Vec<f64> = dump.rows().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
    let fit_data = match (a.subsample, &a.manifest, &a.groups) {
        (Some(n), Some(manifest), Some(groups)) => {
            let catalog = assign_groups(&load_manifest(manifest)?, &GroupRules::load(groups)?);
            let group_of_row = dump
                .keys()
                .iter()
                .map(|k| {
                    catalog
                        .records()
                        .get(k.slide_index as usize)
                        .map(|r| r.group_id as u32)
                        .with_context(|| format!("dump row references slide index {} outside the manifest", k.slide_index))
                })
                .collect::<Result<Vec<u32>>>()?;
            let rows = subsample_groups(&group_of_row, n, a.seed);
            tracing::info!(rows = rows.len(), "fitting on a per-group subsample");
            rows.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect()
        }
        _ => data.clone(),
    };
    let params = KMeansParams { k: a.k, max_iter: a.max_iter, tol: a.tol, seed: a.seed, ..Default::default() };
    let model = kmeans_fit(&fit_data, dim, &params)?;
    model.save(&a.model)?;
    let labels = model.predict(&data);
    write_labels_csv(output(Some(&a.labels))?, &labels)?;
    tracing::info!(k = model.k, iterations = model.iterations_run, inertia = model.inertia, "clustered");
    Ok(())
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Feature dump of the labeled rows.
    #[arg(long)]
    pub labeled_features: PathBuf,
    /// `row,label` CSV for the labeled dump.
    #[arg(long)]
    pub labels: PathBuf,
    /// Feature dump of the rows to label.
    #[arg(long)]
    pub features: PathBuf,
    /// Neighbors that vote on each label.
    #[arg(long, default_value_t = 5)]
    pub knn: usize,
    /// Output `row,label` CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn propagate(a: PropagateArgs) -> Result<()> {
    let labeled = FeatureDump::load(&a.labeled_features)?;
    let labels = to_u32(&read_labels_csv(&a.labels)?)?;
    if labels.len() != labeled.len() {
        bail!("{} labels for {} labeled rows", labels.len(), labeled.len());
    }
    let queries = FeatureDump::load(&a.features)?;
    if queries.dim() != labeled.dim() {
        bail!("dimension mismatch: {} vs {}", queries.dim(), labeled.dim());
    }
    let flat = |d: &FeatureDump| -> Vec<f64> { d.rows().flat_map(|r| r.iter().map(|&v| v as f64)).collect() };
    let out = propagate_labels(&flat(&labeled), &labels, &flat(&queries), labeled.dim(), a.knn)?;
    let out: Vec<usize> = out.into_iter().map(|l| l as usize).collect();
    write_labels_csv(output(Some(&a.out))?, &out)?;
    Ok(())
}

fn to_u32(labels: &[usize]) -> Result<Vec<u32>> {
    labels
        .iter()
        .map(|&l| u32::try_from(l).context("label exceeds u32"))
        .collect()
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Raw cluster `row,label` CSV.
    #[arg(long)]
    pub labels: PathBuf,
    /// Merge map (TOML).
    #[arg(long)]
    pub map: PathBuf,
    /// Output meta-cluster CSV; dropped rows have an empty label.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn merge(a: MergeArgs) -> Result<()> {
    let raw = to_u32(&read_labels_csv(&a.labels)?)?;
    let map = MergeMap::load(&a.map)?;
    let metas = apply_merge_map(&raw, &map)?;
    let metas: Vec<Option<usize>> = metas.into_iter().map(|m| m.map(|v| v as usize)).collect();
    let dropped = metas.iter().filter(|m| m.is_none()).count();
    write_optional_labels_csv(output(Some(&a.out))?, &metas)?;
    tracing::info!(rows = metas.len(), dropped, "merged");
    Ok(())
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Slide manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Grouping rules (TOML).
    #[arg(long)]
    pub groups: PathBuf,
    /// Tile list from `ingest`.
    #[arg(long)]
    pub tiles: PathBuf,
    /// Meta-cluster CSV from `merge`.
    #[arg(long)]
    pub metas: PathBuf,
    /// Feature dump whose rows the meta labels follow. Without it, meta
    /// row i belongs to tile i of --tiles.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output sampler index (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn index(a: IndexArgs) -> Result<()> {
    let catalog = assign_groups(&load_manifest(&a.manifest)?, &GroupRules::load(&a.groups)?);
    let tiles = read_tiles_jsonl(&a.tiles)?;
    let metas: Vec<Option<u32>> = read_optional_labels_csv(&a.metas)?
        .into_iter()
        .map(|m| m.map(u32::try_from).transpose())
        .collect::<Result<_, _>>()
        .context("meta label exceeds u32")?;
    let tiles = match &a.features {
        None => tiles,
        Some(path) => {
            let dump = FeatureDump::load(path)?;
            let by_key: HashMap<(&str, u32, u32), &TileRef> =
                tiles.iter().map(|t| ((t.slide_id.as_str(), t.x, t.y), t)).collect();
            dump.keys()
                .iter()
                .map(|k| {
                    let slide = catalog
                        .records()
                        .get(k.slide_index as usize)
                        .with_context(|| format!("dump row references slide index {}", k.slide_index))?;
                    by_key
                        .get(&(slide.slide_id.as_str(), k.x, k.y))
                        .map(|t| (*t).clone())
                        .with_context(|| format!("no tile {} ({}, {}) in {}", slide.slide_id, k.x, k.y, a.tiles.display()))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let index = build_index(&catalog, &tiles, &metas)?;
    index.save(&a.out)?;
    tracing::info!(buckets = index.buckets().len(), tiles = index.tile_count(), "index written");
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Sampler index from `index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Group and meta-cluster weights (TOML).
    #[arg(long)]
    pub weights: PathBuf,
    /// Number of draws.
    #[arg(long)]
    pub n: u64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Position in the stream of the first draw, for resuming.
    #[arg(long, default_value_t = 0)]
    pub offset: u64,
    /// Output draws (JSON Lines); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-bucket draw counts against the target distribution.
    #[arg(long)]
    pub frequencies: Option<PathBuf>,
}

#[derive(Serialize)]
struct Draw<'a> {
    #[serde(flatten)]
    tile: &'a TileRef,
    group: u32,
    meta: u32,
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let index = SamplerIndex::load(&a.index)?;
    let weights = WeightTable::load(&a.weights)?;
    let plan = SamplingPlan::new(&index, &weights)?;
    let mut stream = plan.stream(a.seed);
    stream.seek(a.offset);
    let mut keys = Vec::new();
    let mut w = output(a.out.as_deref())?;
    for _ in 0..a.n {
        let (key, tile) = stream.next_draw();
        keys.push(key);
        serde_json::to_writer(&mut w, &Draw { tile, group: key.group, meta: key.meta })?;
        writeln!(w)?;
    }
    w.flush()?;
    if let Some(path) = &a.frequencies {
        write_frequency_csv(output(Some(path))?, &index, &weights, &keys)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Slide manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Stain statistics from `stats`.
    #[arg(long)]
    pub stats: PathBuf,
    /// Tiles to augment (JSON Lines, e.g. `sample` output).
    #[arg(long)]
    pub tiles: PathBuf,
    /// Directory for PNG views and `views.jsonl`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Augment only the first N tiles.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Serialize)]
struct View {
    file: String,
    #[serde(flatten)]
    tile: TileRef,
    target_slide: String,
    dihedral_code: u8,
}

pub fn augment(a: AugmentArgs) -> Result<()> {
    let catalog = load_manifest(&a.manifest)?;
    let stats = StainStatsTable::load(&a.stats)?;
    let mut tiles = read_tiles_jsonl(&a.tiles)?;
    if let Some(n) = a.limit {
        tiles.truncate(n);
    }
    let dir = create_dir(&a.out_dir)?;
    // Visit tiles slide by slide so every slide is decoded once.
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by(|&i, &j| tiles[i].slide_id.cmp(&tiles[j].slide_id).then(i.cmp(&j)));
    let mut views: Vec<Option<View>> = (0..tiles.len()).map(|_| None).collect();
    let mut loaded: Option<(String, slidecurate_core::image::RgbImage)> = None;
    for i in order {
        let tile = &tiles[i];
        if loaded.as_ref().is_none_or(|(id, _)| *id != tile.slide_id) {
            loaded = Some((tile.slide_id.clone(), catalog.load_image(&tile.slide_id)?));
        }
        let (_, slide) = loaded.as_ref().expect("slide loaded above");
        let pixels = crop_tile(slide, tile)?;
        let view = augment_tile_image(&pixels, &tile.slide_id, &stats, a.seed.wrapping_add(i as u64))?;
        let file = format!("{i:06}.png");
        let path = dir.join(&file);
        view.image.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
        views[i] = Some(View {
            file,
            tile: tile.clone(),
            target_slide: view.target_slide,
            dihedral_code: view.dihedral_code,
        });
    }
    write_jsonl(Some(&dir.join("views.jsonl")), views.into_iter().flatten())?;
    tracing::info!(views = tiles.len(), "augmented views written");
    Ok(())
}
