use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use slidecurate_core::catalog::{load_manifest, read_tiles_jsonl, tiles_by_slide, write_tiles_jsonl, MaskParams, TileParams};
use slidecurate_core::features::{slide_stain_stats, StainStatsTable};
use slidecurate_core::pipeline::{ingest_tiles, tile_features};
use slidecurate_core::stain::StainMatrix;
use slidecurate_core::synth::{generate, SynthParams};

use crate::io::read_json;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of slides.
    #[arg(long, default_value_t = 40)]
    pub slides: usize,
    /// Number of diagnoses.
    #[arg(long, default_value_t = 5)]
    pub diagnoses: usize,
    /// Number of labs, each with its own stain shift.
    #[arg(long, default_value_t = 4)]
    pub labs: usize,
    /// Slide width in pixels.
    #[arg(long, default_value_t = 1024)]
    pub width: u32,
    /// Slide height in pixels.
    #[arg(long, default_value_t = 1024)]
    pub height: u32,
    /// Tile edge in pixels for the generated query regions.
    #[arg(long, default_value_t = 256)]
    pub tile_size: u32,
    /// Every n-th slide is IHC-stained; 0 for none.
    #[arg(long, default_value_t = 8)]
    pub ihc_every: usize,
    /// Held-out query slides per diagnosis.
    #[arg(long, default_value_t = 2)]
    pub queries_per_diagnosis: usize,
    /// Raw cluster count assumed by the generated merge map.
    #[arg(long, default_value_t = 10)]
    pub clusters: u32,
    /// Meta-clusters in the generated merge map and weights.
    #[arg(long, default_value_t = 3)]
    pub metas: u32,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let params = SynthParams {
        slides: a.slides,
        diagnoses: a.diagnoses,
        labs: a.labs,
        width: a.width,
        height: a.height,
        tile_size: a.tile_size,
        ihc_every: a.ihc_every,
        queries_per_diagnosis: a.queries_per_diagnosis,
        cluster_k: a.clusters,
        metas: a.metas,
        seed: a.seed,
    };
    let corpus = generate(&params, &a.out)?;
    tracing::info!(
        slides = corpus.catalog.len(),
        queries = corpus.query_rois.len(),
        dir = %corpus.dir.display(),
        "corpus written"
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Slide manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output tile list (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Tile edge in pixels.
    #[arg(long, default_value_t = 256)]
    pub tile_size: u32,
    /// Tile step in pixels; defaults to the tile size.
    #[arg(long)]
    pub stride: Option<u32>,
    /// Minimum tissue fraction for a tile to be kept.
    #[arg(long, default_value_t = 0.25)]
    pub min_tissue: f64,
    /// Minimum HSV saturation of tissue.
    #[arg(long, default_value_t = 0.05)]
    pub s_min: f64,
    /// Maximum HSV value of tissue.
    #[arg(long, default_value_t = 0.95)]
    pub v_max: f64,
    /// Tissue mask cell size in pixels.
    #[arg(long, default_value_t = 16)]
    pub downsample: u32,
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let catalog = load_manifest(&a.manifest)?;
    let mask = MaskParams { s_min: a.s_min, v_max: a.v_max, downsample: a.downsample };
    let tiles = TileParams { size: a.tile_size, stride: a.stride.unwrap_or(a.tile_size), min_tissue: a.min_tissue };
    let found = ingest_tiles(&catalog, &mask, &tiles)?;
    write_tiles_jsonl(&found, &a.out)?;
    tracing::info!(slides = catalog.len(), tiles = found.len(), "tiles listed");
    Ok(())
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Slide manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Tile list from `ingest`.
    #[arg(long)]
    pub tiles: PathBuf,
    /// Stain matrix as a JSON array of three RGB optical-density rows;
    /// defaults to hematoxylin, eosin, DAB.
    #[arg(long)]
    pub stain_matrix: Option<PathBuf>,
    /// Output feature dump.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn features(a: FeaturesArgs) -> Result<()> {
    let catalog = load_manifest(&a.manifest)?;
    let tiles = read_tiles_jsonl(&a.tiles)?;
    let stains = match &a.stain_matrix {
        Some(p) => StainMatrix::new(read_json(p)?).with_context(|| p.display().to_string())?,
        None => StainMatrix::hed(),
    };
    let dump = tile_features(&catalog, &tiles, &stains)?;
    dump.save(&a.out)?;
    tracing::info!(rows = dump.len(), dim = dump.dim(), "features written");
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Slide manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Tile list (JSON Lines).
    #[arg(long)]
    pub tiles: PathBuf,
    /// Tiles sampled per slide.
    #[arg(long, default_value_t = 500)]
    pub max_tiles: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output statistics table (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let catalog = load_manifest(&a.manifest)?;
    let by_slide = tiles_by_slide(&read_tiles_jsonl(&a.tiles)?);
    let mut table = StainStatsTable::default();
    for r in catalog.records() {
        let Some(tiles) = by_slide.get(&r.slide_id) else {
            tracing::warn!(slide = %r.slide_id, "no tiles, skipped");
            continue;
        };
        table.insert(slide_stain_stats(&catalog, &r.slide_id, tiles, a.max_tiles, a.seed)?);
    }
    table.save(&a.out)?;
    tracing::info!(slides = table.0.len(), "stain statistics written");
    Ok(())
}
