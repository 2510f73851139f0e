use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use slidecurate_client::Client;
use slidecurate_core::api::QueryRequest;
use slidecurate_core::catalog::{load_manifest, read_tiles_jsonl, tiles_by_slide, Catalog, TileRef};
use slidecurate_core::dump::FeatureDump;
use slidecurate_core::retrieval::{
    build_store, import_dump, query_topn, roi_vectors, topk_accuracy, Embedder, EmbedderSpec, EmbeddingStore,
    QueryOptions, QueryRoi, RankedResult,
};
use slidecurate_core::synth::load_queries;
use slidecurate_service::ServiceConfig;

use crate::io::{output, read_json, write_json};

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["tiles", "import"])))]
pub struct EmbedArgs {
    /// Slide manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Tiles to embed (JSON Lines).
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Store precomputed vectors from a feature dump instead of embedding.
    #[arg(long, conflicts_with = "tiles")]
    pub import: Option<PathBuf>,
    /// `features` (36-d color statistics) or `random:<dim>:<seed>`.
    #[arg(long, default_value = "features")]
    pub embedder: EmbedderSpec,
    /// Replaces the seed of a `random` embedder.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Slide ids to leave out of the store.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Leave out every slide named in this query file (JSON Lines).
    #[arg(long)]
    pub exclude_queries: Option<PathBuf>,
    /// Output store.
    #[arg(long)]
    pub out: PathBuf,
}

fn with_seed(spec: EmbedderSpec, seed: Option<u64>) -> EmbedderSpec {
    match (spec, seed) {
        (EmbedderSpec::RandomProjection { dim, .. }, Some(seed)) => EmbedderSpec::RandomProjection { dim, seed },
        _ => spec,
    }
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let catalog = load_manifest(&a.manifest)?;
    let mut exclude: HashSet<String> = a.exclude.iter().cloned().collect();
    if let Some(q) = &a.exclude_queries {
        exclude.extend(load_queries(q)?.into_iter().map(|q| q.slide_id));
    }
    let store = match (&a.tiles, &a.import) {
        (_, Some(dump)) => {
            let full = import_dump(&catalog, &FeatureDump::load(dump)?)?;
            let kept = full.slides().iter().filter(|s| !exclude.contains(&s.slide_id)).cloned().collect();
            EmbeddingStore::new(full.dim(), kept)?
        }
        (Some(tiles), None) => {
            let by_slide = tiles_by_slide(&read_tiles_jsonl(tiles)?);
            let embedder = with_seed(a.embedder, a.seed).build()?;
            build_store(&catalog, &by_slide, embedder.as_ref(), &exclude)?
        }
        (None, None) => unreachable!("clap requires --tiles or --import"),
    };
    store.save(&a.out)?;
    tracing::info!(slides = store.len(), tiles = store.total_tiles(), dim = store.dim(), "store written");
    Ok(())
}

/// Everything needed to embed ROIs of slides that are not in the store.
#[derive(Debug, Args)]
pub struct FallbackArgs {
    /// Manifest for embedding query slides outside the store.
    #[arg(long, requires = "tiles")]
    pub manifest: Option<PathBuf>,
    /// Tile list for query slides outside the store.
    #[arg(long, requires = "manifest")]
    pub tiles: Option<PathBuf>,
    /// Embedder for query slides outside the store; must match the store.
    #[arg(long, default_value = "features")]
    pub embedder: EmbedderSpec,
}

struct Fallback {
    catalog: Catalog,
    tiles: BTreeMap<String, Vec<TileRef>>,
    embedder: Box<dyn Embedder>,
}

impl FallbackArgs {
    fn load(&self) -> Result<Option<Fallback>> {
        let (Some(manifest), Some(tiles)) = (&self.manifest, &self.tiles) else {
            return Ok(None);
        };
        Ok(Some(Fallback {
            catalog: load_manifest(manifest)?,
            tiles: tiles_by_slide(&read_tiles_jsonl(tiles)?),
            embedder: self.embedder.build()?,
        }))
    }
}

fn local_query(store: &EmbeddingStore, fallback: Option<&Fallback>, roi: &QueryRoi, opts: &QueryOptions) -> Result<RankedResult> {
    let source = fallback.map(|f| (&f.catalog, &f.tiles, f.embedder.as_ref()));
    let vectors = roi_vectors(store, roi, source)?;
    Ok(query_topn(store, &roi.slide_id, &vectors, opts)?)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("cannot start async runtime")
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("backend").required(true).args(["store", "server"])))]
pub struct QueryArgs {
    /// Embedding store to search.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Send the query to a running service instead, e.g. http://127.0.0.1:8080.
    #[arg(long, conflicts_with_all = ["store", "include_self", "manifest", "tiles"])]
    pub server: Option<String>,
    /// Query file: JSON with `slide_id` and a `roi` list of `{x, y}` tile origins.
    #[arg(long)]
    pub roi: PathBuf,
    /// Patch-level top-k averaged into each slide score.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Number of ranked slides to report.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Let the query slide appear in its own results.
    #[arg(long)]
    pub include_self: bool,
    /// Include each ranked slide's per-tile similarity map.
    #[arg(long)]
    pub maps: bool,
    #[command(flatten)]
    pub fallback: FallbackArgs,
    /// Seconds to wait for a server-side query.
    #[arg(long, default_value_t = 300)]
    pub timeout: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn query(a: QueryArgs) -> Result<()> {
    let roi: QueryRoi = read_json(&a.roi)?;
    let result = match (&a.server, &a.store) {
        (Some(url), _) => {
            let mut req = QueryRequest::new(roi);
            req.k = a.k;
            req.top_n = a.top;
            let client = Client::new(url.clone());
            let status = runtime()?.block_on(client.run_query(&req, Duration::from_secs(a.timeout)))?;
            let mut result = status.result.context("server reported a finished query without a result")?;
            if !a.maps {
                result.maps.clear();
            }
            result
        }
        (None, Some(store)) => {
            let store = EmbeddingStore::load(store)?;
            let opts = QueryOptions { k: a.k, top_n: a.top, include_self: a.include_self, with_maps: a.maps };
            local_query(&store, a.fallback.load()?.as_ref(), &roi, &opts)?
        }
        (None, None) => unreachable!("clap requires --store or --server"),
    };
    write_json(a.out.as_deref(), &result)
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("backend").required(true).args(["store", "server"])))]
pub struct EvalArgs {
    /// Query set (JSON Lines of query files).
    #[arg(long)]
    pub queries: PathBuf,
    /// Manifest holding the true diagnosis of every query slide.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding store to search.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Run the queries against a running service instead.
    #[arg(long, conflicts_with_all = ["store", "tiles"])]
    pub server: Option<String>,
    /// Tile list for query slides outside the store.
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Embedder for query slides outside the store.
    #[arg(long, default_value = "features")]
    pub embedder: EmbedderSpec,
    /// Patch-level top-k.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Cutoffs at which accuracy is reported.
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    pub k_list: Vec<usize>,
    /// Seconds to wait for each server-side query.
    #[arg(long, default_value_t = 300)]
    pub timeout: u64,
    /// Output `k,accuracy` CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval_retrieval(a: EvalArgs) -> Result<()> {
    let queries = load_queries(&a.queries)?;
    if queries.is_empty() {
        bail!("{}: no queries", a.queries.display());
    }
    let catalog = load_manifest(&a.manifest)?;
    let truths = queries
        .iter()
        .map(|q| {
            catalog
                .get(&q.slide_id)
                .and_then(|r| r.diagnosis.clone())
                .with_context(|| format!("query slide {} has no diagnosis in the manifest", q.slide_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let top_n = a.k_list.iter().copied().max().unwrap_or(1);
    let (results, known) = match (&a.server, &a.store) {
        (Some(url), _) => {
            let client = Client::new(url.clone());
            runtime()?.block_on(async {
                let known: BTreeSet<String> = client
                    .slides()
                    .await?
                    .slides
                    .into_iter()
                    .filter(|s| s.in_store)
                    .filter_map(|s| s.diagnosis)
                    .collect();
                let mut results = Vec::with_capacity(queries.len());
                for q in &queries {
                    let mut req = QueryRequest::new(q.clone());
                    req.k = a.k;
                    req.top_n = top_n;
                    let status = client.run_query(&req, Duration::from_secs(a.timeout)).await?;
                    results.push(status.result.context("server reported a finished query without a result")?);
                }
                anyhow::Ok((results, known))
            })?
        }
        (None, Some(store)) => {
            let store = EmbeddingStore::load(store)?;
            let fallback = match &a.tiles {
                Some(t) => Some(Fallback {
                    catalog: catalog.clone(),
                    tiles: tiles_by_slide(&read_tiles_jsonl(t)?),
                    embedder: a.embedder.build()?,
                }),
                None => None,
            };
            let opts = QueryOptions { k: a.k, top_n, include_self: false, with_maps: false };
            let results = queries
                .iter()
                .map(|q| local_query(&store, fallback.as_ref(), q, &opts))
                .collect::<Result<Vec<_>>>()?;
            let known = store
                .slides()
                .iter()
                .filter(|s| !s.diagnosis.is_empty())
                .map(|s| s.diagnosis.clone())
                .collect();
            (results, known)
        }
        (None, None) => unreachable!("clap requires --store or --server"),
    };
    let acc = topk_accuracy(&results, &truths, &a.k_list, &known)?;
    write_accuracy_csv(a.out.as_deref(), &acc)
}

fn write_accuracy_csv(path: Option<&Path>, acc: &[(usize, f64)]) -> Result<()> {
    let mut w = output(path)?;
    writeln!(w, "k,accuracy")?;
    for (k, v) in acc {
        writeln!(w, "{k},{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Embedding store to serve.
    #[arg(long, env = "SLIDECURATE_STORE")]
    pub store: PathBuf,
    /// Slide manifest.
    #[arg(long, env = "SLIDECURATE_MANIFEST")]
    pub manifest: PathBuf,
    /// Tile list giving grids of slides outside the store.
    #[arg(long, env = "SLIDECURATE_TILES")]
    pub tiles: Option<PathBuf>,
    /// Listen address.
    #[arg(long, env = "SLIDECURATE_BIND", default_value = slidecurate_service::DEFAULT_BIND)]
    pub bind: SocketAddr,
    /// Tile edge in pixels.
    #[arg(long, env = "SLIDECURATE_TILE_SIZE", default_value_t = 256)]
    pub tile_size: u32,
    /// Withhold diagnoses of slides that are not in the store.
    #[arg(long, env = "SLIDECURATE_HIDE_QUERY_DIAGNOSES")]
    pub hide_query_diagnoses: bool,
    /// Queries over more candidate tiles than this run in the background.
    #[arg(long, env = "SLIDECURATE_SYNC_TILE_LIMIT", default_value_t = slidecurate_service::DEFAULT_SYNC_TILE_LIMIT)]
    pub sync_tile_limit: usize,
    /// Embedder for ROIs of slides outside the store.
    #[arg(long, env = "SLIDECURATE_EMBEDDER", default_value = "features")]
    pub embedder: EmbedderSpec,
    /// Finished queries kept in memory.
    #[arg(long, env = "SLIDECURATE_CACHE_CAPACITY", default_value_t = 1024)]
    pub cache_capacity: usize,
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::new(a.store, a.manifest);
    cfg.tiles = a.tiles;
    cfg.bind = a.bind;
    cfg.tile_size = a.tile_size;
    cfg.hide_query_diagnoses = a.hide_query_diagnoses;
    cfg.sync_tile_limit = a.sync_tile_limit;
    cfg.embedder = a.embedder;
    cfg.cache_capacity = a.cache_capacity;
    runtime()?.block_on(slidecurate_service::run(cfg)).map_err(|e| anyhow::anyhow!(e))
}
