use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use slidecurate_core::api::{QueryRequest, QueryState, QueryStatus};
use slidecurate_core::catalog::{load_manifest, read_tiles_jsonl, tiles_by_slide, Catalog, TileRef};
use slidecurate_core::retrieval::{Embedder, EmbeddingStore, RankedResult};
use slidecurate_core::{Error, Result};

use crate::ServiceConfig;

#[derive(Debug, Clone)]
pub(crate) enum Outcome {
    Pending,
    Done { result: Arc<RankedResult>, roi: Arc<Vec<f64>> },
    Failed(String),
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub request: QueryRequest,
    pub outcome: Outcome,
}

impl Entry {
    pub fn status(&self, query_id: &str) -> QueryStatus {
        let (status, result, error) = match &self.outcome {
            Outcome::Pending => (QueryState::Pending, None, None),
            Outcome::Done { result, .. } => (QueryState::Done, Some((**result).clone()), None),
            Outcome::Failed(e) => (QueryState::Failed, None, Some(e.clone())),
        };
        QueryStatus { query_id: query_id.to_string(), status, request: self.request.clone(), result, error }
    }
}

/// Bounded query cache; the oldest entry is evicted first.
#[derive(Debug, Default)]
pub(crate) struct QueryCache {
    entries: HashMap<String, Entry>,
    order: VecDeque<String>,
    capacity: usize,
}

impl QueryCache {
    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.get(id)
    }

    pub fn insert(&mut self, id: String, entry: Entry) {
        if self.entries.insert(id.clone(), entry).is_none() {
            self.order.push_back(id);
            while self.order.len() > self.capacity.max(1) {
                if let Some(old) = self.order.pop_front() {
                    self.entries.remove(&old);
                }
            }
        }
    }

    pub fn set_outcome(&mut self, id: &str, outcome: Outcome) {
        if let Some(e) = self.entries.get_mut(id) {
            e.outcome = outcome;
        }
    }
}

pub(crate) struct Inner {
    pub catalog: Catalog,
    pub store: EmbeddingStore,
    pub tiles: BTreeMap<String, Vec<TileRef>>,
    pub embedder: Box<dyn Embedder>,
    pub tile_size: u32,
    pub hide_query_diagnoses: bool,
    pub sync_tile_limit: usize,
    pub queries: Mutex<QueryCache>,
}

/// Shared, read-only service data plus the query cache.
#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Inner>,
}

impl AppState {
    pub fn new(
        catalog: Catalog,
        store: EmbeddingStore,
        tiles: &[TileRef],
        embedder: Box<dyn Embedder>,
        config: &ServiceConfig,
    ) -> Result<Self> {
        if let Some(s) = store.slides().iter().find(|s| catalog.get(&s.slide_id).is_none()) {
            return Err(Error::Config(format!("store slide {} is not in the manifest", s.slide_id)));
        }
        if embedder.dim() != store.dim() {
            return Err(Error::Config(format!(
                "embedder dim {} does not match store dim {}",
                embedder.dim(),
                store.dim()
            )));
        }
        if config.tile_size == 0 {
            return Err(Error::Config("tile size must be > 0".into()));
        }
        Ok(Self {
            inner: Arc::new(Inner {
                catalog,
                store,
                tiles: tiles_by_slide(tiles),
                embedder,
                tile_size: config.tile_size,
                hide_query_diagnoses: config.hide_query_diagnoses,
                sync_tile_limit: config.sync_tile_limit,
                queries: Mutex::new(QueryCache { capacity: config.cache_capacity, ..Default::default() }),
            }),
        })
    }

    pub fn load(config: &ServiceConfig) -> Result<Self> {
        let catalog = load_manifest(&config.manifest)?;
        let store = EmbeddingStore::load(&config.store)?;
        let tiles = match &config.tiles {
            Some(p) => read_tiles_jsonl(p)?,
            None => Vec::new(),
        };
        Self::new(catalog, store, &tiles, config.embedder.build()?, config)
    }

    pub fn slide_count(&self) -> usize {
        self.inner.catalog.len()
    }
}
