//! JSON bodies exchanged between the HTTP service and its clients.

use serde::{Deserialize, Serialize};

use crate::catalog::{Prep, StainCategory};
use crate::retrieval::{QueryRoi, RankedResult, RoiTile};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_TOP_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub slides: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub slide_id: String,
    pub case_id: String,
    pub lab: String,
    pub tissue_type: String,
    pub staining: String,
    pub staining_category: StainCategory,
    /// Withheld for query slides when the service hides them.
    pub diagnosis: Option<String>,
    /// Whether the slide is a retrieval candidate (part of the store).
    pub in_store: bool,
    pub tile_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideList {
    pub slides: Vec<SlideSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    #[serde(flatten)]
    pub summary: SlideSummary,
    pub scanner: String,
    pub prep: Prep,
    pub mpp: f64,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub tiles: Vec<RoiTile>,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_top_n() -> usize {
    DEFAULT_TOP_N
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryRequest {
    pub slide_id: String,
    pub roi: Vec<RoiTile>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

impl QueryRequest {
    pub fn new(roi: QueryRoi) -> Self {
        Self { slide_id: roi.slide_id, roi: roi.roi, k: DEFAULT_K, top_n: DEFAULT_TOP_N }
    }

    pub fn query_roi(&self) -> QueryRoi {
        QueryRoi { slide_id: self.slide_id.clone(), roi: self.roi.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryState {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAccepted {
    pub query_id: String,
    pub status: QueryState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStatus {
    pub query_id: String,
    pub status: QueryState,
    pub request: QueryRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<RankedResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Similarities on the slide's tile grid; `grid[row][col]` is `None` where
/// the slide has no stored tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub query_id: String,
    pub slide_id: String,
    pub tile_size: u32,
    pub cols: u32,
    pub rows: u32,
    pub grid: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
