//! Reference-case search over per-slide patch embeddings.

mod embedder;
mod score;
mod store;

pub use embedder::{Embedder, EmbedderSpec, FeatureEmbedder, RandomProjectionEmbedder};
pub use score::{
    cosine, query_topn, roi_vectors, similarity_map, slide_score, topk_accuracy, QueryOptions, QueryRoi,
    RankedEntry, RankedResult, RoiTile, SimilarityCell, SimilarityMap,
};
pub use store::{build_store, import_dump, EmbeddingStore, SlideEmbeddings, MAGIC as STORE_MAGIC};
