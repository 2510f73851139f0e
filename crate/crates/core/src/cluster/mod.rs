//! Tissue stratification: k-means over patch features, nearest-neighbor
//! label propagation and the expert merge map.

mod kmeans;
mod knn;
mod merge;

pub use kmeans::{kmeans_fit, subsample_groups, subsample_patches, ClusterModel, KMeansParams};
pub use knn::propagate_labels;
pub use merge::{apply_merge_map, MergeMap, MetaCluster};
