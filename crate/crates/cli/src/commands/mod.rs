mod analyze;
mod curate;
mod prepare;
mod search;

use anyhow::Result;
use clap::Subcommand;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural corpus with known diagnoses.
    Synth(prepare::SynthArgs),
    /// Detect tissue and list tiles of every slide.
    Ingest(prepare::IngestArgs),
    /// Compute 36-d color features for every tile.
    Features(prepare::FeaturesArgs),
    /// Per-slide stain statistics used for augmentation.
    Stats(prepare::StatsArgs),
    /// Fit k-means on tile features and label every row.
    Cluster(curate::ClusterArgs),
    /// Copy cluster labels to unlabeled rows by nearest neighbors.
    Propagate(curate::PropagateArgs),
    /// Map raw cluster labels to meta-clusters.
    Merge(curate::MergeArgs),
    /// Bucket tiles by slide group and meta-cluster.
    Index(curate::IndexArgs),
    /// Draw a weighted, balanced tile stream.
    Sample(curate::SampleArgs),
    /// Write stain-transferred, flipped and rotated tile views.
    Augment(curate::AugmentArgs),
    /// Embed tiles into a searchable store.
    Embed(search::EmbedArgs),
    /// Rank store slides against a query region.
    Query(search::QueryArgs),
    /// Top-k diagnosis accuracy over a query set.
    EvalRetrieval(search::EvalArgs),
    /// Principal-component heatmaps of one slide's embeddings.
    ConceptMap(analyze::ConceptMapArgs),
    /// Train and evaluate a linear probe on frozen embeddings.
    Probe(analyze::ProbeArgs),
    /// Run the HTTP service.
    Serve(search::ServeArgs),
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => prepare::synth(a),
        Command::Ingest(a) => prepare::ingest(a),
        Command::Features(a) => prepare::features(a),
        Command::Stats(a) => prepare::stats(a),
        Command::Cluster(a) => curate::cluster(a),
        Command::Propagate(a) => curate::propagate(a),
        Command::Merge(a) => curate::merge(a),
        Command::Index(a) => curate::index(a),
        Command::Sample(a) => curate::sample(a),
        Command::Augment(a) => curate::augment(a),
        Command::Embed(a) => search::embed(a),
        Command::Query(a) => search::query(a),
        Command::EvalRetrieval(a) => search::eval_retrieval(a),
        Command::ConceptMap(a) => analyze::concept_map(a),
        Command::Probe(a) => analyze::probe(a),
        Command::Serve(a) => search::serve(a),
    }
}
