use std::collections::{BTreeSet, HashSet};

use slidecurate_core::catalog::{assign_groups, tiles_by_slide, GroupRules, MaskParams, TileParams};
use slidecurate_core::cluster::{apply_merge_map, kmeans_fit, KMeansParams, MergeMap};
use slidecurate_core::pipeline::{ingest_tiles, tile_features};
use slidecurate_core::retrieval::{build_store, query_topn, roi_vectors, topk_accuracy, FeatureEmbedder, QueryOptions};
use slidecurate_core::sampler::{build_index, draw, WeightTable};
use slidecurate_core::stain::StainMatrix;
use slidecurate_core::synth::{generate, SynthParams};

#[test]
fn synthetic_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&SynthParams::default(), dir.path()).unwrap();
    let rules = GroupRules::load(&corpus.groups).unwrap();
    let catalog = assign_groups(&corpus.catalog, &rules);

    let tiles = ingest_tiles(&catalog, &MaskParams::default(), &TileParams::default()).unwrap();
    assert!(tiles.len() >= 40 * 4, "{} tiles", tiles.len());
    let dump = tile_features(&catalog, &tiles, &StainMatrix::hed()).unwrap();
    assert_eq!(dump.len(), tiles.len());

    let data: Vec<f64> = dump.to_f64_rows().concat();
    let model = kmeans_fit(&data, 36, &KMeansParams { k: 10, seed: 1, ..Default::default() }).unwrap();
    let raw: Vec<u32> = model.predict(&data).into_iter().map(|c| c as u32).collect();
    let merge = MergeMap::load(&corpus.merge).unwrap();
    let metas = apply_merge_map(&raw, &merge).unwrap();
    let index = build_index(&catalog, &tiles, &metas).unwrap();
    let weights = WeightTable::load(&corpus.weights).unwrap();
    assert_eq!(draw(&index, &weights, 500, 3).unwrap().len(), 500);

    let held_out: HashSet<String> = corpus.query_rois.iter().map(|q| q.slide_id.clone()).collect();
    let embedder = FeatureEmbedder::default();
    let by_slide = tiles_by_slide(&tiles);
    let store = build_store(&catalog, &by_slide, &embedder, &held_out).unwrap();
    assert_eq!(store.len(), 40 - held_out.len());
    let opts = QueryOptions::default();
    let mut results = Vec::new();
    let mut truths = Vec::new();
    for q in &corpus.query_rois {
        let v = roi_vectors(&store, q, Some((&catalog, &by_slide, &embedder))).unwrap();
        results.push(query_topn(&store, &q.slide_id, &v, &opts).unwrap());
        truths.push(catalog.get(&q.slide_id).unwrap().diagnosis.clone().unwrap());
    }
    let known: BTreeSet<String> = catalog.records().iter().filter_map(|r| r.diagnosis.clone()).collect();
    let acc = topk_accuracy(&results, &truths, &[1, 10], &known).unwrap();
    assert!(acc[0].1 >= 0.9, "{acc:?}");
}
