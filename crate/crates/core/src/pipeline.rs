//! Batch steps over a whole catalog. Work is parallel over slides; outputs
//! follow catalog order.

use rayon::prelude::*;

use crate::catalog::{compute_tissue_mask, crop_tile, enumerate_tiles, tiles_by_slide, Catalog, MaskParams, TileParams, TileRef};
use crate::dump::{FeatureDump, RowKey};
use crate::error::Result;
use crate::features::{features_36_with, FEATURE_DIM};
use crate::stain::StainMatrix;

/// Tissue tiles of every slide.
pub fn ingest_tiles(catalog: &Catalog, mask: &MaskParams, tiles: &TileParams) -> Result<Vec<TileRef>> {
    let per_slide: Vec<Vec<TileRef>> = catalog
        .records()
        .par_iter()
        .map(|r| {
            let image = catalog.load_image(&r.slide_id)?;
            let m = compute_tissue_mask(&image, mask)?;
            Ok(enumerate_tiles(r, &m, tiles))
        })
        .collect::<Result<_>>()?;
    Ok(per_slide.into_iter().flatten().collect())
}

/// 36-d color features for `tiles`, one dump row per tile, ordered by
/// catalog slide order and then by the order tiles were given.
pub fn tile_features(catalog: &Catalog, tiles: &[TileRef], stains: &StainMatrix) -> Result<FeatureDump> {
    let grouped = tiles_by_slide(tiles);
    let mut work: Vec<(u32, &Vec<TileRef>)> = Vec::with_capacity(grouped.len());
    for (slide, ts) in &grouped {
        let idx = catalog
            .index_of(slide)
            .ok_or_else(|| crate::Error::UnknownSlide(slide.clone()))?;
        work.push((idx as u32, ts));
    }
    work.sort_by_key(|(i, _)| *i);
    let rows: Vec<Vec<(RowKey, Vec<f32>)>> = work
        .par_iter()
        .map(|&(idx, ts)| {
            let image = catalog.load_image(&ts[0].slide_id)?;
            ts.iter()
                .map(|t| {
                    let px = crop_tile(&image, t)?;
                    Ok((RowKey { slide_index: idx, x: t.x, y: t.y }, features_36_with(&px, stains).to_f32()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut dump = FeatureDump::new(FEATURE_DIM);
    for (key, row) in rows.into_iter().flatten() {
        dump.push(key, &row)?;
    }
    Ok(dump)
}
