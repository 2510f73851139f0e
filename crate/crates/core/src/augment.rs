//! Stain-transfer and dihedral augmentation of training tiles.
//!
//! Solarization is deliberately not provided.

use image::imageops;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{crop_tile, Catalog, TileRef};
use crate::color::{lalphabeta_to_rgb, rgb_to_lalphabeta};
use crate::error::{Error, Result};
use crate::features::{StainStats, StainStatsTable};
use crate::image::{Image3, RgbImage};

/// Floor on the source standard deviation.
pub const STD_EPS: f64 = 1e-6;

/// Per-channel affine transfer in l-alpha-beta space, before conversion back
/// to RGB.
pub fn reinhard_transfer_space(lab: &Image3, src: &StainStats, tgt: &StainStats) -> Image3 {
    let gain = [0, 1, 2].map(|c| tgt.std[c] / src.std[c].max(STD_EPS));
    lab.map(|p| [0, 1, 2].map(|c| (p[c] - src.mean[c]) * gain[c] + tgt.mean[c]))
}

/// Moves the image's color statistics from `src` to `tgt`.
pub fn reinhard_transfer(image: &RgbImage, src: &StainStats, tgt: &StainStats) -> RgbImage {
    let lab = Image3::from_rgb(image, rgb_to_lalphabeta);
    reinhard_transfer_space(&lab, src, tgt)
        .map(lalphabeta_to_rgb)
        .to_rgb8()
}

/// One of the eight symmetries of the square: `code = flip * 4 + quarter_turns`.
/// Rotation is clockwise and is applied before the optional horizontal flip.
pub fn dihedral_augment(image: &RgbImage, code: u8) -> Result<RgbImage> {
    if image.width() != image.height() {
        return Err(Error::invalid(format!(
            "dihedral augmentation needs a square image, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    if code >= 8 {
        return Err(Error::invalid(format!("dihedral code {code} outside [0, 8)")));
    }
    let rotated = match code % 4 {
        0 => image.clone(),
        1 => imageops::rotate90(image),
        2 => imageops::rotate180(image),
        _ => imageops::rotate270(image),
    };
    Ok(if code >= 4 {
        imageops::flip_horizontal(&rotated)
    } else {
        rotated
    })
}

/// Code of `a ∘ b`, i.e. applying `b` first and then `a`.
pub fn dihedral_compose(a: u8, b: u8) -> u8 {
    let (fa, ra) = (a / 4, a % 4);
    let (fb, rb) = (b / 4, b % 4);
    // Element (r, f) acts as F^f R^r; R F = F R^-1.
    if fb == 0 {
        fa * 4 + (ra + rb) % 4
    } else {
        ((fa + 1) % 2) * 4 + (rb + 4 - ra) % 4
    }
}

/// Which transforms were applied to produce an augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub image: RgbImage,
    pub target_slide: String,
    pub dihedral_code: u8,
}

/// Stain transfer toward a random other slide, then a random dihedral
/// transform. A slide with no other candidates transfers onto itself.
pub fn augment_tile_image(
    tile: &RgbImage,
    own_slide: &str,
    stats: &StainStatsTable,
    seed: u64,
) -> Result<AugmentedView> {
    let src = stats
        .get(own_slide)
        .ok_or_else(|| Error::invalid(format!("no stain statistics for slide {own_slide}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<&StainStats> = stats.0.values().filter(|s| s.slide_id != own_slide).collect();
    let tgt = if others.is_empty() {
        src
    } else {
        others[rng.random_range(0..others.len())]
    };
    let code = rng.random_range(0..8u8);
    let transferred = reinhard_transfer(tile, src, tgt);
    Ok(AugmentedView {
        image: dihedral_augment(&transferred, code)?,
        target_slide: tgt.slide_id.clone(),
        dihedral_code: code,
    })
}

/// Reads a tile and augments it.
pub fn augment_view(
    tile: &TileRef,
    catalog: &Catalog,
    stats: &StainStatsTable,
    seed: u64,
) -> Result<AugmentedView> {
    let slide = catalog.load_image(&tile.slide_id)?;
    let pixels = crop_tile(&slide, tile)?;
    augment_tile_image(&pixels, &tile.slide_id, stats, seed)
}
