//! Tissue detection and fixed-size tile enumeration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, SlideRecord};
use crate::color::rgb_to_hsv;
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const DEFAULT_TILE_SIZE: u32 = 256;

/// A square tile of a slide, addressed by its top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub s_min: f64,
    pub v_max: f64,
    pub downsample: u32,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            s_min: 0.05,
            v_max: 0.95,
            downsample: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileParams {
    pub size: u32,
    pub stride: u32,
    pub min_tissue: f64,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            size: DEFAULT_TILE_SIZE,
            stride: DEFAULT_TILE_SIZE,
            min_tissue: 0.25,
        }
    }
}

/// Boolean tissue grid; cell `(i, j)` summarizes the pixel block starting at
/// `(i * downsample, j * downsample)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    cols: u32,
    rows: u32,
    downsample: u32,
    image_width: u32,
    image_height: u32,
    cells: Vec<bool>,
}

impl TissueMask {
    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn downsample(&self) -> u32 {
        self.downsample
    }

    pub fn image_dims(&self) -> (u32, u32) {
        (self.image_width, self.image_height)
    }

    pub fn is_tissue(&self, col: u32, row: u32) -> bool {
        self.cells[(row * self.cols + col) as usize]
    }

    pub fn tissue_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Fraction of mask cells whose centers fall inside the given square.
    pub fn tissue_fraction(&self, x: u32, y: u32, size: u32) -> f64 {
        let ds = self.downsample as f64;
        let inside = |origin: u32, i: u32| {
            let c = (i as f64 + 0.5) * ds;
            c >= origin as f64 && c < (origin + size) as f64
        };
        let cols: Vec<u32> = (0..self.cols).filter(|&i| inside(x, i)).collect();
        let mut total = 0usize;
        let mut tissue = 0usize;
        for row in (0..self.rows).filter(|&j| inside(y, j)) {
            for &col in &cols {
                total += 1;
                tissue += self.is_tissue(col, row) as usize;
            }
        }
        if total == 0 {
            0.0
        } else {
            tissue as f64 / total as f64
        }
    }
}

/// HSV threshold heuristic: a cell is tissue when the mean color of its pixel
/// block has saturation >= `s_min` and value <= `v_max`.
pub fn compute_tissue_mask(image: &RgbImage, params: &MaskParams) -> Result<TissueMask> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("cannot compute tissue mask of a zero-area image"));
    }
    if params.downsample == 0 {
        return Err(Error::invalid("mask downsample must be >= 1"));
    }
    let ds = params.downsample;
    let cols = w.div_ceil(ds);
    let rows = h.div_ceil(ds);
    let mut cells = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let mut sum = [0u64; 3];
            let mut n = 0u64;
            for y in row * ds..((row + 1) * ds).min(h) {
                for x in col * ds..((col + 1) * ds).min(w) {
                    let p = image.get_pixel(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as u64;
                    }
                    n += 1;
                }
            }
            let mean = sum.map(|s| s as f64 / n as f64);
            let hsv = rgb_to_hsv(mean);
            cells.push(hsv[1] >= params.s_min && hsv[2] <= params.v_max);
        }
    }
    Ok(TissueMask {
        cols,
        rows,
        downsample: ds,
        image_width: w,
        image_height: h,
        cells,
    })
}

/// Row-major tiles fully inside the slide whose tissue fraction is at least
/// `min_tissue`. Partial edge tiles are dropped.
pub fn enumerate_tiles(slide: &SlideRecord, mask: &TissueMask, params: &TileParams) -> Vec<TileRef> {
    let (w, h) = mask.image_dims();
    let (size, stride) = (params.size, params.stride.max(1));
    let mut tiles = Vec::new();
    if size == 0 || w < size || h < size {
        return tiles;
    }
    for y in (0..=h - size).step_by(stride as usize) {
        for x in (0..=w - size).step_by(stride as usize) {
            if mask.tissue_fraction(x, y, size) >= params.min_tissue {
                tiles.push(TileRef {
                    slide_id: slide.slide_id.clone(),
                    x,
                    y,
                    size,
                });
            }
        }
    }
    tiles
}

/// Exact pixel crop of a tile from an already decoded slide image.
pub fn crop_tile(image: &RgbImage, tile: &TileRef) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if tile.size == 0
        || tile.x.checked_add(tile.size).is_none_or(|e| e > w)
        || tile.y.checked_add(tile.size).is_none_or(|e| e > h)
    {
        return Err(Error::invalid(format!(
            "tile ({}, {}) size {} outside {w}x{h} slide {}",
            tile.x, tile.y, tile.size, tile.slide_id
        )));
    }
    Ok(image::imageops::crop_imm(image, tile.x, tile.y, tile.size, tile.size).to_image())
}

pub fn read_tile(catalog: &Catalog, tile: &TileRef) -> Result<RgbImage> {
    let image = catalog.load_image(&tile.slide_id)?;
    crop_tile(&image, tile)
}

/// Groups tiles by slide, keeping each slide's tiles in their original order.
pub fn tiles_by_slide(tiles: &[TileRef]) -> BTreeMap<String, Vec<TileRef>> {
    let mut out: BTreeMap<String, Vec<TileRef>> = BTreeMap::new();
    for t in tiles {
        out.entry(t.slide_id.clone()).or_default().push(t.clone());
    }
    out
}

pub fn write_tiles_jsonl(tiles: &[TileRef], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for t in tiles {
        serde_json::to_writer(&mut buf, t).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_tiles_jsonl(path: impl AsRef<Path>) -> Result<Vec<TileRef>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_manifest;
    use proptest::prelude::*;

    const WHITE: [u8; 3] = [255, 255, 255];
    const PINK: [u8; 3] = [230, 140, 170];

    fn slide() -> SlideRecord {
        parse_manifest(
            r#"{"slide_id":"s","case_id":"c","lab":"L","tissue_type":"t","staining":"H&E","scanner":"x","prep":"FF","mpp":0.5,"image_path":"a.png"}"#,
            "",
        )
        .unwrap()
        .records()[0]
            .clone()
    }

    fn solid(w: u32, h: u32, rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(rgb))
    }

    #[test]
    fn white_is_background() {
        let m = compute_tissue_mask(&solid(64, 64, WHITE), &MaskParams::default()).unwrap();
        assert_eq!(m.tissue_cells(), 0);
        assert_eq!((m.cols(), m.rows()), (4, 4));
    }

    #[test]
    fn pink_is_tissue() {
        // Independent HSV: S = (max - min) / max, V = max / 255.
        let (max, min) = (230.0, 140.0);
        let (s, v) = ((max - min) / max, max / 255.0);
        assert!(s >= 0.05 && v <= 0.95);
        let m = compute_tissue_mask(&solid(40, 40, PINK), &MaskParams::default()).unwrap();
        assert_eq!(m.tissue_cells(), 9);
        assert_eq!((m.cols(), m.rows()), (3, 3));
    }

    #[test]
    fn half_and_half() {
        let mut img = solid(512, 256, WHITE);
        for y in 0..256 {
            for x in 256..512 {
                img.put_pixel(x, y, image::Rgb(PINK));
            }
        }
        let m = compute_tissue_mask(&img, &MaskParams::default()).unwrap();
        for row in 0..m.rows() {
            for col in 0..m.cols() {
                assert_eq!(m.is_tissue(col, row), col >= 16);
            }
        }
    }

    #[test]
    fn zero_area_rejected() {
        assert!(compute_tissue_mask(&RgbImage::new(0, 5), &MaskParams::default()).is_err());
    }

    #[test]
    fn exact_tiling() {
        let m = compute_tissue_mask(&solid(512, 512, PINK), &MaskParams::default()).unwrap();
        let tiles = enumerate_tiles(&slide(), &m, &TileParams::default());
        let xy: Vec<_> = tiles.iter().map(|t| (t.x, t.y)).collect();
        assert_eq!(xy, [(0, 0), (256, 0), (0, 256), (256, 256)]);
    }

    #[test]
    fn partial_tiles_dropped() {
        let m = compute_tissue_mask(&solid(300, 300, PINK), &MaskParams::default()).unwrap();
        let tiles = enumerate_tiles(&slide(), &m, &TileParams::default());
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].x, tiles[0].y), (0, 0));
    }

    #[test]
    fn background_and_tiny_images_give_nothing() {
        let m = compute_tissue_mask(&solid(512, 512, WHITE), &MaskParams::default()).unwrap();
        assert!(enumerate_tiles(&slide(), &m, &TileParams::default()).is_empty());
        let m = compute_tissue_mask(&solid(100, 100, PINK), &MaskParams::default()).unwrap();
        assert!(enumerate_tiles(&slide(), &m, &TileParams::default()).is_empty());
    }

    #[test]
    fn crop_matches_pixels_and_rejects_oob() {
        let mut img = RgbImage::new(300, 280);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x % 251) as u8, (y % 241) as u8, ((x + y) % 7) as u8]);
        }
        let t = TileRef { slide_id: "s".into(), x: 0, y: 0, size: 256 };
        let a = crop_tile(&img, &t).unwrap();
        for (x, y, p) in a.enumerate_pixels() {
            assert_eq!(p, img.get_pixel(x, y));
        }
        assert_eq!(a, crop_tile(&img, &t).unwrap());
        let oob = TileRef { x: 256, ..t };
        assert!(crop_tile(&img, &oob).is_err());
    }

    fn blotchy(w: u32, h: u32, cells: &[bool]) -> RgbImage {
        let mut img = solid(w, h, WHITE);
        let cw = w.div_ceil(16);
        for (x, y, p) in img.enumerate_pixels_mut() {
            if cells[((y / 16) * cw + x / 16) as usize % cells.len()] {
                *p = image::Rgb(PINK);
            }
        }
        img
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tiling_partitions_aligned_region(w in 1u32..900, h in 1u32..900, size in prop::sample::select(vec![64u32, 128, 256])) {
            let m = compute_tissue_mask(&solid(w, h, PINK), &MaskParams::default()).unwrap();
            let params = TileParams { size, stride: size, min_tissue: 0.0 };
            let tiles = enumerate_tiles(&slide(), &m, &params);
            prop_assert_eq!(tiles.len() as u32, (w / size) * (h / size));
            let mut covered = std::collections::HashSet::new();
            for t in &tiles {
                prop_assert!(t.x % size == 0 && t.y % size == 0);
                prop_assert!(t.x + size <= w && t.y + size <= h);
                prop_assert!(covered.insert((t.x, t.y)));
            }
        }

        #[test]
        fn raising_min_tissue_never_adds(cells in prop::collection::vec(any::<bool>(), 1..200), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let m = compute_tissue_mask(&blotchy(640, 512, &cells), &MaskParams::default()).unwrap();
            let loose = enumerate_tiles(&slide(), &m, &TileParams { size: 128, stride: 128, min_tissue: lo });
            let strict = enumerate_tiles(&slide(), &m, &TileParams { size: 128, stride: 128, min_tissue: hi });
            prop_assert!(strict.iter().all(|t| loose.contains(t)));
        }
    }
}
