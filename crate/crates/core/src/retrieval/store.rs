//! `RVES` embedding store.
//!
//! Layout (little-endian): magic `RVES`, version `u32`, dim `u32`,
//! slide_count `u32`; then per slide: id (`u16` length + UTF-8), diagnosis
//! (`u16` length + UTF-8, empty when unknown), tile_count `u32`, tile_count
//! `(u32 x, u32 y)` pairs, and `tile_count x dim` `f32` values row-major.
//!
//! Externally computed embeddings can be imported from an `RVFV` dump whose
//! slide indices refer to manifest order (see [`import_dump`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use tracing::warn;

use crate::binio::*;
use crate::catalog::{crop_tile, Catalog, TileRef};
use crate::dump::FeatureDump;
use crate::error::{Error, Result};

use super::Embedder;

pub const MAGIC: &[u8; 4] = b"RVES";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEmbeddings {
    pub slide_id: String,
    /// Empty when unknown.
    pub diagnosis: String,
    pub coords: Vec<(u32, u32)>,
    /// Row-major `coords.len() x dim`.
    pub vectors: Vec<f32>,
}

impl SlideEmbeddings {
    pub fn tile_count(&self) -> usize {
        self.coords.len()
    }

    pub fn row(&self, i: usize, dim: usize) -> &[f32] {
        &self.vectors[i * dim..(i + 1) * dim]
    }

    pub fn row_of(&self, x: u32, y: u32, dim: usize) -> Option<&[f32]> {
        self.coords
            .iter()
            .position(|&c| c == (x, y))
            .map(|i| self.row(i, dim))
    }

    /// All rows widened to f64.
    pub fn vectors_f64(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    slides: Vec<SlideEmbeddings>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, slides: Vec<SlideEmbeddings>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(slides.len());
        for (i, s) in slides.iter().enumerate() {
            if s.vectors.len() != s.coords.len() * dim {
                return Err(Error::invalid(format!(
                    "slide {}: {} values for {} tiles of dim {dim}",
                    s.slide_id,
                    s.vectors.len(),
                    s.coords.len()
                )));
            }
            if by_id.insert(s.slide_id.clone(), i).is_some() {
                return Err(Error::DuplicateSlide(s.slide_id.clone()));
            }
        }
        Ok(Self { dim, slides, by_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slides(&self) -> &[SlideEmbeddings] {
        &self.slides
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn get(&self, slide_id: &str) -> Option<&SlideEmbeddings> {
        self.by_id.get(slide_id).map(|&i| &self.slides[i])
    }

    pub fn contains(&self, slide_id: &str) -> bool {
        self.by_id.contains_key(slide_id)
    }

    pub fn total_tiles(&self) -> usize {
        self.slides.iter().map(|s| s.coords.len()).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC).map_err(fmt_io)?;
        write_u32(w, VERSION).map_err(fmt_io)?;
        write_u32(w, self.dim as u32).map_err(fmt_io)?;
        write_u32(w, self.slides.len() as u32).map_err(fmt_io)?;
        for s in &self.slides {
            write_str16(w, &s.slide_id)?;
            write_str16(w, &s.diagnosis)?;
            write_u32(w, s.coords.len() as u32).map_err(fmt_io)?;
            for &(x, y) in &s.coords {
                write_u32(w, x).map_err(fmt_io)?;
                write_u32(w, y).map_err(fmt_io)?;
            }
            for &v in &s.vectors {
                write_f32(w, v).map_err(fmt_io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        expect_version(r, VERSION)?;
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut slides = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let slide_id = read_str16(r)?;
            let diagnosis = read_str16(r)?;
            let tiles = read_u32(r)? as usize;
            let mut coords = Vec::with_capacity(tiles.min(1 << 20));
            for _ in 0..tiles {
                coords.push((read_u32(r)?, read_u32(r)?));
            }
            let mut vectors = Vec::with_capacity((tiles * dim).min(1 << 24));
            for _ in 0..tiles * dim {
                vectors.push(read_f32(r)?);
            }
            slides.push(SlideEmbeddings { slide_id, diagnosis, coords, vectors });
        }
        expect_eof(r)?;
        Self::new(dim, slides)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("store serializes into memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut Cursor::new(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Embeds every tile of every catalog slide (in catalog order), except the
/// slides in `exclude`. Slides without tiles are skipped with a warning.
pub fn build_store(
    catalog: &Catalog,
    tiles_by_slide: &BTreeMap<String, Vec<TileRef>>,
    embedder: &dyn Embedder,
    exclude: &HashSet<String>,
) -> Result<EmbeddingStore> {
    let dim = embedder.dim();
    if dim == 0 {
        return Err(Error::invalid("embedder dim must be > 0"));
    }
    let mut slides = Vec::new();
    for record in catalog.records() {
        if exclude.contains(&record.slide_id) {
            continue;
        }
        let tiles = match tiles_by_slide.get(&record.slide_id) {
            Some(t) if !t.is_empty() => t,
            _ => {
                warn!(slide = %record.slide_id, "no tiles; slide left out of the store");
                continue;
            }
        };
        let image = catalog.load_image(&record.slide_id)?;
        let rows: Vec<Vec<f32>> = tiles
            .par_iter()
            .map(|t| crop_tile(&image, t).map(|px| embedder.embed(&px)))
            .collect::<Result<_>>()?;
        slides.push(SlideEmbeddings {
            slide_id: record.slide_id.clone(),
            diagnosis: record.diagnosis.clone().unwrap_or_default(),
            coords: tiles.iter().map(|t| (t.x, t.y)).collect(),
            vectors: rows.into_iter().flatten().collect(),
        });
    }
    EmbeddingStore::new(dim, slides)
}

/// Builds a store from precomputed vectors; row slide indices refer to the
/// catalog's manifest order.
pub fn import_dump(catalog: &Catalog, dump: &FeatureDump) -> Result<EmbeddingStore> {
    let mut per_slide: BTreeMap<u32, SlideEmbeddings> = BTreeMap::new();
    for (key, row) in dump.keys().iter().zip(dump.rows()) {
        let record = catalog.records().get(key.slide_index as usize).ok_or_else(|| {
            Error::invalid(format!("dump row refers to slide index {} beyond the manifest", key.slide_index))
        })?;
        let entry = per_slide.entry(key.slide_index).or_insert_with(|| SlideEmbeddings {
            slide_id: record.slide_id.clone(),
            diagnosis: record.diagnosis.clone().unwrap_or_default(),
            coords: Vec::new(),
            vectors: Vec::new(),
        });
        entry.coords.push((key.x, key.y));
        entry.vectors.extend_from_slice(row);
    }
    EmbeddingStore::new(dump.dim(), per_slide.into_values().collect())
}
