//! Slide inventory: manifest parsing, group assignment, tissue detection and tiling.

mod groups;
mod tiles;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub use groups::{assign_groups, GroupRule, GroupRules};
pub use tiles::{
    compute_tissue_mask, crop_tile, enumerate_tiles, read_tile, read_tiles_jsonl, tiles_by_slide,
    write_tiles_jsonl, MaskParams, TileParams, TileRef, TissueMask, DEFAULT_TILE_SIZE,
};

/// Coarse staining class used by grouping rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StainCategory {
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "IHC")]
    Ihc,
    #[serde(rename = "OTHER")]
    Other,
}

impl StainCategory {
    /// Best guess from a free-text staining label.
    pub fn infer(label: &str) -> Self {
        let norm: String = label
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        if norm == "HE" || norm == "HANDE" {
            StainCategory::He
        } else if norm.starts_with("IHC") || label.to_ascii_uppercase().contains("IHC") {
            StainCategory::Ihc
        } else {
            StainCategory::Other
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prep {
    #[serde(rename = "FFPE")]
    Ffpe,
    #[serde(rename = "FF")]
    Ff,
}

fn unassigned() -> i32 {
    -1
}

/// One slide of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub case_id: String,
    pub lab: String,
    pub tissue_type: String,
    pub staining: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staining_category: Option<StainCategory>,
    pub scanner: String,
    pub prep: Prep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    pub mpp: f64,
    pub image_path: PathBuf,
    #[serde(default = "unassigned")]
    pub group_id: i32,
    /// Fields this build does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SlideRecord {
    pub fn stain_category(&self) -> StainCategory {
        self.staining_category
            .unwrap_or_else(|| StainCategory::infer(&self.staining))
    }
}

const REQUIRED_FIELDS: &[&str] = &[
    "slide_id",
    "case_id",
    "lab",
    "tissue_type",
    "staining",
    "scanner",
    "prep",
    "mpp",
    "image_path",
];

/// Immutable, ordered collection of slides.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    records: Vec<SlideRecord>,
    by_id: HashMap<String, usize>,
    base_dir: PathBuf,
}

impl Catalog {
    pub fn new(records: Vec<SlideRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !(r.mpp > 0.0) {
                return Err(Error::invalid(format!("slide {}: mpp must be > 0", r.slide_id)));
            }
            if by_id.insert(r.slide_id.clone(), i).is_some() {
                return Err(Error::DuplicateSlide(r.slide_id.clone()));
            }
        }
        Ok(Self {
            records,
            by_id,
            base_dir: base_dir.into(),
        })
    }

    pub fn records(&self) -> &[SlideRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, slide_id: &str) -> Option<usize> {
        self.by_id.get(slide_id).copied()
    }

    pub fn get(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.index_of(slide_id).map(|i| &self.records[i])
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Number of distinct assigned groups (max group id + 1).
    pub fn group_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.group_id >= 0)
            .map(|r| r.group_id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn image_path(&self, record: &SlideRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.base_dir.join(&record.image_path)
        }
    }

    /// Decodes the full slide image.
    pub fn load_image(&self, slide_id: &str) -> Result<RgbImage> {
        let record = self
            .get(slide_id)
            .ok_or_else(|| Error::UnknownSlide(slide_id.to_owned()))?;
        let path = self.image_path(record);
        let wrap = |source: Error| Error::SlideIo {
            slide_id: slide_id.to_owned(),
            source: Box::new(source),
        };
        let bytes = fs::read(&path).map_err(|e| wrap(Error::io(&path, e)))?;
        let image = image::load_from_memory(&bytes).map_err(|e| wrap(e.into()))?;
        Ok(image.to_rgb8())
    }

    pub(crate) fn with_records(&self, records: Vec<SlideRecord>) -> Self {
        Self {
            records,
            by_id: self.by_id.clone(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Parses a JSON Lines manifest. Relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<Catalog> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: line_no,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| Error::Manifest {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        if let Some(missing) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("missing field {missing}"),
            });
        }
        let record: SlideRecord = serde_json::from_value(value).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if !(record.mpp > 0.0) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("mpp must be > 0, got {}", record.mpp),
            });
        }
        if seen.insert(record.slide_id.clone(), line_no).is_some() {
            return Err(Error::DuplicateSlide(record.slide_id));
        }
        records.push(record);
    }
    Catalog::new(records, base_dir)
}

pub fn write_manifest(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in catalog.records() {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
