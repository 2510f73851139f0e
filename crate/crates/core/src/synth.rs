//! Procedural slide corpus with known ground truth.
//!
//! Every diagnosis gets its own hematoxylin/eosin balance and nucleus
//! texture; labs add a mild stain shift on top. A fixed share of slides is
//! IHC (DAB-stained nuclei on a light counterstain). Images are rendered
//! through the stain model, so deconvolution sees realistic optical
//! densities. Outputs:
//!
//! - `slides/<id>.png` and `manifest.jsonl`
//! - `groups.toml` (one group per lab and stain category)
//! - `merge.toml` (round-robin merge of `cluster_k` clusters) and
//!   `weights.toml` (uniform)
//! - `queries.jsonl` plus `queries/<id>.json`: held-out H&E slides with a
//!   central ROI

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::catalog::{
    write_manifest, Catalog, GroupRule, GroupRules, Prep, SlideRecord, StainCategory,
};
use crate::cluster::MergeMap;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::retrieval::{QueryRoi, RoiTile};
use crate::sampler::WeightTable;
use crate::stain::{StainMatrix, DEFAULT_EPS, DEFAULT_I0};

const DIAGNOSES: &[&str] = &[
    "adenocarcinoma",
    "lymphoma",
    "melanoma",
    "sarcoma",
    "inflammation",
    "normal",
    "squamous_carcinoma",
    "neuroendocrine_tumor",
];
const TISSUES: &[&str] = &["colon", "lung", "skin", "breast"];
const SCANNERS: &[&str] = &["S360", "GT450"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub slides: usize,
    pub diagnoses: usize,
    pub labs: usize,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    /// Every n-th slide is IHC; 0 disables IHC.
    pub ihc_every: usize,
    pub queries_per_diagnosis: usize,
    pub cluster_k: u32,
    pub metas: u32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            slides: 40,
            diagnoses: 5,
            labs: 4,
            width: 1024,
            height: 1024,
            tile_size: 256,
            ihc_every: 8,
            queries_per_diagnosis: 2,
            cluster_k: 10,
            metas: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub groups: PathBuf,
    pub merge: PathBuf,
    pub weights: PathBuf,
    pub queries: PathBuf,
    pub catalog: Catalog,
    pub query_rois: Vec<QueryRoi>,
}

pub fn diagnosis_name(d: usize) -> String {
    DIAGNOSES.get(d).map_or_else(|| format!("diagnosis_{d}"), |s| s.to_string())
}

#[derive(Debug, Clone, Copy)]
struct Signature {
    h: f64,
    e: f64,
    nucleus_density: f64,
    nucleus_radius: f64,
}

fn signature(d: usize, n: usize) -> Signature {
    let angle = TAU * d as f64 / n as f64;
    let nucleus_radius = 3.0 + (d % 3) as f64 * 2.0;
    // Equal nucleus coverage keeps mean color tied to the base stain mix.
    Signature {
        h: 0.65 + 0.45 * angle.cos(),
        e: 0.6 + 0.4 * angle.sin(),
        nucleus_density: 0.08 / (std::f64::consts::PI * nucleus_radius * nucleus_radius),
        nucleus_radius,
    }
}

fn lab_shift(lab: usize, labs: usize) -> (f64, f64) {
    let t = if labs > 1 { lab as f64 / (labs - 1) as f64 - 0.5 } else { 0.0 };
    (1.0 + 0.04 * t, 1.0 - 0.03 * t)
}

struct SlidePlan {
    record: SlideRecord,
    diagnosis: usize,
    lab: usize,
    ihc: bool,
}

fn plan(params: &SynthParams) -> Vec<SlidePlan> {
    (0..params.slides)
        .map(|i| {
            let diagnosis = i % params.diagnoses;
            let lab = (i / params.diagnoses) % params.labs;
            let ihc = params.ihc_every > 0 && i % params.ihc_every == params.ihc_every - 1;
            let slide_id = format!("S{i:04}");
            let record = SlideRecord {
                slide_id: slide_id.clone(),
                case_id: format!("C{:04}", i / 2),
                lab: format!("L{lab}"),
                tissue_type: TISSUES[(i / 3) % TISSUES.len()].to_string(),
                staining: if ihc { "Ki-67".into() } else { "H&E".into() },
                staining_category: Some(if ihc { StainCategory::Ihc } else { StainCategory::He }),
                scanner: SCANNERS[lab % SCANNERS.len()].to_string(),
                prep: if i % 5 == 4 { Prep::Ff } else { Prep::Ffpe },
                diagnosis: Some(diagnosis_name(diagnosis)),
                mpp: 0.5,
                image_path: PathBuf::from(format!("slides/{slide_id}.png")),
                group_id: -1,
                extra: Default::default(),
            };
            SlidePlan { record, diagnosis, lab, ihc }
        })
        .collect()
}

fn render(p: &SlidePlan, params: &SynthParams, stains: &StainMatrix, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (params.width as usize, params.height as usize);
    let sig = signature(p.diagnosis, params.diagnoses);
    let (hs, es) = lab_shift(p.lab, params.labs);
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-0.015..0.015);
    let (base_h, base_e, nucleus_stain) = if p.ihc {
        (0.25 * hs * jitter(rng), 0.08 * es, 2)
    } else {
        (sig.h * hs * jitter(rng), sig.e * es * jitter(rng), 0)
    };

    let mut nuclei = vec![0.0f64; w * h];
    let count = (sig.nucleus_density * (w * h) as f64) as usize;
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = sig.nucleus_radius * rng.random_range(0.8..1.2);
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r);
                if d2 < 1.0 {
                    nuclei[y * w + x] += 0.8 * (1.0 - d2);
                }
            }
        }
    }

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.005..0.03),
                rng.random_range(0.005..0.03),
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let wobble = rng.random_range(0.0..TAU);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ax, ay) = (0.47 * w as f64, 0.47 * h as f64);

    let mut img = RgbImage::new(params.width, params.height);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - cx) / ax, (y as f64 - cy) / ay);
            let radius = 1.0 + 0.05 * (3.0 * dy.atan2(dx) + wobble).sin();
            let px = if dx * dx + dy * dy > radius * radius {
                let v = 244.0 + rng.random_range(-2.0..2.0);
                [v, v, v - 1.0]
            } else {
                let low: f64 = waves
                    .iter()
                    .map(|&(fx, fy, px, py)| (x as f64 * fx + px).sin() * (y as f64 * fy + py).sin())
                    .sum::<f64>()
                    * 0.03;
                let mut conc = [
                    base_h + low + noise.sample(rng),
                    base_e - low + noise.sample(rng),
                    0.0,
                ];
                conc[nucleus_stain] += nuclei[y * w + x];
                for c in conc.iter_mut() {
                    *c = c.max(0.0);
                }
                stains.synthesize_pixel(conc, DEFAULT_I0, DEFAULT_EPS)
            };
            img.put_pixel(x as u32, y as u32, Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    img
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn group_rules(labs: usize) -> GroupRules {
    let rules = (0..labs)
        .flat_map(|lab| {
            [StainCategory::He, StainCategory::Ihc].into_iter().enumerate().map(move |(j, cat)| GroupRule {
                group: (lab * 2 + j) as u32,
                lab: Some(format!("L{lab}")),
                tissue_type: None,
                staining_category: Some(cat),
                diagnosis: None,
            })
        })
        .collect();
    GroupRules { default_group: 0, rules }
}

/// Tiles lying entirely inside the tissue ellipse (with margin for the
/// boundary wobble); the tile holding the image center when none does.
fn central_roi(params: &SynthParams) -> Vec<RoiTile> {
    let ts = params.tile_size;
    let (w, h) = (params.width as f64, params.height as f64);
    let inside = |x: f64, y: f64| {
        let (dx, dy) = ((x - w / 2.0) / (0.47 * w), (y - h / 2.0) / (0.47 * h));
        dx * dx + dy * dy < 0.9 * 0.9
    };
    let mut roi = Vec::new();
    for y in (0..=params.height - ts).step_by(ts as usize) {
        for x in (0..=params.width - ts).step_by(ts as usize) {
            let (x0, y0, x1, y1) = (x as f64, y as f64, (x + ts) as f64, (y + ts) as f64);
            if inside(x0, y0) && inside(x1, y0) && inside(x0, y1) && inside(x1, y1) {
                roi.push(RoiTile { x, y });
            }
        }
    }
    if roi.is_empty() {
        roi.push(RoiTile { x: (params.width / 2 / ts) * ts, y: (params.height / 2 / ts) * ts });
    }
    roi
}

pub fn generate(params: &SynthParams, out: impl AsRef<Path>) -> Result<SynthCorpus> {
    if params.slides == 0 || params.diagnoses == 0 || params.labs == 0 {
        return Err(Error::invalid("slides, diagnoses and labs must be > 0"));
    }
    if params.tile_size == 0 || params.width < params.tile_size || params.height < params.tile_size {
        return Err(Error::invalid("slide must hold at least one tile"));
    }
    let dir = out.as_ref().to_path_buf();
    fs::create_dir_all(dir.join("slides")).map_err(|e| Error::io(&dir, e))?;
    fs::create_dir_all(dir.join("queries")).map_err(|e| Error::io(&dir, e))?;
    let stains = StainMatrix::hed();
    let plans = plan(params);

    plans.par_iter().enumerate().try_for_each(|(i, p)| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(i as u64 + 1);
        let img = render(p, params, &stains, &mut rng);
        let path = dir.join(&p.record.image_path);
        img.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))
    })?;

    let catalog = Catalog::new(plans.iter().map(|p| p.record.clone()).collect(), &dir)?;
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&catalog, &manifest)?;

    let groups = dir.join("groups.toml");
    let rules = group_rules(params.labs);
    write_text(&groups, &rules.to_toml())?;
    let merge = dir.join("merge.toml");
    write_text(&merge, &MergeMap::round_robin(params.cluster_k, params.metas, 0)?.to_toml())?;
    let weights = dir.join("weights.toml");
    write_text(&weights, &WeightTable::uniform(rules.group_count(), params.metas as usize).to_toml())?;

    let roi = central_roi(params);
    let mut query_rois = Vec::new();
    for d in 0..params.diagnoses {
        let picks = plans
            .iter()
            .filter(|p| p.diagnosis == d && !p.ihc)
            .take(params.queries_per_diagnosis);
        for p in picks {
            query_rois.push(QueryRoi { slide_id: p.record.slide_id.clone(), roi: roi.clone() });
        }
    }
    let mut jsonl = String::new();
    for q in &query_rois {
        let line = serde_json::to_string(q).map_err(|e| Error::Format(e.to_string()))?;
        jsonl.push_str(&line);
        jsonl.push('\n');
        let pretty = serde_json::to_string_pretty(q).map_err(|e| Error::Format(e.to_string()))?;
        write_text(&dir.join("queries").join(format!("{}.json", q.slide_id)), &pretty)?;
    }
    let queries = dir.join("queries.jsonl");
    write_text(&queries, &jsonl)?;

    Ok(SynthCorpus { dir, manifest, groups, merge, weights, queries, catalog, query_rois })
}

/// Reads a `queries.jsonl` file.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRoi>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest { line: i + 1, message: e.to_string() })
        })
        .collect()
}
