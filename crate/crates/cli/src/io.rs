use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use slidecurate_core::dump::FeatureDump;
use slidecurate_core::retrieval::EmbeddingStore;

/// A file, or stdout when `path` is `None` or `-`.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => {
            let f = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(std::io::stdout().lock()))),
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: Option<&Path>, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = output(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

pub fn create_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// Row-major vectors from either a feature dump or an embedding store.
/// Store rows follow store slide order, then tile order.
pub fn read_vectors(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    match bytes.get(..4) {
        Some(m) if m == slidecurate_core::dump::MAGIC => {
            let dump = FeatureDump::from_bytes(&bytes).with_context(|| path.display().to_string())?;
            let data = dump.rows().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
            Ok((data, dump.dim()))
        }
        Some(m) if m == slidecurate_core::retrieval::STORE_MAGIC => {
            let store = EmbeddingStore::from_bytes(&bytes).with_context(|| path.display().to_string())?;
            let data = store.slides().iter().flat_map(|s| s.vectors_f64()).collect();
            Ok((data, store.dim()))
        }
        _ => bail!("{}: neither a feature dump nor an embedding store", path.display()),
    }
}
