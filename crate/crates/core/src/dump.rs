//! `RVFV` feature/embedding dump and the companion label CSV.
//!
//! Layout (little-endian): magic `RVFV`, version `u32`, dim `u32`, count
//! `u64`, then `count` rows of `u32` slide index, `u32` x, `u32` y and `dim`
//! `f32` values.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use crate::binio::*;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVFV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub slide_index: u32,
    pub x: u32,
    pub y: u32,
}

/// Dense row-major matrix of f32 vectors, each keyed by slide and tile origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    dim: usize,
    keys: Vec<RowKey>,
    values: Vec<f32>,
}

impl FeatureDump {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, key: RowKey, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::invalid(format!(
                "row of length {} pushed into dump of dim {}",
                row.len(),
                self.dim
            )));
        }
        self.keys.push(key);
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.len()).map(|i| self.row(i))
    }

    /// Rows widened to f64, one `Vec` per row.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dim exceeds u32".into()))?;
        w.write_all(MAGIC).map_err(fmt_io)?;
        write_u32(w, VERSION).map_err(fmt_io)?;
        write_u32(w, dim).map_err(fmt_io)?;
        write_u64(w, self.keys.len() as u64).map_err(fmt_io)?;
        for (key, row) in self.keys.iter().zip(self.rows()) {
            write_u32(w, key.slide_index).map_err(fmt_io)?;
            write_u32(w, key.x).map_err(fmt_io)?;
            write_u32(w, key.y).map_err(fmt_io)?;
            for &v in row {
                write_f32(w, v).map_err(fmt_io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        expect_version(r, VERSION)?;
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        let mut out = Self::new(dim);
        out.keys.reserve(count.min(1 << 24));
        let mut row = vec![0f32; dim];
        for _ in 0..count {
            let key = RowKey {
                slide_index: read_u32(r)?,
                x: read_u32(r)?,
                y: read_u32(r)?,
            };
            for v in row.iter_mut() {
                *v = read_f32(r)?;
            }
            out.push(key, &row)?;
        }
        expect_eof(r)?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut Cursor::new(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Reads a `row,label` CSV (header optional) into a dense label vector.
/// Every row index in `[0, n)` must appear exactly once.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels_csv(&text)
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<usize>> {
    parse_optional_labels_csv(text)?
        .into_iter()
        .enumerate()
        .map(|(row, l)| l.ok_or_else(|| Error::Format(format!("row {row} has no label"))))
        .collect()
}

/// Like [`parse_labels_csv`], but an empty label cell reads as `None`.
pub fn parse_optional_labels_csv(text: &str) -> Result<Vec<Option<usize>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut pairs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!("expected 2 columns, found {}", rec.len()),
            });
        }
        let label = if rec[1].is_empty() { Ok(None) } else { rec[1].parse::<usize>().map(Some) };
        match (rec[0].parse::<usize>(), label) {
            (Ok(row), Ok(label)) => pairs.push((row, label)),
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("cannot parse {:?} as row,label", rec.as_slice()),
                })
            }
        }
    }
    let mut labels: Vec<Option<Option<usize>>> = vec![None; pairs.len()];
    for (row, label) in pairs {
        let slot = labels
            .get_mut(row)
            .ok_or_else(|| Error::Format(format!("row index {row} out of range")))?;
        if slot.is_some() {
            return Err(Error::Format(format!("row index {row} listed twice")));
        }
        *slot = Some(label);
    }
    Ok(labels.into_iter().map(|l| l.expect("dense rows")).collect())
}

pub fn read_optional_labels_csv(path: impl AsRef<Path>) -> Result<Vec<Option<usize>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_optional_labels_csv(&text)
}

pub fn write_labels_csv<W: Write>(w: W, labels: &[usize]) -> Result<()> {
    let labels: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
    write_optional_labels_csv(w, &labels)
}

/// `None` is written as an empty label cell.
pub fn write_optional_labels_csv<W: Write>(w: W, labels: &[Option<usize>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["row", "label"]).map_err(|e| Error::Format(e.to_string()))?;
    for (i, l) in labels.iter().enumerate() {
        wr.write_record([i.to_string(), l.map(|v| v.to_string()).unwrap_or_default()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush().map_err(fmt_io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn optional_labels_round_trip() {
        let labels = vec![Some(3), None, Some(0)];
        let mut buf = Vec::new();
        write_optional_labels_csv(&mut buf, &labels).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(parse_optional_labels_csv(&text).unwrap(), labels);
        assert!(parse_labels_csv(&text).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(dim in 0usize..8, rows in prop::collection::vec((any::<u32>(), any::<u32>(), any::<u32>(), prop::collection::vec(any::<f32>(), 8)), 0..20)) {
            let mut d = FeatureDump::new(dim);
            for (s, x, y, v) in &rows {
                d.push(RowKey { slide_index: *s, x: *x, y: *y }, &v[..dim]).unwrap();
            }
            let bytes = d.to_bytes();
            let back = FeatureDump::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn bad_magic_named() {
        let mut bytes = FeatureDump::new(2).to_bytes();
        bytes[0] = b'X';
        let err = FeatureDump::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("RVFV"));
    }

    #[test]
    fn truncated_rejected() {
        let mut d = FeatureDump::new(3);
        d.push(RowKey { slide_index: 0, x: 1, y: 2 }, &[1.0, 2.0, 3.0]).unwrap();
        let bytes = d.to_bytes();
        assert!(FeatureDump::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn labels_csv() {
        assert_eq!(parse_labels_csv("row,label\n1,4\n0,2\n").unwrap(), [2, 4]);
        assert!(parse_labels_csv("0,1\n0,1\n").is_err());
        assert!(parse_labels_csv("0,1\n5,1\n").is_err());
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &[3, 1]).unwrap();
        assert_eq!(parse_labels_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), [3, 1]);
    }
}
