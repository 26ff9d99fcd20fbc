//! Feature tables and their on-disk form: `RAMF` magic, `u64` count,
//! `u64` dim, row-major little-endian `f64` rows, plus a sidecar CSV
//! (`<file>.rows.csv`) mapping rows to samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{Sample, Split};
use crate::error::{RamError, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"RAMF";
const SIDECAR_HEADER: &str = "row,path,id,camera,split";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub image_path: String,
    pub vehicle_id: u64,
    pub camera_id: Option<String>,
    pub split: Split,
}

impl From<&Sample> for SampleRef {
    fn from(s: &Sample) -> Self {
        SampleRef {
            image_path: s.image_path.clone(),
            vehicle_id: s.vehicle_id,
            camera_id: s.camera_id.clone(),
            split: s.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: Vec<SampleRef>,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            rows: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: SampleRef, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(RamError::Eval(format!(
                "feature of length {} pushed into a table of dim {}",
                feature.len(),
                self.dim
            )));
        }
        if let Some(bad) = feature.iter().find(|v| !v.is_finite()) {
            return Err(RamError::Eval(format!(
                "non-finite feature value {bad} for {}",
                sample.image_path
            )));
        }
        self.rows.push(sample);
        self.data.extend_from_slice(feature);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[SampleRef] {
        &self.rows
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows whose split is one of `splits`.
    pub fn indices(&self, splits: &[Split]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| splits.contains(&self.rows[i].split))
            .collect()
    }

    /// New table with the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> FeatureTable {
        let mut out = FeatureTable::new(self.dim);
        for &i in indices {
            out.rows.push(self.rows[i].clone());
            out.data.extend_from_slice(self.feature(i));
        }
        out
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".rows.csv");
        PathBuf::from(name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| RamError::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(TABLE_MAGIC).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let mut csv = String::from(SIDECAR_HEADER);
        csv.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{},{},{},{}\n",
                r.image_path,
                r.vehicle_id,
                r.camera_id.as_deref().unwrap_or_default(),
                r.split
            ));
        }
        let side = Self::sidecar_path(path);
        std::fs::write(&side, csv).map_err(|e| RamError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<FeatureTable> {
        let bad = |m: &str| RamError::Data(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(|e| RamError::io(path, e))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TABLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let dim = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            r.read_exact(&mut b8).map_err(|_| bad("truncated payload"))?;
            data.push(f64::from_le_bytes(b8));
        }

        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| RamError::io(&side, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut rows = Vec::with_capacity(count);
        for (i, rec) in reader.records().enumerate() {
            let perr = |m: String| RamError::Parse {
                path: side.display().to_string(),
                line: i + 2,
                message: m,
            };
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            if rec.len() != 5 || rec[0].parse::<usize>().ok() != Some(i) {
                return Err(perr("expected `row,path,id,camera,split` in row order".into()));
            }
            rows.push(SampleRef {
                image_path: rec[1].to_string(),
                vehicle_id: rec[2].parse().map_err(|_| perr(format!("bad id `{}`", &rec[2])))?,
                camera_id: Some(rec[3].to_string()).filter(|c| !c.is_empty()),
                split: rec[4].parse().map_err(perr)?,
            });
        }
        if rows.len() != count {
            return Err(bad(&format!("{count} rows in the table, {} in the sidecar", rows.len())));
        }
        Ok(FeatureTable { dim, rows, data })
    }
}
