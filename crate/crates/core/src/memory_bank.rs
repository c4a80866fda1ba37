//! Lazily updated table of the latest encoding of every corpus node.
//!
//! Rows are read without gradient as positives and overwritten only for the
//! nodes of the current batch, with the encoder output of the step that
//! visited them. There is no momentum blending: an update replaces the row.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::binio;
use crate::encoder::{l2_norm, EncoderParams};
use crate::error::{Error, Result};
use crate::graph_store::{GlobalNodeIndex, TagCorpus};

/// Tolerance on the unit-norm contract of stored rows.
pub const ROW_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    table: Vec<f64>,
    last_updated: Vec<u64>,
}

impl MemoryBank {
    /// Encodes every node of the corpus with the initial encoder.
    pub fn init(corpus: &TagCorpus, f0: &EncoderParams) -> Result<Self> {
        let texts: Vec<&str> = corpus.texts().collect();
        let rows: Vec<Vec<f64>> = texts
            .par_iter()
            .map(|t| f0.encode(t))
            .collect::<Result<_>>()?;
        Ok(Self::from_rows(f0.embed_dim(), rows))
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let mut table = Vec::with_capacity(n * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "row dimension mismatch");
            table.extend(r);
        }
        Self {
            dim,
            table,
            last_updated: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.last_updated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_updated.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Borrowed row; panics when out of range.
    #[inline]
    pub fn row(&self, idx: GlobalNodeIndex) -> &[f64] {
        &self.table[idx.0 * self.dim..(idx.0 + 1) * self.dim]
    }

    /// Copy of row `idx`.
    pub fn lookup(&self, idx: GlobalNodeIndex) -> Result<Vec<f64>> {
        if idx.0 >= self.len() {
            return Err(Error::OutOfRange(format!(
                "bank row {idx} (bank has {} rows)",
                self.len()
            )));
        }
        Ok(self.row(idx).to_vec())
    }

    pub fn last_updated(&self, idx: GlobalNodeIndex) -> u64 {
        self.last_updated[idx.0]
    }

    /// Overwrites the rows of `batch` and stamps them with `step`.
    ///
    /// The whole batch is validated before any row is written.
    pub fn update(&mut self, batch: &[(GlobalNodeIndex, Vec<f64>)], step: u64) -> Result<()> {
        let mut seen = HashSet::with_capacity(batch.len());
        for (idx, v) in batch {
            if idx.0 >= self.len() {
                return Err(Error::OutOfRange(format!("bank row {idx}")));
            }
            if !seen.insert(*idx) {
                return Err(Error::Validation(format!("duplicate index {idx} in bank update")));
            }
            if v.len() != self.dim {
                return Err(Error::Validation(format!(
                    "bank update for {idx} has dimension {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if (l2_norm(v) - 1.0).abs() > ROW_NORM_TOLERANCE {
                return Err(Error::Validation(format!("bank update for {idx} is not unit-norm")));
            }
        }
        for (idx, v) in batch {
            self.table[idx.0 * self.dim..(idx.0 + 1) * self.dim].copy_from_slice(v);
            self.last_updated[idx.0] = step;
        }
        Ok(())
    }

    /// All rows, row-major.
    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

const BANK_MAGIC: &[u8; 4] = b"UGLM";
const BANK_VERSION: u32 = 1;

impl MemoryBank {
    /// Layout: magic `UGLM`, u32 version, u32 n, u32 d, row-major f32 table,
    /// then n × u64 last-updated step.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, BANK_MAGIC)?;
        binio::write_u32(w, BANK_VERSION)?;
        binio::write_u32(w, binio::len_u32(self.len(), "bank rows")?)?;
        binio::write_u32(w, binio::len_u32(self.dim, "bank dim")?)?;
        for &x in &self.table {
            binio::write_f32(w, x as f32)?;
        }
        for &s in &self.last_updated {
            binio::write_u64(w, s)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, BANK_MAGIC)?;
        binio::expect_version(r, BANK_VERSION)?;
        let n = binio::read_u32(r)? as usize;
        let dim = binio::read_u32(r)? as usize;
        let table = (0..n * dim)
            .map(|_| binio::read_f32(r).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let last_updated = (0..n).map(|_| binio::read_u64(r)).collect::<Result<Vec<_>>>()?;
        binio::expect_eof(r)?;
        Ok(Self {
            dim,
            table,
            last_updated,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
