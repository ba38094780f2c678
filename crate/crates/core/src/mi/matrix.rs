use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Symmetric, non-negative pairwise MI matrix in nats over a masked index
/// set. Entries touching positions outside the set and the diagonal are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiMatrix {
    n: usize,
    values: Vec<f64>,
    masked: Vec<usize>,
}

impl MiMatrix {
    pub fn zeros(n: usize, masked: &[usize]) -> Self {
        let mut masked = masked.to_vec();
        masked.sort_unstable();
        masked.dedup();
        Self {
            n,
            values: vec![0.0; n * n],
            masked,
        }
    }

    /// Builds a matrix from raw (possibly asymmetric or negative) entries:
    /// symmetrizes as `(M + M^T) / 2`, clamps at 0, and zeroes the diagonal
    /// and everything outside `masked x masked`.
    pub fn from_raw(n: usize, raw: &[f64], masked: &[usize]) -> Result<Self> {
        if raw.len() != n * n {
            return shape_err(format!("raw MI needs {} entries, got {}", n * n, raw.len()));
        }
        let mut m = Self::zeros(n, masked);
        if m.masked.iter().any(|&i| i >= n) {
            return shape_err("masked index out of range");
        }
        let idx = m.masked.clone();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let v = (0.5 * (raw[i * n + j] + raw[j * n + i])).max(0.0);
                m.values[i * n + j] = v;
                m.values[j * n + i] = v;
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Unordered masked pairs `(i, j)` with `i < j`.
    pub fn masked_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, &i) in self.masked.iter().enumerate() {
            for &j in &self.masked[a + 1..] {
                out.push((i, j));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &MiMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over masked pairs; 0 when there are none.
    pub fn mean_pair_value(&self) -> f64 {
        let pairs = self.masked_pairs();
        if pairs.is_empty() {
            return 0.0;
        }
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum::<f64>() / pairs.len() as f64
    }

    /// Checks symmetry, non-negativity, zero diagonal, and zero support
    /// outside the masked set.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        let mut in_set = vec![false; n];
        for &i in &self.masked {
            in_set[i] = true;
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Numeric(format!("entry ({i},{j}) = {v}")));
                }
                if (v - self.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Numeric(format!("asymmetric at ({i},{j})")));
                }
                if (i == j || !in_set[i] || !in_set[j]) && v != 0.0 {
                    return Err(Error::Numeric(format!("entry ({i},{j}) must be 0")));
                }
            }
        }
        Ok(())
    }

    /// Sparse CSV: `row,col,nats` for every non-zero entry.
    pub fn write_triplets_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "col", "nats"]).map_err(csv_err)?;
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.get(i, j);
                if v != 0.0 {
                    out.write_record([i.to_string(), j.to_string(), format!("{v:e}")])
                        .map_err(csv_err)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Dense `n x n` CSV without a header. Values use Rust's shortest
    /// round-tripping float formatting.
    pub fn write_dense_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:e}", self.get(i, j))).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_dense_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_dense_csv(std::io::BufWriter::new(f))
    }
}

/// Parses a dense CSV written by [`MiMatrix::write_dense_csv`].
pub fn read_dense_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(ln, l)| {
            l.split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: ln + 1,
                        msg: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
