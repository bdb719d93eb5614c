//! Samples, labeled datasets, and CSV I/O.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A set of draws from one distribution at one parameter value.
///
/// Every point has the same dimension and all entries are finite. Integer
/// valued data (counts) are carried as reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl Sample {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySample);
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        for (row, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            for (col, v) in p.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
            }
        }
        Ok(Sample { points, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec<f64>> {
        self.points
    }

    /// Read a sample from CSV: one row per draw, D numeric columns, optional
    /// header row. Parsing is locale-independent (dot decimal separator).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut points: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(row) => points.push(row),
                // only the first row may fail to parse (header)
                Err(e) if idx == 0 => {
                    let _ = e;
                    continue;
                }
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: idx + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        if points.is_empty() {
            return Err(Error::EmptySample);
        }
        let dim = points[0].len();
        for (row, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: row + 1,
                    message: format!("expected {dim} columns, got {}", p.len()),
                });
            }
        }
        Sample::new(points)
    }

    /// Write as CSV without a header, one row per draw.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Pooled two-sample data with binary origin labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    dim: usize,
}

impl LabeledDataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch {
                points: points.len(),
                labels: labels.len(),
            });
        }
        if points.len() < 2 {
            return Err(Error::InsufficientData(
                "labeled dataset needs at least 2 points".into(),
            ));
        }
        let dim = points[0].len();
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidParameter("labels must be 0 or 1".into()));
        }
        Ok(LabeledDataset { points, labels, dim })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fraction of label-1 points.
    pub fn pi1(&self) -> f64 {
        self.labels.iter().map(|&l| l as u64).sum::<u64>() as f64 / self.n() as f64
    }

    pub fn counts(&self) -> (usize, usize) {
        let n1 = self.labels.iter().filter(|&&l| l == 1).count();
        (self.n() - n1, n1)
    }

    pub fn has_both_labels(&self) -> bool {
        let (n0, n1) = self.counts();
        n0 > 0 && n1 > 0
    }
}

/// Pool two samples into a labeled dataset: label 0 for `s0` members, 1 for
/// `s1` members, order `s0` then `s1`.
pub fn pool_and_label(s0: &Sample, s1: &Sample) -> Result<LabeledDataset> {
    if s0.dim() != s1.dim() {
        return Err(Error::DimensionMismatch {
            expected: s0.dim(),
            got: s1.dim(),
        });
    }
    let mut points = Vec::with_capacity(s0.len() + s1.len());
    points.extend(s0.points().iter().cloned());
    points.extend(s1.points().iter().cloned());
    let mut labels = vec![0u8; s0.len()];
    labels.extend(std::iter::repeat_n(1u8, s1.len()));
    LabeledDataset::new(points, labels)
}
