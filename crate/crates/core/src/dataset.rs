//! In-memory datasets and the SMXD v1 text format.
//!
//! ```text
//! SMXD 1 <d> <count> <has_labels:0|1>
//! <x_1> ... <x_d> [label]
//! ```
//!
//! Values are written with 17 significant digits so a write/read cycle
//! reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synthetic::{GaussianMixture, SampleVec};

#[derive(Debug, Clone)]
pub enum Provenance {
    Synthetic { gmm: Box<GaussianMixture>, seed: u64 },
    Loaded(PathBuf),
    Augmented { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    samples: Vec<SampleVec>,
    labels: Option<Vec<usize>>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        dim: usize,
        samples: Vec<SampleVec>,
        labels: Option<Vec<usize>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::schema("dataset dimension must be >= 1"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::schema(format!(
                    "sample {i} has dimension {}, dataset has {dim}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(format!("sample {i} has a non-finite component")));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != samples.len() {
                return Err(Error::schema(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    samples.len()
                )));
            }
        }
        Ok(Self {
            dim,
            samples,
            labels,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleVec] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Number of classes, `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// Drops labels (for unconditional pipelines).
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dim: self.dim,
            samples: self.samples[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            provenance: self.provenance.clone(),
        }
    }

    /// Checks that the label ids are contiguous from 0.
    pub fn validate_labels(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            let k = self.num_classes();
            let mut seen = vec![false; k];
            for &l in labels {
                seen[l] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::schema(format!(
                    "label ids not contiguous: class {missing} of {k} is empty"
                )));
            }
        }
        Ok(())
    }

    pub fn to_smxd(&self) -> String {
        let mut out = format!(
            "SMXD 1 {} {} {}\n",
            self.dim,
            self.len(),
            u8::from(self.labels.is_some())
        );
        for (i, s) in self.samples.iter().enumerate() {
            write_floats(&mut out, s);
            if let Some(labels) = &self.labels {
                let _ = write!(out, " {}", labels[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_smxd(text: &str, path: &Path) -> Result<Self> {
        let err = |msg: String| Error::parse(path, msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "SMXD" || fields[1] != "1" {
            return Err(err(format!("bad header '{header}'")));
        }
        let dim: usize = fields[2].parse().map_err(|_| err("bad dimension".into()))?;
        let count: usize = fields[3].parse().map_err(|_| err("bad count".into()))?;
        let has_labels = match fields[4] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("bad has_labels flag '{other}'"))),
        };
        let mut samples = Vec::with_capacity(count);
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let expected = dim + usize::from(has_labels);
            if toks.len() != expected {
                return Err(err(format!(
                    "line {}: expected {expected} fields, got {}",
                    lineno + 2,
                    toks.len()
                )));
            }
            let sample = toks[..dim]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(format!("line {}: {e}", lineno + 2)))?;
            samples.push(sample);
            if has_labels {
                labels.push(
                    toks[dim]
                        .parse::<usize>()
                        .map_err(|e| err(format!("line {}: bad label: {e}", lineno + 2)))?,
                );
            }
        }
        if samples.len() != count {
            return Err(err(format!("header declares {count} samples, found {}", samples.len())));
        }
        Dataset::new(
            dim,
            samples,
            has_labels.then_some(labels),
            Provenance::Loaded(path.to_path_buf()),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_smxd())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_smxd(&text, path)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_floats(out: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:.16e}");
    }
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smxd_header_and_round_trip() {
        let ds = Dataset::new(
            2,
            vec![vec![0.1, -2.5e-300], vec![1.0 / 3.0, 7.0]],
            Some(vec![0, 1]),
            Provenance::Augmented { seed: 0 },
        )
        .unwrap();
        let text = ds.to_smxd();
        assert!(text.starts_with("SMXD 1 2 2 1\n"));
        let back = Dataset::from_smxd(&text, Path::new("mem")).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn smxd_rejects_malformed() {
        let p = Path::new("mem");
        assert!(Dataset::from_smxd("SMXD 2 1 1 0\n0.0\n", p).is_err());
        assert!(Dataset::from_smxd("SMXD 1 2 1 0\n0.0\n", p).is_err());
        assert!(Dataset::from_smxd("SMXD 1 1 2 0\n0.0\n", p).is_err());
        assert!(Dataset::from_smxd("SMXD 1 1 1 0\nnan\n", p).is_err());
        assert!(Dataset::from_smxd("SMXD 1 1 2 1\n0.0 0\n1.0 x\n", p).is_err());
    }

    #[test]
    fn small_draws_may_leave_classes_empty() {
        let ds = Dataset::from_smxd("SMXD 1 1 2 1\n0.0 0\n1.0 2\n", Path::new("mem")).unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert!(ds.validate_labels().is_err());
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let r = Dataset::new(2, vec![vec![0.0, 1.0], vec![1.0]], None, Provenance::Augmented { seed: 0 });
        assert!(matches!(r, Err(Error::Schema(_))));
    }
}
