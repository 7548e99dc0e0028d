use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{LirfError, Result};

/// An ordered collection of equal-dimension vectors with optional integer labels.
///
/// Points are stored row-major in one flat buffer. Every stored component is
/// finite; labelled-ness is fixed when the set is created.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<i64>>,
}

fn check_finite(p: &[f64]) -> Result<()> {
    match p.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(LirfError::NonFinite(format!("component {i} of point"))),
        None => Ok(()),
    }
}

impl PointSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(LirfError::InvalidConfig(
                "point dimension must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            data: Vec::new(),
            labels: None,
        })
    }

    pub fn new_labeled(dim: usize) -> Result<Self> {
        let mut s = Self::new(dim)?;
        s.labels = Some(Vec::new());
        Ok(s)
    }

    /// An empty set with the same dimension and labelled-ness as `self`.
    pub fn empty_like(&self) -> Self {
        Self {
            dim: self.dim,
            data: Vec::new(),
            labels: self.labels.as_ref().map(|_| Vec::new()),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        if dim == 0 {
            return Err(LirfError::InvalidConfig(
                "point dimension must be positive".into(),
            ));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(LirfError::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        check_finite(&data)?;
        if let Some(l) = &labels {
            if l.len() != data.len() / dim {
                return Err(LirfError::InvalidConfig(format!(
                    "{} labels for {} points",
                    l.len(),
                    data.len() / dim
                )));
            }
        }
        Ok(Self { dim, data, labels })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], labels: Option<Vec<i64>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(LirfError::Empty("point rows"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(LirfError::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(dim, data, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<i64> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn push(&mut self, p: &[f64], label: Option<i64>) -> Result<()> {
        if p.len() != self.dim {
            return Err(LirfError::DimensionMismatch {
                expected: self.dim,
                got: p.len(),
            });
        }
        check_finite(p)?;
        match (&mut self.labels, label) {
            (Some(l), Some(v)) => l.push(v),
            (None, None) => {}
            (Some(_), None) => {
                return Err(LirfError::InvalidConfig(
                    "labelled set requires a label".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(LirfError::InvalidConfig(
                    "unlabelled set cannot take a label".into(),
                ))
            }
        }
        self.data.extend_from_slice(p);
        Ok(())
    }

    /// Appends every point of `other`, which must match in dimension and labelled-ness.
    pub fn extend_from(&mut self, other: &PointSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(LirfError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        if other.is_labeled() != self.is_labeled() {
            return Err(LirfError::InvalidConfig(
                "cannot mix labelled and unlabelled sets".into(),
            ));
        }
        self.data.extend_from_slice(&other.data);
        if let (Some(l), Some(o)) = (&mut self.labels, &other.labels) {
            l.extend_from_slice(o);
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> PointSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        PointSet {
            dim: self.dim,
            data,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Drops labels, or attaches a single shared label to an unlabelled set.
    pub fn with_uniform_label(&self, label: i64) -> PointSet {
        PointSet {
            dim: self.dim,
            data: self.data.clone(),
            labels: Some(vec![label; self.len()]),
        }
    }

    pub fn without_labels(&self) -> PointSet {
        PointSet {
            dim: self.dim,
            data: self.data.clone(),
            labels: None,
        }
    }

    /// Sorted distinct labels; empty for unlabelled sets.
    pub fn distinct_labels(&self) -> Vec<i64> {
        let mut l = self.labels.clone().unwrap_or_default();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dim={}", self.dim);
        let mut header: Vec<String> = (0..self.dim).map(|c| format!("c{c}")).collect();
        if self.is_labeled() {
            header.push("label".into());
        }
        let _ = writeln!(out, "{}", header.join(","));
        for (i, p) in self.iter().enumerate() {
            for (c, v) in p.iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", fmt_f64(*v));
            }
            if let Some(l) = self.label(i) {
                let _ = write!(out, ",{l}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_csv_string().as_bytes())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| LirfError::io(path, e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<PointSet> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let bad = |line: usize, reason: String| {
            LirfError::format("point CSV", format!("line {}: {reason}", line + 1))
        };

        let (_, first) = lines
            .next()
            .ok_or_else(|| bad(0, "missing dim header".into()))?;
        let first = first.map_err(|e| bad(0, e.to_string()))?;
        let dim: usize = first
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad(0, format!("expected `dim=<d>`, found `{first}`")))?;
        if dim == 0 {
            return Err(bad(0, "dim must be positive".into()));
        }

        let mut data = Vec::new();
        let mut labels: Vec<i64> = Vec::new();
        let mut labeled: Option<bool> = None;
        for (n, line) in lines {
            let line = line.map_err(|e| bad(n, e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with("c0") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let has_label = match fields.len() {
                l if l == dim => false,
                l if l == dim + 1 => true,
                l => return Err(bad(n, format!("{l} columns for dim {dim}"))),
            };
            if *labeled.get_or_insert(has_label) != has_label {
                return Err(bad(n, "inconsistent label column".into()));
            }
            for f in &fields[..dim] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| bad(n, format!("`{f}`: {e}")))?,
                );
            }
            if has_label {
                let f = fields[dim];
                labels.push(
                    f.parse::<i64>()
                        .map_err(|e| bad(n, format!("label `{f}`: {e}")))?,
                );
            }
        }
        let labels = if labeled == Some(true) {
            Some(labels)
        } else {
            None
        };
        PointSet::from_flat(dim, data, labels)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<PointSet> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| LirfError::io(path, e))?;
        Self::read_csv(f)
    }
}

/// Seventeen significant digits; round-trips every finite f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
