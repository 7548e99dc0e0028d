//! Sample-quality metrics for small experiments: global SSIM for tiny
//! grayscale images, the energy distance between point sets, and trend
//! extraction over per-iteration series.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LirfError, Result};
use crate::geometry::{dist_unchecked, fmt_f64, PointSet};

pub const SSIM_PROTOCOL: &str = "mean-max-vs-holdout";

/// Single-window SSIM over whole images given as flat pixel vectors.
///
/// Uses `C1 = (0.01·L)²`, `C2 = (0.03·L)²` and sample (`n − 1`) variances.
pub fn ssim(a: &[f64], b: &[f64], dynamic_range: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LirfError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(LirfError::InvalidConfig(
            "ssim needs at least two pixels".into(),
        ));
    }
    if !(dynamic_range > 0.0) {
        return Err(LirfError::InvalidConfig(format!(
            "dynamic range must be positive, got {dynamic_range}"
        )));
    }
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mu_a, y - mu_b);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    va /= n - 1.0;
    vb /= n - 1.0;
    cov /= n - 1.0;
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub protocol: String,
}

/// Mean over generated images of the best SSIM against any reference image.
pub fn ssim_protocol(
    generated: &PointSet,
    reference: &PointSet,
    dynamic_range: f64,
) -> Result<MetricReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(LirfError::Empty("image set"));
    }
    let best: Vec<f64> = (0..generated.len())
        .into_par_iter()
        .map(|i| {
            let g = generated.point(i);
            reference
                .iter()
                .map(|r| ssim(g, r, dynamic_range))
                .try_fold(f64::NEG_INFINITY, |m, s| s.map(|s| m.max(s)))
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        name: "ssim".into(),
        value: best.iter().sum::<f64>() / best.len() as f64,
        n_generated: generated.len(),
        n_reference: reference.len(),
        protocol: SSIM_PROTOCOL.into(),
    })
}

fn mean_pairwise(a: &PointSet, b: &PointSet) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| b.iter().map(|q| dist_unchecked(a.point(i), q)).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// `2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖`, every expectation a mean over all
/// ordered pairs including `a = a′`.
///
/// Clamped at zero against rounding.
pub fn energy_distance(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LirfError::Empty("point set"));
    }
    if a.dim() != b.dim() {
        return Err(LirfError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let e = 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
    Ok(e.max(0.0))
}

pub fn energy_report(
    generated: &PointSet,
    reference: &PointSet,
    protocol: &str,
) -> Result<MetricReport> {
    Ok(MetricReport {
        name: "energy_distance".into(),
        value: energy_distance(generated, reference)?,
        n_generated: generated.len(),
        n_reference: reference.len(),
        protocol: protocol.into(),
    })
}

pub const METRICS_HEADER: &str = "name,value,n_generated,n_reference,protocol";

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.name,
            fmt_f64(r.value),
            r.n_generated,
            r.n_reference,
            r.protocol
        );
    }
    out
}

/// Appends rows to `path`, writing the header first if the file is new or empty.
pub fn append_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let text = metrics_csv(reports);
    let body = if fresh {
        &text[..]
    } else {
        &text[METRICS_HEADER.len() + 1..]
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LirfError::io(path, e))?;
    f.write_all(body.as_bytes())
        .map_err(|e| LirfError::io(path, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricReport>> {
    let bad = |r: String| LirfError::format("metrics csv", r);
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("`{l}` has {} fields", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            Ok(MetricReport {
                name: f[0].into(),
                value: f[1].parse().map_err(|e| bad(format!("`{}`: {e}", f[1])))?,
                n_generated: int(f[2])?,
                n_reference: int(f[3])?,
                protocol: f[4].into(),
            })
        })
        .collect()
}

/// Shape of a series indexed by iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub first: f64,
    pub last: f64,
    pub decreases: usize,
    pub increases: usize,
    /// Largest `x[t] − x[t−1]`, zero when the series never rises.
    pub max_increase: f64,
    /// Largest `(x[t] − x[t−1]) / x[t−1]`, zero when the series never rises.
    pub max_relative_increase: f64,
}

impl Trend {
    pub fn ratio(&self) -> f64 {
        self.last / self.first
    }
}

pub fn trend(series: &[f64]) -> Option<Trend> {
    let (&first, &last) = (series.first()?, series.last()?);
    let mut t = Trend {
        first,
        last,
        decreases: 0,
        increases: 0,
        max_increase: 0.0,
        max_relative_increase: 0.0,
    };
    for w in series.windows(2) {
        let step = w[1] - w[0];
        if step < 0.0 {
            t.decreases += 1;
        } else if step > 0.0 {
            t.increases += 1;
            t.max_increase = t.max_increase.max(step);
            t.max_relative_increase = t.max_relative_increase.max(step / w[0].abs());
        }
    }
    Some(t)
}
