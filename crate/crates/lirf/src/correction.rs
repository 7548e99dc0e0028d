//! The correction operator: drop candidates farther than `τ` from the anchor
//! set, then pull each survivor toward the softmax-weighted mean `p` of its
//! `k` nearest anchors, `𝒞(z̃) = λ·z̃ + (1 − λ)·p(z̃)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LirfError, Result};
use crate::geometry::{fmt_f64, NeighborIndex, PointSet};

/// Multiplier applied to the median nearest-anchor spacing in adaptive mode.
pub const ADAPTIVE_TAU_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    /// Fixed filter threshold. `None` selects the adaptive threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub k: usize,
    pub lambda: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            tau: None,
            k: 3,
            lambda: 0.5,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(LirfError::InvalidConfig(
                "correction k must be at least 1".into(),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(LirfError::InvalidConfig(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if let Some(t) = self.tau {
            if t.is_nan() || t < 0.0 {
                return Err(LirfError::InvalidConfig(format!(
                    "tau must be nonnegative, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// The threshold to use against `anchors`.
    pub fn resolve_tau(&self, anchors: &PointSet) -> Result<f64> {
        match self.tau {
            Some(t) => Ok(t),
            None => adaptive_tau(anchors),
        }
    }
}

/// `2 ×` the median over anchors of the distance to the nearest other anchor.
pub fn adaptive_tau(anchors: &PointSet) -> Result<f64> {
    if anchors.len() < 2 {
        return Err(LirfError::InvalidConfig(
            "adaptive tau needs at least two anchors".into(),
        ));
    }
    let index = NeighborIndex::new(anchors);
    let mut gaps: Vec<f64> = (0..anchors.len())
        .into_par_iter()
        .map(|i| {
            let nn = index.knn(anchors.point(i), 2, None)?;
            // Self is at distance 0, but so is a duplicate with a smaller index.
            Ok(nn.iter().find(|n| n.index != i).map_or(0.0, |n| n.distance))
        })
        .collect::<Result<_>>()?;
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    let median = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    };
    Ok(ADAPTIVE_TAU_SCALE * median)
}

fn check_pair(candidates: &PointSet, anchors: &PointSet) -> Result<()> {
    if anchors.is_empty() {
        return Err(LirfError::Empty("anchor set"));
    }
    if candidates.dim() != anchors.dim() {
        return Err(LirfError::DimensionMismatch {
            expected: anchors.dim(),
            got: candidates.dim(),
        });
    }
    Ok(())
}

/// Keeps the candidates within `tau` of some anchor, in input order.
pub fn filter_candidates(
    candidates: &PointSet,
    anchors: &PointSet,
    tau: f64,
) -> Result<(PointSet, usize)> {
    check_pair(candidates, anchors)?;
    let index = NeighborIndex::new(anchors);
    let keep: Vec<usize> = (0..candidates.len())
        .into_par_iter()
        .map(|i| Ok((index.nearest(candidates.point(i))?.distance <= tau).then_some(i)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let rejected = candidates.len() - keep.len();
    Ok((candidates.select(&keep), rejected))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalAnchor {
    pub p: Vec<f64>,
    /// `(anchor index, weight)` in neighbour order.
    pub weights: Vec<(usize, f64)>,
}

impl LocalAnchor {
    /// Label with the largest total weight; ties go to the smaller label.
    pub fn majority_label(&self, anchors: &PointSet) -> Option<i64> {
        let labels = anchors.labels()?;
        let mut mass: BTreeMap<i64, f64> = BTreeMap::new();
        for &(j, w) in &self.weights {
            *mass.entry(labels[j]).or_default() += w;
        }
        mass.into_iter()
            .fold(None, |best: Option<(i64, f64)>, (l, w)| match best {
                Some((_, bw)) if bw >= w => best,
                _ => Some((l, w)),
            })
            .map(|(l, _)| l)
    }
}

/// Softmax weights `exp(−‖z̃ − z_j‖)` over the `k` nearest anchors.
///
/// Distances are shifted by their minimum before exponentiating, which
/// leaves the normalized weights unchanged.
pub fn local_anchor(candidate: &[f64], anchors: &PointSet, k: usize) -> Result<LocalAnchor> {
    local_anchor_in(&NeighborIndex::new(anchors), candidate, k, None)
}

pub(crate) fn local_anchor_in(
    index: &NeighborIndex<'_>,
    candidate: &[f64],
    k: usize,
    label: Option<i64>,
) -> Result<LocalAnchor> {
    let anchors = index.source();
    let nn = index.knn(candidate, k, label)?;
    if nn.len() < k {
        return Err(LirfError::InvalidConfig(format!(
            "{} eligible anchors, need k = {k}",
            nn.len()
        )));
    }
    let d_min = nn[0].distance;
    let raw: Vec<f64> = nn.iter().map(|n| (-(n.distance - d_min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<(usize, f64)> = nn
        .iter()
        .zip(&raw)
        .map(|(n, r)| (n.index, r / total))
        .collect();
    let mut p = vec![0.0; anchors.dim()];
    for &(j, w) in &weights {
        for (pc, a) in p.iter_mut().zip(anchors.point(j)) {
            *pc += w * a;
        }
    }
    Ok(LocalAnchor { p, weights })
}

fn blend(candidate: &[f64], p: &[f64], lambda: f64) -> Vec<f64> {
    candidate
        .iter()
        .zip(p)
        .map(|(c, a)| lambda * c + (1.0 - lambda) * a)
        .collect()
}

/// `λ·z̃ + (1 − λ)·p(z̃)`.
pub fn correct_sample(
    candidate: &[f64],
    anchors: &PointSet,
    config: &CorrectionConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let la = local_anchor(candidate, anchors, config.k)?;
    Ok(blend(candidate, &la.p, config.lambda))
}

/// Diagnostics for one candidate. `p` and `corrected` are absent when it was rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRecord {
    pub candidate: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub corrected: Option<Vec<f64>>,
    pub min_anchor_distance: f64,
    pub kept: bool,
    pub label: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub corrected: PointSet,
    pub kept_indices: Vec<usize>,
    pub rejected_count: usize,
    pub tau: f64,
    pub per_sample: Vec<CorrectionRecord>,
}

/// Filter then refine.
///
/// Labelled candidates are filtered and refined against anchors of their own
/// label and keep it. Unlabelled candidates use all anchors and, if the
/// anchors are labelled, take the weight-majority neighbour label.
pub fn correction_operator(
    candidates: &PointSet,
    anchors: &PointSet,
    config: &CorrectionConfig,
) -> Result<CorrectionOutcome> {
    config.validate()?;
    check_pair(candidates, anchors)?;
    if candidates.is_labeled() && !anchors.is_labeled() {
        return Err(LirfError::InvalidConfig(
            "labelled candidates need labelled anchors".into(),
        ));
    }
    let tau = config.resolve_tau(anchors)?;
    let index = NeighborIndex::new(anchors);
    let per_sample: Vec<CorrectionRecord> = (0..candidates.len())
        .into_par_iter()
        .map(|i| {
            let z = candidates.point(i);
            let own = candidates.label(i);
            let min_anchor_distance = index.knn(z, 1, own)?[0].distance;
            let mut rec = CorrectionRecord {
                candidate: z.to_vec(),
                p: None,
                corrected: None,
                min_anchor_distance,
                kept: min_anchor_distance <= tau,
                label: own,
            };
            if rec.kept {
                let la = local_anchor_in(&index, z, config.k, own)?;
                if own.is_none() {
                    rec.label = la.majority_label(anchors);
                }
                rec.corrected = Some(blend(z, &la.p, config.lambda));
                rec.p = Some(la.p);
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let mut corrected = anchors.empty_like();
    let mut kept_indices = Vec::new();
    for (i, r) in per_sample.iter().enumerate() {
        if let Some(c) = &r.corrected {
            corrected.push(c, r.label)?;
            kept_indices.push(i);
        }
    }
    Ok(CorrectionOutcome {
        rejected_count: candidates.len() - kept_indices.len(),
        corrected,
        kept_indices,
        tau,
        per_sample,
    })
}

impl CorrectionOutcome {
    /// One row per candidate: candidate, local anchor and corrected
    /// coordinates, minimum anchor distance, kept flag, label and `τ`.
    /// Coordinates of rejected candidates' `p` and corrected point are empty.
    pub fn diagnostic_csv(&self, dim: usize) -> String {
        let mut out = String::new();
        let cols: Vec<String> = ["z", "p", "c"]
            .iter()
            .flat_map(|pre| (0..dim).map(move |i| format!("{pre}{i}")))
            .chain(["min_anchor_dist", "kept", "label", "tau"].map(String::from))
            .collect();
        out.push_str(&cols.join(","));
        out.push('\n');
        let empty = vec![String::new(); dim];
        for r in &self.per_sample {
            let fmt = |v: &Option<Vec<f64>>| {
                v.as_ref()
                    .map_or(empty.clone(), |v| v.iter().map(|x| fmt_f64(*x)).collect())
            };
            let mut row: Vec<String> = r.candidate.iter().map(|x| fmt_f64(*x)).collect();
            row.extend(fmt(&r.p));
            row.extend(fmt(&r.corrected));
            row.push(fmt_f64(r.min_anchor_distance));
            row.push(u8::from(r.kept).to_string());
            row.push(r.label.map(|l| l.to_string()).unwrap_or_default());
            row.push(fmt_f64(self.tau));
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// A parsed diagnostic row.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub candidate: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub corrected: Option<Vec<f64>>,
    pub min_anchor_distance: f64,
    pub kept: bool,
    pub label: Option<i64>,
    pub tau: f64,
}

/// Reads back the output of [`CorrectionOutcome::diagnostic_csv`].
pub fn parse_diagnostic_csv(text: &str) -> Result<Vec<DiagnosticRow>> {
    let bad = |r: String| LirfError::format("correction diagnostics", r);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let ncols = header.split(',').count();
    if ncols < 7 || (ncols - 4) % 3 != 0 {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let dim = (ncols - 4) / 3;
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
    let vec = |f: &[&str]| -> Result<Option<Vec<f64>>> {
        if f.iter().all(|s| s.is_empty()) {
            Ok(None)
        } else {
            f.iter().map(|s| num(s)).collect::<Result<_>>().map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != ncols {
                return Err(bad(format!(
                    "row {}: {} fields, expected {ncols}",
                    n + 1,
                    f.len()
                )));
            }
            Ok(DiagnosticRow {
                candidate: vec(&f[..dim])?
                    .ok_or_else(|| bad(format!("row {}: empty candidate", n + 1)))?,
                p: vec(&f[dim..2 * dim])?,
                corrected: vec(&f[2 * dim..3 * dim])?,
                min_anchor_distance: num(f[3 * dim])?,
                kept: f[3 * dim + 1] == "1",
                label: match f[3 * dim + 2] {
                    "" => None,
                    s => Some(s.parse().map_err(|e| bad(format!("label `{s}`: {e}")))?),
                },
                tau: num(f[3 * dim + 3])?,
            })
        })
        .collect()
}
