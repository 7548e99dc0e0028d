//! The generate–correct–augment loop: train a flow on the anchors, then
//! repeatedly sample candidates, correct them against the current training
//! set, append the survivors and fine-tune.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::FrozenAutoencoder;
use crate::correction::{
    correction_operator, parse_diagnostic_csv, CorrectionConfig, CorrectionOutcome, DiagnosticRow,
};
use crate::error::{LirfError, Result};
use crate::flow::{sample_flow, train_flow, FlowConfig, FlowModel};
use crate::geometry::{
    dist_unchecked, fmt_f64, hausdorff_distance, min_distance_to_set, NeighborIndex, PointSet,
};
use crate::metrics::trend;
use crate::rng::{module_rng, seed_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    VanillaFm,
    NoCorrection,
    NoManifoldLoss,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::VanillaFm,
        Ablation::NoCorrection,
        Ablation::NoManifoldLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::VanillaFm => "vanilla_fm",
            Ablation::NoCorrection => "no_correction",
            Ablation::NoManifoldLoss => "no_manifold_loss",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = LirfError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LirfError::InvalidConfig(format!("unknown ablation `{s}`")))
    }
}

/// Which set candidates are corrected against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// The whole current training set.
    Current,
    /// The original anchors only.
    Initial,
}

/// Corrected points closer than this to an existing training point are dropped.
pub const DUPLICATE_RADIUS: f64 = 1e-9;
/// Consecutive iterations without additions before a warning is logged.
pub const ZERO_SURVIVOR_WARN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub gen_batch: usize,
    pub correction: CorrectionConfig,
    pub flow: FlowConfig,
    pub ablation: Ablation,
    pub anchor: AnchorMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            gen_batch: 50,
            correction: CorrectionConfig::default(),
            flow: FlowConfig::default(),
            ablation: Ablation::Full,
            anchor: AnchorMode::Current,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gen_batch == 0 {
            return Err(LirfError::InvalidConfig(
                "gen_batch must be at least 1".into(),
            ));
        }
        self.correction.validate()?;
        self.flow.validate()
    }

    /// Iterations actually executed.
    pub fn effective_iterations(&self) -> usize {
        match self.ablation {
            Ablation::VanillaFm => 0,
            _ => self.iterations,
        }
    }

    /// Correction parameters actually applied.
    pub fn effective_correction(&self) -> CorrectionConfig {
        match self.ablation {
            Ablation::NoCorrection => CorrectionConfig {
                tau: Some(f64::INFINITY),
                lambda: 1.0,
                ..self.correction.clone()
            },
            _ => self.correction.clone(),
        }
    }

    fn flow_config(&self, stage: &str) -> FlowConfig {
        FlowConfig {
            seed: seed_for(self.seed, stage),
            ..self.flow.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub train_set_size: usize,
    pub added: usize,
    pub rejected: usize,
    pub duplicates: usize,
    /// Filter threshold used; absent for the initialization record.
    pub tau: Option<f64>,
    pub converged_cfm_loss: f64,
    pub hausdorff_to_reference: Option<f64>,
    /// Seconds; kept out of the CSV so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Everything produced by one iteration.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub report: IterationReport,
    pub candidates: PointSet,
    pub outcome: CorrectionOutcome,
}

/// A steppable run.
#[derive(Debug, Clone)]
pub struct Lirf {
    config: PipelineConfig,
    correction: CorrectionConfig,
    model: FlowModel,
    train: PointSet,
    initial_anchors: PointSet,
    reference: Option<PointSet>,
    initial: IterationReport,
    reports: Vec<IterationReport>,
    zero_streak: usize,
}

impl Lirf {
    /// Trains the initial flow on `anchors`.
    pub fn new(
        anchors: &PointSet,
        config: &PipelineConfig,
        reference: Option<&PointSet>,
    ) -> Result<Self> {
        config.validate()?;
        if anchors.is_empty() {
            return Err(LirfError::Empty("anchor set"));
        }
        if anchors.len() <= config.correction.k {
            return Err(LirfError::InvalidConfig(format!(
                "{} anchors, need more than correction k = {}",
                anchors.len(),
                config.correction.k
            )));
        }
        if let Some(r) = reference {
            if r.dim() != anchors.dim() {
                return Err(LirfError::DimensionMismatch {
                    expected: anchors.dim(),
                    got: r.dim(),
                });
            }
        }
        let start = Instant::now();
        let model = train_flow(anchors, &config.flow_config("flow-initial"), None)?;
        let initial = IterationReport {
            iteration: 0,
            train_set_size: anchors.len(),
            added: 0,
            rejected: 0,
            duplicates: 0,
            tau: None,
            converged_cfm_loss: model.converged_loss().unwrap_or(f64::NAN),
            hausdorff_to_reference: reference
                .map(|r| hausdorff_distance(anchors, r))
                .transpose()?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        Ok(Self {
            correction: config.effective_correction(),
            config: config.clone(),
            model,
            train: anchors.clone(),
            initial_anchors: anchors.clone(),
            reference: reference.cloned(),
            initial,
            reports: Vec::new(),
            zero_streak: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn train_set(&self) -> &PointSet {
        &self.train
    }

    pub fn initial_report(&self) -> &IterationReport {
        &self.initial
    }

    pub fn reports(&self) -> &[IterationReport] {
        &self.reports
    }

    pub fn iteration(&self) -> usize {
        self.reports.len()
    }

    pub fn is_done(&self) -> bool {
        self.iteration() >= self.config.effective_iterations()
    }

    /// Runs one iteration. Returns `None` once all iterations are done.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let start = Instant::now();
        let t = self.iteration() + 1;
        let mut rng = module_rng(self.config.seed, &format!("sample-{t}"));
        let candidates = sample_flow(&self.model, self.config.gen_batch, &mut rng)?;
        let anchors = match self.config.anchor {
            AnchorMode::Current => &self.train,
            AnchorMode::Initial => &self.initial_anchors,
        };
        let outcome = correction_operator(&candidates, anchors, &self.correction)?;
        let fresh = self.suppress_duplicates(&outcome.corrected);
        let duplicates = outcome.corrected.len() - fresh.len();
        self.train.extend_from(&outcome.corrected.select(&fresh))?;
        if fresh.is_empty() {
            self.zero_streak += 1;
            if self.zero_streak >= ZERO_SURVIVOR_WARN {
                log::warn!(
                    "iteration {t}: no samples added for {} consecutive iterations",
                    self.zero_streak
                );
            }
        } else {
            self.zero_streak = 0;
        }
        self.model = train_flow(
            &self.train,
            &self.config.flow_config(&format!("flow-finetune-{t}")),
            Some(&self.model),
        )?;
        let report = IterationReport {
            iteration: t,
            train_set_size: self.train.len(),
            added: fresh.len(),
            rejected: outcome.rejected_count,
            duplicates,
            tau: Some(outcome.tau),
            converged_cfm_loss: self.model.converged_loss().unwrap_or(f64::NAN),
            hausdorff_to_reference: self
                .reference
                .as_ref()
                .map(|r| hausdorff_distance(&self.train, r))
                .transpose()?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        self.reports.push(report.clone());
        Ok(Some(StepRecord {
            report,
            candidates,
            outcome,
        }))
    }

    /// Indices into `corrected` of points at least [`DUPLICATE_RADIUS`] away
    /// from the training set and from earlier accepted points.
    fn suppress_duplicates(&self, corrected: &PointSet) -> Vec<usize> {
        if corrected.is_empty() {
            return Vec::new();
        }
        let index = NeighborIndex::new(&self.train);
        let clear: Vec<bool> = (0..corrected.len())
            .into_par_iter()
            .map(|i| {
                index
                    .nearest(corrected.point(i))
                    .map_or(true, |n| n.distance >= DUPLICATE_RADIUS)
            })
            .collect();
        let mut keep: Vec<usize> = Vec::new();
        for i in (0..corrected.len()).filter(|&i| clear[i]) {
            let p = corrected.point(i);
            if keep
                .iter()
                .all(|&j| dist_unchecked(p, corrected.point(j)) >= DUPLICATE_RADIUS)
            {
                keep.push(i);
            }
        }
        keep
    }

    pub fn finish(self) -> LirfRun {
        LirfRun {
            model: self.model,
            initial: self.initial,
            reports: self.reports,
            train_set: self.train,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LirfRun {
    pub model: FlowModel,
    /// The record for the initial model and `Z0`.
    pub initial: IterationReport,
    /// One record per executed iteration.
    pub reports: Vec<IterationReport>,
    pub train_set: PointSet,
}

impl LirfRun {
    /// Initial record followed by the per-iteration records.
    pub fn trajectory(&self) -> Vec<IterationReport> {
        std::iter::once(self.initial.clone())
            .chain(self.reports.iter().cloned())
            .collect()
    }
}

pub fn lirf_run(
    anchors: &PointSet,
    config: &PipelineConfig,
    reference: Option<&PointSet>,
) -> Result<LirfRun> {
    let mut run = Lirf::new(anchors, config, reference)?;
    while run.step()?.is_some() {}
    Ok(run.finish())
}

/// Encodes every point; labels are carried through.
pub fn encode_dataset(raw: &PointSet, ae: &FrozenAutoencoder) -> Result<PointSet> {
    map_points(raw, ae.config().ambient_dim, ae.config().latent_dim, |x| {
        ae.encode(x)
    })
}

/// Decodes every point, clamped to `[0, 1]` when the autoencoder is configured for images.
pub fn decode_samples(latents: &PointSet, ae: &FrozenAutoencoder) -> Result<PointSet> {
    map_points(
        latents,
        ae.config().latent_dim,
        ae.config().ambient_dim,
        |z| ae.decode(z),
    )
}

fn map_points<F>(input: &PointSet, from: usize, to: usize, f: F) -> Result<PointSet>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if input.dim() != from {
        return Err(LirfError::DimensionMismatch {
            expected: from,
            got: input.dim(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..input.len())
        .into_par_iter()
        .map(|i| f(input.point(i)))
        .collect::<Result<_>>()?;
    let flat = rows.into_iter().flatten().collect();
    PointSet::from_flat(to, flat, input.labels().map(<[i64]>::to_vec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_hausdorff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_hausdorff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hausdorff_ratio: Option<f64>,
    pub hausdorff_decreases: usize,
    pub hausdorff_increases: usize,
    pub max_hausdorff_increase: f64,
    pub max_relative_hausdorff_increase: f64,
    pub mean_added: f64,
    pub first_cfm_loss: f64,
    pub last_cfm_loss: f64,
    pub cfm_loss_ratio: f64,
}

/// Summarizes a trajectory whose first record is the initialization.
pub fn convergence_summary(trajectory: &[IterationReport]) -> Result<ConvergenceSummary> {
    if trajectory.is_empty() {
        return Err(LirfError::Empty("report trajectory"));
    }
    let hd: Option<Vec<f64>> = trajectory
        .iter()
        .map(|r| r.hausdorff_to_reference)
        .collect();
    let ht = hd.as_deref().and_then(trend);
    let steps = &trajectory[1..];
    let losses: Vec<f64> = trajectory.iter().map(|r| r.converged_cfm_loss).collect();
    let lt = trend(&losses).expect("nonempty");
    Ok(ConvergenceSummary {
        iterations: steps.len(),
        first_hausdorff: ht.map(|t| t.first),
        last_hausdorff: ht.map(|t| t.last),
        hausdorff_ratio: ht.map(|t| t.ratio()),
        hausdorff_decreases: ht.map_or(0, |t| t.decreases),
        hausdorff_increases: ht.map_or(0, |t| t.increases),
        max_hausdorff_increase: ht.map_or(0.0, |t| t.max_increase),
        max_relative_hausdorff_increase: ht.map_or(0.0, |t| t.max_relative_increase),
        mean_added: if steps.is_empty() {
            0.0
        } else {
            steps.iter().map(|r| r.added as f64).sum::<f64>() / steps.len() as f64
        },
        first_cfm_loss: lt.first,
        last_cfm_loss: lt.last,
        cfm_loss_ratio: lt.ratio(),
    })
}

pub const REPORTS_HEADER: &str =
    "iteration,train_set_size,added,rejected,duplicates,tau,converged_cfm_loss,hausdorff_to_reference";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One row per record, fixed column order; empty cells for absent values.
pub fn reports_csv(trajectory: &[IterationReport]) -> String {
    let mut out = format!("{REPORTS_HEADER}\n");
    for r in trajectory {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.train_set_size,
            r.added,
            r.rejected,
            r.duplicates,
            opt(r.tau),
            fmt_f64(r.converged_cfm_loss),
            opt(r.hausdorff_to_reference)
        );
    }
    out
}

pub fn parse_reports_csv(text: &str) -> Result<Vec<IterationReport>> {
    let bad = |r: String| LirfError::format("reports csv", r);
    let mut lines = text.lines();
    if lines.next() != Some(REPORTS_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("`{l}` has {} fields", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let onum = |s: &str| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            Ok(IterationReport {
                iteration: int(f[0])?,
                train_set_size: int(f[1])?,
                added: int(f[2])?,
                rejected: int(f[3])?,
                duplicates: int(f[4])?,
                tau: onum(f[5])?,
                converged_cfm_loss: num(f[6])?,
                hausdorff_to_reference: onum(f[7])?,
                wall_time: 0.0,
            })
        })
        .collect()
}

/// Training-set snapshot file for iteration `t` inside a run directory.
pub fn snapshot_name(t: usize) -> String {
    format!("train-{t:03}.csv")
}

/// Correction diagnostics file for iteration `t` inside a run directory.
pub fn diagnostics_name(t: usize) -> String {
    format!("diagnostics-{t:03}.csv")
}

/// Result of checking append-only growth and the filter condition from dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayVerdict {
    pub iterations: usize,
    pub points_checked: usize,
    pub violations: Vec<String>,
}

impl ReplayVerdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks, for every iteration, that `Z_{t−1}` is a prefix of `Z_t` and that
/// each appended point is the corrected form of a kept candidate whose
/// distance to the correction anchors is within the recorded `τ`.
pub fn replay_densification(
    snapshots: &[PointSet],
    diagnostics: &[Vec<DiagnosticRow>],
    anchor: AnchorMode,
) -> ReplayVerdict {
    let mut v = ReplayVerdict {
        iterations: diagnostics.len(),
        points_checked: 0,
        violations: Vec::new(),
    };
    if snapshots.len() != diagnostics.len() + 1 {
        v.violations.push(format!(
            "{} snapshots for {} diagnostic dumps",
            snapshots.len(),
            diagnostics.len()
        ));
        return v;
    }
    for (t, rows) in diagnostics.iter().enumerate() {
        let (prev, next) = (&snapshots[t], &snapshots[t + 1]);
        let anchors = match anchor {
            AnchorMode::Current => prev,
            AnchorMode::Initial => &snapshots[0],
        };
        let it = t + 1;
        if next.len() < prev.len()
            || (0..prev.len())
                .any(|i| prev.point(i) != next.point(i) || prev.label(i) != next.label(i))
        {
            v.violations
                .push(format!("iteration {it}: previous set is not a prefix"));
            continue;
        }
        let mut used = vec![false; rows.len()];
        for i in prev.len()..next.len() {
            v.points_checked += 1;
            let p = next.point(i);
            let src = rows
                .iter()
                .enumerate()
                .position(|(r, row)| !used[r] && row.kept && row.corrected.as_deref() == Some(p));
            let Some(r) = src else {
                v.violations.push(format!(
                    "iteration {it}: added point {i} has no kept candidate"
                ));
                continue;
            };
            used[r] = true;
            let row = &rows[r];
            match min_distance_to_set(&row.candidate, anchors) {
                Ok(d) if d <= row.tau => {}
                Ok(d) => v.violations.push(format!(
                    "iteration {it}: candidate {r} at distance {d} exceeds tau {}",
                    row.tau
                )),
                Err(e) => v.violations.push(format!("iteration {it}: {e}")),
            }
        }
    }
    v
}

/// [`replay_densification`] over the snapshot and diagnostic files of a run directory.
pub fn replay_run_dir(dir: &Path, anchor: AnchorMode) -> Result<ReplayVerdict> {
    let mut snapshots = vec![PointSet::load_csv(dir.join(snapshot_name(0)))?];
    let mut diagnostics = Vec::new();
    for t in 1.. {
        let d = dir.join(diagnostics_name(t));
        if !d.exists() {
            break;
        }
        let text = std::fs::read_to_string(&d).map_err(|e| LirfError::io(&d, e))?;
        diagnostics.push(parse_diagnostic_csv(&text)?);
        snapshots.push(PointSet::load_csv(dir.join(snapshot_name(t)))?);
    }
    Ok(replay_densification(&snapshots, &diagnostics, anchor))
}
