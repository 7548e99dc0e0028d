//! `lirf` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error,
//! 3 refusal to overwrite existing outputs.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use lirf::autoencoder::{train_autoencoder, FrozenAutoencoder};
use lirf::benchhooks::{
    suite_ablation_grid, suite_convergence_circle, suite_trend_digits, suites_csv, suites_table,
};
use lirf::datasets::{few_shot, generate, DatasetKind, DatasetSpec};
use lirf::flow::{sample_field, sample_flow, FlowModel, FnField};
use lirf::geometry::PointSet;
use lirf::metrics::{append_metrics_csv, energy_report, metrics_csv, ssim_protocol};
use lirf::pipeline::{
    convergence_summary, decode_samples, diagnostics_name, encode_dataset, reports_csv,
    snapshot_name, Ablation, Lirf,
};
use lirf::rng::{fnv1a64, module_rng};
use lirf::LirfError;

use crate::config::RunConfig;

/// Failure with a specific exit status.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    Exit {
        code: 2,
        message: e.to_string(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<LirfError>() {
        Some(LirfError::InvalidConfig(_) | LirfError::ClassTooSmall { .. }) => 2,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(
    name = "lirf",
    version,
    about = "Few-shot manifold densification with flow matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; dotted keys allowed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set correction.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed; also overrides the dataset, autoencoder and flow seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where run directories and default outputs go.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its dense manifold reference.
    GenData(GenData),
    /// Train and freeze an autoencoder on a dataset CSV.
    TrainAe(TrainAe),
    /// Run the densification loop and write a run directory.
    Run(Run),
    /// Sample a finished run and append metric rows.
    Eval(Eval),
    /// Run the reproduction suites and print their verdicts.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// circle2d, two_moons, swiss_roll3d, gaussian_mixture, digit_blobs, digits_idx or csv.
    #[arg(long)]
    kind: Option<DatasetKind>,
    /// Number of points.
    #[arg(long)]
    n: Option<usize>,
    /// Gaussian noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Keep this many points per class.
    #[arg(long)]
    few_shot_per_class: Option<usize>,
    /// Embed the data isometrically into this many dimensions.
    #[arg(long)]
    ambient_dim: Option<usize>,
    /// IDX or CSV source for file-backed kinds.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Extra points drawn from the same distribution into holdout.csv.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Output directory (defaults to the configured output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainAe {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Latent dimension d.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sets beta = 0.
    #[arg(long)]
    no_manifold_loss: bool,
    /// Clamp decoder outputs to [0, 1].
    #[arg(long)]
    clamp_output: bool,
    /// Output directory for ae.ckpt and ae-loss.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    common: Common,
    /// Training data: ambient CSV with `--ae`, latent CSV with `--latent-direct`.
    #[arg(long)]
    data: PathBuf,
    /// Frozen autoencoder checkpoint; the loop runs in its latent space.
    #[arg(long, conflicts_with = "latent_direct")]
    ae: Option<PathBuf>,
    /// Treat the data CSV as latent points (no autoencoder).
    #[arg(long)]
    latent_direct: bool,
    /// Dense reference set for the d_H trajectory (same space as `--data`).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// full, vanilla_fm, no_correction or no_manifold_loss.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Refinement iterations T.
    #[arg(long)]
    iterations: Option<usize>,
    /// Candidates generated per iteration.
    #[arg(long)]
    gen_batch: Option<usize>,
    /// Correction contraction factor in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Fixed filter radius; adaptive when unset.
    #[arg(long)]
    tau: Option<f64>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    /// Run directory written by `run`.
    #[arg(long)]
    run: PathBuf,
    /// Reference CSV in the data space.
    #[arg(long)]
    holdout: PathBuf,
    /// Samples to draw.
    #[arg(long, default_value_t = 500)]
    n: usize,
}

#[derive(Args)]
struct Report {
    #[command(flatten)]
    common: Common,
    /// circle, digits, ablation or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Directory for suites.csv and suites.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(common: &Common, mut extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &common.output_dir {
        overrides.push(format!("output_dir={}", toml_str(&d.to_string_lossy())));
    }
    overrides.append(&mut extra);
    RunConfig::resolve(common.config.as_deref(), &overrides).map_err(usage)
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

fn push<T: fmt::Display>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={v}"));
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut o = Vec::new();
    push(
        &mut o,
        "dataset.kind",
        a.kind.map(|k| toml_str(&k.to_string())),
    );
    push(&mut o, "dataset.n_points", a.n);
    push(&mut o, "dataset.noise_sigma", a.noise);
    push(&mut o, "dataset.few_shot_per_class", a.few_shot_per_class);
    push(&mut o, "dataset.ambient_dim", a.ambient_dim);
    push(
        &mut o,
        "dataset.source_path",
        a.source.map(|p| toml_str(&p.to_string_lossy())),
    );
    let cfg = resolve(&a.common, o)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let spec = &cfg.dataset;
    let synthetic = !matches!(spec.kind, DatasetKind::DigitsIdx | DatasetKind::Csv);
    let (data, dense, holdout) = if a.holdout > 0 {
        if !synthetic {
            return Err(usage("--holdout needs a synthetic dataset kind"));
        }
        // One draw, split: the holdout shares any seeded lift with the data.
        let pool = generate(&DatasetSpec {
            n_points: spec.n_points + a.holdout,
            few_shot_per_class: None,
            ..spec.clone()
        })?;
        let head: Vec<usize> = (0..spec.n_points).collect();
        let tail: Vec<usize> = (spec.n_points..pool.data.len()).collect();
        let mut data = pool.data.select(&head);
        if let Some(k) = spec.few_shot_per_class {
            data = few_shot(&data, k, spec.seed)?;
        }
        (data, pool.dense_manifold, Some(pool.data.select(&tail)))
    } else {
        let d = generate(spec)?;
        (d.data, d.dense_manifold, None)
    };
    data.save_csv(out.join("data.csv"))?;
    if let Some(d) = &dense {
        d.save_csv(out.join("manifold.csv"))?;
    }
    if let Some(h) = &holdout {
        h.save_csv(out.join("holdout.csv"))?;
    }
    write(&out.join("dataset.toml"), &toml::to_string(spec)?)?;
    println!(
        "{}: {} points, dim {}{}{}{} -> {}",
        spec.kind,
        data.len(),
        data.dim(),
        if data.is_labeled() { ", labelled" } else { "" },
        dense
            .as_ref()
            .map(|d| format!(", manifold {}", d.len()))
            .unwrap_or_default(),
        holdout
            .as_ref()
            .map(|h| format!(", holdout {}", h.len()))
            .unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn train_ae(a: TrainAe) -> Result<()> {
    let mut o = Vec::new();
    push(&mut o, "ae.latent_dim", a.latent_dim);
    push(&mut o, "ae.epochs", a.epochs);
    if a.no_manifold_loss {
        o.push("ae.beta=0.0".into());
    }
    if a.clamp_output {
        o.push("ae.clamp_output=true".into());
    }
    let cfg = resolve(&a.common, o)?;
    let data = PointSet::load_csv(&a.data)?;
    let mut ae_cfg = cfg.ae.clone();
    ae_cfg.ambient_dim = data.dim();
    ae_cfg.validate().map_err(usage)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let start = Instant::now();
    let ae = train_autoencoder(&data, &ae_cfg)?;
    write(&out.join("ae.ckpt"), &ae.to_checkpoint_string())?;
    write(&out.join("ae-loss.csv"), &ae.loss_curve_csv())?;
    println!(
        "autoencoder {} -> {} (beta {}), final reconstruction {:.6e}, {:.1}s -> {}",
        ae_cfg.ambient_dim,
        ae_cfg.latent_dim,
        ae_cfg.beta,
        ae.final_reconstruction(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn run(a: Run) -> Result<()> {
    if a.ae.is_none() && !a.latent_direct {
        return Err(usage("run needs --ae <checkpoint> or --latent-direct"));
    }
    let mut o = Vec::new();
    push(
        &mut o,
        "pipeline.ablation",
        a.ablation.map(|x| toml_str(x.name())),
    );
    push(&mut o, "pipeline.iterations", a.iterations);
    push(&mut o, "pipeline.gen_batch", a.gen_batch);
    push(&mut o, "correction.lambda", a.lambda);
    push(&mut o, "correction.tau", a.tau);
    let mut cfg = resolve(&a.common, o)?;
    let raw = PointSet::load_csv(&a.data)?;
    let ae_text =
        a.ae.as_ref()
            .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
            .transpose()?;
    let ae = ae_text
        .as_deref()
        .map(FrozenAutoencoder::from_checkpoint_str)
        .transpose()?;
    let anchors = match &ae {
        Some(ae) => encode_dataset(&raw, ae)?,
        None => raw.clone(),
    };
    cfg.flow.latent_dim = anchors.dim();
    let reference = match &a.reference {
        Some(p) => {
            let r = PointSet::load_csv(p)?.without_labels();
            Some(match &ae {
                Some(ae) => encode_dataset(&r, ae)?,
                None => r,
            })
        }
        None => None,
    };

    let config_text = cfg.to_toml();
    let mut hashed = RunConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    }
    .to_toml()
    .into_bytes();
    hashed.extend(raw.to_csv_string().bytes());
    hashed.extend(ae_text.as_deref().unwrap_or("").bytes());
    if let Some(r) = &reference {
        hashed.extend(r.to_csv_string().bytes());
    }
    let dir = cfg
        .output_dir
        .join(format!("run-{}-{:016x}", cfg.seed, fnv1a64(&hashed)));
    if dir.exists() {
        if !a.force {
            return Err(Exit {
                code: 3,
                message: format!(
                    "{} already exists; pass --force to replace it",
                    dir.display()
                ),
            }
            .into());
        }
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), &config_text)?;
    if let Some(text) = &ae_text {
        write(&dir.join("ae.ckpt"), text)?;
    }

    let pc = cfg.pipeline();
    let mut lirf = Lirf::new(&anchors, &pc, reference.as_ref())?;
    anchors.save_csv(dir.join(snapshot_name(0)))?;
    while let Some(step) = lirf.step()? {
        let t = step.report.iteration;
        write(
            &dir.join(diagnostics_name(t)),
            &step.outcome.diagnostic_csv(anchors.dim()),
        )?;
        lirf.train_set().save_csv(dir.join(snapshot_name(t)))?;
        log::info!(
            "iteration {t}: |Z| = {}, added {}, rejected {}",
            step.report.train_set_size,
            step.report.added,
            step.report.rejected
        );
    }
    let result = lirf.finish();
    let trajectory = result.trajectory();
    write(&dir.join("reports.csv"), &reports_csv(&trajectory))?;
    let summary = convergence_summary(&trajectory)?;
    write(&dir.join("summary.toml"), &toml::to_string(&summary)?)?;
    write(&dir.join("flow.ckpt"), &result.model.to_checkpoint_string())?;
    let mut timings = String::from("iteration,wall_time_s\n");
    for r in &trajectory {
        timings += &format!("{},{:.3}\n", r.iteration, r.wall_time);
    }
    write(&dir.join("timings.txt"), &timings)?;
    println!(
        "{} iterations, |Z| {} -> {}{}",
        summary.iterations,
        anchors.len(),
        result.train_set.len(),
        match (summary.first_hausdorff, summary.last_hausdorff) {
            (Some(f), Some(l)) => format!(", d_H {f:.4} -> {l:.4}"),
            _ => String::new(),
        }
    );
    println!("{}", dir.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let config_path = a.run.join("config.toml");
    let flow_path = a.run.join("flow.ckpt");
    for p in [&config_path, &flow_path] {
        if !p.exists() {
            return Err(anyhow!(
                "{} is missing; is {} a finished run?",
                p.display(),
                a.run.display()
            ));
        }
    }
    let mut cfg = RunConfig::resolve(Some(&config_path), &[]).map_err(usage)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let model = FlowModel::from_checkpoint_str(&fs::read_to_string(&flow_path)?)?;
    let ae_path = a.run.join("ae.ckpt");
    let ae = if ae_path.exists() {
        Some(FrozenAutoencoder::from_checkpoint_str(
            &fs::read_to_string(&ae_path)?,
        )?)
    } else {
        None
    };
    let holdout = PointSet::load_csv(&a.holdout)?.without_labels();
    let decode = |z: &PointSet| -> Result<PointSet> {
        Ok(match &ae {
            Some(ae) => decode_samples(z, ae)?,
            None => z.clone(),
        })
    };
    let generated = decode(&sample_flow(
        &model,
        a.n,
        &mut module_rng(cfg.seed, "eval-sample"),
    )?)?
    .without_labels();
    // A zero field leaves the Gaussian starting points in place.
    let dim = model.config().latent_dim;
    let still = FnField {
        dim,
        f: |_: f64, _: &[f64]| vec![0.0; dim],
    };
    let prior = decode(&sample_field(
        &still,
        a.n,
        1,
        &[],
        &mut module_rng(cfg.seed, "eval-prior"),
    )?)?;
    let mut rows = vec![
        energy_report(&generated, &holdout, "flow-samples-vs-holdout")?,
        energy_report(&prior, &holdout, "prior-noise-vs-holdout")?,
    ];
    if cfg.dataset.kind.is_image() {
        rows.push(ssim_protocol(&generated, &holdout, 1.0)?);
    }
    append_metrics_csv(&a.run.join("metrics.csv"), &rows)?;
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let wanted: Vec<&str> = match a.suite.as_str() {
        "all" => vec!["circle", "digits", "ablation"],
        s @ ("circle" | "digits" | "ablation") => vec![s],
        other => return Err(usage(format!("unknown suite `{other}`"))),
    };
    let mut results = Vec::new();
    for s in wanted {
        log::info!("running suite {s}");
        results.push(match s {
            "circle" => suite_convergence_circle(),
            "digits" => suite_trend_digits(),
            _ => suite_ablation_grid(),
        });
    }
    let table = suites_table(&results);
    print!("{table}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write(&out.join("suites.csv"), &suites_csv(&results))?;
        write(&out.join("suites.txt"), &table)?;
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LIRF_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| usage(format!("LIRF_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainAe(a) => train_ae(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
