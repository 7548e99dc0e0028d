//! Acceptance criteria A1–A9, one PASS/FAIL line each.
//!
//! Exits non-zero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use lirf::approximator::{grad_check, Mlp, Objective};
use lirf::autoencoder::{
    manifold_loss, precompute_neighbors, train_autoencoder, AeConfig, AeObjective,
};
use lirf::benchhooks::{
    suite_ablation_grid, suite_convergence_circle, suite_trend_digits, AblationSuiteConfig,
    CircleSuiteConfig, DigitsSuiteConfig, SuiteResult,
};
use lirf::correction::{correct_sample, filter_candidates, local_anchor, CorrectionConfig};
use lirf::datasets::{generate, DatasetKind, DatasetSpec};
use lirf::flow::{
    cfm_loss_grad_with_draws, draw_cfm, euler_integrate, CfmDraw, FlowConfig, FlowModel, FnField,
};
use lirf::geometry::{
    bilipschitz_ratios, euclidean_distance, hausdorff_distance, norm, NeighborIndex, PointSet,
};
use lirf::pipeline::{replay_run_dir, AnchorMode};
use lirf::rng::rng_from_seed;
use rand::Rng;

struct Verdict {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn report(v: &Verdict, secs: f64) {
    println!(
        "{} {}  {} ({secs:.1}s)",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn random_set(rng: &mut impl Rng, n: usize, dim: usize) -> PointSet {
    let flat: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    PointSet::from_flat(dim, flat, None).unwrap()
}

fn suite_detail(s: &SuiteResult, ids: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for id in ids {
        match s.criterion(id) {
            Some(c) => {
                ok &= c.passed;
                parts.push(format!("{id}={} (need {})", c.measured, c.threshold));
            }
            None => {
                ok = false;
                parts.push(format!("{id} missing"));
            }
        }
    }
    for n in &s.notes {
        parts.push(n.clone());
    }
    (ok, parts.join("; "))
}

fn a1(circle: &SuiteResult) -> Verdict {
    let (passed, detail) = suite_detail(circle, &["A1.hausdorff_ratio", "A1.trajectory_shape"]);
    Verdict {
        id: "A1",
        passed,
        detail,
    }
}

fn a2() -> Verdict {
    let mut rng = rng_from_seed(2);
    let (mut contraction, mut collinear, mut hull_bad) = (0.0f64, 0.0f64, 0usize);
    for inst in 0..1000 {
        let dim = [2, 8, 32][inst % 3];
        let k = 1 + inst % 5;
        let lambda = 0.1 * (1 + inst % 9) as f64;
        let n = k + rng.random_range(0..20);
        let anchors = random_set(&mut rng, n, dim);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let cfg = CorrectionConfig {
            tau: Some(f64::INFINITY),
            k,
            lambda,
        };
        let la = local_anchor(&z, &anchors, k).unwrap();
        let c = correct_sample(&z, &anchors, &cfg).unwrap();
        let u: Vec<f64> = c.iter().zip(&la.p).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = z.iter().zip(&la.p).map(|(a, b)| a - b).collect();
        let (nu, nv) = (norm(&u), norm(&v));
        contraction = contraction.max(((nu - lambda * nv) / (lambda * nv)).abs());
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        collinear = collinear.max(((dot - nu * nv) / (nu * nv)).abs());
        let wsum: f64 = la.weights.iter().map(|w| w.1).sum();
        let mut inside = la.weights.len() == k
            && la.weights.iter().all(|w| w.1 > 0.0)
            && (wsum - 1.0).abs() <= 1e-14;
        for d in 0..dim {
            let vals = la.weights.iter().map(|w| anchors.point(w.0)[d]);
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-14 * (lo.abs() + hi.abs() + 1.0);
            inside &= la.p[d] >= lo - slack && la.p[d] <= hi + slack;
        }
        hull_bad += usize::from(!inside);
    }
    Verdict {
        id: "A2",
        passed: contraction <= 1e-12 && collinear <= 1e-12 && hull_bad == 0,
        detail: format!(
            "1000 instances: max contraction rel err {contraction:.2e}, collinearity {collinear:.2e}, hull failures {hull_bad}"
        ),
    }
}

fn a3(suites: &[&SuiteResult], run_dirs: &[&Path]) -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for s in suites {
        if let Some(c) = s.criterion("A3.replay") {
            passed &= c.passed;
            parts.push(format!("{} violations {}", s.suite, c.measured));
        } else {
            passed = false;
            parts.push(format!("{} has no replay result", s.suite));
        }
    }
    for dir in run_dirs {
        match replay_run_dir(dir, AnchorMode::Current) {
            Ok(v) => {
                passed &= v.passed();
                parts.push(format!(
                    "cli run ({} iterations) violations {}",
                    v.iterations,
                    v.violations.len()
                ));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("cli replay error: {e}"));
            }
        }
    }
    Verdict {
        id: "A3",
        passed,
        detail: parts.join("; "),
    }
}

fn a4() -> Verdict {
    // Points on the first axis of R^4; the encoder reads that coordinate back.
    let ts: Vec<f64> = (0..30)
        .map(|i| -1.5 + 0.1 * i as f64 + 0.003 * (i * i) as f64)
        .collect();
    let rows: Vec<[f64; 4]> = ts.iter().map(|&t| [t, 0.0, 0.0, 0.0]).collect();
    let data = PointSet::from_rows(&rows, None).unwrap();
    let table = precompute_neighbors(&data, 3).unwrap();
    let batch: Vec<usize> = (0..data.len()).collect();
    let zero = manifold_loss(&batch, &data, &table, |x| Ok(vec![2.0 * x[0]])).unwrap();
    let unit = manifold_loss(&batch, &data, &table, |x| Ok(vec![x[0]])).unwrap();
    // Scale 2 against a unit-speed encoding leaves |Δt| per pair.
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..ts.len() {
        let mut d: Vec<(usize, f64)> = (0..ts.len())
            .filter(|&j| j != i)
            .map(|j| (j, (ts[i] - ts[j]).abs()))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for &(_, dt) in &d[..3] {
            sum += dt * dt;
            pairs += 1;
        }
    }
    let oracle = sum / pairs as f64;
    let rel = ((unit - oracle) / oracle).abs();
    Verdict {
        id: "A4",
        passed: zero <= 1e-12 && rel <= 1e-12,
        detail: format!("isometric loss {zero:.2e}; scale-1 loss {unit:.6e} vs oracle {oracle:.6e} (rel {rel:.1e})"),
    }
}

fn a5() -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in [1u64, 2, 3] {
        let data = generate(&DatasetSpec::new(DatasetKind::SwissRoll3d, 400, 0.0, seed))
            .unwrap()
            .data;
        let table = precompute_neighbors(&data, 5).unwrap();
        let pairs: Vec<(&[f64], &[f64])> = table
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
            .map(|(i, j)| (data.point(i), data.point(j)))
            .collect();
        let spread = |beta: f64| {
            let cfg = AeConfig {
                ambient_dim: 3,
                latent_dim: 2,
                beta,
                seed,
                ..AeConfig::default()
            };
            let ae = train_autoencoder(&data, &cfg).unwrap();
            bilipschitz_ratios(&pairs, |x| ae.encode(x))
                .unwrap()
                .spread()
        };
        let (with, without) = (spread(1.0), spread(0.0));
        let ratio = with / without;
        wins += usize::from(ratio <= 0.8);
        parts.push(format!("seed {seed}: {with:.3}/{without:.3} = {ratio:.3}"));
    }
    Verdict {
        id: "A5",
        passed: wins >= 2,
        detail: format!(
            "spread ratio <= 0.8 on {wins}/3 seeds ({})",
            parts.join(", ")
        ),
    }
}

fn a6(digits: &SuiteResult) -> Verdict {
    let (passed, detail) = suite_detail(digits, &["A6.cfm_loss_trend", "A6.ssim_trend"]);
    Verdict {
        id: "A6",
        passed,
        detail,
    }
}

fn a7(ablation: &SuiteResult) -> Verdict {
    let (passed, detail) = suite_detail(
        ablation,
        &["A7.full_lt_no_manifold_loss", "A7.full_lt_vanilla_fm"],
    );
    Verdict {
        id: "A7",
        passed,
        detail,
    }
}

struct Cfm<'a> {
    model: &'a FlowModel,
    z1: &'a PointSet,
    draws: &'a [CfmDraw],
}

impl Cfm<'_> {
    fn with(&self, p: &[f64]) -> lirf::Result<FlowModel> {
        let mut net = self.model.net().clone();
        net.set_weights(p)?;
        FlowModel::from_net(
            net,
            self.model.config().clone(),
            self.model.classes().to_vec(),
        )
    }
}

impl Objective for Cfm<'_> {
    fn num_params(&self) -> usize {
        self.model.net().num_params()
    }
    fn loss(&self, p: &[f64]) -> lirf::Result<f64> {
        Ok(cfm_loss_grad_with_draws(&self.with(p)?, self.z1, self.draws)?.0)
    }
    fn loss_and_grad(&self, p: &[f64]) -> lirf::Result<(f64, Vec<f64>)> {
        cfm_loss_grad_with_draws(&self.with(p)?, self.z1, self.draws)
    }
}

fn jitter(rng: &mut impl Rng, p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|v| v + rng.random_range(-0.05..0.05))
        .collect()
}

/// Worst gradcheck error over every architecture the suites and presets train.
fn gradchecks() -> (bool, f64, usize) {
    let mut rng = rng_from_seed(8);
    let (mut ok, mut worst, mut count) = (true, 0.0f64, 0);
    let aes = [
        AeConfig {
            ambient_dim: 3,
            latent_dim: 2,
            ..AeConfig::default()
        },
        DigitsSuiteConfig::default().ae,
        AblationSuiteConfig::default().ae,
    ];
    for cfg in aes {
        let data = random_set(&mut rng, 24, cfg.ambient_dim);
        let table = precompute_neighbors(&data, cfg.k_manifold).unwrap();
        let enc = Mlp::new(&cfg.encoder_dims(), cfg.activation, 1).unwrap();
        let dec = Mlp::new(&cfg.decoder_dims(), cfg.activation, 2).unwrap();
        let batch: Vec<usize> = (0..12).collect();
        for beta in [0.0, 1.0] {
            let obj = AeObjective {
                encoder: &enc,
                decoder: &dec,
                dataset: &data,
                table: (beta > 0.0).then_some(&table),
                batch: &batch,
                beta,
            };
            let mut p = enc.weights().to_vec();
            p.extend_from_slice(dec.weights());
            let r = grad_check(&obj, &jitter(&mut rng, &p), 1e-4, &mut rng).unwrap();
            ok &= r.passed;
            worst = worst.max(r.max_rel_error);
            count += 1;
        }
    }
    let flows = [
        CircleSuiteConfig::default().pipeline.flow,
        DigitsSuiteConfig::default().pipeline.flow,
        AblationSuiteConfig::default().pipeline.flow,
    ];
    for cfg in flows {
        for labelled in [false, true] {
            let n = 16;
            let mut z1 = random_set(&mut rng, n, cfg.latent_dim);
            if labelled {
                z1 = PointSet::from_flat(
                    cfg.latent_dim,
                    z1.as_flat().to_vec(),
                    Some((0..n as i64).map(|i| i % 3).collect()),
                )
                .unwrap();
            }
            let cfg = FlowConfig {
                label_conditioning: labelled,
                ..cfg.clone()
            };
            let classes = if labelled {
                z1.distinct_labels()
            } else {
                vec![]
            };
            let model = FlowModel::new(&cfg, classes).unwrap();
            let draws = draw_cfm(&mut rng, n, cfg.latent_dim);
            let obj = Cfm {
                model: &model,
                z1: &z1,
                draws: &draws,
            };
            let r = grad_check(
                &obj,
                &jitter(&mut rng, model.net().weights()),
                1e-4,
                &mut rng,
            )
            .unwrap();
            ok &= r.passed;
            worst = worst.max(r.max_rel_error);
            count += 1;
        }
    }
    (ok, worst, count)
}

fn euler_factors() -> Vec<f64> {
    let field = FnField {
        dim: 2,
        f: |_: f64, z: &[f64]| z.iter().map(|v| -v).collect(),
    };
    let z0 = [1.5, -0.5];
    let exact: Vec<f64> = z0.iter().map(|v| v * (-1.0f64).exp()).collect();
    let err = |n: usize| {
        let z = euler_integrate(&field, &z0, None, n).unwrap();
        euclidean_distance(&z, &exact).unwrap()
    };
    [50, 100, 200, 400]
        .iter()
        .map(|&n| err(n) / err(2 * n))
        .collect()
}

fn brute_oracles() -> (usize, usize, usize) {
    let mut rng = rng_from_seed(9);
    let mut bad = (0, 0, 0);
    for inst in 0..500 {
        let dim = [1, 2, 3, 8, 17, 32][inst % 6];
        let n = rng.random_range(1..100);
        let set = random_set(&mut rng, n, dim);
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let k = rng.random_range(1..8);
        let mut all: Vec<(usize, f64)> = (0..n)
            .map(|i| (i, euclidean_distance(&q, set.point(i)).unwrap()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        let got: Vec<(usize, f64)> = NeighborIndex::new(&set)
            .knn(&q, k, None)
            .unwrap()
            .iter()
            .map(|x| (x.index, x.distance))
            .collect();
        bad.0 += usize::from(got != all);

        let other = {
            let m = rng.random_range(1..60);
            random_set(&mut rng, m, dim)
        };
        let nearest = |p: &[f64], s: &PointSet| {
            (0..s.len())
                .map(|j| euclidean_distance(p, s.point(j)).unwrap())
                .fold(f64::INFINITY, f64::min)
        };
        let directed = |a: &PointSet, b: &PointSet| {
            (0..a.len())
                .map(|i| nearest(a.point(i), b))
                .fold(0.0, f64::max)
        };
        let oracle = directed(&set, &other).max(directed(&other, &set));
        bad.1 += usize::from(hausdorff_distance(&set, &other).unwrap() != oracle);

        let tau = [0.0, 0.2, 0.5, 1.0, f64::INFINITY][inst % 5];
        let keep: Vec<usize> = (0..other.len())
            .filter(|&i| nearest(other.point(i), &set) <= tau)
            .collect();
        let (kept, rejected) = filter_candidates(&other, &set, tau).unwrap();
        bad.2 += usize::from(kept != other.select(&keep) || rejected != other.len() - keep.len());
    }
    bad
}

fn a8() -> Verdict {
    let (grad_ok, worst, checks) = gradchecks();
    let factors = euler_factors();
    let euler_ok = factors.iter().all(|f| (1.8..=2.2).contains(f));
    let (knn, haus, filt) = brute_oracles();
    Verdict {
        id: "A8",
        passed: grad_ok && euler_ok && knn + haus + filt == 0,
        detail: format!(
            "{checks} gradchecks, worst rel err {worst:.2e}; Euler halving factors {:?}; mismatches on 500 instances: knn {knn}, hausdorff {haus}, filter {filt}",
            factors.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>()
        ),
    }
}

fn lirf(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lirf"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "lirf {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// The full command sequence once: returns the run directories it created.
fn cli_session(dir: &Path) -> Result<Vec<std::path::PathBuf>, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let fast = [
        "--set",
        "flow.epochs_initial=200",
        "--set",
        "flow.hidden_dims=[32,32]",
    ];
    lirf(
        dir,
        &[
            "gen-data", "--kind", "circle2d", "--n", "10", "--seed", "5", "--out", "c",
        ],
    )?;
    let mut args = vec![
        "run",
        "--data",
        "c/data.csv",
        "--latent-direct",
        "--reference",
        "c/manifold.csv",
        "--seed",
        "5",
        "--iterations",
        "4",
        "--output-dir",
        "r",
    ];
    args.extend(fast);
    let circle = dir.join(lirf(dir, &args)?.lines().last().unwrap_or_default());
    lirf(
        dir,
        &[
            "gen-data",
            "--kind",
            "two_moons",
            "--n",
            "60",
            "--seed",
            "6",
            "--ambient-dim",
            "6",
            "--holdout",
            "100",
            "--out",
            "m",
        ],
    )?;
    lirf(
        dir,
        &[
            "train-ae",
            "--data",
            "m/data.csv",
            "--latent-dim",
            "2",
            "--epochs",
            "40",
            "--seed",
            "6",
            "--out",
            "m",
        ],
    )?;
    let mut args = vec![
        "run",
        "--data",
        "m/data.csv",
        "--ae",
        "m/ae.ckpt",
        "--seed",
        "6",
        "--iterations",
        "3",
        "--output-dir",
        "r",
    ];
    args.extend(fast);
    let moons = dir.join(lirf(dir, &args)?.lines().last().unwrap_or_default());
    lirf(
        dir,
        &[
            "eval",
            "--run",
            &moons.to_string_lossy(),
            "--holdout",
            "m/holdout.csv",
            "--n",
            "200",
        ],
    )?;
    Ok(vec![circle, moons])
}

fn files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn a9(root: &Path) -> (Verdict, Vec<std::path::PathBuf>) {
    let runs: Vec<_> = ["one", "two"]
        .iter()
        .map(|r| cli_session(&root.join(r)))
        .collect();
    let (first, second) = match (&runs[0], &runs[1]) {
        (Ok(a), Ok(_)) => (root.join("one"), a.clone()),
        (Err(e), _) | (_, Err(e)) => {
            let v = Verdict {
                id: "A9",
                passed: false,
                detail: format!("command failed: {e}"),
            };
            return (v, Vec::new());
        }
    };
    let names = files(&first);
    let other = files(&root.join("two"));
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in &names {
        let s = name.to_string_lossy();
        // Wall-clock timings are the only intended nondeterminism.
        if s.ends_with("timings.txt")
            || !(s.ends_with(".csv") || s.ends_with(".ckpt") || s.ends_with(".toml"))
        {
            continue;
        }
        compared += 1;
        if fs::read(first.join(name)).ok() != fs::read(root.join("two").join(name)).ok() {
            differing.push(s.into_owned());
        }
    }
    let v = Verdict {
        id: "A9",
        passed: names == other && differing.is_empty() && compared > 0,
        detail: format!(
            "{compared} CSV/checkpoint/TOML files compared across two full command sequences; differing: {:?}",
            differing
        ),
    };
    (v, second)
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut verdicts = Vec::new();
    let timed = |f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        report(&v, t.elapsed().as_secs_f64());
        v
    };
    verdicts.push(timed(&mut a2));
    verdicts.push(timed(&mut a4));
    verdicts.push(timed(&mut a8));
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut cli_runs = Vec::new();
    verdicts.push(timed(&mut || {
        let (v, runs) = a9(tmp.path());
        cli_runs = runs;
        v
    }));
    verdicts.push(timed(&mut a5));
    let t = Instant::now();
    let circle = suite_convergence_circle();
    println!("# circle suite {:.1}s", t.elapsed().as_secs_f64());
    verdicts.push(timed(&mut || a1(&circle)));
    let t = Instant::now();
    let digits = suite_trend_digits();
    println!("# digits suite {:.1}s", t.elapsed().as_secs_f64());
    verdicts.push(timed(&mut || a6(&digits)));
    let t = Instant::now();
    let ablation = suite_ablation_grid();
    println!("# ablation suite {:.1}s", t.elapsed().as_secs_f64());
    verdicts.push(timed(&mut || a7(&ablation)));
    let dirs: Vec<&Path> = cli_runs.iter().map(|p| p.as_path()).collect();
    verdicts.push(timed(&mut || a3(&[&circle, &digits, &ablation], &dirs)));

    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        println!("{} {}", v.id, if v.passed { "PASS" } else { "FAIL" });
    }
    let passed = verdicts.iter().filter(|v| v.passed).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
