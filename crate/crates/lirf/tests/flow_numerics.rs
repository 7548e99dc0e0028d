use lirf::approximator::{grad_check, Activation, Mlp, Objective};
use lirf::flow::{
    cfm_loss_grad_with_draws, cfm_loss_with_draws, draw_cfm, euler_integrate, sample_flow,
    train_flow, FlowConfig, FlowModel, FnField,
};
use lirf::geometry::PointSet;
use lirf::rng::rng_from_seed;
use rand::Rng;

fn small_config(act: Activation) -> FlowConfig {
    FlowConfig {
        latent_dim: 2,
        hidden_dims: vec![12, 12],
        activation: act,
        ..FlowConfig::default()
    }
}

fn anchors(n: usize, labelled: bool, seed: u64) -> PointSet {
    let mut rng = rng_from_seed(seed);
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    PointSet::from_rows(
        &rows,
        labelled.then(|| (0..n as i64).map(|i| i % 3).collect()),
    )
    .unwrap()
}

struct CfmObjective<'a> {
    model: &'a FlowModel,
    z1: &'a PointSet,
    draws: &'a [lirf::flow::CfmDraw],
}

impl CfmObjective<'_> {
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

impl Objective for CfmObjective<'_> {
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

#[test]
fn cfm_gradient_check() {
    let mut rng = rng_from_seed(51);
    for act in [Activation::Tanh, Activation::Gelu] {
        for labelled in [false, true] {
            let z1 = anchors(16, labelled, 2);
            let cfg = FlowConfig {
                label_conditioning: labelled,
                ..small_config(act)
            };
            let classes = if labelled {
                z1.distinct_labels()
            } else {
                vec![]
            };
            let model = FlowModel::new(&cfg, classes).unwrap();
            let draws = draw_cfm(&mut rng, z1.len(), 2);
            let obj = CfmObjective {
                model: &model,
                z1: &z1,
                draws: &draws,
            };
            let mut p = model.net().weights().to_vec();
            for v in p.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            let r = grad_check(&obj, &p, 1e-4, &mut rng).unwrap();
            assert!(r.passed, "{act:?} labelled {labelled}: {r:?}");
        }
    }
}

#[test]
fn cfm_loss_matches_straight_line_evaluation() {
    let mut rng = rng_from_seed(52);
    let z1 = anchors(20, false, 3);
    let model = FlowModel::new(&small_config(Activation::Tanh), vec![]).unwrap();
    let draws = draw_cfm(&mut rng, z1.len(), 2);
    let (loss, _) = cfm_loss_grad_with_draws(&model, &z1, &draws).unwrap();
    let net: &Mlp = model.net();
    let mut total = 0.0;
    for (i, d) in draws.iter().enumerate() {
        let z = z1.point(i);
        let zt: Vec<f64> = (0..2).map(|c| d.t * z[c] + (1.0 - d.t) * d.z0[c]).collect();
        let v = net.forward(&[zt[0], zt[1], d.t]).unwrap();
        total += (0..2)
            .map(|c| (v[c] - (z[c] - d.z0[c])).powi(2))
            .sum::<f64>();
    }
    let oracle = total / z1.len() as f64;
    assert!(
        ((loss - oracle) / oracle).abs() <= 1e-13,
        "{loss} vs {oracle}"
    );
    let generic = cfm_loss_with_draws(&model, &z1, None, &draws).unwrap();
    assert!(((generic - oracle) / oracle).abs() <= 1e-13);
}

#[test]
fn euler_first_order_on_linear_field() {
    let field = FnField {
        dim: 2,
        f: |_: f64, z: &[f64]| z.iter().map(|v| -v).collect(),
    };
    let z0 = [1.5, -0.5];
    let exact: Vec<f64> = z0.iter().map(|v| v * (-1.0f64).exp()).collect();
    let err = |n: usize| {
        let z = euler_integrate(&field, &z0, None, n).unwrap();
        let closed = (1.0 - 1.0 / n as f64).powi(n as i32);
        for (a, b) in z.iter().zip(&z0) {
            assert!((a - closed * b).abs() <= 1e-12 * b.abs());
        }
        z.iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (e10, e100, e1000) = (err(10), err(100), err(1000));
    assert!(e10 > e100 && e100 > e1000);
    let r1 = e10 / e100;
    let r2 = e100 / e1000;
    assert!(
        (8.0..12.0).contains(&r1) && (9.0..11.0).contains(&r2),
        "{r1} {r2}"
    );
    for n in [50, 100, 200, 400] {
        let factor = err(n) / err(2 * n);
        assert!((1.8..=2.2).contains(&factor), "N = {n}: {factor}");
    }
}

#[test]
fn lone_target_collapses() {
    let target = [1.5, -0.75];
    let z1 = PointSet::from_rows(&vec![target; 64], None).unwrap();
    let cfg = FlowConfig {
        hidden_dims: vec![32, 32],
        epochs_initial: 400,
        seed: 7,
        ..small_config(Activation::Gelu)
    };
    let model = train_flow(&z1, &cfg, None).unwrap();
    let s = sample_flow(&model, 400, &mut rng_from_seed(8)).unwrap();
    let mean: Vec<f64> = (0..2)
        .map(|c| s.iter().map(|p| p[c]).sum::<f64>() / s.len() as f64)
        .collect();
    let off = ((mean[0] - target[0]).powi(2) + (mean[1] - target[1]).powi(2)).sqrt();
    assert!(off <= 0.2, "sample mean {mean:?}");
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let z1 = anchors(40, true, 4);
    let cfg = FlowConfig {
        epochs_initial: 15,
        label_conditioning: true,
        seed: 3,
        ..small_config(Activation::Gelu)
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let m = train_flow(&z1, &cfg, None).unwrap();
                let s = sample_flow(&m, 30, &mut rng_from_seed(1)).unwrap();
                (m.to_checkpoint_string(), s.to_csv_string())
            })
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}
