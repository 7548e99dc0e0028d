//! Autoencoder trained with reconstruction error plus a neighbour
//! distance-preservation penalty, frozen after training.
//!
//! The penalty for a batch `B` with precomputed same-label neighbours `N(i)` is
//!
//! ```text
//! 1/(|B|·k) Σ_{i∈B} Σ_{j∈N(i)} ( √(D/d)·‖x_i − x_j‖ − ‖E(x_i) − E(x_j)‖ )²
//! ```
//!
//! and the reconstruction term is `‖D(E(x)) − x‖² / D` averaged over the batch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    adam_step, par_accumulate, Activation, AdamConfig, Mlp, MlpCheckpoint, Objective, OptimState,
    Trace,
};
use crate::error::{LirfError, Result};
use crate::geometry::{dist_unchecked, NeighborIndex, PointSet};
use crate::rng::{checksum_f64, rng_from_seed, seed_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub k_manifold: usize,
    pub beta: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Clamp decoder outputs to `[0, 1]` (image data).
    pub clamp_output: bool,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 2,
            latent_dim: 1,
            k_manifold: 5,
            beta: 1.0,
            hidden_dims: vec![64, 64],
            activation: Activation::Tanh,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            clamp_output: false,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LirfError::InvalidConfig(m));
        if self.ambient_dim == 0 || self.latent_dim == 0 {
            return bad("autoencoder dimensions must be positive".into());
        }
        if self.latent_dim > self.ambient_dim {
            return bad(format!(
                "latent dim {} exceeds ambient dim {}",
                self.latent_dim, self.ambient_dim
            ));
        }
        if self.k_manifold == 0 {
            return bad("k_manifold must be at least 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!(
                "beta must be finite and nonnegative, got {}",
                self.beta
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.ambient_dim];
        d.extend(&self.hidden_dims);
        d.push(self.latent_dim);
        d
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_dim];
        d.extend(self.hidden_dims.iter().rev());
        d.push(self.ambient_dim);
        d
    }

    /// `√(D/d)`.
    pub fn distance_scale(&self) -> f64 {
        (self.ambient_dim as f64 / self.latent_dim as f64).sqrt()
    }
}

/// For each point, the indices of its `k` nearest same-label points (self excluded).
pub type NeighborTable = Vec<Vec<usize>>;

/// Same-label k-NN in ambient space, computed once before training.
///
/// Unlabelled data is treated as one class.
pub fn precompute_neighbors(dataset: &PointSet, k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(LirfError::InvalidConfig("k must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(LirfError::Empty("dataset"));
    }
    let labeled;
    let data = if dataset.is_labeled() {
        dataset
    } else {
        labeled = dataset.with_uniform_label(0);
        &labeled
    };
    let labels = data.labels().expect("labelled");
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&label, &size)) = counts.iter().find(|(_, &c)| c <= k) {
        return Err(LirfError::ClassTooSmall {
            label,
            size,
            needed: k + 1,
        });
    }
    let index = NeighborIndex::new(data);
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let found = index.knn(data.point(i), k + 1, Some(labels[i]))?;
            let mut row: Vec<usize> = found.iter().map(|n| n.index).filter(|&j| j != i).collect();
            row.truncate(k);
            Ok(row)
        })
        .collect()
}

/// The neighbour distance-preservation penalty for a batch.
///
/// `encode` maps ambient points to latent points; the scale `√(D/d)` uses the
/// dataset dimension and the encoder output dimension.
pub fn manifold_loss<F>(
    batch: &[usize],
    dataset: &PointSet,
    table: &NeighborTable,
    encode: F,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if batch.is_empty() {
        return Err(LirfError::Empty("batch"));
    }
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut get = |i: usize| -> Result<Vec<f64>> {
        if let Some(z) = cache.get(&i) {
            return Ok(z.clone());
        }
        let z = encode(dataset.point(i))?;
        cache.insert(i, z.clone());
        Ok(z)
    };
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut scale = None;
    for &i in batch {
        let zi = get(i)?;
        let s = *scale.get_or_insert_with(|| (dataset.dim() as f64 / zi.len() as f64).sqrt());
        for &j in table.get(i).ok_or(LirfError::Empty("neighbor table row"))? {
            let zj = get(j)?;
            if zj.len() != zi.len() {
                return Err(LirfError::DimensionMismatch {
                    expected: zi.len(),
                    got: zj.len(),
                });
            }
            let r =
                s * dist_unchecked(dataset.point(i), dataset.point(j)) - dist_unchecked(&zi, &zj);
            total += r * r;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok(total / pairs as f64)
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub manifold: f64,
}

/// The joint training objective over one batch, with parameters laid out as
/// `[encoder weights | decoder weights]`.
pub struct AeObjective<'a> {
    pub encoder: &'a Mlp,
    pub decoder: &'a Mlp,
    pub dataset: &'a PointSet,
    pub table: Option<&'a NeighborTable>,
    pub batch: &'a [usize],
    pub beta: f64,
}

impl AeObjective<'_> {
    fn split(&self, params: &[f64]) -> Result<(Mlp, Mlp)> {
        let ne = self.encoder.num_params();
        if params.len() != ne + self.decoder.num_params() {
            return Err(LirfError::DimensionMismatch {
                expected: ne + self.decoder.num_params(),
                got: params.len(),
            });
        }
        let mut e = self.encoder.clone();
        let mut d = self.decoder.clone();
        e.set_weights(&params[..ne])?;
        d.set_weights(&params[ne..])?;
        Ok((e, d))
    }

    /// Loss terms and gradient for the given encoder/decoder weights.
    pub fn evaluate(&self, encoder: &Mlp, decoder: &Mlp) -> Result<(LossParts, Vec<f64>)> {
        let n = self.batch.len();
        if n == 0 {
            return Err(LirfError::Empty("batch"));
        }
        let dim_x = self.dataset.dim() as f64;
        let use_manifold = self.beta > 0.0 && self.table.is_some();

        // Every point whose code enters the loss, in ascending index order.
        let mut needed: Vec<usize> = self.batch.to_vec();
        if use_manifold {
            let table = self.table.unwrap();
            for &i in self.batch {
                needed.extend_from_slice(&table[i]);
            }
        }
        needed.sort_unstable();
        needed.dedup();
        let slot: BTreeMap<usize, usize> =
            needed.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        let traces: Vec<Trace> = needed
            .par_iter()
            .map(|&i| encoder.forward_trace(self.dataset.point(i)))
            .collect::<Result<_>>()?;
        let latent_dim = encoder.output_dim();
        let mut dz = vec![vec![0.0; latent_dim]; needed.len()];

        let mut manifold = 0.0;
        if use_manifold {
            let table = self.table.unwrap();
            let s = (dim_x / latent_dim as f64).sqrt();
            let pairs: usize = self.batch.iter().map(|&i| table[i].len()).sum();
            let w = self.beta / pairs.max(1) as f64;
            for &i in self.batch {
                let si = slot[&i];
                for &j in &table[i] {
                    let sj = slot[&j];
                    let zi = traces[si].output();
                    let zj = traces[sj].output();
                    let dzn = dist_unchecked(zi, zj);
                    let r = s * dist_unchecked(self.dataset.point(i), self.dataset.point(j)) - dzn;
                    manifold += r * r;
                    if dzn > 0.0 {
                        let c = -2.0 * r * w / dzn;
                        for c_ in 0..latent_dim {
                            let g = c * (zi[c_] - zj[c_]);
                            dz[si][c_] += g;
                            dz[sj][c_] -= g;
                        }
                    }
                }
            }
            manifold /= pairs.max(1) as f64;
        }

        // Reconstruction through the decoder, chunked for a fixed reduction order.
        const CHUNK: usize = 8;
        let n_dec = decoder.num_params();
        type ChunkOut = (f64, Vec<f64>, Vec<(usize, Vec<f64>)>);
        let chunks: Vec<ChunkOut> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; n_dec];
                let mut loss = 0.0;
                let mut dzs = Vec::new();
                for b in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let i = self.batch[b];
                    let si = slot[&i];
                    let tr = decoder.forward_trace(traces[si].output())?;
                    let x = self.dataset.point(i);
                    let resid: Vec<f64> = tr.output().iter().zip(x).map(|(a, b)| a - b).collect();
                    loss += resid.iter().map(|r| r * r).sum::<f64>() / dim_x;
                    let d_out: Vec<f64> =
                        resid.iter().map(|r| 2.0 * r / (dim_x * n as f64)).collect();
                    dzs.push((si, decoder.backward(&tr, &d_out, &mut g)));
                }
                Ok((loss, g, dzs))
            })
            .collect::<Result<_>>()?;
        let mut reconstruction = 0.0;
        let mut grad_dec = vec![0.0; n_dec];
        for (l, g, dzs) in chunks {
            reconstruction += l;
            for (a, b) in grad_dec.iter_mut().zip(&g) {
                *a += b;
            }
            for (si, d) in dzs {
                for (a, b) in dz[si].iter_mut().zip(&d) {
                    *a += b;
                }
            }
        }
        reconstruction /= n as f64;

        let (_, grad_enc) = par_accumulate(needed.len(), encoder.num_params(), |s, g| {
            if dz[s].iter().any(|&v| v != 0.0) {
                encoder.backward(&traces[s], &dz[s], g);
            }
            Ok(0.0)
        })?;

        let mut grad = grad_enc;
        grad.extend_from_slice(&grad_dec);
        let total = reconstruction + self.beta * manifold;
        if !total.is_finite() {
            return Err(LirfError::NonFinite("autoencoder loss".into()));
        }
        Ok((
            LossParts {
                total,
                reconstruction,
                manifold,
            },
            grad,
        ))
    }
}

impl Objective for AeObjective<'_> {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        let (e, d) = self.split(params)?;
        Ok(self.evaluate(&e, &d)?.0.total)
    }

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (e, d) = self.split(params)?;
        let (parts, g) = self.evaluate(&e, &d)?;
        Ok((parts.total, g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub manifold: f64,
}

/// A trained encoder/decoder pair. Weights cannot be modified after training;
/// [`FrozenAutoencoder::verify_frozen`] re-checks the checksum taken at freeze time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAutoencoder {
    encoder: Mlp,
    decoder: Mlp,
    config: AeConfig,
    loss_curve: Vec<EpochLoss>,
    final_reconstruction: f64,
    checksum: u64,
}

fn weights_checksum(e: &Mlp, d: &Mlp) -> u64 {
    checksum_f64(e.weights()) ^ checksum_f64(d.weights()).rotate_left(1)
}

/// Trains encoder and decoder on `dataset` and freezes them.
pub fn train_autoencoder(dataset: &PointSet, config: &AeConfig) -> Result<FrozenAutoencoder> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LirfError::Empty("dataset"));
    }
    if dataset.dim() != config.ambient_dim {
        return Err(LirfError::DimensionMismatch {
            expected: config.ambient_dim,
            got: dataset.dim(),
        });
    }
    let table = if config.beta > 0.0 {
        Some(precompute_neighbors(dataset, config.k_manifold)?)
    } else {
        None
    };
    let mut encoder = Mlp::new(
        &config.encoder_dims(),
        config.activation,
        seed_for(config.seed, "encoder"),
    )?;
    let mut decoder = Mlp::new(
        &config.decoder_dims(),
        config.activation,
        seed_for(config.seed, "decoder"),
    )?;
    let ne = encoder.num_params();
    let mut params: Vec<f64> = encoder
        .weights()
        .iter()
        .chain(decoder.weights())
        .copied()
        .collect();
    let mut state = OptimState::new(
        params.len(),
        AdamConfig::with_learning_rate(config.learning_rate),
    );
    let mut rng = rng_from_seed(seed_for(config.seed, "ae-shuffle"));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut t, mut r, mut m, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let objective = AeObjective {
                encoder: &encoder,
                decoder: &decoder,
                dataset,
                table: table.as_ref(),
                batch,
                beta: config.beta,
            };
            let (parts, grad) =
                objective
                    .evaluate(&encoder, &decoder)
                    .map_err(|e| LirfError::Diverged {
                        epoch,
                        reason: e.to_string(),
                    })?;
            adam_step(&mut params, &grad, &mut state).map_err(|e| LirfError::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
            encoder.set_weights(&params[..ne])?;
            decoder.set_weights(&params[ne..])?;
            t += parts.total;
            r += parts.reconstruction;
            m += parts.manifold;
            nb += 1;
        }
        let nb = nb as f64;
        let rec = EpochLoss {
            epoch,
            total: t / nb,
            reconstruction: r / nb,
            manifold: m / nb,
        };
        if !rec.total.is_finite() {
            return Err(LirfError::Diverged {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        loss_curve.push(rec);
    }

    let mut ae = FrozenAutoencoder {
        checksum: weights_checksum(&encoder, &decoder),
        encoder,
        decoder,
        config: config.clone(),
        loss_curve,
        final_reconstruction: 0.0,
    };
    ae.final_reconstruction = ae.reconstruction_mse(dataset)?;
    Ok(ae)
}

impl FrozenAutoencoder {
    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn loss_curve(&self) -> &[EpochLoss] {
        &self.loss_curve
    }

    /// Per-dimension reconstruction MSE over the training set, recorded at freeze time.
    pub fn final_reconstruction(&self) -> f64 {
        self.final_reconstruction
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn verify_frozen(&self) -> Result<()> {
        let actual = weights_checksum(&self.encoder, &self.decoder);
        if actual != self.checksum {
            return Err(LirfError::FrozenModified {
                expected: self.checksum,
                actual,
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(x)
    }

    /// Decoder output, clamped to `[0, 1]` when configured for image data.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.decoder.forward(z)?;
        if self.config.clamp_output {
            for v in &mut x {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(x)
    }

    /// Mean over points of `‖D(E(x)) − x‖² / D`, using the unclamped decoder.
    pub fn reconstruction_mse(&self, data: &PointSet) -> Result<f64> {
        if data.is_empty() {
            return Err(LirfError::Empty("dataset"));
        }
        let errs: Vec<f64> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x = data.point(i);
                let y = self.decoder.forward(&self.encoder.forward(x)?)?;
                Ok(y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
            })
            .collect::<Result<_>>()?;
        Ok(errs.iter().sum::<f64>() / data.len() as f64)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let ck = AeCheckpoint {
            format: AE_FORMAT.into(),
            config: self.config.clone(),
            final_reconstruction: self.final_reconstruction,
            checksum: format!("{:016x}", self.checksum),
            encoder: (&self.encoder).into(),
            decoder: (&self.decoder).into(),
        };
        toml::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        let ck: AeCheckpoint = toml::from_str(s)
            .map_err(|e| LirfError::format("autoencoder checkpoint", e.to_string()))?;
        if ck.format != AE_FORMAT {
            return Err(LirfError::format(
                "autoencoder checkpoint",
                format!("format tag `{}`, expected `{AE_FORMAT}`", ck.format),
            ));
        }
        let checksum = u64::from_str_radix(&ck.checksum, 16)
            .map_err(|e| LirfError::format("autoencoder checkpoint", e.to_string()))?;
        let ae = FrozenAutoencoder {
            encoder: ck.encoder.into_mlp()?,
            decoder: ck.decoder.into_mlp()?,
            config: ck.config,
            loss_curve: Vec::new(),
            final_reconstruction: ck.final_reconstruction,
            checksum,
        };
        ae.verify_frozen()?;
        Ok(ae)
    }

    /// Loss curve as CSV (`epoch,total,reconstruction,manifold`).
    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("epoch,total,reconstruction,manifold\n");
        for e in &self.loss_curve {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                crate::geometry::fmt_f64(e.total),
                crate::geometry::fmt_f64(e.reconstruction),
                crate::geometry::fmt_f64(e.manifold)
            ));
        }
        s
    }
}

pub const AE_FORMAT: &str = "lirf-ae/1";

#[derive(Debug, Serialize, Deserialize)]
struct AeCheckpoint {
    format: String,
    final_reconstruction: f64,
    checksum: String,
    config: AeConfig,
    encoder: MlpCheckpoint,
    decoder: MlpCheckpoint,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_neighbors() {
        let d = PointSet::from_rows(&[[0.0], [1.0], [3.0]], Some(vec![0, 0, 0])).unwrap();
        let t = precompute_neighbors(&d, 1).unwrap();
        assert_eq!(t, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn interleaved_labels_never_cross() {
        let rows: Vec<[f64; 1]> = (0..20).map(|i| [i as f64]).collect();
        let labels: Vec<i64> = (0..20).map(|i| i % 2).collect();
        let d = PointSet::from_rows(&rows, Some(labels.clone())).unwrap();
        let t = precompute_neighbors(&d, 3).unwrap();
        for (i, row) in t.iter().enumerate() {
            assert_eq!(row.len(), 3);
            assert!(row.iter().all(|&j| labels[j] == labels[i] && j != i));
        }
    }

    #[test]
    fn small_class_is_named() {
        let d = PointSet::from_rows(&[[0.0], [1.0], [2.0], [3.0]], Some(vec![0, 0, 0, 7])).unwrap();
        let err = precompute_neighbors(&d, 1).unwrap_err();
        assert!(
            matches!(
                err,
                LirfError::ClassTooSmall {
                    label: 7,
                    size: 1,
                    needed: 2
                }
            ),
            "{err}"
        );
    }

    fn axis_data() -> PointSet {
        let a = [0.0, 0.4, 1.5, 2.0, 3.7, 4.1];
        let rows: Vec<[f64; 4]> = a.iter().map(|&v| [v, 0.0, 0.0, 0.0]).collect();
        PointSet::from_rows(&rows, None).unwrap()
    }

    #[test]
    fn constructed_isometry_has_zero_loss() {
        let d = axis_data();
        let t = precompute_neighbors(&d, 2).unwrap();
        let batch: Vec<usize> = (0..d.len()).collect();
        let l = manifold_loss(&batch, &d, &t, |x| Ok(vec![2.0 * x[0]])).unwrap();
        assert!(l <= 1e-12, "{l}");
    }

    #[test]
    fn unit_scale_matches_direct_loop() {
        let d = axis_data();
        let t = precompute_neighbors(&d, 2).unwrap();
        let batch: Vec<usize> = (0..d.len()).collect();
        let l = manifold_loss(&batch, &d, &t, |x| Ok(vec![x[0]])).unwrap();
        let mut oracle = 0.0;
        for (i, row) in t.iter().enumerate() {
            for &j in row {
                let delta = d.point(i)[0] - d.point(j)[0];
                oracle += delta * delta;
            }
        }
        oracle /= (d.len() * 2) as f64;
        assert!(((l - oracle) / oracle).abs() <= 1e-12);
    }

    #[test]
    fn single_term_zero() {
        let d = PointSet::from_rows(&[[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]], None).unwrap();
        let t = vec![vec![1], vec![0]];
        // Latent distance sqrt(D/d) = 2 for D = 4, d = 1.
        let l = manifold_loss(&[0], &d, &t, |x| Ok(vec![2.0 * x[0]])).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn batch_order_invariance() {
        let d = axis_data();
        let t = precompute_neighbors(&d, 2).unwrap();
        let enc = |x: &[f64]| Ok(vec![x[0].sin() * 3.0]);
        let a = manifold_loss(&[0, 1, 2, 3, 4, 5], &d, &t, enc).unwrap();
        let b = manifold_loss(&[5, 3, 1, 0, 4, 2], &d, &t, enc).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn config_validation() {
        let mut c = AeConfig::default();
        assert!(c.validate().is_ok());
        c.latent_dim = 3;
        assert!(c.validate().is_err());
        c.latent_dim = 1;
        c.beta = -1.0;
        assert!(c.validate().is_err());
    }
}
