//! Synthetic manifolds with known ground truth, a synthetic 8×8 digit set,
//! IDX image ingestion and stratified splitting.

use std::f64::consts::PI;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LirfError, Result};
use crate::geometry::PointSet;
use crate::rng::{module_rng, ChaCha8Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Circle2d,
    TwoMoons,
    SwissRoll3d,
    GaussianMixture,
    DigitBlobs,
    DigitsIdx,
    Csv,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 7] = [
        DatasetKind::Circle2d,
        DatasetKind::TwoMoons,
        DatasetKind::SwissRoll3d,
        DatasetKind::GaussianMixture,
        DatasetKind::DigitBlobs,
        DatasetKind::DigitsIdx,
        DatasetKind::Csv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Circle2d => "circle2d",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::SwissRoll3d => "swiss_roll3d",
            DatasetKind::GaussianMixture => "gaussian_mixture",
            DatasetKind::DigitBlobs => "digit_blobs",
            DatasetKind::DigitsIdx => "digits_idx",
            DatasetKind::Csv => "csv",
        }
    }

    /// Image kinds have pixels in `[0, 1]`.
    pub fn is_image(self) -> bool {
        matches!(self, DatasetKind::DigitBlobs | DatasetKind::DigitsIdx)
    }

    fn native_dim(self) -> Option<usize> {
        match self {
            DatasetKind::Circle2d | DatasetKind::TwoMoons | DatasetKind::GaussianMixture => Some(2),
            DatasetKind::SwissRoll3d => Some(3),
            DatasetKind::DigitBlobs => Some(64),
            DatasetKind::DigitsIdx | DatasetKind::Csv => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = LirfError;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = DatasetKind::ALL.iter().map(|k| k.name()).collect();
                LirfError::InvalidConfig(format!(
                    "unknown dataset kind `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few_shot_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
    /// IDX label file; derived from `source_path` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    /// Embeds a low-dimensional synthetic set isometrically into this many dimensions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ambient_dim: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Circle2d,
            n_points: 200,
            noise_sigma: 0.0,
            seed: 0,
            few_shot_per_class: None,
            source_path: None,
            labels_path: None,
            ambient_dim: None,
        }
    }
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n_points: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            kind,
            n_points,
            noise_sigma,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(LirfError::InvalidConfig(
                "n_points must be at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(LirfError::InvalidConfig(format!(
                "noise_sigma must be a nonnegative number, got {}",
                self.noise_sigma
            )));
        }
        if self.few_shot_per_class == Some(0) {
            return Err(LirfError::InvalidConfig(
                "few_shot_per_class must be at least 1".into(),
            ));
        }
        if let (Some(d), Some(native)) = (self.ambient_dim, self.kind.native_dim()) {
            if d < native || self.kind.is_image() {
                return Err(LirfError::InvalidConfig(format!(
                    "ambient_dim {d} not allowed for {} (native dim {native})",
                    self.kind
                )));
            }
        }
        if matches!(self.kind, DatasetKind::DigitsIdx | DatasetKind::Csv)
            && self.source_path.is_none()
        {
            return Err(LirfError::InvalidConfig(format!(
                "{} needs a source path",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: PointSet,
    /// Noise-free dense sample of the generating manifold, synthetic kinds only.
    pub dense_manifold: Option<PointSet>,
}

/// Points per dense manifold sample (at least this many).
pub const DENSE_MIN: usize = 2000;

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = module_rng(spec.seed, "dataset");
    let n = spec.n_points;
    let (mut data, dense) = match spec.kind {
        DatasetKind::Circle2d => {
            let rows: Vec<[f64; 2]> = (0..n)
                .map(|_| {
                    let th = rng.random_range(0.0..2.0 * PI);
                    [th.cos(), th.sin()]
                })
                .collect();
            (PointSet::from_rows(&rows, None)?, Some(circle_dense(4096)?))
        }
        DatasetKind::TwoMoons => {
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let l = (i % 2) as i64;
                rows.push(moon_point(l, rng.random_range(0.0..PI)));
                labels.push(l);
            }
            let mut dense_rows = Vec::new();
            let mut dense_labels = Vec::new();
            for l in 0..2 {
                for j in 0..DENSE_MIN {
                    dense_rows.push(moon_point(l, PI * j as f64 / (DENSE_MIN - 1) as f64));
                    dense_labels.push(l);
                }
            }
            (
                PointSet::from_rows(&rows, Some(labels))?,
                Some(PointSet::from_rows(&dense_rows, Some(dense_labels))?),
            )
        }
        DatasetKind::SwissRoll3d => {
            let rows: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    let t = rng.random_range(1.5 * PI..4.5 * PI);
                    let h = rng.random_range(0.0..10.0);
                    swiss_point(t, h)
                })
                .collect();
            let (nt, nh) = (200, 20);
            let dense: Vec<[f64; 3]> = (0..nt)
                .flat_map(|i| {
                    let t = 1.5 * PI + 3.0 * PI * i as f64 / (nt - 1) as f64;
                    (0..nh).map(move |j| swiss_point(t, 10.0 * j as f64 / (nh - 1) as f64))
                })
                .collect();
            (
                PointSet::from_rows(&rows, None)?,
                Some(PointSet::from_rows(&dense, None)?),
            )
        }
        DatasetKind::GaussianMixture => {
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let m = rng.random_range(0..MIXTURE_MODES);
                let c = mixture_center(m);
                let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                rows.push([
                    c[0] + spec.noise_sigma * e[0],
                    c[1] + spec.noise_sigma * e[1],
                ]);
                labels.push(m as i64);
            }
            (PointSet::from_rows(&rows, Some(labels))?, None)
        }
        DatasetKind::DigitBlobs => (digit_blobs(n, spec.noise_sigma, &mut rng)?, None),
        DatasetKind::DigitsIdx => {
            let images = spec.source_path.as_deref().expect("validated");
            let labels = match &spec.labels_path {
                Some(p) => p.clone(),
                None => derive_labels_path(images)?,
            };
            let mut data = load_idx_pair(images, &labels)?;
            if spec.few_shot_per_class.is_none() && data.len() > n {
                data = data.select(&(0..n).collect::<Vec<_>>());
            }
            (data, None)
        }
        DatasetKind::Csv => {
            let mut data = PointSet::load_csv(spec.source_path.as_deref().expect("validated"))?;
            if spec.few_shot_per_class.is_none() && data.len() > n {
                data = data.select(&(0..n).collect::<Vec<_>>());
            }
            (data, None)
        }
    };
    // Mixture noise is its component spread; images add their own pixel noise.
    let additive = matches!(
        spec.kind,
        DatasetKind::Circle2d | DatasetKind::TwoMoons | DatasetKind::SwissRoll3d
    );
    let mut dense = dense;
    if let Some(d) = spec.ambient_dim {
        let lift = isometric_lift(data.dim(), d, spec.seed)?;
        data = lift.apply(&data)?;
        dense = dense.map(|m| lift.apply(&m)).transpose()?;
    }
    let data = add_noise(data, spec.noise_sigma, additive, &mut rng)?;
    let data = match spec.few_shot_per_class {
        Some(k) => few_shot(&data, k, spec.seed)?,
        None => data,
    };
    Ok(Dataset {
        data,
        dense_manifold: dense,
    })
}

fn add_noise(data: PointSet, sigma: f64, enabled: bool, rng: &mut ChaCha8Rng) -> Result<PointSet> {
    if !enabled || sigma == 0.0 {
        return Ok(data);
    }
    let flat: Vec<f64> = data
        .as_flat()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    PointSet::from_flat(data.dim(), flat, data.labels().map(<[i64]>::to_vec))
}

fn circle_dense(n: usize) -> Result<PointSet> {
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let th = 2.0 * PI * i as f64 / n as f64;
            [th.cos(), th.sin()]
        })
        .collect();
    PointSet::from_rows(&rows, None)
}

fn moon_point(label: i64, t: f64) -> [f64; 2] {
    if label == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

pub fn swiss_point(t: f64, h: f64) -> [f64; 3] {
    [t * t.cos(), h, t * t.sin()]
}

pub const MIXTURE_MODES: usize = 8;
pub const MIXTURE_RADIUS: f64 = 4.0;

pub fn mixture_center(m: usize) -> [f64; 2] {
    let a = 2.0 * PI * m as f64 / MIXTURE_MODES as f64;
    [MIXTURE_RADIUS * a.cos(), MIXTURE_RADIUS * a.sin()]
}

/// A `D × d` matrix with orthonormal columns, seeded.
#[derive(Debug, Clone, PartialEq)]
pub struct IsometricLift {
    from: usize,
    to: usize,
    /// Column-major: column `j` is `basis[j*to..(j+1)*to]`.
    basis: Vec<f64>,
}

pub fn isometric_lift(from: usize, to: usize, seed: u64) -> Result<IsometricLift> {
    if to < from {
        return Err(LirfError::InvalidConfig(format!(
            "cannot lift {from} dims into {to}"
        )));
    }
    let mut rng = module_rng(seed, "ambient-lift");
    let mut basis: Vec<f64> = Vec::with_capacity(from * to);
    for j in 0..from {
        loop {
            let mut v: Vec<f64> = (0..to).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..j {
                let u = &basis[i * to..(i + 1) * to];
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                basis.extend(v.iter().map(|x| x / nrm));
                break;
            }
        }
    }
    Ok(IsometricLift { from, to, basis })
}

impl IsometricLift {
    pub fn apply(&self, data: &PointSet) -> Result<PointSet> {
        if data.dim() != self.from {
            return Err(LirfError::DimensionMismatch {
                expected: self.from,
                got: data.dim(),
            });
        }
        let mut out = Vec::with_capacity(data.len() * self.to);
        for p in data.iter() {
            let mut y = vec![0.0; self.to];
            for (j, &x) in p.iter().enumerate() {
                for (yi, b) in y
                    .iter_mut()
                    .zip(&self.basis[j * self.to..(j + 1) * self.to])
                {
                    *yi += x * b;
                }
            }
            out.extend(y);
        }
        PointSet::from_flat(self.to, out, data.labels().map(<[i64]>::to_vec))
    }
}

pub const DIGIT_SIDE: usize = 8;

// Seven-segment strokes: (row0, col0, row1, col1), inclusive, on an 8×8 grid.
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (1, 2, 1, 5), // top
    (1, 5, 4, 5), // upper right
    (4, 5, 7, 5), // lower right
    (7, 2, 7, 5), // bottom
    (4, 2, 7, 2), // lower left
    (1, 2, 4, 2), // upper left
    (4, 2, 4, 5), // middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 4, 3, 2, 6],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

/// Renders one jittered seven-segment digit as 64 pixels in `[0, 1]`.
pub fn render_digit(digit: usize, noise_sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = vec![0.0; DIGIT_SIDE * DIGIT_SIDE];
    let dx = rng.random_range(-1i64..=1);
    let dy = rng.random_range(-1i64..=0);
    for &s in DIGIT_SEGMENTS[digit % 10] {
        let (r0, c0, r1, c1) = SEGMENTS[s];
        let ink = rng.random_range(0.7..1.0);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (rr, cc) = (r as i64 + dy, c as i64 + dx);
                let px = &mut img[rr as usize * DIGIT_SIDE + cc as usize];
                *px = f64::max(*px, ink);
            }
        }
    }
    if noise_sigma > 0.0 {
        for px in &mut img {
            *px = (*px + noise_sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        }
    }
    img
}

fn digit_blobs(n: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<PointSet> {
    let mut out = PointSet::new_labeled(DIGIT_SIDE * DIGIT_SIDE)?;
    for i in 0..n {
        out.push(
            &render_digit(i % 10, noise_sigma, rng),
            Some((i % 10) as i64),
        )?;
    }
    Ok(out)
}

/// Keeps `k` points per label, chosen by a seeded shuffle, in original order.
pub fn few_shot(data: &PointSet, k: usize, seed: u64) -> Result<PointSet> {
    let mut rng = module_rng(seed, "few-shot");
    let mut keep = Vec::new();
    for (label, mut idx) in class_indices(data) {
        if idx.len() < k {
            return Err(LirfError::ClassTooSmall {
                label,
                size: idx.len(),
                needed: k,
            });
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(data.select(&keep))
}

/// Indices per label in ascending label order; unlabelled data is one class `0`.
fn class_indices(data: &PointSet) -> Vec<(i64, Vec<usize>)> {
    match data.labels() {
        None => vec![(0, (0..data.len()).collect())],
        Some(labels) => data
            .distinct_labels()
            .into_iter()
            .map(|l| (l, (0..data.len()).filter(|&i| labels[i] == l).collect()))
            .collect(),
    }
}

/// Label-stratified partition; each class sends `round(fraction·n_c)` points to the holdout.
pub fn split(data: &PointSet, holdout_fraction: f64, seed: u64) -> Result<(PointSet, PointSet)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(LirfError::InvalidConfig(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut rng = module_rng(seed, "split");
    let mut hold = Vec::new();
    let mut train = Vec::new();
    for (label, mut idx) in class_indices(data) {
        let h = (holdout_fraction * idx.len() as f64).round() as usize;
        if h == 0 || h == idx.len() {
            return Err(LirfError::ClassTooSmall {
                label,
                size: idx.len(),
                needed: 2,
            });
        }
        idx.shuffle(&mut rng);
        hold.extend_from_slice(&idx[..h]);
        train.extend_from_slice(&idx[h..]);
    }
    hold.sort_unstable();
    train.sort_unstable();
    Ok((data.select(&train), data.select(&hold)))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| LirfError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| LirfError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LirfError::format(what, "truncated header"))
}

/// Parses an unsigned-byte IDX file into its dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected_magic {
        return Err(LirfError::format(
            what,
            format!("magic {magic:#010x}, expected {expected_magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, what).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = bytes.get(start..start + count).ok_or_else(|| {
        LirfError::format(
            what,
            format!(
                "payload has {} bytes, header promises {count}",
                bytes.len() - start
            ),
        )
    })?;
    Ok((dims, payload.to_vec()))
}

/// Serializes images (each `rows·cols` bytes) into the IDX image layout.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [images.len(), rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    for img in images {
        out.extend(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// Images scaled to `[0, 1]` and flattened row-major, labelled from the companion file.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<PointSet> {
    let (idims, pixels) = parse_idx(&read_maybe_gz(images)?, IDX_IMAGES_MAGIC, "IDX image file")?;
    let (ldims, lbytes) = parse_idx(&read_maybe_gz(labels)?, IDX_LABELS_MAGIC, "IDX label file")?;
    if idims[0] != ldims[0] {
        return Err(LirfError::format(
            "IDX pair",
            format!("{} images but {} labels", idims[0], ldims[0]),
        ));
    }
    let dim: usize = idims[1..].iter().product();
    let flat: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    PointSet::from_flat(dim, flat, Some(lbytes.iter().map(|&b| b as i64).collect()))
}

fn derive_labels_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    if !name.contains("images-idx3") {
        return Err(LirfError::InvalidConfig(format!(
            "cannot derive a label file from `{}`; give labels_path",
            images.display()
        )));
    }
    Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}
