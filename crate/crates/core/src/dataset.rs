//! Response datasets: the toy shower synthesizer, container load/save,
//! deterministic splits, and particle normalization.

use crate::container::{self, ContainerError, NamedArray};
use crate::props::GRID;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const PARTICLE_DIM: usize = 9;
pub const PARTICLE_FEATURES: [&str; PARTICLE_DIM] =
    ["px", "py", "pz", "vx", "vy", "vz", "mass", "charge", "energy"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("array {name:?} has shape {found:?}, expected {expected}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: String },
    #[error("negative pixel {value} in record {record} at (row {row}, col {col})")]
    NegativePixel { record: usize, row: usize, col: usize, value: f32 },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("split fractions must be positive and sum to 1")]
    BadFractions,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("container is not a dataset (format_kind {found:?})")]
    WrongKind { found: String },
    #[error("container is missing array {0:?}")]
    MissingArray(String),
    #[error("invalid synthesizer config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// The nine particle features, in the order of [`PARTICLE_FEATURES`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleVector(pub [f32; PARTICLE_DIM]);

impl ParticleVector {
    pub fn px(&self) -> f32 {
        self.0[0]
    }
    pub fn py(&self) -> f32 {
        self.0[1]
    }
    pub fn pz(&self) -> f32 {
        self.0[2]
    }
    pub fn energy(&self) -> f32 {
        self.0[8]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub image: Array2<f32>,
    pub particle: ParticleVector,
}

/// Optional pixel-space transform applied before images enter the model.
/// `Log1p` is inverted with expm1 and clamped at zero on generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageTransform {
    #[default]
    Identity,
    Log1p,
}

impl ImageTransform {
    pub fn forward(self, v: f32) -> f32 {
        match self {
            ImageTransform::Identity => v,
            ImageTransform::Log1p => v.ln_1p(),
        }
    }

    pub fn inverse(self, v: f32) -> f32 {
        let raw = match self {
            ImageTransform::Identity => v,
            ImageTransform::Log1p => v.exp_m1(),
        };
        raw.max(0.0)
    }
}

/// Per-feature particle statistics (computed from the training split only)
/// plus the image transform flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub particle_mean: [f64; PARTICLE_DIM],
    pub particle_std: [f64; PARTICLE_DIM],
    pub image_transform: ImageTransform,
}

impl Normalization {
    /// z-scores a particle with the stored statistics.
    pub fn normalize_particle(&self, p: &ParticleVector) -> [f32; PARTICLE_DIM] {
        let mut out = [0.0f32; PARTICLE_DIM];
        for k in 0..PARTICLE_DIM {
            out[k] = ((p.0[k] as f64 - self.particle_mean[k]) / self.particle_std[k]) as f32;
        }
        out
    }

    pub fn transform_image(&self, image: &Array2<f32>) -> Array2<f32> {
        image.mapv(|v| self.image_transform.forward(v))
    }

    pub fn untransform_image(&self, image: &Array2<f32>) -> Array2<f32> {
        image.mapv(|v| self.image_transform.inverse(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synthesizer: Option<ToyShowerConfig>,
    /// How the toy particles are drawn, recorded for reproducibility.
    #[serde(default)]
    pub particle_model: Option<String>,
    #[serde(default)]
    pub parent: Option<String>,
}

impl Provenance {
    fn external(path: &Path) -> Self {
        Provenance {
            source: format!("file:{}", path.display()),
            seed: None,
            synthesizer: None,
            particle_model: None,
            parent: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ResponseRecord>,
    pub normalization: Option<Normalization>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Array2<f32>> {
        self.records.iter().map(|r| &r.image)
    }
}

/// Parameters of the synthetic shower model: a particle deposits an
/// isotropic Gaussian blob whose center follows the transverse momentum
/// slope and whose expected photon count is proportional to its energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyShowerConfig {
    pub sigma: f64,
    pub position_scale: f64,
    pub amplitude_per_energy: f64,
    pub poisson_noise: bool,
    pub center_offset: f64,
}

impl Default for ToyShowerConfig {
    fn default() -> Self {
        ToyShowerConfig {
            sigma: 1.5,
            position_scale: 10.0,
            amplitude_per_energy: 50.0,
            poisson_noise: true,
            center_offset: 21.5,
        }
    }
}

impl ToyShowerConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sigma > 0.0) {
            return Err(DataError::BadConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.amplitude_per_energy >= 0.0) {
            return Err(DataError::BadConfig(format!(
                "amplitude_per_energy must be >= 0, got {}",
                self.amplitude_per_energy
            )));
        }
        if !self.position_scale.is_finite() || !self.center_offset.is_finite() {
            return Err(DataError::BadConfig("non-finite shower parameter".into()));
        }
        Ok(())
    }

    /// Deposit center implied by a particle's transverse momentum slope,
    /// clamped to [2, 41] so showers stay away from hard edge truncation.
    pub fn center_for(&self, px: f64, py: f64, pz: f64) -> (f64, f64) {
        let cx = (self.center_offset + self.position_scale * (px / pz)).clamp(2.0, 41.0);
        let cy = (self.center_offset + self.position_scale * (py / pz)).clamp(2.0, 41.0);
        (cx, cy)
    }
}

const PARTICLE_MODEL_NOTE: &str = "px,py~U(-1,1); pz~U(1,2); v=s*p/|p| with s~U(0.5,1); \
     mass~U(0.1,2); charge uniform on {-1,0,1}; energy~U(1,100)";

/// Expected (noise-free) image: amplitude times an isotropic Gaussian
/// profile normalized to unit sum over the 44x44 grid.
pub fn toy_expected_image(config: &ToyShowerConfig, cx: f64, cy: f64, amplitude: f64) -> Array2<f64> {
    let inv_two_sigma2 = 1.0 / (2.0 * config.sigma * config.sigma);
    let mut g = Array2::from_shape_fn((GRID, GRID), |(row, col)| {
        let dx = col as f64 - cx;
        let dy = row as f64 - cy;
        (-(dx * dx + dy * dy) * inv_two_sigma2).exp()
    });
    let sum: f64 = g.sum();
    g.mapv_inplace(|v| v / sum * amplitude);
    g
}

/// Renders one shower image, optionally with per-pixel Poisson noise.
pub fn toy_image(
    config: &ToyShowerConfig,
    cx: f64,
    cy: f64,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let expected = toy_expected_image(config, cx, cy, amplitude);
    if config.poisson_noise {
        expected.mapv(|lam| {
            if lam > 0.0 {
                Poisson::new(lam).expect("positive lambda").sample(rng) as f32
            } else {
                0.0
            }
        })
    } else {
        expected.mapv(|v| v as f32)
    }
}

fn synth_record(config: &ToyShowerConfig, seed: u64, index: usize) -> ResponseRecord {
    // Each record gets its own ChaCha stream so synthesis is reproducible
    // regardless of how records are scheduled across threads.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);

    let px = rng.random_range(-1.0..1.0f64);
    let py = rng.random_range(-1.0..1.0f64);
    let pz = rng.random_range(1.0..2.0f64);
    let speed = rng.random_range(0.5..1.0f64);
    let mass = rng.random_range(0.1..2.0f64);
    let charge = [-1.0f64, 0.0, 1.0][rng.random_range(0..3usize)];
    let energy = rng.random_range(1.0..100.0f64);

    let pnorm = (px * px + py * py + pz * pz).sqrt();
    let (vx, vy, vz) = (speed * px / pnorm, speed * py / pnorm, speed * pz / pnorm);

    let (cx, cy) = config.center_for(px, py, pz);
    let amplitude = config.amplitude_per_energy * energy;
    let image = toy_image(config, cx, cy, amplitude, &mut rng);

    ResponseRecord {
        image,
        particle: ParticleVector([
            px as f32, py as f32, pz as f32, vx as f32, vy as f32, vz as f32, mass as f32,
            charge as f32, energy as f32,
        ]),
    }
}

/// Draws `n` synthetic responses. Bit-identical for identical
/// `(n, config, seed)`.
pub fn synthesize_toy_dataset(
    n: usize,
    config: &ToyShowerConfig,
    seed: u64,
) -> Result<Dataset, DataError> {
    config.validate()?;
    let records: Vec<ResponseRecord> =
        (0..n).into_par_iter().map(|i| synth_record(config, seed, i)).collect();
    Ok(Dataset {
        records,
        normalization: None,
        provenance: Provenance {
            source: "synthetic".into(),
            seed: Some(seed),
            synthesizer: Some(config.clone()),
            particle_model: Some(PARTICLE_MODEL_NOTE.into()),
            parent: None,
        },
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let n = dataset.len();
    let mut images = Vec::with_capacity(n * GRID * GRID);
    let mut particles = Vec::with_capacity(n * PARTICLE_DIM);
    for r in &dataset.records {
        images.extend(r.image.iter().copied());
        particles.extend_from_slice(&r.particle.0);
    }
    let metadata = serde_json::json!({
        "format_kind": "dataset",
        "n": n,
        "provenance": serde_json::to_value(&dataset.provenance).expect("provenance to json"),
        "normalization": dataset
            .normalization
            .as_ref()
            .map(|norm| serde_json::to_value(norm).expect("normalization to json")),
    });
    let arrays = vec![
        NamedArray::f32("images", vec![n, GRID, GRID], images),
        NamedArray::f32("particles", vec![n, PARTICLE_DIM], particles),
    ];
    container::write_container(path, &metadata, &arrays)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let c = container::read_container(path)?;
    let kind = c.format_kind().unwrap_or("").to_string();
    if kind != "dataset" {
        return Err(DataError::WrongKind { found: kind });
    }
    let images = c.array("images").ok_or_else(|| DataError::MissingArray("images".into()))?;
    let particles =
        c.array("particles").ok_or_else(|| DataError::MissingArray("particles".into()))?;

    if images.shape.len() != 3 || images.shape[1] != GRID || images.shape[2] != GRID {
        return Err(DataError::ShapeMismatch {
            name: "images".into(),
            found: images.shape.clone(),
            expected: format!("[N, {GRID}, {GRID}]"),
        });
    }
    let n = images.shape[0];
    if particles.shape != vec![n, PARTICLE_DIM] {
        return Err(DataError::ShapeMismatch {
            name: "particles".into(),
            found: particles.shape.clone(),
            expected: format!("[{n}, {PARTICLE_DIM}]"),
        });
    }
    let image_data = images
        .as_f32()
        .ok_or_else(|| DataError::ShapeMismatch {
            name: "images".into(),
            found: images.shape.clone(),
            expected: "f32".into(),
        })?
        .to_vec();
    let particle_data = particles
        .as_f32()
        .ok_or_else(|| DataError::ShapeMismatch {
            name: "particles".into(),
            found: particles.shape.clone(),
            expected: "f32".into(),
        })?
        .to_vec();

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let img_slice = &image_data[i * GRID * GRID..(i + 1) * GRID * GRID];
        for (k, &v) in img_slice.iter().enumerate() {
            let (row, col) = (k / GRID, k % GRID);
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    what: format!("image pixel (record {i}, row {row}, col {col})"),
                });
            }
            if v < 0.0 {
                return Err(DataError::NegativePixel { record: i, row, col, value: v });
            }
        }
        let image = Array2::from_shape_vec((GRID, GRID), img_slice.to_vec()).expect("shape");
        let p: [f32; PARTICLE_DIM] =
            particle_data[i * PARTICLE_DIM..(i + 1) * PARTICLE_DIM].try_into().unwrap();
        let particle = ParticleVector(p);
        if !particle.is_finite() {
            return Err(DataError::NonFinite { what: format!("particle (record {i})") });
        }
        records.push(ResponseRecord { image, particle });
    }

    let provenance = c
        .metadata
        .get("provenance")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| Provenance::external(path));
    let normalization = c
        .metadata
        .get("normalization")
        .filter(|v| !v.is_null())
        .and_then(|v| serde_json::from_value(v.clone()).ok());

    Ok(Dataset { records, normalization, provenance })
}

/// Deterministic shuffled partition. Validation and test sizes are
/// floor-based; the remainder goes to train.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions);
    }
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);

    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fs).floor() as usize;
    let n_train = n - n_val - n_test;

    let take = |idx: &[usize], label: &str| Dataset {
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
        normalization: None,
        provenance: Provenance {
            source: format!("{}/{label}", dataset.provenance.source),
            seed: Some(seed),
            synthesizer: dataset.provenance.synthesizer.clone(),
            particle_model: dataset.provenance.particle_model.clone(),
            parent: Some(dataset.provenance.source.clone()),
        },
    };
    Ok((
        take(&indices[..n_train], "train"),
        take(&indices[n_train..n_train + n_val], "val"),
        take(&indices[n_train + n_val..], "test"),
    ))
}

/// Per-feature mean and population standard deviation of the particle
/// features, std floored at 1e-6.
pub fn compute_normalization(
    train: &Dataset,
    image_transform: ImageTransform,
) -> Result<Normalization, DataError> {
    if train.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = train.len() as f64;
    let mut sum = [0.0f64; PARTICLE_DIM];
    let mut sumsq = [0.0f64; PARTICLE_DIM];
    for r in &train.records {
        for k in 0..PARTICLE_DIM {
            let v = r.particle.0[k] as f64;
            sum[k] += v;
            sumsq[k] += v * v;
        }
    }
    let mut mean = [0.0f64; PARTICLE_DIM];
    let mut std = [0.0f64; PARTICLE_DIM];
    for k in 0..PARTICLE_DIM {
        mean[k] = sum[k] / n;
        let var = (sumsq[k] / n - mean[k] * mean[k]).max(0.0);
        std[k] = var.sqrt().max(1e-6);
    }
    Ok(Normalization { particle_mean: mean, particle_std: std, image_transform })
}
