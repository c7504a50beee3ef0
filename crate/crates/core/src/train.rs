//! Composite loss (reconstruction MSE + KL terms + masked property MSE),
//! the Adam training loop, and run bookkeeping.

use crate::dataset::{compute_normalization, DataError, Dataset, ImageTransform, PARTICLE_DIM};
use crate::model::{
    init_model, CorrVae, MaskMatrix, ModelConfig, ModelError, TrainedModel, IMAGE_PIXELS,
};
use crate::nn::fl;
use crate::props::{property_vector, total_deposit, PropertySpec, PropsError};
use ndarray::{Array2, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty after excluding zero-deposit records")]
    EmptyDataset,
    #[error("non-finite loss in epoch {epoch}; last good epoch {last_good}")]
    NonFiniteLoss { epoch: usize, last_good: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Props(#[from] PropsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_w: f64,
    pub beta_z: f64,
    pub lambda_prop: f64,
}

impl Default for LossWeights {
    // lambda_prop must put the property term on the same footing as the
    // raw-pixel reconstruction MSE (hundreds for the toy data); much
    // smaller values let the heads collapse to a constant predictor
    // before the encoder routes position into the masked coordinates.
    fn default() -> Self {
        LossWeights { beta_w: 1.0, beta_z: 1.0, lambda_prop: 1000.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.beta_w < 0.0 || self.beta_z < 0.0 || self.lambda_prop < 0.0 {
            return Err(TrainError::LengthMismatch("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    pub validation_fraction: f64,
    /// Epochs during which the decoder sees a zeroed conditioning vector.
    /// Deposit position then has to flow through `w` (the property loss
    /// keeps it there) before the particle channel opens; otherwise the
    /// decoder reads position from the noise-free `c` and the controllable
    /// code never steers generation.
    pub c_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            early_stop_patience: None,
            validation_fraction: 0.1,
            c_warmup_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::LengthMismatch(
                "epochs >= 1, batch_size >= 1, learning_rate > 0 required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::LengthMismatch(
                "validation_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// KL divergence of a diagonal Gaussian from the standard normal:
/// `sum_d 0.5 * (mean_d^2 + exp(logvar_d) - logvar_d - 1)`.
pub fn kl_standard_normal<F: NdFloat>(mean: &[F], logvar: &[F]) -> f64 {
    assert_eq!(mean.len(), logvar.len(), "mean/logvar length mismatch");
    mean.iter()
        .zip(logvar)
        .map(|(&m, &l)| {
            let (m, l) = (m.to_f64().unwrap(), l.to_f64().unwrap());
            0.5 * (m * m + l.exp() - l - 1.0)
        })
        .sum()
}

/// Mean over the 1936 pixels of the squared difference.
pub fn reconstruction_loss<F: NdFloat>(recon: &Array2<F>, target: &Array2<F>) -> f64 {
    assert_eq!(recon.dim(), target.dim(), "image shape mismatch");
    let n = recon.len() as f64;
    recon
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Mean squared error over the P properties (normalized space).
pub fn property_loss<F: NdFloat>(pred: &[F], target: &[F]) -> Result<f64, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_w: f64,
    pub kl_z: f64,
    pub prop: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.recon + w.beta_w * self.kl_w + w.beta_z * self.kl_z + w.lambda_prop * self.prop
    }
}

/// Per-record composite loss from one forward pass.
pub fn total_loss<F: NdFloat>(
    output: &crate::model::ForwardOutput<F>,
    target_image: &Array2<F>,
    target_properties: &[F],
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown), TrainError> {
    let breakdown = LossBreakdown {
        recon: reconstruction_loss(&output.reconstruction, target_image),
        kl_w: kl_standard_normal(
            output.codes.w_mean.as_slice().unwrap(),
            output.codes.w_logvar.as_slice().unwrap(),
        ),
        kl_z: kl_standard_normal(
            output.codes.z_mean.as_slice().unwrap(),
            output.codes.z_logvar.as_slice().unwrap(),
        ),
        prop: property_loss(output.properties.as_slice().unwrap(), target_properties)?,
    };
    let total = breakdown.total(weights);
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, last_good: 0 });
    }
    Ok((total, breakdown))
}

/// Batched loss (means of the per-record terms) without gradients.
pub fn batch_loss<F: NdFloat>(
    model: &CorrVae<F>,
    x: &Array2<F>,
    particles: &Array2<F>,
    targets: &Array2<F>,
    noise_w: &Array2<F>,
    noise_z: &Array2<F>,
    weights: &LossWeights,
) -> (f64, LossBreakdown) {
    let cache = model.forward_batch_cached(x, particles, noise_w, noise_z);
    let breakdown = batch_breakdown(&cache, x, targets);
    (breakdown.total(weights), breakdown)
}

fn batch_loss_and_grads_with<F: NdFloat>(
    model: &CorrVae<F>,
    x: &Array2<F>,
    particles: &Array2<F>,
    targets: &Array2<F>,
    noise_w: &Array2<F>,
    noise_z: &Array2<F>,
    weights: &LossWeights,
    use_c: bool,
) -> (LossBreakdown, CorrVae<F>) {
    let n = x.nrows();
    let cache = model.forward_batch_cached_with(x, particles, noise_w, noise_z, use_c);
    let breakdown = batch_breakdown(&cache, x, targets);

    let nf = fl::<F>(n as f64);
    let two = fl::<F>(2.0);
    let half = fl::<F>(0.5);

    // d total / d recon = 2 (recon - x) / (n * pixels)
    let g_recon = (&cache.recon - x) * (two / (nf * fl::<F>(IMAGE_PIXELS as f64)));
    // d total / d props = lambda * 2 (props - t) / (n * P)
    let g_props = (&cache.props - targets)
        * (fl::<F>(weights.lambda_prop) * two / (nf * fl::<F>(targets.ncols() as f64)));
    // KL gradients (with respect to mean and clamped logvar)
    let g_w_mean = cache.w_mean.mapv(|m| m * fl::<F>(weights.beta_w) / nf);
    let g_w_logvar =
        cache.w_logvar.mapv(|l| fl::<F>(weights.beta_w) * half * (l.exp() - F::one()) / nf);
    let g_z_mean = cache.z_mean.mapv(|m| m * fl::<F>(weights.beta_z) / nf);
    let g_z_logvar =
        cache.z_logvar.mapv(|l| fl::<F>(weights.beta_z) * half * (l.exp() - F::one()) / nf);

    let grads = model.backward_batch(
        &cache, &g_recon, &g_props, &g_w_mean, &g_w_logvar, &g_z_mean, &g_z_logvar,
    );
    (breakdown, grads)
}

fn batch_breakdown<F: NdFloat>(
    cache: &crate::model::BatchCache<F>,
    x: &Array2<F>,
    targets: &Array2<F>,
) -> LossBreakdown {
    let n = x.nrows() as f64;
    let recon = cache
        .recon
        .iter()
        .zip(x.iter())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / (n * IMAGE_PIXELS as f64);
    let kl = |mean: &Array2<F>, logvar: &Array2<F>| {
        mean.iter()
            .zip(logvar.iter())
            .map(|(&m, &l)| {
                let (m, l) = (m.to_f64().unwrap(), l.to_f64().unwrap());
                0.5 * (m * m + l.exp() - l - 1.0)
            })
            .sum::<f64>()
            / n
    };
    let p = targets.ncols() as f64;
    let prop = cache
        .props
        .iter()
        .zip(targets.iter())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / (n * p);
    LossBreakdown {
        recon,
        kl_w: kl(&cache.w_mean, &cache.w_logvar),
        kl_z: kl(&cache.z_mean, &cache.z_logvar),
        prop,
    }
}

/// Batched loss and the gradient of the batch-mean total loss with respect
/// to every parameter.
pub fn batch_loss_and_grads<F: NdFloat>(
    model: &CorrVae<F>,
    x: &Array2<F>,
    particles: &Array2<F>,
    targets: &Array2<F>,
    noise_w: &Array2<F>,
    noise_z: &Array2<F>,
    weights: &LossWeights,
) -> (LossBreakdown, CorrVae<F>) {
    batch_loss_and_grads_with(model, x, particles, targets, noise_w, noise_z, weights, true)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub struct Adam<F> {
    m: CorrVae<F>,
    v: CorrVae<F>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(model: &CorrVae<F>, learning_rate: f64) -> Self {
        Adam {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut CorrVae<F>, grads: &CorrVae<F>) {
        self.t += 1;
        let b1 = fl::<F>(self.beta1);
        let b2 = fl::<F>(self.beta2);
        let one = F::one();
        let corr1 = fl::<F>(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = fl::<F>(1.0 - self.beta2.powi(self.t as i32));
        let lr = fl::<F>(self.learning_rate);
        let eps = fl::<F>(self.epsilon);

        let g_slices = grads.param_slices();
        let m_slices = self.m.param_slices_mut();
        let v_slices = self.v.param_slices_mut();
        let p_slices = model.param_slices_mut();
        for (((p, g), m), v) in p_slices.into_iter().zip(g_slices).zip(m_slices).zip(v_slices) {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl_w: f64,
    pub kl_z: f64,
    pub prop: f64,
    pub val_recon: f64,
    pub val_prop: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub excluded_zero_deposit: usize,
    pub best_epoch: usize,
}

pub fn write_history_csv(history: &TrainingHistory, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,total,recon,kl_w,kl_z,prop,val_recon,val_prop,seconds")?;
    for e in &history.epochs {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch, e.total, e.recon, e.kl_w, e.kl_z, e.prop, e.val_recon, e.val_prop, e.seconds
        )?;
    }
    f.flush()
}

/// Raw records turned into model-space arrays: transformed flattened
/// images, z-scored particles, and normalized property targets (extracted
/// from the raw images).
pub struct PreparedData {
    pub x: Array2<f32>,
    pub particles: Array2<f32>,
    pub targets: Array2<f32>,
}

pub fn prepare_records(
    records: &[crate::dataset::ResponseRecord],
    normalization: &crate::dataset::Normalization,
    spec: &PropertySpec,
) -> Result<PreparedData, TrainError> {
    let n = records.len();
    let p = spec.len();
    let mut x = Array2::zeros((n, IMAGE_PIXELS));
    let mut particles = Array2::zeros((n, PARTICLE_DIM));
    let mut targets = Array2::zeros((n, p));
    for (i, r) in records.iter().enumerate() {
        let transformed = normalization.transform_image(&r.image);
        x.row_mut(i).assign(
            &transformed.into_shape_with_order(IMAGE_PIXELS).expect("flatten"),
        );
        particles.row_mut(i).assign(&ndarray::ArrayView1::from(
            &normalization.normalize_particle(&r.particle)[..],
        ));
        let t = property_vector(&r.image, spec)?;
        for (j, v) in t.iter().enumerate() {
            targets[[i, j]] = *v as f32;
        }
    }
    Ok(PreparedData { x, particles, targets })
}

fn gather(rows: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    rows.select(Axis(0), idx)
}

fn draw_noise(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f32> {
    let data: Vec<f32> =
        (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Array2::from_shape_vec((n, dim), data).expect("noise shape")
}

/// Validation metrics with posterior means (no sampling): reconstruction
/// MSE in model space and property MSE from the w posterior mean.
fn validation_metrics(
    model: &CorrVae<f32>,
    data: &PreparedData,
    batch_size: usize,
) -> (f64, f64) {
    let n = data.x.nrows();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut se_recon = 0.0f64;
    let mut se_prop = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = gather(&data.x, &idx);
        let particles = gather(&data.particles, &idx);
        let targets = gather(&data.targets, &idx);
        let (w_mean, _, _, _) = model.encode_w_batch(&x);
        let (z_mean, _, _, _) = model.encode_z_batch(&x);
        let c = model.c_encoder.forward(&particles);
        let recon = model.decode_batch(&w_mean, &z_mean, &c);
        se_recon += recon
            .iter()
            .zip(x.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>();
        let (props, _) = model.heads_batch(&w_mean);
        se_prop += props
            .iter()
            .zip(targets.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>();
        start = end;
    }
    let p = data.targets.ncols();
    (se_recon / (n * IMAGE_PIXELS) as f64, se_prop / (n * p) as f64)
}

fn drop_zero_deposit(records: &[crate::dataset::ResponseRecord]) -> (Vec<crate::dataset::ResponseRecord>, usize) {
    let kept: Vec<_> =
        records.iter().filter(|r| total_deposit(&r.image) > 0.0).cloned().collect();
    let dropped = records.len() - kept.len();
    (kept, dropped)
}

/// Trains on `train_data` with an explicit validation set. The best
/// checkpoint by validation score (`val_recon + lambda_prop * val_prop`)
/// is kept and written to `out_checkpoint`.
#[allow(clippy::too_many_arguments)]
pub fn train_with_validation(
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    model_cfg: &ModelConfig,
    spec: &PropertySpec,
    mask: &MaskMatrix,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    image_transform: ImageTransform,
    out_checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainedModel, TrainingHistory), TrainError> {
    train_cfg.validate()?;
    weights.validate()?;

    let (train_records, dropped_train) = drop_zero_deposit(&train_data.records);
    if train_records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (val_records, dropped_val) = match val_data {
        Some(v) => drop_zero_deposit(&v.records),
        None => (Vec::new(), 0),
    };

    let train_only = Dataset {
        records: train_records.clone(),
        normalization: None,
        provenance: train_data.provenance.clone(),
    };
    let normalization = compute_normalization(&train_only, image_transform)?;
    let train_prep = prepare_records(&train_records, &normalization, spec)?;
    let val_prep = prepare_records(&val_records, &normalization, spec)?;
    let has_val = !val_records.is_empty();

    let mut model = init_model::<f32>(model_cfg, spec, mask)?;
    let mut adam = Adam::new(&model, train_cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let n = train_records.len();
    let (dim_w, dim_z) = (model_cfg.dim_w, model_cfg.dim_z);

    let mut history = TrainingHistory {
        epochs: Vec::with_capacity(train_cfg.epochs),
        excluded_zero_deposit: dropped_train + dropped_val,
        best_epoch: 0,
    };
    let mut best_score = f64::INFINITY;
    let mut best_model: Option<CorrVae<f32>> = None;

    for epoch in 1..=train_cfg.epochs {
        let start_time = std::time::Instant::now();
        let mut indices: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);

        let use_c = epoch > train_cfg.c_warmup_epochs;
        let mut sums = LossBreakdown { recon: 0.0, kl_w: 0.0, kl_z: 0.0, prop: 0.0 };
        let mut total_sum = 0.0f64;
        for chunk in indices.chunks(train_cfg.batch_size) {
            let x = gather(&train_prep.x, chunk);
            let particles = gather(&train_prep.particles, chunk);
            let targets = gather(&train_prep.targets, chunk);
            let noise_w = draw_noise(&mut rng, chunk.len(), dim_w);
            let noise_z = draw_noise(&mut rng, chunk.len(), dim_z);
            let (breakdown, grads) = batch_loss_and_grads_with(
                &model, &x, &particles, &targets, &noise_w, &noise_z, weights, use_c,
            );
            let total = breakdown.total(weights);
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    last_good: history.epochs.len(),
                });
            }
            adam.step(&mut model, &grads);
            let bn = chunk.len() as f64;
            sums.recon += breakdown.recon * bn;
            sums.kl_w += breakdown.kl_w * bn;
            sums.kl_z += breakdown.kl_z * bn;
            sums.prop += breakdown.prop * bn;
            total_sum += total * bn;
        }
        if !model.params_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, last_good: history.epochs.len() });
        }

        let nf = n as f64;
        let (val_recon, val_prop) = if has_val {
            validation_metrics(&model, &val_prep, train_cfg.batch_size)
        } else {
            validation_metrics(&model, &train_prep, train_cfg.batch_size)
        };
        let stats = EpochStats {
            epoch,
            total: total_sum / nf,
            recon: sums.recon / nf,
            kl_w: sums.kl_w / nf,
            kl_z: sums.kl_z / nf,
            prop: sums.prop / nf,
            val_recon,
            val_prop,
            seconds: start_time.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.epochs.push(stats);

        let score = val_recon + weights.lambda_prop * val_prop;
        if score < best_score {
            best_score = score;
            history.best_epoch = epoch;
            best_model = Some(model.clone());
        } else if let Some(patience) = train_cfg.early_stop_patience {
            if epoch - history.best_epoch > patience {
                break;
            }
        }
    }

    let trained = TrainedModel {
        model: best_model.unwrap_or(model),
        normalization,
        history: Some(serde_json::to_value(&history).expect("history json")),
    };
    if let Some(path) = out_checkpoint {
        crate::model::save_checkpoint(&trained, path)?;
    }
    Ok((trained, history))
}

/// Trains on `dataset`, carving the validation records off the end of a
/// seeded shuffle according to `validation_fraction`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    spec: &PropertySpec,
    mask: &MaskMatrix,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    image_transform: ImageTransform,
    out_checkpoint: Option<&Path>,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainedModel, TrainingHistory), TrainError> {
    train_cfg.validate()?;
    let n = dataset.len();
    let n_val = (n as f64 * train_cfg.validation_fraction).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let subset = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
        normalization: None,
        provenance: dataset.provenance.clone(),
    };
    let train_ds = subset(&indices[..n - n_val]);
    let val_ds = subset(&indices[n - n_val..]);
    train_with_validation(
        &train_ds,
        if n_val > 0 { Some(&val_ds) } else { None },
        model_cfg,
        spec,
        mask,
        train_cfg,
        weights,
        image_transform,
        out_checkpoint,
        on_epoch,
    )
}
