//! Evaluation protocol: per-pixel reconstruction MSE, channel-distribution
//! Wasserstein distances, traversal and disentanglement diagnostics, and
//! report emission.

use crate::dataset::Dataset;
use crate::infer::{self, InferError, WOptimizerConfig};
use crate::model::TrainedModel;
use crate::pgm::{self, GraymapInfo};
use crate::props::{center_of_mass, channel_values, ChannelValues, PropsError};
use crate::train::reconstruction_loss;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("too few images ({0}); need at least 3")]
    TooFewImages(usize),
    #[error("non-finite sample value")]
    NonFinite,
    #[error(transparent)]
    Props(#[from] PropsError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// 1-D Wasserstein distance
// ---------------------------------------------------------------------------

/// Exact 1-Wasserstein distance between two empirical distributions: the
/// integral of |F_a - F_b| over the real line, computed on the step-CDF
/// breakpoints. For equal sample sizes this reduces to the mean absolute
/// difference of the sorted samples.
pub fn wasserstein_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64, EvalError> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if samples_a.iter().chain(samples_b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    let mut i = 0usize;
    let mut j = 0usize;
    let mut prev = f64::NAN;
    let mut total = 0.0f64;
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if prev.is_finite() && v > prev {
            total += (i as f64 / na - j as f64 / nb).abs() * (v - prev);
        }
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        prev = v;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWasserstein {
    pub per_channel: [f64; 5],
    pub mean: f64,
}

pub fn channel_matrix(images: &[Array2<f32>]) -> Vec<ChannelValues> {
    images.par_iter().map(channel_values).collect()
}

/// Per-channel 1-Wasserstein distances between the channel-value
/// distributions of two image sets, plus their mean.
pub fn channel_wasserstein(
    generated: &[Array2<f32>],
    reference: &[Array2<f32>],
) -> Result<ChannelWasserstein, EvalError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let gen_ch = channel_matrix(generated);
    let ref_ch = channel_matrix(reference);
    let mut per_channel = [0.0f64; 5];
    for k in 0..5 {
        let ga: Vec<f64> = gen_ch.iter().map(|c| c.0[k]).collect();
        let rb: Vec<f64> = ref_ch.iter().map(|c| c.0[k]).collect();
        per_channel[k] = wasserstein_1d(&ga, &rb)?;
    }
    let mean = per_channel.iter().sum::<f64>() / 5.0;
    Ok(ChannelWasserstein { per_channel, mean })
}

/// Population standard deviation of each channel over an image set.
pub fn channel_std(images: &[Array2<f32>]) -> [f64; 5] {
    let ch = channel_matrix(images);
    let n = ch.len() as f64;
    let mut out = [0.0f64; 5];
    for k in 0..5 {
        let mean = ch.iter().map(|c| c.0[k]).sum::<f64>() / n;
        let var = ch.iter().map(|c| (c.0[k] - mean).powi(2)).sum::<f64>() / n;
        out[k] = var.sqrt();
    }
    out
}

// ---------------------------------------------------------------------------
// Reconstruction error
// ---------------------------------------------------------------------------

/// Mean reconstruction MSE over a dataset with an arbitrary
/// reconstruction function (test seam for model-independent checks).
pub fn mse_over_with(
    dataset: &Dataset,
    mut reconstruct: impl FnMut(&crate::dataset::ResponseRecord) -> Array2<f32>,
) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut total = 0.0f64;
    for r in &dataset.records {
        total += reconstruction_loss(&reconstruct(r), &r.image);
    }
    Ok(total / dataset.len() as f64)
}

/// Mean per-pixel squared reconstruction error of the posterior-mean
/// reconstruction over `dataset`.
pub fn reconstruction_mse_over(
    dataset: &Dataset,
    trained: &TrainedModel,
) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut total = 0.0f64;
    for r in &dataset.records {
        let recon = infer::reconstruct(trained, &r.image, &r.particle)?;
        total += reconstruction_loss(&recon, &r.image);
    }
    Ok(total / dataset.len() as f64)
}

/// MSE of predicting the per-pixel mean image of `train` on every record
/// of `eval`; the no-model baseline that any useful model must beat.
pub fn mean_image_baseline_mse(train: &Dataset, eval: &Dataset) -> Result<f64, EvalError> {
    if train.is_empty() || eval.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut mean = Array2::<f64>::zeros((crate::props::GRID, crate::props::GRID));
    for r in &train.records {
        mean.zip_mut_with(&r.image, |m, &v| *m += v as f64);
    }
    mean.mapv_inplace(|v| v / train.len() as f64);
    let mean_f32 = mean.mapv(|v| v as f32);
    mse_over_with(eval, |_| mean_f32.clone())
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (ties share the mean rank).
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut end = k + 1;
        while end < n && values[order[end]] == values[order[k]] {
            end += 1;
        }
        let avg = (k + end - 1) as f64 / 2.0 + 1.0;
        for &idx in &order[k..end] {
            out[idx] = avg;
        }
        k = end;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComAxis {
    X,
    Y,
}

/// Spearman correlation between sequence position and the center of mass
/// along `axis` over an ordered image sequence.
pub fn traversal_monotonicity(images: &[Array2<f32>], axis: ComAxis) -> Result<f64, EvalError> {
    if images.len() < 3 {
        return Err(EvalError::TooFewImages(images.len()));
    }
    let mut coms = Vec::with_capacity(images.len());
    for img in images {
        let (cx, cy) = center_of_mass(img)?;
        coms.push(match axis {
            ComAxis::X => cx,
            ComAxis::Y => cy,
        });
    }
    let idx: Vec<f64> = (0..images.len()).map(|i| i as f64).collect();
    Ok(spearman(&idx, &coms))
}

// ---------------------------------------------------------------------------
// Disentanglement probe
// ---------------------------------------------------------------------------

/// Fixes `(w*, c)` from a reference generation and redraws `z` from the
/// prior `n_draws` times; returns the standard deviation of the measured
/// center of mass (x, y) across draws, in pixels.
pub fn disentanglement_probe(
    trained: &TrainedModel,
    particle: &crate::dataset::ParticleVector,
    targets: &[f64],
    n_draws: usize,
    seed: u64,
    wopt: &WOptimizerConfig,
) -> Result<(f64, f64), EvalError> {
    if n_draws == 0 {
        return Err(EvalError::EmptyInput);
    }
    let model = &trained.model;
    let c = model.encode_particle_c(&trained.normalized_particle(particle)).map_err(InferError::from)?;
    let opt = infer::optimize_w(model, targets, wopt)?;
    let dim_z = model.config.dim_z;
    let mut xs = Vec::with_capacity(n_draws);
    let mut ys = Vec::with_capacity(n_draws);
    for i in 0..n_draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let z = Array1::from_shape_fn(dim_z, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        let img = trained.postprocess_image(&model.decode(&opt.w, &z, &c).map_err(InferError::from)?);
        let (cx, cy) = center_of_mass(&img)?;
        xs.push(cx);
        ys.push(cy);
    }
    let std = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Ok((std(&xs), std(&ys)))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIdentity {
    pub path: String,
    pub architecture: String,
    pub dim_w: usize,
    pub dim_z: usize,
    pub dim_c: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalStat {
    pub dim: usize,
    pub property: String,
    pub axis: ComAxis,
    pub rho_per_context: Vec<f64>,
    pub mean_abs_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub report_version: u32,
    pub checkpoint: CheckpointIdentity,
    pub counts: ReportCounts,
    pub evaluation_seed: u64,
    pub reconstruction_mse: f64,
    pub property_mae: Vec<f64>,
    pub per_channel_wasserstein: [f64; 5],
    pub mean_wasserstein: f64,
    pub reference_channel_std: [f64; 5],
    pub normalized_wasserstein: [f64; 5],
    pub mean_normalized_wasserstein: f64,
    pub traversal_spearman: Vec<TraversalStat>,
    pub disentanglement_com_std: ComStd,
    pub traversal_emitted: bool,
    pub graymaps: Vec<GraymapInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub reference: usize,
    pub generated: usize,
    pub reconstructions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComStd {
    pub x: f64,
    pub y: f64,
    pub n_draws: usize,
}

/// Everything emit_report writes beside the JSON summary.
pub struct EvalArtifacts {
    pub channels_reference: Vec<ChannelValues>,
    pub channels_generated: Vec<ChannelValues>,
    /// (original, reconstruction) pairs for the side-by-side grid.
    pub recon_pairs: Vec<(Array2<f32>, Array2<f32>)>,
    pub traversal_strips: Vec<(String, Vec<Array2<f32>>)>,
}

/// Writes `report.json`, `channels.csv`, and the graymap grids into
/// `out_dir`, recording each grid's pixel map in the report.
pub fn emit_report(
    report: &mut EvaluationReport,
    artifacts: &EvalArtifacts,
    out_dir: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;

    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("channels.csv"))?);
    writeln!(csv, "side,index,ch1,ch2,ch3,ch4,ch5")?;
    for (side, rows) in [
        ("reference", &artifacts.channels_reference),
        ("generated", &artifacts.channels_generated),
    ] {
        for (i, ch) in rows.iter().enumerate() {
            writeln!(
                csv,
                "{side},{i},{},{},{},{},{}",
                ch.0[0], ch.0[1], ch.0[2], ch.0[3], ch.0[4]
            )?;
        }
    }
    csv.flush()?;

    report.graymaps.clear();
    if !artifacts.recon_pairs.is_empty() {
        let mut tiles = Vec::with_capacity(artifacts.recon_pairs.len() * 2);
        for (orig, recon) in &artifacts.recon_pairs {
            tiles.push(orig.clone());
            tiles.push(recon.clone());
        }
        let info = pgm::write_grid(out_dir.join("reconstructions.pgm"), &tiles, 2)?;
        report.graymaps.push(info);
    }
    report.traversal_emitted = !artifacts.traversal_strips.is_empty();
    for (name, strip) in &artifacts.traversal_strips {
        let file = format!("traversal_{name}.pgm");
        let info = pgm::write_grid(out_dir.join(&file), strip, strip.len())?;
        report.graymaps.push(info);
    }

    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Full protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocolConfig {
    pub n_generate: usize,
    pub n_z_draws: usize,
    pub traversal_points: usize,
    pub traversal_min: f64,
    pub traversal_max: f64,
    pub traversal_contexts: usize,
    pub seed: u64,
}

impl Default for EvalProtocolConfig {
    fn default() -> Self {
        EvalProtocolConfig {
            n_generate: 1000,
            n_z_draws: 50,
            traversal_points: 11,
            traversal_min: -2.0,
            traversal_max: 2.0,
            traversal_contexts: 10,
            seed: 0,
        }
    }
}

/// Generates one sample per request index by cycling the test records
/// (particle and property targets taken from each record), reusing the
/// optimized `w` per distinct record.
pub fn generate_against_dataset(
    trained: &TrainedModel,
    reference: &Dataset,
    n_generate: usize,
    seed: u64,
    wopt: &WOptimizerConfig,
) -> Result<Vec<Array2<f32>>, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let model = &trained.model;
    let spec = &model.property_spec;
    let n_ref = reference.len();
    let mut w_cache: Vec<Option<Array1<f32>>> = vec![None; n_ref];
    let mut c_cache: Vec<Option<Array1<f32>>> = vec![None; n_ref];
    let mut out = Vec::with_capacity(n_generate);
    for k in 0..n_generate {
        let ri = k % n_ref;
        let record = &reference.records[ri];
        if w_cache[ri].is_none() {
            let targets = crate::props::property_vector(&record.image, spec)?;
            let opt = infer::optimize_w(model, &targets, wopt)?;
            w_cache[ri] = Some(opt.w);
            let c = model
                .encode_particle_c(&trained.normalized_particle(&record.particle))
                .map_err(InferError::from)?;
            c_cache[ri] = Some(c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let z = Array1::from_shape_fn(model.config.dim_z, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        let img = model
            .decode(w_cache[ri].as_ref().unwrap(), &z, c_cache[ri].as_ref().unwrap())
            .map_err(InferError::from)?;
        out.push(trained.postprocess_image(&img));
    }
    Ok(out)
}

/// The property axis measured during traversal of a controlled dimension:
/// com_x tracks columns, com_y tracks rows, anything else defaults to x.
fn axis_for_property(name: &str) -> ComAxis {
    if name == "com_y" {
        ComAxis::Y
    } else {
        ComAxis::X
    }
}

/// Runs the full evaluation protocol against a held-out dataset.
pub fn evaluate_checkpoint(
    trained: &TrainedModel,
    test: &Dataset,
    checkpoint_path: &str,
    protocol: &EvalProtocolConfig,
    wopt: &WOptimizerConfig,
) -> Result<(EvaluationReport, EvalArtifacts), EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let model = &trained.model;
    let spec = &model.property_spec;

    // reconstruction quality and property recovery from posteriors
    let reconstruction_mse = reconstruction_mse_over(test, trained)?;
    let mut abs_err = vec![0.0f64; spec.len()];
    let mut recon_pairs = Vec::new();
    for (i, r) in test.records.iter().enumerate() {
        let pre = trained.preprocess_image(&r.image);
        let (w_mean, _) = model.encode_image_w(&pre).map_err(InferError::from)?;
        let preds = model.property_decode(&w_mean);
        let targets = crate::props::property_vector(&r.image, spec)?;
        for (k, t) in targets.iter().enumerate() {
            abs_err[k] += (preds[k] as f64 - t).abs();
        }
        if i < 8 {
            recon_pairs.push((r.image.clone(), infer::reconstruct(trained, &r.image, &r.particle)?));
        }
    }
    let property_mae: Vec<f64> =
        abs_err.iter().map(|e| e / test.len() as f64).collect();

    // distribution fidelity of generated samples
    let generated =
        generate_against_dataset(trained, test, protocol.n_generate, protocol.seed, wopt)?;
    let reference_images: Vec<Array2<f32>> = test.images().cloned().collect();
    let cw = channel_wasserstein(&generated, &reference_images)?;
    let ref_std = channel_std(&reference_images);
    let mut normalized = [0.0f64; 5];
    for k in 0..5 {
        normalized[k] = cw.per_channel[k] / ref_std[k].max(1e-12);
    }
    let mean_normalized = normalized.iter().sum::<f64>() / 5.0;

    // traversal monotonicity per controlled dimension
    let mut traversal_stats = Vec::new();
    let mut traversal_strips = Vec::new();
    let values: Vec<f64> = (0..protocol.traversal_points)
        .map(|i| {
            protocol.traversal_min
                + (protocol.traversal_max - protocol.traversal_min) * i as f64
                    / (protocol.traversal_points - 1).max(1) as f64
        })
        .collect();
    for dim in 0..spec.len() {
        let axis = axis_for_property(&spec.names[dim]);
        let mut rhos = Vec::with_capacity(protocol.traversal_contexts);
        let mut last_strip = None;
        for ctx in 0..protocol.traversal_contexts {
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed ^ 0x7261766572736171);
            rng.set_stream((dim * protocol.traversal_contexts + ctx) as u64 + 1);
            let z = Array1::from_shape_fn(model.config.dim_z, |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            });
            let ri = (ctx * 7919) % test.len();
            let c = model
                .encode_particle_c(
                    &trained.normalized_particle(&test.records[ri].particle),
                )
                .map_err(InferError::from)?;
            let w = Array1::zeros(model.config.dim_w);
            let strip = infer::traverse(trained, &w, &z, &c, dim, &values)?;
            rhos.push(traversal_monotonicity(&strip, axis)?);
            last_strip = Some(strip);
        }
        let mean_abs_rho = rhos.iter().map(|r| r.abs()).sum::<f64>() / rhos.len() as f64;
        traversal_stats.push(TraversalStat {
            dim,
            property: spec.names[dim].clone(),
            axis,
            rho_per_context: rhos,
            mean_abs_rho,
        });
        traversal_strips.push((spec.names[dim].clone(), last_strip.unwrap()));
    }

    // z-independence probe on the first test record
    let probe_record = &test.records[0];
    let probe_targets = crate::props::property_vector(&probe_record.image, spec)?;
    let (std_x, std_y) = disentanglement_probe(
        trained,
        &probe_record.particle,
        &probe_targets,
        protocol.n_z_draws,
        protocol.seed ^ 0x70726f6265,
        wopt,
    )?;

    let report = EvaluationReport {
        report_version: 1,
        checkpoint: CheckpointIdentity {
            path: checkpoint_path.to_string(),
            architecture: match model.config.architecture {
                crate::model::Backbone::Conv => "conv".into(),
                crate::model::Backbone::Mlp => "mlp".into(),
            },
            dim_w: model.config.dim_w,
            dim_z: model.config.dim_z,
            dim_c: model.config.dim_c,
            seed: model.config.seed,
        },
        counts: ReportCounts {
            reference: test.len(),
            generated: generated.len(),
            reconstructions: test.len(),
        },
        evaluation_seed: protocol.seed,
        reconstruction_mse,
        property_mae,
        per_channel_wasserstein: cw.per_channel,
        mean_wasserstein: cw.mean,
        reference_channel_std: ref_std,
        normalized_wasserstein: normalized,
        mean_normalized_wasserstein: mean_normalized,
        traversal_spearman: traversal_stats,
        disentanglement_com_std: ComStd { x: std_x, y: std_y, n_draws: protocol.n_z_draws },
        traversal_emitted: false,
        graymaps: Vec::new(),
    };
    let artifacts = EvalArtifacts {
        channels_reference: channel_matrix(&reference_images),
        channels_generated: channel_matrix(&generated),
        recon_pairs,
        traversal_strips,
    };
    Ok((report, artifacts))
}
