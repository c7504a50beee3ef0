//! Batch entry points: synthesize, train, generate, traverse, evaluate,
//! inspect. Every command resolves its JSON run configuration (strict
//! unknown-key rejection), writes the fully-resolved copy beside its
//! outputs, and is deterministic given flags and seeds.

use crate::container;
use crate::dataset::{
    load_dataset, save_dataset, synthesize_toy_dataset, Dataset, ImageTransform, ParticleVector,
    ToyShowerConfig, PARTICLE_DIM,
};
use crate::eval::{self, EvalProtocolConfig};
use crate::infer::{self, GenerationRequest, WOptimizerConfig};
use crate::model::{load_checkpoint, MaskMatrix, ModelConfig};
use crate::props::{center_of_mass, total_deposit, PropertySpec};
use crate::train::{LossWeights, TrainConfig};
use anyhow::{anyhow, Context};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration: exit code 2.
    Usage(String),
    /// Failure while running: exit code 1.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub properties: PropertiesSection,
    pub inference: WOptimizerConfig,
    pub evaluation: EvalProtocolConfig,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synth: SynthSection,
    pub image_transform: ImageTransform,
    pub split: SplitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub seed: u64,
    pub shower: ToyShowerConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { n: 5000, seed: 0, shower: ToyShowerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train: 0.8, val: 0.1, test: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    pub validation_fraction: f64,
    pub c_warmup_epochs: usize,
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            early_stop_patience: t.early_stop_patience,
            validation_fraction: t.validation_fraction,
            c_warmup_epochs: t.c_warmup_epochs,
            weights: LossWeights::default(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            early_stop_patience: self.early_stop_patience,
            validation_fraction: self.validation_fraction,
            c_warmup_epochs: self.c_warmup_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PropertiesSection {
    pub spec: PropertySpec,
    /// Defaults to the identity-prefix mask (property i owned by w_i).
    pub mask: Option<MaskMatrix>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| usage(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    /// Same config with every default materialized.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.model = self.model.resolved();
        if out.properties.mask.is_none() {
            out.properties.mask = Some(MaskMatrix::identity_prefix(
                self.properties.spec.len(),
                self.model.dim_w,
            ));
        }
        out
    }

    pub fn mask(&self) -> MaskMatrix {
        self.properties
            .mask
            .clone()
            .unwrap_or_else(|| {
                MaskMatrix::identity_prefix(self.properties.spec.len(), self.model.dim_w)
            })
    }
}

fn write_resolved_config(config: &RunConfig, path: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(&config.resolved())
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `<file>.run.json` for file outputs, `<dir>/run.json` for directories.
fn sibling_run_json(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        PathBuf::from(format!("{}.run.json", out.display()))
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(
    n: Option<usize>,
    seed: Option<u64>,
    config_path: Option<&Path>,
    out: &Path,
) -> CliResult {
    let mut config = RunConfig::load(config_path)?;
    if let Some(n) = n {
        config.data.synth.n = n;
    }
    if let Some(seed) = seed {
        config.data.synth.seed = seed;
    }
    config
        .data
        .synth
        .shower
        .validate()
        .map_err(|e| usage(e.to_string()))?;

    let dataset = synthesize_toy_dataset(
        config.data.synth.n,
        &config.data.synth.shower,
        config.data.synth.seed,
    )?;
    save_dataset(&dataset, out)?;
    write_resolved_config(&config, &sibling_run_json(out, false))?;

    let deposits: Vec<f64> = dataset.images().map(total_deposit).collect();
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &d in &deposits {
        min = min.min(d);
        max = max.max(d);
        sum += d;
    }
    println!("wrote {} records to {}", dataset.len(), out.display());
    if dataset.is_empty() {
        println!("deposit: n/a (empty dataset)");
    } else {
        println!(
            "deposit per record: mean {:.2}, min {:.2}, max {:.2}",
            sum / deposits.len() as f64,
            min,
            max
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(config_path: Option<&Path>, data: &Path, out_dir: &Path) -> CliResult {
    let config = RunConfig::load(config_path)?;
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_resolved_config(&config, &sibling_run_json(out_dir, true))?;

    let checkpoint_path = out_dir.join("checkpoint.zdc1");
    let result = crate::train::train(
        &dataset,
        &config.model,
        &config.properties.spec,
        &config.mask(),
        &config.train.train_config(),
        &config.train.weights,
        config.data.image_transform,
        Some(&checkpoint_path),
        |e| {
            println!(
                "epoch {:3}: total {:.4}  recon {:.4}  kl_w {:.4}  kl_z {:.4}  prop {:.5}  \
                 val_recon {:.4}  val_prop {:.5}  ({:.1}s)",
                e.epoch, e.total, e.recon, e.kl_w, e.kl_z, e.prop, e.val_recon, e.val_prop,
                e.seconds
            );
        },
    );
    let (_, history) = result?;
    crate::train::write_history_csv(&history, out_dir.join("history.csv"))?;
    if history.excluded_zero_deposit > 0 {
        println!("excluded {} zero-deposit records", history.excluded_zero_deposit);
    }
    println!(
        "best epoch {} of {}; checkpoint at {}",
        history.best_epoch,
        history.epochs.len(),
        checkpoint_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn parse_particles(arg: &str) -> Result<(Vec<ParticleVector>, Option<Dataset>), CliError> {
    let path = Path::new(arg);
    if path.exists() {
        let ds = load_dataset(path)?;
        if ds.is_empty() {
            return Err(usage("particle dataset is empty"));
        }
        let particles = ds.records.iter().map(|r| r.particle).collect();
        return Ok((particles, Some(ds)));
    }
    // inline JSON: one particle or a list of particles
    if let Ok(many) = serde_json::from_str::<Vec<[f32; PARTICLE_DIM]>>(arg) {
        if many.is_empty() {
            return Err(usage("empty particle list"));
        }
        return Ok((many.into_iter().map(ParticleVector).collect(), None));
    }
    if let Ok(one) = serde_json::from_str::<[f32; PARTICLE_DIM]>(arg) {
        return Ok((vec![ParticleVector(one)], None));
    }
    Err(usage(format!(
        "--particles must be a dataset file or inline JSON with {PARTICLE_DIM} numbers per particle; got {arg:?}"
    )))
}

fn parse_targets(
    arg: &str,
    particles: &[ParticleVector],
    source: Option<&Dataset>,
    spec: &PropertySpec,
) -> Result<Vec<Vec<f64>>, CliError> {
    let p = spec.len();
    if arg == "from-records" {
        let ds = source.ok_or_else(|| {
            usage("--targets from-records requires --particles to be a dataset file")
        })?;
        return ds
            .records
            .iter()
            .map(|r| crate::props::property_vector(&r.image, spec).map_err(CliError::from))
            .collect();
    }
    let rows: Vec<Vec<f64>> = if let Ok(rows) = serde_json::from_str::<Vec<Vec<f64>>>(arg) {
        rows
    } else if let Ok(row) = serde_json::from_str::<Vec<f64>>(arg) {
        vec![row]
    } else {
        return Err(usage(format!("--targets must be JSON or \"from-records\"; got {arg:?}")));
    };
    for row in &rows {
        if row.len() != p {
            return Err(usage(format!("each target row needs {p} values, got {}", row.len())));
        }
    }
    match rows.len() {
        1 => Ok(vec![rows[0].clone(); particles.len()]),
        n if n == particles.len() => Ok(rows),
        n => Err(usage(format!("{n} target rows for {} particles", particles.len()))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_generate(
    checkpoint: &Path,
    particles_arg: &str,
    targets_arg: &str,
    n: usize,
    seed: u64,
    out: &Path,
    postproc_threshold: Option<f32>,
    config_path: Option<&Path>,
) -> CliResult {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if let Some(t) = postproc_threshold {
        if !(t >= 0.0) {
            return Err(usage("--postproc-threshold must be >= 0"));
        }
    }
    let config = RunConfig::load(config_path)?;
    let trained = load_checkpoint(checkpoint)?;
    let (particles, source) = parse_particles(particles_arg)?;
    let targets = parse_targets(targets_arg, &particles, source.as_ref(), &trained.model.property_spec)?;
    // absent flag is the identity threshold
    let threshold = postproc_threshold.unwrap_or(0.0);

    let spec_len = trained.model.property_spec.len();
    let dims = (
        trained.model.config.dim_w,
        trained.model.config.dim_z,
        trained.model.config.dim_c,
    );
    let total = particles.len() * n;
    let mut images = Vec::with_capacity(total * crate::model::IMAGE_PIXELS);
    let mut particles_flat = Vec::with_capacity(total * PARTICLE_DIM);
    let mut targets_flat = Vec::with_capacity(total * spec_len);
    let mut w_flat = Vec::with_capacity(total * dims.0);
    let mut z_flat = Vec::with_capacity(total * dims.1);
    let mut c_flat = Vec::with_capacity(total * dims.2);

    for (k, (particle, target)) in particles.iter().zip(&targets).enumerate() {
        let request = GenerationRequest {
            particle: particle.0,
            targets: target.clone(),
            n_samples: n,
            seed: seed.wrapping_add(k as u64),
        };
        let samples = infer::generate(&trained, &request, &config.inference)
            .map_err(|e| match e {
                infer::InferError::BadRequest(msg) => usage(msg),
                other => CliError::Runtime(other.into()),
            })?;
        let mut com_sum = (0.0f64, 0.0f64);
        let mut com_count = 0usize;
        for (img, z) in samples.images.iter().zip(&samples.z_draws) {
            let processed = infer::postprocess(img, threshold);
            if let Ok((cx, cy)) = center_of_mass(&processed) {
                com_sum.0 += cx;
                com_sum.1 += cy;
                com_count += 1;
            }
            images.extend(processed.iter().copied());
            particles_flat.extend_from_slice(&particle.0);
            targets_flat.extend(target.iter().map(|&t| t as f32));
            w_flat.extend(samples.w.iter().copied());
            z_flat.extend(z.iter().copied());
            c_flat.extend(samples.c.iter().copied());
        }
        let com_text = if com_count > 0 {
            format!("({:.2}, {:.2})", com_sum.0 / com_count as f64, com_sum.1 / com_count as f64)
        } else {
            "n/a (no deposit)".to_string()
        };
        println!("request {k}: targets {target:?} -> mean measured CoM {com_text}");
    }

    let metadata = serde_json::json!({
        "format_kind": "samples",
        "checkpoint": checkpoint.display().to_string(),
        "n_requests": particles.len(),
        "n_samples_per_request": n,
        "seed": seed,
        "postproc_threshold": threshold,
        "property_names": trained.model.property_spec.names,
    });
    let g = crate::props::GRID;
    let arrays = vec![
        container::NamedArray::f32("images", vec![total, g, g], images),
        container::NamedArray::f32("particles", vec![total, PARTICLE_DIM], particles_flat),
        container::NamedArray::f32("targets", vec![total, spec_len], targets_flat),
        container::NamedArray::f32("w", vec![total, dims.0], w_flat),
        container::NamedArray::f32("z", vec![total, dims.1], z_flat),
        container::NamedArray::f32("c", vec![total, dims.2], c_flat),
    ];
    container::write_container(out, &metadata, &arrays)?;
    write_resolved_config(&config, &sibling_run_json(out, false))?;
    println!("wrote {total} samples to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// traverse
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_traverse(
    checkpoint: &Path,
    dim: usize,
    from: f64,
    to: f64,
    steps: usize,
    out_dir: &Path,
    config_path: Option<&Path>,
) -> CliResult {
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let config = RunConfig::load(config_path)?;
    let trained = load_checkpoint(checkpoint)?;
    if dim >= trained.model.config.dim_w {
        return Err(usage(format!(
            "--dim {dim} out of range; model has dim_w = {}",
            trained.model.config.dim_w
        )));
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let values: Vec<f64> = if steps == 1 {
        vec![from]
    } else {
        (0..steps).map(|i| from + (to - from) * i as f64 / (steps - 1) as f64).collect()
    };
    // neutral context: zero w and z, c from the training-mean particle
    // (which normalizes to the zero vector)
    let w = Array1::zeros(trained.model.config.dim_w);
    let z = Array1::zeros(trained.model.config.dim_z);
    let c = trained
        .model
        .encode_particle_c(&Array1::zeros(PARTICLE_DIM))
        .map_err(anyhow::Error::from)?;
    let strip = infer::traverse(&trained, &w, &z, &c, dim, &values)
        .map_err(anyhow::Error::from)?;

    let info = crate::pgm::write_grid(out_dir.join("strip.pgm"), &strip, strip.len())?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("com.csv"))?);
    writeln!(csv, "step,value,com_x,com_y").map_err(anyhow::Error::from)?;
    for (i, (v, img)) in values.iter().zip(&strip).enumerate() {
        let (cx, cy) = match center_of_mass(img) {
            Ok(c) => c,
            Err(_) => (f64::NAN, f64::NAN),
        };
        writeln!(csv, "{i},{v},{cx},{cy}").map_err(anyhow::Error::from)?;
    }
    csv.flush().map_err(anyhow::Error::from)?;
    write_resolved_config(&config, &sibling_run_json(out_dir, true))?;

    println!("wrote {} traversal frames to {}", strip.len(), out_dir.display());
    println!("pixel map: [{:.3}, {:.3}] -> [0, 255]", info.min, info.max);
    if strip.len() >= 3 {
        match (
            eval::traversal_monotonicity(&strip, eval::ComAxis::X),
            eval::traversal_monotonicity(&strip, eval::ComAxis::Y),
        ) {
            (Ok(rx), Ok(ry)) => println!("spearman rho: x {rx:.4}, y {ry:.4}"),
            _ => println!("spearman rho: n/a (some frames have no deposit)"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
    config_path: Option<&Path>,
) -> CliResult {
    let config = RunConfig::load(config_path)?;
    let trained = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let (mut report, artifacts) = eval::evaluate_checkpoint(
        &trained,
        &dataset,
        &checkpoint.display().to_string(),
        &config.evaluation,
        &config.inference,
    )?;
    eval::emit_report(&mut report, &artifacts, out_dir)?;
    write_resolved_config(&config, &sibling_run_json(out_dir, true))?;

    println!("reconstruction MSE: {:.6}", report.reconstruction_mse);
    println!("property MAE: {:?}", report.property_mae);
    println!(
        "channel wasserstein: mean {:.4} (normalized {:.4})",
        report.mean_wasserstein, report.mean_normalized_wasserstein
    );
    for t in &report.traversal_spearman {
        println!("traversal {} (dim {}): mean |rho| {:.4}", t.property, t.dim, t.mean_abs_rho);
    }
    println!(
        "z-redraw CoM std: x {:.3} px, y {:.3} px over {} draws",
        report.disentanglement_com_std.x,
        report.disentanglement_com_std.y,
        report.disentanglement_com_std.n_draws
    );
    println!("report written to {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

pub fn cmd_inspect(file: &Path) -> CliResult {
    let c = container::read_container(file)?;
    println!("{}: {}", file.display(), c.format_kind().unwrap_or("(no format_kind)"));
    let meta =
        serde_json::to_string_pretty(&c.metadata).unwrap_or_else(|_| "(unprintable)".into());
    println!("metadata: {meta}");
    println!("{} arrays:", c.arrays.len());
    for a in &c.arrays {
        println!(
            "  {:40} {:>4} {:?} ({} bytes)",
            a.name,
            match a.data {
                container::ArrayData::F32(_) => "f32",
                container::ArrayData::F64(_) => "f64",
                container::ArrayData::I64(_) => "i64",
            },
            a.shape,
            a.data.len() * a.data.dtype().element_size(),
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip() {
        let config = RunConfig::default();
        let resolved = config.resolved();
        assert_eq!(resolved.model.hidden_widths, Some(vec![32, 64, 128, 128]));
        assert!(resolved.properties.mask.is_some());
        let json = serde_json::to_string(&resolved).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, resolved);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"data": {"synht": {}}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad_top = r#"{"modle": {}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_top).is_err());
        let good = r#"{"model": {"dim_w": 8}, "train": {"epochs": 3}}"#;
        let parsed: RunConfig = serde_json::from_str(good).unwrap();
        assert_eq!(parsed.train.epochs, 3);
    }

    #[test]
    fn parse_inline_particles() {
        let (one, src) = parse_particles("[0.1,0,1.5,0,0,0.5,1,0,42]").unwrap();
        assert!(src.is_none());
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].energy(), 42.0);
        let (two, _) =
            parse_particles("[[0,0,1,0,0,0.5,1,0,10],[0.5,0,1,0.2,0,0.5,1,0,20]]").unwrap();
        assert_eq!(two.len(), 2);
        assert!(matches!(parse_particles("nonsense"), Err(CliError::Usage(_))));
    }

    #[test]
    fn parse_target_rows() {
        let spec = PropertySpec::default();
        let particles = vec![ParticleVector([0.0; PARTICLE_DIM]); 3];
        // one row broadcasts to all particles
        let t = parse_targets("[0.1, -0.2]", &particles, None, &spec).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[2], vec![0.1, -0.2]);
        // exact row count is kept
        let t =
            parse_targets("[[0,0],[0.5,0.5],[-0.5,0.5]]", &particles, None, &spec).unwrap();
        assert_eq!(t[1], vec![0.5, 0.5]);
        // row-count and width mismatches are usage errors
        assert!(matches!(
            parse_targets("[[0,0],[1,1]]", &particles, None, &spec),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_targets("[0.1]", &particles, None, &spec),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_targets("from-records", &particles, None, &spec),
            Err(CliError::Usage(_))
        ));
    }
}
