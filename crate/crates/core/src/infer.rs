//! Generation and inspection of trained models: the three-step generation
//! recipe (particle -> c, target properties -> optimized w, prior -> z),
//! latent traversal, posterior-mean reconstruction, and threshold
//! post-processing.

use crate::dataset::ParticleVector;
use crate::model::{ModelError, TrainedModel};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid generation request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How the w optimizer starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WInit {
    Zero,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WOptimizerConfig {
    pub steps: usize,
    pub step_size: f64,
    pub init: WInit,
    pub tolerance: f64,
    /// Ridge coefficient anchoring w near the prior; 0 disables it.
    pub ridge: f64,
}

impl Default for WOptimizerConfig {
    // the step budget must cover a few units of w distance at property-head
    // slopes of ~0.1-0.3 per unit; 500 x 0.1 converges for targets at the
    // edge of the reachable range where 200 x 0.05 stalls short
    fn default() -> Self {
        WOptimizerConfig {
            steps: 500,
            step_size: 0.1,
            init: WInit::Zero,
            tolerance: 1e-5,
            ridge: 1e-3,
        }
    }
}

impl WOptimizerConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if self.steps == 0 || !(self.step_size > 0.0) {
            return Err(InferError::BadRequest(
                "w optimizer requires steps >= 1 and step_size > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WOptimResult {
    pub w: Array1<f32>,
    /// Best objective seen: property MSE plus the ridge term.
    pub objective: f64,
    /// Property MSE component at the returned w.
    pub property_mse: f64,
}

/// Gradient descent on `property_mse(w, targets) + ridge * |w|^2`,
/// returning the best iterate seen; the reported objective never exceeds
/// the objective at initialization.
pub fn optimize_w(
    model: &crate::model::CorrVae<f32>,
    targets: &[f64],
    config: &WOptimizerConfig,
) -> Result<WOptimResult, InferError> {
    config.validate()?;
    if targets.len() != model.p() {
        return Err(InferError::BadRequest(format!(
            "{} targets for {} properties",
            targets.len(),
            model.p()
        )));
    }
    let targets_f: Vec<f32> = targets.iter().map(|&t| t as f32).collect();
    let dim_w = model.config.dim_w;
    let mut w: Array1<f32> = match config.init {
        WInit::Zero => Array1::zeros(dim_w),
        WInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array1::from_shape_fn(dim_w, |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
        }
    };

    let mut best: Option<WOptimResult> = None;
    let step = config.step_size as f32;
    let ridge = config.ridge as f32;
    for _ in 0..=config.steps {
        let (mse, grad, _) = model.property_mse_grad(&w, &targets_f);
        let ridge_term = (ridge as f64) * w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let objective = mse + ridge_term;
        if !objective.is_finite() {
            return Err(InferError::Model(ModelError::NonFinite("w optimization".into())));
        }
        if best.as_ref().map_or(true, |b| objective < b.objective) {
            best = Some(WOptimResult { w: w.clone(), objective, property_mse: mse });
        }
        if best.as_ref().unwrap().objective <= config.tolerance {
            break;
        }
        let full_grad = &grad + &w.mapv(|v| 2.0 * ridge * v);
        w = &w - &full_grad.mapv(|g| step * g);
    }
    Ok(best.expect("at least one iterate evaluated"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub particle: [f32; crate::dataset::PARTICLE_DIM],
    /// Property targets in normalized space, one per property. They must
    /// be given explicitly (or copied from a reference record by the
    /// caller); nothing is derived from the particle kinematics.
    pub targets: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl GenerationRequest {
    fn validate(&self, p: usize) -> Result<(), InferError> {
        if self.n_samples == 0 {
            return Err(InferError::BadRequest("n_samples must be >= 1".into()));
        }
        if self.targets.len() != p {
            return Err(InferError::BadRequest(format!(
                "{} targets for {p} properties",
                self.targets.len()
            )));
        }
        for &t in &self.targets {
            if !t.is_finite() || t.abs() > crate::model::PROPERTY_BOUND {
                return Err(InferError::BadRequest(format!(
                    "target {t} outside [-1.5, 1.5]"
                )));
            }
        }
        if self.particle.iter().any(|v| !v.is_finite()) {
            return Err(InferError::BadRequest("non-finite particle".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSamples {
    /// Raw-space images, one per sample.
    pub images: Vec<Array2<f32>>,
    pub w: Array1<f32>,
    pub z_draws: Vec<Array1<f32>>,
    pub c: Array1<f32>,
    pub property_mse: f64,
}

/// The generation recipe: embed the particle into `c`, optimize `w`
/// toward the property targets, then decode one image per `z` draw from
/// the standard normal. Each sample draws `z` from its own seeded stream,
/// so output is deterministic in `(checkpoint, request)`.
pub fn generate(
    trained: &TrainedModel,
    request: &GenerationRequest,
    wopt: &WOptimizerConfig,
) -> Result<GeneratedSamples, InferError> {
    let model = &trained.model;
    request.validate(model.p())?;
    let particle = ParticleVector(request.particle);
    let c = model.encode_particle_c(&trained.normalized_particle(&particle))?;
    let opt = optimize_w(model, &request.targets, wopt)?;
    let dim_z = model.config.dim_z;

    let mut images = Vec::with_capacity(request.n_samples);
    let mut z_draws = Vec::with_capacity(request.n_samples);
    for i in 0..request.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        rng.set_stream(i as u64 + 1);
        let z = Array1::from_shape_fn(dim_z, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        let decoded = model.decode(&opt.w, &z, &c)?;
        images.push(trained.postprocess_image(&decoded));
        z_draws.push(z);
    }
    Ok(GeneratedSamples { images, w: opt.w, z_draws, c, property_mse: opt.property_mse })
}

/// Decodes a sweep of one `w` coordinate with everything else fixed,
/// returning raw-space images in sweep order.
pub fn traverse(
    trained: &TrainedModel,
    base_w: &Array1<f32>,
    base_z: &Array1<f32>,
    base_c: &Array1<f32>,
    dim_index: usize,
    values: &[f64],
) -> Result<Vec<Array2<f32>>, InferError> {
    let model = &trained.model;
    if dim_index >= model.config.dim_w {
        return Err(InferError::Model(ModelError::IndexOutOfRange {
            index: dim_index,
            dim: model.config.dim_w,
        }));
    }
    if values.is_empty() {
        return Err(InferError::BadRequest("traversal needs at least one value".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut w = base_w.clone();
        w[dim_index] = v as f32;
        let decoded = model.decode(&w, base_z, base_c)?;
        out.push(trained.postprocess_image(&decoded));
    }
    Ok(out)
}

/// Posterior-mean reconstruction (no sampling) in raw pixel space.
pub fn reconstruct(
    trained: &TrainedModel,
    image: &Array2<f32>,
    particle: &ParticleVector,
) -> Result<Array2<f32>, InferError> {
    let model = &trained.model;
    let pre = trained.preprocess_image(image);
    let (w_mean, _) = model.encode_image_w(&pre)?;
    let (z_mean, _) = model.encode_image_z(&pre)?;
    let c = model.encode_particle_c(&trained.normalized_particle(particle))?;
    let decoded = model.decode(&w_mean, &z_mean, &c)?;
    Ok(trained.postprocess_image(&decoded))
}

/// Zeroes every pixel below `threshold`; a stand-in cleanup that removes
/// low-intensity haze from generated responses.
pub fn postprocess(image: &Array2<f32>, threshold: f32) -> Array2<f32> {
    image.mapv(|v| if v < threshold { 0.0 } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageTransform, Normalization, PARTICLE_DIM};
    use crate::model::{
        init_model, Backbone, CorrVae, MaskMatrix, Mlp2, ModelConfig, HEAD_WIDTH,
    };
    use crate::nn::Dense;
    use crate::props::{Affine, PropertySpec, GRID};
    use rand::Rng;

    fn small_model() -> CorrVae<f32> {
        let spec = PropertySpec::default();
        let cfg = ModelConfig {
            dim_w: 4,
            dim_z: 3,
            dim_c: 2,
            architecture: Backbone::Mlp,
            hidden_widths: Some(vec![32, 16]),
            seed: 7,
        };
        let mask = MaskMatrix::identity_prefix(spec.len(), cfg.dim_w);
        init_model::<f32>(&cfg, &spec, &mask).unwrap()
    }

    fn trained_stub(model: CorrVae<f32>) -> TrainedModel {
        TrainedModel {
            model,
            normalization: Normalization {
                particle_mean: [0.0; PARTICLE_DIM],
                particle_std: [1.0; PARTICLE_DIM],
                image_transform: ImageTransform::Identity,
            },
            history: None,
        }
    }

    #[test]
    fn optimize_w_fixed_point_at_zero() {
        let model = small_model();
        // zero w through zero-bias heads predicts exactly the head output
        // at zero; targeting that value makes the initial objective zero
        let preds = model.property_decode(&Array1::zeros(4));
        let targets: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
        let result =
            optimize_w(&model, &targets, &WOptimizerConfig::default()).unwrap();
        assert_eq!(result.w, Array1::<f32>::zeros(4));
        assert_eq!(result.objective, 0.0);
    }

    /// Oracle: closed-form minimizer of (squash(a*w1) - t)^2 with the ridge
    /// disabled is w1 = 1.5 * atanh(t / 1.5) / a.
    #[test]
    fn optimize_w_linear_head_closed_form() {
        let spec = PropertySpec {
            names: vec!["com_x".into()],
            normalization: vec![Affine { scale: 1.0 / 21.5, offset: -1.0 }],
        };
        let cfg = ModelConfig {
            dim_w: 2,
            dim_z: 2,
            dim_c: 2,
            architecture: Backbone::Mlp,
            hidden_widths: Some(vec![16, 8]),
            seed: 1,
        };
        let mask = MaskMatrix { rows: vec![vec![1, 0]] };
        let mut model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        // exactly linear head via paired +a/-a ReLU units
        let a = 0.8f32;
        let mut l1 = Dense::<f32>::zeros(cfg.dim_w, HEAD_WIDTH);
        let mut l2 = Dense::<f32>::zeros(HEAD_WIDTH, 1);
        l1.weight[[0, 0]] = a;
        l1.weight[[0, 1]] = -a;
        l2.weight[[0, 0]] = 1.0;
        l2.weight[[1, 0]] = -1.0;
        model.prop_heads[0] = Mlp2 { l1, l2 };

        let t = 0.5f64;
        let expected = 1.5 * (t / 1.5).atanh() / a as f64;
        // random start: at w = 0 both paired ReLU units sit exactly on
        // their kink and the subgradient vanishes
        let config = WOptimizerConfig {
            ridge: 0.0,
            init: WInit::Random { seed: 11 },
            steps: 500,
            tolerance: 0.0,
            ..Default::default()
        };
        let result = optimize_w(&model, &[t], &config).unwrap();
        assert!(
            (result.w[0] as f64 - expected).abs() < 1e-3,
            "w1 {} vs closed form {expected}",
            result.w[0]
        );
        // the masked-out coordinate has zero gradient (ridge off) and must
        // stay exactly at its random initialization
        let mut init_rng = ChaCha8Rng::seed_from_u64(11);
        let init: Vec<f32> = (0..2)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut init_rng);
                v as f32
            })
            .collect();
        assert_eq!(result.w[1], init[1], "masked-out coordinate must not move");
    }

    #[test]
    fn optimize_w_best_iterate_monotonicity() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let targets: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let config = WOptimizerConfig::default();
            let result = optimize_w(&model, &targets, &config).unwrap();
            // objective at the zero init, with targets rounded to f32 the
            // same way the optimizer rounds them
            let preds = model.property_decode(&Array1::zeros(4));
            let init_obj = preds
                .iter()
                .zip(&targets)
                .map(|(&p, &t)| (p as f64 - (t as f32) as f64).powi(2))
                .sum::<f64>()
                / 2.0;
            assert!(result.objective <= init_obj + 1e-12);
        }
    }

    #[test]
    fn optimize_w_gradient_matches_finite_differences() {
        let model = small_model();
        let targets = [0.4f32, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0f32));
        let (_, grad, _) = model.property_mse_grad(&w, &targets);
        let eps = 1e-2f32; // f32 precision, smooth head
        for j in 0..4 {
            let mut wp = w.clone();
            wp[j] += eps;
            let mut wm = w.clone();
            wm[j] -= eps;
            let (lp, _, _) = model.property_mse_grad(&wp, &targets);
            let (lm, _, _) = model.property_mse_grad(&wm, &targets);
            let num = (lp - lm) / (2.0 * eps as f64);
            assert!(
                (num - grad[j] as f64).abs() < 1e-3,
                "dim {j}: numeric {num} vs analytic {}",
                grad[j]
            );
        }
    }

    #[test]
    fn generate_is_deterministic_and_nonnegative() {
        let trained = trained_stub(small_model());
        let request = GenerationRequest {
            particle: [0.1; PARTICLE_DIM],
            targets: vec![0.2, -0.1],
            n_samples: 3,
            seed: 9,
        };
        let a = generate(&trained, &request, &WOptimizerConfig::default()).unwrap();
        let b = generate(&trained, &request, &WOptimizerConfig::default()).unwrap();
        assert_eq!(a.images.len(), 3);
        for (ia, ib) in a.images.iter().zip(&b.images) {
            assert_eq!(ia.dim(), (GRID, GRID));
            assert!(ia.iter().all(|&v| v >= 0.0));
            for (x, y) in ia.iter().zip(ib.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // different z per sample
        assert_ne!(a.z_draws[0], a.z_draws[1]);
        let other = GenerationRequest { seed: 10, ..request };
        let c = generate(&trained, &other, &WOptimizerConfig::default()).unwrap();
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn generate_request_validation() {
        let trained = trained_stub(small_model());
        let wopt = WOptimizerConfig::default();
        let bad_n = GenerationRequest {
            particle: [0.0; PARTICLE_DIM],
            targets: vec![0.0, 0.0],
            n_samples: 0,
            seed: 0,
        };
        assert!(matches!(generate(&trained, &bad_n, &wopt), Err(InferError::BadRequest(_))));
        let bad_t = GenerationRequest {
            particle: [0.0; PARTICLE_DIM],
            targets: vec![2.0, 0.0],
            n_samples: 1,
            seed: 0,
        };
        assert!(matches!(generate(&trained, &bad_t, &wopt), Err(InferError::BadRequest(_))));
        let bad_len = GenerationRequest {
            particle: [0.0; PARTICLE_DIM],
            targets: vec![0.0],
            n_samples: 1,
            seed: 0,
        };
        assert!(matches!(generate(&trained, &bad_len, &wopt), Err(InferError::BadRequest(_))));
    }

    #[test]
    fn traverse_identity_and_length() {
        let trained = trained_stub(small_model());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0f32));
        let z = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0f32));
        let c = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0f32));

        let single = traverse(&trained, &w, &z, &c, 1, &[w[1] as f64]).unwrap();
        assert_eq!(single.len(), 1);
        let direct = trained.model.decode(&w, &z, &c).unwrap();
        assert_eq!(single[0], direct);

        let sweep = traverse(&trained, &w, &z, &c, 0, &[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(sweep.len(), 5);

        match traverse(&trained, &w, &z, &c, 99, &[0.0]) {
            Err(InferError::Model(ModelError::IndexOutOfRange { index: 99, dim: 4 })) => {}
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn reconstruct_shape_and_determinism() {
        let trained = trained_stub(small_model());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = Array2::from_shape_fn((GRID, GRID), |_| rng.random_range(0.0..5.0f32));
        let particle = ParticleVector([0.3; PARTICLE_DIM]);
        let a = reconstruct(&trained, &image, &particle).unwrap();
        let b = reconstruct(&trained, &image, &particle).unwrap();
        assert_eq!(a.dim(), (GRID, GRID));
        assert!(a.iter().all(|&v| v >= 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn postprocess_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = Array2::from_shape_fn((GRID, GRID), |_| rng.random_range(0.0..2.0f32));
        // threshold 0 is the identity on non-negative images
        assert_eq!(postprocess(&image, 0.0), image);
        // everything below the threshold vanishes
        let zeroed = postprocess(&image, 10.0);
        assert!(zeroed.iter().all(|&v| v == 0.0));
        // brute-force comparison
        let t = 0.7f32;
        let got = postprocess(&image, t);
        for ((r, c), &v) in image.indexed_iter() {
            let expected = if v < t { 0.0 } else { v };
            assert_eq!(got[[r, c]], expected);
        }
        // idempotence
        assert_eq!(postprocess(&got, t), got);
    }
}
