//! The three-latent-space response model.
//!
//! Two image encoders produce the posteriors of `w` (controllable code)
//! and `z` (residual code), a deterministic particle encoder produces `c`,
//! and the image decoder maps `(w, z, c)` to a non-negative 44x44 image.
//! A binary mask gates which `w` coordinates each property head sees; the
//! heads regress the normalized property targets and are reused at
//! inference time to optimize `w` toward requested targets.

use crate::container::{self, ContainerError, NamedArray};
use crate::dataset::{Normalization, PARTICLE_DIM};
use crate::nn::{
    center_crop, center_crop_backward, fl, relu, relu4, relu4_backward, relu_backward, squash,
    squash_backward, Conv2d, ConvTranspose2d, Dense,
};
use crate::props::{PropertySpec, GRID};
use ndarray::{concatenate, Array1, Array2, Array4, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const IMAGE_PIXELS: usize = GRID * GRID;
/// log-variances are clamped to this symmetric range everywhere.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Property heads squash their output into [-PROPERTY_BOUND, PROPERTY_BOUND].
pub const PROPERTY_BOUND: f64 = 1.5;
/// Hidden width of the particle encoder and the property heads.
pub const HEAD_WIDTH: usize = 64;

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;
/// Spatial size after the four stride-2 blocks: 44 -> 22 -> 11 -> 6 -> 3.
const CONV_FINAL_SPATIAL: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("invalid mask: {0}")]
    BadMask(String),
    #[error("checkpoint mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("latent index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Conv,
    Mlp,
}

/// Model shape parameters. `hidden_widths` means conv channels for the
/// conv backbone (exactly four blocks) and dense widths for the mlp
/// backbone; `None` picks the architecture default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim_w: usize,
    pub dim_z: usize,
    pub dim_c: usize,
    pub architecture: Backbone,
    pub hidden_widths: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim_w: 8,
            dim_z: 8,
            dim_c: 4,
            architecture: Backbone::Conv,
            hidden_widths: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn resolved_hidden_widths(&self) -> Vec<usize> {
        match (&self.hidden_widths, self.architecture) {
            (Some(w), _) => w.clone(),
            (None, Backbone::Conv) => vec![32, 64, 128, 128],
            (None, Backbone::Mlp) => vec![512, 256],
        }
    }

    /// Same config with defaults made explicit.
    pub fn resolved(&self) -> ModelConfig {
        ModelConfig { hidden_widths: Some(self.resolved_hidden_widths()), ..self.clone() }
    }

    pub fn latent_dim(&self) -> usize {
        self.dim_w + self.dim_z + self.dim_c
    }

    pub fn validate(&self, spec: &PropertySpec) -> Result<(), ModelError> {
        spec.validate().map_err(ModelError::BadConfig)?;
        if self.dim_w < spec.len() {
            return Err(ModelError::BadConfig(format!(
                "dim_w = {} must be at least the property count {}",
                self.dim_w,
                spec.len()
            )));
        }
        if self.dim_w == 0 || self.dim_z == 0 || self.dim_c == 0 {
            return Err(ModelError::BadConfig("latent dimensions must be >= 1".into()));
        }
        let widths = self.resolved_hidden_widths();
        match self.architecture {
            Backbone::Conv => {
                if widths.len() != 4 || widths.iter().any(|&w| w == 0) {
                    return Err(ModelError::BadConfig(
                        "conv backbone takes exactly four nonzero channel counts".into(),
                    ));
                }
            }
            Backbone::Mlp => {
                if widths.is_empty() || widths.iter().any(|&w| w == 0) {
                    return Err(ModelError::BadConfig(
                        "mlp backbone takes at least one nonzero hidden width".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Binary P x dim_w matrix; entry 1 routes a `w` coordinate into the
/// property head of that row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskMatrix {
    pub rows: Vec<Vec<u8>>,
}

impl MaskMatrix {
    /// Default assignment: property i is owned by w_i alone.
    pub fn identity_prefix(p: usize, dim_w: usize) -> Self {
        MaskMatrix {
            rows: (0..p)
                .map(|i| (0..dim_w).map(|j| u8::from(i == j)).collect())
                .collect(),
        }
    }

    pub fn p(&self) -> usize {
        self.rows.len()
    }

    pub fn dim_w(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self, p: usize, dim_w: usize) -> Result<(), ModelError> {
        if self.p() != p {
            return Err(ModelError::BadMask(format!(
                "mask has {} rows, expected one per property ({p})",
                self.p()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != dim_w {
                return Err(ModelError::BadMask(format!(
                    "mask row {i} has {} columns, expected dim_w = {dim_w}",
                    row.len()
                )));
            }
            if row.iter().any(|&b| b > 1) {
                return Err(ModelError::BadMask(format!("mask row {i} is not binary")));
            }
            if row.iter().all(|&b| b == 0) {
                return Err(ModelError::BadMask(format!("mask row {i} has no 1 entry")));
            }
        }
        Ok(())
    }
}

/// Per-example posterior parameters and reparameterized draws.
#[derive(Debug, Clone)]
pub struct LatentCodes<F> {
    pub w_mean: Array1<F>,
    pub w_logvar: Array1<F>,
    pub z_mean: Array1<F>,
    pub z_logvar: Array1<F>,
    pub c: Array1<F>,
    pub w_sample: Array1<F>,
    pub z_sample: Array1<F>,
}

/// `sample = mean + exp(logvar / 2) * noise`.
pub fn reparameterize<F: NdFloat>(
    mean: &Array1<F>,
    logvar: &Array1<F>,
    noise: &Array1<F>,
) -> Array1<F> {
    let half = fl::<F>(0.5);
    mean + &(logvar.mapv(|v| (v * half).exp()) * noise)
}

fn reparameterize_batch<F: NdFloat>(
    mean: &Array2<F>,
    logvar: &Array2<F>,
    noise: &Array2<F>,
) -> Array2<F> {
    let half = fl::<F>(0.5);
    mean + &(logvar.mapv(|v| (v * half).exp()) * noise)
}

fn clamp_logvar<F: NdFloat>(raw: &Array2<F>) -> Array2<F> {
    let hi = fl::<F>(LOGVAR_CLAMP);
    raw.mapv(|v| v.min(hi).max(-hi))
}

// ---------------------------------------------------------------------------
// Two-layer perceptron (particle encoder, property heads)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Mlp2<F> {
    pub l1: Dense<F>,
    pub l2: Dense<F>,
}

#[derive(Debug, Clone)]
pub struct Mlp2Cache<F> {
    x: Array2<F>,
    h: Array2<F>,
}

impl<F: NdFloat> Mlp2<F> {
    fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 { l1: Dense::init(in_dim, hidden, rng), l2: Dense::init(hidden, out_dim, rng) }
    }

    fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, Mlp2Cache<F>) {
        let h = relu(&self.l1.forward(x));
        let y = self.l2.forward(&h);
        (y, Mlp2Cache { x: x.clone(), h })
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        self.l2.forward(&relu(&self.l1.forward(x)))
    }

    fn backward(&self, cache: &Mlp2Cache<F>, gy: &Array2<F>, grads: &mut Mlp2<F>) -> Array2<F> {
        let gh = self.l2.backward(&cache.h, gy, &mut grads.l2);
        let gpre = relu_backward(&cache.h, &gh);
        self.l1.backward(&cache.x, &gpre, &mut grads.l1)
    }
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ImageEncoder<F> {
    Conv { blocks: Vec<Conv2d<F>>, head: Dense<F> },
    Mlp { hidden: Vec<Dense<F>>, head: Dense<F> },
}

#[derive(Debug, Clone)]
pub enum EncCache<F> {
    Conv {
        cols: Vec<Array2<F>>,
        xdims: Vec<(usize, usize, usize, usize)>,
        acts: Vec<Array4<F>>,
        flat: Array2<F>,
    },
    Mlp {
        inputs: Vec<Array2<F>>,
        acts: Vec<Array2<F>>,
        head_in: Array2<F>,
    },
}

impl<F: NdFloat> ImageEncoder<F> {
    fn init(cfg: &ModelConfig, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = cfg.resolved_hidden_widths();
        match cfg.architecture {
            Backbone::Conv => {
                let mut blocks = Vec::with_capacity(widths.len());
                let mut in_c = 1;
                for &out_c in &widths {
                    blocks.push(Conv2d::init(out_c, in_c, CONV_KERNEL, CONV_STRIDE, CONV_PAD, rng));
                    in_c = out_c;
                }
                let flat = in_c * CONV_FINAL_SPATIAL * CONV_FINAL_SPATIAL;
                ImageEncoder::Conv { blocks, head: Dense::init(flat, 2 * dim, rng) }
            }
            Backbone::Mlp => {
                let mut hidden = Vec::with_capacity(widths.len());
                let mut in_dim = IMAGE_PIXELS;
                for &w in &widths {
                    hidden.push(Dense::init(in_dim, w, rng));
                    in_dim = w;
                }
                ImageEncoder::Mlp { hidden, head: Dense::init(in_dim, 2 * dim, rng) }
            }
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            ImageEncoder::Conv { blocks, head } => ImageEncoder::Conv {
                blocks: blocks
                    .iter()
                    .map(|b| {
                        let (oc, ic, k, _) = b.weight.dim();
                        Conv2d::zeros(oc, ic, k, b.stride, b.padding)
                    })
                    .collect(),
                head: Dense::zeros(head.in_dim(), head.out_dim()),
            },
            ImageEncoder::Mlp { hidden, head } => ImageEncoder::Mlp {
                hidden: hidden.iter().map(|d| Dense::zeros(d.in_dim(), d.out_dim())).collect(),
                head: Dense::zeros(head.in_dim(), head.out_dim()),
            },
        }
    }

    /// `x` is the flattened preprocessed batch `[n, 1936]`. Returns
    /// `(mean, logvar_raw, cache)`; the caller clamps the logvar.
    fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, Array2<F>, EncCache<F>) {
        let n = x.nrows();
        match self {
            ImageEncoder::Conv { blocks, head } => {
                let mut cur = x
                    .to_owned()
                    .into_shape_with_order((n, 1, GRID, GRID))
                    .expect("image batch shape");
                let mut cols = Vec::with_capacity(blocks.len());
                let mut xdims = Vec::with_capacity(blocks.len());
                let mut acts = Vec::with_capacity(blocks.len());
                for block in blocks {
                    xdims.push(cur.dim());
                    let (y, col) = block.forward(&cur);
                    let a = relu4(&y);
                    cols.push(col);
                    acts.push(a.clone());
                    cur = a;
                }
                let flat_dim = head.in_dim();
                let flat = cur.into_shape_with_order((n, flat_dim)).expect("flat shape");
                let out = head.forward(&flat);
                let dim = head.out_dim() / 2;
                let mean = out.slice(ndarray::s![.., ..dim]).to_owned();
                let logvar = out.slice(ndarray::s![.., dim..]).to_owned();
                (mean, logvar, EncCache::Conv { cols, xdims, acts, flat })
            }
            ImageEncoder::Mlp { hidden, head } => {
                let mut inputs = Vec::with_capacity(hidden.len());
                let mut acts = Vec::with_capacity(hidden.len());
                let mut cur = x.clone();
                for layer in hidden {
                    inputs.push(cur.clone());
                    let a = relu(&layer.forward(&cur));
                    acts.push(a.clone());
                    cur = a;
                }
                let out = head.forward(&cur);
                let dim = head.out_dim() / 2;
                let mean = out.slice(ndarray::s![.., ..dim]).to_owned();
                let logvar = out.slice(ndarray::s![.., dim..]).to_owned();
                (mean, logvar, EncCache::Mlp { inputs, acts, head_in: cur })
            }
        }
    }

    /// `g_out` is the gradient of `[mean | logvar_raw]` concatenated.
    fn backward(&self, cache: &EncCache<F>, g_out: &Array2<F>, grads: &mut ImageEncoder<F>) {
        match (self, cache, grads) {
            (
                ImageEncoder::Conv { blocks, head },
                EncCache::Conv { cols, xdims, acts, flat },
                ImageEncoder::Conv { blocks: gblocks, head: ghead },
            ) => {
                let g_flat = head.backward(flat, g_out, ghead);
                let n = g_flat.nrows();
                let last = acts.last().expect("at least one conv block").dim();
                let mut g4 = g_flat.into_shape_with_order(last).expect("unflatten");
                debug_assert_eq!(last.0, n);
                for i in (0..blocks.len()).rev() {
                    let g_pre = relu4_backward(&acts[i], &g4);
                    g4 = blocks[i].backward(&cols[i], xdims[i], &g_pre, &mut gblocks[i]);
                }
            }
            (
                ImageEncoder::Mlp { hidden, head },
                EncCache::Mlp { inputs, acts, head_in },
                ImageEncoder::Mlp { hidden: ghidden, head: ghead },
            ) => {
                let mut g = head.backward(head_in, g_out, ghead);
                for i in (0..hidden.len()).rev() {
                    let g_pre = relu_backward(&acts[i], &g);
                    g = hidden[i].backward(&inputs[i], &g_pre, &mut ghidden[i]);
                }
            }
            _ => unreachable!("encoder cache/grads variant mismatch"),
        }
    }
}

// ---------------------------------------------------------------------------
// Image decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ImageDecoder<F> {
    Conv { fc: Dense<F>, blocks: Vec<ConvTranspose2d<F>> },
    Mlp { layers: Vec<Dense<F>> },
}

#[derive(Debug, Clone)]
pub enum DecCache<F> {
    Conv {
        latent: Array2<F>,
        fc_act: Array2<F>,
        block_inputs: Vec<Array4<F>>,
        block_acts: Vec<Array4<F>>,
        full_dim: (usize, usize, usize, usize),
        out: Array2<F>,
    },
    Mlp {
        inputs: Vec<Array2<F>>,
        acts: Vec<Array2<F>>,
        out: Array2<F>,
    },
}

impl<F: NdFloat> ImageDecoder<F> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = cfg.resolved_hidden_widths();
        let latent = cfg.latent_dim();
        match cfg.architecture {
            Backbone::Conv => {
                // mirror of the encoder: dense to the deepest feature map,
                // then four stride-2 transposed convolutions, 3 -> 48.
                let deepest = *widths.last().expect("conv widths");
                let fc =
                    Dense::init(latent, deepest * CONV_FINAL_SPATIAL * CONV_FINAL_SPATIAL, rng);
                let mut chs: Vec<usize> = widths.clone();
                chs.reverse(); // [128, 128, 64, 32]
                let mut blocks = Vec::with_capacity(chs.len());
                for i in 0..chs.len() {
                    let in_c = chs[i];
                    let out_c = if i + 1 < chs.len() { chs[i + 1] } else { 1 };
                    blocks.push(ConvTranspose2d::init(
                        in_c, out_c, CONV_KERNEL, CONV_STRIDE, CONV_PAD, 1, rng,
                    ));
                }
                ImageDecoder::Conv { fc, blocks }
            }
            Backbone::Mlp => {
                let mut dims = vec![latent];
                dims.extend(widths.iter().rev());
                dims.push(IMAGE_PIXELS);
                let layers = dims
                    .windows(2)
                    .map(|pair| Dense::init(pair[0], pair[1], rng))
                    .collect();
                ImageDecoder::Mlp { layers }
            }
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            ImageDecoder::Conv { fc, blocks } => ImageDecoder::Conv {
                fc: Dense::zeros(fc.in_dim(), fc.out_dim()),
                blocks: blocks
                    .iter()
                    .map(|b| {
                        let (ic, oc, k, _) = b.weight.dim();
                        ConvTranspose2d::zeros(ic, oc, k, b.stride, b.padding, b.output_padding)
                    })
                    .collect(),
            },
            ImageDecoder::Mlp { layers } => ImageDecoder::Mlp {
                layers: layers.iter().map(|d| Dense::zeros(d.in_dim(), d.out_dim())).collect(),
            },
        }
    }

    /// Maps `[n, latent]` to the non-negative flattened batch `[n, 1936]`.
    fn forward_cached(&self, latent: &Array2<F>) -> (Array2<F>, DecCache<F>) {
        let n = latent.nrows();
        match self {
            ImageDecoder::Conv { fc, blocks } => {
                let fc_act = relu(&fc.forward(latent));
                let deepest = blocks[0].weight.dim().0;
                let mut cur = fc_act
                    .to_owned()
                    .into_shape_with_order((n, deepest, CONV_FINAL_SPATIAL, CONV_FINAL_SPATIAL))
                    .expect("fc reshape");
                let mut block_inputs = Vec::with_capacity(blocks.len());
                let mut block_acts = Vec::with_capacity(blocks.len());
                for (i, block) in blocks.iter().enumerate() {
                    block_inputs.push(cur.clone());
                    let y = block.forward(&cur);
                    if i + 1 < blocks.len() {
                        let a = relu4(&y);
                        block_acts.push(a.clone());
                        cur = a;
                    } else {
                        cur = y;
                    }
                }
                let full_dim = cur.dim();
                let cropped = center_crop(&cur, GRID);
                let flat = cropped
                    .into_shape_with_order((n, IMAGE_PIXELS))
                    .expect("crop flatten");
                let out = relu(&flat);
                (
                    out.clone(),
                    DecCache::Conv { latent: latent.clone(), fc_act, block_inputs, block_acts, full_dim, out },
                )
            }
            ImageDecoder::Mlp { layers } => {
                let mut inputs = Vec::with_capacity(layers.len());
                let mut acts = Vec::with_capacity(layers.len() - 1);
                let mut cur = latent.clone();
                for (i, layer) in layers.iter().enumerate() {
                    inputs.push(cur.clone());
                    let pre = layer.forward(&cur);
                    if i + 1 < layers.len() {
                        let a = relu(&pre);
                        acts.push(a.clone());
                        cur = a;
                    } else {
                        cur = pre;
                    }
                }
                let out = relu(&cur);
                (out.clone(), DecCache::Mlp { inputs, acts, out })
            }
        }
    }

    fn backward(&self, cache: &DecCache<F>, g_out: &Array2<F>, grads: &mut ImageDecoder<F>) -> Array2<F> {
        match (self, cache, grads) {
            (
                ImageDecoder::Conv { fc, blocks },
                DecCache::Conv { latent, fc_act, block_inputs, block_acts, full_dim, out },
                ImageDecoder::Conv { fc: gfc, blocks: gblocks },
            ) => {
                let n = g_out.nrows();
                let g_flat = relu_backward(out, g_out);
                let g_crop = g_flat
                    .into_shape_with_order((n, 1, GRID, GRID))
                    .expect("crop grad shape");
                let mut g4 = center_crop_backward(&g_crop, *full_dim);
                for i in (0..blocks.len()).rev() {
                    let g_pre = if i + 1 < blocks.len() {
                        relu4_backward(&block_acts[i], &g4)
                    } else {
                        g4
                    };
                    g4 = blocks[i].backward(&block_inputs[i], &g_pre, &mut gblocks[i]);
                }
                let g_fc_act = g4
                    .into_shape_with_order((n, fc.out_dim()))
                    .expect("fc grad shape");
                let g_fc_pre = relu_backward(fc_act, &g_fc_act);
                fc.backward(latent, &g_fc_pre, gfc)
            }
            (
                ImageDecoder::Mlp { layers },
                DecCache::Mlp { inputs, acts, out },
                ImageDecoder::Mlp { layers: glayers },
            ) => {
                let mut g = relu_backward(out, g_out);
                for i in (0..layers.len()).rev() {
                    if i + 1 < layers.len() {
                        g = relu_backward(&acts[i], &g);
                    }
                    g = layers[i].backward(&inputs[i], &g, &mut glayers[i]);
                }
                g
            }
            _ => unreachable!("decoder cache/grads variant mismatch"),
        }
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CorrVae<F> {
    pub config: ModelConfig,
    pub property_spec: PropertySpec,
    pub mask: MaskMatrix,
    pub w_encoder: ImageEncoder<F>,
    pub z_encoder: ImageEncoder<F>,
    pub c_encoder: Mlp2<F>,
    pub decoder: ImageDecoder<F>,
    pub prop_heads: Vec<Mlp2<F>>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    mlp: Mlp2Cache<F>,
    u: Array2<F>,
}

/// Everything produced by one batched forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct BatchCache<F> {
    pub w_mean: Array2<F>,
    pub w_logvar_raw: Array2<F>,
    pub w_logvar: Array2<F>,
    pub z_mean: Array2<F>,
    pub z_logvar_raw: Array2<F>,
    pub z_logvar: Array2<F>,
    pub c: Array2<F>,
    pub noise_w: Array2<F>,
    pub noise_z: Array2<F>,
    pub w_sample: Array2<F>,
    pub z_sample: Array2<F>,
    pub recon: Array2<F>,
    pub props: Array2<F>,
    /// False when the conditioning vector was blanked for this pass (the
    /// warmup phase of training); the particle encoder then receives no
    /// gradient.
    pub c_used: bool,
    wenc: EncCache<F>,
    zenc: EncCache<F>,
    cenc: Mlp2Cache<F>,
    dec: DecCache<F>,
    heads: Vec<HeadCache<F>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub reconstruction: Array2<F>,
    pub codes: LatentCodes<F>,
    pub properties: Array1<F>,
}

fn apply_mask_row<F: NdFloat>(w: &Array2<F>, row: &[u8]) -> Array2<F> {
    let mut m = w.clone();
    for (j, &bit) in row.iter().enumerate() {
        if bit == 0 {
            m.column_mut(j).fill(F::zero());
        }
    }
    m
}

fn flatten_image<F: NdFloat>(image: &Array2<F>) -> Array2<F> {
    image
        .to_owned()
        .into_shape_with_order((1, IMAGE_PIXELS))
        .expect("44x44 image")
}

fn row_to_array1<F: NdFloat>(m: &Array2<F>) -> Array1<F> {
    m.row(0).to_owned()
}

/// Initializes all networks with uniform fan-in weights and zero biases,
/// deterministically from `config.seed`.
pub fn init_model<F: NdFloat>(
    config: &ModelConfig,
    spec: &PropertySpec,
    mask: &MaskMatrix,
) -> Result<CorrVae<F>, ModelError> {
    config.validate(spec)?;
    mask.validate(spec.len(), config.dim_w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Initialization order is fixed: w encoder, z encoder, particle
    // encoder, decoder, property heads.
    let w_encoder = ImageEncoder::init(config, config.dim_w, &mut rng);
    let z_encoder = ImageEncoder::init(config, config.dim_z, &mut rng);
    let c_encoder = Mlp2::init(PARTICLE_DIM, HEAD_WIDTH, config.dim_c, &mut rng);
    let decoder = ImageDecoder::init(config, &mut rng);
    let prop_heads = (0..spec.len())
        .map(|_| Mlp2::init(config.dim_w, HEAD_WIDTH, 1, &mut rng))
        .collect();
    Ok(CorrVae {
        config: config.resolved(),
        property_spec: spec.clone(),
        mask: mask.clone(),
        w_encoder,
        z_encoder,
        c_encoder,
        decoder,
        prop_heads,
    })
}

impl<F: NdFloat> CorrVae<F> {
    pub fn p(&self) -> usize {
        self.property_spec.len()
    }

    /// Same structure with all parameters zeroed; used as a gradient and
    /// optimizer-state container.
    pub fn zeros_like(&self) -> CorrVae<F> {
        CorrVae {
            config: self.config.clone(),
            property_spec: self.property_spec.clone(),
            mask: self.mask.clone(),
            w_encoder: self.w_encoder.zeros_like(),
            z_encoder: self.z_encoder.zeros_like(),
            c_encoder: Mlp2 {
                l1: Dense::zeros(self.c_encoder.l1.in_dim(), self.c_encoder.l1.out_dim()),
                l2: Dense::zeros(self.c_encoder.l2.in_dim(), self.c_encoder.l2.out_dim()),
            },
            decoder: self.decoder.zeros_like(),
            prop_heads: self
                .prop_heads
                .iter()
                .map(|h| Mlp2 {
                    l1: Dense::zeros(h.l1.in_dim(), h.l1.out_dim()),
                    l2: Dense::zeros(h.l2.in_dim(), h.l2.out_dim()),
                })
                .collect(),
        }
    }

    // -- batched forward/backward ------------------------------------------

    pub fn encode_w_batch(&self, x: &Array2<F>) -> (Array2<F>, Array2<F>, Array2<F>, EncCache<F>) {
        let (mean, raw, cache) = self.w_encoder.forward_cached(x);
        let clamped = clamp_logvar(&raw);
        (mean, raw, clamped, cache)
    }

    pub fn encode_z_batch(&self, x: &Array2<F>) -> (Array2<F>, Array2<F>, Array2<F>, EncCache<F>) {
        let (mean, raw, cache) = self.z_encoder.forward_cached(x);
        let clamped = clamp_logvar(&raw);
        (mean, raw, clamped, cache)
    }

    pub fn decode_batch(&self, w: &Array2<F>, z: &Array2<F>, c: &Array2<F>) -> Array2<F> {
        let latent = concatenate(Axis(1), &[w.view(), z.view(), c.view()]).expect("latent concat");
        self.decoder.forward_cached(&latent).0
    }

    pub fn heads_batch(&self, w: &Array2<F>) -> (Array2<F>, Vec<HeadCache<F>>) {
        let n = w.nrows();
        let mut props = Array2::zeros((n, self.p()));
        let mut caches = Vec::with_capacity(self.p());
        for (i, head) in self.prop_heads.iter().enumerate() {
            let masked = apply_mask_row(w, &self.mask.rows[i]);
            let (u, mlp) = head.forward_cached(&masked);
            let p = squash(&u, PROPERTY_BOUND);
            props.column_mut(i).assign(&p.column(0));
            caches.push(HeadCache { mlp, u });
        }
        (props, caches)
    }

    /// Full batched pass with caches; `x` is `[n, 1936]` preprocessed.
    pub fn forward_batch_cached(
        &self,
        x: &Array2<F>,
        particles: &Array2<F>,
        noise_w: &Array2<F>,
        noise_z: &Array2<F>,
    ) -> BatchCache<F> {
        self.forward_batch_cached_with(x, particles, noise_w, noise_z, true)
    }

    /// As [`CorrVae::forward_batch_cached`], but with `use_c = false` the
    /// decoder sees a zeroed conditioning vector. Training uses this for
    /// its warmup epochs so deposit position settles into `w` before the
    /// particle channel opens.
    pub fn forward_batch_cached_with(
        &self,
        x: &Array2<F>,
        particles: &Array2<F>,
        noise_w: &Array2<F>,
        noise_z: &Array2<F>,
        use_c: bool,
    ) -> BatchCache<F> {
        let (w_mean, w_logvar_raw, w_logvar, wenc) = self.encode_w_batch(x);
        let (z_mean, z_logvar_raw, z_logvar, zenc) = self.encode_z_batch(x);
        let (c_real, cenc) = self.c_encoder.forward_cached(particles);
        let c = if use_c { c_real } else { Array2::zeros(c_real.dim()) };
        let w_sample = reparameterize_batch(&w_mean, &w_logvar, noise_w);
        let z_sample = reparameterize_batch(&z_mean, &z_logvar, noise_z);
        let latent = concatenate(Axis(1), &[w_sample.view(), z_sample.view(), c.view()])
            .expect("latent concat");
        let (recon, dec) = self.decoder.forward_cached(&latent);
        let (props, heads) = self.heads_batch(&w_sample);
        BatchCache {
            w_mean,
            w_logvar_raw,
            w_logvar,
            z_mean,
            z_logvar_raw,
            z_logvar,
            c,
            noise_w: noise_w.clone(),
            noise_z: noise_z.clone(),
            w_sample,
            z_sample,
            recon,
            props,
            c_used: use_c,
            wenc,
            zenc,
            cenc,
            dec,
            heads,
        }
    }

    /// Backpropagates the loss gradients through the whole model.
    ///
    /// `g_recon` and `g_props` are gradients with respect to the decoder
    /// output and the squashed property predictions; the four direct terms
    /// are the KL gradients with respect to posterior means and clamped
    /// log-variances.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &self,
        cache: &BatchCache<F>,
        g_recon: &Array2<F>,
        g_props: &Array2<F>,
        g_w_mean_direct: &Array2<F>,
        g_w_logvar_direct: &Array2<F>,
        g_z_mean_direct: &Array2<F>,
        g_z_logvar_direct: &Array2<F>,
    ) -> CorrVae<F> {
        let mut grads = self.zeros_like();
        let half = fl::<F>(0.5);

        // property heads -> gradient on w_sample
        let mut g_w_sample: Array2<F> = Array2::zeros(cache.w_sample.dim());
        for (i, head) in self.prop_heads.iter().enumerate() {
            let hc = &cache.heads[i];
            let gy = g_props.column(i).to_owned().insert_axis(Axis(1));
            let gu = squash_backward(&hc.u, &gy, PROPERTY_BOUND);
            let g_masked = head.backward(&hc.mlp, &gu, &mut grads.prop_heads[i]);
            for (j, &bit) in self.mask.rows[i].iter().enumerate() {
                if bit == 1 {
                    let col = g_masked.column(j).to_owned();
                    let mut target = g_w_sample.column_mut(j);
                    target += &col;
                }
            }
        }

        // decoder -> gradients on (w_sample, z_sample, c)
        let g_latent = self.decoder.backward(&cache.dec, g_recon, &mut grads.decoder);
        let dw = self.config.dim_w;
        let dz = self.config.dim_z;
        g_w_sample += &g_latent.slice(ndarray::s![.., ..dw]);
        let g_z_sample = g_latent.slice(ndarray::s![.., dw..dw + dz]).to_owned();
        let g_c = g_latent.slice(ndarray::s![.., dw + dz..]).to_owned();

        // reparameterization: sample = mean + exp(logvar/2) * noise
        let w_sigma = cache.w_logvar.mapv(|v| (v * half).exp());
        let g_w_mean = g_w_mean_direct + &g_w_sample;
        let g_w_logvar = g_w_logvar_direct + &(&g_w_sample * &cache.noise_w * &w_sigma * half);
        let z_sigma = cache.z_logvar.mapv(|v| (v * half).exp());
        let g_z_mean = g_z_mean_direct + &g_z_sample;
        let g_z_logvar = g_z_logvar_direct + &(&g_z_sample * &cache.noise_z * &z_sigma * half);

        // clamp gate: no gradient where the raw logvar sits outside the range
        let hi = fl::<F>(LOGVAR_CLAMP);
        let gate = |raw: &Array2<F>, g: &Array2<F>| -> Array2<F> {
            let mut out = g.clone();
            out.zip_mut_with(raw, |gv, &rv| {
                if rv <= -hi || rv >= hi {
                    *gv = F::zero();
                }
            });
            out
        };
        let g_w_logvar = gate(&cache.w_logvar_raw, &g_w_logvar);
        let g_z_logvar = gate(&cache.z_logvar_raw, &g_z_logvar);

        let g_w_head = concatenate(Axis(1), &[g_w_mean.view(), g_w_logvar.view()])
            .expect("w head grad");
        self.w_encoder.backward(&cache.wenc, &g_w_head, &mut grads.w_encoder);
        let g_z_head = concatenate(Axis(1), &[g_z_mean.view(), g_z_logvar.view()])
            .expect("z head grad");
        self.z_encoder.backward(&cache.zenc, &g_z_head, &mut grads.z_encoder);
        if cache.c_used {
            self.c_encoder.backward(&cache.cenc, &g_c, &mut grads.c_encoder);
        }
        grads
    }

    /// Mean squared property error at `w` against `targets`, its gradient
    /// with respect to `w`, and the predictions. Used by the inference-time
    /// w optimizer.
    pub fn property_mse_grad(
        &self,
        w: &Array1<F>,
        targets: &[F],
    ) -> (f64, Array1<F>, Array1<F>) {
        assert_eq!(targets.len(), self.p(), "target count must match property count");
        let wb = w.to_owned().insert_axis(Axis(0));
        let (props, caches) = self.heads_batch(&wb);
        let p = self.p();
        let mut mse = 0.0f64;
        let mut g_w = Array2::<F>::zeros(wb.dim());
        let mut grads = self.zeros_like();
        for (i, head) in self.prop_heads.iter().enumerate() {
            let err = props[[0, i]] - targets[i];
            mse += err.to_f64().unwrap().powi(2);
            let gy = Array2::from_elem((1, 1), err * fl::<F>(2.0 / p as f64));
            let hc = &caches[i];
            let gu = squash_backward(&hc.u, &gy, PROPERTY_BOUND);
            let g_masked = head.backward(&hc.mlp, &gu, &mut grads.prop_heads[i]);
            for (j, &bit) in self.mask.rows[i].iter().enumerate() {
                if bit == 1 {
                    g_w[[0, j]] += g_masked[[0, j]];
                }
            }
        }
        (mse / p as f64, g_w.remove_axis(Axis(0)), props.remove_axis(Axis(0)))
    }

    // -- single-record operations -------------------------------------------

    /// Posterior parameters of `w` for one preprocessed 44x44 image.
    pub fn encode_image_w(&self, image: &Array2<F>) -> Result<(Array1<F>, Array1<F>), ModelError> {
        let x = flatten_image(image);
        let (mean, _, clamped, _) = self.encode_w_batch(&x);
        let (m, l) = (row_to_array1(&mean), row_to_array1(&clamped));
        ensure_finite1(&m, "w mean")?;
        ensure_finite1(&l, "w logvar")?;
        Ok((m, l))
    }

    pub fn encode_image_z(&self, image: &Array2<F>) -> Result<(Array1<F>, Array1<F>), ModelError> {
        let x = flatten_image(image);
        let (mean, _, clamped, _) = self.encode_z_batch(&x);
        let (m, l) = (row_to_array1(&mean), row_to_array1(&clamped));
        ensure_finite1(&m, "z mean")?;
        ensure_finite1(&l, "z logvar")?;
        Ok((m, l))
    }

    /// Deterministic embedding of a normalized particle vector.
    pub fn encode_particle_c(&self, particle: &Array1<F>) -> Result<Array1<F>, ModelError> {
        let x = particle.to_owned().insert_axis(Axis(0));
        let c = row_to_array1(&self.c_encoder.forward(&x));
        ensure_finite1(&c, "c embedding")?;
        Ok(c)
    }

    /// Decodes latents into a non-negative 44x44 image.
    pub fn decode(
        &self,
        w: &Array1<F>,
        z: &Array1<F>,
        c: &Array1<F>,
    ) -> Result<Array2<F>, ModelError> {
        let out = self.decode_batch(
            &w.to_owned().insert_axis(Axis(0)),
            &z.to_owned().insert_axis(Axis(0)),
            &c.to_owned().insert_axis(Axis(0)),
        );
        let image = out.into_shape_with_order((GRID, GRID)).expect("image shape");
        if image.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("decoded image".into()));
        }
        Ok(image)
    }

    /// Per-property predictions from masked `w`.
    pub fn property_decode(&self, w: &Array1<F>) -> Array1<F> {
        let wb = w.to_owned().insert_axis(Axis(0));
        let (props, _) = self.heads_batch(&wb);
        row_to_array1(&props)
    }

    /// Composition of the five sub-operations for one record.
    pub fn forward(
        &self,
        image: &Array2<F>,
        particle: &Array1<F>,
        noise_w: &Array1<F>,
        noise_z: &Array1<F>,
    ) -> Result<ForwardOutput<F>, ModelError> {
        let (w_mean, w_logvar) = self.encode_image_w(image)?;
        let (z_mean, z_logvar) = self.encode_image_z(image)?;
        let c = self.encode_particle_c(particle)?;
        let w_sample = reparameterize(&w_mean, &w_logvar, noise_w);
        let z_sample = reparameterize(&z_mean, &z_logvar, noise_z);
        let reconstruction = self.decode(&w_sample, &z_sample, &c)?;
        let properties = self.property_decode(&w_sample);
        Ok(ForwardOutput {
            reconstruction,
            codes: LatentCodes { w_mean, w_logvar, z_mean, z_logvar, c, w_sample, z_sample },
            properties,
        })
    }

    // -- parameter traversal --------------------------------------------------

    /// Stable `(name, shape)` listing of every weight array. The traversal
    /// order matches [`CorrVae::param_slices`] and
    /// [`CorrVae::param_slices_mut`].
    pub fn param_names_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let enc = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, e: &ImageEncoder<F>| match e
        {
            ImageEncoder::Conv { blocks, head } => {
                for (i, b) in blocks.iter().enumerate() {
                    out.push((format!("{prefix}/conv{i}/weight"), b.weight.shape().to_vec()));
                    out.push((format!("{prefix}/conv{i}/bias"), b.bias.shape().to_vec()));
                }
                out.push((format!("{prefix}/head/weight"), head.weight.shape().to_vec()));
                out.push((format!("{prefix}/head/bias"), head.bias.shape().to_vec()));
            }
            ImageEncoder::Mlp { hidden, head } => {
                for (i, d) in hidden.iter().enumerate() {
                    out.push((format!("{prefix}/dense{i}/weight"), d.weight.shape().to_vec()));
                    out.push((format!("{prefix}/dense{i}/bias"), d.bias.shape().to_vec()));
                }
                out.push((format!("{prefix}/head/weight"), head.weight.shape().to_vec()));
                out.push((format!("{prefix}/head/bias"), head.bias.shape().to_vec()));
            }
        };
        enc(&mut out, "w_encoder", &self.w_encoder);
        enc(&mut out, "z_encoder", &self.z_encoder);
        out.push(("c_encoder/dense0/weight".into(), self.c_encoder.l1.weight.shape().to_vec()));
        out.push(("c_encoder/dense0/bias".into(), self.c_encoder.l1.bias.shape().to_vec()));
        out.push(("c_encoder/dense1/weight".into(), self.c_encoder.l2.weight.shape().to_vec()));
        out.push(("c_encoder/dense1/bias".into(), self.c_encoder.l2.bias.shape().to_vec()));
        match &self.decoder {
            ImageDecoder::Conv { fc, blocks } => {
                out.push(("decoder/dense/weight".into(), fc.weight.shape().to_vec()));
                out.push(("decoder/dense/bias".into(), fc.bias.shape().to_vec()));
                for (i, b) in blocks.iter().enumerate() {
                    out.push((format!("decoder/tconv{i}/weight"), b.weight.shape().to_vec()));
                    out.push((format!("decoder/tconv{i}/bias"), b.bias.shape().to_vec()));
                }
            }
            ImageDecoder::Mlp { layers } => {
                for (i, d) in layers.iter().enumerate() {
                    out.push((format!("decoder/dense{i}/weight"), d.weight.shape().to_vec()));
                    out.push((format!("decoder/dense{i}/bias"), d.bias.shape().to_vec()));
                }
            }
        }
        for (i, h) in self.prop_heads.iter().enumerate() {
            out.push((format!("prop_head{i}/dense0/weight"), h.l1.weight.shape().to_vec()));
            out.push((format!("prop_head{i}/dense0/bias"), h.l1.bias.shape().to_vec()));
            out.push((format!("prop_head{i}/dense1/weight"), h.l2.weight.shape().to_vec()));
            out.push((format!("prop_head{i}/dense1/bias"), h.l2.bias.shape().to_vec()));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        fn enc<'a, F: NdFloat>(out: &mut Vec<&'a [F]>, e: &'a ImageEncoder<F>) {
            match e {
                ImageEncoder::Conv { blocks, head } => {
                    for b in blocks {
                        out.push(b.weight.as_slice().expect("contiguous"));
                        out.push(b.bias.as_slice().expect("contiguous"));
                    }
                    out.push(head.weight.as_slice().expect("contiguous"));
                    out.push(head.bias.as_slice().expect("contiguous"));
                }
                ImageEncoder::Mlp { hidden, head } => {
                    for d in hidden {
                        out.push(d.weight.as_slice().expect("contiguous"));
                        out.push(d.bias.as_slice().expect("contiguous"));
                    }
                    out.push(head.weight.as_slice().expect("contiguous"));
                    out.push(head.bias.as_slice().expect("contiguous"));
                }
            }
        }
        // Must visit in the same order as param_names_shapes.
        enc(&mut out, &self.w_encoder);
        enc(&mut out, &self.z_encoder);
        out.push(self.c_encoder.l1.weight.as_slice().expect("contiguous"));
        out.push(self.c_encoder.l1.bias.as_slice().expect("contiguous"));
        out.push(self.c_encoder.l2.weight.as_slice().expect("contiguous"));
        out.push(self.c_encoder.l2.bias.as_slice().expect("contiguous"));
        match &self.decoder {
            ImageDecoder::Conv { fc, blocks } => {
                out.push(fc.weight.as_slice().expect("contiguous"));
                out.push(fc.bias.as_slice().expect("contiguous"));
                for b in blocks {
                    out.push(b.weight.as_slice().expect("contiguous"));
                    out.push(b.bias.as_slice().expect("contiguous"));
                }
            }
            ImageDecoder::Mlp { layers } => {
                for d in layers {
                    out.push(d.weight.as_slice().expect("contiguous"));
                    out.push(d.bias.as_slice().expect("contiguous"));
                }
            }
        }
        for h in &self.prop_heads {
            out.push(h.l1.weight.as_slice().expect("contiguous"));
            out.push(h.l1.bias.as_slice().expect("contiguous"));
            out.push(h.l2.weight.as_slice().expect("contiguous"));
            out.push(h.l2.bias.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        fn enc_mut<'a, F: NdFloat>(out: &mut Vec<&'a mut [F]>, e: &'a mut ImageEncoder<F>) {
            match e {
                ImageEncoder::Conv { blocks, head } => {
                    for b in blocks.iter_mut() {
                        out.push(b.weight.as_slice_mut().expect("contiguous"));
                        out.push(b.bias.as_slice_mut().expect("contiguous"));
                    }
                    out.push(head.weight.as_slice_mut().expect("contiguous"));
                    out.push(head.bias.as_slice_mut().expect("contiguous"));
                }
                ImageEncoder::Mlp { hidden, head } => {
                    for d in hidden.iter_mut() {
                        out.push(d.weight.as_slice_mut().expect("contiguous"));
                        out.push(d.bias.as_slice_mut().expect("contiguous"));
                    }
                    out.push(head.weight.as_slice_mut().expect("contiguous"));
                    out.push(head.bias.as_slice_mut().expect("contiguous"));
                }
            }
        }
        enc_mut(&mut out, &mut self.w_encoder);
        enc_mut(&mut out, &mut self.z_encoder);
        out.push(self.c_encoder.l1.weight.as_slice_mut().expect("contiguous"));
        out.push(self.c_encoder.l1.bias.as_slice_mut().expect("contiguous"));
        out.push(self.c_encoder.l2.weight.as_slice_mut().expect("contiguous"));
        out.push(self.c_encoder.l2.bias.as_slice_mut().expect("contiguous"));
        match &mut self.decoder {
            ImageDecoder::Conv { fc, blocks } => {
                out.push(fc.weight.as_slice_mut().expect("contiguous"));
                out.push(fc.bias.as_slice_mut().expect("contiguous"));
                for b in blocks.iter_mut() {
                    out.push(b.weight.as_slice_mut().expect("contiguous"));
                    out.push(b.bias.as_slice_mut().expect("contiguous"));
                }
            }
            ImageDecoder::Mlp { layers } => {
                for d in layers.iter_mut() {
                    out.push(d.weight.as_slice_mut().expect("contiguous"));
                    out.push(d.bias.as_slice_mut().expect("contiguous"));
                }
            }
        }
        for h in self.prop_heads.iter_mut() {
            out.push(h.l1.weight.as_slice_mut().expect("contiguous"));
            out.push(h.l1.bias.as_slice_mut().expect("contiguous"));
            out.push(h.l2.weight.as_slice_mut().expect("contiguous"));
            out.push(h.l2.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn ensure_finite1<F: NdFloat>(a: &Array1<F>, what: &str) -> Result<(), ModelError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(what.into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A trained model together with the dataset statistics it expects and an
/// optional training history blob.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: CorrVae<f32>,
    pub normalization: Normalization,
    pub history: Option<serde_json::Value>,
}

impl TrainedModel {
    /// Preprocesses a raw image into the model's input space.
    pub fn preprocess_image(&self, image: &Array2<f32>) -> Array2<f32> {
        self.normalization.transform_image(image)
    }

    /// Maps a decoded image back to raw pixel space.
    pub fn postprocess_image(&self, image: &Array2<f32>) -> Array2<f32> {
        self.normalization.untransform_image(image)
    }

    pub fn normalized_particle(&self, p: &crate::dataset::ParticleVector) -> Array1<f32> {
        Array1::from_vec(self.normalization.normalize_particle(p).to_vec())
    }
}

pub fn save_checkpoint(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let model = &trained.model;
    let metadata = serde_json::json!({
        "format_kind": "checkpoint",
        "config": serde_json::to_value(&model.config).expect("config json"),
        "property_spec": serde_json::to_value(&model.property_spec).expect("spec json"),
        "mask": serde_json::to_value(&model.mask).expect("mask json"),
        "normalization": serde_json::to_value(&trained.normalization).expect("norm json"),
        "history": trained.history.clone(),
    });
    let names = model.param_names_shapes();
    let slices = model.param_slices();
    let arrays: Vec<NamedArray> = names
        .into_iter()
        .zip(slices)
        .map(|((name, shape), data)| NamedArray::f32(name, shape, data.to_vec()))
        .collect();
    container::write_container(path, &metadata, &arrays)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel, ModelError> {
    let c = container::read_container(path)?;
    let kind = c.format_kind().unwrap_or("");
    if kind != "checkpoint" {
        return Err(ModelError::ConfigMismatch(format!(
            "container is {kind:?}, expected a checkpoint"
        )));
    }
    let field = |name: &str| {
        c.metadata
            .get(name)
            .cloned()
            .ok_or_else(|| ModelError::ConfigMismatch(format!("metadata missing {name:?}")))
    };
    let config: ModelConfig = serde_json::from_value(field("config")?)
        .map_err(|e| ModelError::ConfigMismatch(format!("bad config: {e}")))?;
    let spec: PropertySpec = serde_json::from_value(field("property_spec")?)
        .map_err(|e| ModelError::ConfigMismatch(format!("bad property_spec: {e}")))?;
    let mask: MaskMatrix = serde_json::from_value(field("mask")?)
        .map_err(|e| ModelError::ConfigMismatch(format!("bad mask: {e}")))?;
    let normalization: Normalization = serde_json::from_value(field("normalization")?)
        .map_err(|e| ModelError::ConfigMismatch(format!("bad normalization: {e}")))?;
    let history = c.metadata.get("history").filter(|v| !v.is_null()).cloned();

    let mut model = init_model::<f32>(&config, &spec, &mask)?;
    let names = model.param_names_shapes();
    if c.arrays.len() != names.len() {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint has {} weight arrays, architecture expects {}",
            c.arrays.len(),
            names.len()
        )));
    }
    {
        let slices = model.param_slices_mut();
        for ((name, shape), slot) in names.iter().zip(slices) {
            let arr = c
                .array(name)
                .ok_or_else(|| ModelError::ConfigMismatch(format!("missing weight {name:?}")))?;
            if &arr.shape != shape {
                return Err(ModelError::ConfigMismatch(format!(
                    "weight {name:?} has shape {:?}, expected {:?}",
                    arr.shape, shape
                )));
            }
            let data = arr.as_f32().ok_or_else(|| {
                ModelError::ConfigMismatch(format!("weight {name:?} is not f32"))
            })?;
            slot.copy_from_slice(data);
        }
    }
    if !model.params_finite() {
        return Err(ModelError::NonFinite("checkpoint weights".into()));
    }
    Ok(TrainedModel { model, normalization, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageTransform;
    use ndarray::Array;
    use rand::Rng;

    fn default_parts() -> (ModelConfig, PropertySpec, MaskMatrix) {
        let spec = PropertySpec::default();
        let cfg = ModelConfig::default();
        let mask = MaskMatrix::identity_prefix(spec.len(), cfg.dim_w);
        (cfg, spec, mask)
    }

    fn mlp_parts() -> (ModelConfig, PropertySpec, MaskMatrix) {
        let spec = PropertySpec::default();
        let cfg = ModelConfig { architecture: Backbone::Mlp, ..Default::default() };
        let mask = MaskMatrix::identity_prefix(spec.len(), cfg.dim_w);
        (cfg, spec, mask)
    }

    fn rand_image(rng: &mut ChaCha8Rng) -> Array2<f32> {
        Array2::from_shape_fn((GRID, GRID), |_| rng.random_range(0.0..5.0f32))
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let (cfg, spec, mask) = mlp_parts();
        let a = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let b = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        for (sa, sb) in a.param_slices().iter().zip(b.param_slices()) {
            assert_eq!(*sa, sb);
        }
        let cfg2 = ModelConfig { seed: 1, ..cfg };
        let c = init_model::<f32>(&cfg2, &spec, &mask).unwrap();
        assert!(a.param_slices().iter().zip(c.param_slices()).any(|(sa, sc)| *sa != sc));
    }

    #[test]
    fn conv_param_count_closed_form() {
        let (cfg, spec, mask) = default_parts();
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        // hand-derived from the documented layer shapes
        let enc = (32 * 1 * 9 + 32)
            + (64 * 32 * 9 + 64)
            + (128 * 64 * 9 + 128)
            + (128 * 128 * 9 + 128)
            + (1152 * 16 + 16);
        let c_enc = (9 * 64 + 64) + (64 * 4 + 4);
        let dec = (20 * 1152 + 1152)
            + (128 * 128 * 9 + 128)
            + (128 * 64 * 9 + 64)
            + (64 * 32 * 9 + 32)
            + (32 * 1 * 9 + 1);
        let heads = 2 * ((8 * 64 + 64) + (64 * 1 + 1));
        assert_eq!(model.param_count(), 2 * enc + c_enc + dec + heads);
        assert_eq!(model.param_count(), 783_911);
    }

    #[test]
    fn traversal_orders_agree() {
        for parts in [default_parts(), mlp_parts()] {
            let (cfg, spec, mask) = parts;
            let mut model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
            let names = model.param_names_shapes();
            let lens: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
            assert_eq!(names.len(), lens.len());
            for ((name, shape), len) in names.iter().zip(&lens) {
                let product: usize = shape.iter().product();
                assert_eq!(product, *len, "shape/slice mismatch for {name}");
            }
            let lens_mut: Vec<usize> =
                model.param_slices_mut().iter().map(|s| s.len()).collect();
            assert_eq!(lens, lens_mut);
        }
    }

    #[test]
    fn encoder_shapes_and_zero_input() {
        for parts in [default_parts(), mlp_parts()] {
            let (cfg, spec, mask) = parts;
            let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
            let zero = Array2::<f32>::zeros((GRID, GRID));
            let (m, l) = model.encode_image_w(&zero).unwrap();
            assert_eq!(m.len(), cfg.dim_w);
            assert_eq!(l.len(), cfg.dim_w);
            // zero image through zero biases stays on the bias path
            assert!(m.iter().all(|&v| v == 0.0));
            assert!(l.iter().all(|&v| v == 0.0));
            let (m, l) = model.encode_image_z(&zero).unwrap();
            assert_eq!((m.len(), l.len()), (cfg.dim_z, cfg.dim_z));
        }
    }

    #[test]
    fn encoder_batch_of_identical_images_has_identical_rows() {
        let (cfg, spec, mask) = mlp_parts();
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = rand_image(&mut rng);
        let row = img.to_owned().into_shape_with_order((1, IMAGE_PIXELS)).unwrap();
        let mut batch = Array2::zeros((3, IMAGE_PIXELS));
        for mut r in batch.axis_iter_mut(Axis(0)) {
            r.assign(&row.row(0));
        }
        let (mean, _, _, _) = model.encode_w_batch(&batch);
        for i in 1..3 {
            assert_eq!(mean.row(0).to_vec(), mean.row(i).to_vec());
        }
    }

    #[test]
    fn particle_encoder_zero_shape_determinism() {
        let (cfg, spec, mask) = mlp_parts();
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let zero = Array1::<f32>::zeros(PARTICLE_DIM);
        let c = model.encode_particle_c(&zero).unwrap();
        assert_eq!(c.len(), cfg.dim_c);
        assert!(c.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = Array1::from_shape_fn(PARTICLE_DIM, |_| rng.random_range(-1.0..1.0f32));
        let c1 = model.encode_particle_c(&p).unwrap();
        let c2 = model.encode_particle_c(&p).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn reparameterize_closed_forms() {
        let mean = Array1::from_vec(vec![1.0f64, -2.0]);
        let logvar = Array1::from_vec(vec![0.0f64, 0.0]);
        let zero = Array1::from_vec(vec![0.0f64, 0.0]);
        assert_eq!(reparameterize(&mean, &logvar, &zero), mean);

        let noise = Array1::from_vec(vec![0.5f64, -1.5]);
        let s = reparameterize(&mean, &logvar, &noise);
        assert!((s[0] - 1.5).abs() < 1e-12);
        assert!((s[1] + 3.5).abs() < 1e-12);

        let mean0 = Array1::from_vec(vec![0.0f64]);
        let lv = Array1::from_vec(vec![2.0 * 3.0f64.ln()]);
        let one = Array1::from_vec(vec![1.0f64]);
        assert!((reparameterize(&mean0, &lv, &one)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn decode_nonnegative_and_shape() {
        for parts in [default_parts(), mlp_parts()] {
            let (cfg, spec, mask) = parts;
            let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..5 {
                let w = Array1::from_shape_fn(cfg.dim_w, |_| rng.random_range(-2.0..2.0f32));
                let z = Array1::from_shape_fn(cfg.dim_z, |_| rng.random_range(-2.0..2.0f32));
                let c = Array1::from_shape_fn(cfg.dim_c, |_| rng.random_range(-2.0..2.0f32));
                let img = model.decode(&w, &z, &c).unwrap();
                assert_eq!(img.dim(), (GRID, GRID));
                assert!(img.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn decode_continuity_in_w() {
        let (cfg, spec, mask) = mlp_parts();
        let model = init_model::<f64>(&cfg, &spec, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Array1::from_shape_fn(cfg.dim_w, |_| rng.random_range(-1.0..1.0f64));
        let z = Array1::from_shape_fn(cfg.dim_z, |_| rng.random_range(-1.0..1.0f64));
        let c = Array1::from_shape_fn(cfg.dim_c, |_| rng.random_range(-1.0..1.0f64));
        let base = model.decode(&w, &z, &c).unwrap();
        let diff_norm = |eps: f64| {
            let mut wp = w.clone();
            wp[0] += eps;
            let img = model.decode(&wp, &z, &c).unwrap();
            (&img - &base).mapv(|v| v * v).sum().sqrt()
        };
        let d2 = diff_norm(1e-2);
        let d3 = diff_norm(1e-3);
        assert!(d2 > 0.0);
        assert!(d3 < d2 * 0.5, "decode not continuous: d(1e-2)={d2}, d(1e-3)={d3}");
    }

    #[test]
    fn property_decode_mask_semantics() {
        let (cfg, spec, _) = mlp_parts();
        let mask = MaskMatrix::identity_prefix(spec.len(), cfg.dim_w);
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Array1::from_shape_fn(cfg.dim_w, |_| rng.random_range(-2.0..2.0f32));
        let base = model.property_decode(&w);
        // default identity-prefix mask: w_j for j >= P never matters
        for j in spec.len()..cfg.dim_w {
            let mut wp = w.clone();
            wp[j] = rng.random_range(-2.0..2.0);
            let p = model.property_decode(&wp);
            for i in 0..spec.len() {
                assert_eq!(p[i].to_bits(), base[i].to_bits());
            }
        }
        // property i responds only to w_i
        let mut wp = w.clone();
        wp[0] += 0.5;
        let p = model.property_decode(&wp);
        assert_ne!(p[0], base[0]);
        assert_eq!(p[1].to_bits(), base[1].to_bits());
    }

    #[test]
    fn zero_mask_row_gives_constant_head() {
        let (cfg, spec, _) = mlp_parts();
        // bypass validation: a zero row is the degenerate "no input" head
        let mask = MaskMatrix {
            rows: vec![vec![0; cfg.dim_w], MaskMatrix::identity_prefix(2, cfg.dim_w).rows[1].clone()],
        };
        let model = CorrVae {
            mask,
            ..init_model::<f32>(&cfg, &spec, &MaskMatrix::identity_prefix(2, cfg.dim_w)).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = model.property_decode(&Array1::from_shape_fn(cfg.dim_w, |_| {
            rng.random_range(-2.0..2.0f32)
        }));
        let b = model.property_decode(&Array1::from_shape_fn(cfg.dim_w, |_| {
            rng.random_range(-2.0..2.0f32)
        }));
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    /// Oracle: hand-computed forward pass through a head constructed to be
    /// exactly linear (paired +v/-v ReLU units), so prediction =
    /// squash(v1 * w1).
    #[test]
    fn linear_head_closed_form() {
        let (cfg, spec, mask) = mlp_parts();
        let mut model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let v1 = 0.7f32;
        let mut l1 = Dense::<f32>::zeros(cfg.dim_w, HEAD_WIDTH);
        let mut l2 = Dense::<f32>::zeros(HEAD_WIDTH, 1);
        for j in 0..cfg.dim_w {
            let vj = if j == 0 { v1 } else { 0.3 };
            l1.weight[[j, 0]] = vj;
            l1.weight[[j, 1]] = -vj;
        }
        l2.weight[[0, 0]] = 1.0;
        l2.weight[[1, 0]] = -1.0;
        model.prop_heads[0] = Mlp2 { l1, l2 };
        let mut w = Array1::<f32>::zeros(cfg.dim_w);
        w[0] = 1.3;
        w[3] = 2.0; // masked out for head 0
        let p = model.property_decode(&w);
        let expected = 1.5 * ((v1 * 1.3f32) / 1.5).tanh();
        assert!((p[0] - expected).abs() < 1e-6, "{} vs {expected}", p[0]);
    }

    #[test]
    fn forward_composes_sub_operations() {
        let (cfg, spec, mask) = mlp_parts();
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = rand_image(&mut rng);
        let particle = Array1::from_shape_fn(PARTICLE_DIM, |_| rng.random_range(-1.0..1.0f32));
        let noise_w = Array1::from_shape_fn(cfg.dim_w, |_| rng.random_range(-1.0..1.0f32));
        let noise_z = Array1::from_shape_fn(cfg.dim_z, |_| rng.random_range(-1.0..1.0f32));

        let out = model.forward(&img, &particle, &noise_w, &noise_z).unwrap();
        assert!(out.reconstruction.iter().all(|&v| v >= 0.0));

        let (wm, wl) = model.encode_image_w(&img).unwrap();
        let (zm, zl) = model.encode_image_z(&img).unwrap();
        let c = model.encode_particle_c(&particle).unwrap();
        let ws = reparameterize(&wm, &wl, &noise_w);
        let zs = reparameterize(&zm, &zl, &noise_z);
        let recon = model.decode(&ws, &zs, &c).unwrap();
        let props = model.property_decode(&ws);
        assert_eq!(out.reconstruction, recon);
        assert_eq!(out.properties, props);
        assert_eq!(out.codes.w_sample, ws);
        assert_eq!(out.codes.z_sample, zs);

        // noise = 0 collapses to the posterior means
        let zero_w = Array1::zeros(cfg.dim_w);
        let zero_z = Array1::zeros(cfg.dim_z);
        let out0 = model.forward(&img, &particle, &zero_w, &zero_z).unwrap();
        let recon0 = model.decode(&wm, &zm, &c).unwrap();
        assert_eq!(out0.reconstruction, recon0);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join("zdc_model_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let (cfg, spec, mask) = mlp_parts();
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let trained = TrainedModel {
            model,
            normalization: Normalization {
                particle_mean: [0.5; PARTICLE_DIM],
                particle_std: [2.0; PARTICLE_DIM],
                image_transform: ImageTransform::Identity,
            },
            history: Some(serde_json::json!({"epochs": 1})),
        };
        let p1 = dir.join("ckpt1.zdc1");
        let p2 = dir.join("ckpt2.zdc1");
        save_checkpoint(&trained, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.normalization, trained.normalization);

        // forward equality on the same input, bit for bit
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let img = rand_image(&mut rng);
        let particle = Array1::from_shape_fn(PARTICLE_DIM, |_| rng.random_range(-1.0..1.0f32));
        let noise_w = Array1::zeros(cfg.dim_w);
        let noise_z = Array1::zeros(cfg.dim_z);
        let a = trained.model.forward(&img, &particle, &noise_w, &noise_z).unwrap();
        let b = loaded.model.forward(&img, &particle, &noise_w, &noise_z).unwrap();
        for (x, y) in a.reconstruction.iter().zip(b.reconstruction.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn loading_dataset_kind_is_config_mismatch() {
        let dir = std::env::temp_dir().join("zdc_model_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("notackpt.zdc1");
        container::write_container(&path, &serde_json::json!({"format_kind": "dataset"}), &[])
            .unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::ConfigMismatch(_)) => {}
            other => panic!("expected ConfigMismatch, got {other:?}"),
        }
    }

    #[test]
    fn tampered_checkpoint_metadata_rejected() {
        let dir = std::env::temp_dir().join("zdc_model_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let (cfg, spec, mask) = mlp_parts();
        let trained = TrainedModel {
            model: init_model::<f32>(&cfg, &spec, &mask).unwrap(),
            normalization: Normalization {
                particle_mean: [0.0; PARTICLE_DIM],
                particle_std: [1.0; PARTICLE_DIM],
                image_transform: ImageTransform::Identity,
            },
            history: None,
        };
        let path = dir.join("tampered.zdc1");
        save_checkpoint(&trained, &path).unwrap();
        // flip the stored dim_w so weight shapes no longer match
        let c = container::read_container(&path).unwrap();
        let mut meta = c.metadata.clone();
        meta["config"]["dim_w"] = serde_json::json!(6);
        container::write_container(&path, &meta, &c.arrays).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::ConfigMismatch(_)) | Err(ModelError::BadMask(_)) => {}
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn mask_validation() {
        let m = MaskMatrix::identity_prefix(2, 8);
        assert!(m.validate(2, 8).is_ok());
        let zero_row = MaskMatrix { rows: vec![vec![0; 8], vec![1; 8]] };
        assert!(zero_row.validate(2, 8).is_err());
        let nonbinary = MaskMatrix { rows: vec![vec![2, 0, 0, 0, 0, 0, 0, 0]] };
        assert!(nonbinary.validate(1, 8).is_err());
        let ragged = MaskMatrix { rows: vec![vec![1; 8], vec![1; 7]] };
        assert!(ragged.validate(2, 8).is_err());
    }

    #[test]
    fn config_validation() {
        let spec = PropertySpec::default();
        let bad = ModelConfig { dim_w: 1, ..Default::default() };
        assert!(bad.validate(&spec).is_err());
        let bad_widths = ModelConfig {
            architecture: Backbone::Conv,
            hidden_widths: Some(vec![32, 64]),
            ..Default::default()
        };
        assert!(bad_widths.validate(&spec).is_err());
        assert!(ModelConfig::default().validate(&spec).is_ok());
    }

    #[test]
    fn decode_batch_matches_single() {
        let (cfg, spec, mask) = mlp_parts();
        let model = init_model::<f32>(&cfg, &spec, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = Array::from_shape_fn((2, cfg.dim_w), |_| rng.random_range(-1.0..1.0f32));
        let z = Array::from_shape_fn((2, cfg.dim_z), |_| rng.random_range(-1.0..1.0f32));
        let c = Array::from_shape_fn((2, cfg.dim_c), |_| rng.random_range(-1.0..1.0f32));
        let batch = model.decode_batch(&w, &z, &c);
        for i in 0..2 {
            let single = model
                .decode(&w.row(i).to_owned(), &z.row(i).to_owned(), &c.row(i).to_owned())
                .unwrap();
            let flat = single.into_shape_with_order(IMAGE_PIXELS).unwrap();
            assert_eq!(batch.row(i).to_vec(), flat.to_vec());
        }
    }
}
