//! Controllable VAE surrogate for zero-degree calorimeter responses.
//!
//! The model encodes a 44x44 response into three latent spaces: `w` holds
//! the user-controllable properties (deposit position by default), `z`
//! holds the residual appearance, and `c` is a deterministic embedding of
//! the nine particle features. A binary mask routes `w` coordinates into
//! per-property regression heads; at generation time `w` is optimized
//! against those heads to hit requested property targets while `z` is
//! sampled from the prior and `c` comes from the conditioning particle.
//!
//! The crate bundles a synthetic shower dataset with known ground truth,
//! training with hand-rolled backpropagation, the physics-channel
//! Wasserstein evaluation protocol, and a batch CLI. All file I/O uses the
//! single-file `.zdc1` container defined in [`container`].

pub mod cli;
pub mod container;
pub mod dataset;
pub mod eval;
pub mod infer;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod props;
pub mod train;
