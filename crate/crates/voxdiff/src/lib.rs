//! voxdiff: a desk-scale, text-conditioned 3D diffusion engine.
//!
//! The library trains denoising diffusion models over synthetic volumetric
//! phantoms and generates counterfactual volume pairs by decoding the same
//! terminal noise under different text prompts. It ships three model
//! variants (wavelet voxel-space diffusion, latent diffusion with a linear
//! schedule, latent diffusion with a rectified-flow schedule), a full
//! evaluation suite (SSIM/MS-SSIM, PSNR, Fréchet feature distance, prompt
//! alignment), and a procedural phantom generator that provides ground-truth
//! counterfactual pairs.
//!
//! Everything is pure Rust, f64 throughout, and deterministic: each random
//! stream is a counter-based pure function of its seed, so training runs,
//! sampling trajectories and evaluation reports reproduce bit for bit.

pub mod checkpoint;
pub mod classifier;
pub mod conditioning;
pub mod counterfactual;
pub mod diffusion;
pub mod error;
pub mod fdcheck;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod phantoms;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod volfile;
pub mod wavelet;

pub use error::{Error, Result};
pub use rng::CounterRng;
pub use tensor::Tensor;
