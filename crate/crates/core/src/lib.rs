//! Wavelet-domain diffusion for PDE simulation, control and zero-shot
//! super-resolution.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: named-axis grids, resampling, error metrics, `WDT1` files
//! * [`wavelet`]: single-level separable DWT / IDWT
//! * [`pde`]: Burgers and advection ground-truth solvers, dataset generation,
//!   the control objective
//! * [`nn`]: a small convolutional denoiser with reverse-mode gradients
//! * [`diffusion`]: noise schedules, training, DDPM/DDIM samplers, guidance
//! * [`task`]: channel layouts of the simulation, control and
//!   super-resolution tasks
//! * [`multires`]: resolution pairs, alignment, super-resolution chain
//! * [`cli`]: run configuration and command dispatch

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod par;
pub mod multires;
pub mod pde;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{AxisRole, GridTensor};
