//! Learned quasi-projection iterative reconstruction for limited-view
//! parallel-beam tomography.
//!
//! The crate is organised bottom-up:
//!
//! - [`phantom`]: random ellipse phantoms, rasterization, closed-form sinograms
//! - [`projector`]: scan geometry and the ray-traced system matrix `H`
//! - [`linops`]: SVD of `H`, pseudoinverse and measurable/null-space projectors
//! - [`solvers`]: LS, non-negative LS (projected gradient) and TV-regularized LS (FISTA)
//! - [`neural`]: a small residual CNN with hand-written backprop and ADAM
//! - [`recon`]: the alternating `R`/`Q` reconstruction loop and two-stage training
//! - [`metrics`]: RMSE, SSIM and the measurable/null RMSE split
//! - [`harness`]: datasets, noise, experiments, reports and the CLI

pub mod error;
pub mod harness;
pub mod image;
pub mod linops;
pub mod metrics;
pub mod neural;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod solvers;
mod vecops;

pub use error::{Error, Result};
pub use image::{Image, Sinogram};
