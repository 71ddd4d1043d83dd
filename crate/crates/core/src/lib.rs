//! Generation of individually-rational, Nash-bargaining-aligned utility
//! allocations for bilateral negotiations via normatively guided graph
//! diffusion.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`domain`]: negotiation instances, synthetic dataset generation, and
//!   ingestion of normalized negotiation records.
//! - [`oracle`]: the exact Nash Bargaining Solution solver on a circular
//!   frontier, feasible-set projection, evaluation metrics, and the
//!   Wilcoxon signed-rank test.
//! - [`nn`]: a minimal dense f64 tensor engine with hand-written reverse-mode
//!   gradients for the closed layer set used here, plus AdamW.
//! - [`encoder`]: the GATv2 strategic encoder producing the per-negotiation
//!   context embedding.
//! - [`diffusion`]: noise schedule, conditional MLP denoiser, two-phase
//!   training, and the deterministic guided DDIM sampler.
//! - [`guidance`]: the three-term differentiable normative loss, its
//!   closed-form gradient, and the adaptive guided correction step.
//! - [`harness`]: experiment orchestration: ablation modes, grid search,
//!   trajectory export, and the theory property suite.
//! - [`config`]: the declarative run-configuration file shared by the CLI
//!   and the harness.

pub mod config;
pub mod diffusion;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
