//! Mechanism-sparsity disentanglement toolkit.
//!
//! The crate bundles everything needed to study disentanglement through
//! sparse causal mechanisms on synthetic data:
//!
//! - [`graph_algebra`]: binary-graph machinery, maximal preserving masks,
//!   entanglement masks, the per-node graphical criterion and permutation
//!   extraction.
//! - [`latent_models`]: analytic ground-truth Gaussian transition families
//!   with log-density derivatives and numerical verifiers for the
//!   sufficient-influence / sufficient-variability conditions.
//! - [`synth_data`]: random injective MLP decoders and full observation
//!   dataset sampling with a reproducible on-disk format.
//! - [`diffkit`]: a minimal dense reverse-mode autodiff tape, Adam, and a
//!   straight-through Gumbel-sigmoid relaxation for binary masks.
//! - [`sparse_vae`]: the learnable encoder/decoder/transition model and the
//!   sparsity-constrained training loop (Lagrangian with dual restarts).
//! - [`metrics`]: MCC, R, R_con, SHD and UDR evaluation.

pub mod diffkit;
pub mod graph_algebra;
pub mod latent_models;
pub mod linalg;
pub mod metrics;
pub mod sparse_vae;
pub mod synth_data;

pub use graph_algebra::{BinaryGraph, ConsistencyMode, EntanglementMask};
pub use latent_models::{Family, InfluenceReport, TransitionSpec};
pub use metrics::EvalReport;
pub use sparse_vae::{GraphSide, LearnedModel, TrainConfig};
pub use synth_data::{Dataset, DecoderSpec};
