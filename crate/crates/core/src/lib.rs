//! entlab: a desk-scale laboratory for reinforcement learning with
//! verifiable rewards (RLVR) on a tiny autoregressive policy.
//!
//! The crate trains a small decoder-only transformer on synthetic
//! verifiable tasks with GRPO-style group advantages and the DAPO
//! objective (clip-higher, dynamic sampling, token-level loss, overlong
//! reward shaping), and implements entropy-gated gradient masking:
//! restricting policy-gradient updates to the top-rho highest-entropy
//! tokens of each micro-batch. Alongside training it ships the full
//! token-entropy measurement toolkit used to study that mechanism:
//! per-token entropy, batch entropy thresholds, percentile statistics,
//! checkpoint rescoring, top-rho position overlap, per-percentile-bin
//! entropy change, and dual-temperature fork-aware decoding.
//!
//! Module map:
//!
//! * [`graph`] — tape-recorded dense-tensor arithmetic with reverse-mode
//!   gradients; the numeric substrate.
//! * [`model`] — the tiny decoder-only policy and its checkpoint format.
//! * [`entropy`] — entropy measurement and trace analytics.
//! * [`decode`] — autoregressive sampling (plain / dual-temperature /
//!   greedy) with per-token entropy and log-prob logging.
//! * [`tasks`] — synthetic verifiable task families, the answer verifier
//!   and reward shaping.
//! * [`objectives`] — importance ratios, GRPO advantages, dynamic
//!   sampling, the clipped token objective and the entropy-masked batch
//!   objective.
//! * [`trainer`] — the RLVR loop: group rollouts, batch fill, snapshots,
//!   micro-batch gradient steps, checkpoints, evaluation.
//! * [`io`] — persistent formats (traces, logs, reports, experiment
//!   config) and the end-to-end experiment runner.
//!
//! Rollout generation, evaluation and entropy rescoring fan out across
//! worker threads via rayon when the `parallel` feature (default) is
//! enabled; disabling it yields a fully sequential build. Results are
//! merged in deterministic order, so both builds produce bit-identical
//! artifacts for the same configuration.

pub mod decode;
pub mod entropy;
pub mod exec;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod seeding;
pub mod tasks;
pub mod trainer;

pub use graph::{GraphError, NodeId, Tape};
pub use kernels::{softmax_with_temperature, Matrix};
pub use model::{init_params, ModelConfig, ModelError, PolicyParams};
