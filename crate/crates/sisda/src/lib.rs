//! Self-improving domain adaptation for a toy autoregressive transducer.
//!
//! The library trains a small decoder-only transformer on a synthetic
//! symbol-transduction task, decodes N-best hypotheses on an unlabeled
//! shifted domain, scores each hypothesis by how much its prediction steps
//! lean on the prompt tokens (a saliency-derived quality signal), and uses
//! those scores as rewards for reinforcement-style adaptation. Supervised
//! and self-training baselines share the same machinery.
//!
//! Modules, bottom up:
//!
//! * [`graph`] - reverse-mode autodiff tape (`f64`, define-by-run)
//! * [`align`] - edit distance, token alignment, token error rate
//! * [`seed`] - deterministic per-purpose RNG derivation
//! * [`model`] - the toy transformer: params, forward paths, losses,
//!   adapters
//! * [`decode`] - greedy and beam-search N-best decoding
//! * [`saliency`] - attention-times-gradient saliency, prompt reliance,
//!   hypothesis quality
//! * [`adapt`] - the optimizer, advantage-weighted adaptation and its
//!   baselines, checkpoints
//! * [`data`] - synthetic domain-shift corpora and their file format
//! * [`metrics`] - rank correlation and small statistics helpers
//! * [`oracles`] - brute-force reference implementations used by tests

pub mod adapt;
pub mod align;
pub mod data;
pub mod decode;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod saliency;
pub mod seed;
