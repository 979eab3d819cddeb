//! Deterministic federated-learning simulator with stateless per-client,
//! per-instance personalization via dynamic routing.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense f64 math with reverse-mode AD and SGD
//! - [`model`]: encoders, shared decoder, gating policy, and the dynamic
//!   personalized model that routes between global and local parameters
//! - [`dataset`] / [`synth`]: client datasets and synthetic heterogeneous
//!   federations with a controllable heterogeneity dial
//! - [`client`]: the three-stage per-round client procedure and pre-inference
//! - [`server`]: client sampling, weighted FedAvg aggregation, the round loop
//! - [`metrics`]: accuracy, heterogeneity estimates, routing statistics and
//!   model-comparison tables
//!
//! Every random decision derives from an explicit seed stream ([`rng`]), so
//! full runs are bit-reproducible regardless of scheduling.

pub mod autodiff;
pub mod client;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod server;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
