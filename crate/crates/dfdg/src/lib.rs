//! A single-process laboratory for one-shot federated learning with
//! data-free dual-generator distillation.
//!
//! The pipeline: partition a dataset across clients with a Dirichlet draw
//! ([`data`]), train each client locally ([`client`]), then on the server
//! aggregate once and alternate adversarial generator training with
//! dual-model distillation ([`server`], objectives in [`losses`]). Baselines
//! (plain one-shot FedAvg, single-generator variants with different
//! transferability gates) are configuration variants of the same loop.
//! [`runner`] ties it together behind a CLI with persisted metrics and plots.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod plots;
pub mod runner;
pub mod server;
pub mod models;
pub mod seeds;

pub use error::{DfdgError, Result};
