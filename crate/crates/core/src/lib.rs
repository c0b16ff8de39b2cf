//! Federated training of encoder-decoder Transformer translation models in
//! which clients exchange and/or train only designated "controller" layers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f64 tensors, reverse-mode tape, Adam, parameter container
//! - [`subword`]: joint byte-pair-encoding vocabulary
//! - [`model`]: Transformer with controller insertion/designation
//! - [`federation`]: FedAvg rounds, wire frames and the cost ledger
//! - [`evaluation`]: corpus BLEU and evaluation matrices
//! - [`experiments`]: configuration labels, baselines and FL sessions
//! - [`data`]: corpus ingestion and synthetic non-IID domains
//! - [`cli`]: the `fednmt` command-line front end

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod federation;
pub mod model;
pub mod subword;
pub mod tensor;

pub use error::{Error, Result};
