//! Forecasting engine for multivariate time series built on a jointly
//! learned directed graph.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff tensor core
//! ([`tensor`]), a graph structure learning layer ([`graph_learning`]),
//! mix-hop graph convolutions ([`graph_conv`]), gated dilated-inception
//! temporal convolutions ([`temporal_conv`]), the assembled network
//! ([`model`]), the training algorithm with curriculum learning and
//! node-subset sampling ([`training`]), data ingestion plus evaluation
//! metrics ([`data`], [`metrics`]), checkpointing ([`checkpoint`]), a
//! synthetic benchmark generator ([`synth`]), and a finite-difference
//! gradient verification suite ([`gradcheck`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph_conv;
pub mod graph_learning;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod temporal_conv;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
