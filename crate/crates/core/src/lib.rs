//! xMTrans: a cross-modality fusion transformer for long-term forecasting of a
//! target time series with the help of a support time series.
//!
//! The crate is layered bottom-up:
//!
//! * [`autodiff`] dense f64 tensors, a reverse-mode tape and Adam.
//! * [`data`] grid ingestion, calendar features, aggregation, K-means
//!   coarsening, windowing and a lag-coupled synthetic generator.
//! * [`model`] the network itself (RevIN, embeddings, fusion layers, readout)
//!   and checkpoints.
//! * [`train`] single-resolution, temporal multi-resolution and
//!   spatial multi-resolution training, horizon evaluation and JSON export.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod train;

pub use error::{Error, Result};
