//! Retrieval-augmented time-series forecasting: a windowed series store, a
//! domain-partitioned cluster tree with hybrid top-k search, pattern fusion by
//! cross-attention, and a trainable forecasting head.

pub mod coherer;
pub mod error;
pub mod hhtr;
pub mod index;
pub mod kmeans;
pub mod model;
pub mod msil;
pub mod series;
pub mod storage;

pub use error::{Error, Result};
