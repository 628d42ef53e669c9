//! Ranking-infused listwise CTR prediction at desk scale.
//!
//! One trainable pipeline covers pointwise and listwise evaluation: a
//! dual-transformer over candidates and user context, page-level history
//! encoding with position-aware target attention, a stacked-HSTU listwise
//! head, and an embedding cache that lets the rerank stage reuse rank-stage
//! representations. Everything runs on a small reverse-mode autodiff core
//! with a fixed evaluation order, so runs are reproducible bit for bit.

pub mod cuht;
pub mod data;
pub mod ec;
pub mod error;
pub mod graph;
pub mod gradcheck;
pub mod layers;
pub mod lmh;
pub mod metrics;
pub mod model;
pub mod params;
pub mod selection;
pub mod train;
pub mod tensor;
pub mod ucdt;

pub use error::{Result, RiaError};
pub use graph::{Graph, TensorId};
pub use tensor::{Elem, Tensor};
