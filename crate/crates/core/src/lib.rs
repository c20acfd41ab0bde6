//! A laboratory for pooling bias in hard-negative ranking training.
//!
//! A synthetic world with complete relevance is pooled by a weak retriever
//! to produce a sparsely labeled dataset. Rankers are trained on hard
//! negatives from a stronger retriever, either naively or with coupled
//! relevance/selection models whose cross weights correct for documents
//! that were never judged, and are evaluated against the complete
//! relevance.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod retriever;
pub mod rng;
pub mod scorer;
pub mod training;
pub mod world;

pub use error::{Error, Result};
