//! Numerical core of the brainscl pipeline.
//!
//! Everything in this crate is pure computation over in-memory data: Pearson
//! connectivity, the learned sparse structure view, clinical-text embeddings,
//! similarity network fusion, spectral subtype discovery, dual-level attention
//! prototypes, and the subtype-guided contrastive trainer. File formats, the
//! CLI and any network access live in the `brainscl` crate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod cohort;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod exec;
pub mod linalg;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod prototype;
pub mod rng;
pub mod snf;
pub mod structure;
pub mod subtype;
pub mod synth;
pub mod text;
pub mod view;

pub use cohort::{Cohort, ConnectivityKind, ConnectivityMatrix, Label, Subject};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use view::{View, ViewSimilarity};
