//! Self-supervised relational reasoning on small images.
//!
//! A Conv-4 backbone is trained without labels by asking a relation head
//! whether two augmented views come from the same image. The crate bundles
//! the autodiff engine, dataset loaders, augmentation, baselines and the
//! linear-probe and retrieval evaluations needed to run the method end to end.

pub mod augment;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod relational;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
