pub mod error;
pub mod extrapolate;
pub mod lsq;
pub mod mup;
pub mod noise;
pub mod numfmt;
pub mod pipeline;
pub mod powerlaw;
pub mod profile;
pub mod run_store;
pub mod schedule;
pub mod surge;
pub mod synth;

pub use error::{Error, Result};
