use openblas_src as _;

pub mod bench;
pub mod datagen;
pub mod dissip;
pub mod error;
pub mod matqmi;
pub mod network;
pub mod serial;
pub mod synth;

pub use error::{Error, Result};
