//! Learned latent-space augmentation: an adversarial autoencoder maps frames
//! to latent codes, a ridge-regressed linear map advances a code by one time
//! step, and a skip-connected conditional GAN renders the advanced code back
//! into an image conditioned on the source frame.
//!
//! Everything runs on a small CPU tensor library with tape-based reverse-mode
//! differentiation ([`autodiff`]).

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod kernels;
pub mod kv;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
