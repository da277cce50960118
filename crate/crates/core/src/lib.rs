//! Mask-reconstruct image augmentation at desk scale.
//!
//! A small masked autoencoder is pretrained with random patch masking, then
//! frozen and reused as a nonlinear data augmentor: the class-token attention
//! of its encoder scores each patch, low-attention patches are erased, and the
//! decoder fills them back in. The reconstruction is the augmented sample.
//!
//! The crate is generic over the scalar type (`f32` for training, `f64` for
//! gradient-check mode); concrete aliases live at the crate root.

pub mod attmask;
pub mod augment;
pub mod baselines;
pub mod error;
pub mod image;
pub mod mae;
pub mod nn;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit image, the training dtype.
pub type Image32 = image::Image<f32>;
/// 64-bit image, the gradient-check dtype.
pub type Image64 = image::Image<f64>;
/// 32-bit image batch.
pub type ImageBatch32 = image::ImageBatch<f32>;
/// 32-bit autoencoder parameters.
pub type MaeParams32 = mae::MaskedAutoencoderParams<f32>;
/// 64-bit autoencoder parameters (gradient-check mode).
pub type MaeParams64 = mae::MaskedAutoencoderParams<f64>;
/// 32-bit frozen augmentor.
pub type Augmentor32 = augment::AugmentorHandle<f32>;
