//! Mammography CAD pipeline: mini-MIAS ingest, denoising and k-means
//! segmentation, Haar wavelet channels, affine augmentation, a small CNN with
//! transfer-learning mechanics, a two-stage cascade classifier and ROC/AUC
//! evaluation.

pub mod augment;
pub mod cascade;
pub mod eval;
pub mod image;
pub mod mias;
pub mod nn;
pub mod pgm;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod wavelet;
