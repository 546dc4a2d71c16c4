//! Feature unlearning for small latent-variable image generators.
//!
//! The crate is organised bottom-up:
//!
//! * [`synthdata`]: procedural glyph images with exact feature labels.
//! * [`diffcore`]: reverse-mode differentiation, MS-SSIM and Adam.
//! * [`genmodels`]: MLP GAN, VAE and the probe classifier, plus checkpoints.
//! * [`latentfeat`]: target directions and thresholds in latent space.
//! * [`unlearner`]: fine-tuning a copy of a generator so it stops producing a feature.
//! * [`attack`]: latent-space PGD against a feature classifier.
//! * [`metrics`]: feature ratio, probe-based Fréchet distance and inception score, ROC-AUC.

pub mod attack;
pub mod diffcore;
pub mod genmodels;
pub mod latentfeat;
pub mod metrics;
pub mod synthdata;
pub mod unlearner;
