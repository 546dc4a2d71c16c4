//! Small MLP generative models and the probe classifier.
//!
//! Every network here is a stack of dense layers trained with the graph in
//! [`crate::diffcore`]. All randomness flows from explicit seeds.

mod checkpoint;
mod gan;
mod probe;
mod vae;

pub use checkpoint::{
    CheckpointHeader, ModelCheckpoint, ModelKind, TensorEntry, CHECKPOINT_VERSION,
};
pub use gan::{
    generate, generate_batch, train_gan, train_gan_from, BoundGenerator, DiscriminatorParams,
    GanConfig, GanModel, GanStep, GeneratorArch, GeneratorParams,
};
pub use probe::{
    probe_embed, probe_embed_batch, probe_predict, probe_probs_batch, train_probe, ProbeConfig,
    ProbeParams, ProbeReport, ProbeTrained, EMBED_DIM,
};
pub use vae::{
    encode, encode_batch, kl_standard_normal, train_vae, train_vae_from, VaeConfig, VaeParams,
    VaeTrained,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::synthdata::{FeatureName, LabeledImage};

pub const LATENT_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("latent has {got} components, model expects {expected}")]
    LatentDim { expected: usize, got: usize },
    #[error("image has {got} pixels, model expects {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature `{0}` has a single class in the training labels")]
    DegenerateLabels(FeatureName),
    #[error("discriminator collapsed: loss below 1e-4 for 200 consecutive steps (step {step})")]
    Diverged { step: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic standard-normal latent number `index` of the stream `seed`.
///
/// Latents are addressable individually so that a sample id `(seed, index)`
/// always names the same vector regardless of batch size.
pub fn latent_at(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample_latents(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n as u64).map(|i| latent_at(seed, i, dim)).collect()
}

/// Row-stacks latents into `[n, dim]`.
pub fn latent_batch(latents: &[Vec<f64>], dim: usize) -> Result<Tensor, GenError> {
    let mut data = Vec::with_capacity(latents.len() * dim);
    for z in latents {
        if z.len() != dim {
            return Err(GenError::LatentDim {
                expected: dim,
                got: z.len(),
            });
        }
        data.extend_from_slice(z);
    }
    Ok(Tensor::new(vec![latents.len(), dim], data)?)
}

/// Flattens images into `[n, pixels]`.
pub fn image_batch<'a>(
    images: impl IntoIterator<Item = &'a Tensor>,
    pixels: usize,
) -> Result<Tensor, GenError> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.len() != pixels {
            return Err(GenError::ImageSize {
                expected: pixels,
                got: img.len(),
            });
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    Ok(Tensor::new(vec![n, pixels], data)?)
}

pub(crate) fn dataset_batch(data: &[LabeledImage], idx: &[usize]) -> Result<Tensor, GenError> {
    image_batch(idx.iter().map(|&i| data[i].image()), data[0].image().len())
}

/// Fully connected layer, `y = x · weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weights and biases.
    pub fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight =
            Tensor::new(vec![inputs, outputs], draw(inputs * outputs)).expect("dense shape");
        let bias = Tensor::vector(draw(outputs));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundDense, DiffError> {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone())?, g.param(self.bias.clone())?)
        } else {
            (
                g.constant(self.weight.clone())?,
                g.constant(self.bias.clone())?,
            )
        };
        Ok(BoundDense { weight, bias })
    }
}

impl BoundDense {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        g.affine(x, self.weight, self.bias)
    }
}

/// Splits `0..n` into shuffled minibatches of at most `batch`.
pub(crate) fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
