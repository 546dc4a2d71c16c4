use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dataset_batch, image_batch, shuffled_batches, BoundDense, Dense, GenError};
use crate::diffcore::{AdamConfig, AdamState, Graph, Parameterized, Tensor, Var};
use crate::synthdata::{FeatureName, LabeledImage, IMAGE_PIXELS};

pub const EMBED_DIM: usize = 128;

/// Multi-label feature classifier: pixels → 128 (tanh, the embedding) → one
/// sigmoid head per [`FeatureName`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub hidden: Dense,
    pub heads: Dense,
    /// Seed the probe was trained from; two probes with equal seeds are the same probe.
    pub seed: u64,
}

pub struct BoundProbe {
    hidden: BoundDense,
    heads: BoundDense,
}

impl ProbeParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Dense::init(&mut rng, IMAGE_PIXELS, EMBED_DIM),
            heads: Dense::init(&mut rng, EMBED_DIM, FeatureName::ALL.len()),
            seed,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundProbe, GenError> {
        Ok(BoundProbe {
            hidden: self.hidden.bind(g, trainable)?,
            heads: self.heads.bind(g, trainable)?,
        })
    }
}

impl BoundProbe {
    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var, GenError> {
        let h = self.hidden.forward(g, x)?;
        Ok(g.tanh(h))
    }

    /// Head logits `[n, 3]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var, GenError> {
        let e = self.embed(g, x)?;
        Ok(self.heads.forward(g, e)?)
    }

    fn vars(&self) -> [Var; 4] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.heads.weight,
            self.heads.bias,
        ]
    }
}

impl Parameterized for ProbeParams {
    fn param_names(&self) -> Vec<String> {
        ["hidden.weight", "hidden.bias", "heads.weight", "heads.bias"]
            .map(String::from)
            .to_vec()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.heads.weight,
            &self.heads.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.heads.weight,
            &mut self.heads.bias,
        ]
    }
}

fn as_rows(images: &Tensor) -> Result<Tensor, GenError> {
    let n = images.len() / IMAGE_PIXELS;
    if n == 0 || n * IMAGE_PIXELS != images.len() {
        return Err(GenError::ImageSize {
            expected: IMAGE_PIXELS,
            got: images.len(),
        });
    }
    Ok(images.clone().reshape(&[n, IMAGE_PIXELS])?)
}

/// Penultimate activations for a batch of images (`[n, 32, 32]` or `[n, 1024]`).
pub fn probe_embed_batch(params: &ProbeParams, images: &Tensor) -> Result<Vec<Vec<f64>>, GenError> {
    let x = as_rows(images)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let xv = g.constant(x)?;
    let e = p.embed(&mut g, xv)?;
    Ok(g.value(e)
        .data()
        .chunks(EMBED_DIM)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Per-head probabilities for a batch of images.
pub fn probe_probs_batch(params: &ProbeParams, images: &Tensor) -> Result<Vec<[f64; 3]>, GenError> {
    let x = as_rows(images)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let xv = g.constant(x)?;
    let l = p.logits(&mut g, xv)?;
    let s = g.sigmoid(l);
    Ok(g.value(s)
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

pub fn probe_embed(params: &ProbeParams, image: &Tensor) -> Result<Vec<f64>, GenError> {
    Ok(probe_embed_batch(params, &image_batch([image], IMAGE_PIXELS)?)?.remove(0))
}

pub fn probe_predict(
    params: &ProbeParams,
    image: &Tensor,
    feature: FeatureName,
) -> Result<f64, GenError> {
    Ok(probe_probs_batch(params, &image_batch([image], IMAGE_PIXELS)?)?[0][feature.index()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the dataset (taken from the end) held out for accuracy.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            holdout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: BTreeMap<FeatureName, f64>,
    pub n_train: usize,
    pub n_holdout: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrained {
    pub params: ProbeParams,
    pub report: ProbeReport,
}

fn label_row(item: &LabeledImage) -> [f64; 3] {
    let mut row = [0.0; 3];
    for f in FeatureName::ALL {
        row[f.index()] = f64::from(u8::from(item.label(f)));
    }
    row
}

/// Multi-label binary cross-entropy training with a held-out accuracy report.
pub fn train_probe(data: &[LabeledImage], cfg: &ProbeConfig) -> Result<ProbeTrained, GenError> {
    if data.is_empty() {
        return Err(GenError::EmptyDataset);
    }
    for f in FeatureName::ALL {
        let positives = data.iter().filter(|d| d.label(f)).count();
        if positives == 0 || positives == data.len() {
            return Err(GenError::DegenerateLabels(f));
        }
    }
    let n_holdout = ((data.len() as f64) * cfg.holdout).round() as usize;
    let n_holdout = n_holdout.min(data.len() - 1);
    let (train, holdout) = data.split_at(data.len() - n_holdout);

    let mut params = ProbeParams::init(cfg.seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr), &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa54f_f53a_5f1d_36f1);
    let mut final_loss = f64::NAN;
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        for idx in shuffled_batches(&mut rng, train.len(), cfg.batch) {
            let x = dataset_batch(train, &idx)?;
            let targets: Vec<f64> = idx.iter().flat_map(|&i| label_row(&train[i])).collect();
            let targets = Tensor::new(vec![idx.len(), 3], targets)?;
            let mut g = Graph::new();
            let p = params.bind(&mut g, true)?;
            let xv = g.constant(x)?;
            let logits = p.logits(&mut g, xv)?;
            let loss = g.bce_with_logits(logits, &targets)?;
            final_loss = g.value(loss).item();
            if !final_loss.is_finite() {
                return Err(GenError::NonFiniteLoss { step });
            }
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v)).collect();
            opt.step(&mut params, &gs)?;
            step += 1;
        }
    }

    let mut accuracy = BTreeMap::new();
    if !holdout.is_empty() {
        let idx: Vec<usize> = (0..holdout.len()).collect();
        let probs = probe_probs_batch(&params, &dataset_batch(holdout, &idx)?)?;
        for f in FeatureName::ALL {
            let correct = probs
                .iter()
                .zip(holdout)
                .filter(|(p, d)| (p[f.index()] >= 0.5) == d.label(f))
                .count();
            accuracy.insert(f, correct as f64 / holdout.len() as f64);
        }
    }
    Ok(ProbeTrained {
        params,
        report: ProbeReport {
            accuracy,
            n_train: train.len(),
            n_holdout: holdout.len(),
            final_loss,
        },
    })
}
