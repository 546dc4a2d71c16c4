//! Projected signed-gradient attack in latent space.
//!
//! The attacker nudges a latent inside an infinity-norm ball so that a feature
//! classifier, looking at the generated image, becomes confident the feature
//! is present.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor};
use crate::genmodels::{
    latent_at, latent_batch, Dense, GenError, GeneratorParams, ProbeParams, EMBED_DIM,
};
use crate::metrics::{dataset_stats, score_latents, MetricsError, Quality};
use crate::synthdata::{FeatureName, LabeledImage};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("attack and evaluation probes share seed {0}; use two independently trained probes")]
    SameProbe(u64),
    #[error("non-finite gradient at attack step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] GenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eta: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eta: 0.02,
            steps: 50,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// The probe's head for one feature as a single-output layer.
fn head(probe: &ProbeParams, feature: FeatureName) -> Dense {
    let k = feature.index();
    let outs = probe.heads.outputs();
    let column: Vec<f64> = (0..EMBED_DIM)
        .map(|i| probe.heads.weight.data()[i * outs + k])
        .collect();
    Dense {
        weight: Tensor::new(vec![EMBED_DIM, 1], column).expect("column shape"),
        bias: Tensor::vector(vec![probe.heads.bias.data()[k]]),
    }
}

/// Attacks every latent independently; the batch only shares the forward pass.
///
/// Each step moves against the sign of the gradient of the cross-entropy
/// towards "feature present", then clips the offset from the start to the
/// ε-ball and re-centres it on the start.
pub fn pgd_attack_batch(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    feature: FeatureName,
    latents: &[Vec<f64>],
    cfg: &AttackConfig,
) -> Result<Vec<Vec<f64>>, AttackError> {
    cfg.validate()?;
    let dim = gen.latent_dim();
    let start = latent_batch(latents, dim)?;
    if latents.is_empty() || cfg.steps == 0 || cfg.epsilon == 0.0 {
        return Ok(latents.to_vec());
    }
    let n = latents.len();
    let head = head(probe, feature);
    let ones = Tensor::ones(&[n, 1]);
    let mut current = start.clone();

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let zv = g.param(current.clone())?;
        let bound_gen = gen.bind(&mut g, false)?;
        let hidden = probe.hidden.bind(&mut g, false)?;
        let out = head.bind(&mut g, false)?;
        let img = bound_gen.images(&mut g, zv)?;
        let e = hidden.forward(&mut g, img)?;
        let e = g.tanh(e);
        let logit = out.forward(&mut g, e)?;
        // Mean over the batch scales each row's gradient by 1/n, which leaves its sign intact.
        let loss = g.bce_with_logits(logit, &ones)?;
        let grad = g.backward(loss)?.get(zv);
        if !grad.is_finite() {
            return Err(AttackError::NonFiniteGradient { step });
        }
        let eps = cfg.epsilon;
        for ((c, s), d) in current
            .data_mut()
            .iter_mut()
            .zip(start.data())
            .zip(grad.data())
        {
            let sign = if *d > 0.0 {
                1.0
            } else if *d < 0.0 {
                -1.0
            } else {
                0.0
            };
            let moved = *c - cfg.eta * sign;
            *c = s + (moved - s).clamp(-eps, eps);
        }
    }
    Ok(current.data().chunks(dim).map(<[f64]>::to_vec).collect())
}

pub fn pgd_attack(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    feature: FeatureName,
    z: &[f64],
    cfg: &AttackConfig,
) -> Result<Vec<f64>, AttackError> {
    Ok(pgd_attack_batch(gen, probe, feature, &[z.to_vec()], cfg)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub tfr_before: f64,
    pub tfr_after: f64,
    pub quality_before: Quality,
    pub quality_after: Quality,
    pub n: usize,
    pub config: AttackConfig,
    /// Per-latent flags: the evaluation probe calls the attacked image positive.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SweepOptions {
    pub splits: usize,
    pub record_success: bool,
}

const ATTACK_CHUNK: usize = 250;

/// Attacks latents `0..n` of stream `cfg.seed` with `probe_train` and judges
/// before and after with `probe_eval`. Fréchet distances are to `reference`
/// in the evaluation probe's embedding.
#[allow(clippy::too_many_arguments)]
pub fn attack_sweep(
    gen: &GeneratorParams,
    probe_train: &ProbeParams,
    probe_eval: &ProbeParams,
    feature: FeatureName,
    n: usize,
    cfg: &AttackConfig,
    reference: &[LabeledImage],
    opts: SweepOptions,
) -> Result<AttackReport, AttackError> {
    if probe_train.seed == probe_eval.seed {
        return Err(AttackError::SameProbe(probe_train.seed));
    }
    cfg.validate()?;
    let reference = dataset_stats(probe_eval, reference)?;
    let dim = gen.latent_dim();
    let latents: Vec<Vec<f64>> = (0..n as u64).map(|i| latent_at(cfg.seed, i, dim)).collect();
    let mut attacked = Vec::with_capacity(n);
    for chunk in latents.chunks(ATTACK_CHUNK) {
        attacked.extend(pgd_attack_batch(gen, probe_train, feature, chunk, cfg)?);
    }
    let splits = opts.splits.max(1);
    let (tfr_before, quality_before) =
        score_latents(gen, probe_eval, feature, &latents, &reference, splits)?;
    let (tfr_after, quality_after) =
        score_latents(gen, probe_eval, feature, &attacked, &reference, splits)?;
    let success = if opts.record_success {
        let probs = crate::metrics::probs_of_latents(gen, probe_eval, &attacked)?;
        Some(probs.iter().map(|p| p[feature.index()] >= 0.5).collect())
    } else {
        None
    };
    Ok(AttackReport {
        tfr_before,
        tfr_after,
        quality_before,
        quality_after,
        n,
        config: cfg.clone(),
        success,
    })
}
