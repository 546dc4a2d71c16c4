//! Target directions in latent space.
//!
//! A target vector is the normalised difference between the mean latent of
//! feature-positive and feature-negative samples. Latents whose projection on
//! it reaches the threshold are treated as carrying the feature, and
//! [`translate`] moves a latent back onto the threshold hyperplane.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genmodels::{
    encode_batch, generate_batch, latent_at, probe_probs_batch, GenError, GeneratorParams,
    ProbeParams, VaeParams,
};
use crate::synthdata::FeatureName;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("no {0} latents to average")]
    EmptySide(Side),
    #[error("latent has {got} components, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("positive and negative means coincide; the target direction is undefined")]
    DegenerateDirection,
    #[error("all {n} samples fell on the {filled} side (base rate {base_rate:.3}); cannot form a target vector")]
    OneSided {
        n: usize,
        filled: Side,
        base_rate: f64,
    },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("target vector is for `{got}`, expected `{expected}`")]
    FeatureMismatch {
        expected: FeatureName,
        got: FeatureName,
    },
    #[error("selection index {0} appears twice")]
    DuplicateSelection(u64),
    #[error(transparent)]
    Model(#[from] GenError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Positive => "positive",
            Side::Negative => "negative",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub feature: FeatureName,
    /// Unit-norm direction.
    pub direction: Vec<f64>,
    /// Length of the mean difference before normalisation.
    pub raw_norm: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default)]
    pub model_checkpoint_id: Option<String>,
}

impl TargetVector {
    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn expect_feature(&self, feature: FeatureName) -> Result<(), LatentError> {
        if self.feature != feature {
            return Err(LatentError::FeatureMismatch {
                expected: feature,
                got: self.feature,
            });
        }
        Ok(())
    }
}

fn check_dim(z: &[f64], expected: usize) -> Result<(), LatentError> {
    if z.len() != expected {
        return Err(LatentError::DimMismatch {
            expected,
            got: z.len(),
        });
    }
    Ok(())
}

fn mean(latents: &[Vec<f64>], dim: usize) -> Result<Vec<f64>, LatentError> {
    let mut acc = vec![0.0; dim];
    for z in latents {
        check_dim(z, dim)?;
        for (a, v) in acc.iter_mut().zip(z) {
            *a += v;
        }
    }
    let n = latents.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean-difference direction with the threshold at the midpoint of the two
/// class-mean projections.
pub fn identify_target(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    feature: FeatureName,
) -> Result<TargetVector, LatentError> {
    let first = pos.first().ok_or(LatentError::EmptySide(Side::Positive))?;
    if neg.is_empty() {
        return Err(LatentError::EmptySide(Side::Negative));
    }
    let dim = first.len();
    let mp = mean(pos, dim)?;
    let mn = mean(neg, dim)?;
    let diff: Vec<f64> = mp.iter().zip(&mn).map(|(a, b)| a - b).collect();
    let raw_norm = dot(&diff, &diff).sqrt();
    if raw_norm == 0.0 || !raw_norm.is_finite() {
        return Err(LatentError::DegenerateDirection);
    }
    let direction: Vec<f64> = diff.iter().map(|d| d / raw_norm).collect();
    // The mean of projections equals the projection of the mean.
    let threshold = 0.5 * (dot(&mp, &direction) + dot(&mn, &direction));
    Ok(TargetVector {
        feature,
        direction,
        raw_norm,
        threshold,
        n_pos: pos.len(),
        n_neg: neg.len(),
        model_checkpoint_id: None,
    })
}

pub fn scalar_projection(z: &[f64], tv: &TargetVector) -> Result<f64, LatentError> {
    check_dim(z, tv.dim())?;
    Ok(dot(z, &tv.direction))
}

/// 1 when the projection reaches the threshold, 0 below it.
pub fn classify(z: &[f64], tv: &TargetVector) -> Result<u8, LatentError> {
    Ok(u8::from(scalar_projection(z, tv)? >= tv.threshold))
}

/// Moves `z` along the direction onto the threshold hyperplane.
pub fn translate(z: &[f64], tv: &TargetVector) -> Result<Vec<f64>, LatentError> {
    let shift = scalar_projection(z, tv)? - tv.threshold;
    Ok(z.iter()
        .zip(&tv.direction)
        .map(|(v, d)| v - shift * d)
        .collect())
}

/// A generator whose latents can be labelled.
#[derive(Clone, Copy, Debug)]
pub enum LatentSource<'a> {
    /// GAN latents are the sampled vectors themselves.
    Gan(&'a GeneratorParams),
    /// VAE latents are posterior means of the decoded images.
    Vae(&'a VaeParams),
}

impl LatentSource<'_> {
    pub fn generator(&self) -> &GeneratorParams {
        match self {
            LatentSource::Gan(g) => g,
            LatentSource::Vae(v) => &v.decoder,
        }
    }
}

/// Who decides which samples carry the feature.
#[derive(Clone, Copy, Debug)]
pub enum Labeler<'a> {
    Probe(&'a ProbeParams),
    /// `(latent index, selected)` pairs in the sample stream; unlisted indices are skipped.
    Selections(&'a [(u64, bool)]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSplit {
    pub pos: Vec<Vec<f64>>,
    pub neg: Vec<Vec<f64>>,
}

const CHUNK: usize = 256;

/// Samples latents `0..n` of the stream `seed`, generates their images and
/// partitions the (model-space) latents by the labeler.
pub fn collect_latents(
    source: LatentSource<'_>,
    labeler: Labeler<'_>,
    feature: FeatureName,
    n: usize,
    seed: u64,
) -> Result<LatentSplit, LatentError> {
    let gen = source.generator();
    let dim = gen.latent_dim();
    let labelled: Vec<(u64, Option<bool>)> = match labeler {
        Labeler::Probe(_) => {
            if n < 2 {
                return Err(LatentError::TooFewSamples(n));
            }
            (0..n as u64).map(|i| (i, None)).collect()
        }
        Labeler::Selections(sel) => {
            let mut seen = std::collections::BTreeSet::new();
            for &(i, _) in sel {
                if !seen.insert(i) {
                    return Err(LatentError::DuplicateSelection(i));
                }
            }
            if sel.len() < 2 {
                return Err(LatentError::TooFewSamples(sel.len()));
            }
            sel.iter().map(|&(i, s)| (i, Some(s))).collect()
        }
    };

    let mut split = LatentSplit {
        pos: Vec::new(),
        neg: Vec::new(),
    };
    for chunk in labelled.chunks(CHUNK) {
        let z: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&(i, _)| latent_at(seed, i, dim))
            .collect();
        let needs_images =
            matches!(labeler, Labeler::Probe(_)) || matches!(source, LatentSource::Vae(_));
        let images = if needs_images {
            Some(generate_batch(gen, &z)?)
        } else {
            None
        };
        let labels: Vec<bool> = match labeler {
            Labeler::Probe(p) => probe_probs_batch(p, images.as_ref().expect("generated"))?
                .iter()
                .map(|pr| pr[feature.index()] >= 0.5)
                .collect(),
            Labeler::Selections(_) => chunk.iter().map(|&(_, s)| s.expect("selection")).collect(),
        };
        let latents = match source {
            LatentSource::Gan(_) => z,
            LatentSource::Vae(v) => encode_batch(v, images.as_ref().expect("generated"))?,
        };
        for (l, is_pos) in latents.into_iter().zip(labels) {
            if is_pos {
                split.pos.push(l);
            } else {
                split.neg.push(l);
            }
        }
    }
    let total = split.pos.len() + split.neg.len();
    if split.pos.is_empty() || split.neg.is_empty() {
        let filled = if split.pos.is_empty() {
            Side::Negative
        } else {
            Side::Positive
        };
        return Err(LatentError::OneSided {
            n: total,
            filled,
            base_rate: split.pos.len() as f64 / total as f64,
        });
    }
    Ok(split)
}
