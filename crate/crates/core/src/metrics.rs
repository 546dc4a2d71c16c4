//! Evaluation of generators with the probe as judge and embedder.
//!
//! The probe replaces the Inception network, so Fréchet distances and
//! inception scores here are only comparable with each other.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genmodels::{
    encode_batch, generate_batch, image_batch, latent_at, probe_embed_batch, probe_probs_batch,
    GenError, GeneratorParams, ProbeParams, VaeParams,
};
use crate::latentfeat::{scalar_projection, LatentError, TargetVector};
use crate::synthdata::{FeatureName, LabeledImage, IMAGE_PIXELS};
use crate::unlearner::{unlearn, LossTerms, UnlearnConfig, UnlearnError};

/// Added to both covariance diagonals before the matrix square root.
pub const COV_SHRINKAGE: f64 = 1e-6;
const CHUNK: usize = 500;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("feature sets have dimensions {0} and {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite eigenvalue in the Fréchet computation")]
    NonFiniteEigen,
    #[error("ROC-AUC needs both classes; got {positives} positives of {n}")]
    SingleClass { positives: usize, n: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("ablation needs at least one configuration")]
    EmptyAblation,
    #[error(transparent)]
    Model(#[from] GenError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
}

/// Latents `0..n` of stream `seed`, in chunks, with their generated images.
fn for_each_chunk(
    gen: &GeneratorParams,
    n: usize,
    seed: u64,
    mut f: impl FnMut(&[Vec<f64>], &crate::diffcore::Tensor) -> Result<(), MetricsError>,
) -> Result<(), MetricsError> {
    let dim = gen.latent_dim();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let z: Vec<Vec<f64>> = (start as u64..end as u64)
            .map(|i| latent_at(seed, i, dim))
            .collect();
        let imgs = generate_batch(gen, &z)?;
        f(&z, &imgs)?;
        start = end;
    }
    Ok(())
}

/// Percentage of probabilities at or above 0.5 for `feature`.
pub fn tfr_of_probs(probs: &[[f64; 3]], feature: FeatureName) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().filter(|p| p[feature.index()] >= 0.5).count();
    100.0 * hits as f64 / probs.len() as f64
}

/// Probe probabilities of the images generated from `latents`.
pub fn probs_of_latents(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    latents: &[Vec<f64>],
) -> Result<Vec<[f64; 3]>, MetricsError> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        out.extend(probe_probs_batch(probe, &generate_batch(gen, chunk)?)?);
    }
    Ok(out)
}

/// Percentage of `n` generated samples (latents `0..n` of stream `seed`) the probe calls positive.
pub fn target_feature_ratio(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    feature: FeatureName,
    n: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::TooFewSamples { min: 1, got: 0 });
    }
    let mut probs = Vec::with_capacity(n);
    for_each_chunk(gen, n, seed, |_, imgs| {
        probs.extend(probe_probs_batch(probe, imgs)?);
        Ok(())
    })?;
    Ok(tfr_of_probs(&probs, feature))
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance; needs at least two rows.
    pub fn from_features(feats: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let n = feats.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples { min: 2, got: n });
        }
        let d = feats[0].len();
        let mut mean = DVector::zeros(d);
        for f in feats {
            if f.len() != d {
                return Err(MetricsError::DimMismatch(d, f.len()));
            }
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut centred = DMatrix::zeros(n, d);
        for (i, f) in feats.iter().enumerate() {
            for j in 0..d {
                centred[(i, j)] = f[j] - mean[j];
            }
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok(Self { mean, cov, n })
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteEigen);
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at zero.
///
/// The trace of `(Σa Σb)^½` is taken from the symmetric matrix
/// `Σa^½ Σb Σa^½`, which has the same eigenvalues.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(MetricsError::DimMismatch(d, b.mean.len()));
    }
    let shrink = DMatrix::identity(d, d) * COV_SHRINKAGE;
    let ca = &a.cov + &shrink;
    let cb = &b.cov + &shrink;
    let sa = sqrt_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteEigen);
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let fd = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    frechet_from_stats(
        &GaussianStats::from_features(feats_a)?,
        &GaussianStats::from_features(feats_b)?,
    )
}

/// Probe-embedding statistics of a labelled dataset.
pub fn dataset_stats(
    probe: &ProbeParams,
    data: &[LabeledImage],
) -> Result<GaussianStats, MetricsError> {
    let mut feats = Vec::with_capacity(data.len());
    for chunk in data.chunks(CHUNK) {
        let batch = image_batch(chunk.iter().map(|d| d.image()), IMAGE_PIXELS)?;
        feats.extend(probe_embed_batch(probe, &batch)?);
    }
    GaussianStats::from_features(&feats)
}

/// Joint distribution over the 8 head outcomes, treating heads as independent.
/// Outcome `k` has head `i` positive when bit `i` of `k` is set.
pub fn joint_categorical(p: [f64; 3]) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (0..3)
            .map(|i| if k >> i & 1 == 1 { p[i] } else { 1.0 - p[i] })
            .product();
    }
    out
}

/// `exp(E[KL(p(y|x) ‖ p(y))])` per split, averaged over splits. Trailing
/// samples that do not fill a split are ignored.
pub fn inception_score_from_dists(dists: &[[f64; 8]], splits: usize) -> Result<f64, MetricsError> {
    if splits == 0 || dists.len() < splits {
        return Err(MetricsError::TooFewSamples {
            min: splits.max(1),
            got: dists.len(),
        });
    }
    let per = dists.len() / splits;
    let mut total = 0.0;
    for s in 0..splits {
        let part = &dists[s * per..(s + 1) * per];
        let mut marginal = [0.0; 8];
        for d in part {
            for (m, v) in marginal.iter_mut().zip(d) {
                *m += v / per as f64;
            }
        }
        let mut kl = 0.0;
        for d in part {
            for (p, m) in d.iter().zip(&marginal) {
                if *p > 0.0 {
                    kl += p * (p.ln() - m.ln());
                }
            }
        }
        total += (kl / per as f64).exp();
    }
    Ok(total / splits as f64)
}

pub fn inception_score_from_probs(probs: &[[f64; 3]], splits: usize) -> Result<f64, MetricsError> {
    let dists: Vec<[f64; 8]> = probs.iter().map(|&p| joint_categorical(p)).collect();
    inception_score_from_dists(&dists, splits)
}

pub fn probe_inception_score(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    n: usize,
    seed: u64,
    splits: usize,
) -> Result<f64, MetricsError> {
    if n < splits.max(1) {
        return Err(MetricsError::TooFewSamples {
            min: splits.max(1),
            got: n,
        });
    }
    let mut probs = Vec::with_capacity(n);
    for_each_chunk(gen, n, seed, |_, imgs| {
        probs.extend(probe_probs_batch(probe, imgs)?);
        Ok(())
    })?;
    inception_score_from_probs(&probs, splits)
}

/// Mann–Whitney form: probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let n = labels.len();
    if positives == 0 || positives == n {
        return Err(MetricsError::SingleClass { positives, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (np, nn) = (positives as f64, (n - positives) as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Where the latents used for identification come from.
#[derive(Clone, Copy, Debug)]
pub enum LatentSpace<'a> {
    /// The sampled latents themselves.
    Prior,
    /// Posterior means of the generated images.
    Encoder(&'a VaeParams),
}

/// ROC-AUC of the target-vector projection against the probe's labels on
/// `n` fresh samples.
pub fn identification_auc(
    gen: &GeneratorParams,
    space: LatentSpace<'_>,
    probe: &ProbeParams,
    tv: &TargetVector,
    n: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for_each_chunk(gen, n, seed, |z, imgs| {
        let latents = match space {
            LatentSpace::Prior => z.to_vec(),
            LatentSpace::Encoder(v) => encode_batch(v, imgs)?,
        };
        for l in &latents {
            scores.push(scalar_projection(l, tv)?);
        }
        labels.extend(
            probe_probs_batch(probe, imgs)?
                .iter()
                .map(|p| p[tv.feature.index()] >= 0.5),
        );
        Ok(())
    })?;
    roc_auc(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSeeds {
    pub sample: u64,
    pub identification: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalModels {
    pub generator: Option<String>,
    pub probe: Option<String>,
    pub target: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub feature: FeatureName,
    /// Percentage in [0, 100].
    pub tfr: f64,
    pub frechet: f64,
    pub probe_is: f64,
    /// Present when a target vector was supplied.
    pub roc_auc: Option<f64>,
    pub n_samples: usize,
    pub seeds: EvalSeeds,
    pub models: EvalModels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub splits: usize,
    /// Number of fresh samples for the identification ROC-AUC.
    pub auc_samples: usize,
    pub auc_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 1_000,
            splits: 10,
            auc_samples: 2_000,
            auc_seed: 2_000,
        }
    }
}

/// Image-set quality under the probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub frechet: f64,
    pub probe_is: f64,
}

/// TFR, Fréchet distance to `reference` and probe IS of a set of probe outputs.
pub fn score_latents(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    feature: FeatureName,
    latents: &[Vec<f64>],
    reference: &GaussianStats,
    splits: usize,
) -> Result<(f64, Quality), MetricsError> {
    let mut probs = Vec::with_capacity(latents.len());
    let mut feats = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        let imgs = generate_batch(gen, chunk)?;
        probs.extend(probe_probs_batch(probe, &imgs)?);
        feats.extend(probe_embed_batch(probe, &imgs)?);
    }
    let quality = Quality {
        frechet: frechet_from_stats(&GaussianStats::from_features(&feats)?, reference)?,
        probe_is: inception_score_from_probs(&probs, splits)?,
    };
    Ok((tfr_of_probs(&probs, feature), quality))
}

/// Full evaluation of one generator. Deterministic in all inputs.
pub fn evaluate(
    gen: &GeneratorParams,
    probe: &ProbeParams,
    feature: FeatureName,
    reference: &GaussianStats,
    identification: Option<(&TargetVector, LatentSpace<'_>)>,
    cfg: &EvalConfig,
    models: EvalModels,
) -> Result<EvalReport, MetricsError> {
    let dim = gen.latent_dim();
    let latents: Vec<Vec<f64>> = (0..cfg.n_samples as u64)
        .map(|i| latent_at(cfg.seed, i, dim))
        .collect();
    let (tfr, q) = score_latents(gen, probe, feature, &latents, reference, cfg.splits)?;
    let roc_auc = match identification {
        Some((tv, space)) => Some(identification_auc(
            gen,
            space,
            probe,
            tv,
            cfg.auc_samples,
            cfg.auc_seed,
        )?),
        None => None,
    };
    Ok(EvalReport {
        feature,
        tfr,
        frechet: q.frechet,
        probe_is: q.probe_is,
        roc_auc,
        n_samples: cfg.n_samples,
        seeds: EvalSeeds {
            sample: cfg.seed,
            identification: cfg.auc_seed,
        },
        models,
    })
}

/// One unlearning run of an ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub terms: LossTerms,
    pub alpha: f64,
}

impl AblationVariant {
    /// Every combination of term subset and alpha.
    pub fn grid(terms: &[LossTerms], alphas: &[f64]) -> Vec<AblationVariant> {
        terms
            .iter()
            .flat_map(|&t| {
                alphas
                    .iter()
                    .map(move |&alpha| AblationVariant { terms: t, alpha })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub alpha: f64,
    pub tfr: f64,
    pub frechet: f64,
    pub probe_is: f64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,alpha,tfr,frechet,probe_is";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.variant, r.alpha, r.tfr, r.frechet, r.probe_is
        ));
    }
    out
}

/// Unlearns `f` once per variant (other settings from `base`) and evaluates each result.
pub fn ablation_run(
    f: &GeneratorParams,
    tv: &TargetVector,
    probe: &ProbeParams,
    reference: &GaussianStats,
    base: &UnlearnConfig,
    variants: &[AblationVariant],
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>, MetricsError> {
    if variants.is_empty() {
        return Err(MetricsError::EmptyAblation);
    }
    let dim = f.latent_dim();
    let latents: Vec<Vec<f64>> = (0..eval.n_samples as u64)
        .map(|i| latent_at(eval.seed, i, dim))
        .collect();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = UnlearnConfig {
            alpha: v.alpha,
            terms: v.terms,
            ..base.clone()
        };
        let (g, _) = unlearn(f, tv, &cfg)?;
        let (tfr, q) = score_latents(&g, probe, base.feature, &latents, reference, eval.splits)?;
        rows.push(AblationRow {
            variant: v.terms.label(),
            alpha: v.alpha,
            tfr,
            frechet: q.frechet,
            probe_is: q.probe_is,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_cases() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(),
            0.5
        );
        // One positive at 0.4 beats one of two negatives and ties with none: 1/2.
        assert_eq!(
            roc_auc(&[0.3, 0.4, 0.5], &[false, true, false]).unwrap(),
            0.5
        );
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::SingleClass { .. })
        ));
    }

    #[test]
    fn joint_categorical_sums_to_one() {
        let j = joint_categorical([0.2, 0.7, 0.5]);
        assert!((j.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((j[0b010] - 0.8 * 0.7 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn inception_score_closed_forms() {
        let same = vec![[0.3, 0.6, 0.1]; 40];
        assert!((inception_score_from_probs(&same, 4).unwrap() - 1.0).abs() < 1e-12);
        let onehot: Vec<[f64; 3]> = (0..80)
            .map(|k| [(k & 1) as f64, (k >> 1 & 1) as f64, (k >> 2 & 1) as f64])
            .collect();
        assert!((inception_score_from_probs(&onehot, 10).unwrap() - 8.0).abs() < 1e-9);
        assert!(inception_score_from_probs(&same, 41).is_err());
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let x: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 / 50.0])
            .collect();
        assert!(frechet_distance(&x, &x).unwrap() <= 1e-6);
        assert!(frechet_distance(&x[..1], &x).is_err());
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = vec![AblationRow {
            variant: "U".into(),
            alpha: 3.0,
            tfr: 1.0,
            frechet: 2.0,
            probe_is: 1.5,
        }];
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), ABLATION_CSV_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "U,3,1.0000,2.0000,1.5000");
        assert_eq!(
            AblationVariant::grid(&[LossTerms::FULL, LossTerms::UNLEARN_ONLY], &[1.0, 2.0]).len(),
            4
        );
    }
}
