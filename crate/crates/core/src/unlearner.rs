//! Fine-tuning a copy `g` of a frozen generator `f` so that latents on the
//! feature side of the threshold produce the images `f` makes at the
//! threshold, while every other latent keeps its original image.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{
    ms_ssim_batch, AdamConfig, AdamState, DiffError, Graph, MsSsimConfig, Tensor, Var,
};
use crate::genmodels::{
    generate_batch, latent_at, latent_batch, train_gan_from, train_vae_from, BoundGenerator,
    DiscriminatorParams, GanConfig, GenError, GeneratorParams, VaeConfig, VaeParams,
};
use crate::latentfeat::{classify, translate, LatentError, TargetVector};
use crate::synthdata::{FeatureName, LabeledImage};

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("invalid unlearning config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("no training images remain after removing `{0}`")]
    EmptyOracleSet(FeatureName),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Model(#[from] GenError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    #[default]
    Gan,
    Vae,
}

/// Which terms of the objective are active. Omitted fields are on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub recon: bool,
    pub unlearn: bool,
    pub percep: bool,
}

impl LossTerms {
    pub const FULL: LossTerms = LossTerms {
        recon: true,
        unlearn: true,
        percep: true,
    };
    pub const RECON_UNLEARN: LossTerms = LossTerms {
        recon: true,
        unlearn: true,
        percep: false,
    };
    pub const UNLEARN_ONLY: LossTerms = LossTerms {
        recon: false,
        unlearn: true,
        percep: false,
    };

    /// Short label such as `R+U+P`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.recon, "R"), (self.unlearn, "U"), (self.percep, "P")]
            .into_iter()
            .filter_map(|(on, tag)| on.then_some(tag))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub samples_per_epoch: usize,
    pub seed: u64,
    pub feature: FeatureName,
    pub track: Track,
    pub terms: LossTerms,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            lr: 1e-4,
            epochs: 200,
            batch: 50,
            samples_per_epoch: 500,
            seed: 0,
            feature: FeatureName::Bar,
            track: Track::Gan,
            terms: LossTerms::FULL,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<(), UnlearnError> {
        let bad = |m: String| Err(UnlearnError::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.samples_per_epoch == 0 {
            return bad("samples_per_epoch must be positive".into());
        }
        Ok(())
    }
}

/// Batch-mean value of each term and of the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub unlearn: f64,
    pub percep: f64,
    pub total: f64,
}

/// Loss, parameter gradients and the kink pattern of one evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Gradients in [`GeneratorParams`] parameter order.
    pub grads: Vec<Tensor>,
    pub kinks: Vec<bool>,
    pub kink_margin: f64,
}

/// The unlearning objective against a frozen generator `f`.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub f: &'a GeneratorParams,
    pub tv: &'a TargetVector,
    pub alpha: f64,
    pub terms: LossTerms,
    pub ssim: MsSsimConfig,
}

impl<'a> Objective<'a> {
    pub fn new(
        f: &'a GeneratorParams,
        tv: &'a TargetVector,
        alpha: f64,
    ) -> Result<Self, UnlearnError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(UnlearnError::InvalidConfig(format!(
                "alpha must be >= 0, got {alpha}"
            )));
        }
        if tv.dim() != f.latent_dim() {
            return Err(LatentError::DimMismatch {
                expected: f.latent_dim(),
                got: tv.dim(),
            }
            .into());
        }
        Ok(Self {
            f,
            tv,
            alpha,
            terms: LossTerms::FULL,
            ssim: MsSsimConfig::default(),
        })
    }

    pub fn with_terms(mut self, terms: LossTerms) -> Self {
        self.terms = terms;
        self
    }

    pub fn with_ssim(mut self, ssim: MsSsimConfig) -> Self {
        self.ssim = ssim;
        self
    }

    /// Builds the batch objective on `graph` and returns the total node with
    /// the term values.
    ///
    /// Feature-side latents are compared with `f` at their translated latent,
    /// the rest with `f` at the same latent. Targets enter as constants.
    pub fn build(
        &self,
        graph: &mut Graph,
        gen: &BoundGenerator,
        latents: &[Vec<f64>],
    ) -> Result<(Var, LossBreakdown), UnlearnError> {
        let n = latents.len();
        if n == 0 {
            return Err(UnlearnError::InvalidConfig("empty latent batch".into()));
        }
        let side = self.f.arch.side;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for z in latents {
            if z.len() != self.f.latent_dim() {
                return Err(GenError::LatentDim {
                    expected: self.f.latent_dim(),
                    got: z.len(),
                }
                .into());
            }
            if classify(z, self.tv)? == 1 {
                pos.push(z.clone());
            } else {
                neg.push(z.clone());
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut parts: Vec<Var> = Vec::new();
        let mut out = LossBreakdown::default();

        if self.terms.recon && !neg.is_empty() {
            let k = neg.len();
            let target = generate_batch(self.f, &neg)?.reshape(&[k, side * side])?;
            let zv = graph.constant(latent_batch(&neg, self.f.latent_dim())?)?;
            let img = gen.images(graph, zv)?;
            let tv = graph.constant(target)?;
            // Mean over all k·pixels entries times k/n is the batch mean of per-image L1.
            let l1 = graph.l1_loss(img, tv)?;
            let recon = graph.scale(l1, k as f64 * inv_n);
            out.recon = graph.value(recon).item();
            parts.push(recon);
        }

        if (self.terms.unlearn || self.terms.percep) && !pos.is_empty() {
            let k = pos.len();
            let shifted: Vec<Vec<f64>> = pos
                .iter()
                .map(|z| translate(z, self.tv))
                .collect::<Result<_, _>>()?;
            let target = generate_batch(self.f, &shifted)?;
            let zv = graph.constant(latent_batch(&pos, self.f.latent_dim())?)?;
            let img = gen.images(graph, zv)?;
            let mut weighted: Vec<Var> = Vec::new();
            if self.terms.unlearn {
                let tflat = graph.constant(target.clone().reshape(&[k, side * side])?)?;
                let l1 = graph.l1_loss(img, tflat)?;
                let unlearn = graph.scale(l1, k as f64 * inv_n);
                out.unlearn = graph.value(unlearn).item();
                weighted.push(unlearn);
            }
            if self.terms.percep {
                let img3 = graph.reshape(img, &[k, side, side])?;
                let t3 = graph.constant(target)?;
                let sim = ms_ssim_batch(graph, img3, t3, &self.ssim)?;
                let sim_sum = graph.sum(sim);
                let dissim = graph.scale(sim_sum, -inv_n);
                let percep = graph.add_scalar(dissim, k as f64 * inv_n);
                out.percep = graph.value(percep).item();
                weighted.push(percep);
            }
            for w in weighted {
                parts.push(graph.scale(w, self.alpha));
            }
        }

        let total = match parts.split_first() {
            None => graph.constant(Tensor::scalar(0.0))?,
            Some((&first, rest)) => {
                let mut acc = first;
                for &p in rest {
                    acc = graph.add(acc, p)?;
                }
                acc
            }
        };
        out.total = graph.value(total).item();
        Ok((total, out))
    }

    /// Loss values of `g` on a batch, without gradients.
    pub fn value(
        &self,
        g: &GeneratorParams,
        latents: &[Vec<f64>],
    ) -> Result<LossBreakdown, UnlearnError> {
        let mut graph = Graph::new();
        let gen = g.bind(&mut graph, false)?;
        Ok(self.build(&mut graph, &gen, latents)?.1)
    }

    pub fn evaluate(
        &self,
        g: &GeneratorParams,
        latents: &[Vec<f64>],
    ) -> Result<Evaluation, UnlearnError> {
        let mut graph = Graph::new();
        let gen = g.bind(&mut graph, true)?;
        let (total, loss) = self.build(&mut graph, &gen, latents)?;
        let mut grads = graph.backward(total)?;
        Ok(Evaluation {
            loss,
            grads: gen.vars().iter().map(|&v| grads.take(v)).collect(),
            kinks: graph.kink_pattern(),
            kink_margin: graph.kink_margin(),
        })
    }
}

fn single(
    f: &GeneratorParams,
    tv: &TargetVector,
    g: &GeneratorParams,
    z: &[f64],
    terms: LossTerms,
    alpha: f64,
) -> Result<LossBreakdown, UnlearnError> {
    Objective::new(f, tv, alpha)?
        .with_terms(terms)
        .value(g, &[z.to_vec()])
}

/// `(1 − classify(z)) · L1(g(z), f(z))`.
pub fn loss_recon(
    g: &GeneratorParams,
    f: &GeneratorParams,
    z: &[f64],
    tv: &TargetVector,
) -> Result<f64, UnlearnError> {
    let terms = LossTerms {
        recon: true,
        unlearn: false,
        percep: false,
    };
    Ok(single(f, tv, g, z, terms, 1.0)?.recon)
}

/// `classify(z) · L1(g(z), f(translate(z)))`.
pub fn loss_unlearn(
    g: &GeneratorParams,
    f: &GeneratorParams,
    z: &[f64],
    tv: &TargetVector,
) -> Result<f64, UnlearnError> {
    Ok(single(f, tv, g, z, LossTerms::UNLEARN_ONLY, 1.0)?.unlearn)
}

/// `classify(z) · (1 − MS-SSIM(g(z), f(translate(z))))`.
pub fn loss_percep(
    g: &GeneratorParams,
    f: &GeneratorParams,
    z: &[f64],
    tv: &TargetVector,
) -> Result<f64, UnlearnError> {
    let terms = LossTerms {
        recon: false,
        unlearn: false,
        percep: true,
    };
    Ok(single(f, tv, g, z, terms, 1.0)?.percep)
}

/// `alpha · (unlearn + percep) + recon`.
pub fn loss_total(
    g: &GeneratorParams,
    f: &GeneratorParams,
    z: &[f64],
    tv: &TargetVector,
    alpha: f64,
) -> Result<f64, UnlearnError> {
    Ok(single(f, tv, g, z, LossTerms::FULL, alpha)?.total)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub recon: Vec<f64>,
    pub unlearn: Vec<f64>,
    pub percep: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossCurves {
    fn push(&mut self, l: &LossBreakdown) {
        self.recon.push(l.recon);
        self.unlearn.push(l.unlearn);
        self.percep.push(l.percep);
        self.total.push(l.total);
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub curves: LossCurves,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Set by whoever stores the resulting parameters.
    pub final_params_id: Option<String>,
    pub wall_time_secs: f64,
}

/// Seed of the latent stream for `epoch`; every epoch sees fresh latents.
pub fn epoch_stream(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (epoch as u64)
            .wrapping_add(1)
            .wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Fine-tunes a copy of `f`. `on_step` sees the step index and its losses.
pub fn unlearn_with_progress(
    f: &GeneratorParams,
    tv: &TargetVector,
    cfg: &UnlearnConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(GeneratorParams, UnlearnReport), UnlearnError> {
    cfg.validate()?;
    tv.expect_feature(cfg.feature)?;
    let objective = Objective::new(f, tv, cfg.alpha)?.with_terms(cfg.terms);
    let started = Instant::now();
    let mut g = f.clone();
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr), &g)?;
    let mut curves = LossCurves::default();
    let dim = f.latent_dim();
    let steps_per_epoch = cfg.samples_per_epoch.div_ceil(cfg.batch);

    for epoch in 0..cfg.epochs {
        let stream = epoch_stream(cfg.seed, epoch);
        let latents: Vec<Vec<f64>> = (0..cfg.samples_per_epoch as u64)
            .map(|i| latent_at(stream, i, dim))
            .collect();
        for batch in latents.chunks(cfg.batch) {
            let step = curves.len();
            let eval = objective.evaluate(&g, batch)?;
            if !eval.loss.total.is_finite() {
                return Err(UnlearnError::NonFiniteLoss { step });
            }
            opt.step(&mut g, &eval.grads)?;
            curves.push(&eval.loss);
            on_step(step, &eval.loss);
        }
    }
    Ok((
        g,
        UnlearnReport {
            curves,
            epochs: cfg.epochs,
            steps_per_epoch,
            final_params_id: None,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

pub fn unlearn(
    f: &GeneratorParams,
    tv: &TargetVector,
    cfg: &UnlearnConfig,
) -> Result<(GeneratorParams, UnlearnReport), UnlearnError> {
    unlearn_with_progress(f, tv, cfg, |_, _| {})
}

/// Training images without the feature.
pub fn oracle_dataset(data: &[LabeledImage], feature: FeatureName) -> Vec<LabeledImage> {
    data.iter().filter(|d| !d.label(feature)).cloned().collect()
}

/// Where oracle training resumes from.
#[derive(Clone, Debug)]
pub enum OracleInit {
    Gan {
        generator: GeneratorParams,
        discriminator: DiscriminatorParams,
    },
    Vae(VaeParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 64,
            seed: 0,
        }
    }
}

/// Continues training the pre-trained model on the feature-free images only.
pub fn train_oracle(
    init: OracleInit,
    data: &[LabeledImage],
    feature: FeatureName,
    cfg: &OracleConfig,
) -> Result<GeneratorParams, UnlearnError> {
    let kept = oracle_dataset(data, feature);
    if kept.is_empty() {
        return Err(UnlearnError::EmptyOracleSet(feature));
    }
    Ok(match init {
        OracleInit::Gan {
            generator,
            discriminator,
        } => {
            let gc = GanConfig {
                epochs: cfg.epochs,
                batch: cfg.batch,
                seed: cfg.seed,
                warmup_epochs: 0,
                ..GanConfig::default()
            };
            train_gan_from(generator, discriminator, &kept, &gc)?.generator
        }
        OracleInit::Vae(params) => {
            let vc = VaeConfig {
                epochs: cfg.epochs,
                batch: cfg.batch,
                seed: cfg.seed,
                ..VaeConfig::default()
            };
            train_vae_from(params, &kept, &vc)?.params.decoder
        }
    })
}
