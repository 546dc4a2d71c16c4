use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dataset_batch, image_batch, latent_batch, sample_latents, shuffled_batches, BoundDense, Dense,
    GenError, GeneratorArch, GeneratorParams,
};
use crate::diffcore::{AdamConfig, AdamState, Graph, Parameterized, Tensor, Var};
use crate::synthdata::LabeledImage;

/// Encoder pixels → hidden (ReLU) → (μ, log σ²); decoder shares the generator architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub enc_hidden: Dense,
    pub enc_mu: Dense,
    pub enc_logvar: Dense,
    pub decoder: GeneratorParams,
}

pub struct BoundEncoder {
    hidden: BoundDense,
    mu: BoundDense,
    logvar: BoundDense,
}

impl BoundEncoder {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var), GenError> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        Ok((self.mu.forward(g, h)?, self.logvar.forward(g, h)?))
    }

    fn vars(&self) -> [Var; 6] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.mu.weight,
            self.mu.bias,
            self.logvar.weight,
            self.logvar.bias,
        ]
    }
}

impl VaeParams {
    pub fn init(arch: GeneratorArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_hidden = Dense::init(&mut rng, arch.pixels(), arch.hidden);
        let enc_mu = Dense::init(&mut rng, arch.hidden, arch.latent_dim);
        let enc_logvar = Dense::init(&mut rng, arch.hidden, arch.latent_dim);
        Self {
            enc_hidden,
            enc_mu,
            enc_logvar,
            decoder: GeneratorParams::init(arch, seed.wrapping_add(1)),
        }
    }

    pub fn arch(&self) -> GeneratorArch {
        self.decoder.arch
    }

    pub fn bind_encoder(&self, g: &mut Graph, trainable: bool) -> Result<BoundEncoder, GenError> {
        Ok(BoundEncoder {
            hidden: self.enc_hidden.bind(g, trainable)?,
            mu: self.enc_mu.bind(g, trainable)?,
            logvar: self.enc_logvar.bind(g, trainable)?,
        })
    }
}

impl Parameterized for VaeParams {
    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "encoder.hidden.weight",
            "encoder.hidden.bias",
            "encoder.mu.weight",
            "encoder.mu.bias",
            "encoder.logvar.weight",
            "encoder.logvar.bias",
        ]
        .map(String::from)
        .to_vec();
        names.extend(
            self.decoder
                .param_names()
                .into_iter()
                .map(|n| format!("decoder.{n}")),
        );
        names
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.enc_hidden.weight,
            &self.enc_hidden.bias,
            &self.enc_mu.weight,
            &self.enc_mu.bias,
            &self.enc_logvar.weight,
            &self.enc_logvar.bias,
        ];
        out.extend(self.decoder.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.enc_hidden.weight,
            &mut self.enc_hidden.bias,
            &mut self.enc_mu.weight,
            &mut self.enc_mu.bias,
            &mut self.enc_logvar.weight,
            &mut self.enc_logvar.bias,
        ];
        out.extend(self.decoder.params_mut());
        out
    }
}

/// `KL(N(μ, σ²) ‖ N(0, I))` for one latent.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Posterior mean of each image in `[n, pixels]` form.
pub fn encode_batch(params: &VaeParams, images: &Tensor) -> Result<Vec<Vec<f64>>, GenError> {
    let pixels = params.arch().pixels();
    let n = images.len() / pixels;
    if images.len() != n * pixels || n == 0 {
        return Err(GenError::ImageSize {
            expected: pixels,
            got: images.len(),
        });
    }
    let x = images.clone().reshape(&[n, pixels])?;
    let mut g = Graph::new();
    let enc = params.bind_encoder(&mut g, false)?;
    let xv = g.constant(x)?;
    let (mu, _) = enc.forward(&mut g, xv)?;
    let d = params.arch().latent_dim;
    Ok(g.value(mu).data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// Posterior mean μ of one image; deterministic (no sampling).
pub fn encode(params: &VaeParams, image: &Tensor) -> Result<Vec<f64>, GenError> {
    let pixels = params.arch().pixels();
    if image.len() != pixels {
        return Err(GenError::ImageSize {
            expected: pixels,
            got: image.len(),
        });
    }
    let batch = image_batch([image], pixels)?;
    Ok(encode_batch(params, &batch)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrained {
    pub params: VaeParams,
    /// Negative ELBO per step (per-image reconstruction sum plus KL).
    pub history: Vec<f64>,
}

pub fn train_vae(data: &[LabeledImage], cfg: &VaeConfig) -> Result<VaeTrained, GenError> {
    if data.is_empty() {
        return Err(GenError::EmptyDataset);
    }
    train_vae_from(
        VaeParams::init(GeneratorArch::default(), cfg.seed),
        data,
        cfg,
    )
}

/// Minimises Bernoulli reconstruction cross-entropy plus KL to the standard
/// normal prior with reparameterised sampling.
pub fn train_vae_from(
    mut params: VaeParams,
    data: &[LabeledImage],
    cfg: &VaeConfig,
) -> Result<VaeTrained, GenError> {
    if data.is_empty() {
        return Err(GenError::EmptyDataset);
    }
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr), &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbb67_ae85_84ca_a73b);
    let arch = params.arch();
    let mut noise_seed = cfg.seed.wrapping_mul(0x3c6e_f372_fe94_f82b);
    let mut history = Vec::new();

    for _epoch in 0..cfg.epochs {
        for idx in shuffled_batches(&mut rng, data.len(), cfg.batch) {
            let step = history.len();
            let n = idx.len();
            let x = dataset_batch(data, &idx)?;
            noise_seed = noise_seed.wrapping_add(1);
            let eps = latent_batch(
                &sample_latents(noise_seed, n, arch.latent_dim),
                arch.latent_dim,
            )?;

            let mut g = Graph::new();
            let enc = params.bind_encoder(&mut g, true)?;
            let dec = params.decoder.bind(&mut g, true)?;
            let xv = g.constant(x.clone())?;
            let (mu, logvar) = enc.forward(&mut g, xv)?;
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let eps_v = g.constant(eps)?;
            let noise = g.mul(std, eps_v)?;
            let z = g.add(mu, noise)?;
            let logits = dec.logits(&mut g, z)?;
            let recon = g.bce_with_logits(logits, &x)?;
            let recon = g.scale(recon, arch.pixels() as f64);

            let mu2 = g.square(mu);
            let var = g.exp(logvar);
            let t = g.add_scalar(logvar, 1.0);
            let t = g.sub(t, mu2)?;
            let t = g.sub(t, var)?;
            let kl = g.sum(t);
            let kl = g.scale(kl, -0.5 / n as f64);
            let loss = g.add(recon, kl)?;

            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(GenError::NonFiniteLoss { step });
            }
            let mut grads = g.backward(loss)?;
            let mut gs: Vec<Tensor> = enc.vars().iter().map(|&v| grads.take(v)).collect();
            gs.extend(dec.vars().iter().map(|&v| grads.take(v)));
            opt.step(&mut params, &gs)?;
            history.push(value);
        }
    }
    Ok(VaeTrained { params, history })
}
