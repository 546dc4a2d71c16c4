//! Multi-scale structural similarity built from graph primitives, so it is
//! differentiable with respect to both images.

use super::{DiffError, Graph, Tensor, Var};

/// Floor applied to per-scale terms before the fractional power.
const TERM_FLOOR: f64 = 1e-6;

/// Accepted input range; generator outputs live in [0, 1] already.
const INPUT_LO: f64 = -0.1;
const INPUT_HI: f64 = 1.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    /// One weight per scale, finest first. Normalized to sum to one.
    pub weights: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 1.5,
            weights: vec![0.2, 0.3, 0.5],
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MsSsimConfig {
    /// Single-scale SSIM with the same window.
    pub fn single_scale() -> Self {
        Self {
            weights: vec![1.0],
            ..Self::default()
        }
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    fn c1(&self) -> f64 {
        self.k1 * self.k1
    }

    fn c2(&self) -> f64 {
        self.k2 * self.k2
    }

    fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    fn validate_side(&self, side: usize) -> Result<(), DiffError> {
        let factor = 1usize << (self.scales() - 1);
        if side % factor != 0 || side / factor < self.window {
            return Err(DiffError::InvalidShape {
                op: "ms_ssim",
                shape: vec![side, side],
                reason: format!(
                    "side must be divisible by {factor} and leave at least {} pixels at the coarsest scale",
                    self.window
                ),
            });
        }
        Ok(())
    }
}

/// Normalized `size × size` Gaussian kernel.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let data = (0..size * size)
        .map(|k| g[k / size] * g[k % size])
        .collect();
    Tensor::new(vec![size, size], data).expect("window shape")
}

fn check_range(t: &Tensor) -> Result<(), DiffError> {
    if let Some(&v) = t
        .data()
        .iter()
        .find(|v| !(INPUT_LO..=INPUT_HI).contains(*v))
    {
        return Err(DiffError::OutOfRange {
            op: "ms_ssim",
            value: v,
            lo: INPUT_LO,
            hi: INPUT_HI,
        });
    }
    Ok(())
}

/// Per-image mean SSIM and mean contrast-structure terms at one scale.
fn ssim_terms(
    g: &mut Graph,
    x: Var,
    y: Var,
    window: &Tensor,
    cfg: &MsSsimConfig,
) -> Result<(Var, Var), DiffError> {
    let mu_x = g.fixed_conv2d(x, window)?;
    let mu_y = g.fixed_conv2d(y, window)?;
    let mu_x2 = g.mul(mu_x, mu_x)?;
    let mu_y2 = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;

    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = g.fixed_conv2d(xx, window)?;
    let e_yy = g.fixed_conv2d(yy, window)?;
    let e_xy = g.fixed_conv2d(xy, window)?;
    let var_x = g.sub(e_xx, mu_x2)?;
    let var_y = g.sub(e_yy, mu_y2)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.add_scalar(cs_num, cfg.c2());
    let cs_den = g.add(var_x, var_y)?;
    let cs_den = g.add_scalar(cs_den, cfg.c2());
    let cs_map = g.div(cs_num, cs_den)?;

    let l_num = g.scale(mu_xy, 2.0);
    let l_num = g.add_scalar(l_num, cfg.c1());
    let l_den = g.add(mu_x2, mu_y2)?;
    let l_den = g.add_scalar(l_den, cfg.c1());
    let l_map = g.div(l_num, l_den)?;

    let ssim_map = g.mul(l_map, cs_map)?;
    Ok((g.row_mean(ssim_map)?, g.row_mean(cs_map)?))
}

/// MS-SSIM of each image pair in `a, b: [n, side, side]`, returning `[n]`.
pub fn ms_ssim_batch(g: &mut Graph, a: Var, b: Var, cfg: &MsSsimConfig) -> Result<Var, DiffError> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "ms_ssim",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        });
    }
    let &[_, h, w] = ta.shape() else {
        return Err(DiffError::InvalidShape {
            op: "ms_ssim",
            shape: ta.shape().to_vec(),
            reason: "expected [n, side, side]".into(),
        });
    };
    if h != w {
        return Err(DiffError::InvalidShape {
            op: "ms_ssim",
            shape: ta.shape().to_vec(),
            reason: "images must be square".into(),
        });
    }
    cfg.validate_side(h)?;
    check_range(ta)?;
    check_range(tb)?;

    let window = gaussian_window(cfg.window, cfg.sigma);
    let weights = cfg.normalized_weights();
    let (mut x, mut y) = (a, b);
    let mut acc: Option<Var> = None;
    for (scale, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(g, x, y, &window, cfg)?;
        let last = scale + 1 == weights.len();
        let term = if last { ssim } else { cs };
        let term = g.clamp_min(term, TERM_FLOOR);
        let term = g.pow_scalar(term, wt);
        acc = Some(match acc {
            None => term,
            Some(prev) => g.mul(prev, term)?,
        });
        if !last {
            x = g.avgpool2(x)?;
            y = g.avgpool2(y)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}

/// MS-SSIM of two `[side, side]` images as a scalar.
pub fn ms_ssim(g: &mut Graph, a: Var, b: Var, cfg: &MsSsimConfig) -> Result<Var, DiffError> {
    let shape = g.value(a).shape().to_vec();
    let [h, w] = shape[..] else {
        return Err(DiffError::InvalidShape {
            op: "ms_ssim",
            shape,
            reason: "expected [side, side]".into(),
        });
    };
    let a3 = g.reshape(a, &[1, h, w])?;
    let b3 = g.reshape(b, &[1, h, w])?;
    let per = ms_ssim_batch(g, a3, b3, cfg)?;
    Ok(g.mean(per))
}
