//! Stochastic gate (SG) between deep and shallow feature streams, and
//! global cue injection (GCI).
//!
//! At training time every element picks the shallow feature with
//! probability `psi` and otherwise a rescaled deep feature:
//!
//! ```text
//! out = (1 - r) * delta * (x_d - psi * x_s) + r * x_s,   r ~ Bern(psi),
//! delta = 1 / (1 - psi)
//! ```
//!
//! so that `E[out] = x_d`. At inference the two streams are blended as
//! `(1 - psi) * x_d + psi * x_s`.

use crate::error::{param_err, shape_err, Error, Result};
use crate::numerics::{global_max_pool_with_argmax, Rng, Tensor};

/// Floor on the per-channel standard deviation inside AdIN.
pub const ADIN_SIGMA_FLOOR: f64 = 1e-5;

/// How Bernoulli draws are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DrawMode {
    /// One draw per channel and pixel.
    #[default]
    PerElement,
    /// One draw per pixel, shared across channels.
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    psi: f64,
    pub gci_enabled: bool,
    pub draw: DrawMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            psi: 0.3,
            gci_enabled: true,
            draw: DrawMode::PerElement,
        }
    }
}

impl GateConfig {
    pub fn new(psi: f64, gci_enabled: bool) -> Result<Self> {
        check_psi(psi)?;
        Ok(Self {
            psi,
            gci_enabled,
            draw: DrawMode::PerElement,
        })
    }

    pub fn with_draw(mut self, draw: DrawMode) -> Self {
        self.draw = draw;
        self
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// `1 / (1 - psi)`.
    pub fn delta(&self) -> f64 {
        1.0 / (1.0 - self.psi)
    }
}

fn check_psi(psi: f64) -> Result<()> {
    if !(0.0..1.0).contains(&psi) {
        return Err(param_err!("mixing rate psi must lie in [0,1), got {psi}"));
    }
    Ok(())
}

/// Training-mode gate. Returns the mixed tensor.
pub fn gate_train(x_d: &Tensor, x_s: &Tensor, cfg: &GateConfig, rng: &mut Rng) -> Result<Tensor> {
    Ok(gate_train_with_draws(x_d, x_s, cfg, rng)?.0)
}

/// Training-mode gate that also returns the Bernoulli draws `r`, which the
/// backward pass needs.
pub fn gate_train_with_draws(
    x_d: &Tensor,
    x_s: &Tensor,
    cfg: &GateConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    check_psi(cfg.psi)?;
    x_d.expect_same_dims(x_s)?;
    let r = match cfg.draw {
        DrawMode::PerElement => Tensor::from_fn(x_d.dims(), |_| rng.bernoulli(cfg.psi) as u8 as f64),
        DrawMode::PerPixel => {
            let (k, h, w) = x_d.chw()?;
            let plane: Vec<f64> = (0..h * w).map(|_| rng.bernoulli(cfg.psi) as u8 as f64).collect();
            Tensor::from_fn(&[k, h, w], |i| plane[i % (h * w)])
        }
    };
    let delta = cfg.delta();
    let psi = cfg.psi;
    let out = Tensor::from_fn(x_d.dims(), |i| {
        let (d, s, ri) = (x_d.data()[i], x_s.data()[i], r.data()[i]);
        (1.0 - ri) * delta * (d - psi * s) + ri * s
    });
    Ok((out, r))
}

/// Gradients of the training-mode gate for fixed draws `r`:
/// returns `(grad_x_d, grad_x_s)`.
pub fn gate_train_backward(r: &Tensor, cfg: &GateConfig, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    r.expect_same_dims(grad)?;
    let delta = cfg.delta();
    let gd = r.zip_map(grad, |ri, g| (1.0 - ri) * delta * g)?;
    let gs = r.zip_map(grad, |ri, g| (ri - (1.0 - ri) * delta * cfg.psi) * g)?;
    Ok((gd, gs))
}

/// Inference-mode gate `(1 - psi) * x_d + psi * x_s`.
pub fn gate_infer(x_d: &Tensor, x_s: &Tensor, cfg: &GateConfig) -> Result<Tensor> {
    check_psi(cfg.psi)?;
    let psi = cfg.psi;
    x_d.zip_map(x_s, |d, s| (1.0 - psi) * d + psi * s)
}

/// Pointwise linear maps used by GCI.
///
/// `expand` doubles the deep channels (`2K x K` weights, `2K` bias);
/// `project` maps the modulated shallow features back (`K x K`, `K`).
#[derive(Debug, Clone, PartialEq)]
pub struct GciParams {
    pub expand_w: Tensor,
    pub expand_b: Tensor,
    pub project_w: Tensor,
    pub project_b: Tensor,
}

impl GciParams {
    pub fn new(expand_w: Tensor, expand_b: Tensor, project_w: Tensor, project_b: Tensor) -> Result<Self> {
        let k = project_b.len();
        if expand_w.dims() != [2 * k, k]
            || expand_b.dims() != [2 * k]
            || project_w.dims() != [k, k]
            || project_b.dims() != [k]
        {
            return Err(shape_err!(
                "GCI shapes expand {:?}/{:?}, project {:?}/{:?} are inconsistent",
                expand_w.dims(),
                expand_b.dims(),
                project_w.dims(),
                project_b.dims()
            ));
        }
        for t in [&expand_w, &expand_b, &project_w, &project_b] {
            if !t.is_finite() {
                return Err(Error::NonFinite("GCI weights".into()));
            }
        }
        Ok(Self {
            expand_w,
            expand_b,
            project_w,
            project_b,
        })
    }

    /// Uniform `[-1/sqrt(K), 1/sqrt(K)]` weights, zero biases.
    pub fn init(k: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        Self {
            expand_w: Tensor::from_fn(&[2 * k, k], |_| rng.uniform_range(-bound, bound)),
            expand_b: Tensor::zeros(&[2 * k]),
            project_w: Tensor::from_fn(&[k, k], |_| rng.uniform_range(-bound, bound)),
            project_b: Tensor::zeros(&[k]),
        }
    }

    pub fn channels(&self) -> usize {
        self.project_b.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            expand_w: Tensor::zeros(self.expand_w.dims()),
            expand_b: Tensor::zeros(self.expand_b.dims()),
            project_w: Tensor::zeros(self.project_w.dims()),
            project_b: Tensor::zeros(self.project_b.dims()),
        }
    }
}

/// `out[o, p] = sum_k w[o, k] x[k, p] + b[o]`
fn pointwise_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, h, wd) = x.chw()?;
    let o = w.dims()[0];
    if w.dims()[1] != k {
        return Err(shape_err!("linear map expects {} channels, got {k}", w.dims()[1]));
    }
    let plane = h * wd;
    let mut out = Tensor::zeros(&[o, h, wd]);
    for oc in 0..o {
        let bias = b.data()[oc];
        let dst = out.channel_mut(oc);
        dst.iter_mut().for_each(|v| *v = bias);
        for ic in 0..k {
            let coef = w.data()[oc * k + ic];
            if coef == 0.0 {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(&x.data()[ic * plane..(ic + 1) * plane]) {
                *d += coef * s;
            }
        }
    }
    Ok(out)
}

/// Intermediate values of [`gci`] retained for the backward pass.
#[derive(Debug, Clone)]
pub struct GciForward {
    pub output: Tensor,
    expanded_argmax: Vec<usize>,
    /// `z` (first `K`) and `b` (last `K`) from global max pooling.
    pub pooled: Tensor,
    normalized: Tensor,
    sigma: Vec<f64>,
    sigma_floored: Vec<bool>,
    pre_relu: Tensor,
    modulated: Tensor,
}

/// Global cue injection:
/// `project(ReLU(z * (x_s - mu(x_s)) / sigma(x_s) + b))` with `[z; b]` the
/// global max pool of `expand(x_d)`.
pub fn gci(x_d: &Tensor, x_s: &Tensor, params: &GciParams) -> Result<Tensor> {
    Ok(gci_forward(x_d, x_s, params)?.output)
}

pub fn gci_forward(x_d: &Tensor, x_s: &Tensor, params: &GciParams) -> Result<GciForward> {
    let (k, h, w) = x_s.chw()?;
    let (kd, _, _) = x_d.chw()?;
    if k != params.channels() || kd != k {
        return Err(shape_err!(
            "GCI configured for {} channels, got deep {kd} / shallow {k}",
            params.channels()
        ));
    }
    let plane = h * w;
    let expanded = pointwise_linear(x_d, &params.expand_w, &params.expand_b)?;
    let (pooled, expanded_argmax) = global_max_pool_with_argmax(&expanded)?;

    let mut normalized = Tensor::zeros(&[k, h, w]);
    let mut pre_relu = Tensor::zeros(&[k, h, w]);
    let mut sigma = Vec::with_capacity(k);
    let mut sigma_floored = Vec::with_capacity(k);
    for c in 0..k {
        let src = x_s.channel(c);
        let mu = src.iter().sum::<f64>() / plane as f64;
        let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
        let raw = var.sqrt();
        let s = raw.max(ADIN_SIGMA_FLOOR);
        sigma.push(s);
        sigma_floored.push(raw < ADIN_SIGMA_FLOOR);
        let (z, b) = (pooled.data()[c], pooled.data()[k + c]);
        let norm = normalized.channel_mut(c);
        for (n, &v) in norm.iter_mut().zip(src) {
            *n = (v - mu) / s;
        }
        let norm = normalized.channel(c).to_vec();
        for (pr, n) in pre_relu.channel_mut(c).iter_mut().zip(norm) {
            *pr = z * n + b;
        }
    }
    let modulated = pre_relu.map(|v| v.max(0.0));
    let output = pointwise_linear(&modulated, &params.project_w, &params.project_b)?;
    Ok(GciForward {
        output,
        expanded_argmax,
        pooled,
        normalized,
        sigma,
        sigma_floored,
        pre_relu,
        modulated,
    })
}

/// Gradients of [`gci`].
#[derive(Debug, Clone)]
pub struct GciGrads {
    pub x_d: Tensor,
    pub x_s: Tensor,
    pub params: GciParams,
}

impl GciForward {
    pub fn backward(&self, x_d: &Tensor, params: &GciParams, grad: &Tensor) -> Result<GciGrads> {
        self.output.expect_same_dims(grad)?;
        let (k, h, w) = grad.chw()?;
        let plane = h * w;
        let mut g_params = params.zeros_like();

        // project
        let mut g_mod = Tensor::zeros(&[k, h, w]);
        for o in 0..k {
            let go = grad.channel(o);
            g_params.project_b.data_mut()[o] = go.iter().sum();
            for j in 0..k {
                let s = self.modulated.channel(j);
                g_params.project_w.data_mut()[o * k + j] = go.iter().zip(s).map(|(a, b)| a * b).sum();
                let coef = params.project_w.data()[o * k + j];
                for (gm, &g) in g_mod.channel_mut(j).iter_mut().zip(go) {
                    *gm += coef * g;
                }
            }
        }
        // ReLU
        let g_pre = g_mod.zip_map(&self.pre_relu, |g, p| if p > 0.0 { g } else { 0.0 })?;

        // AdIN
        let mut g_pooled = vec![0.0; 2 * k];
        let mut g_xs = Tensor::zeros(&[k, h, w]);
        for c in 0..k {
            let gp = g_pre.channel(c);
            let n = self.normalized.channel(c);
            g_pooled[c] = gp.iter().zip(n).map(|(a, b)| a * b).sum();
            g_pooled[k + c] = gp.iter().sum();
            let z = self.pooled.data()[c];
            let s = self.sigma[c];
            let g_n: Vec<f64> = gp.iter().map(|g| g * z).collect();
            let mean_gn = g_n.iter().sum::<f64>() / plane as f64;
            let dst = g_xs.channel_mut(c);
            if self.sigma_floored[c] {
                for (d, gn) in dst.iter_mut().zip(&g_n) {
                    *d = (gn - mean_gn) / s;
                }
            } else {
                let mean_gn_n = g_n.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                for ((d, gn), nv) in dst.iter_mut().zip(&g_n).zip(n) {
                    *d = (gn - mean_gn - nv * mean_gn_n) / s;
                }
            }
        }

        // global max pool + expand
        let mut g_xd = Tensor::zeros(&[k, h, w]);
        for (o, &gv) in g_pooled.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let at = self.expanded_argmax[o];
            g_params.expand_b.data_mut()[o] = gv;
            for c in 0..k {
                g_params.expand_w.data_mut()[o * k + c] = gv * x_d.data()[c * plane + at];
                g_xd.data_mut()[c * plane + at] += params.expand_w.data()[o * k + c] * gv;
            }
        }
        Ok(GciGrads {
            x_d: g_xd,
            x_s: g_xs,
            params: g_params,
        })
    }
}
