//! Miniature two-stream segmentation network with hand-written backward.
//!
//! ```text
//! image (3 x S x S)
//!   conv1 3x3 /2 -> ReLU -> conv2 3x3 -> ReLU            = x_s  (K x S/2 x S/2)
//!   x_s -> conv3 3x3 /2 -> ReLU -> conv4 3x3 dil 2 -> ReLU
//!       -> nearest x2                                     = x_d  (K x S/2 x S/2)
//!   GCI(x_d, x_s) -> stochastic gate with x_d -> 1x1 head = score maps (C x S/2 x S/2)
//! ```

use ssws_core::gate::{
    gate_infer, gate_train_backward, gate_train_with_draws, gci_forward, GateConfig, GciForward,
    GciParams,
};
use ssws_core::numerics::{upsample_nearest, upsample_nearest_backward};
use ssws_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A 2D convolution with square kernel, stored `O x I x k x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| {
                rng.uniform_range(-bound, bound)
            }),
            bias: Tensor::zeros(&[out_ch]),
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    /// Output indices `o` whose tap `t` lands inside `[0, n)`, as a range.
    fn valid_range(&self, t: usize, n: usize, out_n: usize) -> (usize, usize) {
        let shift = (t * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // need 0 <= o*s + shift <= n-1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_num = n as isize - 1 - shift;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_n as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    /// Unfolds `x` into `(I*k*k) x (Ho*Wo)` patch columns, zero padded.
    fn im2col(&self, x: &[f64], ic: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let s = self.stride;
        let np = oh * ow;
        let mut cols = vec![0.0; ic * k * k * np];
        for c in 0..ic {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                let (ilo, ihi) = self.valid_range(ki, h, oh);
                let ishift = (ki * self.dilation) as isize - self.padding as isize;
                for kj in 0..k {
                    let (jlo, jhi) = self.valid_range(kj, w, ow);
                    let jshift = (kj * self.dilation) as isize - self.padding as isize;
                    let r = (c * k + ki) * k + kj;
                    let dst = &mut cols[r * np..(r + 1) * np];
                    for oi in ilo..ihi {
                        let ii = ((oi * s) as isize + ishift) as usize;
                        let j0 = ((jlo * s) as isize + jshift) as usize;
                        gather_axpy(&mut dst[oi * ow + jlo..oi * ow + jhi], &src[ii * w..(ii + 1) * w], j0, s, 1.0);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv2d::im2col`].
    fn col2im(&self, cols: &[f64], ic: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let s = self.stride;
        let np = oh * ow;
        let mut x = vec![0.0; ic * h * w];
        for c in 0..ic {
            let dst = &mut x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                let (ilo, ihi) = self.valid_range(ki, h, oh);
                let ishift = (ki * self.dilation) as isize - self.padding as isize;
                for kj in 0..k {
                    let (jlo, jhi) = self.valid_range(kj, w, ow);
                    let jshift = (kj * self.dilation) as isize - self.padding as isize;
                    let r = (c * k + ki) * k + kj;
                    let src = &cols[r * np..(r + 1) * np];
                    for oi in ilo..ihi {
                        let ii = ((oi * s) as isize + ishift) as usize;
                        let j0 = ((jlo * s) as isize + jshift) as usize;
                        scatter_axpy(&mut dst[ii * w..(ii + 1) * w], j0, s, &src[oi * ow + jlo..oi * ow + jhi], 1.0);
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ic, h, w) = x.chw()?;
        assert_eq!(ic, self.in_channels(), "conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let oc = self.out_channels();
        let np = oh * ow;
        let nr = ic * self.kernel * self.kernel;
        let cols = self.im2col(x.data(), ic, h, w, oh, ow);
        let wd = self.weight.data();
        let mut out = Tensor::zeros(&[oc, oh, ow]);
        for o in 0..oc {
            let dst = out.channel_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias.data()[o]);
            for r in 0..nr {
                let coef = wd[o * nr + r];
                for (d, &c) in dst.iter_mut().zip(&cols[r * np..(r + 1) * np]) {
                    *d += coef * c;
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is
    /// skipped when `need_input` is false.
    pub fn backward(&self, x: &Tensor, grad: &Tensor, need_input: bool) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let (ic, h, w) = x.chw()?;
        let (oc, oh, ow) = grad.chw()?;
        let np = oh * ow;
        let nr = ic * self.kernel * self.kernel;
        let cols = self.im2col(x.data(), ic, h, w, oh, ow);
        let wd = self.weight.data();
        let gd = grad.data();
        let gb = Tensor::from_fn(&[oc], |o| gd[o * np..(o + 1) * np].iter().sum());
        let gw = Tensor::from_fn(&[oc, ic, self.kernel, self.kernel], |idx| {
            let (o, r) = (idx / nr, idx % nr);
            gather_dot(&gd[o * np..(o + 1) * np], &cols[r * np..(r + 1) * np], 0, 1)
        });
        let gx = if need_input {
            let mut gcols = vec![0.0; nr * np];
            for o in 0..oc {
                let g = &gd[o * np..(o + 1) * np];
                for r in 0..nr {
                    let coef = wd[o * nr + r];
                    for (d, &gv) in gcols[r * np..(r + 1) * np].iter_mut().zip(g) {
                        *d += coef * gv;
                    }
                }
            }
            Some(Tensor::from_raw(vec![ic, h, w], self.col2im(&gcols, ic, h, w, oh, ow))?)
        } else {
            None
        };
        Ok((gx, gw, gb))
    }
}

/// `dst[k] += coef * src[j0 + k * s]`
#[inline]
fn gather_axpy(dst: &mut [f64], src: &[f64], j0: usize, s: usize, coef: f64) {
    if dst.is_empty() {
        return;
    }
    if s == 1 {
        let n = dst.len();
        for (d, &x) in dst.iter_mut().zip(&src[j0..j0 + n]) {
            *d += coef * x;
        }
    } else {
        for (k, d) in dst.iter_mut().enumerate() {
            *d += coef * src[j0 + k * s];
        }
    }
}

/// `sum_k a[k] * src[j0 + k * s]`
#[inline]
fn gather_dot(a: &[f64], src: &[f64], j0: usize, s: usize) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if s == 1 {
        a.iter().zip(&src[j0..j0 + a.len()]).map(|(x, y)| x * y).sum()
    } else {
        a.iter().enumerate().map(|(k, x)| x * src[j0 + k * s]).sum()
    }
}

/// `dst[j0 + k * s] += coef * a[k]`
#[inline]
fn scatter_axpy(dst: &mut [f64], j0: usize, s: usize, a: &[f64], coef: f64) {
    if a.is_empty() {
        return;
    }
    if s == 1 {
        for (d, &x) in dst[j0..j0 + a.len()].iter_mut().zip(a) {
            *d += coef * x;
        }
    } else {
        for (k, &x) in a.iter().enumerate() {
            dst[j0 + k * s] += coef * x;
        }
    }
}

/// Pixel values in `[0, 1]` are mapped to roughly `[-1, 1]`.
const INPUT_CENTER: f64 = 0.5;
const INPUT_SCALE: f64 = 2.0;

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn relu_backward(pre: &Tensor, grad: &Tensor) -> Result<Tensor> {
    Ok(grad.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })?)
}

/// How the two streams are combined while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Bernoulli mixing during training, blended at inference.
    #[default]
    Stochastic,
    /// Blended `(1 - psi) x_d + psi x_s` in training and inference.
    Deterministic,
    /// Bernoulli draws replaced by their mean `r = psi`, which reduces the
    /// training gate to `x_d`; blended at inference.
    Expected,
    /// No gate: the deep stream alone, no shallow stream and no GCI.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub stem_channels: usize,
    pub feature_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 12,
            feature_channels: 24,
        }
    }
}

impl NetConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.stem_channels == 0 {
            v.push("net.stem_channels must be > 0".to_string());
        }
        if self.feature_channels == 0 {
            v.push("net.feature_channels must be > 0".to_string());
        }
        v
    }
}

/// All trainable parameters. Also used, zeroed, as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub conv4: Conv2d,
    pub gci: GciParams,
    pub head: Conv2d,
}

impl Params {
    pub fn init(cfg: &NetConfig, num_classes: usize, rng: &mut Rng) -> Self {
        let (c1, k) = (cfg.stem_channels, cfg.feature_channels);
        let conv1 = Conv2d::new(3, c1, 3, 2, 1, 1, rng);
        let conv2 = Conv2d::new(c1, k, 3, 1, 1, 1, rng);
        let conv3 = Conv2d::new(k, k, 3, 2, 1, 1, rng);
        let conv4 = Conv2d::new(k, k, 3, 1, 2, 2, rng);
        let gci = GciParams::init(k, rng);
        let mut head = Conv2d::new(k, num_classes, 1, 1, 0, 1, rng);
        // Xavier-like scale for the linear head
        let bound = (1.0 / k as f64).sqrt();
        head.weight = Tensor::from_fn(head.weight.dims(), |_| rng.uniform_range(-bound, bound));
        Self {
            conv1,
            conv2,
            conv3,
            conv4,
            gci,
            head,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_channels()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
            &self.conv4.weight,
            &self.conv4.bias,
            &self.gci.expand_w,
            &self.gci.expand_b,
            &self.gci.project_w,
            &self.gci.project_b,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.conv4.weight,
            &mut self.conv4.bias,
            &mut self.gci.expand_w,
            &mut self.gci.expand_b,
            &mut self.gci.project_w,
            &mut self.gci.project_b,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn accumulate(&mut self, other: &Params, scale: f64) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Training or evaluation pass.
#[derive(Debug)]
pub enum Pass<'a> {
    Train(&'a mut Rng),
    Infer,
}

enum GateCache {
    Draws(Tensor),
    Blend,
    DeepOnly,
}

/// Activations retained for [`Forward::backward`].
pub struct Forward {
    pub scores: Tensor,
    input: Tensor,
    a1: Tensor,
    r1: Tensor,
    a2: Tensor,
    x_s: Tensor,
    a3: Tensor,
    r3: Tensor,
    a4: Tensor,
    x_d: Tensor,
    gci: Option<GciForward>,
    gate: GateCache,
    gated: Tensor,
    gate_cfg: GateConfig,
}

pub fn forward(params: &Params, image: &Tensor, gate_cfg: &GateConfig, mode: GateMode, pass: Pass<'_>) -> Result<Forward> {
    let input = image.map(|v| (v - INPUT_CENTER) * INPUT_SCALE);
    let a1 = params.conv1.forward(&input)?;
    let r1 = relu(&a1);
    let a2 = params.conv2.forward(&r1)?;
    let x_s = relu(&a2);
    let a3 = params.conv3.forward(&x_s)?;
    let r3 = relu(&a3);
    let a4 = params.conv4.forward(&r3)?;
    let (_, sh, sw) = x_s.chw()?;
    let x_d = upsample_nearest(&relu(&a4), sh, sw)?;

    let uses_shallow = mode != GateMode::Off;
    let gci = if uses_shallow && gate_cfg.gci_enabled {
        Some(gci_forward(&x_d, &x_s, &params.gci)?)
    } else {
        None
    };
    let shallow = gci.as_ref().map(|g| &g.output).unwrap_or(&x_s);

    let (gated, gate) = match (mode, pass) {
        (GateMode::Off, _) => (x_d.clone(), GateCache::DeepOnly),
        (GateMode::Expected, Pass::Train(_)) => (x_d.clone(), GateCache::DeepOnly),
        (GateMode::Stochastic, Pass::Train(rng)) => {
            let (out, r) = gate_train_with_draws(&x_d, shallow, gate_cfg, rng)?;
            (out, GateCache::Draws(r))
        }
        (_, _) => (gate_infer(&x_d, shallow, gate_cfg)?, GateCache::Blend),
    };
    let scores = params.head.forward(&gated)?;
    Ok(Forward {
        scores,
        input,
        a1,
        r1,
        a2,
        x_s,
        a3,
        r3,
        a4,
        x_d,
        gci,
        gate,
        gated,
        gate_cfg: *gate_cfg,
    })
}

impl Forward {
    /// Accumulates `dL/dparams` into `grads` given `dL/dscores`.
    pub fn backward(&self, params: &Params, grad_scores: &Tensor, grads: &mut Params) -> Result<()> {
        let (g_gated, g_hw, g_hb) = params.head.backward(&self.gated, grad_scores, true)?;
        let g_gated = g_gated.expect("requested");
        grads.head.weight.axpy(1.0, &g_hw)?;
        grads.head.bias.axpy(1.0, &g_hb)?;

        let psi = self.gate_cfg.psi();
        let (mut g_xd, g_shallow) = match &self.gate {
            GateCache::DeepOnly => (g_gated, None),
            GateCache::Blend => (g_gated.scale(1.0 - psi), Some(g_gated.scale(psi))),
            GateCache::Draws(r) => {
                let (gd, gs) = gate_train_backward(r, &self.gate_cfg, &g_gated)?;
                (gd, Some(gs))
            }
        };

        let mut g_xs = Tensor::zeros(self.x_s.dims());
        if let Some(g_sh) = g_shallow {
            match &self.gci {
                Some(fwd) => {
                    let g = fwd.backward(&self.x_d, &params.gci, &g_sh)?;
                    g_xd.axpy(1.0, &g.x_d)?;
                    g_xs.axpy(1.0, &g.x_s)?;
                    grads.gci.expand_w.axpy(1.0, &g.params.expand_w)?;
                    grads.gci.expand_b.axpy(1.0, &g.params.expand_b)?;
                    grads.gci.project_w.axpy(1.0, &g.params.project_w)?;
                    grads.gci.project_b.axpy(1.0, &g.params.project_b)?;
                }
                None => g_xs.axpy(1.0, &g_sh)?,
            }
        }

        let (_, h4, w4) = self.a4.chw()?;
        let g_r4 = upsample_nearest_backward(&g_xd, h4, w4)?;
        let g_a4 = relu_backward(&self.a4, &g_r4)?;
        let (g_r3, gw, gb) = params.conv4.backward(&self.r3, &g_a4, true)?;
        grads.conv4.weight.axpy(1.0, &gw)?;
        grads.conv4.bias.axpy(1.0, &gb)?;
        let g_a3 = relu_backward(&self.a3, &g_r3.expect("requested"))?;
        let (g_xs3, gw, gb) = params.conv3.backward(&self.x_s, &g_a3, true)?;
        grads.conv3.weight.axpy(1.0, &gw)?;
        grads.conv3.bias.axpy(1.0, &gb)?;
        g_xs.axpy(1.0, &g_xs3.expect("requested"))?;

        let g_a2 = relu_backward(&self.a2, &g_xs)?;
        let (g_r1, gw, gb) = params.conv2.backward(&self.r1, &g_a2, true)?;
        grads.conv2.weight.axpy(1.0, &gw)?;
        grads.conv2.bias.axpy(1.0, &gb)?;
        let g_a1 = relu_backward(&self.a1, &g_r1.expect("requested"))?;
        let (_, gw, gb) = params.conv1.backward(&self.input, &g_a1, false)?;
        grads.conv1.weight.axpy(1.0, &gw)?;
        grads.conv1.bias.axpy(1.0, &gb)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssws_core::losses::gradcheck;

    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let (ic, h, w) = x.chw().unwrap();
        let oh = (h + 2 * c.padding - c.dilation * (c.kernel - 1) - 1) / c.stride + 1;
        let ow = (w + 2 * c.padding - c.dilation * (c.kernel - 1) - 1) / c.stride + 1;
        let oc = c.out_channels();
        let k = c.kernel;
        let mut out = Tensor::zeros(&[oc, oh, ow]);
        for o in 0..oc {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = c.bias.data()[o];
                    for ch in 0..ic {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * c.stride + ki * c.dilation) as isize - c.padding as isize;
                                let jj = (oj * c.stride + kj * c.dilation) as isize - c.padding as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += c.weight.data()[((o * ic + ch) * k + ki) * k + kj]
                                        * x.at3(ch, ii as usize, jj as usize);
                                }
                            }
                        }
                    }
                    out.set3(o, oi, oj, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = Rng::new(1);
        for &(stride, pad, dil, k) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 0, 1, 1), (2, 0, 1, 3)] {
            let mut c = Conv2d::new(3, 4, k, stride, pad, dil, &mut rng);
            c.bias = Tensor::from_fn(&[4], |_| rng.normal());
            let x = Tensor::from_fn(&[3, 7, 6], |_| rng.normal());
            let fast = c.forward(&x).unwrap();
            let slow = naive_conv(&c, &x);
            assert_eq!(fast.dims(), slow.dims());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_gradcheck() {
        let mut rng = Rng::new(2);
        for &(stride, pad, dil) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2)] {
            let c = Conv2d::new(2, 3, 3, stride, pad, dil, &mut rng);
            let x = Tensor::from_fn(&[2, 6, 5], |_| rng.normal());
            let g = Tensor::from_fn(c.forward(&x).unwrap().dims(), |_| rng.normal());
            let dot = |t: &Tensor| t.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
            let err = gradcheck(
                |xx: &Tensor| {
                    let (gx, _, _) = c.backward(xx, &g, true).map_err(|e| match e {
                        crate::error::ToyError::Core(e) => e,
                        other => panic!("{other}"),
                    })?;
                    Ok((dot(&c.forward(xx).unwrap()), gx.unwrap()))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "input grad {err}");
            let err = gradcheck(
                |w: &Tensor| {
                    let cc = Conv2d { weight: w.clone(), ..c.clone() };
                    let (_, gw, _) = cc.backward(&x, &g, false).unwrap();
                    Ok((dot(&cc.forward(&x).unwrap()), gw))
                },
                &c.weight,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "weight grad {err}");
        }
    }
}
