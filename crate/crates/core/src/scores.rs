//! Class-score aggregation.
//!
//! Two routes from per-pixel features to image-level class scores:
//!
//! - the GAP/CAM baseline ([`gap_scores`], [`cam_maps`]), and
//! - normalised global weighted pooling ([`ngwp`]) plus the focal mask-size
//!   penalty ([`focal_penalty`]), which together give
//!   [`classification_scores`].
//!
//! The nGWP route works on per-pixel score maps `y` of shape `C x h x w`. A
//! constant background channel is prepended and a channel softmax yields the
//! masks `m` of shape `(C+1) x h x w` ([`build_mask_probs`]). Backward passes
//! are written out by hand; [`ScoreForward::backward`] chains them back to the
//! score maps.

use crate::error::{param_err, shape_err, Error, Result};
use crate::numerics::{softmax_over_channels, softmax_over_channels_backward, Tensor};

/// Per-class linear weights over `K` feature channels, stored `C x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    a: Tensor,
}

impl ClassifierWeights {
    pub fn new(a: Tensor) -> Result<Self> {
        if a.rank() != 2 {
            return Err(shape_err!("classifier weights must be (C,K), got {:?}", a.dims()));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Self { a })
    }

    pub fn num_classes(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn num_features(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.a
    }

    fn check_features(&self, features: &Tensor) -> Result<(usize, usize, usize)> {
        let (k, h, w) = features.chw()?;
        if k != self.num_features() {
            return Err(shape_err!(
                "features have {k} channels, classifier expects {}",
                self.num_features()
            ));
        }
        Ok((k, h, w))
    }
}

/// Hyperparameters of nGWP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgwpConfig {
    epsilon: f64,
    bg_score: f64,
}

impl Default for NgwpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            bg_score: 1.0,
        }
    }
}

impl NgwpConfig {
    /// `epsilon` must be strictly positive.
    pub fn new(epsilon: f64, bg_score: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(param_err!("nGWP epsilon must be > 0, got {epsilon}"));
        }
        if !bg_score.is_finite() {
            return Err(param_err!("background score must be finite"));
        }
        Ok(Self { epsilon, bg_score })
    }

    /// The unregularised `epsilon = 0` variant, where nGWP is discontinuous
    /// at the empty mask. Only available to tests.
    #[cfg(any(test, feature = "zero-epsilon"))]
    pub fn zero_epsilon(bg_score: f64) -> Self {
        Self {
            epsilon: 0.0,
            bg_score,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn bg_score(&self) -> f64 {
        self.bg_score
    }
}

/// Focal mask-size penalty `(1 - mbar)^p * ln(lambda + mbar)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    p: f64,
    lambda: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { p: 3.0, lambda: 0.01 }
    }
}

impl FocalConfig {
    pub fn new(p: f64, lambda: f64) -> Result<Self> {
        if !(p >= 0.0 && p.is_finite()) {
            return Err(param_err!("focal exponent p must be >= 0, got {p}"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(param_err!("focal lambda must be > 0, got {lambda}"));
        }
        Ok(Self { p, lambda })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Penalty value at mean mask confidence `mbar`.
    pub fn value(&self, mbar: f64) -> f64 {
        (1.0 - mbar).powf(self.p) * (self.lambda + mbar).ln()
    }

    /// Derivative of [`FocalConfig::value`] with respect to `mbar`.
    pub fn derivative(&self, mbar: f64) -> f64 {
        let log_term = (self.lambda + mbar).ln();
        let discount = (1.0 - mbar).powf(self.p);
        let d_discount = if self.p == 0.0 {
            0.0
        } else {
            -self.p * (1.0 - mbar).powf(self.p - 1.0)
        };
        d_discount * log_term + discount / (self.lambda + mbar)
    }
}

/// Per-pixel class probabilities, `(C+1) x h x w`, channel 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbs(Tensor);

impl MaskProbs {
    /// Wraps a tensor, checking that every pixel lies on the simplex
    /// within `1e-6`.
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c < 2 {
            return Err(shape_err!("mask needs a background and >= 1 class channel"));
        }
        let plane = h * w;
        let d = t.data();
        for p in 0..plane {
            let mut total = 0.0;
            for k in 0..c {
                let v = d[k * plane + p];
                if !(v >= 0.0) {
                    return Err(param_err!("negative or NaN probability {v} at pixel {p}"));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(param_err!("pixel {p} sums to {total}, not 1"));
            }
        }
        Ok(Self(t))
    }

    pub(crate) fn from_tensor_unchecked(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Number of object classes (excluding background).
    pub fn num_classes(&self) -> usize {
        self.0.dims()[0] - 1
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    /// Spatial mean of every channel, background included.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..=self.num_classes())
            .map(|c| {
                let ch = self.0.channel(c);
                ch.iter().sum::<f64>() / ch.len() as f64
            })
            .collect()
    }
}

/// GAP class scores `y_c = 1/(hw) * sum_k a_ck * sum_ij x_kij`.
pub fn gap_scores(features: &Tensor, w: &ClassifierWeights) -> Result<Tensor> {
    let (k, h, wd) = w.check_features(features)?;
    let hw = (h * wd) as f64;
    let pooled: Vec<f64> = (0..k)
        .map(|ch| features.channel(ch).iter().sum::<f64>())
        .collect();
    let a = w.weights();
    let c = w.num_classes();
    let scores = (0..c)
        .map(|cls| {
            let row = &a.data()[cls * k..(cls + 1) * k];
            row.iter().zip(&pooled).map(|(x, y)| x * y).sum::<f64>() / hw
        })
        .collect();
    Tensor::from_raw(vec![c], scores)
}

/// Class activation maps `m_cij = max(0, sum_k a_ck x_kij)`.
pub fn cam_maps(features: &Tensor, w: &ClassifierWeights) -> Result<Tensor> {
    let (k, h, wd) = w.check_features(features)?;
    let c = w.num_classes();
    let plane = h * wd;
    let a = w.weights().data();
    let x = features.data();
    let mut out = vec![0.0; c * plane];
    for cls in 0..c {
        let dst = &mut out[cls * plane..(cls + 1) * plane];
        for ch in 0..k {
            let coef = a[cls * k + ch];
            for (o, &v) in dst.iter_mut().zip(&x[ch * plane..(ch + 1) * plane]) {
                *o += coef * v;
            }
        }
        for o in dst.iter_mut() {
            *o = o.max(0.0);
        }
    }
    Tensor::from_raw(vec![c, h, wd], out)
}

/// Prepends the constant background channel and applies a per-pixel softmax.
pub fn build_mask_probs(score_maps: &Tensor, cfg: &NgwpConfig) -> Result<MaskProbs> {
    let (c, h, w) = score_maps.chw()?;
    let plane = h * w;
    let mut logits = Vec::with_capacity((c + 1) * plane);
    logits.extend(std::iter::repeat_n(cfg.bg_score, plane));
    logits.extend_from_slice(score_maps.data());
    let probs = softmax_over_channels(&Tensor::from_raw(vec![c + 1, h, w], logits)?)?;
    Ok(MaskProbs(probs))
}

fn check_alignment(mask: &MaskProbs, score_maps: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = score_maps.chw()?;
    if mask.num_classes() != c || mask.height() != h || mask.width() != w {
        return Err(shape_err!(
            "mask {:?} does not align with score maps {:?}",
            mask.tensor().dims(),
            score_maps.dims()
        ));
    }
    Ok((c, h * w))
}

/// nGWP: `y_c = sum(m_c * y_c) / (epsilon + sum(m_c))`, background excluded.
pub fn ngwp(mask: &MaskProbs, score_maps: &Tensor, cfg: &NgwpConfig) -> Result<Tensor> {
    let (c, _) = check_alignment(mask, score_maps)?;
    let mut out = Vec::with_capacity(c);
    for cls in 0..c {
        let m = mask.0.channel(cls + 1);
        let y = score_maps.channel(cls);
        let weighted: f64 = m.iter().zip(y).map(|(a, b)| a * b).sum();
        let denom = cfg.epsilon + m.iter().sum::<f64>();
        if denom == 0.0 {
            return Err(Error::Division(format!(
                "nGWP of class {} has an empty mask and epsilon = 0",
                cls + 1
            )));
        }
        out.push(weighted / denom);
    }
    Tensor::from_raw(vec![c], out)
}

/// Gradients of `sum_c grad_out[c] * ngwp(...)[c]`.
///
/// Returns `(grad_mask, grad_scores)`; `grad_mask` has the full `(C+1)`
/// channels with zeros in the background channel.
pub fn ngwp_backward(
    mask: &MaskProbs,
    score_maps: &Tensor,
    cfg: &NgwpConfig,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, _) = check_alignment(mask, score_maps)?;
    if grad_out.dims() != [c] {
        return Err(shape_err!("upstream gradient {:?}, expected [{c}]", grad_out.dims()));
    }
    let mut grad_mask = Tensor::zeros(mask.0.dims());
    let mut grad_scores = Tensor::zeros(score_maps.dims());
    for cls in 0..c {
        let m = mask.0.channel(cls + 1);
        let y = score_maps.channel(cls);
        let weighted: f64 = m.iter().zip(y).map(|(a, b)| a * b).sum();
        let denom = cfg.epsilon + m.iter().sum::<f64>();
        if denom == 0.0 {
            return Err(Error::Division(format!("nGWP backward, class {}", cls + 1)));
        }
        let g = grad_out.data()[cls];
        let ratio = weighted / denom;
        for (gm, &yv) in grad_mask.channel_mut(cls + 1).iter_mut().zip(y) {
            *gm = g * (yv - ratio) / denom;
        }
        for (gy, &mv) in grad_scores.channel_mut(cls).iter_mut().zip(m) {
            *gy = g * mv / denom;
        }
    }
    Ok((grad_mask, grad_scores))
}

/// Focal size penalty per object class (background channel excluded).
pub fn focal_penalty(mask: &MaskProbs, cfg: &FocalConfig) -> Tensor {
    let means = mask.channel_means();
    let vals = means[1..].iter().map(|&mbar| cfg.value(mbar)).collect();
    Tensor::from_raw(vec![mask.num_classes()], vals).expect("C >= 1")
}

/// Gradient of `sum_c grad_out[c] * focal_penalty(...)[c]` w.r.t. the mask.
pub fn focal_penalty_backward(mask: &MaskProbs, cfg: &FocalConfig, grad_out: &Tensor) -> Result<Tensor> {
    let c = mask.num_classes();
    if grad_out.dims() != [c] {
        return Err(shape_err!("upstream gradient {:?}, expected [{c}]", grad_out.dims()));
    }
    let means = mask.channel_means();
    let hw = (mask.height() * mask.width()) as f64;
    let mut grad = Tensor::zeros(mask.0.dims());
    for cls in 0..c {
        let d = grad_out.data()[cls] * cfg.derivative(means[cls + 1]) / hw;
        grad.channel_mut(cls + 1).iter_mut().for_each(|g| *g = d);
    }
    Ok(grad)
}

/// Final class scores: nGWP plus focal penalty.
pub fn classification_scores(
    mask: &MaskProbs,
    score_maps: &Tensor,
    ncfg: &NgwpConfig,
    fcfg: &FocalConfig,
) -> Result<Tensor> {
    ngwp(mask, score_maps, ncfg)?.add(&focal_penalty(mask, fcfg))
}

/// Forward state of the score-map -> class-score route, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ScoreForward {
    pub mask: MaskProbs,
    pub scores: Tensor,
}

impl ScoreForward {
    pub fn new(score_maps: &Tensor, ncfg: &NgwpConfig, fcfg: &FocalConfig) -> Result<Self> {
        let mask = build_mask_probs(score_maps, ncfg)?;
        let scores = classification_scores(&mask, score_maps, ncfg, fcfg)?;
        Ok(Self { mask, scores })
    }

    /// Gradient w.r.t. the score maps given `dL/dscores`, through both the
    /// direct nGWP path and the mask (softmax) path.
    pub fn backward(
        &self,
        score_maps: &Tensor,
        ncfg: &NgwpConfig,
        fcfg: &FocalConfig,
        grad_scores: &Tensor,
    ) -> Result<Tensor> {
        let (mut grad_mask, direct) = ngwp_backward(&self.mask, score_maps, ncfg, grad_scores)?;
        grad_mask.axpy(1.0, &focal_penalty_backward(&self.mask, fcfg, grad_scores)?)?;
        let mut total = mask_grad_to_score_maps(&self.mask, &grad_mask)?;
        total.axpy(1.0, &direct)?;
        Ok(total)
    }
}

/// Pulls a gradient on the `(C+1)` mask channels back to the `C` score maps
/// (the background logit is a constant and receives nothing).
pub fn mask_grad_to_score_maps(mask: &MaskProbs, grad_mask: &Tensor) -> Result<Tensor> {
    let logits_grad = softmax_over_channels_backward(&mask.0, grad_mask)?;
    let (c1, h, w) = logits_grad.chw()?;
    let plane = h * w;
    Tensor::from_raw(vec![c1 - 1, h, w], logits_grad.data()[plane..].to_vec())
}
