//! Dense row-major `f64` tensors and the handful of reductions the rest of
//! the crate needs.
//!
//! Images, score maps and masks are all stored channel-first as `C x h x w`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data. Rejects NaN/Inf.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_raw(dims, data)?;
        if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry {pos} is {}",
                t.data[pos]
            )));
        }
        Ok(t)
    }

    /// Builds a tensor without the finiteness check (internal results may
    /// legitimately carry large sentinels).
    pub fn from_raw(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(shape_err!("rank-0 tensors are not supported"));
        }
        if dims.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {n} entries, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "invalid dims {dims:?}"
        );
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims;
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected rank-3 (C,h,w), got {:?}", self.dims)),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + i) * w + j]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + i) * w + j] = v;
    }

    /// Contiguous slice of channel `c` of a rank-3 tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.dims[1] * self.dims[2];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }
}

/// Per-pixel softmax across the channel axis of a `C x h x w` tensor.
pub fn softmax_over_channels(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..plane {
        let mut peak = f64::NEG_INFINITY;
        for k in 0..c {
            peak = peak.max(src[k * plane + p]);
        }
        let mut denom = 0.0;
        for k in 0..c {
            let e = (src[k * plane + p] - peak).exp();
            out[k * plane + p] = e;
            denom += e;
        }
        for k in 0..c {
            out[k * plane + p] /= denom;
        }
    }
    Tensor::from_raw(t.dims().to_vec(), out)
}

/// Vector-Jacobian product of [`softmax_over_channels`]: given the softmax
/// output `probs` and upstream gradient `grad_probs`, returns the gradient
/// with respect to the logits.
pub fn softmax_over_channels_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    probs.expect_same_dims(grad_probs)?;
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let (m, g) = (probs.data(), grad_probs.data());
    let mut out = vec![0.0; m.len()];
    for p in 0..plane {
        let dot: f64 = (0..c).map(|k| m[k * plane + p] * g[k * plane + p]).sum();
        for k in 0..c {
            let idx = k * plane + p;
            out[idx] = m[idx] * (g[idx] - dot);
        }
    }
    Tensor::from_raw(probs.dims().to_vec(), out)
}

/// Spatial maximum of each channel of a `K x h x w` tensor.
pub fn global_max_pool(t: &Tensor) -> Result<Tensor> {
    Ok(global_max_pool_with_argmax(t)?.0)
}

/// Like [`global_max_pool`] but also returns the flat in-plane index of the
/// first maximum per channel (used to route gradients).
pub fn global_max_pool_with_argmax(t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if t.rank() != 3 {
        return Err(shape_err!(
            "global_max_pool expects (K,h,w), got {:?}",
            t.dims()
        ));
    }
    let k = t.dims()[0];
    let mut values = Vec::with_capacity(k);
    let mut idx = Vec::with_capacity(k);
    for ch in 0..k {
        let (best_i, best) = t
            .channel(ch)
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        values.push(best);
        idx.push(best_i);
    }
    Ok((Tensor::from_raw(vec![k], values)?, idx))
}

/// Nearest-neighbour upsampling of a `C x h x w` tensor to `C x out_h x out_w`.
pub fn upsample_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("empty target size {out_h}x{out_w}"));
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for k in 0..c {
        for i in 0..out_h {
            let si = i * h / out_h;
            for j in 0..out_w {
                let sj = j * w / out_w;
                out.set3(k, i, j, t.at3(k, si, sj));
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums the gradient of every output pixel
/// into its source pixel.
pub fn upsample_nearest_backward(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad.chw()?;
    let mut out = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        for i in 0..out_h {
            let si = i * h / out_h;
            for j in 0..out_w {
                let sj = j * w / out_w;
                let v = out.at3(k, si, sj) + grad.at3(k, i, j);
                out.set3(k, si, sj, v);
            }
        }
    }
    Ok(out)
}

/// Channel index of the maximum at each pixel (first wins on ties).
pub fn argmax_channels(t: &Tensor) -> Result<Vec<usize>> {
    let (c, h, w) = t.chw()?;
    let plane = h * w;
    let d = t.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Seeded, splittable random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream; advances `self` by one draw.
    pub fn split(&mut self) -> Rng {
        let child_seed = self.inner.next_u64() ^ 0x9E37_79B9_7F4A_7C15;
        Rng::new(child_seed)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// i.i.d. `Bern(psi)` draws in a tensor of the requested shape.
pub fn bernoulli_mask(rng: &mut Rng, dims: &[usize], psi: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&psi) {
        return Err(param_err!("Bernoulli rate must lie in [0,1), got {psi}"));
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(shape_err!("invalid dims {dims:?}"));
    }
    Ok(Tensor::from_fn(dims, |_| {
        if rng.bernoulli(psi) {
            1.0
        } else {
            0.0
        }
    }))
}
