//! Pixel-adaptive mask refinement (PAMR) and pseudo ground-truth extraction.
//!
//! PAMR re-averages mask probabilities over a fixed neighbourhood made of
//! several dilated 3x3 kernels. The averaging weights come from the image:
//! for pixel `p` and neighbour `q`
//!
//! ```text
//! k(p, q) = mean over channels of -|I(p) - I(q)| / sigma(p)^2
//! alpha(p, q) = softmax over in-bounds q of k(p, q)
//! ```
//!
//! where `sigma(p)` is the local standard deviation of each channel over the
//! kernel support of `p`. Refinement is parameter-free and sits outside the
//! differentiated graph.

use crate::error::{param_err, shape_err, Result};
use crate::losses::LabelVector;
use crate::numerics::Tensor;
use crate::scores::MaskProbs;

/// Label value for pixels that carry no supervision.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct PamrConfig {
    pub dilations: Vec<usize>,
    pub iterations: usize,
    pub sigma_floor: f64,
}

impl Default for PamrConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4, 8, 12, 24],
            iterations: 10,
            sigma_floor: 1e-3,
        }
    }
}

impl PamrConfig {
    pub fn new(dilations: Vec<usize>, iterations: usize, sigma_floor: f64) -> Result<Self> {
        let cfg = Self {
            dilations,
            iterations,
            sigma_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(param_err!("at least one dilation is required"));
        }
        if self.dilations[0] == 0 {
            return Err(param_err!("dilations must be positive"));
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(param_err!(
                "dilations must be strictly increasing, got {:?}",
                self.dilations
            ));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(param_err!("sigma_floor must be > 0, got {}", self.sigma_floor));
        }
        Ok(())
    }

    /// The 8 off-centre taps of every dilated 3x3 kernel, as `(di, dj)`.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let mut out = Vec::with_capacity(8 * self.dilations.len());
        for &d in &self.dilations {
            let d = d as isize;
            for di in [-d, 0, d] {
                for dj in [-d, 0, d] {
                    if di != 0 || dj != 0 {
                        out.push((di, dj));
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn shifted(i: usize, j: usize, (di, dj): (isize, isize), h: usize, w: usize) -> Option<usize> {
    let ni = i as isize + di;
    let nj = j as isize + dj;
    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
        None
    } else {
        Some(ni as usize * w + nj as usize)
    }
}

/// Indices `k` in `0..n` with `k + d` also in `0..n`, as a half-open span.
fn valid_span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// Per-pixel, per-channel population standard deviation over the kernel
/// support (centre plus in-bounds taps), floored at `cfg.sigma_floor`.
pub fn local_sigma(image: &Tensor, cfg: &PamrConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (ch, h, w) = image.chw()?;
    let offsets = cfg.offsets();
    let mut out = Tensor::zeros(&[ch, h, w]);
    for c in 0..ch {
        let plane = image.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let centre = plane[i * w + j];
                let (mut n, mut sum, mut sq) = (1.0, centre, centre * centre);
                for &off in &offsets {
                    if let Some(q) = shifted(i, j, off, h, w) {
                        let v = plane[q];
                        n += 1.0;
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                dst[i * w + j] = var.sqrt().max(cfg.sigma_floor);
            }
        }
    }
    Ok(out)
}

/// Convex neighbour weights for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    offsets: Vec<(isize, isize)>,
    /// `N_neigh x h x w`; out-of-bounds taps hold 0.
    weights: Tensor,
}

impl AffinityField {
    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn height(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.weights.dims()[2]
    }
}

/// Image-driven affinity weights: channel-averaged kernel values, softmaxed
/// over each pixel's in-bounds neighbours.
pub fn affinity(image: &Tensor, cfg: &PamrConfig) -> Result<AffinityField> {
    let sigma = local_sigma(image, cfg)?;
    let (ch, h, w) = image.chw()?;
    let offsets = cfg.offsets();
    let n_neigh = offsets.len();
    let plane = h * w;
    let img = image.data();
    let sig = sigma.data();
    let mut weights = vec![0.0; n_neigh * plane];
    let mut kbar = vec![0.0; n_neigh];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let mut peak = f64::NEG_INFINITY;
            for (n, &off) in offsets.iter().enumerate() {
                kbar[n] = f64::NEG_INFINITY;
                if let Some(q) = shifted(i, j, off, h, w) {
                    let mut k = 0.0;
                    for c in 0..ch {
                        let s = sig[c * plane + p];
                        k -= (img[c * plane + p] - img[c * plane + q]).abs() / (s * s);
                    }
                    k /= ch as f64;
                    kbar[n] = k;
                    peak = peak.max(k);
                }
            }
            let mut denom = 0.0;
            for (n, &k) in kbar.iter().enumerate() {
                if k > f64::NEG_INFINITY {
                    let e = (k - peak).exp();
                    weights[n * plane + p] = e;
                    denom += e;
                }
            }
            for n in 0..n_neigh {
                weights[n * plane + p] /= denom;
            }
        }
    }
    Ok(AffinityField {
        offsets,
        weights: Tensor::from_raw(vec![n_neigh, h, w], weights)?,
    })
}

/// Applies `iterations` rounds of `m_t(p) = sum_q alpha(p, q) m_{t-1}(q)`.
/// Each round reads only the previous round's mask.
pub fn refine(mask: &MaskProbs, aff: &AffinityField, iterations: usize) -> Result<MaskProbs> {
    let (c1, h, w) = mask.tensor().chw()?;
    if aff.height() != h || aff.width() != w {
        return Err(shape_err!(
            "affinity field is {}x{}, mask is {h}x{w}",
            aff.height(),
            aff.width()
        ));
    }
    let plane = h * w;
    let alpha = aff.weights.data();
    let mut cur = mask.tensor().data().to_vec();
    let mut next = vec![0.0; cur.len()];
    // in-bounds row and column spans per offset
    let spans: Vec<_> = aff
        .offsets
        .iter()
        .map(|&(di, dj)| (valid_span(di, h), valid_span(dj, w), di, dj))
        .collect();
    for _ in 0..iterations {
        next.iter_mut().for_each(|v| *v = 0.0);
        // offsets outermost: each pixel still sums its taps in offset order
        for (n, &((i0, i1), (j0, j1), di, dj)) in spans.iter().enumerate() {
            if i0 == i1 || j0 == j1 {
                continue;
            }
            for c in 0..c1 {
                let src = &cur[c * plane..(c + 1) * plane];
                let dst = &mut next[c * plane..(c + 1) * plane];
                for i in i0..i1 {
                    let qi = (i as isize + di) as usize;
                    let p0 = i * w + j0;
                    let q0 = (qi as isize * w as isize + j0 as isize + dj) as usize;
                    let len = j1 - j0;
                    let a = &alpha[n * plane + p0..n * plane + p0 + len];
                    for ((d, &x), &aw) in dst[p0..p0 + len].iter_mut().zip(&src[q0..q0 + len]).zip(a) {
                        *d += aw * x;
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(MaskProbs::from_tensor_unchecked(Tensor::from_raw(
        vec![c1, h, w],
        cur,
    )?))
}

/// Affinity from `image`, then `cfg.iterations` refinement steps.
pub fn pamr(image: &Tensor, mask: &MaskProbs, cfg: &PamrConfig) -> Result<MaskProbs> {
    let aff = affinity(image, cfg)?;
    refine(mask, &aff, cfg.iterations)
}

/// Hard per-pixel labels with an image-level validity flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    labels: Vec<u8>,
    num_classes: usize,
    height: usize,
    width: usize,
    valid: bool,
    counts: Vec<usize>,
}

impl PseudoLabels {
    /// `labels` holds `0..=num_classes` or [`IGNORE`], row-major `h x w`.
    pub fn new(labels: Vec<u8>, num_classes: usize, height: usize, width: usize, valid: bool) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!("{} labels for a {height}x{width} map", labels.len()));
        }
        if num_classes == 0 || num_classes >= IGNORE as usize {
            return Err(param_err!("unsupported class count {num_classes}"));
        }
        let mut counts = vec![0usize; num_classes + 1];
        for &l in &labels {
            if l == IGNORE {
                continue;
            }
            *counts
                .get_mut(l as usize)
                .ok_or_else(|| param_err!("label {l} exceeds {num_classes} classes"))? += 1;
        }
        Ok(Self {
            labels,
            num_classes,
            height,
            width,
            valid,
            counts,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid(&self) -> bool {
        self.valid
    }

    /// Labelled pixels per channel, background first.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total labelled (non-`IGNORE`) pixels.
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Marks pixel `idx` as `IGNORE`, keeping the counts in sync.
    pub fn set_ignore(&mut self, idx: usize) {
        let old = self.labels[idx];
        if old != IGNORE {
            self.counts[old as usize] -= 1;
            self.labels[idx] = IGNORE;
        }
    }
}

/// What the relative confidence thresholds are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdBase {
    /// The spatial maximum of the channel itself.
    #[default]
    PerChannel,
    /// The maximum over all channels and pixels.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoGtConfig {
    /// Object classes: confident above this fraction of the maximum.
    pub fg_ratio: f64,
    /// Background: confident above this fraction of the maximum.
    pub bg_ratio: f64,
    pub base: ThresholdBase,
}

impl Default for PseudoGtConfig {
    fn default() -> Self {
        Self {
            fg_ratio: 0.6,
            bg_ratio: 0.7,
            base: ThresholdBase::PerChannel,
        }
    }
}

/// Hard pseudo labels from a refined mask.
///
/// Channels of classes absent from `present` are zeroed first. A pixel is
/// labelled only when exactly one channel clears its threshold; conflicts
/// and unconfident pixels become [`IGNORE`]. The map is flagged invalid when
/// any present class ends up with no labelled pixel.
pub fn extract_pseudo_gt(refined: &MaskProbs, present: &LabelVector, cfg: &PseudoGtConfig) -> Result<PseudoLabels> {
    let c = refined.num_classes();
    if present.len() != c {
        return Err(shape_err!("{} image labels for {c} mask classes", present.len()));
    }
    let (h, w) = (refined.height(), refined.width());
    let plane = h * w;
    let mut m = refined.tensor().data().to_vec();
    for cls in 0..c {
        if !present.contains(cls) {
            m[(cls + 1) * plane..(cls + 2) * plane].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let channel_max = |k: usize| m[k * plane..(k + 1) * plane].iter().copied().fold(0.0, f64::max);
    let global_max = m.iter().copied().fold(0.0, f64::max);
    let thresholds: Vec<f64> = (0..=c)
        .map(|k| {
            let base = match cfg.base {
                ThresholdBase::PerChannel => channel_max(k),
                ThresholdBase::Global => global_max,
            };
            base * if k == 0 { cfg.bg_ratio } else { cfg.fg_ratio }
        })
        .collect();

    let mut labels = vec![IGNORE; plane];
    for (px, label) in labels.iter_mut().enumerate() {
        let mut hit = None;
        let mut conflict = false;
        for (k, &thr) in thresholds.iter().enumerate() {
            if m[k * plane + px] > thr {
                if hit.is_some() {
                    conflict = true;
                    break;
                }
                hit = Some(k);
            }
        }
        if let (Some(k), false) = (hit, conflict) {
            *label = k as u8;
        }
    }
    let mut out = PseudoLabels::new(labels, c, h, w, true)?;
    out.valid = (0..c).all(|cls| !present.contains(cls) || out.counts[cls + 1] > 0);
    Ok(out)
}
