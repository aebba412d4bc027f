//! Classification and segmentation losses with analytic gradients, plus a
//! central-difference gradient checker.

use crate::error::{param_err, shape_err, Error, Result};
use crate::numerics::{sigmoid, Rng, Tensor};
use crate::pamr::{PseudoLabels, IGNORE};
use crate::scores::MaskProbs;

/// Binary image-level labels over the `C` object classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(z: Vec<u8>) -> Result<Self> {
        if z.is_empty() {
            return Err(shape_err!("empty label vector"));
        }
        if let Some(bad) = z.iter().find(|&&v| v > 1) {
            return Err(param_err!("label entries must be 0 or 1, got {bad}"));
        }
        Ok(Self(z))
    }

    pub fn from_present(num_classes: usize, present: &[usize]) -> Result<Self> {
        let mut z = vec![0u8; num_classes];
        for &c in present {
            *z.get_mut(c)
                .ok_or_else(|| param_err!("class {c} out of range for {num_classes} classes"))? = 1;
        }
        Self::new(z)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether object class `c` (0-based, i.e. mask channel `c + 1`) is present.
    pub fn contains(&self, c: usize) -> bool {
        self.0[c] == 1
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

/// A scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Multi-label soft-margin loss averaged over classes. The gradient is
/// with respect to the class scores `y`.
pub fn multilabel_softmargin(y: &Tensor, z: &LabelVector) -> Result<LossValue> {
    if y.rank() != 1 || y.len() != z.len() {
        return Err(shape_err!("scores {:?} vs {} labels", y.dims(), z.len()));
    }
    let c = y.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&yc, &zc) in y.data().iter().zip(z.as_slice()) {
        let zc = zc as f64;
        // -log sigma(y) = softplus(-y); -log(1 - sigma(y)) = softplus(y)
        value += zc * softplus(-yc) + (1.0 - zc) * softplus(yc);
        grad.push((sigmoid(yc) - zc) / c);
    }
    Ok(LossValue {
        value: value / c,
        grad: Tensor::from_raw(vec![y.len()], grad)?,
    })
}

/// Class-balanced cross-entropy against pseudo labels over a batch.
///
/// Per image `b` with `M_b` labelled pixels and `M_bc` of class `c`, a pixel
/// labelled `c` costs `-q_c ln m_c` with `q_c = (M_b - M_bc) / (1 + M_b)`.
/// The batch loss weighs image `b` by `M_b / (sum_b' M_b' * hw)`; images
/// flagged invalid drop out entirely, as do `IGNORE` pixels.
///
/// An image supervised by a single class gets `q_c = 0` and therefore
/// contributes nothing.
///
/// The gradient has shape `B x (C+1) x h x w` and is taken with respect to
/// the pre-softmax logits (background logit included).
pub fn weighted_seg_loss(masks: &[&MaskProbs], pseudo: &[&PseudoLabels]) -> Result<LossValue> {
    if masks.is_empty() || masks.len() != pseudo.len() {
        return Err(shape_err!("{} masks vs {} pseudo-label maps", masks.len(), pseudo.len()));
    }
    let dims = masks[0].tensor().dims().to_vec();
    let (c1, h, w) = (dims[0], dims[1], dims[2]);
    let plane = h * w;
    for (m, p) in masks.iter().zip(pseudo) {
        if m.tensor().dims() != dims.as_slice() {
            return Err(shape_err!("batch masks differ in shape"));
        }
        if p.height() != h || p.width() != w {
            return Err(shape_err!("pseudo labels {}x{} vs mask {h}x{w}", p.height(), p.width()));
        }
        if p.num_classes() + 1 != c1 {
            return Err(shape_err!(
                "pseudo labels cover {} classes, mask has {}",
                p.num_classes(),
                c1 - 1
            ));
        }
    }

    let mut grad = Tensor::zeros(&[masks.len(), c1, h, w]);
    let total_labelled: usize = pseudo.iter().filter(|p| p.valid()).map(|p| p.total()).sum();
    if total_labelled == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let norm = total_labelled as f64 * plane as f64;

    let mut value = 0.0;
    for (b, (mask, labels)) in masks.iter().zip(pseudo).enumerate() {
        if !labels.valid() || labels.total() == 0 {
            continue;
        }
        let m_total = labels.total() as f64;
        let q: Vec<f64> = labels
            .counts()
            .iter()
            .map(|&mc| (m_total - mc as f64) / (1.0 + m_total))
            .collect();
        let image_weight = m_total / norm;
        let probs = mask.tensor().data();
        let g = &mut grad.data_mut()[b * c1 * plane..(b + 1) * c1 * plane];
        let mut image_loss = 0.0;
        for (px, &label) in labels.labels().iter().enumerate() {
            if label == IGNORE {
                continue;
            }
            let cls = label as usize;
            let qc = q[cls];
            image_loss -= qc * probs[cls * plane + px].max(f64::MIN_POSITIVE).ln();
            for k in 0..c1 {
                let indicator = if k == cls { 1.0 } else { 0.0 };
                g[k * plane + px] = image_weight * qc * (probs[k * plane + px] - indicator);
            }
        }
        value += image_weight * image_loss;
    }
    Ok(LossValue { value, grad })
}

/// Coordinates above which [`gradcheck`] samples instead of sweeping.
pub const GRADCHECK_FULL_LIMIT: usize = 10_000;
/// Floor on the relative-error denominator, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between the analytic gradient returned by `f` and
/// central differences with step `h`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(param_err!("finite-difference step {h} outside [1e-7, 1e-4]"));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::Check(format!("f(x) = {value}")));
    }
    x.expect_same_dims(&analytic)?;

    let coords: Vec<usize> = if x.len() > GRADCHECK_FULL_LIMIT {
        let mut rng = Rng::new(0x6772_6164);
        (0..GRADCHECK_FULL_LIMIT).map(|_| rng.below(x.len())).collect()
    } else {
        (0..x.len()).collect()
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Check(format!("non-finite value perturbing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_over_channels;
    use crate::scores::{build_mask_probs, NgwpConfig};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn labels(z: &[u8]) -> LabelVector {
        LabelVector::new(z.to_vec()).unwrap()
    }

    #[test]
    fn softmargin_examples() {
        let l = multilabel_softmargin(&Tensor::new(vec![1], vec![0.0]).unwrap(), &labels(&[1])).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((l.grad.data()[0] + 0.5).abs() < 1e-15);

        let l = multilabel_softmargin(&Tensor::new(vec![1], vec![50.0]).unwrap(), &labels(&[1])).unwrap();
        assert!(l.value < 1e-20 && l.grad.data()[0].abs() < 1e-20);

        let l = multilabel_softmargin(&Tensor::zeros(&[2]), &labels(&[1, 0])).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmargin_extreme_scores_stay_finite() {
        let y = Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap();
        let l = multilabel_softmargin(&y, &labels(&[1, 0])).unwrap();
        assert!((l.value - 800.0).abs() < 1e-9);
        assert!(l.grad.is_finite());
    }

    #[test]
    fn softmargin_shape_error() {
        assert!(multilabel_softmargin(&Tensor::zeros(&[3]), &labels(&[1, 0])).is_err());
    }

    #[test]
    fn label_vector_validation() {
        assert!(LabelVector::new(vec![0, 2]).is_err());
        assert!(LabelVector::new(vec![]).is_err());
        assert_eq!(LabelVector::from_present(3, &[2]).unwrap().as_slice(), &[0, 0, 1]);
        assert!(LabelVector::from_present(3, &[3]).is_err());
    }

    fn mask_of(c1: usize, h: usize, w: usize, seed: u64) -> MaskProbs {
        let mut rng = Rng::new(seed);
        let scores = Tensor::from_fn(&[c1 - 1, h, w], |_| rng.normal());
        build_mask_probs(&scores, &NgwpConfig::default()).unwrap()
    }

    #[test]
    fn seg_loss_all_ignore_is_zero() {
        let m = mask_of(3, 2, 2, 1);
        let p = PseudoLabels::new(vec![IGNORE; 4], 2, 2, 2, true).unwrap();
        let l = weighted_seg_loss(&[&m], &[&p]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seg_loss_single_class_is_zero() {
        let m = mask_of(2, 1, 2, 2);
        let p = PseudoLabels::new(vec![1, 1], 1, 1, 2, true).unwrap();
        let l = weighted_seg_loss(&[&m], &[&p]).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn seg_loss_two_pixel_example() {
        let m = MaskProbs::new(Tensor::full(&[2, 1, 2], 0.5)).unwrap();
        let p = PseudoLabels::new(vec![0, 1], 1, 1, 2, true).unwrap();
        let l = weighted_seg_loss(&[&m], &[&p]).unwrap();
        // q = 1/3 per pixel; batch weight M/(M*hw) = 1/2 averages the two pixels
        let per_pixel = (1.0 / 3.0) * 2f64.ln();
        assert!((l.value - per_pixel).abs() < 1e-15);
    }

    #[test]
    fn seg_loss_skips_discarded_images() {
        let a = mask_of(3, 3, 3, 5);
        let b = mask_of(3, 3, 3, 6);
        let pa = PseudoLabels::new(vec![0, 1, 2, 0, 1, 2, IGNORE, 0, 0], 2, 3, 3, true).unwrap();
        let pb = PseudoLabels::new(vec![1, 1, 2, 0, 0, 0, 0, 0, 2], 2, 3, 3, false).unwrap();
        let both = weighted_seg_loss(&[&a, &b], &[&pa, &pb]).unwrap();
        let only = weighted_seg_loss(&[&a], &[&pa]).unwrap();
        assert!((both.value - only.value).abs() < 1e-15);
        assert!(both.grad.data()[27..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seg_loss_ignore_relabel_consistency() {
        let m = mask_of(3, 2, 3, 8);
        let mut labels = vec![0, 1, 2, 1, 0, 2];
        let p = PseudoLabels::new(labels.clone(), 2, 2, 3, true).unwrap();
        let mut relabelled = p.clone();
        relabelled.set_ignore(3);
        labels[3] = IGNORE;
        let rebuilt = PseudoLabels::new(labels, 2, 2, 3, true).unwrap();
        let a = weighted_seg_loss(&[&m], &[&relabelled]).unwrap();
        let b = weighted_seg_loss(&[&m], &[&rebuilt]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.value, weighted_seg_loss(&[&m], &[&p]).unwrap().value);
    }

    #[test]
    fn seg_loss_gradcheck_through_softmax() {
        let mut rng = Rng::new(31);
        let logits = Tensor::from_fn(&[3, 4, 4], |_| rng.normal());
        let mut lab: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        lab[5] = IGNORE;
        let p = PseudoLabels::new(lab, 2, 4, 4, true).unwrap();
        let f = |x: &Tensor| -> Result<(f64, Tensor)> {
            let m = MaskProbs::new(softmax_over_channels(x)?)?;
            let l = weighted_seg_loss(&[&m], &[&p])?;
            let g = l.grad.reshape(vec![3, 4, 4])?;
            Ok((l.value, g))
        };
        let err = gradcheck(f, &logits, 1e-5).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let f = |x: &Tensor| -> Result<(f64, Tensor)> { Ok((x.sum(), Tensor::full(x.dims(), 1.0))) };
        assert!(gradcheck(f, &Tensor::zeros(&[2]), 1e-2).is_err());
        assert!(gradcheck(f, &Tensor::zeros(&[2]), 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        let f = |x: &Tensor| -> Result<(f64, Tensor)> {
            Ok((x.data().iter().map(|v| v * v).sum(), x.clone()))
        };
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(gradcheck(f, &x, 1e-5).unwrap() > 0.4);
    }

    #[test]
    fn gradcheck_non_finite() {
        let f = |x: &Tensor| -> Result<(f64, Tensor)> { Ok((f64::NAN, x.clone())) };
        assert!(matches!(gradcheck(f, &Tensor::zeros(&[1]), 1e-5), Err(Error::Check(_))));
    }

    proptest! {
        #[test]
        fn softmargin_grad_signs(ys in prop::collection::vec(-30.0f64..30.0, 5), zs in prop::collection::vec(0u8..2, 5)) {
            let y = Tensor::new(vec![5], ys).unwrap();
            let z = LabelVector::new(zs.clone()).unwrap();
            let l = multilabel_softmargin(&y, &z).unwrap();
            for (c, &g) in l.grad.data().iter().enumerate() {
                if zs[c] == 1 {
                    prop_assert!(g < 0.0);
                } else {
                    prop_assert!(g > 0.0);
                }
            }
        }

        #[test]
        fn softmargin_permutation_equivariant(ys in prop::collection::vec(-5.0f64..5.0, 4), zs in prop::collection::vec(0u8..2, 4), seed in 0u64..100) {
            let mut order: Vec<usize> = (0..4).collect();
            Rng::new(seed).shuffle(&mut order);
            let y = Tensor::new(vec![4], ys.clone()).unwrap();
            let yp = Tensor::new(vec![4], order.iter().map(|&i| ys[i]).collect()).unwrap();
            let z = LabelVector::new(zs.clone()).unwrap();
            let zp = LabelVector::new(order.iter().map(|&i| zs[i]).collect()).unwrap();
            let a = multilabel_softmargin(&y, &z).unwrap();
            let b = multilabel_softmargin(&yp, &zp).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(b.grad.data()[k], a.grad.data()[i]);
            }
        }
    }
}
