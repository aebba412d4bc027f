//! Segmentation and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};

/// Per-epoch averages of the training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub classification: Vec<f64>,
    pub segmentation: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Index 0 is background, `c + 1` is class `c`. `None` when the class
    /// occurs in neither predictions nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Fraction of (image, class) pairs whose thresholded confidence
    /// matches the image label.
    pub classification_accuracy: Option<f64>,
    pub loss_curves: LossCurves,
}

/// IoU per class over a whole split. `num_labels` counts background.
/// Pixels labelled outside `0..num_labels` in the ground truth are ignored.
pub fn eval_iou(predictions: &[Vec<u8>], gt_masks: &[Vec<u8>], num_labels: usize) -> Result<Metrics> {
    if predictions.len() != gt_masks.len() {
        return Err(ToyError::Config(vec![format!(
            "{} predictions vs {} ground-truth masks",
            predictions.len(),
            gt_masks.len()
        )]));
    }
    let mut inter = vec![0u64; num_labels];
    let mut union = vec![0u64; num_labels];
    for (idx, (p, g)) in predictions.iter().zip(gt_masks).enumerate() {
        if p.len() != g.len() {
            return Err(ToyError::Config(vec![format!(
                "image {idx}: prediction has {} pixels, ground truth {}",
                p.len(),
                g.len()
            )]));
        }
        for (&pv, &gv) in p.iter().zip(g) {
            let (pv, gv) = (pv as usize, gv as usize);
            if gv >= num_labels {
                continue;
            }
            if pv == gv {
                inter[gv] += 1;
                union[gv] += 1;
            } else {
                union[gv] += 1;
                if pv < num_labels {
                    union[pv] += 1;
                }
            }
        }
    }
    let per_class_iou: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let scored: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let mean_iou = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(Metrics {
        per_class_iou,
        mean_iou,
        ..Default::default()
    })
}
