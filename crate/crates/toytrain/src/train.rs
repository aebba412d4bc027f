//! Two-phase training, prediction and end-to-end experiments.
//!
//! Phase 1 fits image-level labels through the class scores. Phase 2 adds
//! the segmentation loss against pseudo labels recomputed every step from
//! the network's own (detached) masks after PAMR.

use serde::{Deserialize, Serialize};
use ssws_core::gate::{DrawMode, GateConfig};
use ssws_core::losses::{multilabel_softmargin, weighted_seg_loss, LabelVector};
use ssws_core::numerics::{sigmoid, upsample_nearest, upsample_nearest_backward};
use ssws_core::pamr::{affinity, extract_pseudo_gt, refine, AffinityField, PamrConfig, PseudoGtConfig, PseudoLabels, ThresholdBase};
use ssws_core::scores::{build_mask_probs, FocalConfig, MaskProbs, NgwpConfig, ScoreForward};
use ssws_core::{Rng, Tensor};

use crate::dataset::{gen_dataset, Dataset, Sample, ToyDatasetConfig};
use crate::error::{Result, ToyError};
use crate::metrics::{eval_iou, LossCurves, Metrics};
use crate::net::{forward, Forward, GateMode, NetConfig, Params, Pass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub psi: f64,
    pub gci_enabled: bool,
    pub mode: GateMode,
    /// One Bernoulli draw per pixel shared by all channels, instead of one
    /// per element.
    pub per_pixel_draws: bool,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            psi: 0.3,
            gci_enabled: true,
            mode: GateMode::Stochastic,
            per_pixel_draws: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalSection {
    pub p: f64,
    pub lambda: f64,
}

impl Default for FocalSection {
    fn default() -> Self {
        Self { p: 3.0, lambda: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgwpSection {
    pub epsilon: f64,
    pub bg_score: f64,
}

impl Default for NgwpSection {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            bg_score: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PamrSection {
    /// When false, pseudo labels come from the unrefined mask.
    pub enabled: bool,
    pub dilations: Vec<usize>,
    pub iterations: usize,
    pub sigma_floor: f64,
}

impl Default for PamrSection {
    fn default() -> Self {
        let d = PamrConfig::default();
        Self {
            enabled: true,
            dilations: d.dilations,
            iterations: d.iterations,
            sigma_floor: d.sigma_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoGtSection {
    pub fg_ratio: f64,
    pub bg_ratio: f64,
    /// Threshold against the global maximum instead of each channel's.
    pub global_threshold: bool,
}

impl Default for PseudoGtSection {
    fn default() -> Self {
        Self {
            fg_ratio: 0.6,
            bg_ratio: 0.7,
            global_threshold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs with the classification loss only.
    pub epochs_phase1: usize,
    pub epochs_total: usize,
    /// Step size for the convolutional trunk.
    pub lr: f64,
    /// Step size for GCI and the score head.
    pub lr_head: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Off turns phase 2 into more classification epochs.
    pub use_seg_loss: bool,
    pub seg_loss_weight: f64,
    pub prune_threshold: f64,
    pub net: NetConfig,
    pub gate: GateSection,
    pub focal: FocalSection,
    pub ngwp: NgwpSection,
    pub pamr: PamrSection,
    pub pseudo_gt: PseudoGtSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 5,
            epochs_total: 30,
            lr: 0.03,
            lr_head: 0.03,
            momentum: 0.9,
            batch_size: 8,
            use_seg_loss: true,
            seg_loss_weight: 1.0,
            prune_threshold: 0.1,
            net: NetConfig::default(),
            gate: GateSection::default(),
            focal: FocalSection::default(),
            ngwp: NgwpSection::default(),
            pamr: PamrSection::default(),
            pseudo_gt: PseudoGtSection::default(),
        }
    }
}

/// Core-library configurations derived from a validated [`TrainConfig`].
#[derive(Debug, Clone)]
struct Resolved {
    gate: GateConfig,
    ngwp: NgwpConfig,
    focal: FocalConfig,
    pamr: PamrConfig,
    pseudo_gt: PseudoGtConfig,
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl TrainConfig {
    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs_phase1 > self.epochs_total {
            v.push(format!(
                "epochs_phase1 ({}) must not exceed epochs_total ({})",
                self.epochs_phase1, self.epochs_total
            ));
        }
        if !positive(self.lr) {
            v.push(format!("lr must be > 0, got {}", self.lr));
        }
        if !positive(self.lr_head) {
            v.push(format!("lr_head must be > 0, got {}", self.lr_head));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be > 0".to_string());
        }
        if !(self.seg_loss_weight >= 0.0 && self.seg_loss_weight.is_finite()) {
            v.push(format!("seg_loss_weight must be >= 0, got {}", self.seg_loss_weight));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            v.push(format!("prune_threshold must be in [0,1], got {}", self.prune_threshold));
        }
        v.extend(self.net.violations());
        if !(0.0..1.0).contains(&self.gate.psi) {
            v.push(format!("gate.psi must be in [0,1), got {}", self.gate.psi));
        }
        if !(self.focal.p >= 0.0 && self.focal.p.is_finite()) {
            v.push(format!("focal.p must be >= 0, got {}", self.focal.p));
        }
        if !positive(self.focal.lambda) {
            v.push(format!("focal.lambda must be > 0, got {}", self.focal.lambda));
        }
        if !positive(self.ngwp.epsilon) {
            v.push(format!("ngwp.epsilon must be > 0, got {}", self.ngwp.epsilon));
        }
        if !self.ngwp.bg_score.is_finite() {
            v.push("ngwp.bg_score must be finite".to_string());
        }
        let pamr = PamrConfig {
            dilations: self.pamr.dilations.clone(),
            iterations: self.pamr.iterations,
            sigma_floor: self.pamr.sigma_floor,
        };
        if let Err(e) = pamr.validate() {
            v.push(format!("pamr: {e}"));
        }
        for (name, r) in [("fg_ratio", self.pseudo_gt.fg_ratio), ("bg_ratio", self.pseudo_gt.bg_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                v.push(format!("pseudo_gt.{name} must be in (0,1], got {r}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.violations();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ToyError::Config(problems))
        }
    }

    fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        Ok(Resolved {
            gate: GateConfig::new(self.gate.psi, self.gate.gci_enabled)?.with_draw(if self.gate.per_pixel_draws {
                DrawMode::PerPixel
            } else {
                DrawMode::PerElement
            }),
            ngwp: NgwpConfig::new(self.ngwp.epsilon, self.ngwp.bg_score)?,
            focal: FocalConfig::new(self.focal.p, self.focal.lambda)?,
            pamr: PamrConfig::new(self.pamr.dilations.clone(), self.pamr.iterations, self.pamr.sigma_floor)?,
            pseudo_gt: PseudoGtConfig {
                fg_ratio: self.pseudo_gt.fg_ratio,
                bg_ratio: self.pseudo_gt.bg_ratio,
                base: if self.pseudo_gt.global_threshold {
                    ThresholdBase::Global
                } else {
                    ThresholdBase::PerChannel
                },
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: Params,
    pub config: TrainConfig,
}

impl Model {
    pub fn init(config: &TrainConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Params::init(&config.net, num_classes, rng),
            config: config.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }
}

/// Inference output for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Mask at image resolution after pruning.
    pub mask: MaskProbs,
    /// Class scores before the sigmoid.
    pub class_scores: Tensor,
    /// Per-pixel argmax of `mask`.
    pub labels: Vec<u8>,
}

/// Inference with the blended gate. Classes whose sigmoid confidence falls
/// below `prune_threshold` get their mask channel zeroed and the remaining
/// channels are renormalised.
pub fn predict_detailed(model: &Model, image: &Tensor) -> Result<Prediction> {
    let r = model.config.resolve()?;
    let fwd = forward(&model.params, image, &r.gate, model.config.gate.mode, Pass::Infer)?;
    let sf = ScoreForward::new(&fwd.scores, &r.ngwp, &r.focal)?;
    let (_, h, w) = image.chw()?;
    let logits = upsample_nearest(&fwd.scores, h, w)?;
    let mask = build_mask_probs(&logits, &r.ngwp)?;
    let c = model.num_classes();
    let plane = h * w;
    let mut m = mask.into_tensor();
    for cls in 0..c {
        if sigmoid(sf.scores.data()[cls]) < model.config.prune_threshold {
            m.channel_mut(cls + 1).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let data = m.data_mut();
    for px in 0..plane {
        let total: f64 = (0..=c).map(|k| data[k * plane + px]).sum();
        for k in 0..=c {
            data[k * plane + px] /= total;
        }
    }
    let mask = MaskProbs::new(m)?;
    let labels = argmax_labels(&mask);
    Ok(Prediction {
        mask,
        class_scores: sf.scores,
        labels,
    })
}

pub fn predict(model: &Model, image: &Tensor) -> Result<MaskProbs> {
    Ok(predict_detailed(model, image)?.mask)
}

/// First maximal channel per pixel.
fn argmax_labels(mask: &MaskProbs) -> Vec<u8> {
    let t = mask.tensor();
    let plane = mask.height() * mask.width();
    let c1 = mask.num_classes() + 1;
    (0..plane)
        .map(|px| {
            let mut best = 0;
            for k in 1..c1 {
                if t.data()[k * plane + px] > t.data()[best * plane + px] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Segmentation IoU (background included) and classification accuracy on
/// `dataset`, plus the predicted label maps.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(Metrics, Vec<Vec<u8>>)> {
    let mut preds = Vec::with_capacity(dataset.len());
    let mut correct = 0usize;
    for s in &dataset.samples {
        let p = predict_detailed(model, &s.image)?;
        for (cls, &z) in s.labels.as_slice().iter().enumerate() {
            let positive = sigmoid(p.class_scores.data()[cls]) >= 0.5;
            correct += (positive == (z == 1)) as usize;
        }
        preds.push(p.labels);
    }
    let gt: Vec<Vec<u8>> = dataset.samples.iter().map(|s| s.mask.clone()).collect();
    let mut metrics = eval_iou(&preds, &gt, dataset.num_classes() + 1)?;
    let pairs = dataset.len() * dataset.num_classes();
    metrics.classification_accuracy = Some(correct as f64 / pairs as f64);
    Ok((metrics, preds))
}

/// Forward state of one training image.
pub(crate) struct Step {
    fwd: Forward,
    scores: ScoreForward,
    /// Mask at image resolution, treated as a constant by PAMR.
    full_mask: MaskProbs,
}

pub(crate) fn forward_step(params: &Params, sample: &Sample, cfg: &TrainConfig, rng: &mut Rng) -> Result<Step> {
    let r = cfg.resolve()?;
    let fwd = forward(params, &sample.image, &r.gate, cfg.gate.mode, Pass::Train(rng))?;
    let scores = ScoreForward::new(&fwd.scores, &r.ngwp, &r.focal)?;
    let (_, h, w) = sample.image.chw()?;
    let full_mask = build_mask_probs(&upsample_nearest(&fwd.scores, h, w)?, &r.ngwp)?;
    Ok(Step {
        fwd,
        scores,
        full_mask,
    })
}

/// Pseudo labels from the detached mask. Nothing here is differentiated.
pub(crate) fn pseudo_labels(
    step: &Step,
    labels: &LabelVector,
    aff: Option<&AffinityField>,
    cfg: &TrainConfig,
) -> Result<PseudoLabels> {
    let r = cfg.resolve()?;
    let source = match aff {
        Some(aff) => refine(&step.full_mask, aff, r.pamr.iterations)?,
        None => step.full_mask.clone(),
    };
    Ok(extract_pseudo_gt(&source, labels, &r.pseudo_gt)?)
}

pub(crate) struct BatchLoss {
    pub grads: Params,
    pub classification: f64,
    pub segmentation: f64,
}

/// Parameter gradients of the mean classification loss plus, when
/// `pseudo` is given, the weighted segmentation loss against those fixed
/// targets.
pub(crate) fn backward_batch(
    params: &Params,
    samples: &[&Sample],
    steps: &[Step],
    pseudo: Option<&[PseudoLabels]>,
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let r = cfg.resolve()?;
    let b = samples.len() as f64;
    let mut grads = params.zeros_like();
    let mut classification = 0.0;

    let seg = match pseudo {
        Some(p) => {
            let masks: Vec<&MaskProbs> = steps.iter().map(|s| &s.full_mask).collect();
            let targets: Vec<&PseudoLabels> = p.iter().collect();
            Some(weighted_seg_loss(&masks, &targets)?)
        }
        None => None,
    };

    for (idx, (sample, step)) in samples.iter().zip(steps).enumerate() {
        let loss = multilabel_softmargin(&step.scores.scores, &sample.labels)?;
        classification += loss.value / b;
        let mut g = step
            .scores
            .backward(&step.fwd.scores, &r.ngwp, &r.focal, &loss.grad.scale(1.0 / b))?;
        if let Some(seg) = &seg {
            let (c1, h, w) = step.full_mask.tensor().chw()?;
            let plane = h * w;
            let start = idx * c1 * plane;
            // the background logit is a constant: drop channel 0
            let logits_grad = Tensor::from_raw(
                vec![c1 - 1, h, w],
                seg.grad.data()[start + plane..start + c1 * plane].to_vec(),
            )?;
            let (_, sh, sw) = step.fwd.scores.chw()?;
            let down = upsample_nearest_backward(&logits_grad, sh, sw)?;
            g.axpy(cfg.seg_loss_weight, &down)?;
        }
        step.fwd.backward(params, &g, &mut grads)?;
    }
    Ok(BatchLoss {
        grads,
        classification,
        segmentation: seg.map(|s| s.value).unwrap_or(0.0),
    })
}

fn sgd_update(params: &mut Params, velocity: &mut Params, grads: &Params, cfg: &TrainConfig) -> Result<()> {
    let n = params.tensors().len();
    // trailing six tensors are GCI (four) and the head (two)
    let head_start = n - 6;
    let pv = params.tensors_mut();
    let vv = velocity.tensors_mut();
    for (i, ((p, v), g)) in pv.into_iter().zip(vv).zip(grads.tensors()).enumerate() {
        let lr = if i >= head_start { cfg.lr_head } else { cfg.lr };
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Trains on `dataset` and reports metrics on the same images.
///
/// Deterministic in `rng`'s seed: initialisation, shuffling and gate draws
/// all come from it in a fixed order.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<(Model, Metrics)> {
    let r = cfg.resolve()?;
    if dataset.is_empty() {
        return Err(ToyError::Config(vec!["dataset is empty".to_string()]));
    }
    let mut model = Model::init(cfg, dataset.num_classes(), rng)?;
    let mut velocity = model.params.zeros_like();
    let mut affinities: Vec<Option<AffinityField>> = vec![None; dataset.len()];
    let mut curves = LossCurves::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step_count = 0usize;

    for epoch in 0..cfg.epochs_total {
        let phase2 = cfg.use_seg_loss && epoch >= cfg.epochs_phase1;
        rng.shuffle(&mut order);
        let (mut cls_sum, mut seg_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let steps = samples
                .iter()
                .map(|s| forward_step(&model.params, s, cfg, rng))
                .collect::<Result<Vec<_>>>()?;
            let pseudo = if phase2 {
                let mut out = Vec::with_capacity(chunk.len());
                for (&i, step) in chunk.iter().zip(&steps) {
                    let aff = if cfg.pamr.enabled {
                        if affinities[i].is_none() {
                            affinities[i] = Some(affinity(&dataset.samples[i].image, &r.pamr)?);
                        }
                        affinities[i].as_ref()
                    } else {
                        None
                    };
                    out.push(pseudo_labels(step, &dataset.samples[i].labels, aff, cfg)?);
                }
                Some(out)
            } else {
                None
            };
            let loss = backward_batch(&model.params, &samples, &steps, pseudo.as_deref(), cfg)?;
            let total = loss.classification + cfg.seg_loss_weight * loss.segmentation;
            if !total.is_finite() || !loss.grads.is_finite() {
                return Err(ToyError::Diverged {
                    epoch,
                    step: step_count,
                    detail: format!(
                        "classification loss {}, segmentation loss {}",
                        loss.classification, loss.segmentation
                    ),
                });
            }
            sgd_update(&mut model.params, &mut velocity, &loss.grads, cfg)?;
            if !model.params.is_finite() {
                return Err(ToyError::Diverged {
                    epoch,
                    step: step_count,
                    detail: "non-finite parameters after update".to_string(),
                });
            }
            cls_sum += loss.classification;
            seg_sum += loss.segmentation;
            batches += 1;
            step_count += 1;
        }
        let n = batches as f64;
        curves.classification.push(cls_sum / n);
        curves.segmentation.push(seg_sum / n);
        curves.total.push((cls_sum + cfg.seg_loss_weight * seg_sum) / n);
    }

    let (mut metrics, _) = evaluate(&model, dataset)?;
    metrics.loss_curves = curves;
    Ok((model, metrics))
}

/// Seed offset separating the validation images from the training images.
pub const VALIDATION_SEED_OFFSET: u64 = 0x5EED_0000_0000_0001;

/// A complete run: data generation, training and validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds initialisation, shuffling and gate draws.
    pub seed: u64,
    pub dataset: ToyDatasetConfig,
    /// Size of the held-out split, generated like `dataset` with a
    /// derived seed.
    pub val_images: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: ToyDatasetConfig::default(),
            val_images: 60,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.dataset.violations();
        if self.val_images == 0 {
            v.push("val_images must be > 0".to_string());
        }
        v.extend(self.train.violations());
        v
    }

    /// Sets both the training seed and the dataset seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self
    }

    pub fn validation_dataset_config(&self) -> ToyDatasetConfig {
        ToyDatasetConfig {
            n_images: self.val_images,
            seed: self.dataset.seed.wrapping_add(VALIDATION_SEED_OFFSET),
            ..self.dataset.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train: Metrics,
    pub validation: Metrics,
}

/// Everything a run produces besides the report.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub model: Model,
    pub report: ExperimentReport,
    pub validation: Dataset,
    pub val_predictions: Vec<Vec<u8>>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(ToyError::Config(problems));
    }
    let train_set = gen_dataset(&cfg.dataset)?;
    let validation = gen_dataset(&cfg.validation_dataset_config())?;
    let mut rng = Rng::new(cfg.seed);
    let (model, train_metrics) = train(&train_set, &cfg.train, &mut rng)?;
    let (val_metrics, val_predictions) = evaluate(&model, &validation)?;
    Ok(ExperimentOutput {
        model,
        report: ExperimentReport {
            train: train_metrics,
            validation: val_metrics,
        },
        validation,
        val_predictions,
    })
}
