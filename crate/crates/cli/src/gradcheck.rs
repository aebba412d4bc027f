use std::process::ExitCode;

use anyhow::Result;
use clap::ValueEnum;
use ssws_core::losses::{gradcheck, multilabel_softmargin, weighted_seg_loss, LabelVector};
use ssws_core::numerics::softmax_over_channels;
use ssws_core::pamr::{PseudoLabels, IGNORE};
use ssws_core::scores::{FocalConfig, MaskProbs, NgwpConfig, ScoreForward};
use ssws_core::{Rng, Tensor};

pub const MAX_REL_ERR: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Op {
    /// Multi-label soft-margin loss w.r.t. the class scores.
    Softmargin,
    /// Class-balanced segmentation loss w.r.t. the mask logits.
    Segloss,
    /// Score maps through nGWP and the focal penalty into the soft-margin loss.
    Composite,
}

fn random_labels(rng: &mut Rng, c: usize) -> LabelVector {
    let mut z: Vec<u8> = (0..c).map(|_| rng.bernoulli(0.5) as u8).collect();
    z[rng.below(c)] = 1;
    LabelVector::new(z).expect("labels are 0/1 with at least one positive")
}

/// Largest relative error on a random instance with `C <= 8` and maps of
/// at most 8x8, plus a description of the instance.
pub fn check(op: Op, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let c = 1 + rng.below(8);
    let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
    let (err, shape) = match op {
        Op::Softmargin => {
            let y = Tensor::from_fn(&[c], |_| 3.0 * rng.normal());
            let z = random_labels(&mut rng, c);
            let f = |y: &Tensor| multilabel_softmargin(y, &z).map(|l| (l.value, l.grad));
            (gradcheck(f, &y, STEP)?, format!("C={c}"))
        }
        Op::Segloss => {
            let logits = Tensor::from_fn(&[c + 1, h, w], |_| rng.normal());
            let mut labels: Vec<u8> = (0..h * w)
                .map(|_| if rng.bernoulli(0.2) { IGNORE } else { rng.below(c + 1) as u8 })
                .collect();
            // at least two labelled classes, so the loss is not trivially zero
            labels[0] = 0;
            if h * w > 1 {
                labels[h * w - 1] = 1 + rng.below(c) as u8;
            }
            let pseudo = PseudoLabels::new(labels, c, h, w, true)?;
            let f = |l: &Tensor| {
                let mask = MaskProbs::new(softmax_over_channels(l)?)?;
                let loss = weighted_seg_loss(&[&mask], &[&pseudo])?;
                Ok((loss.value, loss.grad.reshape(vec![c + 1, h, w])?))
            };
            (gradcheck(f, &logits, STEP)?, format!("C={c} {h}x{w}"))
        }
        Op::Composite => {
            let maps = Tensor::from_fn(&[c, h, w], |_| 2.0 * rng.normal());
            let z = random_labels(&mut rng, c);
            let (ncfg, fcfg) = (NgwpConfig::default(), FocalConfig::default());
            let f = |m: &Tensor| {
                let sf = ScoreForward::new(m, &ncfg, &fcfg)?;
                let l = multilabel_softmargin(&sf.scores, &z)?;
                Ok((l.value, sf.backward(m, &ncfg, &fcfg, &l.grad)?))
            };
            (gradcheck(f, &maps, STEP)?, format!("C={c} {h}x{w}"))
        }
    };
    Ok((err, shape))
}

pub fn run(op: Op, seed: u64) -> Result<ExitCode> {
    let (err, shape) = check(op, seed)?;
    let name = op.to_possible_value().expect("no skipped variants");
    println!("{} seed {seed} {shape}: max rel err {err:.3e}", name.get_name());
    if err > MAX_REL_ERR {
        eprintln!("max rel err {err:.3e} exceeds {MAX_REL_ERR:e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
