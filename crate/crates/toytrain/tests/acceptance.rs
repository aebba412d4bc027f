//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use ssws_core::gate::{gate_train, GateConfig};
use ssws_core::losses::{multilabel_softmargin, weighted_seg_loss, LabelVector};
use ssws_core::numerics::{argmax_channels, softmax_over_channels};
use ssws_core::pamr::{affinity, pamr, refine, PamrConfig, PseudoLabels, IGNORE};
use ssws_core::scores::{ngwp, FocalConfig, MaskProbs, NgwpConfig, ScoreForward};
use ssws_core::{Rng, Tensor};
use ssws_toytrain::{run_experiment, ExperimentConfig, GateMode};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Largest relative error of `analytic` against central differences of `f`.
fn fd_rel_err(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

fn random_labels(rng: &mut Rng, c: usize) -> LabelVector {
    let mut z: Vec<u8> = (0..c).map(|_| rng.bernoulli(0.5) as u8).collect();
    z[rng.below(c)] = 1;
    LabelVector::new(z).unwrap()
}

fn softmax_mask(logits: &Tensor) -> MaskProbs {
    MaskProbs::new(softmax_over_channels(logits).unwrap()).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let (mut soft, mut seg, mut comp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let c = 1 + rng.below(8);
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let z = random_labels(&mut rng, c);

        let y = Tensor::from_fn(&[c], |_| 3.0 * rng.normal());
        let g = multilabel_softmargin(&y, &z).unwrap().grad;
        soft = soft.max(fd_rel_err(|t| multilabel_softmargin(t, &z).unwrap().value, &y, &g));

        let logits = Tensor::from_fn(&[c + 1, h, w], |_| rng.normal());
        let labels = (0..h * w)
            .map(|_| if rng.bernoulli(0.15) { IGNORE } else { rng.below(c + 1) as u8 })
            .collect();
        let pseudo = PseudoLabels::new(labels, c, h, w, true).unwrap();
        let seg_value = |t: &Tensor| weighted_seg_loss(&[&softmax_mask(t)], &[&pseudo]).unwrap();
        let g = seg_value(&logits).grad.reshape(vec![c + 1, h, w]).unwrap();
        seg = seg.max(fd_rel_err(|t| seg_value(t).value, &logits, &g));

        let maps = Tensor::from_fn(&[c, h, w], |_| 2.0 * rng.normal());
        let (ncfg, fcfg) = (NgwpConfig::default(), FocalConfig::default());
        let composite = |m: &Tensor| {
            let sf = ScoreForward::new(m, &ncfg, &fcfg).unwrap();
            multilabel_softmargin(&sf.scores, &z).unwrap().value
        };
        let sf = ScoreForward::new(&maps, &ncfg, &fcfg).unwrap();
        let l = multilabel_softmargin(&sf.scores, &z).unwrap();
        let g = sf.backward(&maps, &ncfg, &fcfg, &l.grad).unwrap();
        comp = comp.max(fd_rel_err(composite, &maps, &g));
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = soft.max(seg).max(comp);
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("max rel err softmargin {soft:.1e}, seg {seg:.1e}, composite {comp:.1e} (< 1e-4); {secs:.2} s (< 30 s)"),
    )
}

fn vanishing_mask_paths() -> Outcome {
    let t = 1e-6;
    let mut rng = Rng::new(2);
    let (mut zero_dev, mut one_mag, mut one_bound) = (0.0f64, 0.0f64, true);
    for _ in 0..20 {
        let n = 2 + rng.below(14);
        let y = Tensor::from_fn(&[1, 1, n], |_| 3.0 * rng.normal());
        let k = rng.below(n);
        let l = (k + 1 + rng.below(n - 1)) % n;
        let path = |site: usize| {
            let cls: Vec<f64> = (0..n).map(|i| if i == site { t } else { 0.0 }).collect();
            let bg: Vec<f64> = cls.iter().map(|v| 1.0 - v).collect();
            MaskProbs::new(Tensor::new(vec![2, 1, n], [bg, cls].concat()).unwrap()).unwrap()
        };
        let zero = NgwpConfig::zero_epsilon(1.0);
        let vk = ngwp(&path(k), &y, &zero).unwrap().data()[0];
        let vl = ngwp(&path(l), &y, &zero).unwrap().data()[0];
        let (yk, yl) = (y.data()[k], y.data()[l]);
        zero_dev = zero_dev.max(((vk - vl).abs() - (yk - yl).abs()).abs());
        let one = NgwpConfig::default();
        for site in [k, l] {
            let v = ngwp(&path(site), &y, &one).unwrap().data()[0].abs();
            one_mag = one_mag.max(v / t);
            one_bound &= v < 1e-5 * t;
        }
    }
    outcome(
        zero_dev < 1e-6 && one_bound,
        format!(
            "eps=0: ||v_k - v_l| - |y_k - y_l|| <= {zero_dev:.1e} (< 1e-6); eps=1: max |v| / t = {one_mag:.2} (bound 1e-5)"
        ),
    )
}

fn simplex() -> Outcome {
    let cfg = PamrConfig::default();
    let mut rng = Rng::new(3);
    let (mut mask_dev, mut aff_dev) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (h, w) = (2 + rng.below(15), 2 + rng.below(15));
        let c1 = 2 + rng.below(4);
        let image = Tensor::from_fn(&[3, h, w], |_| rng.uniform());
        let mask = softmax_mask(&Tensor::from_fn(&[c1, h, w], |_| 3.0 * rng.normal()));
        let aff = affinity(&image, &cfg).unwrap();
        let plane = h * w;
        let n = aff.offsets().len();
        for p in 0..plane {
            let s: f64 = (0..n).map(|k| aff.weights().data()[k * plane + p]).sum();
            aff_dev = aff_dev.max((s - 1.0).abs());
        }
        let out = refine(&mask, &aff, cfg.iterations).unwrap();
        for p in 0..plane {
            let s: f64 = (0..c1).map(|k| out.tensor().data()[k * plane + p]).sum();
            mask_dev = mask_dev.max((s - 1.0).abs());
        }
    }
    outcome(
        mask_dev < 1e-9 && aff_dev < 1e-9,
        format!("max |sum - 1|: mask {mask_dev:.1e}, affinity rows {aff_dev:.1e} (< 1e-9) over 1000 pairs"),
    )
}

fn neighbours(i: usize, j: usize, h: usize, w: usize, dilations: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &d in dilations {
        for a in -1i64..=1 {
            for b in -1i64..=1 {
                let (ni, nj) = (i as i64 + a * d as i64, j as i64 + b * d as i64);
                if (a, b) != (0, 0) && ni >= 0 && nj >= 0 && ni < h as i64 && nj < w as i64 {
                    out.push((ni as usize, nj as usize));
                }
            }
        }
    }
    out
}

/// Scalar reference: two-pass local standard deviation, channel-averaged
/// kernel, softmax over in-bounds neighbours, synchronous averaging.
fn reference_refine(image: &Tensor, mask: &Tensor, dilations: &[usize], iters: usize, floor: f64) -> Tensor {
    let (ch, h, w) = image.chw().unwrap();
    let c1 = mask.dims()[0];
    let mut alpha = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let nb = neighbours(i, j, h, w, dilations);
            let sigma: Vec<f64> = (0..ch)
                .map(|c| {
                    let mut v = vec![image.at3(c, i, j)];
                    v.extend(nb.iter().map(|&(a, b)| image.at3(c, a, b)));
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                    var.sqrt().max(floor)
                })
                .collect();
            let k: Vec<f64> = nb
                .iter()
                .map(|&(a, b)| {
                    (0..ch)
                        .map(|c| -(image.at3(c, i, j) - image.at3(c, a, b)).abs() / sigma[c].powi(2))
                        .sum::<f64>()
                        / ch as f64
                })
                .collect();
            let top = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = k.iter().map(|v| (v - top).exp()).sum();
            alpha.push(nb.into_iter().zip(k.iter().map(|v| (v - top).exp() / z)).collect::<Vec<_>>());
        }
    }
    let mut cur = mask.clone();
    for _ in 0..iters {
        let mut next = Tensor::zeros(&[c1, h, w]);
        for i in 0..h {
            for j in 0..w {
                for &((a, b), wt) in &alpha[i * w + j] {
                    for c in 0..c1 {
                        next.set3(c, i, j, next.at3(c, i, j) + wt * cur.at3(c, a, b));
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

fn oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for seed in 0..50u64 {
        let mut rng = Rng::new(1000 + seed);
        let image = Tensor::from_fn(&[3, 6, 6], |_| rng.uniform());
        let mask = softmax_mask(&Tensor::from_fn(&[3, 6, 6], |_| 3.0 * rng.normal()));
        let cfg = PamrConfig::default();
        let got = pamr(&image, &mask, &cfg).unwrap();
        let want = reference_refine(&image, mask.tensor(), &cfg.dilations, cfg.iterations, cfg.sigma_floor);
        let d = got.tensor().max_abs_diff(&want).unwrap();
        worst = worst.max(d);
        failures += (d >= 1e-12) as usize;
    }
    outcome(failures == 0, format!("max |refine - reference| = {worst:.1e} (< 1e-12), {failures}/50 seeds off"))
}

fn boundary_snap() -> Outcome {
    let cfg = PamrConfig::new(vec![1, 2, 4, 8], 10, 1e-3).unwrap();
    let mut rng = Rng::new(5);
    let mut improved = 0;
    let mut counts = Vec::new();
    for _ in 0..20 {
        let (h, w) = (20, 20);
        let vertical = rng.bernoulli(0.5);
        let edge = 7 + rng.below(6);
        let left: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.0, 0.4)).collect();
        let right: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.6, 1.0)).collect();
        let side = |i: usize, j: usize| (if vertical { j } else { i }) >= edge;
        let image = Tensor::from_fn(&[3, h, w], |idx| {
            let (c, p) = (idx / (h * w), idx % (h * w));
            let base = if side(p / w, p % w) { right[c] } else { left[c] };
            (base + 0.02 * rng.normal()).clamp(0.0, 1.0)
        });
        // the initial mask puts the boundary 2 px too far
        let shift = if rng.bernoulli(0.5) { 2isize } else { -2 };
        let conf: Vec<f64> = (0..h * w).map(|_| 0.6 + 0.3 * rng.uniform()).collect();
        let mask = Tensor::from_fn(&[2, h, w], |idx| {
            let (c, p) = (idx / (h * w), idx % (h * w));
            let coord = if vertical { p % w } else { p / w } as isize;
            let fg = coord >= edge as isize + shift;
            if (c == 1) == fg {
                conf[p]
            } else {
                1.0 - conf[p]
            }
        });
        let mask = MaskProbs::new(mask).unwrap();
        let wrong = |m: &MaskProbs| {
            argmax_channels(m.tensor())
                .unwrap()
                .iter()
                .enumerate()
                .filter(|&(p, &l)| (l == 1) != side(p / w, p % w))
                .count()
        };
        let before = wrong(&mask);
        let after = wrong(&pamr(&image, &mask, &cfg).unwrap());
        improved += (after < before) as usize;
        counts.push(format!("{before}->{after}"));
    }
    outcome(
        improved >= 19,
        format!("{improved}/20 images improved (>= 19); mislabeled {}", counts.join(" ")),
    )
}

fn gate_expectation() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for &psi in &[0.3, 0.5] {
        let mut rng = Rng::new(6);
        let x_d = Tensor::from_fn(&[4, 5, 5], |_| rng.normal());
        let x_s = Tensor::from_fn(&[4, 5, 5], |_| rng.normal());
        let cfg = GateConfig::new(psi, false).unwrap();
        let n = 100_000usize;
        let mut sum = vec![0.0; x_d.len()];
        let mut sq = vec![0.0; x_d.len()];
        for _ in 0..n {
            let out = gate_train(&x_d, &x_s, &cfg, &mut rng).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let within = (0..x_d.len())
            .filter(|&i| {
                let mean = sum[i] / n as f64;
                let var = (sq[i] / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                (mean - x_d.data()[i]).abs() <= 4.0 * se
            })
            .count();
        let frac = within as f64 / x_d.len() as f64;
        pass &= frac >= 0.99;
        parts.push(format!("psi={psi}: {:.1}% within 4 SE", 100.0 * frac));
    }
    outcome(pass, format!("{} (>= 99%)", parts.join(", ")))
}

fn toy_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::default().with_seed(seed)
}

struct ToyRuns {
    full: Vec<(f64, String)>,
    outcome: Outcome,
}

fn toy_runs() -> ToyRuns {
    let seeds = [0u64, 1, 2];
    let mut rows = Vec::new();
    let mut full_json = Vec::new();
    let mut slowest = 0.0f64;
    for &seed in &seeds {
        let mut miou = |edit: &dyn Fn(&mut ExperimentConfig)| {
            let mut cfg = toy_config(seed);
            edit(&mut cfg);
            let start = Instant::now();
            let out = run_experiment(&cfg).expect("toy run");
            slowest = slowest.max(start.elapsed().as_secs_f64());
            (out.report.validation.mean_iou, serde_json::to_string(&out.report).unwrap())
        };
        let (full, json) = miou(&|_| {});
        let (base, _) = miou(&|c| c.train.use_seg_loss = false);
        let (no_pamr, _) = miou(&|c| c.train.pamr.enabled = false);
        let (no_sg, _) = miou(&|c| c.train.gate.mode = GateMode::Off);
        full_json.push((full, json));
        rows.push((seed, full, base, no_pamr, no_sg));
    }
    let gains: Vec<f64> = rows.iter().map(|r| r.1 - r.2).collect();
    let gain_ok = gains.iter().all(|&g| g >= 0.10);
    let pamr_votes = rows.iter().filter(|r| r.3 < r.1).count();
    let sg_votes = rows.iter().filter(|r| r.4 < r.1).count();
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("seed {}: full {:.3} base {:.3} no-PAMR {:.3} no-SG {:.3}", r.0, r.1, r.2, r.3, r.4))
        .collect();
    ToyRuns {
        full: full_json,
        outcome: outcome(
            gain_ok && pamr_votes >= 2 && sg_votes >= 2 && slowest < 600.0,
            format!(
                "full - base >= 0.10 on every seed: {gain_ok}; no-PAMR worse {pamr_votes}/3, no-SG worse {sg_votes}/3 (majority); slowest run {slowest:.1} s (< 600 s)\n      {}",
                table.join("\n      ")
            ),
        ),
    }
}

fn determinism(first: &(f64, String)) -> Outcome {
    let again = run_experiment(&toy_config(0)).expect("toy run");
    let json = serde_json::to_string(&again.report).unwrap();
    outcome(
        json == first.1,
        format!("repeat of seed 0 full run: {} bytes, identical = {}", json.len(), json == first.1),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient suite", gradients()),
        ("2 vanishing-mask paths", vanishing_mask_paths()),
        ("3 PAMR simplex preservation", simplex()),
        ("4 PAMR oracle equivalence", oracle()),
        ("5 boundary snap", boundary_snap()),
        ("6 stochastic gate expectation", gate_expectation()),
    ];
    let toy = toy_runs();
    let det = determinism(&toy.full[0]);
    results.push(("7 end-to-end toy run", toy.outcome));
    results.push(("8 determinism", det));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
