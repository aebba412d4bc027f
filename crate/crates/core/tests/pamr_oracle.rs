//! PAMR against a direct scalar transcription of the refinement rule.

use ssws_core::numerics::softmax_over_channels;
use ssws_core::pamr::{affinity, pamr, refine, PamrConfig};
use ssws_core::scores::MaskProbs;
use ssws_core::{Rng, Tensor};

type Grid = Vec<Vec<Vec<f64>>>;

fn to_grid(t: &Tensor) -> Grid {
    let (c, h, w) = t.chw().unwrap();
    (0..c)
        .map(|k| (0..h).map(|i| (0..w).map(|j| t.at3(k, i, j)).collect()).collect())
        .collect()
}

fn neighbours(i: usize, j: usize, h: usize, w: usize, dilations: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &d in dilations {
        for a in -1i64..=1 {
            for b in -1i64..=1 {
                if a == 0 && b == 0 {
                    continue;
                }
                let (ni, nj) = (i as i64 + a * d as i64, j as i64 + b * d as i64);
                if ni >= 0 && nj >= 0 && ni < h as i64 && nj < w as i64 {
                    out.push((ni as usize, nj as usize));
                }
            }
        }
    }
    out
}

/// Straightforward reference: two-pass standard deviation, channel-averaged
/// kernel, softmax over neighbours, synchronous updates.
fn oracle(image: &Grid, mask: &Grid, dilations: &[usize], iterations: usize, floor: f64) -> Grid {
    let (ch, h, w) = (image.len(), image[0].len(), image[0][0].len());
    let mut alpha = vec![vec![Vec::<((usize, usize), f64)>::new(); w]; h];
    for i in 0..h {
        for j in 0..w {
            let nb = neighbours(i, j, h, w, dilations);
            let mut sigma = vec![0.0; ch];
            for (c, s) in sigma.iter_mut().enumerate() {
                let mut vals = vec![image[c][i][j]];
                vals.extend(nb.iter().map(|&(a, b)| image[c][a][b]));
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                *s = var.sqrt().max(floor);
            }
            let k: Vec<f64> = nb
                .iter()
                .map(|&(a, b)| {
                    (0..ch)
                        .map(|c| -(image[c][i][j] - image[c][a][b]).abs() / (sigma[c] * sigma[c]))
                        .sum::<f64>()
                        / ch as f64
                })
                .collect();
            let top = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = k.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = e.iter().sum();
            alpha[i][j] = nb.into_iter().zip(e).map(|(q, v)| (q, v / z)).collect();
        }
    }
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let mut next = vec![vec![vec![0.0; w]; h]; cur.len()];
        for i in 0..h {
            for j in 0..w {
                for &((a, b), wt) in &alpha[i][j] {
                    for c in 0..cur.len() {
                        next[c][i][j] += wt * cur[c][a][b];
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

fn random_mask(rng: &mut Rng, c1: usize, h: usize, w: usize) -> MaskProbs {
    let logits = Tensor::from_fn(&[c1, h, w], |_| 3.0 * rng.normal());
    MaskProbs::new(softmax_over_channels(&logits).unwrap()).unwrap()
}

fn max_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn matches_oracle_on_small_inputs() {
    for seed in 0..50u64 {
        let mut rng = Rng::new(seed);
        let image = Tensor::from_fn(&[3, 6, 6], |_| rng.uniform());
        let mask = random_mask(&mut rng, 4, 6, 6);
        let cfg = PamrConfig::new(vec![1, 2, 4], 10, 1e-3).unwrap();
        let got = pamr(&image, &mask, &cfg).unwrap();
        let want = oracle(&to_grid(&image), &to_grid(mask.tensor()), &cfg.dilations, 10, 1e-3);
        let d = max_diff(&to_grid(got.tensor()), &want);
        assert!(d < 1e-12, "seed {seed}: {d}");
    }
}

#[test]
fn matches_oracle_with_default_dilations_and_flat_regions() {
    // flat patches push sigma onto its floor
    let mut rng = Rng::new(99);
    let image = Tensor::from_fn(&[3, 9, 7], |i| if (i % 63) < 30 { 0.5 } else { rng.uniform() });
    let mask = random_mask(&mut rng, 3, 9, 7);
    let cfg = PamrConfig::default();
    let got = pamr(&image, &mask, &cfg).unwrap();
    let want = oracle(&to_grid(&image), &to_grid(mask.tensor()), &cfg.dilations, 10, 1e-3);
    assert!(max_diff(&to_grid(got.tensor()), &want) < 1e-12);
}

#[test]
fn uniform_image_is_plain_neighbour_averaging() {
    let mut rng = Rng::new(5);
    let image = Tensor::full(&[3, 6, 6], 0.4);
    let mask = random_mask(&mut rng, 3, 6, 6);
    let cfg = PamrConfig::new(vec![1, 2], 4, 1e-3).unwrap();
    let aff = affinity(&image, &cfg).unwrap();
    let got = refine(&mask, &aff, 4).unwrap();

    let m = to_grid(mask.tensor());
    let mut cur = m.clone();
    for _ in 0..4 {
        let mut next = cur.clone();
        for i in 0..6 {
            for j in 0..6 {
                let nb = neighbours(i, j, 6, 6, &[1, 2]);
                for c in 0..3 {
                    next[c][i][j] = nb.iter().map(|&(a, b)| cur[c][a][b]).sum::<f64>() / nb.len() as f64;
                }
            }
        }
        cur = next;
    }
    assert!(max_diff(&to_grid(got.tensor()), &cur) < 1e-12);
}
