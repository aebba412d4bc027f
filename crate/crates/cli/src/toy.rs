use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use ssws_core::pamr::IGNORE;
use ssws_core::{tnsr, Tensor};
use ssws_toytrain::{eval_iou, run_experiment, ExperimentConfig, ToyError};

use crate::input_error;

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| input_error(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_error(format!("--config {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn label_tensor(labels: &[u8], h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![h, w], labels.iter().map(|&l| l as f64).collect())?)
}

pub fn train(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let problems = cfg.violations();
    if !problems.is_empty() {
        let src = config.map_or("default configuration".to_string(), |p| p.display().to_string());
        return Err(input_error(format!("{src}:\n  - {}", problems.join("\n  - "))));
    }
    let run = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(ToyError::Config(v)) => return Err(input_error(v.join("; "))),
        Err(e) => return Err(e.into()),
    };

    let pred_dir = out_dir.join("pred");
    let gt_dir = out_dir.join("gt");
    for d in [&pred_dir, &gt_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    write_json(&out_dir.join("config.json"), &cfg)?;
    write_json(&out_dir.join("metrics.json"), &run.report)?;
    let s = run.validation.image_size();
    for (i, (pred, sample)) in run.val_predictions.iter().zip(&run.validation.samples).enumerate() {
        let name = format!("{i:04}.tnsr");
        tnsr::save(pred_dir.join(&name), &label_tensor(pred, s, s)?)?;
        tnsr::save(gt_dir.join(&name), &label_tensor(&sample.mask, s, s)?)?;
    }
    println!(
        "train mean IoU {:.4}, validation mean IoU {:.4}",
        run.report.train.mean_iou, run.report.validation.mean_iou
    );
    Ok(ExitCode::SUCCESS)
}

fn tnsr_files(dir: &Path, flag: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| input_error(format!("{flag} {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == "tnsr") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(input_error(format!("{flag} {}: no .tnsr files", dir.display())));
    }
    Ok(files)
}

/// Reads an `H x W` (or `1 x H x W`) map of integer labels.
fn load_labels(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let name = path.display();
    let t = tnsr::load(path).map_err(|e| input_error(format!("{name}: {e}")))?;
    let dims = match t.dims() {
        [h, w] | [1, h, w] => vec![*h, *w],
        d => return Err(input_error(format!("{name}: expected an H x W label map, got dims {d:?}"))),
    };
    let labels = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(input_error(format!("{name}: label {v} is not an integer in 0..=255")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok((dims, labels))
}

pub fn eval(pred: &Path, gt: &Path, num_labels: Option<usize>, out: Option<&Path>) -> Result<ExitCode> {
    let pred_files = tnsr_files(pred, "--pred")?;
    let gt_files = tnsr_files(gt, "--gt")?;
    let names = |fs: &[PathBuf]| fs.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    let (pn, gn) = (names(&pred_files), names(&gt_files));
    if let Some(missing) = gn.iter().find(|n| !pn.contains(n)) {
        return Err(input_error(format!("--pred {}: no {}", pred.display(), missing.to_string_lossy())));
    }
    if let Some(extra) = pn.iter().find(|n| !gn.contains(n)) {
        return Err(input_error(format!("--gt {}: no {}", gt.display(), extra.to_string_lossy())));
    }

    let mut preds = Vec::with_capacity(pred_files.len());
    let mut gts = Vec::with_capacity(gt_files.len());
    for (p, g) in pred_files.iter().zip(&gt_files) {
        let (pd, pl) = load_labels(p)?;
        let (gd, gl) = load_labels(g)?;
        if pd != gd {
            return Err(input_error(format!("{}: dims {pd:?} differ from ground truth {gd:?}", p.display())));
        }
        preds.push(pl);
        gts.push(gl);
    }
    let num_labels = match num_labels {
        Some(0) => return Err(input_error("--num-labels must be > 0")),
        Some(n) => n,
        None => {
            let top = preds
                .iter()
                .chain(&gts)
                .flatten()
                .filter(|&&l| l != IGNORE)
                .max()
                .copied()
                .unwrap_or(0);
            top as usize + 1
        }
    };
    let metrics = eval_iou(&preds, &gts, num_labels)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(path) = out {
        write_json(path, &metrics)?;
    }
    Ok(ExitCode::SUCCESS)
}
