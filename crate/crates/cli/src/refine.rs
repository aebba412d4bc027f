use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use ssws_core::numerics::{argmax_channels, softmax_over_channels, upsample_nearest};
use ssws_core::pamr::{pamr, PamrConfig};
use ssws_core::scores::MaskProbs;
use ssws_core::{tnsr, Tensor};

use crate::{input_error, palette};

pub struct Args {
    pub image: PathBuf,
    pub scores: PathBuf,
    pub dilations: Vec<usize>,
    pub iters: usize,
    pub sigma_floor: f64,
    pub out: PathBuf,
    pub png: Option<PathBuf>,
}

/// Decodes a PNG into a `3 x H x W` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| input_error(format!("--image {}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| input_error(format!("--image {}: {e}", path.display())))?
        .decode()
        .map_err(|e| input_error(format!("--image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |idx| {
        let (c, p) = (idx / (h * w), idx % (h * w));
        raw[3 * p + c] as f64 / 255.0
    }))
}

fn load_scores(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let name = path.display();
    let t = tnsr::load(path).map_err(|e| input_error(format!("--scores {name}: {e}")))?;
    let dims = t.dims().to_vec();
    if dims.len() != 3 {
        return Err(input_error(format!("--scores {name}: expected C x h x w, got dims {dims:?}")));
    }
    if dims[0] > 256 {
        return Err(input_error(format!("--scores {name}: at most 256 channels, got {}", dims[0])));
    }
    if dims[1] > h || dims[2] > w {
        return Err(input_error(format!(
            "--scores {name}: {}x{} maps exceed the {h}x{w} image",
            dims[1], dims[2]
        )));
    }
    if !t.is_finite() {
        return Err(input_error(format!("--scores {name}: non-finite values")));
    }
    Ok(t)
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let cfg = PamrConfig::new(args.dilations.clone(), args.iters, args.sigma_floor)
        .map_err(|e| input_error(format!("--dilations/--sigma-floor: {e}")))?;
    let image = load_rgb(&args.image)?;
    let (_, h, w) = image.chw()?;
    let scores = load_scores(&args.scores, h, w)?;

    let up = upsample_nearest(&scores, h, w)?;
    let mask = MaskProbs::new(softmax_over_channels(&up)?)?;
    let refined = pamr(&image, &mask, &cfg)?;

    tnsr::save(&args.out, refined.tensor()).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(png_path) = &args.png {
        let labels: Vec<u8> = argmax_channels(refined.tensor())?
            .into_iter()
            .map(|l| l as u8)
            .collect();
        palette::write_indexed_png(png_path, &labels, w, h)?;
    }
    Ok(ExitCode::SUCCESS)
}
