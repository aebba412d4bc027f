use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};

/// The VOC colour map: bits 0, 1 and 2 of the label feed the red, green and
/// blue channels, most significant bit first, three label bits per round.
pub fn voc_palette() -> [[u8; 3]; 256] {
    let mut pal = [[0u8; 3]; 256];
    for (label, rgb) in pal.iter_mut().enumerate() {
        let mut c = label;
        for j in 0..8 {
            for (ch, v) in rgb.iter_mut().enumerate() {
                *v |= (((c >> ch) & 1) as u8) << (7 - j);
            }
            c >>= 3;
        }
    }
    pal
}

pub fn write_indexed_png(path: &Path, labels: &[u8], width: usize, height: usize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(voc_palette().concat());
    let mut w = enc.write_header()?;
    w.write_image_data(labels)?;
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_voc_colours() {
        let p = voc_palette();
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [128, 0, 0]);
        assert_eq!(p[2], [0, 128, 0]);
        assert_eq!(p[3], [128, 128, 0]);
        assert_eq!(p[4], [0, 0, 128]);
        assert_eq!(p[15], [192, 128, 128]);
        assert_eq!(p[20], [0, 64, 128]);
        assert_eq!(p[255], [224, 224, 192]);
    }
}
