//! 8-bit PNG renderings of single short-axis slices.

use anyhow::Result;
use cmrqc_core::Label;

/// RGB per canonical label code; background is fully transparent.
pub const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [220, 50, 47], [133, 153, 0], [38, 139, 210]];
const ALPHA: [u8; 4] = [0, 255, 255, 255];

/// Per-slice min-max rescale to 0..=255. A uniform slice maps to 0, and
/// non-finite samples map to 0 without affecting the range.
pub fn rescale_to_u8(values: &[f64]) -> Vec<u8> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() || !(span > 0.0) {
                0
            } else {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

fn encode(rows: usize, cols: usize, pixels: &[u8], palette: bool) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, cols as u32, rows as u32);
        enc.set_depth(png::BitDepth::Eight);
        if palette {
            enc.set_color(png::ColorType::Indexed);
            enc.set_palette(PALETTE.concat());
            enc.set_trns(ALPHA.to_vec());
        } else {
            enc.set_color(png::ColorType::Grayscale);
        }
        let mut writer = enc.write_header()?;
        writer.write_image_data(pixels)?;
        writer.finish()?;
    }
    Ok(buf)
}

/// Grayscale PNG of one image slice (row-major, `rows` x `cols`).
pub fn image_png(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    encode(rows, cols, &rescale_to_u8(values), false)
}

/// Indexed PNG whose pixel values are the canonical label codes.
pub fn label_png(rows: usize, cols: usize, labels: &[Label]) -> Result<Vec<u8>> {
    let codes: Vec<u8> = labels.iter().map(|l| l.code()).collect();
    encode(rows, cols, &codes, true)
}
