//! Temporally ordered gaze heatmaps over the session image.

use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::session::Session;
use crate::supervision::{binned_fixations, rasterize_heatmap, SupervisionParams};
use crate::NUM_GAZE_TOKENS;

/// Rendered images are upscaled until their side is at least this many pixels.
const MIN_SIDE: u32 = 256;
const STRIP_GAP: u32 = 4;
const HEAT_ALPHA: f64 = 0.6;

/// Per-bin heatmaps over the patch grid, each scaled so its maximum is 1
/// (all zeros for a bin without fixations).
pub fn step_heatmaps(session: &Session, params: &SupervisionParams) -> Result<[Vec<f64>; NUM_GAZE_TOKENS]> {
    let bins = binned_fixations(session, params)?;
    Ok(bins.map(|samples| {
        let h = rasterize_heatmap(&samples, params.grid, params.sigma_norm, params.duration_weighted);
        let max = h.values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            h.values.iter().map(|v| v / max).collect()
        } else {
            h.values
        }
    }))
}

/// Upscaled image with `heat` (row-major over a `g × g` grid) blended in red.
pub fn overlay(image: &GrayImage, heat: &[f64], g: usize) -> RgbImage {
    let (w, h) = image.dimensions();
    let scale = MIN_SIDE.div_ceil(w.max(h).max(1)).max(1);
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let (sx, sy) = (x / scale, y / scale);
        let base = f64::from(image.get_pixel(sx, sy).0[0]);
        let col = (sx as usize * g / w as usize).min(g - 1);
        let row = (sy as usize * g / h as usize).min(g - 1);
        let a = HEAT_ALPHA * heat[row * g + col].clamp(0.0, 1.0);
        let mix = |target: f64| (base * (1.0 - a) + target * a).round() as u8;
        Rgb([mix(255.0), mix(0.0), mix(0.0)])
    })
}

/// The four step images side by side.
pub fn strip(steps: &[RgbImage]) -> RgbImage {
    let (w, h) = steps.first().map_or((0, 0), |s| s.dimensions());
    let n = steps.len() as u32;
    let mut out = RgbImage::from_pixel(n * w + (n.saturating_sub(1)) * STRIP_GAP, h, Rgb([255, 255, 255]));
    for (i, s) in steps.iter().enumerate() {
        image::imageops::replace(&mut out, s, i64::from(i as u32 * (w + STRIP_GAP)), 0);
    }
    out
}

/// Writes `step_1.png` .. `step_4.png` and `strip.png` into `out_dir`.
pub fn visualize_session(
    session: &Session,
    params: &SupervisionParams,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let g = params.grid.side();
    let heat = step_heatmaps(session, params)?;
    let steps: Vec<RgbImage> = heat.iter().map(|h| overlay(&session.image, h, g)).collect();
    let mut written = Vec::new();
    for (i, img) in steps.iter().enumerate() {
        let path = out_dir.join(format!("step_{}.png", i + 1));
        save_png(img, &path)?;
        written.push(path);
    }
    let path = out_dir.join("strip.png");
    save_png(&strip(&steps), &path)?;
    written.push(path);
    Ok(written)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_heat_keeps_the_base_image() {
        let img = GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 30 + y) as u8]));
        let out = overlay(&img, &[0.0; 4], 2);
        assert_eq!(out.dimensions(), (256, 256));
        for (x, y, p) in out.enumerate_pixels() {
            let v = img.get_pixel(x / 32, y / 32).0[0];
            assert_eq!(p.0, [v, v, v]);
        }
    }

    #[test]
    fn heat_reddens_its_patch_only() {
        let img = GrayImage::from_pixel(8, 8, image::Luma([100]));
        let out = overlay(&img, &[0.0, 1.0, 0.0, 0.0], 2);
        let hot = out.get_pixel(200, 10).0;
        assert!(hot[0] > 100 && hot[1] < 100);
        assert_eq!(out.get_pixel(10, 10).0, [100, 100, 100]);
        let s = strip(&[out.clone(), out.clone(), out.clone(), out]);
        assert_eq!(s.dimensions(), (4 * 256 + 3 * STRIP_GAP, 256));
    }
}
