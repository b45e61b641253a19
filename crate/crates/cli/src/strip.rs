//! Horizontal visualization strips: raw observation, every layer's hint
//! frames, then every residual image.

use image::RgbImage;

/// One CHW float image in observation scale.
pub struct Panel<'a> {
    pub data: &'a [f32],
}

/// Number of panels in a strip for `layers` layers and `frames` hint frames.
pub fn panel_count(layers: usize, frames: usize) -> usize {
    1 + layers * frames + layers.saturating_sub(1)
}

/// Lays out `raw` (HWC u8) followed by `panels` left to right. The float
/// panels share one min-max scaling to `[0, 255]`; a constant strip maps to
/// mid grey.
pub fn render(raw: &[u8], size: usize, panels: &[Panel]) -> RgbImage {
    let plane = size * size;
    let mut img = RgbImage::new((size * (1 + panels.len())) as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let o = (y * size + x) * 3;
            img.put_pixel(x as u32, y as u32, image::Rgb([raw[o], raw[o + 1], raw[o + 2]]));
        }
    }
    let (lo, hi) = panels
        .iter()
        .flat_map(|p| p.data.iter().copied())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let to_byte = |v: f32| -> u8 {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    };
    for (i, p) in panels.iter().enumerate() {
        let x0 = size * (i + 1);
        for y in 0..size {
            for x in 0..size {
                let px = y * size + x;
                let rgb = [0, 1, 2].map(|c| to_byte(p.data[c * plane + px]));
                img.put_pixel((x0 + x) as u32, y as u32, image::Rgb(rgb));
            }
        }
    }
    img
}
