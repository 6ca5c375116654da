use serde::{Deserialize, Serialize};

use super::{RopeState, SimConfig};
use crate::geom::{point_segment_dist_sq, Vec2};

/// Grayscale observation of the rope. Pixels outside the mask are exactly 0;
/// rope pixels are shaded from 1.0 at the clamp to 0.5 at the free end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub mask: Vec<bool>,
}

impl RasterImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    /// Builds an image whose mask is the set of nonzero pixels.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height);
        let mask = pixels.iter().map(|&v| v > 0.0).collect();
        Self {
            width,
            height,
            pixels,
            mask,
        }
    }

    /// Pixel-centre coordinates of every mask pixel in row-major order.
    pub fn mask_points(&self) -> Vec<Vec2> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.mask[r * self.width + c] {
                    out.push(Vec2::new(c as f64 + 0.5, r as f64 + 0.5));
                }
            }
        }
        out
    }

    pub fn same_size(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Rasterizes the rope polyline. A pixel belongs to the mask when its centre
/// lies within half the stroke width of the projected polyline.
pub fn render(state: &RopeState, config: &SimConfig) -> RasterImage {
    let (w, h) = (config.raster_width, config.raster_height);
    let scale = config.px_per_cm();
    let half = config.stroke_width_px as f64 / 2.0;
    let half_sq = half * half;
    let pts: Vec<Vec2> = state.nodes.iter().map(|&p| p * scale).collect();

    let seg_len: Vec<f64> = pts.windows(2).map(|s| s[0].dist(s[1])).collect();
    let total: f64 = seg_len.iter().sum::<f64>().max(1e-12);

    // Per pixel: (best squared distance, arc-length position of the closest point).
    let mut best = vec![(f64::INFINITY, 0.0f64); w * h];
    let mut arc_start = 0.0;
    for (i, s) in pts.windows(2).enumerate() {
        let (a, b) = (s[0], s[1]);
        let c0 = ((a.x.min(b.x) - half - 0.5).floor().max(0.0)) as usize;
        let c1 = ((a.x.max(b.x) + half - 0.5).ceil().max(-1.0)) as isize;
        let r0 = ((a.y.min(b.y) - half - 0.5).floor().max(0.0)) as usize;
        let r1 = ((a.y.max(b.y) + half - 0.5).ceil().max(-1.0)) as isize;
        let c1 = c1.min(w as isize - 1);
        let r1 = r1.min(h as isize - 1);
        if c1 >= 0 && r1 >= 0 {
            for r in r0..=r1 as usize {
                for c in c0..=c1 as usize {
                    let p = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
                    let (d, t) = point_segment_dist_sq(p, a, b);
                    let cell = &mut best[r * w + c];
                    if d <= half_sq && d < cell.0 {
                        *cell = (d, arc_start + t * seg_len[i]);
                    }
                }
            }
        }
        arc_start += seg_len[i];
    }

    let mut img = RasterImage::blank(w, h);
    for (k, &(d, s)) in best.iter().enumerate() {
        if d.is_finite() {
            img.mask[k] = true;
            img.pixels[k] = (1.0 - 0.5 * s / total) as f32;
        }
    }
    img
}

pub fn rope_pixel_count(image: &RasterImage) -> usize {
    image.mask.iter().filter(|&&m| m).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::reset_rope;

    #[test]
    fn reset_rope_renders_as_horizontal_bar() {
        let cfg = SimConfig::default();
        let img = render(&reset_rope(&cfg), &cfg);
        // Rope at y = 32 cm -> rows 31 and 32; spans x in [0, 39.2] -> columns 0..=39.
        for r in 0..img.height {
            for c in 0..img.width {
                let expect = (r == 31 || r == 32) && c <= 39;
                assert_eq!(img.mask[r * img.width + c], expect, "pixel ({r}, {c})");
            }
        }
        assert_eq!(rope_pixel_count(&img), 80);
    }

    #[test]
    fn pixels_are_zero_exactly_off_mask() {
        let cfg = SimConfig::default();
        let img = render(&reset_rope(&cfg), &cfg);
        for (&v, &m) in img.pixels.iter().zip(&img.mask) {
            if m {
                assert!(v > 0.0 && v <= 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn pixel_count_ignores_intensity() {
        let cfg = SimConfig::default();
        let mut img = render(&reset_rope(&cfg), &cfg);
        let n = rope_pixel_count(&img);
        for v in img.pixels.iter_mut().filter(|v| **v > 0.0) {
            *v = 0.25;
        }
        assert_eq!(rope_pixel_count(&img), n);
        assert_eq!(rope_pixel_count(&RasterImage::blank(64, 64)), 0);
    }
}
