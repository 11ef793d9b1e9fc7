//! Minimal raster plots for evaluation output. No text is drawn: each plot
//! ships next to the CSV holding its numbers.

use crate::data::save_png;
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, PrCurve};
use crate::tensor::Tensor;
use std::path::Path;

/// Line colours cycled across curves.
const PALETTE: [[f64; 3]; 7] = [
    [0.12, 0.47, 0.71],
    [1.00, 0.50, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.40, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
];

struct Canvas {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas { h, w, pixels: vec![1.0; 3 * h * w] }
    }

    fn set(&mut self, y: i64, x: i64, rgb: [f64; 3]) {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            return;
        }
        let plane = self.h * self.w;
        let at = y as usize * self.w + x as usize;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[c * plane + at] = v;
        }
    }

    fn line(&mut self, (y0, x0): (f64, f64), (y1, x1): (f64, f64), rgb: [f64; 3]) {
        let steps = (y1 - y0).abs().max((x1 - x0).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let y = (y0 + t * (y1 - y0)).round() as i64;
            let x = (x0 + t * (x1 - x0)).round() as i64;
            self.set(y, x, rgb);
            self.set(y + 1, x, rgb);
        }
    }

    fn into_tensor(self) -> Tensor {
        Tensor::new([3, self.h, self.w], self.pixels).expect("sized canvas")
    }
}

/// Precision (vertical) against recall (horizontal), both over `[0, 1]`,
/// one coloured step line per curve.
pub fn pr_curve_image(curves: &[PrCurve], size: usize) -> Tensor {
    let margin = (size / 10).max(2) as f64;
    let span = size as f64 - 2.0 * margin;
    let mut canvas = Canvas::new(size, size);
    let to_px = |r: f64, p: f64| (margin + (1.0 - p) * span, margin + r * span);
    let axis = [0.0; 3];
    canvas.line(to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    canvas.line(to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    for (i, curve) in curves.iter().enumerate() {
        let rgb = PALETTE[i % PALETTE.len()];
        let mut prev = (0.0, curve.points.first().map_or(1.0, |p| p.1));
        for &(r, p) in &curve.points {
            canvas.line(to_px(prev.0, prev.1), to_px(r, prev.1), rgb);
            canvas.line(to_px(r, prev.1), to_px(r, p), rgb);
            prev = (r, p);
        }
    }
    canvas.into_tensor()
}

/// Row-normalized confusion matrix as a grid of `cell`-pixel squares,
/// white for 0 through dark blue for 1. Rows are true classes.
pub fn confusion_image(cm: &ConfusionMatrix, cell: usize) -> Tensor {
    let k = cm.num_classes();
    let mut canvas = Canvas::new(k * cell, k * cell);
    for t in 0..k {
        let support = cm.row_sum(t).max(1) as f64;
        for p in 0..k {
            let v = cm.get(t, p) as f64 / support;
            let rgb = [1.0 - 0.9 * v, 1.0 - 0.7 * v, 1.0 - 0.3 * v];
            for y in t * cell..(t + 1) * cell {
                for x in p * cell..(p + 1) * cell {
                    canvas.set(y as i64, x as i64, rgb);
                }
            }
        }
    }
    canvas.into_tensor()
}

pub fn save_pr_curves(curves: &[PrCurve], path: impl AsRef<Path>) -> Result<()> {
    save_png(&pr_curve_image(curves, 256), path)
}

pub fn save_confusion(cm: &ConfusionMatrix, path: impl AsRef<Path>) -> Result<()> {
    save_png(&confusion_image(cm, 32), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_cells_follow_row_fractions() {
        let cm = ConfusionMatrix::from_indices(vec!["a".into(), "b".into()], &[0, 0, 1], &[0, 1, 1]).unwrap();
        let img = confusion_image(&cm, 4);
        assert_eq!(img.shape(), &[3, 8, 8]);
        // red channel: row 0 is half/half, row 1 is all in column 1
        let red = |y: usize, x: usize| img.values()[y * 8 + x];
        assert!((red(0, 0) - 0.55).abs() < 1e-12);
        assert!((red(0, 4) - 0.55).abs() < 1e-12);
        assert_eq!(red(4, 0), 1.0);
        assert!((red(4, 4) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn curve_pixels_are_drawn() {
        let curve = PrCurve {
            class: "a".into(),
            thresholds: vec![0.9, 0.1],
            points: vec![(0.5, 1.0), (1.0, 0.5)],
        };
        let img = pr_curve_image(&[curve], 64);
        assert_eq!(img.shape(), &[3, 64, 64]);
        assert!(img.values().iter().any(|&v| v < 1.0));
        assert!(img.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
