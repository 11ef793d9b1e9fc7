//! Grad-CAM relevance maps on the output of the last MBConv block.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Graph;
use crate::data::{encode_png, resize_bilinear};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, StageKind};
use crate::tensor::Tensor;

/// Blend weight of the heatmap colour over the image.
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamMap {
    /// `[h, w]`, non-negative; the maximum is 1 unless the map is all zero.
    pub heatmap: Tensor,
    pub target: usize,
    /// Name of the hooked block, e.g. `stage1.block1`.
    pub layer: String,
}

impl GradCamMap {
    pub fn height(&self) -> usize {
        self.heatmap.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.heatmap.shape()[1]
    }

    /// Relevance-weighted centroid `(row, col)`, or `None` for an all-zero map.
    pub fn mass_center(&self) -> Option<(f64, f64)> {
        let w = self.width();
        let (mut total, mut cy, mut cx) = (0.0, 0.0, 0.0);
        for (i, &v) in self.heatmap.values().iter().enumerate() {
            total += v;
            cy += v * (i / w) as f64;
            cx += v * (i % w) as f64;
        }
        (total > 0.0).then(|| (cy / total, cx / total))
    }

    /// CSV with header `row,col,value`.
    pub fn to_csv(&self) -> String {
        let w = self.width();
        let mut out = String::from("row,col,value\n");
        for (i, v) in self.heatmap.values().iter().enumerate() {
            let _ = writeln!(out, "{},{},{v:.6}", i / w, i % w);
        }
        out
    }
}

fn hooked_layer(model: &Model) -> Result<String> {
    let stages = &model.config().stages;
    let i = stages
        .iter()
        .rposition(|s| s.kind == StageKind::MbConv)
        .ok_or_else(|| Error::Structure("model has no MBConv stage to explain".into()))?;
    Ok(format!("stage{i}.block{}", stages[i].blocks - 1))
}

/// Explains the `target` logit for one `[C, H, W]` image.
///
/// With `A` the hooked map `[K, h, w]` and `α_k` the spatial mean of
/// `∂ logit / ∂ A_k`, the map is `relu(Σ_k α_k A_k)` scaled to a maximum of 1.
pub fn compute_gradcam(model: &Model, image: &Tensor, target: usize) -> Result<GradCamMap> {
    let layer = hooked_layer(model)?;
    if target >= model.num_classes() {
        return Err(Error::Index(format!(
            "class {target} outside 0..{}",
            model.num_classes()
        )));
    }
    if image.rank() != 3 {
        return Err(Error::Shape(format!(
            "Grad-CAM explains one [C,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let mut g = Graph::new();
    let pass = model.forward(&mut g, image, Mode::Eval)?;
    let hook = pass
        .hook
        .ok_or_else(|| Error::Structure("forward pass exposed no hook".into()))?;
    let score = g.pick(pass.logits, &[0, target])?;
    let grads = g.backward(score)?;
    let grad = grads.get(hook);
    let acts = g.value(hook);
    let &[_, k, h, w] = acts.shape() else {
        return Err(Error::Structure(format!("hooked map has shape {:?}", acts.shape())));
    };
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for c in 0..k {
        let range = c * plane..(c + 1) * plane;
        let alpha = grad.values()[range.clone()].iter().sum::<f64>() / plane as f64;
        for (m, a) in cam.iter_mut().zip(&acts.values()[range]) {
            *m += alpha * a;
        }
    }
    let mut max = 0.0f64;
    for v in cam.iter_mut() {
        *v = v.max(0.0);
        max = max.max(*v);
    }
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    Ok(GradCamMap {
        heatmap: Tensor::new([h, w], cam)?,
        target,
        layer,
    })
}

/// Colour of relevance `v ∈ [0, 1]`: blue at 0 through purple to red at 1.
pub fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Upsamples the heatmap to the image size and blends its colour over the
/// image at [`OVERLAY_ALPHA`].
pub fn overlay(map: &GradCamMap, image: &Tensor) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected a [3,H,W] image, got {:?}", image.shape())));
    };
    let flat = map.heatmap.reshape([1, map.height(), map.width()])?;
    let up = resize_bilinear(&flat, h, w)?;
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for (p, &v) in up.values().iter().enumerate() {
        let color = ramp(v);
        for c in 0..3 {
            let i = c * plane + p;
            out[i] = (1.0 - OVERLAY_ALPHA) * image.values()[i] + OVERLAY_ALPHA * color[c];
        }
    }
    Tensor::new([3, h, w], out)
}

/// Writes [`overlay`] as a PNG.
pub fn render_overlay(map: &GradCamMap, image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(&overlay(map, image)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
