use super::MapDims;
use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    /// Mean over the whole plane; window and stride are ignored.
    GlobalAvg,
}

#[derive(Clone, Copy)]
struct PoolGeom {
    dims: MapDims,
    kind: PoolKind,
    window: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl PoolGeom {
    fn new(shape: &[usize], kind: PoolKind, window: usize, stride: usize) -> Result<Self> {
        let dims = MapDims::of(shape)?;
        if kind == PoolKind::GlobalAvg {
            return Ok(PoolGeom {
                dims,
                kind,
                window: 0,
                stride: 1,
                out_h: 1,
                out_w: 1,
            });
        }
        if window == 0 || stride == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        if window > dims.height || window > dims.width {
            return Err(Error::Size(format!(
                "pool window {window} exceeds input {}x{}",
                dims.height, dims.width
            )));
        }
        Ok(PoolGeom {
            dims,
            kind,
            window,
            stride,
            out_h: (dims.height - window) / stride + 1,
            out_w: (dims.width - window) / stride + 1,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        self.dims.shape_with(self.dims.channels, self.out_h, self.out_w)
    }

    /// Output values plus, for max pooling, the input index of each maximum.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let d = self.dims;
        let plane = d.plane();
        let maps = d.batch * d.channels;
        if self.kind == PoolKind::GlobalAvg {
            let y = (0..maps)
                .map(|m| x[m * plane..(m + 1) * plane].iter().sum::<f64>() / plane as f64)
                .collect();
            return (y, Vec::new());
        }
        let out_plane = self.out_h * self.out_w;
        let mut y = vec![0.0; maps * out_plane];
        let mut argmax = Vec::new();
        if self.kind == PoolKind::Max {
            argmax = vec![0; y.len()];
        }
        let area = (self.window * self.window) as f64;
        for m in 0..maps {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let o = m * out_plane + oy * self.out_w + ox;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut total = 0.0;
                    for ky in 0..self.window {
                        for kx in 0..self.window {
                            let i = m * plane
                                + (oy * self.stride + ky) * d.width
                                + ox * self.stride
                                + kx;
                            total += x[i];
                            if x[i] > best {
                                best = x[i];
                                best_at = i;
                            }
                        }
                    }
                    match self.kind {
                        PoolKind::Max => {
                            y[o] = best;
                            argmax[o] = best_at;
                        }
                        _ => y[o] = total / area,
                    }
                }
            }
        }
        (y, argmax)
    }
}

/// Max, average, or global-average pooling without padding.
pub fn pool2d(input: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    let geom = PoolGeom::new(input.shape(), kind, window, stride)?;
    let (y, _) = geom.forward(input.values());
    Tensor::new(geom.out_shape(), y)
}

struct PoolRule {
    geom: PoolGeom,
    argmax: Vec<usize>,
}

impl Backward for PoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let geom = self.geom;
        let d = geom.dims;
        let plane = d.plane();
        let mut gx = vec![0.0; ctx.inputs[0].numel()];
        match geom.kind {
            PoolKind::Max => {
                for (o, &i) in self.argmax.iter().enumerate() {
                    gx[i] += ctx.grad[o];
                }
            }
            PoolKind::GlobalAvg => {
                for (m, &g) in ctx.grad.iter().enumerate() {
                    let share = g / plane as f64;
                    gx[m * plane..(m + 1) * plane].iter_mut().for_each(|v| *v = share);
                }
            }
            PoolKind::Avg => {
                let out_plane = geom.out_h * geom.out_w;
                let area = (geom.window * geom.window) as f64;
                for m in 0..d.batch * d.channels {
                    for oy in 0..geom.out_h {
                        for ox in 0..geom.out_w {
                            let share = ctx.grad[m * out_plane + oy * geom.out_w + ox] / area;
                            for ky in 0..geom.window {
                                for kx in 0..geom.window {
                                    gx[m * plane
                                        + (oy * geom.stride + ky) * d.width
                                        + ox * geom.stride
                                        + kx] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![gx]
    }
}

impl Graph {
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let geom = PoolGeom::new(self.shape(x), kind, window, stride)?;
        let (y, argmax) = geom.forward(self.value(x).values());
        let out = Tensor::new(geom.out_shape(), y)?;
        Ok(self.record("pool2d", &[x], out, PoolRule { geom, argmax }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_avg_and_max() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = pool2d(&x, PoolKind::GlobalAvg, 0, 0).unwrap();
        assert_eq!(g.shape(), &[1, 1, 1]);
        assert_eq!(g.values(), &[2.5]);
        assert_eq!(pool2d(&x, PoolKind::Max, 2, 2).unwrap().values(), &[4.0]);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::zeros([1, 2, 2]).unwrap();
        assert!(matches!(pool2d(&x, PoolKind::Max, 3, 1), Err(Error::Size(_))));
    }

    #[test]
    fn avg_sliding_window_on_ramp() {
        let x = Tensor::new([1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let y = pool2d(&x, PoolKind::Avg, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // independent oracle: explicit window sums
        let v = x.values();
        let mut expect = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let s = v[oy * 3 + ox] + v[oy * 3 + ox + 1] + v[(oy + 1) * 3 + ox] + v[(oy + 1) * 3 + ox + 1];
                expect.push(s / 4.0);
            }
        }
        assert_eq!(y.values(), expect.as_slice());
        assert_eq!(y.values(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
