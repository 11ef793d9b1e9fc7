use super::MapDims;
use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-filled border of `(k-1)/2`; output extent is `ceil(H / stride)`.
    Same,
    /// No border; output extent is `(H - k) / stride + 1`.
    Valid,
}

/// One `kH×kW` filter per channel.
#[derive(Clone, Debug)]
pub struct DepthwiseKernel {
    weights: Tensor,
    padding: Padding,
    stride: usize,
}

impl DepthwiseKernel {
    pub fn new(weights: Tensor, padding: Padding, stride: usize) -> Result<Self> {
        let &[_, kh, kw] = weights.shape() else {
            return Err(Error::Rank(format!(
                "depthwise weights must be [C,kH,kW], got {:?}",
                weights.shape()
            )));
        };
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::Shape(format!(
                "same padding needs an odd kernel, got {kh}x{kw}"
            )));
        }
        Ok(DepthwiseKernel {
            weights,
            padding,
            stride,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// Resolved geometry of a (grouped) convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    dims: MapDims,
    out_channels: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(
        dims: MapDims,
        out_channels: usize,
        groups: usize,
        (kh, kw): (usize, usize),
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let (pad_h, pad_w, out_h, out_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Shape(format!(
                        "same padding needs an odd kernel, got {kh}x{kw}"
                    )));
                }
                (
                    (kh - 1) / 2,
                    (kw - 1) / 2,
                    (dims.height - 1) / stride + 1,
                    (dims.width - 1) / stride + 1,
                )
            }
            Padding::Valid => {
                if kh > dims.height || kw > dims.width {
                    return Err(Error::Size(format!(
                        "kernel {kh}x{kw} larger than input {}x{}",
                        dims.height, dims.width
                    )));
                }
                (
                    0,
                    0,
                    (dims.height - kh) / stride + 1,
                    (dims.width - kw) / stride + 1,
                )
            }
        };
        Ok(ConvGeom {
            dims,
            out_channels,
            groups,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h,
            out_w,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        self.dims.shape_with(self.out_channels, self.out_h, self.out_w)
    }

    fn in_per_group(&self) -> usize {
        self.dims.channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Visits every (output index, input index, weight index) triple.
    ///
    /// The weight applied to input tap `t` of the window is `w[k-1-t]`, so the
    /// filter is indexed by the offset from output to input position, as in
    /// `y_i = sum_j w_{i-j} x_j`.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let d = self.dims;
        let (ipg, opg) = (self.in_per_group(), self.out_per_group());
        let plane_in = d.plane();
        let plane_out = self.out_h * self.out_w;
        for b in 0..d.batch {
            for o in 0..self.out_channels {
                let group = o / opg;
                for ci in 0..ipg {
                    let c = group * ipg + ci;
                    let x_base = (b * d.channels + c) * plane_in;
                    let w_base = (o * ipg + ci) * self.kh * self.kw;
                    let y_base = (b * self.out_channels + o) * plane_out;
                    for oy in 0..self.out_h {
                        for ty in 0..self.kh {
                            let iy = (oy * self.stride + ty) as isize - self.pad_h as isize;
                            if iy < 0 || iy >= d.height as isize {
                                continue;
                            }
                            let wy = self.kh - 1 - ty;
                            for ox in 0..self.out_w {
                                for tx in 0..self.kw {
                                    let ix = (ox * self.stride + tx) as isize - self.pad_w as isize;
                                    if ix < 0 || ix >= d.width as isize {
                                        continue;
                                    }
                                    let wx = self.kw - 1 - tx;
                                    visit(
                                        y_base + oy * self.out_w + ox,
                                        x_base + iy as usize * d.width + ix as usize,
                                        w_base + wy * self.kw + wx,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dims.batch * self.out_channels * self.out_h * self.out_w];
        self.for_each_tap(|yi, xi, wi| y[yi] += w[wi] * x[xi]);
        y
    }
}

fn depthwise_geom(x: &[usize], w: &[usize], padding: Padding, stride: usize) -> Result<ConvGeom> {
    let dims = MapDims::of(x)?;
    let &[c, kh, kw] = w else {
        return Err(Error::Rank(format!(
            "depthwise weights must be [C,kH,kW], got {w:?}"
        )));
    };
    if c != dims.channels {
        return Err(Error::Shape(format!(
            "depthwise kernel has {c} channels, input has {}",
            dims.channels
        )));
    }
    ConvGeom::new(dims, c, c, (kh, kw), padding, stride)
}

fn dense_geom(x: &[usize], w: &[usize], padding: Padding, stride: usize) -> Result<ConvGeom> {
    let dims = MapDims::of(x)?;
    let &[co, ci, kh, kw] = w else {
        return Err(Error::Rank(format!(
            "conv weights must be [C_out,C_in,kH,kW], got {w:?}"
        )));
    };
    if ci != dims.channels {
        return Err(Error::Shape(format!(
            "conv weights expect {ci} input channels, input has {}",
            dims.channels
        )));
    }
    ConvGeom::new(dims, co, 1, (kh, kw), padding, stride)
}

/// Per-channel spatial convolution: output channel `c` depends only on input
/// channel `c` and `weights[c]`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &DepthwiseKernel) -> Result<Tensor> {
    let geom = depthwise_geom(
        input.shape(),
        kernel.weights.shape(),
        kernel.padding,
        kernel.stride,
    )?;
    let y = geom.forward(input.values(), kernel.weights.values());
    Tensor::new(geom.out_shape(), y)
}

/// Full convolution mixing all input channels, weights `[C_out, C_in, kH, kW]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, padding: Padding, stride: usize) -> Result<Tensor> {
    let geom = dense_geom(input.shape(), weights.shape(), padding, stride)?;
    let y = geom.forward(input.values(), weights.values());
    Tensor::new(geom.out_shape(), y)
}

/// 1×1 convolution: `y[o, p] = sum_c weights[o, c] · x[c, p]` at every position.
pub fn pointwise_conv(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let geom = PointwiseGeom::new(input.shape(), weights.shape(), None, 1)?;
    Tensor::new(geom.out_shape(), geom.forward(input.values(), weights.values(), None))
}

struct ConvRule {
    geom: ConvGeom,
}

impl Backward for ConvRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let x = ctx.inputs[0].values();
        let w = ctx.inputs[1].values();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        self.geom.for_each_tap(|yi, xi, wi| {
            let g = ctx.grad[yi];
            gx[xi] += g * w[wi];
            gw[wi] += g * x[xi];
        });
        vec![gx, gw]
    }
}

#[derive(Clone, Copy)]
struct PointwiseGeom {
    dims: MapDims,
    out_channels: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl PointwiseGeom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize) -> Result<Self> {
        let dims = MapDims::of(x)?;
        let &[co, ci] = w else {
            return Err(Error::Rank(format!(
                "pointwise weights must be [C_out,C_in], got {w:?}"
            )));
        };
        if ci != dims.channels {
            return Err(Error::Shape(format!(
                "pointwise weights expect {ci} channels, input has {}",
                dims.channels
            )));
        }
        if let Some(b) = bias {
            if b != [co] {
                return Err(Error::Shape(format!("bias {b:?} for {co} output channels")));
            }
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(PointwiseGeom {
            dims,
            out_channels: co,
            stride,
            out_h: (dims.height - 1) / stride + 1,
            out_w: (dims.width - 1) / stride + 1,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        self.dims.shape_with(self.out_channels, self.out_h, self.out_w)
    }

    /// Gathers the strided input sites of batch item `b` as a `[C, P]` matrix.
    fn gather(&self, x: &[f64], b: usize) -> Vec<f64> {
        let d = self.dims;
        if self.stride == 1 {
            let len = d.channels * d.plane();
            return x[b * len..(b + 1) * len].to_vec();
        }
        let p = self.out_h * self.out_w;
        let mut out = vec![0.0; d.channels * p];
        for c in 0..d.channels {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    out[c * p + oy * self.out_w + ox] = x[((b * d.channels + c) * d.height
                        + oy * self.stride)
                        * d.width
                        + ox * self.stride];
                }
            }
        }
        out
    }

    fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let d = self.dims;
        let p = self.out_h * self.out_w;
        let mut y = vec![0.0; d.batch * self.out_channels * p];
        for b in 0..d.batch {
            let xs = self.gather(x, b);
            let out = &mut y[b * self.out_channels * p..(b + 1) * self.out_channels * p];
            crate::tensor::matmul_into(w, &xs, out, self.out_channels, d.channels, p);
            if let Some(bias) = bias {
                for (o, row) in out.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        }
        y
    }
}

struct PointwiseRule {
    geom: PointwiseGeom,
}

impl Backward for PointwiseRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let geom = self.geom;
        let d = geom.dims;
        let (x, w) = (ctx.inputs[0].values(), ctx.inputs[1].values());
        let (co, ci) = (geom.out_channels, d.channels);
        let p = geom.out_h * geom.out_w;
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; co];
        for b in 0..d.batch {
            let xs = geom.gather(x, b);
            let gy = &ctx.grad[b * co * p..(b + 1) * co * p];
            for o in 0..co {
                let grow = &gy[o * p..(o + 1) * p];
                gb[o] += grow.iter().sum::<f64>();
                for c in 0..ci {
                    let xrow = &xs[c * p..(c + 1) * p];
                    gw[o * ci + c] += grow.iter().zip(xrow).map(|(g, v)| g * v).sum::<f64>();
                }
            }
            for c in 0..ci {
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let site = oy * geom.out_w + ox;
                        let acc: f64 = (0..co).map(|o| w[o * ci + c] * gy[o * p + site]).sum();
                        gx[((b * ci + c) * d.height + oy * geom.stride) * d.width
                            + ox * geom.stride] += acc;
                    }
                }
            }
        }
        if ctx.inputs.len() == 3 {
            vec![gx, gw, gb]
        } else {
            vec![gx, gw]
        }
    }
}

impl Graph {
    /// Differentiable [`depthwise_conv2d`] with weights `[C, kH, kW]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        weights: Var,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weights)?;
        let geom = depthwise_geom(self.shape(x), self.shape(weights), padding, stride)?;
        let y = geom.forward(self.value(x).values(), self.value(weights).values());
        let out = Tensor::new(geom.out_shape(), y)?;
        Ok(self.record("depthwise_conv2d", &[x, weights], out, ConvRule { geom }))
    }

    /// Differentiable [`conv2d`] with weights `[C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, weights: Var, padding: Padding, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(weights)?;
        let geom = dense_geom(self.shape(x), self.shape(weights), padding, stride)?;
        let y = geom.forward(self.value(x).values(), self.value(weights).values());
        let out = Tensor::new(geom.out_shape(), y)?;
        Ok(self.record("conv2d", &[x, weights], out, ConvRule { geom }))
    }

    /// Differentiable 1×1 convolution with optional per-output-channel bias.
    /// A stride above 1 samples every `stride`-th site, matching the extent of
    /// a same-padded strided convolution.
    pub fn pointwise_conv(
        &mut self,
        x: Var,
        weights: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weights)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let geom = PointwiseGeom::new(
            self.shape(x),
            self.shape(weights),
            bias.map(|b| self.shape(b)),
            stride,
        )?;
        let y = geom.forward(
            self.value(x).values(),
            self.value(weights).values(),
            bias.map(|b| self.value(b).values()),
        );
        let out = Tensor::new(geom.out_shape(), y)?;
        let rule = PointwiseRule { geom };
        Ok(match bias {
            Some(b) => self.record("pointwise_conv", &[x, weights, b], out, rule),
            None => self.record("pointwise_conv", &[x, weights], out, rule),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn scaling_kernel() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = DepthwiseKernel::new(t(&[1, 1, 1], &[2.0]), Padding::Same, 1).unwrap();
        assert_eq!(depthwise_conv2d(&x, &k).unwrap().values(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn identity_kernel_same_padding() {
        let x = t(&[2, 3, 3], &(0..18).map(|v| v as f64 - 4.0).collect::<Vec<_>>());
        let mut w = vec![0.0; 18];
        w[4] = 1.0;
        w[13] = 1.0;
        let k = DepthwiseKernel::new(t(&[2, 3, 3], &w), Padding::Same, 1).unwrap();
        assert_eq!(depthwise_conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn all_ones_valid() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = DepthwiseKernel::new(t(&[1, 2, 2], &[1.0; 4]), Padding::Valid, 1).unwrap();
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.values(), &[10.0]);
    }

    #[test]
    fn filter_is_indexed_by_offset() {
        // A kernel whose only tap is at offset (0, +1) from the centre, i.e.
        // w_{i-j} with i - j = (0, 1): y_i picks up x at j = i - (0, 1).
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let k = DepthwiseKernel::new(t(&[1, 1, 3], &[0.0, 0.0, 1.0]), Padding::Same, 1).unwrap();
        assert_eq!(depthwise_conv2d(&x, &k).unwrap().values(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros([2, 3, 3]).unwrap();
        let k = DepthwiseKernel::new(Tensor::zeros([3, 3, 3]).unwrap(), Padding::Same, 1).unwrap();
        assert!(matches!(depthwise_conv2d(&x, &k), Err(Error::Shape(_))));
        let small = Tensor::zeros([1, 2, 2]).unwrap();
        let big = DepthwiseKernel::new(Tensor::zeros([1, 3, 3]).unwrap(), Padding::Valid, 1).unwrap();
        assert!(matches!(depthwise_conv2d(&small, &big), Err(Error::Size(_))));
        assert!(DepthwiseKernel::new(Tensor::zeros([1, 2, 2]).unwrap(), Padding::Same, 1).is_err());
    }

    #[test]
    fn strided_same_extent() {
        let x = Tensor::zeros([4, 8, 8]).unwrap();
        let k = DepthwiseKernel::new(Tensor::zeros([4, 3, 3]).unwrap(), Padding::Same, 2).unwrap();
        assert_eq!(depthwise_conv2d(&x, &k).unwrap().shape(), &[4, 4, 4]);
        let odd = Tensor::zeros([1, 5, 7]).unwrap();
        let k = DepthwiseKernel::new(Tensor::zeros([1, 3, 3]).unwrap(), Padding::Same, 2).unwrap();
        assert_eq!(depthwise_conv2d(&odd, &k).unwrap().shape(), &[1, 3, 4]);
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pointwise_conv(&x, &id).unwrap(), x);
        let sum = pointwise_conv(&x, &t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(sum.shape(), &[1, 1, 2]);
        assert_eq!(sum.values(), &[4.0, 6.0]);
        assert!(matches!(
            pointwise_conv(&x, &t(&[1, 3], &[1.0; 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dense_conv_single_channel_matches_depthwise() {
        let x = t(&[1, 3, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0, 2.0, 2.0, 1.0]);
        let w: Vec<f64> = (0..9).map(|v| v as f64 * 0.25 - 1.0).collect();
        let dense = conv2d(&x, &t(&[1, 1, 3, 3], &w), Padding::Same, 1).unwrap();
        let k = DepthwiseKernel::new(t(&[1, 3, 3], &w), Padding::Same, 1).unwrap();
        assert_eq!(dense.values(), depthwise_conv2d(&x, &k).unwrap().values());
    }

    #[test]
    fn batched_input_keeps_rank() {
        let x = Tensor::full([2, 3, 4, 4], 1.0).unwrap();
        let k = DepthwiseKernel::new(Tensor::full([3, 3, 3], 1.0).unwrap(), Padding::Same, 1).unwrap();
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        // corner sees a 2x2 neighbourhood, interior the full 3x3
        assert_eq!(y.values()[0], 4.0);
        assert_eq!(y.values()[5], 9.0);
    }
}
