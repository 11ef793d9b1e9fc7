use super::MapDims;
use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel, over batch and spatial positions.
    ChannelStat,
    /// Per position, over its channel vector.
    LayerStat,
}

/// Per-channel mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward `batch` with weight `momentum`.
    pub fn update(&mut self, batch: &RunningStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

fn check_affine(scale: &Tensor, shift: &Tensor, extent: usize) -> Result<()> {
    if scale.shape() != [extent] || shift.shape() != [extent] {
        return Err(Error::Shape(format!(
            "scale {:?} / shift {:?} must both be [{extent}]",
            scale.shape(),
            shift.shape()
        )));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    Ok(())
}

/// Batch statistics of a map, per channel.
fn channel_stats(x: &[f64], d: MapDims) -> RunningStats {
    let plane = d.plane();
    let count = (d.batch * plane) as f64;
    let mut mean = vec![0.0; d.channels];
    let mut var = vec![0.0; d.channels];
    for c in 0..d.channels {
        let slices = (0..d.batch).map(|b| &x[(b * d.channels + c) * plane..][..plane]);
        let m = slices.clone().flatten().sum::<f64>() / count;
        let v = slices.flatten().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean[c] = m;
        var[c] = v;
    }
    RunningStats { mean, var }
}

/// Normalized values and `1/sqrt(var + eps)` per normalization group.
struct Normalized {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn channel_forward(x: &[f64], d: MapDims, stats: &RunningStats, eps: f64) -> Normalized {
    let plane = d.plane();
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for b in 0..d.batch {
        for c in 0..d.channels {
            let base = (b * d.channels + c) * plane;
            for p in 0..plane {
                xhat[base + p] = (x[base + p] - stats.mean[c]) * inv_std[c];
            }
        }
    }
    Normalized { xhat, inv_std }
}

fn layer_forward(x: &[f64], d: MapDims, eps: f64) -> Normalized {
    let plane = d.plane();
    let ch = d.channels as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; d.batch * plane];
    for b in 0..d.batch {
        let base = b * d.channels * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let mean = (0..d.channels).map(|c| x[at(c)]).sum::<f64>() / ch;
            let var = (0..d.channels)
                .map(|c| (x[at(c)] - mean) * (x[at(c)] - mean))
                .sum::<f64>()
                / ch;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[b * plane + p] = inv;
            for c in 0..d.channels {
                xhat[at(c)] = (x[at(c)] - mean) * inv;
            }
        }
    }
    Normalized { xhat, inv_std }
}

fn affine(xhat: &[f64], d: MapDims, scale: &[f64], shift: &[f64]) -> Vec<f64> {
    let plane = d.plane();
    let mut y = vec![0.0; xhat.len()];
    for b in 0..d.batch {
        for c in 0..d.channels {
            let base = (b * d.channels + c) * plane;
            for p in 0..plane {
                y[base + p] = scale[c] * xhat[base + p] + shift[c];
            }
        }
    }
    y
}

/// Normalizes a feature map, then applies `scale · x̂ + shift` per channel.
///
/// `ChannelStat` uses the statistics of `input` itself (training behaviour).
pub fn normalize(
    input: &Tensor,
    kind: NormKind,
    scale: &Tensor,
    shift: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    check_eps(epsilon)?;
    let d = MapDims::of(input.shape())?;
    check_affine(scale, shift, d.channels)?;
    let norm = match kind {
        NormKind::ChannelStat => channel_forward(input.values(), d, &channel_stats(input.values(), d), epsilon),
        NormKind::LayerStat => layer_forward(input.values(), d, epsilon),
    };
    let y = affine(&norm.xhat, d, scale.values(), shift.values());
    Tensor::new(input.shape(), y)
}

struct NormRule {
    dims: MapDims,
    kind: NormKind,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Statistics were taken from the input, so they carry gradient.
    batch_stats: bool,
}

impl Backward for NormRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let d = self.dims;
        let plane = d.plane();
        let scale = ctx.inputs[1].values();
        let g = ctx.grad;
        let mut gx = vec![0.0; g.len()];
        let mut gscale = vec![0.0; d.channels];
        let mut gshift = vec![0.0; d.channels];
        for b in 0..d.batch {
            for c in 0..d.channels {
                let base = (b * d.channels + c) * plane;
                for p in 0..plane {
                    gscale[c] += g[base + p] * self.xhat[base + p];
                    gshift[c] += g[base + p];
                }
            }
        }
        match self.kind {
            NormKind::ChannelStat => {
                let count = (d.batch * plane) as f64;
                for c in 0..d.channels {
                    let k = scale[c] * self.inv_std[c];
                    let (mean_g, mean_gx) = if self.batch_stats {
                        (gshift[c] / count, gscale[c] / count)
                    } else {
                        (0.0, 0.0)
                    };
                    for b in 0..d.batch {
                        let base = (b * d.channels + c) * plane;
                        for p in 0..plane {
                            let i = base + p;
                            gx[i] = k * (g[i] - mean_g - self.xhat[i] * mean_gx);
                        }
                    }
                }
            }
            NormKind::LayerStat => {
                let ch = d.channels as f64;
                for b in 0..d.batch {
                    let base = b * d.channels * plane;
                    for p in 0..plane {
                        let at = |c: usize| base + c * plane + p;
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for c in 0..d.channels {
                            let gh = g[at(c)] * scale[c];
                            mean_g += gh;
                            mean_gx += gh * self.xhat[at(c)];
                        }
                        mean_g /= ch;
                        mean_gx /= ch;
                        let inv = self.inv_std[b * plane + p];
                        for c in 0..d.channels {
                            let gh = g[at(c)] * scale[c];
                            gx[at(c)] = inv * (gh - mean_g - self.xhat[at(c)] * mean_gx);
                        }
                    }
                }
            }
        }
        vec![gx, gscale, gshift]
    }
}

impl Graph {
    /// Channel-statistic normalization.
    ///
    /// With `running = None` the batch statistics are used and returned so the
    /// caller can fold them into its running estimate; otherwise the supplied
    /// statistics are applied as constants.
    pub fn channel_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        epsilon: f64,
        running: Option<&RunningStats>,
    ) -> Result<(Var, Option<RunningStats>)> {
        for v in [x, scale, shift] {
            self.check(v)?;
        }
        check_eps(epsilon)?;
        let d = MapDims::of(self.shape(x))?;
        check_affine(self.value(scale), self.value(shift), d.channels)?;
        let xv = self.value(x).values();
        let (stats, batch) = match running {
            Some(r) => {
                if r.mean.len() != d.channels || r.var.len() != d.channels {
                    return Err(Error::Shape("running statistics do not match channels".into()));
                }
                (r.clone(), false)
            }
            None => (channel_stats(xv, d), true),
        };
        let norm = channel_forward(xv, d, &stats, epsilon);
        let y = affine(
            &norm.xhat,
            d,
            self.value(scale).values(),
            self.value(shift).values(),
        );
        let out = Tensor::new(self.shape(x), y)?;
        let rule = NormRule {
            dims: d,
            kind: NormKind::ChannelStat,
            xhat: norm.xhat,
            inv_std: norm.inv_std,
            batch_stats: batch,
        };
        let var = self.record("channel_norm", &[x, scale, shift], out, rule);
        Ok((var, batch.then_some(stats)))
    }

    /// Layer-statistic normalization over each position's channel vector.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, epsilon: f64) -> Result<Var> {
        for v in [x, scale, shift] {
            self.check(v)?;
        }
        check_eps(epsilon)?;
        let d = MapDims::of(self.shape(x))?;
        check_affine(self.value(scale), self.value(shift), d.channels)?;
        let norm = layer_forward(self.value(x).values(), d, epsilon);
        let y = affine(
            &norm.xhat,
            d,
            self.value(scale).values(),
            self.value(shift).values(),
        );
        let out = Tensor::new(self.shape(x), y)?;
        let rule = NormRule {
            dims: d,
            kind: NormKind::LayerStat,
            xhat: norm.xhat,
            inv_std: norm.inv_std,
            batch_stats: true,
        };
        Ok(self.record("layer_norm", &[x, scale, shift], out, rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full([2, 3, 3], 4.2).unwrap();
        let ones = Tensor::full([2], 1.0).unwrap();
        let zeros = Tensor::zeros([2]).unwrap();
        for kind in [NormKind::ChannelStat, NormKind::LayerStat] {
            let y = normalize(&x, kind, &ones, &zeros, DEFAULT_NORM_EPSILON).unwrap();
            assert!(y.values().iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn unit_variance_layer_stat() {
        let x = t(&[2, 1, 1], &[-1.0, 1.0]);
        let y = normalize(&x, NormKind::LayerStat, &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1e-5)
            .unwrap();
        assert!((y.values()[0] + 1.0).abs() < 1e-5);
        assert!((y.values()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_scale_gives_shift() {
        let x = t(&[2, 1, 3], &[1.0, 5.0, -2.0, 0.0, 3.0, 9.0]);
        let shift = t(&[2], &[0.5, -1.5]);
        for kind in [NormKind::ChannelStat, NormKind::LayerStat] {
            let y = normalize(&x, kind, &Tensor::zeros([2]).unwrap(), &shift, 1e-5).unwrap();
            assert_eq!(y.values(), &[0.5, 0.5, 0.5, -1.5, -1.5, -1.5]);
        }
    }

    #[test]
    fn parameter_length_mismatch() {
        let x = Tensor::zeros([2, 2, 2]).unwrap();
        let three = Tensor::zeros([3]).unwrap();
        assert!(matches!(
            normalize(&x, NormKind::ChannelStat, &three, &three, 1e-5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn channel_stats_span_batch() {
        let x = t(&[2, 1, 1, 2], &[0.0, 2.0, 4.0, 6.0]);
        let s = channel_stats(x.values(), MapDims::of(x.shape()).unwrap());
        assert_eq!(s.mean, vec![3.0]);
        assert_eq!(s.var, vec![5.0]);
    }

    #[test]
    fn running_stats_in_graph() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2], &[3.0, 5.0]));
        let scale = g.constant(t(&[1], &[2.0]));
        let shift = g.constant(t(&[1], &[1.0]));
        let stats = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - 1e-5],
        };
        let (y, batch) = g.channel_norm(x, scale, shift, 1e-5, Some(&stats)).unwrap();
        assert!(batch.is_none());
        let v = g.value(y).values();
        assert!((v[0] - 3.0).abs() < 1e-12);
        assert!((v[1] - 5.0).abs() < 1e-12);

        let mut r = RunningStats::identity(1);
        r.update(&RunningStats { mean: vec![10.0], var: vec![3.0] }, 0.1);
        assert!((r.mean[0] - 1.0).abs() < 1e-12);
        assert!((r.var[0] - 1.2).abs() < 1e-12);
    }
}
