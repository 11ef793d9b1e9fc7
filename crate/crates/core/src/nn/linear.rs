use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    let (&[rows, features], &[outputs, wf]) = (x, w) else {
        return Err(Error::Rank(format!(
            "linear needs x [B,F] and weights [K,F], got {x:?} and {w:?}"
        )));
    };
    if wf != features || b != [outputs] {
        return Err(Error::Shape(format!(
            "linear shapes do not agree: x {x:?}, weights {w:?}, bias {b:?}"
        )));
    }
    Ok((rows, features, outputs))
}

fn forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, features: usize, outputs: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * outputs];
    for r in 0..rows {
        let xr = &x[r * features..(r + 1) * features];
        for k in 0..outputs {
            let wk = &w[k * features..(k + 1) * features];
            y[r * outputs + k] = b[k] + xr.iter().zip(wk).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

/// `y = x · weightsᵀ + bias` for `x [B,F]`, `weights [K,F]`, `bias [K]`.
pub fn linear(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, features, outputs) = check(x.shape(), weights.shape(), bias.shape())?;
    Tensor::new(
        [rows, outputs],
        forward(x.values(), weights.values(), bias.values(), rows, features, outputs),
    )
}

struct LinearRule {
    rows: usize,
    features: usize,
    outputs: usize,
}

impl Backward for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let (x, w) = (ctx.inputs[0].values(), ctx.inputs[1].values());
        let (f, k) = (self.features, self.outputs);
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; k];
        for r in 0..self.rows {
            for o in 0..k {
                let g = ctx.grad[r * k + o];
                gb[o] += g;
                for i in 0..f {
                    gx[r * f + i] += g * w[o * f + i];
                    gw[o * f + i] += g * x[r * f + i];
                }
            }
        }
        vec![gx, gw, gb]
    }
}

impl Graph {
    pub fn linear(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        for v in [x, weights, bias] {
            self.check(v)?;
        }
        let (rows, features, outputs) =
            check(self.shape(x), self.shape(weights), self.shape(bias))?;
        let y = forward(
            self.value(x).values(),
            self.value(weights).values(),
            self.value(bias).values(),
            rows,
            features,
            outputs,
        );
        let out = Tensor::new([rows, outputs], y)?;
        Ok(self.record(
            "linear",
            &[x, weights, bias],
            out,
            LinearRule {
                rows,
                features,
                outputs,
            },
        ))
    }
}
