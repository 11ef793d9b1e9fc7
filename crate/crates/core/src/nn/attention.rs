//! Projection-free global self-attention.
//!
//! Spatial positions of a `[C, H, W]` map form the set `G`; with `x_i` the
//! channel vector at position `i`,
//!
//! ```text
//! A[i, j] = exp(x_i · x_j) / sum_k exp(x_i · x_k)
//! y_i     = sum_j A[i, j] x_j
//! ```
//!
//! There are no learned query/key/value projections, no `1/sqrt(d)` scale
//! and no positional term. Sums over positions are taken over sorted terms,
//! which makes the output exactly equivariant to permutations of `G`.

use super::MapDims;
use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attention weights of one map.
#[derive(Clone, Debug)]
pub struct AttentionContext {
    /// `|G| = H·W`.
    pub positions: usize,
    /// Row-stochastic `[|G|, |G|]` matrix.
    pub matrix: Tensor,
}

/// Summation whose result does not depend on the order of `terms`.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Attention matrix for one channel-major `[C, N]` slab.
fn weights(x: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    let mut scratch = vec![0.0; n];
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            *r = (0..channels).map(|c| x[c * n + i] * x[c * n + j]).sum();
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for r in row.iter_mut() {
            *r = (*r - max).exp();
        }
        scratch.copy_from_slice(row);
        let total = order_free_sum(&mut scratch);
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    a
}

/// `y[c, i] = sum_j A[i, j] x[c, j]` for one slab.
fn mix(x: &[f64], a: &[f64], channels: usize, n: usize, out: &mut [f64]) {
    let mut scratch = vec![0.0; n];
    for c in 0..channels {
        let xc = &x[c * n..(c + 1) * n];
        for i in 0..n {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = a[i * n + j] * xc[j];
            }
            out[c * n + i] = order_free_sum(&mut scratch);
        }
    }
}

fn forward(x: &Tensor) -> Result<(MapDims, Vec<f64>, Vec<f64>)> {
    let d = MapDims::of(x.shape())?;
    let n = d.plane();
    let slab = d.channels * n;
    let mut y = vec![0.0; x.numel()];
    let mut all_a = Vec::with_capacity(d.batch * n * n);
    for b in 0..d.batch {
        let xs = &x.values()[b * slab..(b + 1) * slab];
        let a = weights(xs, d.channels, n);
        mix(xs, &a, d.channels, n, &mut y[b * slab..(b + 1) * slab]);
        all_a.extend_from_slice(&a);
    }
    Ok((d, y, all_a))
}

/// Applies global self-attention to a `[C,H,W]` or `[B,C,H,W]` map.
pub fn global_self_attention(input: &Tensor) -> Result<Tensor> {
    let (_, y, _) = forward(input)?;
    Tensor::new(input.shape(), y)
}

/// The attention matrix of a single `[C,H,W]` map.
pub fn attention_matrix(input: &Tensor) -> Result<AttentionContext> {
    let d = MapDims::of(input.shape())?;
    if d.batch != 1 {
        return Err(Error::Shape(format!(
            "attention_matrix takes one map, got batch of {}",
            d.batch
        )));
    }
    let n = d.plane();
    let a = weights(input.values(), d.channels, n);
    Ok(AttentionContext {
        positions: n,
        matrix: Tensor::new([n, n], a)?,
    })
}

struct AttentionRule {
    dims: MapDims,
    attention: Vec<f64>,
}

impl Backward for AttentionRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let d = self.dims;
        let (ch, n) = (d.channels, d.plane());
        let slab = ch * n;
        let x_all = ctx.inputs[0].values();
        let mut gx_all = vec![0.0; x_all.len()];
        let mut g_a = vec![0.0; n * n];
        for b in 0..d.batch {
            let x = &x_all[b * slab..(b + 1) * slab];
            let gy = &ctx.grad[b * slab..(b + 1) * slab];
            let a = &self.attention[b * n * n..(b + 1) * n * n];
            let gx = &mut gx_all[b * slab..(b + 1) * slab];

            // value path: gx[c, j] += sum_i A[i, j] gy[c, i]
            // and gA[i, j] = sum_c gy[c, i] x[c, j]
            for i in 0..n {
                for j in 0..n {
                    let aij = a[i * n + j];
                    let mut acc = 0.0;
                    for c in 0..ch {
                        gx[c * n + j] += aij * gy[c * n + i];
                        acc += gy[c * n + i] * x[c * n + j];
                    }
                    g_a[i * n + j] = acc;
                }
            }
            // softmax rows, then the symmetric Gram matrix
            for i in 0..n {
                let row = i * n..(i + 1) * n;
                let dot: f64 = a[row.clone()].iter().zip(&g_a[row.clone()]).map(|(p, g)| p * g).sum();
                for j in 0..n {
                    let gs = a[i * n + j] * (g_a[i * n + j] - dot);
                    if gs == 0.0 {
                        continue;
                    }
                    for c in 0..ch {
                        gx[c * n + i] += gs * x[c * n + j];
                        gx[c * n + j] += gs * x[c * n + i];
                    }
                }
            }
        }
        vec![gx_all]
    }
}

impl Graph {
    /// Differentiable [`global_self_attention`].
    pub fn global_self_attention(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (dims, y, attention) = forward(self.value(x))?;
        let out = Tensor::new(self.shape(x), y)?;
        Ok(self.record(
            "global_self_attention",
            &[x],
            out,
            AttentionRule { dims, attention },
        ))
    }
}
