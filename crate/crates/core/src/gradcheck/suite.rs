//! Gradient checks for every differentiable op and both block types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, DEFAULT_EPSILON};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::{
    mbconv_block, transformer_block, MbConvParams, NormParams, Padding, PoolKind, TransformerParams,
    EXPANSION_RATIO,
};
use crate::tensor::Tensor;

/// Relative tolerance for smooth ops.
pub const TOLERANCE: f64 = 1e-5;
/// Relative tolerance for GELU, normalization and anything containing them.
pub const RELAXED_TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One op or block, its input shapes, and the tolerance it must meet.
pub struct Case {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub tolerance: f64,
    build: Build,
}

impl Case {
    /// Worst relative error over `points` random inputs in `[-2, 2)`.
    pub fn worst_error(&self, points: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.name.bytes().map(u64::from).sum());
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs: Vec<Tensor> = self.shapes.iter().map(|s| random(&mut rng, s)).collect();
            let check = check_gradients(&self.build, &inputs, DEFAULT_EPSILON)?;
            worst = worst.max(check.max_relative_error);
        }
        Ok(worst)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("sized buffer")
}

/// Weighted-sum readout so every output entry gets a distinct gradient.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn case<F>(name: impl Into<String>, shapes: &[&[usize]], tolerance: f64, build: F) -> Case
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    Case {
        name: name.into(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        tolerance,
        build: Box::new(build),
    }
}

/// Map an op's output through the random readout.
fn op<F>(name: &str, shapes: &[&[usize]], tolerance: f64, seed: u64, f: F) -> Case
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    case(name, shapes, tolerance, move |g, v| {
        let y = f(g, v)?;
        readout(g, y, seed)
    })
}

fn norm_params(v: &[Var]) -> NormParams {
    NormParams {
        scale: v[0],
        shift: v[1],
        running: None,
    }
}

pub fn standard_cases() -> Vec<Case> {
    let (t, r) = (TOLERANCE, RELAXED_TOLERANCE);
    let mut cases = vec![
        op("add", &[&[3, 2], &[3, 2]], t, 1, |g, v| g.add(v[0], v[1])),
        op("sub", &[&[4], &[4]], t, 2, |g, v| g.sub(v[0], v[1])),
        op("mul", &[&[2, 3], &[2, 3]], t, 3, |g, v| g.mul(v[0], v[1])),
        op("mul-broadcast", &[&[5], &[1]], t, 4, |g, v| g.mul(v[0], v[1])),
        op("matmul", &[&[3, 4], &[4, 2]], t, 5, |g, v| g.matmul(v[0], v[1])),
        op("softmax-axis0", &[&[3, 4]], t, 6, |g, v| g.softmax(v[0], 0)),
        op("softmax-axis1", &[&[3, 4]], t, 7, |g, v| g.softmax(v[0], 1)),
        case("mean-reshape-pick", &[&[2, 3]], t, |g, v| {
            let r = g.reshape(v[0], [3, 2])?;
            let sq = g.mul(r, r)?;
            let m = g.mean(sq)?;
            let p = g.pick(r, &[1, 1])?;
            g.add(m, p)
        }),
        op("relu", &[&[10]], t, 8, |g, v| g.relu(v[0])),
        op("gelu", &[&[10]], r, 9, |g, v| g.gelu(v[0])),
    ];
    for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        cases.push(op(
            &format!("depthwise-{pad:?}-s{stride}").to_lowercase(),
            &[&[2, 3, 5, 4], &[3, 3, 3]],
            t,
            10,
            move |g, v| g.depthwise_conv2d(v[0], v[1], pad, stride),
        ));
    }
    cases.extend([
        op("conv2d", &[&[2, 2, 4, 4], &[3, 2, 3, 3]], t, 11, |g, v| {
            g.conv2d(v[0], v[1], Padding::Same, 2)
        }),
        op("pointwise", &[&[2, 3, 3, 2], &[4, 3], &[4]], t, 12, |g, v| {
            g.pointwise_conv(v[0], v[1], Some(v[2]), 1)
        }),
        op("pointwise-strided", &[&[3, 5, 5], &[2, 3]], t, 13, |g, v| {
            g.pointwise_conv(v[0], v[1], None, 2)
        }),
        op("attention", &[&[3, 2, 3]], t, 14, |g, v| g.global_self_attention(v[0])),
        op("attention-batch", &[&[2, 2, 2, 2]], t, 15, |g, v| g.global_self_attention(v[0])),
        op("channel-norm", &[&[3, 2, 2, 3], &[2], &[2]], r, 16, |g, v| {
            Ok(g.channel_norm(v[0], v[1], v[2], 1e-5, None)?.0)
        }),
        op("layer-norm", &[&[2, 4, 2, 2], &[4], &[4]], r, 17, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        op("max-pool", &[&[2, 4, 4]], t, 18, |g, v| g.pool2d(v[0], PoolKind::Max, 2, 2)),
        op("avg-pool", &[&[2, 3, 3]], t, 19, |g, v| g.pool2d(v[0], PoolKind::Avg, 2, 1)),
        op("global-avg-pool", &[&[2, 2, 3, 3]], t, 20, |g, v| {
            g.pool2d(v[0], PoolKind::GlobalAvg, 0, 0)
        }),
        op("linear", &[&[3, 4], &[2, 4], &[2]], t, 21, |g, v| g.linear(v[0], v[1], v[2])),
        case("cross-entropy", &[&[3, 4]], t, |g, v| {
            g.cross_entropy(v[0], &[0, 3, 1], Some(&[1.0, 0.5, 2.0, 1.5]))
        }),
    ]);

    let (c, co) = (2, 3);
    let e = c * EXPANSION_RATIO;
    cases.push(op(
        "mbconv-block",
        &[&[2, c, 4, 4], &[e, c], &[e], &[e], &[e, 3, 3], &[e], &[e], &[co, e], &[co, c]],
        r,
        22,
        |g, v| {
            let p = MbConvParams {
                expand: v[1],
                norm1: norm_params(&v[2..4]),
                depthwise: v[4],
                norm2: norm_params(&v[5..7]),
                project: v[7],
                shortcut: Some(v[8]),
                stride: 2,
            };
            Ok(mbconv_block(g, v[0], &p)?.output)
        },
    ));
    let e = co * EXPANSION_RATIO;
    cases.push(op(
        "transformer-block",
        &[&[c, 4, 4], &[co, c], &[co], &[co], &[co], &[co], &[e, co], &[e], &[co, e], &[co]],
        r,
        23,
        |g, v| {
            let p = TransformerParams {
                downsample: true,
                shortcut: Some(v[1]),
                norm1: norm_params(&v[2..4]),
                norm2: norm_params(&v[4..6]),
                ffn_expand: v[6],
                ffn_expand_bias: v[7],
                ffn_project: v[8],
                ffn_project_bias: v[9],
            };
            Ok(transformer_block(g, v[0], &p)?.output)
        },
    ));
    cases
}
