//! Central-difference gradient oracle, independent of the backward rules.

mod suite;

pub use suite::{standard_cases, Case};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `(f(x + εe_i) - f(x - εe_i)) / 2ε` for every coordinate `i`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, epsilon: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = x.clone();
    probe.clear_grad();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + epsilon;
        let up = scalar_of(f(&probe)?)?;
        probe.values_mut()[i] = orig - epsilon;
        let down = scalar_of(f(&probe)?)?;
        probe.values_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * epsilon);
    }
    Tensor::new(x.shape(), out)
}

fn scalar_of(t: Tensor) -> Result<f64> {
    if !t.is_scalar() {
        return Err(Error::Rank(format!(
            "function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.values()[0])
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.values().iter().zip(b.values()).map(|(x, y)| x - y));
    let scale = norm(&mut a.values().iter().copied()).max(norm(&mut b.values().iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Outcome of comparing reverse-mode and finite-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Worst relative error over all inputs.
    pub max_relative_error: f64,
}

/// Compares backward against central differences for every input of a
/// scalar-valued graph function.
///
/// `build` is called once with all inputs registered as parameters for the
/// reverse-mode pass, then repeatedly with constants for the numeric pass.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let g = finite_difference_gradient(
            |probe| {
                let mut graph = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| graph.constant(if i == which { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut graph, &vars)?;
                Ok(graph.value(out).clone())
            },
            &inputs[which],
            epsilon,
        )?;
        numeric.push(g);
    }
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_relative_error,
    })
}
