//! Eagerly recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation
//! computes its value immediately and, when any input participates in
//! differentiation, appends a node holding the rule that maps the output
//! gradient back onto its inputs. Nodes are only ever appended, so
//! insertion order is a topological order and the graph is acyclic.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, ElementwiseOp, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Values a backward rule may read.
pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
}

/// Local derivative of one recorded operation.
///
/// Returns one gradient buffer per input, each the length of that input.
pub(crate) trait Backward: Send + Sync {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>>;
}

struct Node {
    tag: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Ordered list of recorded operations.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor that gradients should flow to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push("param", value, Vec::new(), None, true)
    }

    /// Registers a tensor that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, Vec::new(), None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.graph, self.id, "variable belongs to another graph");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn tag(&self, var: Var) -> &'static str {
        self.nodes[var.index].tag
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    /// Input node indices of `var`, for inspecting the recorded structure.
    pub fn inputs(&self, var: Var) -> Vec<usize> {
        self.nodes[var.index].inputs.clone()
    }

    fn push(
        &mut self,
        tag: &'static str,
        value: Tensor,
        inputs: Vec<usize>,
        rule: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            tag,
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::Graph(
                "variable does not belong to this graph".into(),
            ));
        }
        Ok(())
    }

    /// Appends the result of an operation. The backward rule is dropped when
    /// no input needs a gradient.
    pub(crate) fn record(
        &mut self,
        tag: &'static str,
        inputs: &[Var],
        value: Tensor,
        rule: impl Backward + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let rule: Option<Box<dyn Backward>> = if requires_grad {
            Some(Box::new(rule))
        } else {
            None
        };
        let inputs = inputs.iter().map(|v| v.index).collect();
        self.push(tag, value, inputs, rule, requires_grad)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = tensor::elementwise(op, self.value(a), self.value(b))?;
        let broadcast = self.value(a).shape() != self.value(b).shape();
        Ok(self.record("elementwise", &[a, b], out, ElementwiseRule { op, broadcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    /// Multiplies by a constant factor.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(factor));
        self.mul(x, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record("matmul", &[a, b], out, MatmulRule))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.record("softmax", &[x], out, SoftmaxRule { axis }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.check(x)?;
        let out = tensor::activation(self.value(x), kind);
        Ok(self.record("activation", &[x], out, ActivationRule { kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.record("sum", &[x], out, FillRule { factor: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).numel() as f64;
        let out = Tensor::scalar(self.value(x).sum() / n);
        Ok(self.record("mean", &[x], out, FillRule { factor: 1.0 / n }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshape(shape)?;
        Ok(self.record("reshape", &[x], out, IdentityRule))
    }

    /// Selects one entry (by multi-index) as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let v = t.get(index)?;
        let flat = index
            .iter()
            .zip(t.shape())
            .fold(0, |acc, (&i, &d)| acc * d + i);
        Ok(self.record("pick", &[x], Tensor::scalar(v), PickRule { flat }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node reachable backwards from `loss` receives
    /// `d loss / d node`; the gradient slot of each participating node's
    /// tensor is populated as well. Fan-out accumulates additively.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let root = loss.index;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::Graph(
                "loss is not connected to any differentiable input".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for index in (0..=root).rev() {
            let Some(grad) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if let Some(rule) = &node.rule {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                    output: &node.value,
                    grad: &grad,
                };
                let input_grads = rule.backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.tag);
                for (&input, g) in node.inputs.iter().zip(input_grads) {
                    if !self.nodes[input].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.len(), self.nodes[input].value.numel(), "{}", node.tag);
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[index] = Some(grad);
        }

        for (node, grad) in self.nodes.iter_mut().zip(&grads) {
            if let Some(g) = grad {
                node.value.set_grad(g.clone())?;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes,
        })
    }
}

/// Result of [`Graph::backward`]: one gradient per node.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zero when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        assert_eq!(var.graph, self.graph, "variable belongs to another graph");
        let shape = self.shapes[var.index].clone();
        match &self.grads[var.index] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.index].is_some()
    }
}

struct ElementwiseRule {
    op: ElementwiseOp,
    broadcast: bool,
}

impl Backward for ElementwiseRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let a = ctx.inputs[0].values();
        let b = ctx.inputs[1].values();
        let g = ctx.grad;
        let b_at = |i: usize| if self.broadcast { b[0] } else { b[i] };
        let (ga, gb_full): (Vec<f64>, Vec<f64>) = match self.op {
            ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
            ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            ElementwiseOp::Mul => (
                g.iter().enumerate().map(|(i, v)| v * b_at(i)).collect(),
                g.iter().zip(a).map(|(v, x)| v * x).collect(),
            ),
        };
        let gb = if self.broadcast {
            vec![gb_full.iter().sum()]
        } else {
            gb_full
        };
        vec![ga, gb]
    }
}

struct MatmulRule;

impl Backward for MatmulRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let g = ctx.grad;
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            for j in 0..n {
                let gv = g[i * n + j];
                if gv == 0.0 {
                    continue;
                }
                for p in 0..k {
                    ga[i * k + p] += gv * b.values()[p * n + j];
                    gb[p * n + j] += gv * a.values()[i * k + p];
                }
            }
        }
        vec![ga, gb]
    }
}

struct SoftmaxRule {
    axis: usize,
}

impl Backward for SoftmaxRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let y = ctx.output.values();
        let (outer, len, inner) =
            tensor::axis_extents(ctx.output.shape(), self.axis).expect("axis checked on forward");
        let mut gx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let dot: f64 = (0..len).map(|k| ctx.grad[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    gx[at(k)] = y[at(k)] * (ctx.grad[at(k)] - dot);
                }
            }
        }
        vec![gx]
    }
}

struct ActivationRule {
    kind: Activation,
}

impl Backward for ActivationRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        vec![ctx.inputs[0]
            .values()
            .iter()
            .zip(ctx.grad)
            .map(|(&x, &g)| g * self.kind.derivative(x))
            .collect()]
    }
}

/// Broadcasts a scalar output gradient (times `factor`) to every input entry.
struct FillRule {
    factor: f64,
}

impl Backward for FillRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        vec![vec![ctx.grad[0] * self.factor; ctx.inputs[0].numel()]]
    }
}

struct IdentityRule;

impl Backward for IdentityRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        vec![ctx.grad.to_vec()]
    }
}

struct PickRule {
    flat: usize,
}

impl Backward for PickRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let mut g = vec![0.0; ctx.inputs[0].numel()];
        g[self.flat] = ctx.grad[0];
        vec![g]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).values(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.value(x).grad(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).values(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.5, -1.0, 2.0, 3.0]));
        let a = g.sum(x).unwrap();
        let b = g.sum(x).unwrap();
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).values(), &[2.0; 4]);
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.param(t(&[2], &[3.0, 4.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).values(), &[0.0, 0.0]);
        assert!(!grads.reached(y));
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Rank(_))));

        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));

        let mut other = Graph::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn relu_gradient_at_two() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).values(), &[1.0]);
    }

    #[test]
    fn constants_record_no_rule() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let d = g.relu(c).unwrap();
        assert!(!g.requires_grad(d));
        assert_eq!(g.inputs(d), vec![c.index()]);
    }
}
