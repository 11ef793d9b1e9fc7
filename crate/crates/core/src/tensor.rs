//! Dense row-major `f64` tensors and the eager kernels shared by the
//! differentiable graph.

use std::fmt;

use crate::error::{Error, Result};

/// N-dimensional array of `f64` in row-major order.
///
/// Values are fixed after construction apart from explicit parameter
/// updates through [`Tensor::values_mut`]; the optional gradient slot is
/// written by [`crate::autodiff::Graph::backward`].
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and its flat row-major contents.
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Size(format!(
                "shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, fill: f64) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape,
            values: vec![fill; numel],
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    /// A rank-1 tensor holding one value. Used as the broadcast operand of
    /// [`elementwise`] and as the shape of losses.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    /// Internal constructor for kernels whose output shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value at a multi-index.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.shape.len() {
            return Err(Error::Rank(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::Index(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            flat = flat * d + i;
        }
        Ok(self.values[flat])
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape, self.values.clone()))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.values.len() <= 32 {
            s.field("values", &self.values);
        } else {
            s.field("values", &format_args!("[{} values]", self.values.len()));
        }
        if self.grad.is_some() {
            s.field("grad", &"<set>");
        }
        s.finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("shape must have at least one dimension".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl ElementwiseOp {
    #[inline]
    pub(crate) fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
        }
    }
}

/// `a op b` for identical shapes, or with a one-element `b` broadcast over `a`.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let values = if a.shape == b.shape {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| op.apply(x, y))
            .collect()
    } else if b.is_scalar() {
        let y = b.values[0];
        a.values.iter().map(|&x| op.apply(x, y)).collect()
    } else {
        return Err(Error::Shape(format!(
            "elementwise {op:?} of {:?} and {:?}",
            a.shape, b.shape
        )));
    };
    Ok(Tensor::from_parts(a.shape.clone(), values))
}

/// Product of rank-2 tensors `[m,k]·[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Rank(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.values, &b.values, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out += a·b` on raw row-major buffers.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_extents(&x.shape, axis)?;
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len)
                .map(|k| x.values[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x.values[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    Tensor::from_parts(
        x.shape.clone(),
        x.values.iter().map(|&v| kind.apply(v)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_fill_and_values() {
        let z = Tensor::full([2, 2], 0.0).unwrap();
        assert_eq!(z.values(), &[0.0; 4]);
        assert!(z.grad().is_none());
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0]);
        assert!(matches!(
            Tensor::new([2, 2], vec![1.0, 2.0, 3.0]),
            Err(Error::Size(_))
        ));
        assert!(Tensor::zeros([2, 0]).is_err());
        assert!(Tensor::zeros(Vec::<usize>::new()).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let a = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let two = Tensor::new([3], vec![2.0; 3]).unwrap();
        assert_eq!(
            elementwise(ElementwiseOp::Mul, &a, &two).unwrap().values(),
            &[2.0, 4.0, 6.0]
        );
        let b = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let zero = Tensor::zeros([2]).unwrap();
        assert_eq!(
            elementwise(ElementwiseOp::Add, &b, &zero).unwrap().values(),
            &[1.0, 2.0]
        );
        assert!(matches!(
            elementwise(ElementwiseOp::Add, &b, &a),
            Err(Error::Shape(_))
        ));
        let s = elementwise(ElementwiseOp::Sub, &a, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(s.values(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn matmul_cases() {
        let id = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let row = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().values(), &[11.0]);
        let r = Tensor::zeros([2, 3]).unwrap();
        assert!(matches!(matmul(&r, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::zeros([3]).unwrap(), 0).unwrap();
        for &v in u.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(&Tensor::new([2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(big.values(), &[0.5, 0.5]);
        let e = std::f64::consts::E;
        let s = softmax(&Tensor::new([2], vec![1.0, 0.0]).unwrap(), 0).unwrap();
        assert!((s.values()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.values()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s.values()[0] - 0.7311).abs() < 1e-4);
        assert!(matches!(
            softmax(&Tensor::zeros([2]).unwrap(), 1),
            Err(Error::Axis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for col in 0..3 {
            let total = s.values()[col] + s.values()[3 + col];
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).values(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        let mut prev = 0.0;
        for i in 1..200 {
            let v = Activation::Gelu.apply(i as f64 * 0.05);
            assert!(v > prev);
            prev = v;
        }
    }
}
