//! Define-by-run reverse-mode graph over batched 2-D arrays.
//!
//! Every node holds an `Array2<f64>`. Batched quantities are `(1, B)` rows,
//! broadcast scalars are `(1, 1)` and network activations are `(width, B)`.
//! Binary arithmetic broadcasts any unit axis against the other operand; the
//! backward pass sums gradients back over broadcast axes.

use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

/// Handle to a batched value recorded on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchedValue(pub(crate) usize);

impl BatchedValue {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Debug for BatchedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Elementwise functions with a closed-form first derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    Abs,
    Relu,
    /// Heaviside step (1 for x > 0). Derivative taken as zero.
    Step,
    /// Sign function. Derivative taken as zero.
    Sign,
    /// Unit step that includes zero (1 for x >= 0). Derivative taken as zero.
    Heaviside,
}

impl Func {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Func::Exp => x.exp(),
            Func::Ln => x.ln(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tanh => x.tanh(),
            Func::Sigmoid => sigmoid(x),
            Func::Softplus => softplus(x),
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
            Func::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Func::Step => {
                if x > 0.0 {
                    1.0
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Func::Heaviside => {
                if x >= 0.0 {
                    1.0
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Func::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// First derivative given the input `x` and output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Func::Exp => y,
            Func::Ln => 1.0 / x,
            Func::Sin => x.cos(),
            Func::Cos => -x.sin(),
            Func::Tanh => 1.0 - y * y,
            Func::Sigmoid => y * (1.0 - y),
            Func::Softplus => sigmoid(x),
            Func::Sqrt => 0.5 / y,
            Func::Abs => Func::Sign.apply(x),
            Func::Relu => Func::Step.apply(x),
            Func::Step | Func::Sign | Func::Heaviside => 0.0,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp {
    fn parents(&self) -> &[BatchedValue];

    /// Gradient contribution for each parent, in `parents()` order.
    /// `None` means no contribution.
    fn backward(&self, graph: &Graph, out_grad: &Array2<f64>) -> Vec<Option<Array2<f64>>>;
}

enum Op {
    Leaf,
    Add(BatchedValue, BatchedValue),
    Sub(BatchedValue, BatchedValue),
    Mul(BatchedValue, BatchedValue),
    Div(BatchedValue, BatchedValue),
    Neg(BatchedValue),
    Scale(BatchedValue, f64),
    Offset(BatchedValue),
    PowConst(BatchedValue, f64),
    Unary(BatchedValue, Func),
    /// Polynomial with constant coefficients in ascending degree.
    Poly(BatchedValue, Rc<[f64]>),
    MatMul(BatchedValue, BatchedValue),
    Sum(BatchedValue),
    SumRows(BatchedValue),
    SelectRow(BatchedValue, usize),
    SelectCol(BatchedValue, usize),
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    /// True when the differentiated output did not depend on any trainable leaf.
    pub detached: bool,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` when `v` does not
    /// influence the output.
    pub fn get(&self, v: BatchedValue) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: BatchedValue, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn binary_map(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim())
        .unwrap_or_else(|| panic!("incompatible shapes {:?} and {:?}", a.dim(), b.dim()));
    if let (Some(xs), Some(ys)) = (a.as_slice(), b.as_slice()) {
        // contiguous fast paths; each output row pairs one row of a with one row of b
        let (m, n) = shape;
        let (an, bn) = (a.ncols(), b.ncols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = if a.nrows() == 1 { &xs[..an] } else { &xs[i * an..(i + 1) * an] };
            let br = if b.nrows() == 1 { &ys[..bn] } else { &ys[i * bn..(i + 1) * bn] };
            match (an == n, bn == n) {
                (true, true) => out.extend(ar.iter().zip(br).map(|(&x, &y)| f(x, y))),
                (true, false) => out.extend(ar.iter().map(|&x| f(x, br[0]))),
                (false, true) => out.extend(br.iter().map(|&y| f(ar[0], y))),
                (false, false) => out.extend(std::iter::repeat_n(f(ar[0], br[0]), n)),
            }
        }
        return Array2::from_shape_vec(shape, out).expect("shape");
    }
    let av = a.broadcast(shape).expect("broadcast");
    let bv = b.broadcast(shape).expect("broadcast");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> BatchedValue {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        BatchedValue(self.nodes.len() - 1)
    }

    fn rg(&self, v: BatchedValue) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant with no lineage.
    pub fn constant(&mut self, value: Array2<f64>) -> BatchedValue {
        self.push(value, Op::Leaf, false)
    }

    /// Broadcast scalar constant.
    pub fn scalar(&mut self, x: f64) -> BatchedValue {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Row of batched data with no lineage.
    pub fn row(&mut self, data: Vec<f64>) -> BatchedValue {
        let n = data.len();
        self.constant(Array2::from_shape_vec((1, n), data).expect("row shape"))
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn parameter(&mut self, value: Array2<f64>) -> BatchedValue {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: BatchedValue) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: BatchedValue) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: BatchedValue) -> bool {
        self.rg(v)
    }

    /// Copy of `v` with its lineage removed.
    pub fn detach(&mut self, v: BatchedValue) -> BatchedValue {
        if !self.rg(v) && matches!(self.nodes[v.0].op, Op::Leaf) {
            return v;
        }
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Row-vector data of a `(1, B)` or `(1, 1)` value.
    pub fn data(&self, v: BatchedValue) -> Vec<f64> {
        self.nodes[v.0].value.iter().copied().collect()
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn item(&self, v: BatchedValue) -> f64 {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.len(), 1, "item() on non-scalar of shape {:?}", value.dim());
        value[[0, 0]]
    }

    pub fn add(&mut self, a: BatchedValue, b: BatchedValue) -> BatchedValue {
        let value = binary_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: BatchedValue, b: BatchedValue) -> BatchedValue {
        let value = binary_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: BatchedValue, b: BatchedValue) -> BatchedValue {
        let value = binary_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: BatchedValue, b: BatchedValue) -> BatchedValue {
        let value = binary_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, a: BatchedValue) -> BatchedValue {
        let value = self.value(a).mapv(|x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: BatchedValue, c: f64) -> BatchedValue {
        let value = self.value(a).mapv(|x| c * x);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: BatchedValue, c: f64) -> BatchedValue {
        let value = self.value(a).mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn pow_const(&mut self, a: BatchedValue, p: f64) -> BatchedValue {
        let value = self.value(a).mapv(|x| pow(x, p));
        let rg = self.rg(a);
        self.push(value, Op::PowConst(a, p), rg)
    }

    pub fn square(&mut self, a: BatchedValue) -> BatchedValue {
        self.mul(a, a)
    }

    pub fn unary(&mut self, a: BatchedValue, f: Func) -> BatchedValue {
        let value = self.value(a).mapv(|x| f.apply(x));
        let rg = self.rg(a) && !matches!(f, Func::Step | Func::Sign | Func::Heaviside);
        self.push(value, Op::Unary(a, f), rg)
    }

    /// `Σ coeffs[i] · a^i`.
    pub fn poly(&mut self, a: BatchedValue, coeffs: &[f64]) -> BatchedValue {
        let value = self.value(a).mapv(|x| horner(coeffs, x));
        let rg = self.rg(a);
        self.push(value, Op::Poly(a, Rc::from(coeffs)), rg)
    }

    /// Matrix product `w · x`.
    pub fn matmul(&mut self, w: BatchedValue, x: BatchedValue) -> BatchedValue {
        let value = self.value(w).dot(self.value(x));
        let rg = self.rg(w) || self.rg(x);
        self.push(value, Op::MatMul(w, x), rg)
    }

    /// Sum of all elements, as a `(1, 1)` scalar.
    pub fn sum(&mut self, a: BatchedValue) -> BatchedValue {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a `(1, 1)` scalar.
    pub fn mean(&mut self, a: BatchedValue) -> BatchedValue {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `(r, c)` to `(1, c)`.
    pub fn sum_rows(&mut self, a: BatchedValue) -> BatchedValue {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row `i` of `a`, shape `(1, c)`.
    pub fn select_row(&mut self, a: BatchedValue, i: usize) -> BatchedValue {
        let value = self.value(a).row(i).insert_axis(Axis(0)).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SelectRow(a, i), rg)
    }

    /// Column `j` of `a`, shape `(r, 1)`.
    pub fn select_col(&mut self, a: BatchedValue, j: usize) -> BatchedValue {
        let value = self.value(a).column(j).insert_axis(Axis(1)).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SelectCol(a, j), rg)
    }

    /// Records an externally defined operation.
    pub fn custom(&mut self, value: Array2<f64>, op: Box<dyn CustomOp>) -> BatchedValue {
        let rg = op.parents().iter().any(|&p| self.rg(p));
        self.push(value, Op::Custom(op), rg)
    }

    /// Reverse-mode gradient of the scalar `output` with respect to every
    /// node that requires gradients.
    pub fn backward(&self, output: BatchedValue) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        if !self.rg(output) {
            return Gradients {
                grads,
                detached: true,
            };
        }
        grads[output.0] = Some(Array2::ones(self.shape(output)));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            detached: false,
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: BatchedValue, contrib: Array2<f64>| {
            if !self.rg(v) {
                return;
            }
            let contrib = reduce_to(contrib, self.shape(v));
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, binary_map(g, self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, binary_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    acc(*a, binary_map(g, bv, |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = binary_map(&node.value, bv, |q, y| -q / y);
                    acc(*b, binary_map(g, &q, |x, y| x * y));
                }
            }
            Op::Neg(a) => acc(*a, g.mapv(|x| -x)),
            Op::Scale(a, c) => acc(*a, g.mapv(|x| c * x)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::PowConst(a, p) => {
                let mut d = self.value(*a).mapv(|x| p * pow(x, p - 1.0));
                d *= g;
                acc(*a, d);
            }
            Op::Unary(a, f) => {
                let mut d = Array2::zeros(node.value.dim());
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .and(&node.value)
                    .and(g)
                    .for_each(|d, &x, &y, &gi| *d = gi * f.derivative(x, y));
                acc(*a, d);
            }
            Op::Poly(a, coeffs) => {
                let dc: Vec<f64> = coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(i, c)| i as f64 * c)
                    .collect();
                let mut d = self.value(*a).mapv(|x| horner(&dc, x));
                d *= g;
                acc(*a, d);
            }
            Op::MatMul(w, x) => {
                if self.rg(*w) {
                    acc(*w, g.dot(&self.value(*x).t()));
                }
                if self.rg(*x) {
                    acc(*x, self.value(*w).t().dot(g));
                }
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                acc(*a, Array2::from_elem(self.shape(*a), s));
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a);
                let full = g.broadcast(shape).expect("broadcast").to_owned();
                acc(*a, full);
            }
            Op::SelectRow(a, i) => {
                let mut full = Array2::zeros(self.shape(*a));
                full.row_mut(*i).assign(&g.row(0));
                acc(*a, full);
            }
            Op::SelectCol(a, j) => {
                let mut full = Array2::zeros(self.shape(*a));
                full.column_mut(*j).assign(&g.column(0));
                acc(*a, full);
            }
            Op::Custom(op) => {
                let parents = op.parents().to_vec();
                for (p, contrib) in parents.into_iter().zip(op.backward(self, g)) {
                    if let Some(c) = contrib {
                        acc(p, c);
                    }
                }
            }
        }
    }
}

/// `x^p` with exact handling of small integer exponents so that negative
/// bases stay finite where the power is defined.
pub fn pow(x: f64, p: f64) -> f64 {
    if p == p.trunc() && p.abs() <= i32::MAX as f64 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

pub(crate) fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}
