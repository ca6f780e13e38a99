//! Truncated multivariate Taylor expansions whose coefficients are graph
//! nodes.
//!
//! A [`Jet`] carries every partial derivative of a batched quantity with
//! respect to the `d` state inputs, up to a fixed total order. Coefficients
//! are stored Taylor-normalised (divided by `α!`), so products are plain
//! Cauchy products and the partial derivative for multi-index `α` is
//! `α! · coeff[α]`. Because each coefficient is an ordinary graph node,
//! reverse-mode gradients with respect to network parameters flow through
//! the input derivatives exactly.

use std::collections::HashMap;
use std::rc::Rc;

use super::graph::{BatchedValue, Func, Graph};

/// The set of multi-indices of total degree `<= order` in `dim` variables.
#[derive(Debug)]
pub struct JetBasis {
    dim: usize,
    order: usize,
    indices: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    /// For each output index, the `(left, right)` pairs contributing to it in
    /// a product.
    products: Vec<Vec<(usize, usize)>>,
    factorials: Vec<f64>,
}

impl JetBasis {
    pub fn new(dim: usize, order: usize) -> Rc<Self> {
        let mut indices: Vec<Vec<u8>> = vec![vec![0; dim]];
        for deg in 1..=order {
            let mut level = Vec::new();
            enumerate(dim, deg, &mut vec![0; dim], 0, &mut level);
            indices.extend(level);
        }
        let lookup: HashMap<Vec<u8>, usize> = indices
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let mut products = vec![Vec::new(); indices.len()];
        for (i, a) in indices.iter().enumerate() {
            for (j, b) in indices.iter().enumerate() {
                let sum: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                if let Some(&k) = lookup.get(&sum) {
                    products[k].push((i, j));
                }
            }
        }
        let factorials = indices
            .iter()
            .map(|m| m.iter().map(|&k| factorial(k as usize)).product())
            .collect();
        Rc::new(Self {
            dim,
            order,
            indices,
            lookup,
            products,
            factorials,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn multi_index(&self, i: usize) -> &[u8] {
        &self.indices[i]
    }

    pub fn position(&self, multi_index: &[u8]) -> Option<usize> {
        self.lookup.get(multi_index).copied()
    }

    /// Total degree of the `i`-th multi-index.
    pub fn degree(&self, i: usize) -> usize {
        self.indices[i].iter().map(|&k| k as usize).sum()
    }

    /// `α!` for the `i`-th multi-index.
    pub fn factorial(&self, i: usize) -> f64 {
        self.factorials[i]
    }
}

fn enumerate(dim: usize, remaining: usize, cur: &mut Vec<u8>, pos: usize, out: &mut Vec<Vec<u8>>) {
    if pos == dim - 1 {
        cur[pos] = remaining as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        cur[pos] = k as u8;
        enumerate(dim, remaining - k, cur, pos + 1, out);
    }
    cur[pos] = 0;
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Truncated Taylor expansion; `None` coefficients are structural zeros.
#[derive(Clone, Debug)]
pub struct Jet {
    pub basis: Rc<JetBasis>,
    pub coeffs: Vec<Option<BatchedValue>>,
}

impl Jet {
    /// A quantity with no dependence on the inputs.
    pub fn constant(basis: &Rc<JetBasis>, value: BatchedValue) -> Self {
        let mut coeffs = vec![None; basis.len()];
        coeffs[0] = Some(value);
        Self {
            basis: basis.clone(),
            coeffs,
        }
    }

    /// The `i`-th input variable itself, evaluated at `value`.
    pub fn variable(g: &mut Graph, basis: &Rc<JetBasis>, value: BatchedValue, i: usize) -> Self {
        let mut jet = Self::constant(basis, value);
        if basis.order() >= 1 {
            let mut m = vec![0u8; basis.dim()];
            m[i] = 1;
            let pos = basis.position(&m).expect("first-order index");
            jet.coeffs[pos] = Some(g.scalar(1.0));
        }
        jet
    }

    pub fn value(&self) -> BatchedValue {
        self.coeffs[0].expect("jet value coefficient")
    }

    /// Partial derivative for the given multi-index (`None` if structurally zero).
    pub fn derivative(&self, g: &mut Graph, multi_index: &[u8]) -> Option<BatchedValue> {
        let pos = self.basis.position(multi_index)?;
        let c = self.coeffs[pos]?;
        let f = self.basis.factorial(pos);
        Some(if f == 1.0 { c } else { g.scale(c, f) })
    }

    fn with_coeffs(&self, coeffs: Vec<Option<BatchedValue>>) -> Self {
        Self {
            basis: self.basis.clone(),
            coeffs,
        }
    }

    pub fn map_linear(&self, mut f: impl FnMut(BatchedValue) -> BatchedValue) -> Self {
        let coeffs = self.coeffs.iter().map(|c| c.map(&mut f)).collect();
        self.with_coeffs(coeffs)
    }
}

fn add_opt(g: &mut Graph, a: Option<BatchedValue>, b: Option<BatchedValue>) -> Option<BatchedValue> {
    match (a, b) {
        (Some(x), Some(y)) => Some(g.add(x, y)),
        (x, None) => x,
        (None, y) => y,
    }
}

pub fn add(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let coeffs = (0..a.coeffs.len())
        .map(|i| add_opt(g, a.coeffs[i], b.coeffs[i]))
        .collect();
    a.with_coeffs(coeffs)
}

pub fn sub(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let coeffs = (0..a.coeffs.len())
        .map(|i| match (a.coeffs[i], b.coeffs[i]) {
            (Some(x), Some(y)) => Some(g.sub(x, y)),
            (x, None) => x,
            (None, Some(y)) => Some(g.neg(y)),
        })
        .collect();
    a.with_coeffs(coeffs)
}

pub fn neg(g: &mut Graph, a: &Jet) -> Jet {
    a.map_linear(|c| g.neg(c))
}

pub fn scale(g: &mut Graph, a: &Jet, s: f64) -> Jet {
    a.map_linear(|c| g.scale(c, s))
}

pub fn offset(g: &mut Graph, a: &Jet, s: f64) -> Jet {
    let mut out = a.clone();
    out.coeffs[0] = Some(g.offset(a.value(), s));
    out
}

/// Truncated Cauchy product.
pub fn mul(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let basis = a.basis.clone();
    let coeffs = (0..basis.len())
        .map(|k| {
            let mut acc = None;
            for &(i, j) in &basis.products[k] {
                if let (Some(x), Some(y)) = (a.coeffs[i], b.coeffs[j]) {
                    let p = g.mul(x, y);
                    acc = add_opt(g, acc, Some(p));
                }
            }
            acc
        })
        .collect();
    a.with_coeffs(coeffs)
}

/// `f(u)` where `derivs[k]` holds `f^(k)(u₀)` for `k = 0..=order`.
pub fn compose(g: &mut Graph, u: &Jet, derivs: &[Option<BatchedValue>]) -> Jet {
    let basis = u.basis.clone();
    let mut out = vec![None; basis.len()];
    out[0] = derivs[0];
    if basis.order() == 0 {
        return u.with_coeffs(out);
    }
    let mut delta = u.clone();
    delta.coeffs[0] = None;
    let mut power = delta.clone();
    for (k, dk) in derivs.iter().enumerate().take(basis.order() + 1).skip(1) {
        if k > 1 {
            power = mul(g, &power, &delta);
        }
        let Some(dk) = *dk else { continue };
        let inv_fact = 1.0 / factorial(k);
        for (i, slot) in out.iter_mut().enumerate() {
            if let Some(p) = power.coeffs[i] {
                let s = if inv_fact == 1.0 { dk } else { g.scale(dk, inv_fact) };
                let term = g.mul(s, p);
                *slot = add_opt(g, *slot, Some(term));
            }
        }
    }
    u.with_coeffs(out)
}

/// Elementwise functions usable on jets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JetFunc {
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
    Silu,
    /// Unit step with value 1 at zero; all derivatives vanish.
    Step,
    PowConst(f64),
}

/// Derivative polynomials of functions satisfying `f' = q(f)`, in terms of `f`.
fn derivative_polys(q: &[f64], order: usize) -> Vec<Vec<f64>> {
    let mut polys = vec![vec![0.0, 1.0]];
    for _ in 1..=order {
        let prev = polys.last().unwrap();
        let dprev: Vec<f64> = prev
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| i as f64 * c)
            .collect();
        let mut next = vec![0.0; dprev.len() + q.len()];
        for (i, a) in dprev.iter().enumerate() {
            for (j, b) in q.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        while next.len() > 1 && *next.last().unwrap() == 0.0 {
            next.pop();
        }
        polys.push(next);
    }
    polys
}

/// `f^(k)(x)` for `k = 0..=order` as graph nodes.
pub fn function_derivatives(
    g: &mut Graph,
    f: JetFunc,
    x: BatchedValue,
    order: usize,
) -> Vec<Option<BatchedValue>> {
    let mut out = Vec::with_capacity(order + 1);
    match f {
        JetFunc::Exp => {
            let e = g.unary(x, Func::Exp);
            out.resize(order + 1, Some(e));
        }
        JetFunc::Sin | JetFunc::Cos => {
            let s = g.unary(x, Func::Sin);
            let c = g.unary(x, Func::Cos);
            let ns = if order >= 1 { Some(g.neg(s)) } else { None };
            let nc = if order >= 1 { Some(g.neg(c)) } else { None };
            let cycle = if f == JetFunc::Sin {
                [Some(s), Some(c), ns, nc]
            } else {
                [Some(c), ns, nc, Some(s)]
            };
            for k in 0..=order {
                out.push(cycle[k % 4]);
            }
        }
        JetFunc::Tanh | JetFunc::Sigmoid => {
            let (func, q): (Func, &[f64]) = if f == JetFunc::Tanh {
                (Func::Tanh, &[1.0, 0.0, -1.0])
            } else {
                (Func::Sigmoid, &[0.0, 1.0, -1.0])
            };
            let y = g.unary(x, func);
            out.push(Some(y));
            for p in derivative_polys(q, order).iter().skip(1) {
                out.push(Some(g.poly(y, p)));
            }
        }
        JetFunc::Softplus => {
            out.push(Some(g.unary(x, Func::Softplus)));
            if order >= 1 {
                let s = g.unary(x, Func::Sigmoid);
                out.push(Some(s));
                for p in derivative_polys(&[0.0, 1.0, -1.0], order - 1).iter().skip(1) {
                    out.push(Some(g.poly(s, p)));
                }
            }
        }
        JetFunc::Ln => {
            out.push(Some(g.unary(x, Func::Ln)));
            for k in 1..=order {
                let c = if k % 2 == 1 { 1.0 } else { -1.0 } * factorial(k - 1);
                let p = g.pow_const(x, -(k as f64));
                out.push(Some(g.scale(p, c)));
            }
        }
        JetFunc::Sqrt => {
            out.push(Some(g.unary(x, Func::Sqrt)));
            push_power_rule(g, x, 0.5, order, &mut out);
        }
        JetFunc::PowConst(p) => {
            out.push(Some(g.pow_const(x, p)));
            push_power_rule(g, x, p, order, &mut out);
        }
        JetFunc::Abs => {
            out.push(Some(g.unary(x, Func::Abs)));
            if order >= 1 {
                out.push(Some(g.unary(x, Func::Sign)));
            }
            out.resize(order + 1, None);
        }
        JetFunc::Relu => {
            out.push(Some(g.unary(x, Func::Relu)));
            if order >= 1 {
                out.push(Some(g.unary(x, Func::Step)));
            }
            out.resize(order + 1, None);
        }
        JetFunc::Step => {
            out.push(Some(g.unary(x, Func::Heaviside)));
            out.resize(order + 1, None);
        }
        JetFunc::Silu => unreachable!("silu is composed from a product"),
    }
    out
}

fn push_power_rule(g: &mut Graph, x: BatchedValue, p: f64, order: usize, out: &mut Vec<Option<BatchedValue>>) {
    let mut c = 1.0;
    for k in 1..=order {
        c *= p - (k as f64 - 1.0);
        if c == 0.0 {
            out.push(None);
        } else {
            let e = g.pow_const(x, p - k as f64);
            out.push(Some(g.scale(e, c)));
        }
    }
}

/// Applies an elementwise function to a jet.
pub fn apply(g: &mut Graph, f: JetFunc, u: &Jet) -> Jet {
    if f == JetFunc::Silu {
        let s = apply(g, JetFunc::Sigmoid, u);
        return mul(g, u, &s);
    }
    let derivs = function_derivatives(g, f, u.value(), u.basis.order());
    compose(g, u, &derivs)
}

/// `a / b` as `a · b⁻¹`.
pub fn div(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let inv = apply(g, JetFunc::PowConst(-1.0), b);
    mul(g, a, &inv)
}

/// Affine map `w · u + b` applied coefficient-wise (bias on the value only).
pub fn linear(g: &mut Graph, w: BatchedValue, b: Option<BatchedValue>, u: &Jet) -> Jet {
    let mut out = u.map_linear(|c| g.matmul(w, c));
    if let Some(b) = b {
        out.coeffs[0] = Some(g.add(out.value(), b));
    }
    out
}

/// Column sums of every coefficient.
pub fn sum_rows(g: &mut Graph, u: &Jet) -> Jet {
    u.map_linear(|c| g.sum_rows(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(JetBasis::new(1, 2).len(), 3);
        assert_eq!(JetBasis::new(2, 2).len(), 6);
        assert_eq!(JetBasis::new(3, 3).len(), 20);
        let b = JetBasis::new(2, 3);
        let pos = b.position(&[2, 1]).unwrap();
        assert_eq!(b.degree(pos), 3);
        assert_eq!(b.factorial(pos), 2.0);
    }

    #[test]
    fn tanh_derivative_polynomials() {
        let p = derivative_polys(&[1.0, 0.0, -1.0], 3);
        assert_eq!(p[1], vec![1.0, 0.0, -1.0]);
        assert_eq!(p[2], vec![0.0, -2.0, 0.0, 2.0]);
        assert_eq!(p[3], vec![-2.0, 0.0, 8.0, 0.0, -6.0]);
    }

    fn univariate(g: &mut Graph, f: JetFunc, x: f64, order: usize) -> Vec<f64> {
        let basis = JetBasis::new(1, order);
        let xv = g.row(vec![x]);
        let u = Jet::variable(g, &basis, xv, 0);
        let y = apply(g, f, &u);
        (0..=order)
            .map(|k| {
                y.derivative(g, &[k as u8])
                    .map(|v| g.value(v)[[0, 0]])
                    .unwrap_or(0.0)
            })
            .collect()
    }

    #[test]
    fn elementary_derivatives_are_exact() {
        let mut g = Graph::new();
        let x: f64 = 0.4;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());

        let d = univariate(&mut g, JetFunc::Exp, x, 3);
        assert!(d.iter().all(|&v| close(v, x.exp())));

        let d = univariate(&mut g, JetFunc::Sin, x, 4);
        let want = [x.sin(), x.cos(), -x.sin(), -x.cos(), x.sin()];
        assert!(d.iter().zip(want).all(|(&a, b)| close(a, b)));

        let d = univariate(&mut g, JetFunc::Ln, x, 3);
        let want = [x.ln(), 1.0 / x, -1.0 / (x * x), 2.0 / x.powi(3)];
        assert!(d.iter().zip(want).all(|(&a, b)| close(a, b)));

        let t = x.tanh();
        let d = univariate(&mut g, JetFunc::Tanh, x, 2);
        let want = [t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)];
        assert!(d.iter().zip(want).all(|(&a, b)| close(a, b)));

        let d = univariate(&mut g, JetFunc::PowConst(3.0), x, 4);
        let want = [x.powi(3), 3.0 * x * x, 6.0 * x, 6.0, 0.0];
        assert!(d.iter().zip(want).all(|(&a, b)| close(a, b)));

        let s = crate::autodiff::sigmoid(x);
        let d = univariate(&mut g, JetFunc::Silu, x, 2);
        let ds = s * (1.0 - s);
        let want = [x * s, s + x * ds, 2.0 * ds + x * ds * (1.0 - 2.0 * s)];
        assert!(d.iter().zip(want).all(|(&a, b)| close(a, b)));
    }
}
