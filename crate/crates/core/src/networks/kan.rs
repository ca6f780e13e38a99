//! Kolmogorov-Arnold layers.
//!
//! Every edge `i -> j` carries `phi(x) = w_base * silu(x) + sum_m c_m B_m(x)`
//! where `B_m` are the `G + k` B-splines of degree `k` on a uniform grid
//! extended by `k` knots on each side. Each output node adds a bias.

use ndarray::{s, Array2};

use crate::autodiff::jet::{self, Jet, JetFunc};
use crate::autodiff::{BatchedValue, CustomOp, Graph};

/// Uniform B-spline basis with `k` extra knots beyond each end of the range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BSplineBasis {
    pub grid_size: usize,
    pub order: usize,
    pub low: f64,
    pub high: f64,
}

impl BSplineBasis {
    pub fn new(grid_size: usize, order: usize, low: f64, high: f64) -> Self {
        Self {
            grid_size,
            order,
            low,
            high,
        }
    }

    pub fn len(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn step(&self) -> f64 {
        (self.high - self.low) / self.grid_size as f64
    }

    fn knot(&self, j: usize) -> f64 {
        self.low + (j as f64 - self.order as f64) * self.step()
    }

    /// All basis functions of `degree` at `x` (Cox-de Boor).
    fn raw(&self, x: f64, degree: usize) -> Vec<f64> {
        let n0 = self.grid_size + 2 * self.order;
        let mut b: Vec<f64> = (0..n0)
            .map(|j| {
                if self.knot(j) <= x && x < self.knot(j + 1) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let h = self.step();
        for p in 1..=degree {
            let denom = p as f64 * h;
            b = (0..n0 - p)
                .map(|j| {
                    (x - self.knot(j)) / denom * b[j] + (self.knot(j + p + 1) - x) / denom * b[j + 1]
                })
                .collect();
        }
        b
    }

    /// `r`-th derivative of every degree-`order` basis function at `x`.
    pub fn derivative(&self, x: f64, r: usize) -> Vec<f64> {
        let k = self.order;
        if r > k {
            return vec![0.0; self.len()];
        }
        let lower = self.raw(x, k - r);
        if r == 0 {
            return lower;
        }
        // uniform knots: each differentiation divides by the knot spacing
        let coef = 1.0 / self.step().powi(r as i32);
        let binom: Vec<f64> = (0..=r)
            .map(|s| {
                let c = (0..s).fold(1.0, |acc, t| acc * (r - t) as f64 / (t + 1) as f64);
                if s % 2 == 0 {
                    c
                } else {
                    -c
                }
            })
            .collect();
        (0..self.len())
            .map(|m| coef * binom.iter().enumerate().map(|(s, c)| c * lower[m + s]).sum::<f64>())
            .collect()
    }

    /// `(len, B)` matrix of `r`-th derivatives at a row of points.
    fn matrix(&self, xs: &[f64], r: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), xs.len()));
        for (b, &x) in xs.iter().enumerate() {
            for (m, v) in self.derivative(x, r).into_iter().enumerate() {
                out[[m, b]] = v;
            }
        }
        out
    }
}

/// `C_i · B^(r)(x_i)` for one input row of a layer.
struct SplineTerm {
    parents: [BatchedValue; 2],
    input: usize,
    width: usize,
    basis: Array2<f64>,
    next: Array2<f64>,
}

impl CustomOp for SplineTerm {
    fn parents(&self) -> &[BatchedValue] {
        &self.parents
    }

    fn backward(&self, graph: &Graph, out_grad: &Array2<f64>) -> Vec<Option<Array2<f64>>> {
        let [x, coef] = self.parents;
        let c = graph.value(coef);
        let cols = s![.., self.input * self.width..(self.input + 1) * self.width];
        let dx = if graph.requires_grad(x) {
            let slope = c.slice(cols).dot(&self.next);
            Some((&slope * out_grad).sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)))
        } else {
            None
        };
        let dc = if graph.requires_grad(coef) {
            let mut full = Array2::zeros(c.dim());
            full.slice_mut(cols).assign(&out_grad.dot(&self.basis.t()));
            Some(full)
        } else {
            None
        };
        vec![dx, dc]
    }
}

fn spline_term(
    g: &mut Graph,
    spline: &BSplineBasis,
    x: BatchedValue,
    coef: BatchedValue,
    input: usize,
    r: usize,
) -> BatchedValue {
    let xs = g.data(x);
    let width = spline.len();
    let basis = spline.matrix(&xs, r);
    let next = spline.matrix(&xs, r + 1);
    let value = g
        .value(coef)
        .slice(s![.., input * width..(input + 1) * width])
        .dot(&basis);
    g.custom(
        value,
        Box::new(SplineTerm {
            parents: [x, coef],
            input,
            width,
            basis,
            next,
        }),
    )
}

/// One KAN layer on row jets. Parameters: coefficients `(n_out, n_in * M)`,
/// base weights `(n_out, n_in)`, bias `(n_out, 1)`.
pub(crate) fn layer(
    g: &mut Graph,
    spline: &BSplineBasis,
    params: [BatchedValue; 3],
    inputs: &[Jet],
) -> Jet {
    let [coef, base, bias] = params;
    let order = inputs[0].basis.order();
    let mut acc: Option<Jet> = None;
    for (i, x) in inputs.iter().enumerate() {
        let derivs: Vec<Option<BatchedValue>> = (0..=order)
            .map(|r| (r <= spline.order).then(|| spline_term(g, spline, x.value(), coef, i, r)))
            .collect();
        let spline_jet = jet::compose(g, x, &derivs);
        let act = jet::apply(g, JetFunc::Silu, x);
        let w = g.select_col(base, i);
        let base_jet = act.map_linear(|c| g.mul(w, c));
        let edge = jet::add(g, &spline_jet, &base_jet);
        acc = Some(match acc {
            None => edge,
            Some(a) => jet::add(g, &a, &edge),
        });
    }
    let mut out = acc.expect("layer has inputs");
    out.coeffs[0] = Some(g.add(out.value(), bias));
    out
}
