//! Loss building blocks on recorded values.

use crate::autodiff::{BatchedValue, Func, Graph};

use super::defs::Comparator;
use super::model::row_const;

/// Margin making strict inequalities penalise equality.
pub const STRICT_EPSILON: f64 = 1e-8;

/// Mean of `(lhs - rhs)^2` over the batch.
pub fn residual_mse(g: &mut Graph, lhs: BatchedValue, rhs: BatchedValue) -> BatchedValue {
    let d = g.sub(lhs, rhs);
    let sq = g.square(d);
    g.mean(sq)
}

/// Mean squared violation of `lhs cmp rhs`.
pub fn constraint_loss(g: &mut Graph, lhs: BatchedValue, rhs: BatchedValue, cmp: Comparator) -> BatchedValue {
    let (gap, margin) = match cmp {
        Comparator::Le => (g.sub(lhs, rhs), 0.0),
        Comparator::Lt => (g.sub(lhs, rhs), STRICT_EPSILON),
        Comparator::Ge => (g.sub(rhs, lhs), 0.0),
        Comparator::Gt => (g.sub(rhs, lhs), STRICT_EPSILON),
    };
    let gap = if margin == 0.0 { gap } else { g.offset(gap, margin) };
    let v = g.unary(gap, Func::Relu);
    let sq = g.square(v);
    g.mean(sq)
}

/// Mean of `(lhs - rhs)^2` over the points where `mask` holds; zero if none do.
pub fn masked_mse(g: &mut Graph, lhs: BatchedValue, rhs: BatchedValue, mask: &[bool]) -> BatchedValue {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return g.scalar(0.0);
    }
    let d = g.sub(lhs, rhs);
    let sq = g.square(d);
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let m = row_const(g, &weights);
    let kept = g.mul(sq, m);
    let s = g.sum(kept);
    g.scale(s, 1.0 / n as f64)
}

/// `sum_i w_i * parts_i`, or zero for no parts.
pub fn weighted_total(g: &mut Graph, parts: &[BatchedValue], weights: &[f64]) -> BatchedValue {
    let mut total: Option<BatchedValue> = None;
    for (&p, &w) in parts.iter().zip(weights) {
        let term = if w == 1.0 { p } else { g.scale(p, w) };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    total.unwrap_or_else(|| g.scalar(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(f: impl FnOnce(&mut Graph, BatchedValue, BatchedValue) -> BatchedValue, l: &[f64], r: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.row(l.to_vec()), g.row(r.to_vec()));
        let out = f(&mut g, a, b);
        g.item(out)
    }

    #[test]
    fn constraint_penalises_violations_only() {
        let v = run(|g, a, b| constraint_loss(g, a, b, Comparator::Le), &[1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(v, 0.5);
        let v = run(|g, a, b| constraint_loss(g, a, b, Comparator::Ge), &[1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn strict_constraint_penalises_equality() {
        let v = run(|g, a, b| constraint_loss(g, a, b, Comparator::Lt), &[2.0], &[2.0]);
        assert!((v - 1e-16).abs() < 1e-20);
        let v = run(|g, a, b| constraint_loss(g, a, b, Comparator::Le), &[2.0], &[2.0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn masked_mean_uses_selected_points() {
        let v = run(|g, a, b| masked_mse(g, a, b, &[true, false, true]), &[1.0, 10.0, 3.0], &[0.0; 3]);
        assert_eq!(v, 5.0);
        let v = run(|g, a, b| masked_mse(g, a, b, &[false; 3]), &[1.0, 10.0, 3.0], &[0.0; 3]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn weighted_total_sums() {
        let mut g = Graph::new();
        let parts = [g.scalar(1.0), g.scalar(0.5)];
        let t = weighted_total(&mut g, &parts, &[1.0, 2.0]);
        assert_eq!(g.item(t), 2.0);
        let t = weighted_total(&mut g, &parts, &[2.0, 1.0]);
        assert_eq!(g.item(t), 2.5);
        let t = weighted_total(&mut g, &[], &[]);
        assert_eq!(g.item(t), 0.0);
    }
}
