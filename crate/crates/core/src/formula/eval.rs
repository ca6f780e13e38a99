use std::collections::{BTreeMap, HashMap};

use crate::autodiff::jet::{self, Jet, JetFunc};
use crate::autodiff::{BatchedValue, Func, Graph};

use super::{BinaryOp, ExprNode, FormulaError, UnaryOp};

/// Name lookup used during evaluation.
pub trait Context {
    fn lookup(&self, name: &str) -> Option<BatchedValue>;
}

impl Context for HashMap<String, BatchedValue> {
    fn lookup(&self, name: &str) -> Option<BatchedValue> {
        self.get(name).copied()
    }
}

impl Context for BTreeMap<String, BatchedValue> {
    fn lookup(&self, name: &str) -> Option<BatchedValue> {
        self.get(name).copied()
    }
}

/// Evaluates `expr` elementwise on the graph. Non-finite results propagate.
pub fn evaluate(expr: &ExprNode, ctx: &dyn Context, g: &mut Graph) -> Result<BatchedValue, FormulaError> {
    Ok(match expr {
        ExprNode::Constant(c) => g.scalar(*c),
        ExprNode::Variable(name) => ctx
            .lookup(name)
            .ok_or_else(|| FormulaError::UnknownVariable(name.clone()))?,
        ExprNode::Unary(op, child) => {
            let x = evaluate(child, ctx, g)?;
            match op {
                UnaryOp::Neg => g.neg(x),
                UnaryOp::Log => g.unary(x, Func::Ln),
                UnaryOp::Exp => g.unary(x, Func::Exp),
                UnaryOp::Sin => g.unary(x, Func::Sin),
                UnaryOp::Cos => g.unary(x, Func::Cos),
                UnaryOp::Sqrt => g.unary(x, Func::Sqrt),
                UnaryOp::Tanh => g.unary(x, Func::Tanh),
                UnaryOp::Abs => g.unary(x, Func::Abs),
                UnaryOp::Sigmoid => g.unary(x, Func::Sigmoid),
                UnaryOp::Step => g.unary(x, Func::Heaviside),
            }
        }
        ExprNode::Binary(op, l, r) => {
            let a = evaluate(l, ctx, g)?;
            let b = evaluate(r, ctx, g)?;
            match op {
                BinaryOp::Add => g.add(a, b),
                BinaryOp::Sub => g.sub(a, b),
                BinaryOp::Mul => g.mul(a, b),
                BinaryOp::Div => g.div(a, b),
                BinaryOp::Pow => {
                    if !g.requires_grad(b) && g.shape(b) == (1, 1) {
                        let p = g.item(b);
                        g.pow_const(a, p)
                    } else {
                        // a^b = exp(b ln a)
                        let ln = g.unary(a, Func::Ln);
                        let prod = g.mul(b, ln);
                        g.unary(prod, Func::Exp)
                    }
                }
            }
        }
    })
}

/// Evaluates `expr` on jets so that input derivatives of the result are
/// available. Names missing from `vars` are looked up in `consts` and
/// treated as input-independent.
pub fn evaluate_jet(
    expr: &ExprNode,
    vars: &BTreeMap<String, Jet>,
    consts: &dyn Context,
    basis: &std::rc::Rc<crate::autodiff::JetBasis>,
    g: &mut Graph,
) -> Result<Jet, FormulaError> {
    Ok(match expr {
        ExprNode::Constant(c) => {
            let v = g.scalar(*c);
            Jet::constant(basis, v)
        }
        ExprNode::Variable(name) => match vars.get(name) {
            Some(j) => j.clone(),
            None => {
                let v = consts
                    .lookup(name)
                    .ok_or_else(|| FormulaError::UnknownVariable(name.clone()))?;
                Jet::constant(basis, v)
            }
        },
        ExprNode::Unary(op, child) => {
            let x = evaluate_jet(child, vars, consts, basis, g)?;
            let f = match op {
                UnaryOp::Neg => return Ok(jet::neg(g, &x)),
                UnaryOp::Log => JetFunc::Ln,
                UnaryOp::Exp => JetFunc::Exp,
                UnaryOp::Sin => JetFunc::Sin,
                UnaryOp::Cos => JetFunc::Cos,
                UnaryOp::Sqrt => JetFunc::Sqrt,
                UnaryOp::Tanh => JetFunc::Tanh,
                UnaryOp::Abs => JetFunc::Abs,
                UnaryOp::Sigmoid => JetFunc::Sigmoid,
                UnaryOp::Step => JetFunc::Step,
            };
            jet::apply(g, f, &x)
        }
        ExprNode::Binary(op, l, r) => {
            let a = evaluate_jet(l, vars, consts, basis, g)?;
            if let (BinaryOp::Pow, ExprNode::Constant(p)) = (op, r.as_ref()) {
                return Ok(jet::apply(g, JetFunc::PowConst(*p), &a));
            }
            let b = evaluate_jet(r, vars, consts, basis, g)?;
            match op {
                BinaryOp::Add => jet::add(g, &a, &b),
                BinaryOp::Sub => jet::sub(g, &a, &b),
                BinaryOp::Mul => jet::mul(g, &a, &b),
                BinaryOp::Div => jet::div(g, &a, &b),
                BinaryOp::Pow => {
                    let ln = jet::apply(g, JetFunc::Ln, &a);
                    let prod = jet::mul(g, &b, &ln);
                    jet::apply(g, JetFunc::Exp, &prod)
                }
            }
        }
    })
}

/// Scalar evaluation with plain `f64` bindings.
pub fn evaluate_f64(expr: &ExprNode, vars: &HashMap<String, f64>) -> Result<f64, FormulaError> {
    let mut g = Graph::new();
    let ctx: HashMap<String, BatchedValue> = vars.iter().map(|(k, &v)| (k.clone(), g.scalar(v))).collect();
    let out = evaluate(expr, &ctx, &mut g)?;
    Ok(g.item(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    fn ctx(g: &mut Graph, pairs: &[(&str, Vec<f64>)]) -> HashMap<String, BatchedValue> {
        pairs.iter().map(|(k, v)| (k.to_string(), g.row(v.clone()))).collect()
    }

    #[test]
    fn investment_rate() {
        let mut g = Graph::new();
        let c = ctx(&mut g, &[("qa", vec![2.0]), ("kappa", vec![10000.0])]);
        let e = parse_formula("(qa-1)/kappa").unwrap();
        let out = evaluate(&e, &c, &mut g).unwrap();
        assert_eq!(g.data(out), vec![1e-4]);
    }

    #[test]
    fn negative_sqrt_is_nan_not_error() {
        let mut g = Graph::new();
        let c = ctx(&mut g, &[("x", vec![-1.0])]);
        let out = evaluate(&parse_formula("sqrt(x)").unwrap(), &c, &mut g).unwrap();
        assert!(g.data(out)[0].is_nan());
    }

    #[test]
    fn market_clearing_at_zero_share() {
        let mut g = Graph::new();
        let c = ctx(&mut g, &[("eta", vec![0.0]), ("w_ia", vec![7.0]), ("w_ha", vec![1.0])]);
        let e = parse_formula("eta*w_ia + (1-eta)*w_ha").unwrap();
        let out = evaluate(&e, &c, &mut g).unwrap();
        assert_eq!(g.data(out), vec![1.0]);
    }

    #[test]
    fn unknown_variable_is_named() {
        let mut g = Graph::new();
        let c = ctx(&mut g, &[("x", vec![1.0])]);
        let err = evaluate(&parse_formula("x + y").unwrap(), &c, &mut g).unwrap_err();
        assert_eq!(err, FormulaError::UnknownVariable("y".into()));
    }

    #[test]
    fn constants_broadcast_and_evaluation_is_pure() {
        let e = parse_formula("2*x^2 + exp(-x)/(1+x) - log(x)*sigmoid(x) + abs(tanh(x))").unwrap();
        let run = || {
            let mut g = Graph::new();
            let c = ctx(&mut g, &[("x", vec![0.5, 1.0, 2.0, 3.5])]);
            let out = evaluate(&e, &c, &mut g).unwrap();
            g.data(out)
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn jet_evaluation_gives_input_derivatives() {
        use crate::autodiff::{input_jets, JetBasis};
        // y = 4 x^-4 + 2 x^-1 and its first two derivatives at x = 1.5
        let e = parse_formula("4*x^(-4) + 2/x").unwrap();
        let mut g = Graph::new();
        let basis = JetBasis::new(1, 2);
        let x = g.row(vec![1.5]);
        let jets = input_jets(&mut g, &basis, &[x]);
        let vars: BTreeMap<String, Jet> = [("x".to_string(), jets[0].clone())].into();
        let consts: HashMap<String, BatchedValue> = HashMap::new();
        let y = evaluate_jet(&e, &vars, &consts, &basis, &mut g).unwrap();
        let x0: f64 = 1.5;
        let d1 = y.derivative(&mut g, &[1]).unwrap();
        let d2 = y.derivative(&mut g, &[2]).unwrap();
        assert!((g.item(y.value()) - (4.0 * x0.powi(-4) + 2.0 / x0)).abs() < 1e-14);
        assert!((g.item(d1) - (-16.0 * x0.powi(-5) - 2.0 / (x0 * x0))).abs() < 1e-13);
        assert!((g.item(d2) - (80.0 * x0.powi(-6) + 4.0 / x0.powi(3))).abs() < 1e-12);
    }

    #[test]
    fn variable_exponent_uses_exp_log() {
        let mut g = Graph::new();
        let c = ctx(&mut g, &[("x", vec![2.0]), ("p", vec![3.0])]);
        let out = evaluate(&parse_formula("x^p").unwrap(), &c, &mut g).unwrap();
        assert!((g.data(out)[0] - 8.0).abs() < 1e-12);
    }
}
