//! Formula strings: parsing, formatting and batched evaluation.
//!
//! Formulas arrive either as plain expressions (`(qa - 1)/kappa`, with `^` or
//! `**` for powers) or in a LaTeX subset that is first rewritten textually
//! into a plain expression. Both routes end in the same [`ExprNode`] tree.

mod eval;
mod latex;
mod parser;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use eval::{evaluate, evaluate_f64, evaluate_jet, Context};
pub use latex::{normalize_latex, parse_latex, NameMap, GREEK_LETTERS};
pub use parser::parse_formula;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("unsupported LaTeX command `\\{command}` at offset {offset}")]
    UnsupportedCommand { command: String, offset: usize },
    #[error("unbalanced braces in LaTeX input at offset {offset}")]
    UnbalancedBraces { offset: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Log,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Abs,
    Sigmoid,
    /// 1 where the argument is >= 0, else 0.
    Step,
}

impl UnaryOp {
    pub const FUNCTIONS: [UnaryOp; 9] = [
        UnaryOp::Log,
        UnaryOp::Exp,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Sqrt,
        UnaryOp::Tanh,
        UnaryOp::Abs,
        UnaryOp::Sigmoid,
        UnaryOp::Step,
    ];

    /// Call-syntax name; `None` for negation.
    pub fn function_name(self) -> Option<&'static str> {
        Some(match self {
            UnaryOp::Neg => return None,
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Abs => "abs",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Step => "step",
        })
    }

    pub fn from_function_name(name: &str) -> Option<Self> {
        Self::FUNCTIONS
            .into_iter()
            .find(|f| f.function_name() == Some(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }
}

/// Parsed formula.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Constant(f64),
    Variable(String),
    Unary(UnaryOp, Box<ExprNode>),
    Binary(BinaryOp, Box<ExprNode>, Box<ExprNode>),
}

impl ExprNode {
    pub fn var(name: impl Into<String>) -> Self {
        ExprNode::Variable(name.into())
    }

    pub fn unary(op: UnaryOp, child: ExprNode) -> Self {
        ExprNode::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, left: ExprNode, right: ExprNode) -> Self {
        ExprNode::Binary(op, Box::new(left), Box::new(right))
    }

    /// Every variable name referenced by the tree.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_variables(&mut out);
        out
    }

    fn collect_variables(&self, out: &mut BTreeSet<String>) {
        match self {
            ExprNode::Constant(_) => {}
            ExprNode::Variable(name) => {
                out.insert(name.clone());
            }
            ExprNode::Unary(_, c) => c.collect_variables(out),
            ExprNode::Binary(_, l, r) => {
                l.collect_variables(out);
                r.collect_variables(out);
            }
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            ExprNode::Constant(_) | ExprNode::Variable(_) => 1,
            ExprNode::Unary(_, c) => 1 + c.size(),
            ExprNode::Binary(_, l, r) => 1 + l.size() + r.size(),
        }
    }
}

/// Fully parenthesised output that re-parses to the same tree.
impl fmt::Display for ExprNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprNode::Constant(c) => {
                if c.is_sign_negative() {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            ExprNode::Variable(name) => f.write_str(name),
            ExprNode::Unary(UnaryOp::Neg, c) => write!(f, "(-({c}))"),
            ExprNode::Unary(op, c) => write!(f, "{}({c})", op.function_name().unwrap()),
            ExprNode::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

/// Names that formulas may reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymbolTable {
    known_names: BTreeSet<String>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>) -> bool {
        self.known_names.insert(name.into())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.known_names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.known_names.iter().map(String::as_str)
    }

    /// Names in `expr` that the table does not know.
    pub fn unresolved(&self, expr: &ExprNode) -> Vec<String> {
        expr.variables()
            .into_iter()
            .filter(|v| !self.known_names.contains(v))
            .collect()
    }

    pub fn check(&self, expr: &ExprNode) -> Result<(), FormulaError> {
        match self.unresolved(expr).into_iter().next() {
            Some(name) => Err(FormulaError::UnknownVariable(name)),
            None => Ok(()),
        }
    }
}

impl<S: Into<String>> FromIterator<S> for SymbolTable {
    fn from_iter<T: IntoIterator<Item = S>>(iter: T) -> Self {
        Self {
            known_names: iter.into_iter().map(Into::into).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_expr() -> impl Strategy<Value = ExprNode> {
        let leaf = prop_oneof![
            (-1e6f64..1e6).prop_map(ExprNode::Constant),
            (0u32..1000).prop_map(|k| ExprNode::Constant(k as f64 * 0.125)),
            "[a-z_][a-z0-9_]{0,6}".prop_map(ExprNode::Variable),
        ];
        leaf.prop_recursive(6, 64, 2, |inner| {
            let unary = prop_oneof![
                Just(UnaryOp::Neg),
                Just(UnaryOp::Log),
                Just(UnaryOp::Exp),
                Just(UnaryOp::Sin),
                Just(UnaryOp::Cos),
                Just(UnaryOp::Sqrt),
                Just(UnaryOp::Tanh),
                Just(UnaryOp::Abs),
                Just(UnaryOp::Sigmoid),
                Just(UnaryOp::Step),
            ];
            let binary = prop_oneof![
                Just(BinaryOp::Add),
                Just(BinaryOp::Sub),
                Just(BinaryOp::Mul),
                Just(BinaryOp::Div),
                Just(BinaryOp::Pow),
            ];
            prop_oneof![
                (unary, inner.clone()).prop_map(|(op, c)| ExprNode::unary(op, c)),
                (binary, inner.clone(), inner).prop_map(|(op, l, r)| ExprNode::binary(op, l, r)),
            ]
        })
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(expr in arb_expr()) {
            let text = expr.to_string();
            let reparsed = parse_formula(&text).unwrap();
            prop_assert_eq!(reparsed, expr);
        }
    }

    #[test]
    fn symbol_table_reports_unknown_names() {
        let table: SymbolTable = ["qa", "kappa"].into_iter().collect();
        let e = parse_formula("(qa - 1)/kappa + iota").unwrap();
        assert_eq!(table.unresolved(&e), vec!["iota".to_string()]);
        assert_eq!(table.check(&e), Err(FormulaError::UnknownVariable("iota".into())));
        let ok = parse_formula("qa*kappa").unwrap();
        assert!(table.check(&ok).is_ok());
    }
}
