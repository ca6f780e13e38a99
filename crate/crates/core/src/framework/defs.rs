//! Declarative problem description. The serde layout is the config file schema.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::networks::NetworkSpec;
use crate::optimizers::OptimizerConfig;

fn is_false(b: &bool) -> bool {
    !*b
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

fn default_low() -> f64 {
    -1.0
}

fn default_high() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateVariableDef {
    pub name: String,
    #[serde(default = "default_low")]
    pub low: f64,
    #[serde(default = "default_high")]
    pub high: f64,
    /// Fixed equispaced grid with this many points instead of uniform sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
}

impl StateVariableDef {
    pub fn new(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            low,
            high,
            grid_points: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnableRole {
    Agent,
    #[default]
    EndogenousVariable,
}

fn default_order() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnableDef {
    pub name: String,
    #[serde(default)]
    pub role: LearnableRole,
    #[serde(default = "default_order")]
    pub derivative_order: usize,
    /// `input_names` is filled from the state variables.
    pub network: NetworkSpec,
}

/// `lhs = rhs`, defining a new variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationDef {
    pub lhs: String,
    pub rhs: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub latex: bool,
}

impl EquationDef {
    pub fn new(lhs: &str, rhs: &str) -> Self {
        Self {
            lhs: lhs.into(),
            rhs: rhs.into(),
            latex: false,
        }
    }
}

/// Condition points: explicit, or one coordinate fixed with the others sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySampler {
    /// State variable held fixed.
    pub fix: String,
    /// Values cycled through for the fixed coordinate.
    pub values: Vec<f64>,
    /// Points drawn per epoch in total.
    #[serde(default = "default_condition_count")]
    pub count: usize,
}

fn default_condition_count() -> usize {
    100
}

/// Residual `lhs - rhs` driven to zero on a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub lhs: String,
    pub rhs: String,
    /// Explicit points, one row per point with one value per state variable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundarySampler>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub latex: bool,
}

impl ConditionDef {
    pub fn at_points(lhs: &str, rhs: &str, points: Vec<Vec<f64>>) -> Self {
        Self {
            label: None,
            lhs: lhs.into(),
            rhs: rhs.into(),
            points,
            boundary: None,
            weight: 1.0,
            latex: false,
        }
    }

    pub fn on_boundary(lhs: &str, rhs: &str, fix: &str, values: &[f64], count: usize) -> Self {
        Self {
            boundary: Some(BoundarySampler {
                fix: fix.into(),
                values: values.to_vec(),
                count,
            }),
            ..Self::at_points(lhs, rhs, vec![])
        }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// Residual `lhs - rhs` on the interior batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndogenousDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub lhs: String,
    pub rhs: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub latex: bool,
}

impl EndogenousDef {
    pub fn new(lhs: &str, rhs: &str) -> Self {
        Self {
            label: None,
            lhs: lhs.into(),
            rhs: rhs.into(),
            weight: 1.0,
            latex: false,
        }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// HJB expression whose optimum is driven to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub expr: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub latex: bool,
}

impl HjbDef {
    pub fn new(expr: &str) -> Self {
        Self {
            label: None,
            expr: expr.into(),
            weight: 1.0,
            latex: false,
        }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=", alias = "≤")]
    Le,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
            Comparator::Lt => "<",
            Comparator::Gt => ">",
        }
    }

    pub fn holds(self, l: f64, r: f64) -> bool {
        match self {
            Comparator::Le => l <= r,
            Comparator::Ge => l >= r,
            Comparator::Lt => l < r,
            Comparator::Gt => l > r,
        }
    }

    /// Splits `"a <= b"` at its first comparison operator.
    pub fn split(text: &str) -> Option<(&str, Comparator, &str)> {
        let bytes = text.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if b == b'<' || b == b'>' {
                let (cmp, len) = match (b, bytes.get(i + 1)) {
                    (b'<', Some(b'=')) => (Comparator::Le, 2),
                    (b'>', Some(b'=')) => (Comparator::Ge, 2),
                    (b'<', _) => (Comparator::Lt, 1),
                    _ => (Comparator::Gt, 1),
                };
                return Some((&text[..i], cmp, &text[i + len..]));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub lhs: String,
    pub comparator: Comparator,
    pub rhs: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub latex: bool,
}

impl ConstraintDef {
    pub fn new(lhs: &str, comparator: Comparator, rhs: &str) -> Self {
        Self {
            label: None,
            lhs: lhs.into(),
            comparator,
            rhs: rhs.into(),
            weight: 1.0,
            latex: false,
        }
    }
}

/// Equations and endogenous equations active where all constraints hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub constraints: Vec<ConstraintDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub equations: Vec<EquationDef>,
    /// Each endogenous weight is its in-system weight.
    pub endogenous: Vec<EndogenousDef>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
}

fn default_batch() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Longer schedule of the reference experiment, used by `--paper-scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl TrainingConfig {
    pub fn new(epochs: usize, optimizer: OptimizerConfig) -> Self {
        Self {
            batch_size: default_batch(),
            epochs,
            reference_epochs: None,
            seed: 0,
            optimizer,
        }
    }
}

/// One piece of a piecewise initial guess; the first piece whose `when`
/// holds (or that has none) applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuessPiece {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainDef {
    pub learnable: String,
    pub guess: Vec<GuessPiece>,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

/// Reference solution and checks used to judge a trained model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDef {
    /// Points per state variable for evaluation grids.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_grid: Vec<usize>,
    /// Closed-form solution per learnable variable.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub closed_form: BTreeMap<String, String>,
    /// Names of built-in property checks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<String>,
}

/// The complete declarative problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDefinition {
    pub name: String,
    pub state: Vec<StateVariableDef>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    /// Explicit names for LaTeX symbols (source text or default name to identifier).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub latex_names: BTreeMap<String, String>,
    pub learnable: Vec<LearnableDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub equations: Vec<EquationDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub endogenous: Vec<EndogenousDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hjb: Vec<HjbDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub systems: Vec<SystemDef>,
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pretrain: Vec<PretrainDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleDef>,
}

impl ModelDefinition {
    pub fn new(name: &str, state: Vec<StateVariableDef>, training: TrainingConfig) -> Self {
        Self {
            name: name.into(),
            state,
            params: BTreeMap::new(),
            latex_names: BTreeMap::new(),
            learnable: vec![],
            equations: vec![],
            conditions: vec![],
            endogenous: vec![],
            hjb: vec![],
            constraints: vec![],
            systems: vec![],
            training,
            pretrain: vec![],
            oracle: None,
        }
    }

    pub fn state_names(&self) -> Vec<String> {
        self.state.iter().map(|s| s.name.clone()).collect()
    }

    pub fn param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.into(), value);
        self
    }

    pub fn learnable(mut self, name: &str, role: LearnableRole, mut spec: NetworkSpec) -> Self {
        spec.input_names = self.state_names();
        self.learnable.push(LearnableDef {
            name: name.into(),
            role,
            derivative_order: default_order(),
            network: spec,
        });
        self
    }

    pub fn equation(mut self, lhs: &str, rhs: &str) -> Self {
        self.equations.push(EquationDef::new(lhs, rhs));
        self
    }

    pub fn endogenous(mut self, lhs: &str, rhs: &str) -> Self {
        self.endogenous.push(EndogenousDef::new(lhs, rhs));
        self
    }

    pub fn hjb(mut self, expr: &str) -> Self {
        self.hjb.push(HjbDef::new(expr));
        self
    }

    pub fn condition(mut self, c: ConditionDef) -> Self {
        self.conditions.push(c);
        self
    }

    pub fn constraint(mut self, c: ConstraintDef) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn system(mut self, s: SystemDef) -> Self {
        self.systems.push(s);
        self
    }

    /// Equations written in LaTeX.
    pub fn tex_equations(mut self, eqs: &[(&str, &str)]) -> Self {
        for (l, r) in eqs {
            self.equations.push(EquationDef {
                latex: true,
                ..EquationDef::new(l, r)
            });
        }
        self
    }

    /// Endogenous equations written in LaTeX.
    pub fn tex_endogenous(mut self, eqs: &[(&str, &str)]) -> Self {
        for (l, r) in eqs {
            self.endogenous.push(EndogenousDef {
                latex: true,
                ..EndogenousDef::new(l, r)
            });
        }
        self
    }

    /// HJB expressions written in LaTeX.
    pub fn tex_hjb(mut self, exprs: &[&str]) -> Self {
        for e in exprs {
            self.hjb.push(HjbDef {
                latex: true,
                ..HjbDef::new(e)
            });
        }
        self
    }
}
