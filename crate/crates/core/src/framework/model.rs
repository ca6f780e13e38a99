//! Building a [`ModelDefinition`] into an evaluable model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::autodiff::{input_jets, BatchedValue, DerivativeKeys, Graph, Jet, JetBasis};
use crate::formula::{evaluate, evaluate_jet, parse_formula, parse_latex, ExprNode, FormulaError, NameMap};
use crate::networks::{Network, NetworkError};

use super::defs::*;
use super::losses;

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("{context}: {source}")]
    Formula {
        context: String,
        #[source]
        source: FormulaError,
    },
    #[error("{context}: unknown name `{name}`")]
    UnknownName { name: String, context: String },
    #[error("{context}: `{name}` is defined by a later equation")]
    LaterDefinition { name: String, context: String },
    #[error("{context}: `{name}` needs derivative order {needed} but `{learnable}` provides {available}")]
    DerivativeOrder {
        name: String,
        learnable: String,
        needed: usize,
        available: usize,
        context: String,
    },
    #[error("name `{0}` is defined more than once")]
    Duplicate(String),
    #[error("network `{name}`: {source}")]
    Network {
        name: String,
        #[source]
        source: NetworkError,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub(crate) struct Equation {
    pub lhs: String,
    pub rhs: ExprNode,
}

#[derive(Debug, Clone)]
pub(crate) struct Residual {
    pub label: String,
    pub lhs: ExprNode,
    pub rhs: ExprNode,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Constraint {
    pub lhs: ExprNode,
    pub rhs: ExprNode,
    pub comparator: Comparator,
}

#[derive(Debug, Clone)]
pub(crate) struct Condition {
    pub residual: Residual,
    pub points: Option<Vec<Vec<f64>>>,
    pub boundary: Option<(usize, Vec<f64>, usize)>,
    pub plan: Plan,
}

#[derive(Debug, Clone)]
pub(crate) struct System {
    pub constraints: Vec<Constraint>,
    pub equations: Vec<Equation>,
    pub endogenous: Vec<Residual>,
}

/// A piecewise guess: first piece whose condition holds applies.
#[derive(Debug, Clone)]
pub(crate) struct Guess {
    pub pieces: Vec<(Option<(ExprNode, Comparator, ExprNode)>, ExprNode)>,
}

/// Which learnables (to which derivative order) and which equations a group
/// of formulas needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub orders: Vec<Option<usize>>,
    pub equations: Vec<bool>,
}

pub struct Learnable {
    pub def: LearnableDef,
    pub network: Network,
    pub keys: DerivativeKeys,
    /// Closed form replacing the network (frozen, no parameters).
    pub mock: Option<ExprNode>,
}

/// Points for one epoch: interior columns plus one column set per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub interior: Vec<Vec<f64>>,
    pub conditions: Vec<Vec<Vec<f64>>>,
}

/// Loss components recorded on a graph.
pub struct LossEval {
    pub components: Vec<BatchedValue>,
    pub total: BatchedValue,
}

pub struct Model {
    pub def: ModelDefinition,
    pub learnables: Vec<Learnable>,
    pub(crate) equations: Vec<Equation>,
    pub(crate) conditions: Vec<Condition>,
    pub(crate) constraints: Vec<Constraint>,
    pub(crate) endogenous: Vec<Residual>,
    pub(crate) hjb: Vec<Residual>,
    pub(crate) systems: Vec<System>,
    pub(crate) guesses: Vec<(usize, Guess)>,
    pub(crate) closed_forms: Vec<(String, ExprNode)>,
    labels: Vec<String>,
    weights: Vec<f64>,
    interior_plan: Plan,
}

fn formula(text: &str, latex: bool, names: &NameMap, context: &str) -> Result<ExprNode, BuildError> {
    let parsed = if latex {
        parse_latex(text, names)
    } else {
        parse_formula(text)
    };
    parsed.map_err(|source| BuildError::Formula {
        context: context.to_string(),
        source,
    })
}

fn lhs_name(text: &str, latex: bool, names: &NameMap, context: &str) -> Result<String, BuildError> {
    match formula(text, latex, names, context)? {
        ExprNode::Variable(n) => Ok(n),
        other => Err(BuildError::Invalid(format!(
            "{context}: left-hand side must be a single name, got `{other}`"
        ))),
    }
}

/// Equispaced points including both ends.
pub fn linspace(low: f64, high: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![low],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    high
                } else {
                    low + (high - low) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Cartesian grid as columns, first variable varying slowest.
pub fn grid_columns(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut cols = vec![Vec::with_capacity(total); axes.len()];
    for idx in 0..total {
        let mut rem = idx;
        for d in (0..axes.len()).rev() {
            let n = axes[d].len();
            cols[d].push(axes[d][rem % n]);
            rem /= n;
        }
    }
    cols
}

/// Draws an interior batch: uniform per variable, or the full fixed grid.
pub fn sample_batch(states: &[StateVariableDef], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if states.iter().any(|s| s.grid_points.is_some()) {
        let axes: Vec<Vec<f64>> = states
            .iter()
            .map(|s| linspace(s.low, s.high, s.grid_points.unwrap_or(1)))
            .collect();
        return grid_columns(&axes);
    }
    states
        .iter()
        .map(|s| (0..batch_size).map(|_| rng.gen_range(s.low..s.high)).collect())
        .collect()
}

impl Model {
    /// Validates the definition and initialises every network from `seed`.
    pub fn build(def: &ModelDefinition) -> Result<Self, BuildError> {
        let names: NameMap = def.latex_names.clone();
        let state_names = def.state_names();
        let d = state_names.len();
        if d == 0 {
            return Err(BuildError::Invalid("at least one state variable is required".into()));
        }
        for s in &def.state {
            if !(s.low < s.high) {
                return Err(BuildError::Invalid(format!(
                    "state `{}`: low ({}) must be below high ({})",
                    s.name, s.low, s.high
                )));
            }
        }
        let grid = def.state.iter().filter(|s| s.grid_points.is_some()).count();
        if grid != 0 && grid != d {
            return Err(BuildError::Invalid("either all or no state variables use grid_points".into()));
        }
        if def.training.batch_size == 0 {
            return Err(BuildError::Invalid("batch_size must be at least 1".into()));
        }
        def.training.optimizer.validate().map_err(BuildError::Invalid)?;

        let mut known: HashSet<String> = HashSet::new();
        let claim = |n: &str, known: &mut HashSet<String>| {
            if known.insert(n.to_string()) {
                Ok(())
            } else {
                Err(BuildError::Duplicate(n.to_string()))
            }
        };
        for n in &state_names {
            claim(n, &mut known)?;
        }
        for n in def.params.keys() {
            claim(n, &mut known)?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(def.training.seed);
        let mut learnables = Vec::new();
        for l in &def.learnable {
            claim(&l.name, &mut known)?;
            let mut spec = l.network.clone();
            spec.input_names = state_names.clone();
            let network = Network::init_with_rng(&spec, &mut rng).map_err(|source| BuildError::Network {
                name: l.name.clone(),
                source,
            })?;
            let keys = DerivativeKeys::build(&l.name, &state_names, l.derivative_order.max(1))
                .map_err(|e| BuildError::Invalid(e.to_string()))?;
            for e in keys.entries.iter().filter(|e| e.order <= l.derivative_order) {
                claim(&e.name, &mut known)?;
            }
            learnables.push(Learnable {
                def: l.clone(),
                network,
                keys,
                mock: None,
            });
        }

        let mut model = Model {
            def: def.clone(),
            learnables,
            equations: vec![],
            conditions: vec![],
            constraints: vec![],
            endogenous: vec![],
            hjb: vec![],
            systems: vec![],
            guesses: vec![],
            closed_forms: vec![],
            labels: vec![],
            weights: vec![],
            interior_plan: Plan {
                orders: vec![],
                equations: vec![],
            },
        };

        // global equations, each seeing only what precedes it
        let lhs_all: Vec<String> = def
            .equations
            .iter()
            .enumerate()
            .map(|(i, e)| lhs_name(&e.lhs, e.latex, &names, &format!("equation {}", i + 1)))
            .collect::<Result<_, _>>()?;
        for (i, e) in def.equations.iter().enumerate() {
            let ctx = format!("equation {} (`{}`)", i + 1, lhs_all[i]);
            let rhs = formula(&e.rhs, e.latex, &names, &ctx)?;
            model.check_names(&rhs, &known, &lhs_all[i..], &ctx)?;
            claim(&lhs_all[i], &mut known)?;
            model.equations.push(Equation {
                lhs: lhs_all[i].clone(),
                rhs,
            });
        }

        let mut labels: Vec<String> = Vec::new();
        let mut weights = Vec::new();
        let mut push_label = |label: String, w: f64, labels: &mut Vec<String>| {
            if labels.contains(&label) {
                return Err(BuildError::Duplicate(label));
            }
            labels.push(label);
            weights.push(w);
            Ok(())
        };

        for (i, c) in def.conditions.iter().enumerate() {
            let label = c.label.clone().unwrap_or_else(|| format!("cond_{}", i + 1));
            let ctx = format!("condition `{label}`");
            let lhs = formula(&c.lhs, c.latex, &names, &ctx)?;
            let rhs = formula(&c.rhs, c.latex, &names, &ctx)?;
            model.check_names(&lhs, &known, &[], &ctx)?;
            model.check_names(&rhs, &known, &[], &ctx)?;
            let boundary = match (&c.boundary, c.points.is_empty()) {
                (Some(b), true) => {
                    let idx = state_names.iter().position(|n| *n == b.fix).ok_or_else(|| BuildError::UnknownName {
                        name: b.fix.clone(),
                        context: ctx.clone(),
                    })?;
                    if b.values.is_empty() || b.count == 0 {
                        return Err(BuildError::Invalid(format!("{ctx}: boundary needs values and a positive count")));
                    }
                    Some((idx, b.values.clone(), b.count))
                }
                (None, false) => {
                    if c.points.iter().any(|p| p.len() != d) {
                        return Err(BuildError::Invalid(format!("{ctx}: every point needs {d} coordinates")));
                    }
                    None
                }
                _ => {
                    return Err(BuildError::Invalid(format!(
                        "{ctx}: give exactly one of `points` or `boundary`"
                    )))
                }
            };
            let plan = model.plan(&[&lhs, &rhs], &[]);
            let points = (!c.points.is_empty()).then(|| {
                (0..d).map(|k| c.points.iter().map(|p| p[k]).collect()).collect()
            });
            push_label(label.clone(), c.weight, &mut labels)?;
            model.conditions.push(Condition {
                residual: Residual {
                    label,
                    lhs,
                    rhs,
                    weight: c.weight,
                },
                points,
                boundary,
                plan,
            });
        }

        for (i, c) in def.constraints.iter().enumerate() {
            let label = c.label.clone().unwrap_or_else(|| format!("const_{}", i + 1));
            let built = model.constraint(c, label.clone(), &names, &known)?;
            push_label(label, c.weight, &mut labels)?;
            model.constraints.push(built);
        }
        for (i, e) in def.endogenous.iter().enumerate() {
            let label = e.label.clone().unwrap_or_else(|| format!("endog_{}", i + 1));
            let built = model.residual(e, label.clone(), &names, &known)?;
            push_label(label, e.weight, &mut labels)?;
            model.endogenous.push(built);
        }
        for (i, h) in def.hjb.iter().enumerate() {
            let label = h.label.clone().unwrap_or_else(|| format!("hjb_{}", i + 1));
            let ctx = format!("hjb `{label}`");
            let expr = formula(&h.expr, h.latex, &names, &ctx)?;
            model.check_names(&expr, &known, &[], &ctx)?;
            push_label(label.clone(), h.weight, &mut labels)?;
            model.hjb.push(Residual {
                label,
                lhs: expr,
                rhs: ExprNode::Constant(0.0),
                weight: h.weight,
            });
        }
        for (i, s) in def.systems.iter().enumerate() {
            let label = s.label.clone().unwrap_or_else(|| format!("system_{}", i + 1));
            let ctx = format!("system `{label}`");
            if s.constraints.is_empty() || s.endogenous.is_empty() {
                return Err(BuildError::Invalid(format!(
                    "{ctx}: needs at least one constraint and one endogenous equation"
                )));
            }
            let mut local = known.clone();
            let local_lhs: Vec<String> = s
                .equations
                .iter()
                .map(|e| lhs_name(&e.lhs, e.latex, &names, &ctx))
                .collect::<Result<_, _>>()?;
            let mut equations = Vec::new();
            for (j, e) in s.equations.iter().enumerate() {
                let rhs = formula(&e.rhs, e.latex, &names, &ctx)?;
                model.check_names(&rhs, &local, &local_lhs[j..], &ctx)?;
                if !local.insert(local_lhs[j].clone()) {
                    return Err(BuildError::Duplicate(local_lhs[j].clone()));
                }
                equations.push(Equation {
                    lhs: local_lhs[j].clone(),
                    rhs,
                });
            }
            let constraints = s
                .constraints
                .iter()
                .enumerate()
                .map(|(j, c)| model.constraint(c, format!("{label}.const_{}", j + 1), &names, &local))
                .collect::<Result<_, _>>()?;
            let endogenous = s
                .endogenous
                .iter()
                .enumerate()
                .map(|(j, e)| model.residual(e, format!("{label}.endog_{}", j + 1), &names, &local))
                .collect::<Result<_, _>>()?;
            push_label(label, s.weight, &mut labels)?;
            model.systems.push(System {
                constraints,
                equations,
                endogenous,
            });
        }

        let base: HashSet<String> = state_names.iter().chain(def.params.keys()).cloned().collect();
        for p in &def.pretrain {
            let idx = model
                .learnables
                .iter()
                .position(|l| l.def.name == p.learnable)
                .ok_or_else(|| BuildError::UnknownName {
                    name: p.learnable.clone(),
                    context: "pretrain".into(),
                })?;
            let ctx = format!("pretrain guess for `{}`", p.learnable);
            if p.guess.is_empty() {
                return Err(BuildError::Invalid(format!("{ctx}: no pieces")));
            }
            let mut pieces = Vec::new();
            for piece in &p.guess {
                let when = match &piece.when {
                    None => None,
                    Some(w) => {
                        let (l, cmp, r) = Comparator::split(w)
                            .ok_or_else(|| BuildError::Invalid(format!("{ctx}: `{w}` has no comparison")))?;
                        let l = formula(l, false, &names, &ctx)?;
                        let r = formula(r, false, &names, &ctx)?;
                        model.check_names(&l, &base, &[], &ctx)?;
                        model.check_names(&r, &base, &[], &ctx)?;
                        Some((l, cmp, r))
                    }
                };
                let value = formula(&piece.value, false, &names, &ctx)?;
                model.check_names(&value, &base, &[], &ctx)?;
                pieces.push((when, value));
            }
            model.guesses.push((idx, Guess { pieces }));
        }

        if let Some(o) = &def.oracle {
            if !o.eval_grid.is_empty() && o.eval_grid.len() != d {
                return Err(BuildError::Invalid(format!("oracle eval_grid needs {d} entries")));
            }
            for (name, text) in &o.closed_form {
                let ctx = format!("closed form for `{name}`");
                if !model.learnables.iter().any(|l| l.def.name == *name) {
                    return Err(BuildError::UnknownName {
                        name: name.clone(),
                        context: "oracle".into(),
                    });
                }
                let expr = formula(text, false, &names, &ctx)?;
                model.check_names(&expr, &base, &[], &ctx)?;
                model.closed_forms.push((name.clone(), expr));
            }
        }

        let mut interior: Vec<&ExprNode> = Vec::new();
        for c in &model.constraints {
            interior.extend([&c.lhs, &c.rhs]);
        }
        for r in model.endogenous.iter().chain(&model.hjb) {
            interior.extend([&r.lhs, &r.rhs]);
        }
        let mut locals: Vec<String> = Vec::new();
        for s in &model.systems {
            for c in &s.constraints {
                interior.extend([&c.lhs, &c.rhs]);
            }
            for e in &s.equations {
                interior.push(&e.rhs);
                locals.push(e.lhs.clone());
            }
            for r in &s.endogenous {
                interior.extend([&r.lhs, &r.rhs]);
            }
        }
        model.interior_plan = model.plan(&interior, &locals);
        model.labels = labels;
        model.weights = weights;
        Ok(model)
    }

    fn residual(&self, e: &EndogenousDef, label: String, names: &NameMap, known: &HashSet<String>) -> Result<Residual, BuildError> {
        let ctx = format!("endogenous equation `{label}`");
        let lhs = formula(&e.lhs, e.latex, names, &ctx)?;
        let rhs = formula(&e.rhs, e.latex, names, &ctx)?;
        self.check_names(&lhs, known, &[], &ctx)?;
        self.check_names(&rhs, known, &[], &ctx)?;
        Ok(Residual {
            label,
            lhs,
            rhs,
            weight: e.weight,
        })
    }

    fn constraint(&self, c: &ConstraintDef, label: String, names: &NameMap, known: &HashSet<String>) -> Result<Constraint, BuildError> {
        let ctx = format!("constraint `{label}`");
        let lhs = formula(&c.lhs, c.latex, names, &ctx)?;
        let rhs = formula(&c.rhs, c.latex, names, &ctx)?;
        self.check_names(&lhs, known, &[], &ctx)?;
        self.check_names(&rhs, known, &[], &ctx)?;
        Ok(Constraint {
            lhs,
            rhs,
            comparator: c.comparator,
        })
    }

    /// Splits a derivative-looking name into (learnable index, order).
    fn derivative_split(&self, name: &str) -> Option<(usize, usize)> {
        let states = self.def.state_names();
        for (i, l) in self.learnables.iter().enumerate() {
            let Some(rest) = name.strip_prefix(&format!("{}_", l.def.name)) else { continue };
            // fewest state names concatenating to `rest`
            let n = rest.len();
            let mut best: Vec<Option<usize>> = vec![None; n + 1];
            best[0] = Some(0);
            for p in 0..n {
                let Some(k) = best[p] else { continue };
                for s in &states {
                    if rest[p..].starts_with(s.as_str()) {
                        let q = p + s.len();
                        best[q] = Some(best[q].map_or(k + 1, |b: usize| b.min(k + 1)));
                    }
                }
            }
            if let Some(k) = best[n] {
                return Some((i, k));
            }
        }
        None
    }

    fn check_names(&self, expr: &ExprNode, known: &HashSet<String>, later: &[String], ctx: &str) -> Result<(), BuildError> {
        for v in expr.variables() {
            if known.contains(&v) {
                continue;
            }
            if later.contains(&v) {
                return Err(BuildError::LaterDefinition {
                    name: v,
                    context: ctx.to_string(),
                });
            }
            if let Some((i, needed)) = self.derivative_split(&v) {
                let l = &self.learnables[i].def;
                if needed > l.derivative_order {
                    return Err(BuildError::DerivativeOrder {
                        name: v,
                        learnable: l.name.clone(),
                        needed,
                        available: l.derivative_order,
                        context: ctx.to_string(),
                    });
                }
            }
            return Err(BuildError::UnknownName {
                name: v,
                context: ctx.to_string(),
            });
        }
        Ok(())
    }

    /// Dependencies of a formula group. `locals` are names defined inside it.
    pub(crate) fn plan(&self, exprs: &[&ExprNode], locals: &[String]) -> Plan {
        let mut plan = Plan {
            orders: vec![None; self.learnables.len()],
            equations: vec![false; self.equations.len()],
        };
        let mut stack: Vec<String> = exprs.iter().flat_map(|e| e.variables()).collect();
        let mut seen: HashSet<String> = HashSet::new();
        while let Some(name) = stack.pop() {
            if !seen.insert(name.clone()) || locals.contains(&name) {
                continue;
            }
            if let Some(j) = self.equations.iter().position(|e| e.lhs == name) {
                plan.equations[j] = true;
                stack.extend(self.equations[j].rhs.variables());
                continue;
            }
            let need = |plan: &mut Plan, i: usize, k: usize| {
                plan.orders[i] = Some(plan.orders[i].map_or(k, |o| o.max(k)));
            };
            if let Some(i) = self.learnables.iter().position(|l| l.def.name == name) {
                need(&mut plan, i, 0);
            } else if let Some((i, k)) = self.derivative_split(&name) {
                need(&mut plan, i, k);
            }
        }
        plan
    }

    /// Plan covering every learnable to its full order and every equation.
    pub fn full_plan(&self) -> Plan {
        Plan {
            orders: self.learnables.iter().map(|l| Some(l.def.derivative_order)).collect(),
            equations: vec![true; self.equations.len()],
        }
    }

    pub fn state_names(&self) -> Vec<String> {
        self.def.state_names()
    }

    /// Loss component labels in total-loss order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn equation_names(&self) -> Vec<String> {
        self.equations.iter().map(|e| e.lhs.clone()).collect()
    }

    pub fn learnable_index(&self, name: &str) -> Option<usize> {
        self.learnables.iter().position(|l| l.def.name == name)
    }

    /// Closed-form oracle expressions declared by the definition.
    pub fn closed_forms(&self) -> &[(String, ExprNode)] {
        &self.closed_forms
    }

    /// Replaces a learnable by a frozen closed form of the state variables.
    pub fn inject_closed_form(&mut self, name: &str, expr: ExprNode) -> Result<(), BuildError> {
        let i = self.learnable_index(name).ok_or_else(|| BuildError::UnknownName {
            name: name.into(),
            context: "closed form".into(),
        })?;
        let base: HashSet<String> = self.state_names().into_iter().chain(self.def.params.keys().cloned()).collect();
        self.check_names(&expr, &base, &[], "closed form")?;
        self.learnables[i].mock = Some(expr);
        Ok(())
    }

    /// Injects every closed form listed in the oracle.
    pub fn inject_all_closed_forms(&mut self) -> Result<(), BuildError> {
        for (name, expr) in self.closed_forms.clone() {
            self.inject_closed_form(&name, expr)?;
        }
        Ok(())
    }

    /// Flat parameter vector over all trainable learnables, in order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.learnables
            .iter()
            .filter(|l| l.mock.is_none())
            .flat_map(|l| l.network.state.flatten())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in self.learnables.iter_mut().filter(|l| l.mock.is_none()) {
            k += l.network.state.assign_flat(&flat[k..]);
        }
    }

    pub fn networks(&self) -> Vec<Network> {
        self.learnables.iter().map(|l| l.network.clone()).collect()
    }

    pub fn set_networks(&mut self, nets: &[Network]) {
        for (l, n) in self.learnables.iter_mut().zip(nets) {
            l.network = n.clone();
        }
    }

    /// Records every network's parameters on the graph.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Vec<BatchedValue>> {
        self.learnables
            .iter()
            .map(|l| match (&l.mock, trainable) {
                (Some(_), _) => vec![],
                (None, true) => l.network.bind(g),
                (None, false) => l.network.bind_frozen(g),
            })
            .collect()
    }

    /// Gradient of `output` collected into the flat parameter layout.
    pub fn collect_grads(&self, g: &Graph, bound: &[Vec<BatchedValue>], output: BatchedValue) -> Vec<f64> {
        let grads = g.backward(output);
        let mut flat = Vec::new();
        for (l, params) in self.learnables.iter().zip(bound) {
            if l.mock.is_some() {
                continue;
            }
            for (&p, t) in params.iter().zip(&l.network.state.tensors) {
                flat.extend(grads.get_or_zeros(p, t.dim()).iter().copied());
            }
        }
        flat
    }

    fn base_context(&self, g: &mut Graph, cols: &[Vec<f64>]) -> (HashMap<String, BatchedValue>, Vec<BatchedValue>) {
        let mut ctx = HashMap::new();
        let mut col_nodes = Vec::new();
        for (s, c) in self.def.state.iter().zip(cols) {
            let v = g.row(c.clone());
            ctx.insert(s.name.clone(), v);
            col_nodes.push(v);
        }
        for (k, &v) in &self.def.params {
            let s = g.scalar(v);
            ctx.insert(k.clone(), s);
        }
        (ctx, col_nodes)
    }

    /// Variables needed by `plan` at the given points (columns per state).
    pub fn evaluate_plan(
        &self,
        g: &mut Graph,
        bound: &[Vec<BatchedValue>],
        cols: &[Vec<f64>],
        plan: &Plan,
    ) -> Result<HashMap<String, BatchedValue>, FormulaError> {
        let batch = cols.first().map_or(0, |c| c.len());
        let (mut ctx, col_nodes) = self.base_context(g, cols);
        let mut jets_by_order: BTreeMap<usize, (Rc<JetBasis>, Vec<Jet>)> = BTreeMap::new();
        for (i, l) in self.learnables.iter().enumerate() {
            let Some(order) = plan.orders[i] else { continue };
            let (basis, inputs) = jets_by_order
                .entry(order)
                .or_insert_with(|| {
                    let basis = JetBasis::new(col_nodes.len(), order);
                    let inputs = input_jets(g, &basis, &col_nodes);
                    (basis, inputs)
                })
                .clone();
            let out = match &l.mock {
                Some(expr) => {
                    let vars: BTreeMap<String, Jet> = self
                        .def
                        .state
                        .iter()
                        .map(|s| s.name.clone())
                        .zip(inputs.iter().cloned())
                        .collect();
                    evaluate_jet(expr, &vars, &ctx, &basis, g)?
                }
                None => l
                    .network
                    .forward(g, &bound[i], &inputs)
                    .expect("network inputs match state variables"),
            };
            for (k, v) in l.keys.extract(g, &out, order, batch) {
                ctx.insert(k, v);
            }
        }
        for (j, e) in self.equations.iter().enumerate() {
            if plan.equations[j] {
                let v = evaluate(&e.rhs, &ctx, g)?;
                ctx.insert(e.lhs.clone(), v);
            }
        }
        Ok(ctx)
    }

    /// Every learnable, derivative and equation-defined variable at the points.
    pub fn evaluate_variables(
        &self,
        g: &mut Graph,
        bound: &[Vec<BatchedValue>],
        cols: &[Vec<f64>],
    ) -> Result<HashMap<String, BatchedValue>, FormulaError> {
        self.evaluate_plan(g, bound, cols, &self.full_plan())
    }

    /// Learnable and equation-defined variables as plain columns.
    pub fn evaluate_table(&self, cols: &[Vec<f64>]) -> Result<Vec<(String, Vec<f64>)>, FormulaError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let ctx = self.evaluate_variables(&mut g, &bound, cols)?;
        let n = cols.first().map_or(0, |c| c.len());
        let names = self
            .learnables
            .iter()
            .map(|l| l.def.name.clone())
            .chain(self.equation_names());
        Ok(names
            .map(|name| {
                let v = widen(g.data(ctx[&name]), n);
                (name, v)
            })
            .collect())
    }

    /// Pointwise residuals `lhs - rhs` of endogenous, HJB and system equations.
    /// System residuals are NaN where the system is inactive.
    pub fn residual_table(&self, cols: &[Vec<f64>]) -> Result<Vec<(String, Vec<f64>)>, FormulaError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let ctx = self.evaluate_variables(&mut g, &bound, cols)?;
        let n = cols.first().map_or(0, |c| c.len());
        let mut out = Vec::new();
        for r in self.endogenous.iter().chain(&self.hjb) {
            let l = evaluate(&r.lhs, &ctx, &mut g)?;
            let rv = evaluate(&r.rhs, &ctx, &mut g)?;
            let d = g.sub(l, rv);
            out.push((r.label.clone(), widen(g.data(d), n)));
        }
        for s in &self.systems {
            let mut local = ctx.clone();
            for e in &s.equations {
                let v = evaluate(&e.rhs, &local, &mut g)?;
                local.insert(e.lhs.clone(), v);
            }
            let mask = self.system_mask(&mut g, &local, s, n)?;
            for r in &s.endogenous {
                let l = evaluate(&r.lhs, &local, &mut g)?;
                let rv = evaluate(&r.rhs, &local, &mut g)?;
                let d = g.sub(l, rv);
                let vals = widen(g.data(d), n)
                    .into_iter()
                    .zip(&mask)
                    .map(|(v, &m)| if m { v } else { f64::NAN })
                    .collect();
                out.push((r.label.clone(), vals));
            }
        }
        Ok(out)
    }

    /// Labels of the HJB components.
    pub fn hjb_labels(&self) -> Vec<String> {
        self.hjb.iter().map(|h| h.label.clone()).collect()
    }

    fn system_mask(
        &self,
        g: &mut Graph,
        ctx: &HashMap<String, BatchedValue>,
        s: &System,
        n: usize,
    ) -> Result<Vec<bool>, FormulaError> {
        let mut mask = vec![true; n];
        for c in &s.constraints {
            let l = evaluate(&c.lhs, ctx, g)?;
            let r = evaluate(&c.rhs, ctx, g)?;
            let (lv, rv) = (widen(g.data(l), n), widen(g.data(r), n));
            for k in 0..n {
                mask[k] &= c.comparator.holds(lv[k], rv[k]);
            }
        }
        Ok(mask)
    }

    /// Points for one epoch.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Batch {
        let interior = sample_batch(&self.def.state, self.def.training.batch_size, rng);
        let conditions = self
            .conditions
            .iter()
            .map(|c| match (&c.points, &c.boundary) {
                (Some(p), _) => p.clone(),
                (None, Some((fix, values, count))) => {
                    let mut cols = vec![Vec::with_capacity(*count); self.def.state.len()];
                    for k in 0..*count {
                        for (d, s) in self.def.state.iter().enumerate() {
                            let v = if d == *fix {
                                values[k % values.len()]
                            } else {
                                rng.gen_range(s.low..s.high)
                            };
                            cols[d].push(v);
                        }
                    }
                    cols
                }
                (None, None) => unreachable!("validated at build"),
            })
            .collect();
        Batch { interior, conditions }
    }

    /// All loss components and the weighted total on a batch.
    pub fn losses(&self, g: &mut Graph, bound: &[Vec<BatchedValue>], batch: &Batch) -> Result<LossEval, FormulaError> {
        let mut components = Vec::with_capacity(self.labels.len());
        for (c, cols) in self.conditions.iter().zip(&batch.conditions) {
            let ctx = self.evaluate_plan(g, bound, cols, &c.plan)?;
            let l = evaluate(&c.residual.lhs, &ctx, g)?;
            let r = evaluate(&c.residual.rhs, &ctx, g)?;
            components.push(losses::residual_mse(g, l, r));
        }
        let needs_interior = !(self.constraints.is_empty()
            && self.endogenous.is_empty()
            && self.hjb.is_empty()
            && self.systems.is_empty());
        if needs_interior {
            let ctx = self.evaluate_plan(g, bound, &batch.interior, &self.interior_plan)?;
            for c in &self.constraints {
                let l = evaluate(&c.lhs, &ctx, g)?;
                let r = evaluate(&c.rhs, &ctx, g)?;
                components.push(losses::constraint_loss(g, l, r, c.comparator));
            }
            for e in self.endogenous.iter().chain(&self.hjb) {
                let l = evaluate(&e.lhs, &ctx, g)?;
                let r = evaluate(&e.rhs, &ctx, g)?;
                components.push(losses::residual_mse(g, l, r));
            }
            let n = batch.interior.first().map_or(0, |c| c.len());
            for s in &self.systems {
                components.push(self.system_loss(g, &ctx, s, n)?);
            }
        }
        let total = losses::weighted_total(g, &components, &self.weights);
        Ok(LossEval { components, total })
    }

    fn system_loss(
        &self,
        g: &mut Graph,
        global: &HashMap<String, BatchedValue>,
        s: &System,
        n: usize,
    ) -> Result<BatchedValue, FormulaError> {
        let mut ctx = global.clone();
        for e in &s.equations {
            let v = evaluate(&e.rhs, &ctx, g)?;
            ctx.insert(e.lhs.clone(), v);
        }
        let mask = self.system_mask(g, &ctx, s, n)?;
        let mut parts = Vec::new();
        let mut weights = Vec::new();
        for e in &s.endogenous {
            let l = evaluate(&e.lhs, &ctx, g)?;
            let r = evaluate(&e.rhs, &ctx, g)?;
            parts.push(losses::masked_mse(g, l, r, &mask));
            weights.push(e.weight);
        }
        Ok(losses::weighted_total(g, &parts, &weights))
    }

    /// Total loss and flat gradient on a batch. The gradient is empty when
    /// the loss is not finite.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>, Vec<f64>), FormulaError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let eval = self.losses(&mut g, &bound, batch)?;
        let total = g.item(eval.total);
        let values = eval.components.iter().map(|&c| g.item(c)).collect();
        if !total.is_finite() {
            return Ok((total, vec![], values));
        }
        let grads = if g.requires_grad(eval.total) {
            self.collect_grads(&g, &bound, eval.total)
        } else {
            vec![0.0; self.flat_params().len()]
        };
        Ok((total, grads, values))
    }

    /// Loss components without gradients.
    pub fn loss_values(&self, batch: &Batch) -> Result<(f64, Vec<f64>), FormulaError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let eval = self.losses(&mut g, &bound, batch)?;
        Ok((g.item(eval.total), eval.components.iter().map(|&c| g.item(c)).collect()))
    }

    pub(crate) fn guess_values(&self, guess: &Guess, cols: &[Vec<f64>]) -> Result<Vec<f64>, FormulaError> {
        let mut g = Graph::new();
        let (ctx, _) = self.base_context(&mut g, cols);
        let n = cols.first().map_or(0, |c| c.len());
        let mut out = vec![f64::NAN; n];
        let mut done = vec![false; n];
        for (when, value) in &guess.pieces {
            let v = evaluate(value, &ctx, &mut g)?;
            let v = widen(g.data(v), n);
            let holds = match when {
                None => vec![true; n],
                Some((l, cmp, r)) => {
                    let lv = evaluate(l, &ctx, &mut g)?;
                    let rv = evaluate(r, &ctx, &mut g)?;
                    let (lv, rv) = (widen(g.data(lv), n), widen(g.data(rv), n));
                    (0..n).map(|k| cmp.holds(lv[k], rv[k])).collect()
                }
            };
            for k in 0..n {
                if !done[k] && holds[k] {
                    out[k] = v[k];
                    done[k] = true;
                }
            }
        }
        Ok(out)
    }
}

/// Broadcasts a single value to `n` entries.
fn widen(v: Vec<f64>, n: usize) -> Vec<f64> {
    if v.len() == 1 && n != 1 {
        vec![v[0]; n]
    } else {
        v
    }
}

/// A `(1, n)` constant row.
pub(crate) fn row_const(g: &mut Graph, values: &[f64]) -> BatchedValue {
    g.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
}
