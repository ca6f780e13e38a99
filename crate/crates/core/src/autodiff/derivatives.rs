//! Named derivative tables built level by level.
//!
//! Level 1 holds `f_xi` for each state `xi`; level `k` holds the first
//! derivative of every level `k-1` entry with respect to every state, keyed by
//! appending the state name. Both orderings of mixed partials get their own
//! key. Values come from one jet evaluation, so `f_x1x2` and `f_x2x1` are
//! bitwise identical.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use thiserror::Error;

use super::graph::{BatchedValue, Graph};
use super::jet::{Jet, JetBasis};

#[derive(Debug, Error, PartialEq)]
pub enum DerivativeError {
    #[error("derivative order must be at least 1, got {0}")]
    ZeroOrder(usize),
    #[error("no state variables to differentiate with respect to")]
    NoStateVariables,
    #[error("unknown derivative entry `{0}`")]
    UnknownEntry(String),
}

/// A function that can be evaluated on jets of its inputs.
pub trait JetFunction {
    fn eval_jet(&self, g: &mut Graph, inputs: &[Jet]) -> Jet;
}

impl<F> JetFunction for F
where
    F: Fn(&mut Graph, &[Jet]) -> Jet,
{
    fn eval_jet(&self, g: &mut Graph, inputs: &[Jet]) -> Jet {
        self(g, inputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEntry {
    pub name: String,
    pub order: usize,
    /// Entry this one differentiates (`None` for first-order entries).
    pub parent: Option<usize>,
    /// State index differentiated with respect to.
    pub wrt: usize,
    multi_index: Vec<u8>,
}

/// The key set of a derivative map; independent of the function values.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeKeys {
    pub base: String,
    pub state_names: Vec<String>,
    pub order: usize,
    pub entries: Vec<DerivativeEntry>,
}

impl DerivativeKeys {
    pub fn build(base: &str, state_names: &[String], order: usize) -> Result<Self, DerivativeError> {
        if order < 1 {
            return Err(DerivativeError::ZeroOrder(order));
        }
        if state_names.is_empty() {
            return Err(DerivativeError::NoStateVariables);
        }
        let d = state_names.len();
        let mut entries: Vec<DerivativeEntry> = Vec::new();
        // (entry index, suffix) of the previous level
        let mut prev_level: Vec<(usize, String)> = Vec::new();
        for (i, name) in state_names.iter().enumerate() {
            let mut m = vec![0u8; d];
            m[i] = 1;
            entries.push(DerivativeEntry {
                name: format!("{base}_{name}"),
                order: 1,
                parent: None,
                wrt: i,
                multi_index: m,
            });
            prev_level.push((entries.len() - 1, name.clone()));
        }
        for o in 2..=order {
            let mut level = Vec::new();
            for (i, name) in state_names.iter().enumerate() {
                for (prev_idx, suffix) in &prev_level {
                    let mut m = entries[*prev_idx].multi_index.clone();
                    m[i] += 1;
                    let suffix = format!("{suffix}{name}");
                    entries.push(DerivativeEntry {
                        name: format!("{base}_{suffix}"),
                        order: o,
                        parent: Some(*prev_idx),
                        wrt: i,
                        multi_index: m,
                    });
                    level.push((entries.len() - 1, suffix));
                }
            }
            prev_level = level;
        }
        Ok(Self {
            base: base.to_string(),
            state_names: state_names.to_vec(),
            order,
            entries,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.base.as_str()).chain(self.entries.iter().map(|e| e.name.as_str()))
    }

    pub fn entry(&self, name: &str) -> Option<&DerivativeEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Derivative order needed for `name` (0 for the base function).
    pub fn order_of(&self, name: &str) -> Option<usize> {
        if name == self.base {
            Some(0)
        } else {
            self.entry(name).map(|e| e.order)
        }
    }

    /// Extracts named values from an evaluated jet, keeping entries of order
    /// `<= max_order`. Structurally zero derivatives become zero rows.
    pub fn extract(&self, g: &mut Graph, jet: &Jet, max_order: usize, batch: usize) -> BTreeMap<String, BatchedValue> {
        // constant coefficients are stored as (1, 1); widen them to the batch
        let widen = |g: &mut Graph, v: BatchedValue| {
            if g.shape(v) == (1, batch) {
                v
            } else {
                let z = g.constant(Array2::zeros((1, batch)));
                g.add(v, z)
            }
        };
        let mut out = BTreeMap::new();
        let base = widen(g, jet.value());
        out.insert(self.base.clone(), base);
        for e in self.entries.iter().filter(|e| e.order <= max_order) {
            let v = match jet.derivative(g, &e.multi_index) {
                Some(v) => widen(g, v),
                None => g.constant(Array2::zeros((1, batch))),
            };
            out.insert(e.name.clone(), v);
        }
        out
    }
}

/// Derivative table bound to the function it differentiates.
pub struct DerivativeMap<F> {
    pub keys: DerivativeKeys,
    function: F,
}

/// Builds the table of all derivatives of `f` up to `order`.
pub fn build_derivative_map<F: JetFunction>(
    f: F,
    base: &str,
    state_names: &[String],
    order: usize,
) -> Result<DerivativeMap<F>, DerivativeError> {
    Ok(DerivativeMap {
        keys: DerivativeKeys::build(base, state_names, order)?,
        function: f,
    })
}

/// Jets of the state inputs at a batch of points.
pub fn input_jets(g: &mut Graph, basis: &Rc<JetBasis>, columns: &[BatchedValue]) -> Vec<Jet> {
    columns
        .iter()
        .enumerate()
        .map(|(i, &c)| Jet::variable(g, basis, c, i))
        .collect()
}

impl<F: JetFunction> DerivativeMap<F> {
    /// Evaluates every entry (and the base function) at the given state
    /// columns, each of shape `(1, B)`.
    pub fn evaluate(&self, g: &mut Graph, columns: &[BatchedValue]) -> BTreeMap<String, BatchedValue> {
        self.evaluate_up_to(g, columns, self.keys.order)
    }

    pub fn evaluate_up_to(&self, g: &mut Graph, columns: &[BatchedValue], max_order: usize) -> BTreeMap<String, BatchedValue> {
        let order = max_order.min(self.keys.order);
        let basis = JetBasis::new(columns.len(), order);
        let inputs = input_jets(g, &basis, columns);
        let jet = self.function.eval_jet(g, &inputs);
        let batch = g.shape(columns[0]).1;
        self.keys.extract(g, &jet, order, batch)
    }

    /// Evaluates one named entry.
    pub fn evaluate_entry(&self, g: &mut Graph, name: &str, columns: &[BatchedValue]) -> Result<BatchedValue, DerivativeError> {
        let order = self
            .keys
            .order_of(name)
            .ok_or_else(|| DerivativeError::UnknownEntry(name.to_string()))?;
        let values = self.evaluate_up_to(g, columns, order);
        Ok(values[name])
    }
}
