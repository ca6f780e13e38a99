//! Adam, AdamW and L-BFGS over one flat parameter vector.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    AdamW,
    Lbfgs,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    1e-2
}
fn d_history() -> usize {
    10
}
fn d_line_search() -> usize {
    25
}
fn d_tol_grad() -> f64 {
    1e-7
}
fn d_tol_change() -> f64 {
    1e-9
}
fn d_max_iter() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decoupled decay; only used by AdamW.
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_history")]
    pub history_size: usize,
    #[serde(default = "d_line_search")]
    pub max_line_search_steps: usize,
    #[serde(default = "d_tol_grad")]
    pub tolerance_grad: f64,
    #[serde(default = "d_tol_change")]
    pub tolerance_change: f64,
    /// L-BFGS iterations per training step, all on the same batch.
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            history_size: d_history(),
            max_line_search_steps: d_line_search(),
            tolerance_grad: d_tol_grad(),
            tolerance_change: d_tol_change(),
            max_iter: d_max_iter(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn lbfgs(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Lbfgs,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        Ok(())
    }
}

/// What a step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Loss or gradient was not finite; parameters untouched.
    SkippedNonFinite,
    /// No trial point satisfied the sufficient-decrease test.
    LineSearchFailed,
    /// Gradient already below tolerance.
    Converged,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    #[serde(with = "crate::codec::vec")]
    pub m: Vec<f64>,
    #[serde(with = "crate::codec::vec")]
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LbfgsState {
    pub iterations: u64,
    #[serde(with = "crate::codec::vec_of_vec")]
    pub s: Vec<Vec<f64>>,
    #[serde(with = "crate::codec::vec_of_vec")]
    pub y: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerState {
    Adam(AdamState),
    Lbfgs(LbfgsState),
}

/// Stateful optimizer. Deterministic given config, state and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Sufficient-decrease constant of the Armijo test.
const ARMIJO_C1: f64 = 1e-4;

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        let state = match config.kind {
            OptimizerKind::Adam | OptimizerKind::AdamW => OptimizerState::Adam(AdamState::default()),
            OptimizerKind::Lbfgs => OptimizerState::Lbfgs(LbfgsState::default()),
        };
        Self { config, state }
    }

    pub fn is_lbfgs(&self) -> bool {
        self.config.kind == OptimizerKind::Lbfgs
    }

    /// Adam / AdamW update from a gradient. L-BFGS needs [`step_closure`](Self::step_closure).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> StepOutcome {
        let c = &self.config;
        let OptimizerState::Adam(st) = &mut self.state else {
            panic!("L-BFGS requires step_closure");
        };
        if !all_finite(grads) {
            return StepOutcome::SkippedNonFinite;
        }
        if st.m.len() != params.len() {
            st.m = vec![0.0; params.len()];
            st.v = vec![0.0; params.len()];
        }
        if c.kind == OptimizerKind::AdamW {
            let decay = 1.0 - c.learning_rate * c.weight_decay;
            for p in params.iter_mut() {
                *p *= decay;
            }
        }
        st.step += 1;
        let bc1 = 1.0 - c.beta1.powi(st.step as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
        StepOutcome::Applied
    }

    /// One optimizer step driven by a loss-and-gradient closure. For Adam
    /// variants the closure is called once.
    pub fn step_closure(
        &mut self,
        params: &mut [f64],
        closure: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    ) -> StepOutcome {
        if !self.is_lbfgs() {
            let (loss, grads) = closure(params);
            if !loss.is_finite() {
                return StepOutcome::SkippedNonFinite;
            }
            return self.step(params, &grads);
        }
        let (loss, grads) = closure(params);
        self.lbfgs(params, loss, grads, closure)
    }

    /// L-BFGS starting from an already evaluated `(loss, grads)` at `params`.
    pub fn lbfgs(
        &mut self,
        params: &mut [f64],
        mut loss: f64,
        mut grads: Vec<f64>,
        closure: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    ) -> StepOutcome {
        let c = self.config.clone();
        let OptimizerState::Lbfgs(st) = &mut self.state else {
            panic!("not an L-BFGS optimizer");
        };
        if !loss.is_finite() || !all_finite(&grads) {
            return StepOutcome::SkippedNonFinite;
        }
        let mut history: VecDeque<(Vec<f64>, Vec<f64>)> =
            st.s.drain(..).zip(st.y.drain(..)).collect();
        let mut outcome = StepOutcome::Converged;
        for _ in 0..c.max_iter.max(1) {
            if grads.iter().fold(0.0f64, |m, g| m.max(g.abs())) <= c.tolerance_grad {
                break;
            }
            let mut dir = two_loop(&history, &grads);
            let mut slope = dot(&grads, &dir);
            if !(slope < 0.0) {
                history.clear();
                dir = grads.iter().map(|g| -g).collect();
                slope = dot(&grads, &dir);
            }
            // backtracking Armijo from the configured rate
            let mut t = c.learning_rate;
            let mut accepted = None;
            let mut trial = params.to_vec();
            for _ in 0..c.max_line_search_steps.max(1) {
                for i in 0..trial.len() {
                    trial[i] = params[i] + t * dir[i];
                }
                let (f, g) = closure(&trial);
                if f.is_finite() && all_finite(&g) && f <= loss + ARMIJO_C1 * t * slope {
                    accepted = Some((f, g));
                    break;
                }
                t *= 0.5;
            }
            let Some((new_loss, new_grads)) = accepted else {
                if outcome == StepOutcome::Converged {
                    outcome = StepOutcome::LineSearchFailed;
                }
                break;
            };
            let s: Vec<f64> = dir.iter().map(|d| t * d).collect();
            let y: Vec<f64> = new_grads.iter().zip(&grads).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 1e-10 && c.history_size > 0 {
                if history.len() == c.history_size {
                    history.pop_front();
                }
                history.push_back((s, y));
            }
            params.copy_from_slice(&trial);
            let change = (loss - new_loss).abs();
            loss = new_loss;
            grads = new_grads;
            st.iterations += 1;
            outcome = StepOutcome::Applied;
            if change < c.tolerance_change {
                break;
            }
        }
        for (s, y) in history {
            st.s.push(s);
            st.y.push(y);
        }
        outcome
    }

    pub fn serialize_state(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("optimizer state serializes")
    }

    pub fn restore_state(&mut self, value: serde_json::Value) -> Result<(), String> {
        let state: OptimizerState = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let matches = matches!(
            (&state, self.config.kind),
            (OptimizerState::Adam(_), OptimizerKind::Adam | OptimizerKind::AdamW)
                | (OptimizerState::Lbfgs(_), OptimizerKind::Lbfgs)
        );
        if !matches {
            return Err("optimizer state does not match the configured kind".into());
        }
        self.state = state;
        Ok(())
    }
}

/// `-H g` by the two-loop recursion; `H0 = (s·y / y·y) I` from the newest pair.
fn two_loop(history: &VecDeque<(Vec<f64>, Vec<f64>)>, grads: &[f64]) -> Vec<f64> {
    let mut q = grads.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push((a, rho));
    }
    if let Some((s, y)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in &mut q {
            *v *= gamma;
        }
    }
    for ((s, y), (a, rho)) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += s[i] * (a - b);
        }
    }
    q.iter().map(|v| -v).collect()
}
