//! Comparing a trained model with its problem's reference.

use std::collections::HashMap;

use crate::autodiff::Graph;
use crate::formula::{evaluate, FormulaError};
use crate::framework::{grid_columns, linspace, LossReport, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct VariableError {
    pub name: String,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub problem: String,
    pub closed_form: Vec<VariableError>,
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn error(&self, name: &str) -> Option<&VariableError> {
        self.closed_form.iter().find(|e| e.name == name)
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Largest drop between consecutive values.
/// Largest fall below an earlier value, so slow sagging counts in full.
fn max_decrease(v: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &x in v {
        peak = peak.max(x);
        worst = worst.max(peak - x);
    }
    worst
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn result(name: &str, measured: f64, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: passed && !measured.is_nan(),
        measured,
        detail: detail.into(),
    }
}

/// Points of the oracle grid as state columns.
pub fn oracle_grid(model: &Model) -> Vec<Vec<f64>> {
    let counts = model.def.oracle.as_ref().map(|o| o.eval_grid.clone()).unwrap_or_default();
    let axes: Vec<Vec<f64>> = model
        .def
        .state
        .iter()
        .enumerate()
        .map(|(i, s)| linspace(s.low, s.high, counts.get(i).copied().unwrap_or(101)))
        .collect();
    grid_columns(&axes)
}

/// Closed-form values of every oracle expression at the points.
pub fn closed_form_values(model: &Model, cols: &[Vec<f64>]) -> Result<Vec<(String, Vec<f64>)>, FormulaError> {
    let mut g = Graph::new();
    let mut ctx = HashMap::new();
    for (s, c) in model.def.state.iter().zip(cols) {
        let v = g.row(c.clone());
        ctx.insert(s.name.clone(), v);
    }
    for (k, &v) in &model.def.params {
        let s = g.scalar(v);
        ctx.insert(k.clone(), s);
    }
    let n = cols.first().map_or(0, |c| c.len());
    model
        .closed_forms()
        .iter()
        .map(|(name, expr)| {
            let v = evaluate(expr, &ctx, &mut g)?;
            let mut data = g.data(v);
            if data.len() == 1 && n != 1 {
                data = vec![data[0]; n];
            }
            Ok((name.clone(), data))
        })
        .collect()
}

/// Errors against closed forms and the named property checks, on the
/// oracle grid. `last` is the final training report, used by loss checks.
pub fn evaluate_against_oracle(model: &Model, last: Option<&LossReport>) -> Result<OracleReport, FormulaError> {
    let cols = oracle_grid(model);
    let table: HashMap<String, Vec<f64>> = model.evaluate_table(&cols)?.into_iter().collect();
    let exact = closed_form_values(model, &cols)?;
    let closed_form = exact
        .iter()
        .map(|(name, want)| {
            let got = &table[name];
            let diffs = got.iter().zip(want).map(|(a, b)| a - b);
            VariableError {
                name: name.clone(),
                max_abs: diffs.clone().map(f64::abs).fold(0.0, f64::max),
                rms: rms(diffs),
            }
        })
        .collect();

    let state = |i: usize| &cols[i];
    let col = |name: &str| &table[name];
    let checks = model
        .def
        .oracle
        .iter()
        .flat_map(|o| o.checks.iter())
        .map(|name| -> Result<CheckResult, FormulaError> {
            Ok(match name.as_str() {
                "target_mse" => {
                    let want = &exact.iter().find(|(n, _)| n == "y").expect("closed form for y").1;
                    let errs = state(0)
                        .iter()
                        .zip(col("y").iter().zip(want))
                        .filter(|(x, _)| x.abs() >= 0.1)
                        .map(|(_, (a, b))| a - b);
                    let mse = rms(errs).powi(2);
                    result(name, mse, mse <= 1e-2, "MSE against the target away from the jump, at most 1e-2")
                }
                "regime_boundary" => {
                    let b = state(0)
                        .iter()
                        .zip(col("psi"))
                        .find(|(_, &p)| p >= 0.995)
                        .map_or(f64::NAN, |(&e, _)| e);
                    result(name, b, (0.25..=0.35).contains(&b), "smallest eta with psi >= 0.995, in [0.25, 0.35]")
                }
                "psi_nondecreasing" => {
                    let d = max_decrease(col("psi"));
                    result(name, d, d <= 1e-3, "largest drop below an earlier grid value, at most 1e-3")
                }
                "psi_plateau" => {
                    let dev = state(0)
                        .iter()
                        .zip(col("psi"))
                        .filter(|(e, _)| (0.4..=0.9).contains(*e))
                        .map(|(_, p)| (p - 1.0).abs())
                        .fold(0.0, f64::max);
                    result(name, dev, dev <= 0.02, "max |psi - 1| on [0.4, 0.9], at most 0.02")
                }
                "endogenous_rms" => {
                    let hjb = model.hjb_labels();
                    let worst = model
                        .residual_table(&cols)?
                        .into_iter()
                        .filter(|(l, _)| !hjb.contains(l))
                        .map(|(_, r)| rms(r.into_iter().filter(|v| !v.is_nan())))
                        .fold(0.0, f64::max);
                    result(name, worst, worst <= 1e-2, "largest endogenous residual RMS, at most 1e-2")
                }
                "wha_left" => {
                    let w = col("w_ha")[0];
                    result(name, w, (0.9..=1.1).contains(&w), "w_ha at the left end, in [0.9, 1.1]")
                }
                "qa_nondecreasing" => {
                    let d = max_decrease(col("q_a"));
                    result(name, d, d <= 1e-3, "largest drop below an earlier grid value, at most 1e-3")
                }
                "sigma_qa_peak" => {
                    let s = col("sigma_qa");
                    let (i, _) = s
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                    let at = state(0)[i];
                    result(name, at, (0.2..=0.5).contains(&at), "eta of the sigma_qa maximum, in [0.2, 0.5]")
                }
                "sigma_qa_ends" => {
                    let s = col("sigma_qa");
                    let m = s[0].abs().max(s[s.len() - 1].abs());
                    result(name, m, m <= 0.02, "|sigma_qa| at both ends, at most 0.02")
                }
                "market_clearing" => {
                    let m = state(0)
                        .iter()
                        .zip(col("w_ia").iter().zip(col("w_ha")))
                        .map(|(e, (wi, wh))| (wi * e + wh * (1.0 - e) - 1.0).abs())
                        .fold(0.0, f64::max);
                    result(name, m, m <= 1e-2, "max |w_ia eta + w_ha (1 - eta) - 1|, at most 1e-2")
                }
                "losses_finite" => match last {
                    Some(r) => {
                        let ok = r.total.is_finite() && r.values.iter().all(|v| v.is_finite());
                        result(name, r.total, ok, "every loss component finite after training")
                    }
                    None => result(name, f64::NAN, false, "no training report"),
                },
                "total_loss" => match last {
                    Some(r) => result(name, r.total, r.total <= 0.1, "final total loss, at most 0.1"),
                    None => result(name, f64::NAN, false, "no training report"),
                },
                "p_positive" => {
                    let m = col("p").iter().copied().fold(f64::INFINITY, f64::min);
                    result(name, m, m > 0.0, "minimum of p on the grid, positive")
                }
                other => result(other, f64::NAN, false, "unknown check"),
            })
        })
        .collect::<Result<_, _>>()?;

    Ok(OracleReport {
        problem: model.def.name.clone(),
        closed_form,
        checks,
    })
}
