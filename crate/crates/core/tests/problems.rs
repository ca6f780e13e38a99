use std::collections::HashMap;

use macronet::formula::{evaluate_f64, parse_formula};
use macronet::framework::*;
use macronet::problems::{self, evaluate_against_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f64_eval(text: &str, vars: &[(&str, f64)]) -> f64 {
    let vars: HashMap<String, f64> = vars.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    evaluate_f64(&parse_formula(text).unwrap(), &vars).unwrap()
}

fn closed_form(def: &ModelDefinition, var: &str) -> String {
    def.oracle.as_ref().unwrap().closed_form[var].clone()
}

fn column(table: &[(String, Vec<f64>)], name: &str) -> Vec<f64> {
    table.iter().find(|(n, _)| n == name).unwrap().1.clone()
}

#[test]
fn every_problem_builds_and_round_trips() {
    assert_eq!(problems::NAMES.len(), 8);
    for def in problems::all() {
        let model = Model::build(&def).unwrap_or_else(|e| panic!("{}: {e}", def.name));
        let oracle = def.oracle.as_ref().unwrap();
        for l in &def.learnable {
            let covered = oracle.closed_form.contains_key(&l.name) || !oracle.checks.is_empty();
            assert!(covered, "{}: `{}` has no reference", def.name, l.name);
        }
        let text = def.to_toml_string().unwrap();
        assert_eq!(ModelDefinition::from_toml_str(&text).unwrap(), def, "{}", def.name);
        assert!(!model.labels().is_empty());
    }
    assert!(problems::by_name("nope").is_none());
}

#[test]
fn function_target_values() {
    let def = problems::function_approx();
    let target = closed_form(&def, "y");
    assert_eq!(f64_eval(&target, &[("x", 0.0)]), 1.0);
    assert!((f64_eval(&target, &[("x", -1e-12)]) - 5.0).abs() < 1e-9);
    let want = 5.0 + (-1f64).sin() + (-2f64).sin() + (-3f64).sin() + (-4f64).sin();
    assert!((f64_eval(&target, &[("x", -1.0)]) - want).abs() < 1e-12);
    // sin(-4) is positive, so the value is near 3.865
    assert!((want - 3.8649).abs() < 1e-4);
}

#[test]
fn cauchy_euler_solution_values() {
    let def = problems::cauchy_euler();
    let y = closed_form(&def, "y");
    assert!((f64_eval(&y, &[("x", 1.0)]) - 6.0).abs() < 1e-12);
    assert!((f64_eval(&y, &[("x", 2.0)]) - 1.25).abs() < 1e-12);
    let oracle = 4.0 * 1.5f64.powi(-4) + 2.0 / 1.5;
    assert!((f64_eval(&y, &[("x", 1.5)]) - oracle).abs() < 1e-12);
    assert!((oracle - 2.123457).abs() < 1e-6);
}

#[test]
fn diffusion_solution_values() {
    let def = problems::diffusion();
    let y = closed_form(&def, "y");
    let pi = std::f64::consts::PI;
    assert!((f64_eval(&y, &[("x", 0.5), ("t", 0.0), ("pi", pi)]) - 1.0).abs() < 1e-15);
    for t in [0.0, 0.3, 1.0] {
        assert!(f64_eval(&y, &[("x", 1.0), ("t", t), ("pi", pi)]).abs() < 1e-15);
    }
    let v = f64_eval(&y, &[("x", 0.5), ("t", 1.0), ("pi", pi)]);
    assert!((v - (-1f64).exp()).abs() < 1e-15);
}

/// Residual losses with the analytic solution plugged in.
fn nullity(def: ModelDefinition) -> Vec<f64> {
    let mut model = Model::build(&def).unwrap();
    model.inject_all_closed_forms().unwrap();
    let batch = model.sample(&mut ChaCha8Rng::seed_from_u64(0));
    model.loss_values(&batch).unwrap().1
}

#[test]
fn exact_solutions_zero_the_losses() {
    for def in [problems::function_approx(), problems::cauchy_euler(), problems::diffusion()] {
        let name = def.name.clone();
        for v in nullity(def) {
            assert!(v <= 1e-8, "{name}: {v}");
        }
    }
}

#[test]
fn injected_solution_matches_oracle() {
    let mut model = Model::build(&problems::cauchy_euler()).unwrap();
    let untrained = evaluate_against_oracle(&model, None).unwrap();
    assert!(untrained.error("y").unwrap().max_abs > 1.0);
    model.inject_all_closed_forms().unwrap();
    let report = evaluate_against_oracle(&model, None).unwrap();
    assert!(report.error("y").unwrap().max_abs <= 1e-10);
}

#[test]
fn log_utility_condition_and_guess() {
    let def = problems::log_utility();
    let q0 = &def.conditions[0].rhs;
    let vars = [("a_under", 0.07), ("kappa", 2.0), ("r", 0.05)];
    let v = f64_eval(q0, &vars);
    assert!((v - (1.29f64.sqrt() - 0.1)).abs() < 1e-15);
    assert!((v - 1.035782).abs() < 1e-6);

    let psi_guess = &def.pretrain.iter().find(|p| p.learnable == "psi").unwrap().guess;
    assert_eq!(psi_guess[0].when.as_deref(), Some("eta < 0.3"));
    assert!((f64_eval(&psi_guess[0].value, &[("eta", 0.15)]) - 0.5).abs() < 1e-15);
}

#[test]
fn econ_equations_at_known_points() {
    let mut model = Model::build(&problems::econ_1d()).unwrap();
    for (name, expr) in [
        ("q_a", "1 + 0*eta"),
        ("xi_i", "1 + 0*eta"),
        ("xi_h", "1 + 0*eta"),
        ("w_ia", "2 - eta"),
        // solves the market-clearing identity for w_ha
        ("w_ha", "(1 - (2 - eta)*eta)/(1 - eta)"),
    ] {
        model.inject_closed_form(name, parse_formula(expr).unwrap()).unwrap();
    }
    let eta: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let cols = vec![eta];
    let table = model.evaluate_table(&cols).unwrap();
    assert!(column(&table, "iota_a").iter().all(|&v| v == 0.0));
    let c = column(&table, "c_i");
    let want = 0.05f64.powf(1.00005);
    assert!(c.iter().all(|&v| (v - want).abs() < 1e-15));
    assert!((want - 0.05).abs() < 1e-5);
    let residuals = model.residual_table(&cols).unwrap();
    let mc = column(&residuals, "market_clearing");
    assert!(mc.iter().all(|v| v.abs() < 1e-12), "{mc:?}");
}

#[test]
fn ditella_equations_at_known_points() {
    let model = Model::build(&problems::ditella()).unwrap();
    let cols = vec![vec![0.2], vec![0.25]];
    let table = model.evaluate_table(&cols).unwrap();
    assert!(column(&table, "mu_v")[0].abs() < 1e-15);
    assert!((column(&table, "sigma_v")[0] + 0.085).abs() < 1e-15);
    assert!((column(&table, "sigma_n_tilde")[0] - 0.25).abs() < 1e-15);
}

#[test]
fn econ_gradient_matches_finite_differences() {
    let mut model = Model::build(&problems::econ_1d()).unwrap();
    let batch = model.sample(&mut ChaCha8Rng::seed_from_u64(0));
    let (_, grads, _) = model.loss_and_grad(&batch).unwrap();
    let theta = model.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.gen_range(0..theta.len());
        let mut p = theta.clone();
        p[i] = theta[i] + h;
        model.set_flat_params(&p);
        let up = model.loss_values(&batch).unwrap().0;
        p[i] = theta[i] - h;
        model.set_flat_params(&p);
        let down = model.loss_values(&batch).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn oracle_checks_report_measurements() {
    let model = Model::build(&problems::econ_1d()).unwrap();
    let report = evaluate_against_oracle(&model, None).unwrap();
    assert_eq!(report.checks.len(), 5);
    assert!(report.checks.iter().all(|c| !c.detail.is_empty()));
    let model = Model::build(&problems::ditella()).unwrap();
    let report = evaluate_against_oracle(&model, None).unwrap();
    assert!(!report.check("total_loss").unwrap().passed);
    assert!(report.check("p_positive").unwrap().passed);
}

#[test]
fn evaluation_table_of_exact_mock_matches_oracle() {
    use macronet::problems::{closed_form_values, oracle_grid};
    for def in [problems::cauchy_euler(), problems::diffusion()] {
        let mut model = Model::build(&def).unwrap();
        model.inject_all_closed_forms().unwrap();
        let cols = oracle_grid(&model);
        let table = model.evaluate_table(&cols).unwrap();
        for (name, want) in closed_form_values(&model, &cols).unwrap() {
            let got = column(&table, &name);
            let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 1e-10, "{}: {name} {worst}", def.name);
        }
    }
}
