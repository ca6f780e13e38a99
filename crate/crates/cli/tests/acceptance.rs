//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. `ACCEPTANCE_ONLY=1,5` restricts the run.

use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::process::Command;
use std::time::Instant;

use macronet::autodiff::{build_derivative_map, input_jets, jet, DerivativeKeys, Graph, Jet, JetBasis};
use macronet::framework::losses::{constraint_loss, masked_mse, weighted_total};
use macronet::framework::*;
use macronet::networks::{Activation, Network, NetworkSpec};
use macronet::problems::{self, evaluate_against_oracle, OracleReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Train a built-in problem from scratch.
fn trained(name: &str) -> (Model, TrainResult, OracleReport) {
    let def = problems::by_name(name).unwrap();
    let mut model = Model::build(&def).unwrap();
    pretrain_all(&mut model).unwrap();
    let result = train(&mut model).unwrap();
    let report = evaluate_against_oracle(&model, result.history.last()).unwrap();
    (model, result, report)
}

fn final_total(r: &TrainResult) -> f64 {
    r.history.last().map_or(f64::NAN, |h| h.total)
}

fn losses_csv(r: &TrainResult) -> Vec<u8> {
    let mut out = Vec::new();
    write_losses_csv(&mut out, &r.labels, &r.history).unwrap();
    out
}

fn checks(report: &OracleReport, names: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in names {
        let c = report.check(n).unwrap();
        ok &= c.passed;
        parts.push(format!("{n}={:.4e}{}", c.measured, if c.passed { "" } else { "(x)" }));
    }
    (ok, parts.join(" "))
}

const FIVE_MINUTES: f64 = 300.0;

fn cauchy_euler(csv: &mut Option<Vec<u8>>) -> Outcome {
    let t = Instant::now();
    let (_, result, report) = trained("cauchy_euler");
    let secs = t.elapsed().as_secs_f64();
    let loss = final_total(&result);
    let err = report.error("y").unwrap().max_abs;
    *csv = Some(losses_csv(&result));
    outcome(
        loss <= 5e-3 && err <= 0.05 && secs <= FIVE_MINUTES,
        format!("loss {loss:.3e} (<= 5e-3), max error {err:.3e} (<= 0.05), {secs:.0}s"),
    )
}

fn diffusion() -> Outcome {
    let t = Instant::now();
    let (_, result, report) = trained("diffusion");
    let secs = t.elapsed().as_secs_f64();
    let loss = final_total(&result);
    let err = report.error("y").unwrap().max_abs;
    outcome(
        loss <= 5e-3 && err <= 0.05 && secs <= FIVE_MINUTES,
        format!("loss {loss:.3e} (<= 5e-3), L-inf error {err:.3e} (<= 0.05), {secs:.0}s"),
    )
}

fn function_approx() -> Outcome {
    let (_, _, report) = trained("function_approx");
    let c = report.check("target_mse").unwrap();
    outcome(c.passed, format!("MSE away from the jump {:.3e} (<= 1e-2)", c.measured))
}

fn kan() -> Outcome {
    let (_, result, _) = trained("cauchy_euler_kan");
    let loss = final_total(&result);
    outcome(loss <= 0.5, format!("loss {loss:.3e} (<= 0.5)"))
}

fn log_utility() -> Outcome {
    let (_, _, report) = trained("log_utility");
    let (ok, detail) = checks(&report, &["regime_boundary", "psi_nondecreasing", "endogenous_rms"]);
    outcome(ok, detail)
}

fn econ_1d() -> Outcome {
    let (_, _, report) = trained("econ_1d");
    let (ok, detail) = checks(&report, &["market_clearing", "wha_left", "sigma_qa_peak", "sigma_qa_ends"]);
    outcome(ok, detail)
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn autodiff_suite() -> Outcome {
    let t = Instant::now();

    // f = x^3 y - 2 x y^2 + y^3
    let f = |g: &mut Graph, v: &[Jet]| {
        let (x, y) = (&v[0], &v[1]);
        let x2 = jet::mul(g, x, x);
        let x3y = jet::mul(g, &x2, x);
        let x3y = jet::mul(g, &x3y, y);
        let y2 = jet::mul(g, y, y);
        let xy2 = jet::mul(g, x, &y2);
        let xy2 = jet::scale(g, &xy2, -2.0);
        let y3 = jet::mul(g, &y2, y);
        let s = jet::add(g, &x3y, &xy2);
        jet::add(g, &s, &y3)
    };
    let map = build_derivative_map(f, "f", &names(&["x", "y"]), 3).unwrap();
    let pts = [(0.5, -1.5), (2.0, 0.25), (-1.25, 3.0)];
    let mut g = Graph::new();
    let xs = g.row(pts.iter().map(|p| p.0).collect());
    let ys = g.row(pts.iter().map(|p| p.1).collect());
    let v = map.evaluate(&mut g, &[xs, ys]);
    type Oracle = fn(f64, f64) -> f64;
    let oracle: [(&str, Oracle); 7] = [
        ("f_x", |x, y| 3.0 * x * x * y - 2.0 * y * y),
        ("f_y", |x, y| x.powi(3) - 4.0 * x * y + 3.0 * y * y),
        ("f_xx", |x, y| 6.0 * x * y),
        ("f_xy", |x, y| 3.0 * x * x - 4.0 * y),
        ("f_yy", |x, y| -4.0 * x + 6.0 * y),
        ("f_xxy", |x, _| 6.0 * x),
        ("f_yyy", |_, _| 6.0),
    ];
    let mut poly_err: f64 = 0.0;
    for (name, d) in oracle {
        for (k, &(x, y)) in pts.iter().enumerate() {
            poly_err = poly_err.max((g.data(v[name])[k] - d(x, y)).abs());
        }
    }

    let net = Network::init(&NetworkSpec::mlp(&["x", "y"], &[20, 20], Activation::Tanh), 5).unwrap();
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let basis = JetBasis::new(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cols: Vec<_> = (0..2)
        .map(|_| g.row((0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let inputs = input_jets(&mut g, &basis, &cols);
    let out = net.forward(&mut g, &params, &inputs).unwrap();
    let keys = DerivativeKeys::build("f", &net.spec.input_names, 2).unwrap();
    let vals = keys.extract(&mut g, &out, 2, 50);
    let sym = g
        .data(vals["f_xy"])
        .iter()
        .zip(g.data(vals["f_yx"]))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut model = Model::build(&problems::econ_1d()).unwrap();
    let batch = model.sample(&mut ChaCha8Rng::seed_from_u64(0));
    let (_, grads, _) = model.loss_and_grad(&batch).unwrap();
    let theta = model.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut grad_err: f64 = 0.0;
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
        grad_err = grad_err.max((fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6));
    }

    let secs = t.elapsed().as_secs_f64();
    outcome(
        poly_err <= 1e-10 && sym <= 1e-8 && grad_err <= 1e-4 && secs <= 60.0,
        format!(
            "polynomial {poly_err:.1e} (<= 1e-10), symmetry {sym:.1e} (<= 1e-8), gradient rel {grad_err:.1e} (<= 1e-4), {secs:.1}s"
        ),
    )
}

fn loss_units() -> Outcome {
    let mut g = Graph::new();
    let mut row = |v: &[f64]| g.row(v.to_vec());
    let (l, r) = (row(&[1.0, 3.0]), row(&[2.0, 2.0]));
    let (eq_l, eq_r) = (row(&[2.0]), row(&[2.0]));
    let (res, zero) = (row(&[1.0, 2.0, 3.0]), row(&[0.0; 3]));
    let c = constraint_loss(&mut g, l, r, Comparator::Le);
    let strict = constraint_loss(&mut g, eq_l, eq_r, Comparator::Lt);
    let masked = masked_mse(&mut g, res, zero, &[true, false, true]);
    let parts = [g.scalar(0.5), g.scalar(1.5)];
    let w1 = weighted_total(&mut g, &parts, &[1.0, 1.0]);
    let w2 = weighted_total(&mut g, &parts, &[2.0, 1.0]);
    let cases = [
        (g.item(c), 0.5),
        (g.item(strict), 1e-16),
        (g.item(masked), 5.0),
        (g.item(w1), 2.0),
        (g.item(w2), 2.5),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-12, format!("worst deviation {worst:.1e} over {} cases (<= 1e-12)", cases.len()))
}

fn nullity() -> Outcome {
    let mut worst: f64 = 0.0;
    for name in ["function_approx", "cauchy_euler"] {
        let mut model = Model::build(&problems::by_name(name).unwrap()).unwrap();
        model.inject_all_closed_forms().unwrap();
        let batch = model.sample(&mut ChaCha8Rng::seed_from_u64(0));
        for v in model.loss_values(&batch).unwrap().1 {
            worst = worst.max(v);
        }
    }
    outcome(worst <= 1e-8, format!("largest residual loss {worst:.1e} (<= 1e-8)"))
}

fn reproducibility(first: Option<Vec<u8>>) -> Outcome {
    let first = first.unwrap_or_else(|| losses_csv(&trained("cauchy_euler").1));
    let second = losses_csv(&trained("cauchy_euler").1);
    outcome(
        first == second,
        format!("two seed-0 runs, {} bytes of losses.csv, identical: {}", first.len(), first == second),
    )
}

fn ditella() -> Outcome {
    let t = Instant::now();
    let (_, result, report) = trained("ditella");
    let (ok, detail) = checks(&report, &["losses_finite", "total_loss", "p_positive"]);
    let finite = result.history.iter().all(|h| !h.non_finite);
    outcome(ok && finite, format!("{detail}, {:.0}s", t.elapsed().as_secs_f64()))
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_macronet")).args(args).output().unwrap()
}

fn config_cli() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |p: std::path::PathBuf| p.to_str().unwrap().to_string();
    let mut failures = Vec::new();
    for name in problems::NAMES {
        let shipped = path(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("examples/{name}.toml")));
        if !cli(&["check", &shipped]).status.success() {
            failures.push(format!("{name}: check"));
        }
        let dir_s = path(dir.path().to_path_buf());
        let exported = cli(&["examples", "--export", name, &dir_s]).status.success()
            && fs::read_to_string(dir.path().join(format!("{name}.toml")))
                .ok()
                .and_then(|t| ModelDefinition::from_toml_str(&t).ok())
                == problems::by_name(name);
        if !exported {
            failures.push(format!("{name}: round trip"));
        }
        let out = path(dir.path().join(name));
        let ran = cli(&["run", &shipped, "--epochs", "2", "--quiet", "--out-dir", &out]).status.success();
        let labels = Model::build(&problems::by_name(name).unwrap()).unwrap().labels().to_vec();
        let want = format!("epoch,{},total", labels.join(","));
        let csv = fs::read_to_string(dir.path().join(name).join("losses.csv")).unwrap_or_default();
        let mut lines = csv.lines();
        let header_ok = lines.next() == Some(want.as_str());
        let rows_ok = lines.all(|l| l.split(',').count() == labels.len() + 2);
        if !(ran && header_ok && rows_ok && csv.lines().count() == 3) {
            failures.push(format!("{name}: losses.csv"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} configs checked, exported and run; problems: {failures:?}", problems::NAMES.len()),
    )
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    // criterion 10 reuses the loss history of criterion 1
    let csv = RefCell::new(None);
    type Criterion<'a> = (usize, &'a str, Box<dyn FnOnce() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "cauchy-euler mlp", Box::new(|| cauchy_euler(&mut csv.borrow_mut()))),
        (2, "diffusion", Box::new(diffusion)),
        (3, "function approximation", Box::new(function_approx)),
        (4, "cauchy-euler kan", Box::new(kan)),
        (5, "log utility", Box::new(log_utility)),
        (6, "1d economic model", Box::new(econ_1d)),
        (7, "autodiff properties", Box::new(autodiff_suite)),
        (8, "loss units", Box::new(loss_units)),
        (9, "exact-solution nullity", Box::new(nullity)),
        (10, "reproducibility", Box::new(|| reproducibility(csv.take()))),
        (11, "di tella properties", Box::new(ditella)),
        (12, "configs and cli", Box::new(config_cli)),
    ];
    let mut failed = Vec::new();
    for (id, title, run) in criteria {
        if !wanted(id) {
            continue;
        }
        let o = run();
        let line = format!("{} criterion {id:>2} {title}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        // Direct writes are not captured by the test harness.
        writeln!(std::io::stdout(), "{line}").unwrap();
        if !o.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
