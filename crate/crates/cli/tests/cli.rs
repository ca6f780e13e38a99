use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use macronet::framework::ModelDefinition;
use macronet::problems;

fn macronet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macronet")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(format!("{name}.toml"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn list_names_every_problem() {
    let out = macronet(&["examples", "--list"]);
    assert_eq!(code(&out), 0);
    let names: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(names, problems::NAMES);
}

#[test]
fn export_reimports_identically() {
    let dir = tempfile::tempdir().unwrap();
    for name in problems::NAMES {
        let out = macronet(&["examples", "--export", name, s(dir.path())]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = fs::read_to_string(dir.path().join(format!("{name}.toml"))).unwrap();
        let def = ModelDefinition::from_toml_str(&text).unwrap();
        assert_eq!(def, problems::by_name(name).unwrap());
    }
    assert_eq!(code(&macronet(&["examples", "--export", "nope", s(dir.path())])), 1);
}

#[test]
fn shipped_configs_match_and_check() {
    for name in problems::NAMES {
        let path = shipped(name);
        let def = ModelDefinition::from_toml_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(def, problems::by_name(name).unwrap(), "{name} is stale");
        let out = macronet(&["check", s(&path)]);
        assert_eq!(code(&out), 0, "{name}: {}", stderr(&out));
        let table = String::from_utf8(out.stdout).unwrap();
        for l in &def.learnable {
            assert!(table.contains(&l.name), "{name}: {}", l.name);
        }
    }
}

fn edited(dir: &Path, from: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = edit(fs::read_to_string(shipped(from)).unwrap());
    let path = dir.join("edited.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_state_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "cauchy_euler", |t| {
        t.replace("[[state]]\nname = \"x\"\nlow = 1.0\nhigh = 2.0\n", "")
    });
    let out = macronet(&["check", s(&path)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("state"), "{}", stderr(&out));

    let path = edited(dir.path(), "cauchy_euler", |t| t.replacen("name = ", "nmae = ", 1));
    let out = macronet(&["run", s(&path), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nmae"));
}

#[test]
fn insufficient_derivative_order_is_a_build_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "cauchy_euler", |t| t.replace("derivative_order = 2", "derivative_order = 1"));
    let out = macronet(&["check", s(&path)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("y_xx"), "{}", stderr(&out));
}

#[test]
fn circular_equations_are_a_build_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "cauchy_euler", |t| {
        t.replace(
            "[[learnable]]",
            "[[equations]]\nlhs = \"a\"\nrhs = \"b + x\"\n\n[[equations]]\nlhs = \"b\"\nrhs = \"a\"\n\n[[learnable]]",
        )
    });
    let out = macronet(&["check", s(&path)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains('b'));
}

fn run_short(config: &Path, out_dir: &Path) {
    let out = macronet(&["run", s(config), "--epochs", "5", "--seed", "0", "--quiet", "--out-dir", s(out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn run_writes_artifacts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_short(&shipped("cauchy_euler"), &a);
    run_short(&shipped("cauchy_euler"), &b);
    for f in ["best.ckpt", "final.ckpt", "losses.csv", "manifest.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let losses = fs::read(a.join("losses.csv")).unwrap();
    assert_eq!(losses, fs::read(b.join("losses.csv")).unwrap());

    let text = String::from_utf8(losses).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,y_at_1,y_at_2,ode,total");
    assert_eq!(lines.count(), 5);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    let config = ModelDefinition::from_toml_str(manifest["config"].as_str().unwrap()).unwrap();
    assert_eq!(config.training.epochs, 5);
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn eval_writes_grid_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = shipped("cauchy_euler");
    run_short(&config, dir.path());
    let csv = dir.path().join("eval.csv");
    let ckpt = dir.path().join("best.ckpt");
    let out = macronet(&["eval", s(&ckpt), s(&config), "--grid", "3", "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let (header, rows) = csv_rows(&text);
    assert_eq!(header, ["x", "y"]);
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(xs, [1.0, 1.5, 2.0]);
    // 17 significant digits in every cell
    let cell = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    let mantissa = cell.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
    assert_eq!(mantissa.len(), 17);

    let out = macronet(&["eval", s(&ckpt), s(&shipped("diffusion")), "--grid", "2"]);
    assert_eq!(code(&out), 1, "checkpoint of another model must be rejected");
}

#[test]
fn eval_rows_follow_grid_indices() {
    let dir = tempfile::tempdir().unwrap();
    let config = shipped("diffusion");
    run_short(&config, dir.path());
    let out = macronet(&["eval", s(&dir.path().join("final.ckpt")), s(&config), "--grid", "2,3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = csv_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(&header[..3], ["x", "t", "y"]);
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(
        points,
        [(-1.0, 0.0), (-1.0, 0.5), (-1.0, 1.0), (1.0, 0.0), (1.0, 0.5), (1.0, 1.0)]
    );
}
