use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use macronet::framework::{
    grid_columns, linspace, pretrain_all, train_for, write_losses_csv, Checkpoint, Model, ModelDefinition,
    TrainResult,
};
use macronet::problems;

#[derive(Parser)]
#[command(name = "macronet", version, about = "Train neural solutions of equilibrium models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model file and write checkpoints and the loss history.
    Run {
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Use the full epoch count of the reference experiments.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on an equispaced grid and write CSV.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Points per state variable, e.g. `50` or `41,41`.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List or export the built-in problems.
    Examples(ExamplesArgs),
    /// Validate a model file and print its variables.
    Check { config: PathBuf },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ExamplesArgs {
    #[arg(long)]
    list: bool,
    /// Write `<dir>/<name>.toml`.
    #[arg(long, num_args = 2, value_names = ["NAME", "DIR"])]
    export: Option<Vec<String>>,
}

/// Message plus process exit code (1 input errors, 2 model build errors).
struct Failure(u8, String);

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure(1, e.to_string())
}

fn load(path: &Path) -> Result<ModelDefinition, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure(1, format!("{}: {e}", path.display())))?;
    ModelDefinition::from_toml_str(&text).map_err(|e| Failure(1, format!("{}: {e}", path.display())))
}

fn build(def: &ModelDefinition) -> Result<Model, Failure> {
    Model::build(def).map_err(|e| Failure(2, e.to_string()))
}

fn learnable_names(def: &ModelDefinition) -> Vec<String> {
    def.learnable.iter().map(|l| l.name.clone()).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure(1, format!("{}: {e}", path.display())))
}

fn checkpoint(model: &Model, result: &TrainResult, best: bool) -> Checkpoint {
    let names = learnable_names(&model.def);
    if best {
        let mut ck = Checkpoint::new(&model.def.name, &names, &result.best);
        ck.epoch = result.best_epoch;
        ck.loss = result.best_epoch.map(|_| result.best_loss);
        ck
    } else {
        let mut ck = Checkpoint::new(&model.def.name, &names, &result.final_networks);
        ck.epoch = Some(result.history.len());
        ck.loss = result.history.last().map(|r| r.total);
        ck.optimizer = serde_json::to_value(&result.optimizer.state).ok();
        ck
    }
}

fn run(
    config: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
    paper_scale: bool,
    quiet: bool,
) -> Result<(), Failure> {
    let mut def = load(config)?;
    if let Some(s) = seed {
        def.training.seed = s;
    }
    if paper_scale {
        if let Some(e) = def.training.reference_epochs {
            def.training.epochs = e;
        }
    }
    if let Some(e) = epochs {
        def.training.epochs = e;
    }
    let mut model = build(&def)?;
    fs::create_dir_all(out_dir).map_err(input)?;

    pretrain_all(&mut model).map_err(|e| Failure(2, e.to_string()))?;
    let total = def.training.epochs;
    let every = (total / 10).max(1);
    let mut progress = |r: &macronet::framework::LossReport| {
        if !quiet && (r.epoch.is_multiple_of(every) || r.epoch + 1 == total) {
            eprintln!("epoch {:>6}  total {:.6e}", r.epoch, r.total);
        }
    };
    let result = train_for(&mut model, total, &mut progress).map_err(|e| Failure(2, e.to_string()))?;

    write_file(&out_dir.join("best.ckpt"), &checkpoint(&model, &result, true).to_json())?;
    write_file(&out_dir.join("final.ckpt"), &checkpoint(&model, &result, false).to_json())?;
    let mut csv = Vec::new();
    write_losses_csv(&mut csv, &result.labels, &result.history).map_err(input)?;
    write_file(&out_dir.join("losses.csv"), &String::from_utf8_lossy(&csv))?;

    let manifest = serde_json::json!({
        "model": def.name,
        "seed": def.training.seed,
        "epochs": total,
        "config": def.to_toml_string().map_err(input)?,
        "versions": {
            "macronet": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": macronet::framework::CHECKPOINT_FORMAT,
        },
        "best_epoch": result.best_epoch,
        "best_loss": result.best_epoch.map(|_| result.best_loss),
    });
    write_file(&out_dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).unwrap())?;
    if !quiet {
        if let Some(last) = result.history.last() {
            eprintln!("final total {:.6e}, best {:.6e}", last.total, result.best_loss);
        }
    }
    Ok(())
}

fn eval(checkpoint: &Path, config: &Path, grid: &[usize], out: Option<&Path>) -> Result<(), Failure> {
    let def = load(config)?;
    let mut model = build(&def)?;
    let text = fs::read_to_string(checkpoint).map_err(|e| Failure(1, format!("{}: {e}", checkpoint.display())))?;
    let nets = Checkpoint::from_json(&text)
        .and_then(|c| c.networks_for(&learnable_names(&def)))
        .map_err(input)?;
    for (l, net) in model.learnables.iter().zip(&nets) {
        if net.spec != l.network.spec {
            return Err(Failure(1, format!("checkpoint network `{}` has a different architecture", l.def.name)));
        }
    }
    model.set_networks(&nets);

    let n_states = def.state.len();
    let counts: Vec<usize> = match grid {
        [] => def.state.iter().map(|s| s.grid_points.unwrap_or(101)).collect(),
        [n] => vec![*n; n_states],
        g if g.len() == n_states => g.to_vec(),
        g => {
            return Err(Failure(
                1,
                format!("--grid has {} counts for {n_states} state variables", g.len()),
            ))
        }
    };
    let axes: Vec<Vec<f64>> = def.state.iter().zip(&counts).map(|(s, &n)| linspace(s.low, s.high, n)).collect();
    let cols = grid_columns(&axes);
    let table = model.evaluate_table(&cols).map_err(|e| Failure(2, e.to_string()))?;

    let mut text = String::new();
    let header: Vec<&str> = def
        .state
        .iter()
        .map(|s| s.name.as_str())
        .chain(table.iter().map(|(n, _)| n.as_str()))
        .collect();
    text.push_str(&header.join(","));
    text.push('\n');
    let rows = cols.first().map_or(0, |c| c.len());
    for i in 0..rows {
        let row: Vec<String> = cols
            .iter()
            .chain(table.iter().map(|(_, v)| v))
            .map(|c| format!("{:.16e}", c[i]))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match out {
        Some(p) => write_file(p, &text),
        None => io::stdout().write_all(text.as_bytes()).map_err(input),
    }
}

fn examples(args: &ExamplesArgs) -> Result<(), Failure> {
    if args.list {
        for name in problems::NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let export = args.export.as_deref().unwrap_or_default();
    let (name, dir) = (&export[0], Path::new(&export[1]));
    let def = problems::by_name(name).ok_or_else(|| {
        Failure(1, format!("unknown example `{name}`; known: {}", problems::NAMES.join(", ")))
    })?;
    fs::create_dir_all(dir).map_err(input)?;
    let path = dir.join(format!("{name}.toml"));
    write_file(&path, &def.to_toml_string().map_err(input)?)?;
    println!("{}", path.display());
    Ok(())
}

fn check(config: &Path) -> Result<(), Failure> {
    let def = load(config)?;
    let model = build(&def)?;
    println!("model {}", def.name);
    println!("{:<12} {:<24} detail", "kind", "name");
    for s in &def.state {
        let detail = match s.grid_points {
            Some(n) => format!("[{}, {}] grid {n}", s.low, s.high),
            None => format!("[{}, {}]", s.low, s.high),
        };
        println!("{:<12} {:<24} {detail}", "state", s.name);
    }
    for (name, value) in &def.params {
        println!("{:<12} {:<24} {value}", "param", name);
    }
    for l in &model.learnables {
        let derivs: Vec<&str> = l.keys.entries.iter().map(|e| e.name.as_str()).collect();
        println!(
            "{:<12} {:<24} order {}, {} params, derivatives {}",
            "learnable",
            l.def.name,
            l.def.derivative_order,
            l.network.param_count(),
            derivs.join(" ")
        );
    }
    for name in model.equation_names() {
        println!("{:<12} {:<24}", "equation", name);
    }
    for label in model.labels() {
        println!("{:<12} {:<24}", "loss", label);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            epochs,
            seed,
            out_dir,
            paper_scale,
            quiet,
        } => run(config, *epochs, *seed, out_dir, *paper_scale, *quiet),
        Command::Eval {
            checkpoint,
            config,
            grid,
            out,
        } => eval(checkpoint, config, grid, out.as_deref()),
        Command::Examples(args) => examples(args),
        Command::Check { config } => check(config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
