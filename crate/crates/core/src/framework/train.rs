//! The training loop and pretraining to initial guesses.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::formula::FormulaError;
use crate::networks::Network;
use crate::optimizers::{Optimizer, OptimizerConfig, StepOutcome};

use super::defs::PretrainDef;
use super::losses::residual_mse;
use super::model::{row_const, sample_batch, Model};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss components of one epoch, measured before that epoch's step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub values: Vec<f64>,
    pub total: f64,
    pub non_finite: bool,
}

pub struct TrainResult {
    pub labels: Vec<String>,
    pub history: Vec<LossReport>,
    /// Networks at the lowest recorded total loss.
    pub best: Vec<Network>,
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    pub final_networks: Vec<Network>,
    pub optimizer: Optimizer,
}

/// Stream of the sampling generator; initialisation uses stream 0.
const SAMPLING_STREAM: u64 = 1;

pub(crate) fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLING_STREAM);
    rng
}

/// Trains with the model's own training configuration.
pub fn train(model: &mut Model) -> Result<TrainResult, TrainError> {
    let epochs = model.def.training.epochs;
    train_for(model, epochs, &mut |_| {})
}

/// Trains for `epochs`, calling `on_epoch` after every recorded report.
pub fn train_for(
    model: &mut Model,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<TrainResult, TrainError> {
    let cfg = model.def.training.clone();
    let mut rng = sampling_rng(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone());
    let mut history = Vec::with_capacity(epochs);
    let mut best = model.networks();
    let mut best_epoch = None;
    let mut best_loss = f64::INFINITY;

    for epoch in 0..epochs {
        let batch = model.sample(&mut rng);
        let (total, grads, values) = model.loss_and_grad(&batch)?;
        let non_finite = !total.is_finite() || grads.iter().any(|g| !g.is_finite());
        let report = LossReport {
            epoch,
            values,
            total,
            non_finite,
        };
        on_epoch(&report);
        history.push(report);
        if non_finite {
            continue;
        }
        if total < best_loss {
            best_loss = total;
            best_epoch = Some(epoch);
            best = model.networks();
        }
        let mut params = model.flat_params();
        if optimizer.is_lbfgs() {
            let mut closure = |p: &[f64]| {
                model.set_flat_params(p);
                match model.loss_and_grad(&batch) {
                    Ok((l, g, _)) => (l, g),
                    Err(_) => (f64::NAN, vec![]),
                }
            };
            let outcome = optimizer.lbfgs(&mut params, total, grads, &mut closure);
            debug_assert!(outcome != StepOutcome::SkippedNonFinite);
        } else {
            optimizer.step(&mut params, &grads);
        }
        model.set_flat_params(&params);
    }

    Ok(TrainResult {
        labels: model.labels().to_vec(),
        history,
        best,
        best_epoch,
        best_loss,
        final_networks: model.networks(),
        optimizer,
    })
}

/// Writes `epoch,<labels>,total` rows.
pub fn write_losses_csv(out: &mut dyn Write, labels: &[String], history: &[LossReport]) -> std::io::Result<()> {
    writeln!(out, "epoch,{},total", labels.join(","))?;
    for r in history {
        write!(out, "{}", r.epoch)?;
        for v in &r.values {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out, ",{:.16e}", r.total)?;
    }
    Ok(())
}

/// Fits one learnable to its piecewise guess by MSE on sampled batches.
/// Returns the loss per epoch.
pub fn pretrain(model: &mut Model, def: &PretrainDef, seed: u64) -> Result<Vec<f64>, TrainError> {
    let (idx, guess) = model
        .guesses
        .iter()
        .find(|(i, _)| model.learnables[*i].def.name == def.learnable)
        .cloned()
        .ok_or_else(|| TrainError::Invalid(format!("no guess declared for `{}`", def.learnable)))?;
    let batch_size = def.batch_size.unwrap_or(model.def.training.batch_size);
    run_fit(model, idx, def.epochs, batch_size, &def.optimizer, seed, &mut |m, cols| {
        m.guess_values(&guess, cols)
    })
}

/// Runs every pretraining entry of the definition in order.
pub fn pretrain_all(model: &mut Model) -> Result<Vec<Vec<f64>>, TrainError> {
    let defs = model.def.pretrain.clone();
    let seed = model.def.training.seed;
    defs.iter().map(|p| pretrain(model, p, seed)).collect()
}

type Target<'a> = dyn FnMut(&Model, &[Vec<f64>]) -> Result<Vec<f64>, FormulaError> + 'a;

fn run_fit(
    model: &mut Model,
    idx: usize,
    epochs: usize,
    batch_size: usize,
    config: &OptimizerConfig,
    seed: u64,
    target: &mut Target,
) -> Result<Vec<f64>, TrainError> {
    if model.learnables[idx].mock.is_some() {
        return Err(TrainError::Invalid("cannot pretrain a closed-form learnable".into()));
    }
    let mut state_defs = model.def.state.clone();
    for s in &mut state_defs {
        s.grid_points = None;
    }
    let mut rng = sampling_rng(seed);
    let mut optimizer = Optimizer::new(config.clone());
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let cols = sample_batch(&state_defs, batch_size, &mut rng);
        let want = target(model, &cols)?;
        let net = &model.learnables[idx].network;
        let eval = |net: &Network, flat: Option<&[f64]>| {
            let mut net = net.clone();
            if let Some(f) = flat {
                net.state.assign_flat(f);
            }
            fit_loss(&net, &cols, &want)
        };
        let (loss, grads) = eval(net, None);
        history.push(loss);
        let mut params = net.state.flatten();
        if optimizer.is_lbfgs() {
            let mut closure = |p: &[f64]| eval(net, Some(p));
            optimizer.lbfgs(&mut params, loss, grads, &mut closure);
        } else {
            optimizer.step(&mut params, &grads);
        }
        model.learnables[idx].network.state.assign_flat(&params);
    }
    Ok(history)
}

fn fit_loss(net: &Network, cols: &[Vec<f64>], want: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let basis = crate::autodiff::JetBasis::new(cols.len(), 0);
    let nodes: Vec<_> = cols.iter().map(|c| g.row(c.clone())).collect();
    let inputs = crate::autodiff::input_jets(&mut g, &basis, &nodes);
    let out = net.forward(&mut g, &params, &inputs).expect("inputs match");
    let target = row_const(&mut g, want);
    let loss = residual_mse(&mut g, out.value(), target);
    let value = g.item(loss);
    if !value.is_finite() {
        return (value, vec![]);
    }
    let grads = g.backward(loss);
    let flat = params
        .iter()
        .zip(&net.state.tensors)
        .flat_map(|(&p, t)| grads.get_or_zeros(p, t.dim()).into_iter())
        .collect();
    (value, flat)
}
