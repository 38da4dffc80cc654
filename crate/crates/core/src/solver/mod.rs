//! The solver: model construction, training steps, evaluation, the usage
//! multiplier schedule, banded checkpointing and the stopping rule.

mod checkpoint;
mod config;
mod fit;
mod model;

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::ebselect::{anneal_temperature, GateState};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::Mlp;
use crate::optim::AdamW;
use crate::synthgen::stream_rng;

pub use checkpoint::{count_median_crossings, AuditEntry, BandEntry, CheckpointBank, StopRule};
pub use config::{Ablation, AggregatorKind, AmbiguityPairs, HeadInit, LambdaUsage, SolverConfig, DEFAULT_BANDS};
pub use fit::{extract_solution, fit, EpochReport, FitOutcome, StopReason, Trainer};
pub use model::{
    active_components, eval_pass, forward, generate, loss_and_grad, loss_only, usage_cost, Aggregator,
    ConcentrationPredictor, EvalPass, ForwardOutput, LinearSum, LossBreakdown, Mode, Model, ModelGrad, TrainNoise,
};

/// Energy threshold used when the initial mean selection energy is zero.
pub const DEGENERATE_ENERGY_FLOOR: f64 = 1e-8;

/// Full-dataset evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub r2: f64,
    pub mse: f64,
    pub nmse: f64,
    /// Mean over samples of the selected fraction of the pool.
    pub usage: f64,
    /// Components selected for at least one sample.
    pub active_count: usize,
    pub mean_sel_energy: f64,
}

/// A frozen copy of the generating function and its schedule position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub model: Model,
    pub epoch: usize,
    pub lambda: f64,
    pub tau: f64,
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub model: Model,
    pub optimizer: AdamW,
    pub lambda: f64,
    /// Whether the reconstruction gate has opened the usage multiplier.
    pub lambda_active: bool,
    pub epoch: usize,
    pub e_init: f64,
    pub e_star: f64,
    /// Recent `(mean_sel_energy, active_count)` evaluations, newest last.
    pub history: VecDeque<(f64, usize)>,
    rng: ChaCha8Rng,
}

impl SolverState {
    pub fn tau(&self) -> f64 {
        self.model.gate.tau
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            model: self.model.clone(),
            epoch: self.epoch,
            lambda: self.lambda,
            tau: self.tau(),
        }
    }

    /// Threshold the mean selection energy must fall below before stopping.
    pub fn energy_threshold(&self) -> f64 {
        if self.e_star > 0.0 {
            self.e_star
        } else {
            DEGENERATE_ENERGY_FLOOR
        }
    }

    pub(crate) fn record(&mut self, metrics: &EvalMetrics, window: usize) {
        self.history.push_back((metrics.mean_sel_energy, metrics.active_count));
        while self.history.len() > window {
            self.history.pop_front();
        }
    }
}

fn input_scale(data: ArrayView2<'_, f64>, normalize: bool) -> f64 {
    if !normalize || data.is_empty() {
        return 1.0;
    }
    let ms = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
    if ms > 0.0 {
        1.0 / ms.sqrt()
    } else {
        1.0
    }
}

/// Builds a fresh model. Parameters come from `rng` in a fixed order:
/// components, energy evaluator, concentration predictor.
pub fn init_model<R: Rng + ?Sized>(cfg: &SolverConfig, data: ArrayView2<'_, f64>, rng: &mut R) -> Result<Model> {
    cfg.validate()?;
    if data.ncols() != cfg.d {
        return Err(Error::Shape(format!(
            "dataset has {} channels, solver configured for {}",
            data.ncols(),
            cfg.d
        )));
    }
    let bound = 1.0 / (cfg.d as f64).sqrt();
    let component_params = Array2::from_shape_simple_fn((cfg.pool_size, cfg.d), || rng.random_range(0.0..bound));
    let scale = input_scale(data, cfg.normalize_inputs);
    let energy_net = Mlp::new(
        &cfg.energy_widths(),
        cfg.activation,
        cfg.energy_head_init == HeadInit::Zero,
        rng,
    );
    let mut energy_net = energy_net;
    if cfg.energy_head_init == HeadInit::Unit {
        let scaled = &data * scale;
        let ms = energy_net.forward(scaled.view()).iter().map(|e| e * e).sum::<f64>()
            / (data.nrows() * 2 * cfg.pool_size).max(1) as f64;
        if ms > 0.0 {
            let head = energy_net.layers.last_mut().expect("at least one layer");
            let k = 1.0 / ms.sqrt();
            head.w *= k;
            head.b *= k;
        }
    }
    let conc_net = Mlp::new(&cfg.conc_widths(), cfg.activation, false, rng);
    Ok(Model {
        component_params,
        component_op: cfg.component_op,
        gate: GateState {
            net: energy_net,
            input_scale: scale,
            tau: cfg.gate.tau0,
            config: cfg.gate,
        },
        conc: ConcentrationPredictor {
            net: conc_net,
            input_scale: scale,
            op: cfg.concentration_op,
        },
        aggregator: cfg.aggregator,
        error_scale: if cfg.normalized_error {
            input_scale(data, true).powi(2)
        } else {
            1.0
        },
    })
}

/// Initializes the model from stream 0 of `seed`, measures the initial mean
/// selection energy over the whole dataset and sets the stopping threshold.
/// Training randomness comes from stream 1.
pub fn init_solver(cfg: &SolverConfig, dataset: &Dataset, seed: u64) -> Result<SolverState> {
    let model = init_model(cfg, dataset.mixtures.view(), &mut stream_rng(seed, 0))?;
    let e_init = model.gate.eval_energies(dataset.mixtures.view())?.mean_square();
    Ok(SolverState {
        model,
        optimizer: AdamW::new(cfg.optimizer),
        lambda: 0.0,
        lambda_active: false,
        epoch: 0,
        e_init,
        e_star: cfg.energy_stop_fraction * e_init,
        history: VecDeque::with_capacity(cfg.oscillation_window + 1),
        rng: stream_rng(seed, 1),
    })
}

/// One optimizer update on `batch`, followed by one temperature decay.
pub fn train_step(state: &mut SolverState, cfg: &SolverConfig, batch: ArrayView2<'_, f64>) -> Result<LossBreakdown> {
    let dim = (batch.nrows(), state.model.pool_size());
    let noise = TrainNoise::draw(dim, cfg.ablation.sgld, &mut state.rng);
    let (loss, grad) = loss_and_grad(&state.model, cfg, batch, &noise, state.tau(), state.lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            breakdown: loss.to_string(),
        });
    }
    let train_components = !cfg.freeze_components;
    state
        .optimizer
        .step(state.model.params_mut(train_components), grad.slices(train_components));
    state.model.gate.tau = anneal_temperature(state.model.gate.tau, cfg.gate.tau_min);
    Ok(loss)
}

/// One pass over the data in shuffled minibatches. Returns the mean loss
/// terms weighted by batch size.
pub fn train_epoch(state: &mut SolverState, cfg: &SolverConfig, data: ArrayView2<'_, f64>) -> Result<LossBreakdown> {
    let m = data.nrows();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut state.rng);
    let mut acc = [0.0f64; 5];
    for chunk in order.chunks(cfg.batch) {
        let batch = data.select(Axis(0), chunk);
        let l = train_step(state, cfg, batch.view())?;
        let w = chunk.len() as f64 / m as f64;
        for (a, v) in acc.iter_mut().zip([l.mse, l.usage_cost, l.sel_energy, l.ambiguity, l.total]) {
            *a += w * v;
        }
    }
    state.epoch += 1;
    Ok(LossBreakdown {
        mse: acc[0],
        usage_cost: acc[1],
        sel_energy: acc[2],
        ambiguity: acc[3],
        total: acc[4],
        lambda: state.lambda,
        lambda_se: cfg.lambda_se,
        lambda_amb: cfg.lambda_amb,
    })
}

/// Evaluation-mode metrics over the whole dataset.
pub fn evaluate(model: &Model, cfg: &SolverConfig, data: ArrayView2<'_, f64>) -> Result<EvalMetrics> {
    let pass = eval_pass(model, cfg, data)?;
    metrics_from_pass(&pass, data)
}

pub(crate) fn metrics_from_pass(pass: &EvalPass, data: ArrayView2<'_, f64>) -> Result<EvalMetrics> {
    let (m, n) = pass.selection.dim();
    let selected = pass.selection.iter().filter(|&&s| s == 1).count();
    Ok(EvalMetrics {
        r2: metrics::r_squared(&data, &pass.reconstruction)?,
        mse: metrics::mse(&data, &pass.reconstruction)?,
        nmse: metrics::nmse(&data, &pass.reconstruction)?,
        usage: if m * n == 0 { 0.0 } else { selected as f64 / (m * n) as f64 },
        active_count: active_components(&pass.selection).len(),
        mean_sel_energy: pass.energies.mean_square(),
    })
}

/// Usage multiplier after an evaluation with reconstruction error `mse`,
/// normalized error `nmse` and selected fraction `usage`.
pub fn next_lambda(active: bool, mse: f64, nmse: f64, usage: f64, cfg: &SolverConfig) -> (bool, f64) {
    let active = active || nmse < cfg.nmse_gate;
    if !active {
        return (false, 0.0);
    }
    let denom = mse * usage;
    let lambda = if denom > 0.0 {
        (0.95 + 0.05 / denom).min(cfg.lambda_cap)
    } else {
        cfg.lambda_cap
    };
    (true, lambda)
}

/// The error entering the multiplier is measured on the same scale as the
/// objective's reconstruction term.
pub fn update_lambda(state: &mut SolverState, metrics: &EvalMetrics, cfg: &SolverConfig) {
    let usage = match cfg.lambda_usage {
        LambdaUsage::Fraction => metrics.usage,
        LambdaUsage::ActiveCount => metrics.active_count as f64,
    };
    let mse = state.model.error_scale * metrics.mse;
    let r2_open = cfg.r2_gate.is_some_and(|g| metrics.r2 >= g);
    let (active, lambda) = next_lambda(state.lambda_active || r2_open, mse, metrics.nmse, usage, cfg);
    // Usage oscillation only means something under usage pressure; the
    // stopping window starts over when the multiplier switches on.
    if active && !state.lambda_active {
        state.history.clear();
    }
    state.lambda_active = active;
    state.lambda = lambda;
}
