//! The generating function: gate, component bank and concentration
//! predictor, with the training objective and its gradient.

use ndarray::{concatenate, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintOp;
use crate::ebselect::{
    gate_backward, gate_values, hard_select, sgld_jacobian, sgld_refine_with, draw_sgld_noise, EnergyTensor,
    GateState, GumbelDraws, SquaredNorm,
};
use crate::error::{Error, Result};
use crate::kernel::weighted_pair_penalty;
use crate::nn::{standard, Mlp, MlpCache, MlpGrad};

use super::config::{AggregatorKind, AmbiguityPairs, SolverConfig};

/// Aggregation law `Phi`: combines per-sample component weights
/// (`batch x N`, gate times concentration) with components (`N x d`).
pub trait Aggregator {
    fn aggregate(&self, weights: &Array2<f64>, components: &Array2<f64>) -> Array2<f64>;

    /// Gradients with respect to `weights` and `components` given
    /// `d loss / d output`.
    fn backward(
        &self,
        weights: &Array2<f64>,
        components: &Array2<f64>,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>);
}

/// `X_g = W S`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearSum;

impl Aggregator for LinearSum {
    fn aggregate(&self, weights: &Array2<f64>, components: &Array2<f64>) -> Array2<f64> {
        weights.dot(components)
    }

    fn backward(
        &self,
        weights: &Array2<f64>,
        components: &Array2<f64>,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        (grad_out.dot(&components.t()), weights.t().dot(grad_out))
    }
}

impl AggregatorKind {
    pub fn implementation(self) -> impl Aggregator {
        match self {
            AggregatorKind::LinearSum => LinearSum,
        }
    }
}

/// Maps spectra to non-negative per-component concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPredictor {
    pub net: Mlp,
    pub input_scale: f64,
    pub op: ConstraintOp,
}

impl ConcentrationPredictor {
    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Array2<f64> {
        let scaled = &batch * self.input_scale;
        self.net.forward(scaled.view()).mapv(|z| self.op.apply(z))
    }
}

/// All learnable parts of the generating function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// Unconstrained component parameters; components are `op(params)`.
    pub component_params: Array2<f64>,
    pub component_op: ConstraintOp,
    pub gate: GateState,
    pub conc: ConcentrationPredictor,
    pub aggregator: AggregatorKind,
    /// Weight of the squared reconstruction error in the objective.
    pub error_scale: f64,
}

impl Model {
    pub fn pool_size(&self) -> usize {
        self.component_params.nrows()
    }

    pub fn d(&self) -> usize {
        self.component_params.ncols()
    }

    pub fn components(&self) -> Array2<f64> {
        self.component_params.mapv(|w| self.component_op.apply(w))
    }

    fn check_batch(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.d() {
            return Err(Error::Shape(format!(
                "model expects {} channels, batch has {}",
                self.d(),
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// Parameter slices in optimizer order.
    pub fn params_mut(&mut self, include_components: bool) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if include_components {
            out.push(self.component_params.as_slice_mut().expect("standard layout"));
        }
        out.extend(self.gate.net.params_mut());
        out.extend(self.conc.net.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.component_params.as_slice().expect("standard layout")];
        out.extend(self.gate.net.params());
        out.extend(self.conc.net.params());
        out
    }
}

/// Gradient of the objective with respect to every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub components: Array2<f64>,
    pub gate: MlpGrad,
    pub conc: MlpGrad,
}

impl ModelGrad {
    pub fn slices(&self, include_components: bool) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if include_components {
            out.push(self.components.as_slice().expect("standard layout"));
        }
        out.extend(self.gate.slices());
        out.extend(self.conc.slices());
        out
    }
}

/// Random draws consumed by one training forward pass. Holding them fixed
/// makes the objective a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainNoise {
    pub gumbel: GumbelDraws,
    /// Standard normal Langevin noise; `None` when refinement is off.
    pub sgld: Option<EnergyTensor>,
}

impl TrainNoise {
    pub fn draw<R: Rng + ?Sized>(dim: (usize, usize), sgld: bool, rng: &mut R) -> Self {
        let gumbel = GumbelDraws::sample(dim, rng);
        let sgld = sgld.then(|| draw_sgld_noise(dim, rng));
        TrainNoise { gumbel, sgld }
    }
}

/// Objective terms of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub usage_cost: f64,
    pub sel_energy: f64,
    pub ambiguity: f64,
    pub total: f64,
    pub lambda: f64,
    pub lambda_se: f64,
    pub lambda_amb: f64,
}

impl LossBreakdown {
    fn compose(mse: f64, usage_cost: f64, sel_energy: f64, ambiguity: f64, lambda: f64, lambda_se: f64, lambda_amb: f64) -> Self {
        LossBreakdown {
            mse,
            usage_cost,
            sel_energy,
            ambiguity,
            total: mse + lambda * usage_cost + lambda_se * sel_energy + lambda_amb * ambiguity,
            lambda,
            lambda_se,
            lambda_amb,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mse, self.usage_cost, self.sel_energy, self.ambiguity, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:e} mse={:e} usage={:e} (lambda={:e}) sel_energy={:e} ambiguity={:e}",
            self.total, self.mse, self.usage_cost, self.lambda, self.sel_energy, self.ambiguity
        )
    }
}

/// Mean over rows of (row sum / N).
pub fn usage_cost(gate_values: &Array2<f64>) -> f64 {
    let (b, n) = gate_values.dim();
    if b == 0 || n == 0 {
        return 0.0;
    }
    gate_values.sum() / (b * n) as f64
}

/// Training or evaluation behaviour of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Relaxed gate values (training) or hard decisions as 0/1 (evaluation).
    pub gates: Array2<f64>,
    /// Evaluator energies before any refinement.
    pub energies: EnergyTensor,
    pub concentrations: Array2<f64>,
    pub reconstruction: Array2<f64>,
}

/// Per-sample generation `(gates * C) S` under the model's aggregator.
pub fn generate(model: &Model, gates: &Array2<f64>, concentrations: &Array2<f64>) -> Array2<f64> {
    let weights = gates * concentrations;
    model.aggregator.implementation().aggregate(&weights, &model.components())
}

/// Runs the generating function on `batch`. Training mode draws Gumbel (and
/// Langevin, when enabled) noise from `rng` at temperature `tau`.
pub fn forward<R: Rng + ?Sized>(
    model: &Model,
    cfg: &SolverConfig,
    batch: ArrayView2<'_, f64>,
    mode: Mode,
    tau: f64,
    rng: &mut R,
) -> Result<ForwardOutput> {
    model.check_batch(batch)?;
    let energies = model.gate.eval_energies(batch)?;
    let concentrations = model.conc.predict(batch);
    let gates = match mode {
        Mode::Train => {
            let noise = TrainNoise::draw(energies.dim(), cfg.ablation.sgld, rng);
            let refined = refine(&energies, cfg, &noise);
            gate_values(&refined, tau, &noise.gumbel)
        }
        Mode::Eval => {
            let (delta, _) = hard_select(&energies, cfg.gate.t_eval, cfg.gate.threshold);
            delta.mapv(f64::from)
        }
    };
    let reconstruction = generate(model, &gates, &concentrations);
    Ok(ForwardOutput {
        gates,
        energies,
        concentrations,
        reconstruction,
    })
}

fn refine(energies: &EnergyTensor, cfg: &SolverConfig, noise: &TrainNoise) -> EnergyTensor {
    match (&noise.sgld, cfg.ablation.sgld) {
        (Some(eta), true) => sgld_refine_with(energies, &SquaredNorm, cfg.gate.sgld.epsilon, cfg.gate.sgld.steps, eta),
        _ => energies.clone(),
    }
}

/// Components active (gate >= 0.5) somewhere in the batch and the pair
/// weights the ambiguity penalty applies to them.
fn ambiguity_pairs(gates: &Array2<f64>, pairs: AmbiguityPairs) -> (Vec<usize>, Array2<f64>) {
    let b = gates.nrows();
    let active = gates.mapv(|g| if g >= 0.5 { 1.0 } else { 0.0 });
    let union: Vec<usize> = (0..gates.ncols())
        .filter(|&j| active.column(j).iter().any(|&a| a > 0.0))
        .collect();
    let w = match pairs {
        AmbiguityPairs::Union => Array2::ones((union.len(), union.len())),
        AmbiguityPairs::Coactivation => {
            let sub = active.select(Axis(1), &union);
            sub.t().dot(&sub) / b as f64
        }
    };
    (union, w)
}

/// Objective and gradient for one minibatch with fixed noise.
pub fn loss_and_grad(
    model: &Model,
    cfg: &SolverConfig,
    batch: ArrayView2<'_, f64>,
    noise: &TrainNoise,
    tau: f64,
    lambda: f64,
) -> Result<(LossBreakdown, ModelGrad)> {
    evaluate_objective(model, cfg, batch, noise, tau, lambda, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

/// Objective only; used by finite-difference checks.
pub fn loss_only(
    model: &Model,
    cfg: &SolverConfig,
    batch: ArrayView2<'_, f64>,
    noise: &TrainNoise,
    tau: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    evaluate_objective(model, cfg, batch, noise, tau, lambda, false).map(|(l, _)| l)
}

fn evaluate_objective(
    model: &Model,
    cfg: &SolverConfig,
    batch: ArrayView2<'_, f64>,
    noise: &TrainNoise,
    tau: f64,
    lambda: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelGrad>)> {
    model.check_batch(batch)?;
    let (b, d) = batch.dim();
    let n = model.pool_size();
    if noise.gumbel.select.dim() != (b, n) {
        return Err(Error::Shape(format!(
            "noise drawn for {:?}, batch needs {:?}",
            noise.gumbel.select.dim(),
            (b, n)
        )));
    }
    let ablation = cfg.ablation;

    let gate_in = &batch * model.gate.input_scale;
    let (stacked, gate_cache) = model.gate.net.forward_cached(gate_in.view());
    let energies = EnergyTensor::from_stacked(&stacked);
    let refined = refine(&energies, cfg, noise);
    let gates = gate_values(&refined, tau, &noise.gumbel);

    let conc_in = &batch * model.conc.input_scale;
    let (conc_pre, conc_cache) = model.conc.net.forward_cached(conc_in.view());
    let op = model.conc.op;
    let conc = conc_pre.mapv(|z| op.apply(z));

    let components = model.components();
    let weights = &gates * &conc;
    let aggregator = model.aggregator.implementation();
    let recon = aggregator.aggregate(&weights, &components);

    let residual = &recon - &batch;
    let mse = model.error_scale * residual.iter().map(|r| r * r).sum::<f64>() / (b * d) as f64;
    let usage = if ablation.usage_cost { usage_cost(&gates) } else { 0.0 };
    let sel_energy = if ablation.min_energy { energies.mean_square() } else { 0.0 };

    let lambda_amb = cfg.lambda_amb;
    let amb = if ablation.ambiguity {
        let (union, w) = ambiguity_pairs(&gates, cfg.ambiguity_pairs);
        if union.len() >= 2 {
            let sub = components.select(Axis(0), &union);
            let kernel = cfg.kernel.resolve(&sub);
            Some((union, w, sub, kernel))
        } else {
            None
        }
    } else {
        None
    };
    let (ambiguity, amb_grad) = match &amb {
        Some((union, w, sub, kernel)) => {
            let (v, g) = weighted_pair_penalty(sub, w, kernel);
            (v, Some((union, g)))
        }
        None => (0.0, None),
    };

    let loss = LossBreakdown::compose(mse, usage, sel_energy, ambiguity, lambda, cfg.lambda_se, lambda_amb);
    if !want_grad {
        return Ok((loss, None));
    }

    // Reconstruction term.
    let grad_recon = residual * (2.0 * model.error_scale / (b * d) as f64);
    let (grad_weights, grad_components) = aggregator.backward(&weights, &components, &grad_recon);
    let mut grad_components = standard(grad_components);
    let mut grad_gates = &grad_weights * &conc;
    if ablation.usage_cost {
        grad_gates += lambda / (b * n) as f64;
    }
    let mut grad_conc_pre = &grad_weights * &gates;
    Zip::from(&mut grad_conc_pre)
        .and(&conc_pre)
        .for_each(|g, &z| *g *= op.derivative(z));

    // Gate: through the Gumbel-softmax and the Langevin refinement.
    let mut grad_energy = gate_backward(&gates, tau, &grad_gates);
    if ablation.sgld && noise.sgld.is_some() {
        let jac = sgld_jacobian(&energies, &SquaredNorm, cfg.gate.sgld.epsilon, cfg.gate.sgld.steps);
        grad_energy.select *= &jac.select;
        grad_energy.reject *= &jac.reject;
    }
    if ablation.min_energy {
        let scale = cfg.lambda_se * 2.0 / (2 * b * n) as f64;
        grad_energy.select.scaled_add(scale, &energies.select);
        grad_energy.reject.scaled_add(scale, &energies.reject);
    }
    let grad_stacked = concatenate(Axis(1), &[grad_energy.select.view(), grad_energy.reject.view()])
        .expect("energy planes share a row count");

    if let Some((union, g)) = amb_grad {
        for (row, &j) in union.iter().enumerate() {
            grad_components.row_mut(j).scaled_add(lambda_amb, &g.row(row));
        }
    }
    let comp_op = model.component_op;
    Zip::from(&mut grad_components)
        .and(&model.component_params)
        .for_each(|g, &w| *g *= comp_op.derivative(w));

    let grad = ModelGrad {
        components: grad_components,
        gate: backward_net(&model.gate.net, &gate_cache, grad_stacked),
        conc: backward_net(&model.conc.net, &conc_cache, grad_conc_pre),
    };
    Ok((loss, Some(grad)))
}

fn backward_net(net: &Mlp, cache: &MlpCache, grad: Array2<f64>) -> MlpGrad {
    net.backward(cache, grad)
}

/// Evaluation-mode pass over many spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPass {
    pub energies: EnergyTensor,
    pub selection: Array2<u8>,
    pub probabilities: Array2<f64>,
    /// Predicted concentrations before masking.
    pub concentrations: Array2<f64>,
    pub components: Array2<f64>,
    pub reconstruction: Array2<f64>,
}

pub fn eval_pass(model: &Model, cfg: &SolverConfig, data: ArrayView2<'_, f64>) -> Result<EvalPass> {
    model.check_batch(data)?;
    let energies = model.gate.eval_energies(data)?;
    let (selection, probabilities) = hard_select(&energies, cfg.gate.t_eval, cfg.gate.threshold);
    let concentrations = model.conc.predict(data);
    let components = model.components();
    let weights = &selection.mapv(f64::from) * &concentrations;
    let reconstruction = model.aggregator.implementation().aggregate(&weights, &components);
    Ok(EvalPass {
        energies,
        selection,
        probabilities,
        concentrations,
        components,
        reconstruction,
    })
}

/// Indices of components selected for at least one sample.
pub fn active_components(selection: &Array2<u8>) -> Vec<usize> {
    (0..selection.ncols())
        .filter(|&j| selection.column(j).iter().any(|&s| s == 1))
        .collect()
}
