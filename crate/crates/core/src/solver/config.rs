use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintOp;
use crate::ebselect::GateConfig;
use crate::error::{Error, Result};
use crate::kernel::Bandwidth;
use crate::nn::Activation;
use crate::optim::AdamWConfig;

/// Which auxiliary objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub sgld: bool,
    pub usage_cost: bool,
    pub min_energy: bool,
    pub ambiguity: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            sgld: true,
            usage_cost: true,
            min_energy: true,
            ambiguity: true,
        }
    }
}

/// Initialization of the energy evaluator's output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    FanIn,
    /// All-zero head: every selection probability starts at exactly 0.5.
    Zero,
    /// Fan-in head rescaled so initial energies have unit mean square over
    /// the training data.
    #[default]
    Unit,
}

/// Usage measure entering the multiplier update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaUsage {
    /// Mean selected fraction of the pool per sample.
    Fraction,
    /// Number of components selected for at least one sample.
    #[default]
    ActiveCount,
}

/// Which pairs of active components the ambiguity penalty sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityPairs {
    /// Every pair active somewhere in the batch, weight 1.
    #[default]
    Union,
    /// Pairs weighted by the fraction of batch samples in which both are
    /// active. Duplicates that split the samples between them go unpenalised.
    Coactivation,
}

/// Aggregation law combining gated, weighted components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    LinearSum,
}

pub const DEFAULT_BANDS: [(f64, f64); 6] = [
    (0.97, 0.975),
    (0.975, 0.98),
    (0.98, 0.985),
    (0.985, 0.99),
    (0.99, 0.995),
    (0.995, 1.1),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Candidate pool size N.
    pub pool_size: usize,
    /// Channel count d.
    pub d: usize,
    /// Hidden widths of the energy evaluator; `None` means `[d, d]`.
    pub energy_hidden: Option<Vec<usize>>,
    /// Hidden widths of the concentration predictor; `None` means `[d, d]`.
    pub conc_hidden: Option<Vec<usize>>,
    pub activation: Activation,
    pub component_op: ConstraintOp,
    pub concentration_op: ConstraintOp,
    pub aggregator: AggregatorKind,
    pub optimizer: AdamWConfig,
    pub batch: usize,
    pub lambda_se: f64,
    pub lambda_amb: f64,
    pub ambiguity_pairs: AmbiguityPairs,
    pub lambda_cap: f64,
    pub lambda_usage: LambdaUsage,
    pub bands: Vec<(f64, f64)>,
    /// nMSE below which the usage multiplier switches on.
    pub nmse_gate: f64,
    /// R^2 that also opens the usage multiplier. On noisy data the error
    /// floor can sit above `nmse_gate`; `None` disables this trigger.
    pub r2_gate: Option<f64>,
    pub energy_stop_fraction: f64,
    pub max_epochs: usize,
    pub kernel: Bandwidth,
    pub gate: GateConfig,
    pub ablation: Ablation,
    pub oscillation_window: usize,
    pub oscillation_crossings: usize,
    pub energy_head_init: HeadInit,
    /// Keep component vectors fixed at their initial values.
    pub freeze_components: bool,
    /// Scale network inputs to unit root-mean-square over the dataset.
    pub normalize_inputs: bool,
    /// Measure the reconstruction error relative to the dataset's mean
    /// square, so the usage trade-off does not depend on signal units.
    pub normalized_error: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            pool_size: 1024,
            d: 512,
            energy_hidden: None,
            conc_hidden: None,
            activation: Activation::default(),
            component_op: ConstraintOp::Abs,
            concentration_op: ConstraintOp::Abs,
            aggregator: AggregatorKind::LinearSum,
            optimizer: AdamWConfig::default(),
            batch: 64,
            lambda_se: 0.01,
            lambda_amb: 1e-5,
            ambiguity_pairs: AmbiguityPairs::default(),
            lambda_cap: 1e4,
            lambda_usage: LambdaUsage::default(),
            bands: DEFAULT_BANDS.to_vec(),
            nmse_gate: 0.005,
            r2_gate: Some(0.97),
            energy_stop_fraction: 0.25,
            max_epochs: 100_000,
            kernel: Bandwidth::default(),
            gate: GateConfig::default(),
            ablation: Ablation::default(),
            oscillation_window: 50,
            oscillation_crossings: 6,
            energy_head_init: HeadInit::default(),
            freeze_components: false,
            normalize_inputs: true,
            normalized_error: true,
        }
    }
}

impl SolverConfig {
    pub fn energy_widths(&self) -> Vec<usize> {
        let mut sizes = vec![self.d];
        sizes.extend(self.energy_hidden.clone().unwrap_or_else(|| vec![self.d, self.d]));
        sizes.push(2 * self.pool_size);
        sizes
    }

    pub fn conc_widths(&self) -> Vec<usize> {
        let mut sizes = vec![self.d];
        sizes.extend(self.conc_hidden.clone().unwrap_or_else(|| vec![self.d, self.d]));
        sizes.push(self.pool_size);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.pool_size == 0 || self.d == 0 || self.batch == 0 {
            return fail("pool_size, d and batch must be positive".into());
        }
        if [self.lambda_se, self.lambda_amb, self.lambda_cap]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return fail("lambda weights must be finite and non-negative".into());
        }
        if self.bands.is_empty() {
            return fail("at least one R^2 band is required".into());
        }
        for (i, &(lo, hi)) in self.bands.iter().enumerate() {
            if !(lo < hi) {
                return fail(format!("band {i} ({lo}, {hi}) is empty"));
            }
            if i > 0 && self.bands[i - 1].1 > lo {
                return fail(format!("band {i} overlaps or precedes band {}", i - 1));
            }
        }
        if !(self.energy_stop_fraction >= 0.0) {
            return fail("energy_stop_fraction must be non-negative".into());
        }
        if self.oscillation_window < 2 {
            return fail("oscillation_window must be at least 2".into());
        }
        if let Bandwidth::Fixed { sigma } = self.kernel {
            if !(sigma > 0.0) {
                return fail("kernel bandwidth must be positive".into());
            }
        }
        if self.energy_widths().iter().chain(self.conc_widths().iter()).any(|&w| w == 0) {
            return fail("network widths must be positive".into());
        }
        self.gate.validate()
    }
}
