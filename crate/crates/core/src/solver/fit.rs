use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ComponentBank, Dataset, ResolvedSolution, SolutionMetrics};
use crate::error::{Error, Result};

use super::checkpoint::{CheckpointBank, StopRule};
use super::config::SolverConfig;
use super::model::{active_components, eval_pass};
use super::{evaluate, init_solver, metrics_from_pass, train_epoch, update_lambda, Snapshot, SolverState};

/// One row of the per-epoch training report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub r2: f64,
    pub mse: f64,
    pub nmse: f64,
    pub usage: f64,
    pub active_count: usize,
    pub mean_sel_energy: f64,
    pub lambda: f64,
    pub tau: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Energy fell below the threshold during sustained usage oscillation.
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub bank: CheckpointBank<Snapshot>,
    pub reports: Vec<EpochReport>,
    pub stop: StopReason,
    pub e_init: f64,
    pub e_star: f64,
    pub final_state: SolverState,
}

/// Epoch-by-epoch driver.
pub struct Trainer<'a> {
    cfg: &'a SolverConfig,
    dataset: &'a Dataset,
    pub state: SolverState,
    pub bank: CheckpointBank<Snapshot>,
    pub reports: Vec<EpochReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a SolverConfig, dataset: &'a Dataset, seed: u64) -> Result<Self> {
        let state = init_solver(cfg, dataset, seed)?;
        Ok(Trainer {
            cfg,
            dataset,
            state,
            bank: CheckpointBank::new(cfg.bands.clone()),
            reports: Vec::new(),
        })
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            energy_threshold: self.state.energy_threshold(),
            window: self.cfg.oscillation_window,
            min_crossings: self.cfg.oscillation_crossings,
        }
    }

    /// Trains one epoch, evaluates, updates the multiplier and the bank.
    /// Returns the stop reason once training should end.
    pub fn step(&mut self) -> Result<(EpochReport, Option<StopReason>)> {
        let data = self.dataset.mixtures.view();
        let loss = train_epoch(&mut self.state, self.cfg, data)?;
        let metrics = evaluate(&self.state.model, self.cfg, data)?;
        let state = &self.state;
        self.bank
            .offer(state.epoch, metrics.r2, metrics.active_count, || state.snapshot());
        // Report the multiplier that was in force during this epoch.
        let report = EpochReport {
            epoch: self.state.epoch,
            r2: metrics.r2,
            mse: metrics.mse,
            nmse: metrics.nmse,
            usage: metrics.usage,
            active_count: metrics.active_count,
            mean_sel_energy: metrics.mean_sel_energy,
            lambda: self.state.lambda,
            tau: self.state.tau(),
            train_loss: loss.total,
        };
        update_lambda(&mut self.state, &metrics, self.cfg);
        self.state.record(&metrics, self.cfg.oscillation_window);
        self.reports.push(report);
        let history: Vec<(f64, usize)> = self.state.history.iter().copied().collect();
        let stop = if self.state.lambda_active && self.stop_rule().should_stop(&history) {
            Some(StopReason::Converged)
        } else if self.state.epoch >= self.cfg.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        Ok((report, stop))
    }

    /// Runs to completion, calling `observer` after every epoch.
    pub fn run(mut self, mut observer: impl FnMut(&EpochReport)) -> Result<FitOutcome> {
        let stop = loop {
            let (report, stop) = self.step()?;
            observer(&report);
            if let Some(reason) = stop {
                break reason;
            }
        };
        log::info!(
            "training stopped after {} epochs ({:?})",
            self.state.epoch,
            stop
        );
        Ok(FitOutcome {
            bank: self.bank,
            reports: self.reports,
            stop,
            e_init: self.state.e_init,
            e_star: self.state.e_star,
            final_state: self.state,
        })
    }
}

pub fn fit(cfg: &SolverConfig, dataset: &Dataset, seed: u64) -> Result<FitOutcome> {
    Trainer::new(cfg, dataset, seed)?.run(|_| {})
}

/// Components and masked concentrations of the snapshot stored in band
/// `[lo, hi)`.
pub fn extract_solution(
    bank: &CheckpointBank<Snapshot>,
    band: (f64, f64),
    cfg: &SolverConfig,
    dataset: &Dataset,
) -> Result<ResolvedSolution> {
    let (lo, hi) = band;
    let idx = bank.find_band(lo, hi);
    let entry = idx.and_then(|i| bank.entry(i));
    let Some(entry) = entry else {
        let nearest = match idx {
            Some(i) => bank.nearest_populated(i),
            None => bank.band_of(lo).or(bank.band_of(hi)).and_then(|i| bank.nearest_populated(i)).or_else(|| {
                (0..bank.entries.len()).find(|&i| bank.entry(i).is_some())
            }),
        };
        return Err(Error::EmptyBand {
            lo,
            hi,
            nearest: nearest.map(|i| bank.bands[i]),
        });
    };
    let data = dataset.mixtures.view();
    let pass = eval_pass(&entry.snapshot.model, cfg, data)?;
    let metrics = metrics_from_pass(&pass, data)?;
    let active = active_components(&pass.selection);
    let masked = &pass.concentrations * &pass.selection.mapv(f64::from);
    Ok(ResolvedSolution {
        active_components: ComponentBank::new(pass.components.select(Axis(0), &active)),
        concentrations: masked.select(Axis(1), &active),
        active_indices: active,
        pool_size: pass.components.nrows(),
        metrics: SolutionMetrics {
            r2: metrics.r2,
            mse: metrics.mse,
            nmse: metrics.nmse,
            usage: metrics.usage,
        },
    })
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::synthgen::{generate_dataset, SynthConfig};

    fn tiny() -> (SolverConfig, Dataset) {
        let ds = generate_dataset(&SynthConfig {
            n_components: 3,
            m_samples: 8,
            d: 12,
            k_range: (1, 2),
            snr_db: None,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = SolverConfig {
            pool_size: 6,
            d: 12,
            batch: 8,
            max_epochs: 10,
            ..SolverConfig::default()
        };
        (cfg, ds)
    }

    fn oscillating(len: usize) -> VecDeque<(f64, usize)> {
        (0..len).map(|i| (0.0, if i % 2 == 0 { 1 } else { 10 })).collect()
    }

    #[test]
    fn no_convergence_before_usage_pressure() {
        let (mut cfg, ds) = tiny();
        cfg.oscillation_window = 6;
        cfg.oscillation_crossings = 2;
        cfg.nmse_gate = 0.0;
        cfg.r2_gate = None;
        let mut t = Trainer::new(&cfg, &ds, 0).unwrap();
        t.state.e_star = f64::INFINITY;
        t.state.history = oscillating(6);
        let (_, stop) = t.step().unwrap();
        assert!(!t.state.lambda_active);
        // The rule alone would fire on this history.
        let history: Vec<(f64, usize)> = t.state.history.iter().copied().collect();
        assert!(t.stop_rule().should_stop(&history));
        assert_eq!(stop, None);
    }

    #[test]
    fn r2_gate_opens_the_multiplier_above_the_error_floor() {
        let (mut cfg, ds) = tiny();
        cfg.nmse_gate = 0.0;
        cfg.r2_gate = Some(f64::NEG_INFINITY);
        let mut t = Trainer::new(&cfg, &ds, 0).unwrap();
        t.step().unwrap();
        assert!(t.state.lambda_active && t.state.lambda > 0.95);
        cfg.r2_gate = Some(1.1);
        let mut t = Trainer::new(&cfg, &ds, 0).unwrap();
        t.step().unwrap();
        assert!(!t.state.lambda_active && t.state.lambda == 0.0);
    }

    #[test]
    fn switching_on_the_multiplier_restarts_the_window() {
        let (mut cfg, ds) = tiny();
        cfg.nmse_gate = f64::INFINITY;
        let mut t = Trainer::new(&cfg, &ds, 0).unwrap();
        t.state.history = oscillating(10);
        t.step().unwrap();
        assert!(t.state.lambda_active);
        assert_eq!(t.state.history.len(), 1);
    }
}
