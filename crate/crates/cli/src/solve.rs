use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ebgmcr::datamodel::{load_dataset, write_real_matrix, Dataset};
use ebgmcr::solver::{extract_solution, AuditEntry, CheckpointBank, Snapshot, SolverConfig, StopReason, Trainer};
use ebgmcr::Error;
use serde::Serialize;

use crate::config::{solver_config, SolverFlags};
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const REPORT_FILE: &str = "report.csv";
pub const BANK_FILE: &str = "checkpoints.json";
pub const FAILURE_FILE: &str = "failure_state.json";

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also store the full network weights of every banded checkpoint.
    #[arg(long)]
    pub save_models: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
}

/// Training hit a non-finite loss; the state at that point was saved.
#[derive(Debug)]
pub struct Diverged {
    pub state_path: PathBuf,
    pub cause: Error,
}

impl fmt::Display for Diverged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}; diagnostic state written to {}", self.cause, self.state_path.display())
    }
}

impl std::error::Error for Diverged {}

#[derive(Serialize)]
struct BankEntrySummary {
    lo: f64,
    hi: f64,
    epoch: usize,
    r2: f64,
    usage: usize,
    lambda: f64,
    tau: f64,
}

#[derive(Serialize)]
struct BankSummary<'a> {
    stop: StopReason,
    epochs: usize,
    e_init: f64,
    e_star: f64,
    bands: &'a [(f64, f64)],
    entries: Vec<Option<BankEntrySummary>>,
    audit: &'a [AuditEntry],
}

pub fn band_label((lo, hi): (f64, f64)) -> String {
    format!("[{lo},{hi})")
}

fn band_dir_name((lo, hi): (f64, f64)) -> String {
    format!("band_{lo}_{hi}")
}

/// Trains on `dataset`, streaming one report row per epoch to `report`.
/// On a non-finite loss the current state is saved to `failure_path`.
pub fn train(
    cfg: &SolverConfig,
    dataset: &Dataset,
    seed: u64,
    mut report: Option<&mut csv::Writer<fs::File>>,
    failure_path: Option<&Path>,
) -> Result<(CheckpointBank<Snapshot>, StopReason, usize, f64, f64)> {
    let mut trainer = Trainer::new(cfg, dataset, seed)?;
    let stop = loop {
        match trainer.step() {
            Ok((row, stop)) => {
                if let Some(w) = report.as_deref_mut() {
                    w.serialize(row)?;
                    w.flush()?;
                }
                if row.epoch % 100 == 0 {
                    log::debug!(
                        "epoch {} r2 {:.5} active {} energy {:.3e}",
                        row.epoch,
                        row.r2,
                        row.active_count,
                        row.mean_sel_energy
                    );
                }
                if let Some(reason) = stop {
                    break reason;
                }
            }
            Err(cause @ Error::NonFiniteLoss { .. }) => {
                let Some(path) = failure_path else {
                    return Err(cause.into());
                };
                let text = serde_json::to_string(&trainer.state.snapshot())?;
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
                return Err(Diverged {
                    state_path: path.to_path_buf(),
                    cause,
                }
                .into());
            }
            Err(e) => return Err(e.into()),
        }
    };
    let s = &trainer.state;
    Ok((trainer.bank, stop, s.epoch, s.e_init, s.e_star))
}

pub fn run(args: SolveArgs) -> Result<()> {
    let dataset = load_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let cfg = solver_config(&args.solver, dataset.d())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut manifest = RunManifest::new("solve", serde_json::to_value(&cfg)?);
    manifest.seeds.push(args.seed);
    manifest.inputs.push(args.data.clone());
    manifest.outputs.push(args.out.clone());
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    if cfg.pool_size * cfg.d > 256 * 512 {
        log::info!("pool {} over {} channels: expect a long run", cfg.pool_size, cfg.d);
    }

    let report_path = args.out.join(REPORT_FILE);
    let mut report = csv::Writer::from_path(&report_path).with_context(|| format!("creating {}", report_path.display()))?;
    let failure = args.out.join(FAILURE_FILE);
    let (bank, stop, epochs, e_init, e_star) = train(&cfg, &dataset, args.seed, Some(&mut report), Some(&failure))?;
    drop(report);

    let summary = BankSummary {
        stop,
        epochs,
        e_init,
        e_star,
        bands: &bank.bands,
        entries: bank
            .bands
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| {
                bank.entry(i).map(|e| BankEntrySummary {
                    lo,
                    hi,
                    epoch: e.epoch,
                    r2: e.r2,
                    usage: e.usage,
                    lambda: e.snapshot.lambda,
                    tau: e.snapshot.tau,
                })
            })
            .collect(),
        audit: &bank.audit,
    };
    fs::write(args.out.join(BANK_FILE), serde_json::to_string_pretty(&summary)?)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "stopped after {epochs} epochs ({stop:?})")?;
    for (i, &band) in bank.bands.iter().enumerate() {
        let Some(entry) = bank.entry(i) else {
            writeln!(out, "band {:<14} empty", band_label(band))?;
            continue;
        };
        writeln!(
            out,
            "band {:<14} components {:>4}  r2 {:.5}  epoch {}",
            band_label(band),
            entry.usage,
            entry.r2,
            entry.epoch
        )?;
        let dir = args.out.join(band_dir_name(band));
        save_band(&bank, band, &cfg, &dataset, &dir)?;
        if args.save_models {
            let text = serde_json::to_string(&entry.snapshot)?;
            fs::write(dir.join("model.json"), text)?;
        }
    }
    Ok(())
}

fn save_band(bank: &CheckpointBank<Snapshot>, band: (f64, f64), cfg: &SolverConfig, dataset: &Dataset, dir: &Path) -> Result<()> {
    let sol = extract_solution(bank, band, cfg, dataset)?;
    fs::create_dir_all(dir)?;
    write_real_matrix(&dir.join("components.csv"), sol.active_components.vectors())?;
    write_real_matrix(&dir.join("concentrations.csv"), &sol.concentrations)?;
    let idx: Vec<String> = sol.active_indices.iter().map(|i| i.to_string()).collect();
    fs::write(dir.join("active_indices.csv"), idx.join("\n") + "\n")?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&sol.metrics)?)?;
    Ok(())
}
