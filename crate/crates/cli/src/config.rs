//! Solver configuration assembly. Precedence: command-line flag, then the
//! JSON config file, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ebgmcr::solver::SolverConfig;
use serde_json::Value;

/// Solver flags shared by `solve` and `bench`.
#[derive(Args, Debug, Clone, Default)]
pub struct SolverFlags {
    /// Candidate pool size (default 1024).
    #[arg(long)]
    pub pool: Option<usize>,
    /// JSON file with solver settings; any subset of fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Drop the Langevin refinement of the selection energies.
    #[arg(long)]
    pub no_sgld: bool,
    /// Drop the component usage cost.
    #[arg(long)]
    pub no_usage_cost: bool,
    /// Drop the selection-energy penalty.
    #[arg(long)]
    pub no_min_energy: bool,
    /// Drop the ambiguity penalty.
    #[arg(long)]
    pub no_ambiguity: bool,
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key;
/// anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Builds the solver configuration for a dataset with `d` channels.
pub fn solver_config(flags: &SolverFlags, d: usize) -> Result<SolverConfig> {
    let mut value = serde_json::to_value(SolverConfig::default())?;
    if let Some(path) = &flags.config {
        merge(&mut value, read_json(path)?);
    }
    let mut cfg: SolverConfig = serde_json::from_value(value).context("config file does not match solver settings")?;
    cfg.d = d;
    if let Some(pool) = flags.pool {
        cfg.pool_size = pool;
    }
    if let Some(n) = flags.max_epochs {
        cfg.max_epochs = n;
    }
    let ab = &mut cfg.ablation;
    ab.sgld &= !flags.no_sgld;
    ab.usage_cost &= !flags.no_usage_cost;
    ab.min_energy &= !flags.no_min_energy;
    ab.ambiguity &= !flags.no_ambiguity;
    cfg.validate()?;
    Ok(cfg)
}
