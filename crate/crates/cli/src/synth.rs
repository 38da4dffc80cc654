use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use ebgmcr::datamodel::save_dataset;
use ebgmcr::synthgen::{generate_dataset, SynthConfig};

use crate::manifest::{RunManifest, MANIFEST_FILE};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of ground-truth components.
    #[arg(long)]
    pub components: usize,
    /// Number of mixtures.
    #[arg(long)]
    pub samples: usize,
    /// Signal-to-noise ratio in dB, or `none` for noiseless mixtures.
    #[arg(long, value_parser = parse_snr)]
    pub snr_db: Option<Snr>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel count.
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    /// Fewest components per mixture.
    #[arg(long)]
    pub k_min: Option<usize>,
    /// Most components per mixture.
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Db(f64),
    Noiseless,
}

fn parse_snr(s: &str) -> std::result::Result<Snr, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Snr::Noiseless);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Snr::Db(v)),
        _ => Err(format!("expected a number of dB or `none`, got {s:?}")),
    }
}

pub fn build_config(args: &SynthArgs) -> SynthConfig {
    let defaults = SynthConfig::default();
    SynthConfig {
        n_components: args.components,
        d: args.d,
        m_samples: args.samples,
        k_range: (
            args.k_min.unwrap_or(defaults.k_range.0),
            args.k_max.unwrap_or(defaults.k_range.1),
        ),
        snr_db: match args.snr_db {
            Some(Snr::Db(v)) => Some(v),
            Some(Snr::Noiseless) | None => None,
        },
        seed: args.seed,
        ..defaults
    }
}

pub fn run(args: SynthArgs) -> Result<()> {
    let cfg = build_config(&args);
    cfg.validate()?;
    if args.out.is_file() {
        bail!("{} exists and is not a directory", args.out.display());
    }
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&cfg)?);
    manifest.seeds.push(cfg.seed);
    manifest.outputs.push(args.out.clone());
    manifest.write(&args.out.join(MANIFEST_FILE))?;

    let dataset = generate_dataset(&cfg)?;
    save_dataset(&dataset, &args.out).with_context(|| format!("saving dataset to {}", args.out.display()))?;
    log::info!(
        "wrote {} mixtures of {} components to {}",
        cfg.m_samples,
        cfg.n_components,
        args.out.display()
    );
    Ok(())
}
