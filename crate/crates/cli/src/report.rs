use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ebgmcr::metrics::RunRecord;
use serde::Serialize;

use crate::manifest::{sidecar_path, RunManifest};
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Format {
    Csv,
    Svg,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run-record CSV files, or directories whose `*.csv` files are read.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
}

/// Mean and spread of one `(method, n_true, band)` group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub method: String,
    pub n_true: usize,
    pub band: String,
    pub n: usize,
    pub ec_mean: f64,
    pub ec_sd: f64,
    pub r2_mean: f64,
    pub r2_sd: f64,
}

/// Sample mean and standard deviation; a single value has SD 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(records: &[RunRecord]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(String, usize, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.n_true, r.band.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, n_true, band), rs)| {
            let ec: Vec<f64> = rs.iter().map(|r| r.ec as f64).collect();
            let r2: Vec<f64> = rs.iter().map(|r| r.r2).collect();
            let (ec_mean, ec_sd) = mean_sd(&ec);
            let (r2_mean, r2_sd) = mean_sd(&r2);
            GroupSummary {
                method,
                n_true,
                band,
                n: rs.len(),
                ec_mean,
                ec_sd,
                r2_mean,
                r2_sd,
            }
        })
        .collect()
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for p in paths {
        for file in csv_files(p)? {
            let mut rdr = csv::Reader::from_path(&file).with_context(|| format!("opening {}", file.display()))?;
            for row in rdr.deserialize() {
                records.push(row.with_context(|| format!("reading {}", file.display()))?);
            }
        }
    }
    Ok(records)
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut manifest = RunManifest::new("report", serde_json::json!({ "format": args.format }));
    manifest.inputs = args.runs.clone();
    manifest.outputs.push(args.out.clone());
    manifest.write(&sidecar_path(&args.out))?;

    let records = read_records(&args.runs)?;
    if records.is_empty() {
        bail!("no run records found");
    }
    let summary = summarize(&records);
    match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            for s in &summary {
                w.serialize(s)?;
            }
            w.flush()?;
        }
        Format::Svg => {
            fs::write(&args.out, svg::count_figure(&summary)).with_context(|| format!("writing {}", args.out.display()))?;
        }
    }
    log::info!("{} records in {} groups", records.len(), summary.len());
    Ok(())
}
