//! Evaluation mathematics shared by the solver, baselines and reports.

use ndarray::{ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::datamodel::ComponentBank;
use crate::error::{Error, Result};

/// Entrywise coefficient of determination, pooled over the whole matrix with
/// `SS_tot` taken about the global scalar mean of `x`.
pub fn r_squared<S1, S2, D>(x: &ArrayBase<S1, D>, x_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let n = x.len().max(1) as f64;
    let mean = x.sum() / n;
    let ss_tot: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R^2 of a constant matrix".into()));
    }
    let ss_res: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mse<S1, S2, D>(x: &ArrayBase<S1, D>, x_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let ss: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss / x.len().max(1) as f64)
}

/// Mean squared error divided by the mean squared entry of `x`.
pub fn nmse<S1, S2, D>(x: &ArrayBase<S1, D>, x_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let err = mse(x, x_hat)?;
    let energy = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if energy == 0.0 {
        return Err(Error::Undefined("nMSE of a zero-energy matrix".into()));
    }
    Ok(err / energy)
}

/// One pairing from [`match_components`]. Unmatched rows carry `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatch {
    pub estimated: Option<usize>,
    pub truth: Option<usize>,
    pub cosine: f64,
}

fn cosine(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Greedy one-to-one matching by descending cosine similarity. Matched pairs
/// come first (in matching order), then leftovers with a `None` partner and
/// cosine 0. Not an optimal assignment.
pub fn match_components(estimated: &ComponentBank, truth: &ComponentBank) -> Vec<ComponentMatch> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(estimated.n() * truth.n());
    for i in 0..estimated.n() {
        for j in 0..truth.n() {
            pairs.push((cosine(estimated.row(i), truth.row(j)), i, j));
        }
    }
    // Stable sort keeps lower indices first among ties.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used_est = vec![false; estimated.n()];
    let mut used_true = vec![false; truth.n()];
    let mut out = Vec::new();
    for (c, i, j) in pairs {
        if !used_est[i] && !used_true[j] {
            used_est[i] = true;
            used_true[j] = true;
            out.push(ComponentMatch {
                estimated: Some(i),
                truth: Some(j),
                cosine: c,
            });
        }
    }
    for (i, _) in used_est.iter().enumerate().filter(|(_, u)| !**u) {
        out.push(ComponentMatch {
            estimated: Some(i),
            truth: None,
            cosine: 0.0,
        });
    }
    for (j, _) in used_true.iter().enumerate().filter(|(_, u)| !**u) {
        out.push(ComponentMatch {
            estimated: None,
            truth: Some(j),
            cosine: 0.0,
        });
    }
    out
}

/// Mean cosine over matched pairs.
pub fn mean_matched_cosine(matches: &[ComponentMatch]) -> f64 {
    let matched: Vec<f64> = matches
        .iter()
        .filter(|m| m.estimated.is_some() && m.truth.is_some())
        .map(|m| m.cosine)
        .collect();
    if matched.is_empty() {
        0.0
    } else {
        matched.iter().sum::<f64>() / matched.len() as f64
    }
}

/// One benchmark run, as written to the run-record CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub n_true: usize,
    /// Samples per true component (4 or 8 in the standard protocol).
    pub mult: usize,
    pub snr_db: Option<f64>,
    pub r2: f64,
    /// Estimated component count.
    pub ec: usize,
    pub success: bool,
    pub seed: u64,
    pub wall_ms: u64,
    /// R^2 band the estimate was read from; empty for baselines.
    #[serde(default)]
    pub band: String,
}

/// Fraction of runs with `r2 >= threshold`.
pub fn success_rate(records: &[RunRecord], r2_threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Undefined("success rate of zero runs".into()));
    }
    let hits = records.iter().filter(|r| r.r2 >= r2_threshold).count();
    Ok(hits as f64 / records.len() as f64)
}
