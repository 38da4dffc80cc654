//! Fixed-rank factorization baselines and the rank-search protocol used to
//! score them without knowledge of the true rank.
//!
//! Both solvers clip negative inputs to zero before fitting, since noisy
//! spectra can dip below zero.

use nalgebra::{Cholesky, DMatrix};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::r_squared;
use crate::synthgen::stream_rng;

pub const DEFAULT_MAX_ITERS: usize = 2000;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Ridge added to singular normal equations, relative to their mean diagonal.
pub const RIDGE: f64 = 1e-8;
/// Ratios of the reference rank tried by [`rank_search`], in percent.
pub const RANK_RATIOS_PERCENT: [usize; 9] = [80, 85, 90, 95, 100, 105, 110, 115, 120];

const MU_EPS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationResult {
    /// M x r concentrations.
    pub left: Array2<f64>,
    /// r x d components.
    pub right: Array2<f64>,
    /// R^2 against the unclipped input.
    pub r2: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// Squared Frobenius error after each iteration (clipped input).
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

fn check_rank(d: &Array2<f64>, rank: usize) -> Result<()> {
    let limit = d.nrows().min(d.ncols());
    if rank == 0 || rank > limit {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} outside 1..={limit} for a {}x{} matrix",
            d.nrows(),
            d.ncols()
        )));
    }
    Ok(())
}

fn sq_error(v: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let diff = v - &w.dot(h);
    diff.iter().map(|x| x * x).sum()
}

fn random_factors(v: &Array2<f64>, rank: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = stream_rng(seed, 0);
    let (m, d) = v.dim();
    let scale = (v.mean().unwrap_or(0.0).max(0.0) / rank as f64).sqrt().max(1e-6);
    let w = Array2::from_shape_simple_fn((m, rank), || scale * rng.random_range(0.0..1.0));
    let h = Array2::from_shape_simple_fn((rank, d), || scale * rng.random_range(0.0..1.0));
    (w, h)
}

fn finish(
    input: &Array2<f64>,
    w: Array2<f64>,
    h: Array2<f64>,
    iterations_run: usize,
    converged: bool,
    objective: Vec<f64>,
) -> Result<FactorizationResult> {
    let r2 = r_squared(input, &w.dot(&h))?;
    Ok(FactorizationResult {
        left: w,
        right: h,
        r2,
        iterations_run,
        converged,
        objective,
    })
}

fn improved_less_than(prev: f64, cur: f64, tol: f64) -> bool {
    prev <= 0.0 || ((prev - cur) / prev).abs() < tol
}

/// Non-negative matrix factorization by Lee-Seung multiplicative updates on
/// the Frobenius error.
pub fn nmf_solve(d: &Array2<f64>, rank: usize, opts: SolveOptions) -> Result<FactorizationResult> {
    check_rank(d, rank)?;
    let v = d.mapv(|x| x.max(0.0));
    let (mut w, mut h) = random_factors(&v, rank, opts.seed);
    let mut objective = Vec::new();
    let mut prev = sq_error(&v, &w, &h);
    for it in 1..=opts.max_iters {
        let num = w.t().dot(&v);
        let den = w.t().dot(&w).dot(&h);
        h.zip_mut_with(&num, |x, &n| *x *= n);
        h.zip_mut_with(&den, |x, &q| *x /= q + MU_EPS);
        let num = v.dot(&h.t());
        let den = w.dot(&h.dot(&h.t()));
        w.zip_mut_with(&num, |x, &n| *x *= n);
        w.zip_mut_with(&den, |x, &q| *x /= q + MU_EPS);
        let cur = sq_error(&v, &w, &h);
        objective.push(cur);
        if improved_less_than(prev, cur, opts.tol) {
            return finish(d, w, h, it, true, objective);
        }
        prev = cur;
    }
    finish(d, w, h, opts.max_iters, false, objective)
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Solves `gram X = rhs` for symmetric positive semi-definite `gram`,
/// adding a ridge when the factorization fails.
fn spd_solve(gram: &Array2<f64>, rhs: &Array2<f64>) -> Array2<f64> {
    let g = to_na(gram);
    let b = to_na(rhs);
    let chol = Cholesky::new(g.clone()).or_else(|| {
        let r = g.nrows();
        let mean_diag = g.trace() / r as f64;
        let ridge = RIDGE * if mean_diag > 0.0 { mean_diag } else { 1.0 };
        Cholesky::new(g + DMatrix::identity(r, r) * ridge)
    });
    match chol {
        Some(c) => {
            let x = c.solve(&b);
            Array2::from_shape_fn((x.nrows(), x.ncols()), |(i, j)| x[(i, j)])
        }
        None => Array2::zeros(rhs.dim()),
    }
}

/// Alternating least squares with non-negativity imposed by projecting each
/// closed-form update onto the non-negative orthant.
pub fn mcr_als_solve(d: &Array2<f64>, rank: usize, opts: SolveOptions) -> Result<FactorizationResult> {
    check_rank(d, rank)?;
    let v = d.mapv(|x| x.max(0.0));
    let (mut c, mut s) = random_factors(&v, rank, opts.seed);
    let mut objective = Vec::new();
    let mut prev = sq_error(&v, &c, &s);
    for it in 1..=opts.max_iters {
        // S = (C^T C)^-1 C^T D
        s = spd_solve(&c.t().dot(&c), &c.t().dot(&v)).mapv(|x| x.max(0.0));
        // C^T = (S S^T)^-1 S D^T
        c = spd_solve(&s.dot(&s.t()), &s.dot(&v.t())).reversed_axes().mapv(|x| x.max(0.0));
        let cur = sq_error(&v, &c, &s);
        objective.push(cur);
        if improved_less_than(prev, cur, opts.tol) {
            return finish(d, c, s, it, true, objective);
        }
        prev = cur;
    }
    finish(d, c, s, opts.max_iters, false, objective)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSearchOutcome {
    pub success: bool,
    pub r2_best: f64,
    pub c_selected: usize,
    /// `(c_try, r2)` in the order tried.
    pub trace: Vec<(usize, f64)>,
}

/// Ranks tried for reference rank `c_star`: `floor(p * c_star / 100)` for
/// each ratio `p`, zeros dropped.
pub fn candidate_ranks(c_star: usize) -> Vec<usize> {
    RANK_RATIOS_PERCENT
        .iter()
        .map(|p| p * c_star / 100)
        .filter(|&c| {
            if c == 0 {
                log::warn!("rank ratio yields zero components for reference rank {c_star}; skipped");
            }
            c > 0
        })
        .collect()
}

/// Fits each candidate rank with `solve` (returning R^2) and keeps the best.
/// Ties go to the later candidate.
pub fn rank_search<F>(mut solve: F, c_star: usize, r2_target: f64) -> Result<RankSearchOutcome>
where
    F: FnMut(usize) -> Result<f64>,
{
    if c_star == 0 {
        return Err(Error::InvalidConfig("reference rank must be at least 1".into()));
    }
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for c_try in candidate_ranks(c_star) {
        let r2 = solve(c_try)?;
        trace.push((c_try, r2));
        if best.is_none_or(|(_, b)| r2 >= b) {
            best = Some((c_try, r2));
        }
    }
    let (c_selected, r2_best) =
        best.ok_or_else(|| Error::InvalidConfig(format!("no usable rank for reference rank {c_star}")))?;
    Ok(RankSearchOutcome {
        success: r2_best >= r2_target,
        r2_best,
        c_selected,
        trace,
    })
}
