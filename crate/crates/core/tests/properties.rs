use ebgmcr::baselines::{candidate_ranks, nmf_solve, rank_search, SolveOptions};
use ebgmcr::constraint::ConstraintOp;
use ebgmcr::datamodel::ComponentBank;
use ebgmcr::ebselect::{gate_values, hard_select, EnergyTensor, GumbelDraws};
use ebgmcr::metrics::{match_components, r_squared};
use ebgmcr::solver::{count_median_crossings, generate, init_model, next_lambda, CheckpointBank, SolverConfig};
use ebgmcr::synthgen::stream_rng;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

fn cos(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

proptest! {
    #[test]
    fn r_squared_ignores_common_shift(x in matrix(4, 5, -3.0, 3.0), e in matrix(4, 5, -0.5, 0.5), k in -50.0..50.0f64) {
        let x_hat = &x + &e;
        let base = r_squared(&x, &x_hat).unwrap();
        let shifted = r_squared(&(&x + k), &(&x_hat + k)).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        prop_assert!(base <= 1.0);
    }

    #[test]
    fn r_squared_is_one_only_for_exact_fit(x in matrix(3, 4, -2.0, 2.0), i in 0usize..3, j in 0usize..4, bump in 1e-3..1.0f64) {
        prop_assert_eq!(r_squared(&x, &x).unwrap(), 1.0);
        let mut y = x.clone();
        y[[i, j]] += bump;
        prop_assert!(r_squared(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn greedy_matching_is_a_partial_injection_with_the_greedy_choice_property(
        est in sized_matrix(5, 6, 0.0, 1.0),
        truth_rows in 1usize..5,
        seed in 0u64..1000,
    ) {
        let d = est.ncols();
        let truth = Array2::from_shape_fn((truth_rows, d), |(r, c)| ((seed as usize * 31 + r * 7 + c * 13) % 17) as f64 / 17.0);
        let (eb, tb) = (ComponentBank::new(est.clone()), ComponentBank::new(truth.clone()));
        let m = match_components(&eb, &tb);
        let pairs: Vec<(usize, usize)> = m.iter().filter_map(|p| Some((p.estimated?, p.truth?))).collect();
        let mut seen_e = vec![false; est.nrows()];
        let mut seen_t = vec![false; truth_rows];
        for &(i, j) in &pairs {
            prop_assert!(!seen_e[i] && !seen_t[j]);
            seen_e[i] = true;
            seen_t[j] = true;
        }
        prop_assert_eq!(pairs.len(), est.nrows().min(truth_rows));
        // Each pair beats every pairing it excluded when it was chosen.
        for a in 0..pairs.len() {
            let (i1, j1) = pairs[a];
            let chosen = cos(est.row(i1), truth.row(j1));
            for &(i2, j2) in &pairs[a + 1..] {
                prop_assert!(cos(est.row(i1), truth.row(j2)) <= chosen + 1e-12);
                prop_assert!(cos(est.row(i2), truth.row(j1)) <= chosen + 1e-12);
            }
        }
    }

    #[test]
    fn nmf_objective_never_increases(v in matrix(6, 5, 0.0, 2.0), rank in 1usize..4, seed in 0u64..100) {
        let fit = nmf_solve(&v, rank, SolveOptions { max_iters: 60, tol: 0.0, seed }).unwrap();
        for w in fit.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-10) + 1e-12, "{} -> {}", w[0], w[1]);
        }
        prop_assert!(fit.left.iter().chain(fit.right.iter()).all(|&x| x >= 0.0));
    }

    #[test]
    fn rank_search_picks_last_maximum(scores in proptest::collection::vec(0.0..1.0f64, 9), c_star in 10usize..40) {
        let ranks = candidate_ranks(c_star);
        prop_assert_eq!(ranks.len(), 9);
        let mut k = 0;
        let out = rank_search(|_| { let s = scores[k]; k += 1; Ok(s) }, c_star, 0.5).unwrap();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let last = scores.iter().rposition(|&s| s == best).unwrap();
        prop_assert_eq!(out.r2_best, best);
        prop_assert_eq!(out.c_selected, ranks[last]);
        prop_assert_eq!(out.success, best >= 0.5);
        let tried: Vec<usize> = out.trace.iter().map(|t| t.0).collect();
        prop_assert_eq!(tried, ranks);
    }

    #[test]
    fn gates_stay_in_unit_interval(
        sel in matrix(3, 4, -30.0, 30.0),
        rej in matrix(3, 4, -30.0, 30.0),
        gs in matrix(3, 4, -5.0, 5.0),
        gr in matrix(3, 4, -5.0, 5.0),
        tau in 0.01..2.0f64,
    ) {
        let e = EnergyTensor::new(sel, rej).unwrap();
        let g = gate_values(&e, tau, &GumbelDraws { select: gs, reject: gr });
        prop_assert!(g.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (hard, probs) = hard_select(&e, 0.01, 0.9);
        for (&h, &p) in hard.iter().zip(&probs) {
            prop_assert!(h <= 1);
            prop_assert_eq!(h == 1, p >= 0.9);
        }
    }

    #[test]
    fn linear_generation_is_additive_in_weights(
        g1 in matrix(3, 5, 0.0, 1.0),
        g2 in matrix(3, 5, 0.0, 1.0),
        conc in matrix(3, 5, 0.0, 10.0),
        seed in 0u64..1000,
    ) {
        let cfg = SolverConfig { pool_size: 5, d: 4, energy_hidden: Some(vec![3]), conc_hidden: Some(vec![3]), ..SolverConfig::default() };
        let data = Array2::from_elem((2, 4), 1.0);
        let model = init_model(&cfg, data.view(), &mut stream_rng(seed, 0)).unwrap();
        let both = generate(&model, &(&g1 + &g2), &conc);
        let sum = generate(&model, &g1, &conc) + generate(&model, &g2, &conc);
        for (a, b) in both.iter().zip(&sum) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn lambda_rule(mse in 1e-6..1.0f64, nmse in 0.0..0.02f64, usage in 0.0..64.0f64, active in any::<bool>()) {
        let cfg = SolverConfig::default();
        let (on, lambda) = next_lambda(active, mse, nmse, usage, &cfg);
        prop_assert_eq!(on, active || nmse < cfg.nmse_gate);
        if !on {
            prop_assert_eq!(lambda, 0.0);
        } else {
            prop_assert!(lambda > 0.95 && lambda <= cfg.lambda_cap);
            if usage > 0.0 {
                prop_assert!((lambda - (0.95 + 0.05 / (mse * usage)).min(cfg.lambda_cap)).abs() <= 1e-12 * lambda);
            } else {
                prop_assert_eq!(lambda, cfg.lambda_cap);
            }
        }
    }

    #[test]
    fn stored_usage_never_increases(events in proptest::collection::vec((0.96..1.0f64, 0usize..40), 1..200)) {
        let mut bank: CheckpointBank<usize> = CheckpointBank::new(ebgmcr::solver::DEFAULT_BANDS.to_vec());
        let mut last: Vec<Option<usize>> = vec![None; bank.bands.len()];
        for (epoch, &(r2, usage)) in events.iter().enumerate() {
            bank.offer(epoch, r2, usage, || epoch);
            for (b, prev) in last.iter_mut().enumerate() {
                let now = bank.entry(b).map(|e| e.usage);
                if let (Some(p), Some(n)) = (*prev, now) {
                    prop_assert!(n <= p);
                }
                prop_assert!(prev.is_none() || now.is_some());
                *prev = now;
            }
        }
    }

    #[test]
    fn crossings_are_invariant_to_shift(values in proptest::collection::vec(0usize..50, 0..80), k in 0usize..100) {
        let shifted: Vec<usize> = values.iter().map(|v| v + k).collect();
        prop_assert_eq!(count_median_crossings(&values), count_median_crossings(&shifted));
        prop_assert!(count_median_crossings(&values) < values.len().max(1));
    }

    #[test]
    fn constraint_ops_are_non_negative(x in -50.0..50.0f64) {
        for op in [ConstraintOp::Abs, ConstraintOp::Relu, ConstraintOp::Softplus] {
            prop_assert!(op.apply(x) >= 0.0);
        }
    }
}

/// Greedy matching is not swap-optimal: taking the single best pair first
/// can strand two good cross pairings.
#[test]
fn greedy_matching_can_lose_to_a_swap() {
    let b = 0.19f64.sqrt();
    let est = ComponentBank::new(ndarray::array![[1.0, 0.0, 0.0], [0.9, 0.0, b]]);
    let truth = ComponentBank::new(ndarray::array![[1.0, 0.0, 0.0], [0.9, 0.0, -b]]);
    let m = match_components(&est, &truth);
    assert_eq!((m[0].estimated, m[0].truth), (Some(0), Some(0)));
    assert_eq!((m[1].estimated, m[1].truth), (Some(1), Some(1)));
    // Greedy: 1 + (0.81 - 0.19). Swapped: 0.9 + 0.9.
    let greedy: f64 = m.iter().map(|p| p.cosine).sum();
    let (e, t) = (est.vectors(), truth.vectors());
    let swapped = cos(e.row(0), t.row(1)) + cos(e.row(1), t.row(0));
    assert!((greedy - 1.62).abs() < 1e-12);
    assert!((swapped - 1.8).abs() < 1e-12);
}
