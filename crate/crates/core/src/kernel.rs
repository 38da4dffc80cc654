//! RBF kernel and the duplicate-component (ambiguity) penalty built on it.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::ComponentBank;

/// How the RBF bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed { sigma: f64 },
    /// Median pairwise distance among the components currently evaluated.
    /// Treated as a constant when differentiating.
    Median,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Fixed { sigma: 1.0 }
    }
}

/// `K(a, b) = exp(-|a - b|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    pub sigma: f64,
}

impl RbfKernel {
    pub fn new(sigma: f64) -> Self {
        RbfKernel { sigma }
    }

    pub fn eval(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.at_sq_dist(sq)
    }

    fn at_sq_dist(&self, sq: f64) -> f64 {
        (-sq / (2.0 * self.sigma * self.sigma)).exp()
    }
}

impl Bandwidth {
    /// Resolves the rule against the rows of `vectors`.
    pub fn resolve(&self, vectors: &Array2<f64>) -> RbfKernel {
        match *self {
            Bandwidth::Fixed { sigma } => RbfKernel::new(sigma),
            Bandwidth::Median => {
                let sq = squared_distances(vectors);
                let n = vectors.nrows();
                let mut d: Vec<f64> = (0..n)
                    .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                    .map(|(i, j)| sq[[i, j]].sqrt())
                    .collect();
                if d.is_empty() {
                    return RbfKernel::new(1.0);
                }
                d.sort_by(f64::total_cmp);
                let mid = d.len() / 2;
                let median = if d.len().is_multiple_of(2) {
                    0.5 * (d[mid - 1] + d[mid])
                } else {
                    d[mid]
                };
                RbfKernel::new(if median > 0.0 { median } else { 1.0 })
            }
        }
    }
}

fn squared_distances(s: &Array2<f64>) -> Array2<f64> {
    let gram = s.dot(&s.t());
    let norms: Array1<f64> = gram.diag().to_owned();
    let mut sq = gram;
    for ((i, j), v) in sq.indexed_iter_mut() {
        *v = (norms[i] + norms[j] - 2.0 * *v).max(0.0);
    }
    for i in 0..s.nrows() {
        sq[[i, i]] = 0.0;
    }
    sq
}

/// Sum of kernel values over unordered pairs of the active components.
pub fn ambiguity_penalty(components: &ComponentBank, active: &[usize], kernel: &RbfKernel) -> f64 {
    let mut total = 0.0;
    for (a, &i) in active.iter().enumerate() {
        for &j in &active[a + 1..] {
            total += kernel.eval(components.row(i), components.row(j));
        }
    }
    total
}

/// Batched penalty: `sum_{i<j} w_ij K(s_i, s_j)` over the rows of `s`, where
/// `w` is symmetric (e.g. co-activation frequencies). Returns the value and
/// its gradient with respect to `s`.
pub(crate) fn weighted_pair_penalty(s: &Array2<f64>, w: &Array2<f64>, kernel: &RbfKernel) -> (f64, Array2<f64>) {
    let n = s.nrows();
    let sq = squared_distances(s);
    let inv_var = 1.0 / (kernel.sigma * kernel.sigma);
    let mut p = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || w[[i, j]] == 0.0 {
                continue;
            }
            let k = kernel.at_sq_dist(sq[[i, j]]);
            if i < j {
                value += w[[i, j]] * k;
            }
            p[[i, j]] = w[[i, j]] * k;
        }
    }
    // d/ds_i = -sum_j P_ij (s_i - s_j) / sigma^2
    let row_sums = p.sum_axis(Axis(1));
    let mut grad = p.dot(s);
    grad.zip_mut_with(&(s * &row_sums.insert_axis(Axis(1))), |g, &own| *g -= own);
    grad *= inv_var;
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn fewer_than_two_active_is_zero() {
        let bank = ComponentBank::new(array![[1.0, 0.0], [0.0, 1.0]]);
        let k = RbfKernel::new(1.0);
        assert_eq!(ambiguity_penalty(&bank, &[], &k), 0.0);
        assert_eq!(ambiguity_penalty(&bank, &[1], &k), 0.0);
    }

    #[test]
    fn identical_pair_scores_one() {
        let bank = ComponentBank::new(array![[0.3, 0.7, 0.1], [0.3, 0.7, 0.1]]);
        for sigma in [0.01, 1.0, 50.0] {
            assert_eq!(ambiguity_penalty(&bank, &[0, 1], &RbfKernel::new(sigma)), 1.0);
        }
    }

    #[test]
    fn orthonormal_triple() {
        let bank = ComponentBank::new(Array2::eye(3));
        let got = ambiguity_penalty(&bank, &[0, 1, 2], &RbfKernel::new(1.0));
        // Each pair is at squared distance 2: K = exp(-1).
        assert!((got - 3.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((got - 1.1036).abs() < 1e-4);
    }

    #[test]
    fn weighted_penalty_value_and_gradient() {
        let s = array![[0.2, 0.5, 0.1], [0.4, 0.1, 0.3], [0.0, 0.6, 0.2]];
        let w = array![[0.0, 0.5, 1.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let k = RbfKernel::new(0.7);
        let (v, g) = weighted_pair_penalty(&s, &w, &k);
        let bank = ComponentBank::new(s.clone());
        let direct = 0.5 * ambiguity_penalty(&bank, &[0, 1], &k) + ambiguity_penalty(&bank, &[0, 2], &k);
        assert!((v - direct).abs() < 1e-14);
        let h = 1e-6;
        for i in 0..3 {
            for c in 0..3 {
                let mut up = s.clone();
                up[[i, c]] += h;
                let mut dn = s.clone();
                dn[[i, c]] -= h;
                let fd = (weighted_pair_penalty(&up, &w, &k).0 - weighted_pair_penalty(&dn, &w, &k).0) / (2.0 * h);
                assert!((fd - g[[i, c]]).abs() < 1e-8, "({i},{c}) {fd} vs {}", g[[i, c]]);
            }
        }
    }

    #[test]
    fn median_rule_uses_pairwise_distances() {
        let s = array![[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]];
        // Distances 5, 1, sqrt(18); median sqrt(18).
        let k = Bandwidth::Median.resolve(&s);
        assert!((k.sigma - 18f64.sqrt()).abs() < 1e-12);
    }
}
