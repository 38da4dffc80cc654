//! Energy-based selection gate.
//!
//! An evaluator network maps each spectrum to a (select, reject) energy pair
//! per candidate component. Logits are negative energies. Training draws a
//! relaxed gate value through the Gumbel-softmax trick after a collapsed
//! Langevin refinement of the energies; evaluation thresholds the noiseless
//! low-temperature softmax.

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Per-minibatch multiplicative temperature decay.
pub const ANNEAL_RATE: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgldConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub enabled: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            epsilon: 0.01,
            steps: 5,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub tau0: f64,
    pub tau_min: f64,
    pub t_eval: f64,
    /// Probability a component needs at evaluation to count as selected.
    pub threshold: f64,
    pub sgld: SgldConfig,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau0: 1.0,
            tau_min: 0.4,
            t_eval: 0.01,
            threshold: 0.9,
            sgld: SgldConfig::default(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau0) {
            return Err(Error::InvalidConfig(format!(
                "gate temperatures need 0 < tau_min <= tau0, got {} and {}",
                self.tau_min, self.tau0
            )));
        }
        if self.t_eval <= 0.0 {
            return Err(Error::InvalidConfig("t_eval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig("selection threshold must lie in [0, 1]".into()));
        }
        if !(self.sgld.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("SGLD epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Select and reject energies, `batch x N` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTensor {
    pub select: Array2<f64>,
    pub reject: Array2<f64>,
}

impl EnergyTensor {
    pub fn new(select: Array2<f64>, reject: Array2<f64>) -> Result<Self> {
        if select.dim() != reject.dim() {
            return Err(Error::Shape(format!(
                "energy planes differ: {:?} vs {:?}",
                select.dim(),
                reject.dim()
            )));
        }
        Ok(EnergyTensor { select, reject })
    }

    /// Splits a `batch x 2N` evaluator output: select plane first.
    pub fn from_stacked(out: &Array2<f64>) -> Self {
        let n = out.ncols() / 2;
        EnergyTensor {
            select: out.slice(s![.., ..n]).to_owned(),
            reject: out.slice(s![.., n..]).to_owned(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.select.dim()
    }

    /// Mean of the squared entries over both planes.
    pub fn mean_square(&self) -> f64 {
        let total = self.select.iter().chain(self.reject.iter()).map(|e| e * e).sum::<f64>();
        total / (2 * self.select.len()).max(1) as f64
    }
}

/// Gate parameters and schedule state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub net: Mlp,
    /// Multiplier applied to spectra before they enter the network.
    pub input_scale: f64,
    /// Current Gumbel temperature.
    pub tau: f64,
    pub config: GateConfig,
}

impl GateState {
    pub fn pool_size(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn eval_energies(&self, batch: ArrayView2<'_, f64>) -> Result<EnergyTensor> {
        if batch.ncols() != self.net.input_dim() {
            return Err(Error::Shape(format!(
                "gate expects {} channels, batch has {}",
                self.net.input_dim(),
                batch.ncols()
            )));
        }
        let scaled = &batch * self.input_scale;
        Ok(EnergyTensor::from_stacked(&self.net.forward(scaled.view())))
    }
}

/// Energy surface driving the Langevin refinement.
pub trait EnergySurface {
    fn gradient(&self, e: f64) -> f64;
    /// Second derivative, needed to backpropagate through the refinement.
    fn curvature(&self, e: f64) -> f64;
}

/// `E(e) = e^2` per entry.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredNorm;

impl EnergySurface for SquaredNorm {
    fn gradient(&self, e: f64) -> f64 {
        2.0 * e
    }

    fn curvature(&self, _e: f64) -> f64 {
        2.0
    }
}

/// Standard normal draws for one refinement.
pub fn draw_sgld_noise<R: Rng + ?Sized>(dim: (usize, usize), rng: &mut R) -> EnergyTensor {
    let mut plane = || Array2::from_shape_simple_fn(dim, || StandardNormal.sample(&mut *rng));
    let select = plane();
    let reject = plane();
    EnergyTensor { select, reject }
}

/// Collapsed multi-step Langevin update with explicit noise:
/// `e' = e - (T eps / 2) grad E(e) + sqrt(T eps) eta`.
pub fn sgld_refine_with<S: EnergySurface>(
    e: &EnergyTensor,
    surface: &S,
    epsilon: f64,
    steps: usize,
    noise: &EnergyTensor,
) -> EnergyTensor {
    let t_eps = steps as f64 * epsilon;
    let scale = t_eps.sqrt();
    let step = |x: &Array2<f64>, eta: &Array2<f64>| {
        Zip::from(x)
            .and(eta)
            .map_collect(|&v, &n| v - 0.5 * t_eps * surface.gradient(v) + scale * n)
    };
    EnergyTensor {
        select: step(&e.select, &noise.select),
        reject: step(&e.reject, &noise.reject),
    }
}

/// `d e' / d e` of [`sgld_refine_with`], entrywise.
pub fn sgld_jacobian<S: EnergySurface>(e: &EnergyTensor, surface: &S, epsilon: f64, steps: usize) -> EnergyTensor {
    let t_eps = steps as f64 * epsilon;
    EnergyTensor {
        select: e.select.mapv(|v| 1.0 - 0.5 * t_eps * surface.curvature(v)),
        reject: e.reject.mapv(|v| 1.0 - 0.5 * t_eps * surface.curvature(v)),
    }
}

/// Refines energies with the squared-norm surface. Requires SGLD enabled in
/// `gate`; otherwise returns the input unchanged.
pub fn sgld_refine<R: Rng + ?Sized>(e: &EnergyTensor, gate: &GateConfig, rng: &mut R) -> EnergyTensor {
    if !gate.sgld.enabled || gate.sgld.steps == 0 {
        return e.clone();
    }
    let noise = draw_sgld_noise(e.dim(), rng);
    sgld_refine_with(e, &SquaredNorm, gate.sgld.epsilon, gate.sgld.steps, &noise)
}

/// Standard Gumbel draws, one per (sample, component, class).
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraws {
    pub select: Array2<f64>,
    pub reject: Array2<f64>,
}

impl GumbelDraws {
    pub fn sample<R: Rng + ?Sized>(dim: (usize, usize), rng: &mut R) -> Self {
        let mut plane = || {
            Array2::from_shape_simple_fn(dim, || {
                let u: f64 = rng.random::<f64>();
                // random() is in [0, 1); keep away from 0 so ln stays finite.
                let u = u.max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
        };
        let select = plane();
        let reject = plane();
        GumbelDraws { select, reject }
    }

    pub fn zeros(dim: (usize, usize)) -> Self {
        GumbelDraws {
            select: Array2::zeros(dim),
            reject: Array2::zeros(dim),
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Select coordinate of the two-class softmax over
/// `((-E_select + g_s) / tau, (-E_reject + g_r) / tau)`.
pub fn gate_values(e: &EnergyTensor, tau: f64, draws: &GumbelDraws) -> Array2<f64> {
    let mut out = Array2::zeros(e.dim());
    Zip::from(&mut out)
        .and(&e.select)
        .and(&e.reject)
        .and(&draws.select)
        .and(&draws.reject)
        .for_each(|o, &es, &er, &gs, &gr| *o = sigmoid(((er - es) + (gs - gr)) / tau));
    out
}

/// Relaxed Gumbel-softmax gate values in [0, 1]; returns the draws used.
pub fn gumbel_select<R: Rng + ?Sized>(e: &EnergyTensor, tau: f64, rng: &mut R) -> (Array2<f64>, GumbelDraws) {
    let draws = GumbelDraws::sample(e.dim(), rng);
    (gate_values(e, tau, &draws), draws)
}

/// Backpropagates `d loss / d gate` to the two energy planes.
pub fn gate_backward(gates: &Array2<f64>, tau: f64, grad_gate: &Array2<f64>) -> EnergyTensor {
    let mut reject = Array2::zeros(gates.dim());
    Zip::from(&mut reject)
        .and(gates)
        .and(grad_gate)
        .for_each(|r, &g, &dg| *r = dg * g * (1.0 - g) / tau);
    let select = reject.mapv(|v: f64| -v);
    EnergyTensor { select, reject }
}

/// Noiseless selection probabilities at `t_eval` and the thresholded hard
/// decisions.
pub fn hard_select(e: &EnergyTensor, t_eval: f64, threshold: f64) -> (Array2<u8>, Array2<f64>) {
    let probs = Zip::from(&e.select)
        .and(&e.reject)
        .map_collect(|&es, &er| sigmoid((er - es) / t_eval));
    let delta = probs.mapv(|p| u8::from(p >= threshold));
    (delta, probs)
}

/// `max(tau_min, 0.999 tau)`.
pub fn anneal_temperature(tau: f64, tau_min: f64) -> f64 {
    (ANNEAL_RATE * tau).max(tau_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(e: f64, n: usize) -> Array2<f64> {
        Array2::from_elem((1, n), e)
    }

    fn gate(zero_last: bool) -> GateState {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        GateState {
            net: Mlp::new(&[5, 7, 7, 6], Activation::Silu, zero_last, &mut rng),
            input_scale: 1.0,
            tau: 1.0,
            config: GateConfig::default(),
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let g = gate(true);
        let x = Array2::from_elem((2, 5), 0.3);
        let e = g.eval_energies(x.view()).unwrap();
        assert!(e.select.iter().chain(e.reject.iter()).all(|&v| v == 0.0));
        let (_, probs) = hard_select(&e, 0.01, 0.9);
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn duplicated_rows_give_identical_energies() {
        let g = gate(false);
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5], [0.1, 0.2, 0.3, 0.4, 0.5]];
        let e = g.eval_energies(x.view()).unwrap();
        assert_eq!(e.select.row(0), e.select.row(1));
        assert_eq!(e.reject.row(0), e.reject.row(1));
        assert_eq!(e.dim(), (2, 3));
    }

    #[test]
    fn energies_respond_to_parameters() {
        let mut g = gate(false);
        let x = array![[0.1, -0.2, 0.3, 0.4, 0.5]];
        let before = g.eval_energies(x.view()).unwrap();
        g.net.layers[0].w[[2, 1]] += 1e-3;
        let after = g.eval_energies(x.view()).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let g = gate(false);
        let x = Array2::zeros((1, 4));
        assert!(matches!(g.eval_energies(x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_steps_is_identity() {
        let e = EnergyTensor::new(array![[0.3, -1.0]], array![[2.0, 0.0]]).unwrap();
        let cfg = GateConfig {
            sgld: SgldConfig {
                steps: 0,
                ..SgldConfig::default()
            },
            ..GateConfig::default()
        };
        let out = sgld_refine(&e, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, e);
        let noise = draw_sgld_noise((1, 2), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(sgld_refine_with(&e, &SquaredNorm, 0.01, 0, &noise), e);
    }

    #[test]
    fn refinement_statistics() {
        // e' = e (1 - T eps) + sqrt(T eps) eta with T eps = 0.05.
        let n = 10_000;
        let e = EnergyTensor::new(flat(1.0, n), flat(1.0, n)).unwrap();
        let cfg = GateConfig::default();
        let out = sgld_refine(&e, &cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let vals: Vec<f64> = out.select.iter().copied().collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - 0.95) * (v - 0.95)).sum::<f64>() / n as f64;
        assert!((mean - 0.95).abs() < 0.01, "mean {mean}");
        assert!((var - 0.05).abs() < 0.05 * 0.05, "var {var}");
    }

    #[test]
    fn equal_energies_select_half_the_time() {
        let n = 100_000;
        let e = EnergyTensor::new(flat(0.4, n), flat(0.4, n)).unwrap();
        let (g, _) = gumbel_select(&e, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mean = g.mean().unwrap();
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!(g.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn low_temperature_saturates() {
        // logits (10, 0) as energies (-10, 0)
        let e = EnergyTensor::new(flat(-10.0, 1000), flat(0.0, 1000)).unwrap();
        let (g, _) = gumbel_select(&e, 0.01, &mut ChaCha8Rng::seed_from_u64(6));
        assert!(g.iter().all(|&v| v > 0.999));
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = EnergyTensor::new(
            Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let draws = GumbelDraws::sample((3, 4), &mut rng);
        let weights = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let tau = 0.6;
        let g = gate_values(&e, tau, &draws);
        let back = gate_backward(&g, tau, &weights);
        let loss = |e: &EnergyTensor| (&gate_values(e, tau, &draws) * &weights).sum();
        let h = 1e-6;
        for plane in 0..2 {
            for idx in 0..12 {
                let (r, c) = (idx / 4, idx % 4);
                let mut up = e.clone();
                let mut dn = e.clone();
                let (u, d, a) = if plane == 0 {
                    (&mut up.select, &mut dn.select, back.select[[r, c]])
                } else {
                    (&mut up.reject, &mut dn.reject, back.reject[[r, c]])
                };
                u[[r, c]] += h;
                d[[r, c]] -= h;
                let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-12);
                assert!(rel <= 1e-5, "plane {plane} ({r},{c}): {fd} vs {a}");
            }
        }
    }

    #[test]
    fn clear_gap_selects_at_eval_temperature() {
        let e = EnergyTensor::new(array![[0.0, 0.5, 0.3]], array![[0.1, 0.5, 0.2]]).unwrap();
        let (delta, probs) = hard_select(&e, 0.01, 0.9);
        assert!(probs[[0, 0]] > 0.999);
        assert_eq!(delta[[0, 0]], 1);
        assert_eq!(probs[[0, 1]], 0.5);
        assert_eq!(delta[[0, 1]], 0);
        assert_eq!(delta[[0, 2]], 0);
    }

    #[test]
    fn hard_select_shift_invariant() {
        let e = EnergyTensor::new(array![[0.0, 1.0, -0.3]], array![[0.25, 0.5, 0.2]]).unwrap();
        let shifted = EnergyTensor::new(&e.select + 0.75, &e.reject + 0.75).unwrap();
        assert_eq!(hard_select(&e, 0.01, 0.9).0, hard_select(&shifted, 0.01, 0.9).0);
    }

    #[test]
    fn annealing_schedule() {
        assert_eq!(anneal_temperature(1.0, 0.4), 0.999);
        assert_eq!(anneal_temperature(0.4, 0.4), 0.4);
        let mut tau = 1.0;
        for _ in 0..2000 {
            tau = anneal_temperature(tau, 0.4);
        }
        assert_eq!(tau, 0.4);
    }
}
