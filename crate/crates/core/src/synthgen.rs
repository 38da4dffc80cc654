//! Synthetic mixture datasets with known ground truth.
//!
//! Randomness comes from ChaCha8 streams derived from one seed: stream 0 draws
//! the component pool and stream `i + 1` draws mixture `i`. Each sample
//! depends only on its own stream, so samples can be generated in any order.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ComponentBank, Dataset, GroundTruth, Spectrum};
use crate::error::{Error, Result};

/// Parameters of the mixture sampling process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_components: usize,
    pub d: usize,
    pub m_samples: usize,
    pub k_range: (usize, usize),
    pub c_range: (f64, f64),
    /// `None` generates noiseless mixtures.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_components: 16,
            d: 512,
            m_samples: 64,
            k_range: (1, 4),
            c_range: (1.0, 10.0),
            snr_db: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (k_min, k_max) = self.k_range;
        let (c_low, c_high) = self.c_range;
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_components == 0 || self.d == 0 || self.m_samples == 0 {
            return fail("component count, channel count and sample count must be positive".into());
        }
        if !(1 <= k_min && k_min <= k_max && k_max <= self.n_components) {
            return fail(format!(
                "k_range ({k_min}, {k_max}) must satisfy 1 <= K_min <= K_max <= {}",
                self.n_components
            ));
        }
        if !(c_low.is_finite() && c_high.is_finite() && c_low < c_high) {
            return fail(format!("c_range ({c_low}, {c_high}) must satisfy c_low < c_high"));
        }
        if self.n_components > self.d {
            return fail(format!(
                "{} components cannot be orthonormal in {} channels",
                self.n_components, self.d
            ));
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return fail("snr_db is NaN".into());
            }
        }
        Ok(())
    }
}

/// RNG for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Non-negative, unit-norm pool: element-wise absolute value of an
/// orthonormal basis for a random `n`-dimensional subspace of R^d.
///
/// The basis comes from Gram-Schmidt (two passes) on an i.i.d. standard
/// normal `n x d` matrix.
pub fn make_component_pool<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<ComponentBank> {
    if n > d {
        return Err(Error::InvalidConfig(format!(
            "{n} orthonormal rows do not exist in {d} dimensions"
        )));
    }
    let mut q = Array2::<f64>::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let (done, mut rest) = q.view_mut().split_at(Axis(0), i);
                let basis = done.row(j);
                let mut row = rest.row_mut(0);
                let proj = row.dot(&basis);
                row.scaled_add(-proj, &basis);
            }
        }
        let mut row = q.row_mut(i);
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    q.mapv_inplace(f64::abs);
    Ok(ComponentBank::new(q))
}

/// One sampled mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDraw {
    pub selection: Array1<u8>,
    pub concentrations: Array1<f64>,
    pub clean: Spectrum,
}

/// Weighted sum of the selected rows, accumulated in ascending row order.
pub fn mix(bank: &ComponentBank, selected: &[(usize, f64)]) -> Result<Spectrum> {
    let mut clean = Array1::<f64>::zeros(bank.d());
    let mut order: Vec<(usize, f64)> = selected.to_vec();
    order.sort_by_key(|&(j, _)| j);
    for (j, c) in order {
        if j >= bank.n() {
            return Err(Error::Shape(format!("component index {j} outside pool of {}", bank.n())));
        }
        clean.scaled_add(c, &bank.row(j));
    }
    Spectrum::new(clean)
}

/// Draws the component count, the component subset, their concentrations and
/// the clean mixed spectrum.
pub fn sample_mixture<R: Rng + ?Sized>(
    bank: &ComponentBank,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<MixtureDraw> {
    if bank.n() != cfg.n_components {
        return Err(Error::Shape(format!(
            "pool has {} components, config expects {}",
            bank.n(),
            cfg.n_components
        )));
    }
    let (k_min, k_max) = cfg.k_range;
    let (c_low, c_high) = cfg.c_range;
    let k = rng.random_range(k_min..=k_max);
    let mut chosen = index::sample(rng, bank.n(), k).into_vec();
    chosen.sort_unstable();
    let mut selection = Array1::<u8>::zeros(bank.n());
    let mut concentrations = Array1::<f64>::zeros(bank.n());
    let mut pairs = Vec::with_capacity(k);
    for j in chosen {
        let c = rng.random_range(c_low..c_high);
        selection[j] = 1;
        concentrations[j] = c;
        pairs.push((j, c));
    }
    let clean = mix(bank, &pairs)?;
    Ok(MixtureDraw {
        selection,
        concentrations,
        clean,
    })
}

/// Per-channel noise variance giving `snr_db` for a spectrum of squared norm
/// `energy` over `d` channels.
pub fn noise_variance(energy: f64, d: usize, snr_db: f64) -> f64 {
    energy / (d as f64 * 10f64.powf(snr_db / 10.0))
}

/// Adds i.i.d. Gaussian noise calibrated per sample so that the expected
/// noise energy `d * sigma^2` sits `snr_db` below the clean energy.
/// `f64::INFINITY` disables noise.
pub fn inject_noise<R: Rng + ?Sized>(clean: &Spectrum, snr_db: f64, rng: &mut R) -> Result<Spectrum> {
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    let energy = clean.squared_norm();
    if energy <= 0.0 {
        return Err(Error::Undefined("SNR of a zero-energy spectrum".into()));
    }
    let sigma = noise_variance(energy, clean.len(), snr_db).sqrt();
    let noisy = clean.values().mapv(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + sigma * z
    });
    Spectrum::new(noisy)
}

/// Builds a full dataset with ground truth. Deterministic in `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let bank = make_component_pool(cfg.n_components, cfg.d, &mut stream_rng(cfg.seed, 0))?;
    let (m, n, d) = (cfg.m_samples, cfg.n_components, cfg.d);
    let mut mixtures = Array2::<f64>::zeros((m, d));
    let mut concentrations = Array2::<f64>::zeros((m, n));
    let mut selection = Array2::<u8>::zeros((m, n));
    for i in 0..m {
        let mut rng = stream_rng(cfg.seed, i as u64 + 1);
        let draw = sample_mixture(&bank, cfg, &mut rng)?;
        let observed = match cfg.snr_db {
            Some(snr) => inject_noise(&draw.clean, snr, &mut rng)?,
            None => draw.clean,
        };
        mixtures.row_mut(i).assign(&observed.values());
        concentrations.row_mut(i).assign(&draw.concentrations);
        selection.row_mut(i).assign(&draw.selection);
    }
    Ok(Dataset {
        mixtures,
        ground_truth: Some(GroundTruth {
            components: bank,
            concentrations,
            selection,
            snr_db: cfg.snr_db,
            seed: cfg.seed,
            k_range: cfg.k_range,
            c_range: cfg.c_range,
        }),
    })
}
