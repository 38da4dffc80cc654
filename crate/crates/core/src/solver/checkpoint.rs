use serde::{Deserialize, Serialize};

/// One populated band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEntry<T> {
    pub snapshot: T,
    /// Active component count of the stored snapshot.
    pub usage: usize,
    pub r2: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Stored,
    Replaced,
    Kept,
    OutOfBand,
}

/// Record of one checkpoint decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub epoch: usize,
    pub r2: f64,
    pub usage: usize,
    pub band: Option<usize>,
    pub action: AuditAction,
}

/// One slot per R^2 band holding the most parsimonious snapshot seen there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBank<T> {
    pub bands: Vec<(f64, f64)>,
    pub entries: Vec<Option<BandEntry<T>>>,
    pub audit: Vec<AuditEntry>,
}

impl<T> CheckpointBank<T> {
    pub fn new(bands: Vec<(f64, f64)>) -> Self {
        let entries = bands.iter().map(|_| None).collect();
        CheckpointBank {
            bands,
            entries,
            audit: Vec::new(),
        }
    }

    /// Index of the band with `lo <= r2 < hi`.
    pub fn band_of(&self, r2: f64) -> Option<usize> {
        self.bands.iter().position(|&(lo, hi)| lo <= r2 && r2 < hi)
    }

    /// Index of the band with exactly these bounds.
    pub fn find_band(&self, lo: f64, hi: f64) -> Option<usize> {
        self.bands.iter().position(|&b| b == (lo, hi))
    }

    pub fn entry(&self, band: usize) -> Option<&BandEntry<T>> {
        self.entries.get(band).and_then(Option::as_ref)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }

    /// Populated band closest to `band` by index; ties go to the higher band.
    pub fn nearest_populated(&self, band: usize) -> Option<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].is_some())
            .min_by_key(|&i| (i.abs_diff(band), std::cmp::Reverse(i)))
    }

    /// Offers an evaluation. `snapshot` is only called when the slot changes.
    /// Returns the band index when the slot was written.
    pub fn offer(&mut self, epoch: usize, r2: f64, usage: usize, snapshot: impl FnOnce() -> T) -> Option<usize> {
        let band = self.band_of(r2);
        let action = match band {
            None => AuditAction::OutOfBand,
            Some(b) => match &self.entries[b] {
                None => AuditAction::Stored,
                Some(e) if usage < e.usage => AuditAction::Replaced,
                Some(_) => AuditAction::Kept,
            },
        };
        self.audit.push(AuditEntry {
            epoch,
            r2,
            usage,
            band,
            action,
        });
        match (band, action) {
            (Some(b), AuditAction::Stored | AuditAction::Replaced) => {
                self.entries[b] = Some(BandEntry {
                    snapshot: snapshot(),
                    usage,
                    r2,
                    epoch,
                });
                Some(b)
            }
            _ => None,
        }
    }

    /// Drops snapshots, keeping bookkeeping.
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> CheckpointBank<U> {
        CheckpointBank {
            bands: self.bands,
            entries: self
                .entries
                .into_iter()
                .map(|e| {
                    e.map(|e| BandEntry {
                        snapshot: f(e.snapshot),
                        usage: e.usage,
                        r2: e.r2,
                        epoch: e.epoch,
                    })
                })
                .collect(),
            audit: self.audit,
        }
    }
}

/// Number of sign changes of `series - median(series)`, skipping values
/// equal to the median.
pub fn count_median_crossings(series: &[usize]) -> usize {
    if series.len() < 2 {
        return 0;
    }
    let mut sorted: Vec<f64> = series.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let mut last: Option<bool> = None;
    let mut crossings = 0;
    for &v in series {
        let v = v as f64;
        if v == median {
            continue;
        }
        let above = v > median;
        if last.is_some_and(|l| l != above) {
            crossings += 1;
        }
        last = Some(above);
    }
    crossings
}

/// Joint energy and usage-oscillation stopping condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub energy_threshold: f64,
    pub window: usize,
    pub min_crossings: usize,
}

impl StopRule {
    /// `history` holds `(mean_sel_energy, active_count)` per evaluation,
    /// oldest first. Requires a full window.
    pub fn should_stop(&self, history: &[(f64, usize)]) -> bool {
        let Some(&(energy, _)) = history.last() else {
            return false;
        };
        if !(energy < self.energy_threshold) || history.len() < self.window {
            return false;
        }
        let counts: Vec<usize> = history[history.len() - self.window..].iter().map(|h| h.1).collect();
        count_median_crossings(&counts) >= self.min_crossings
    }
}
