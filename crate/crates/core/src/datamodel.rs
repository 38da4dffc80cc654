//! Core domain types and the on-disk dataset format.
//!
//! A dataset directory holds `meta.json` plus comma-separated matrix files
//! without header rows. Reals are written with 17 significant digits so that
//! every `f64` survives a save/load cycle bit for bit.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

const META_FILE: &str = "meta.json";
const MIXTURES_FILE: &str = "mixtures.csv";
const COMPONENTS_FILE: &str = "components.csv";
const CONCENTRATIONS_FILE: &str = "concentrations.csv";
const SELECTION_FILE: &str = "selection.csv";

/// One observed or generated spectrum: intensity per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Array1<f64>);

impl Spectrum {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("spectrum channel {i} is not finite")));
        }
        Ok(Spectrum(values))
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.dot(&self.0)
    }
}

/// A set of component vectors, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBank {
    vectors: Array2<f64>,
}

impl ComponentBank {
    pub fn new(vectors: Array2<f64>) -> Self {
        ComponentBank { vectors }
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn d(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.vectors
    }

    /// Lists violated bank invariants. `non_negative` enables the sign check.
    pub fn violations(&self, non_negative: bool) -> Vec<String> {
        let mut out = Vec::new();
        for (i, row) in self.vectors.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                out.push(format!("component {i} has non-finite entries"));
            }
            if non_negative && row.iter().any(|&v| v < 0.0) {
                out.push(format!("component {i} has negative entries"));
            }
        }
        let mut seen: HashSet<Vec<u64>> = HashSet::new();
        for (i, row) in self.vectors.axis_iter(Axis(0)).enumerate() {
            let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(bits) {
                out.push(format!("component {i} duplicates an earlier row"));
            }
        }
        out
    }
}

/// Generation record attached to synthetic datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub components: ComponentBank,
    /// M x N; zero wherever `selection` is zero.
    pub concentrations: Array2<f64>,
    /// M x N, entries 0 or 1.
    pub selection: Array2<u8>,
    /// `None` for noiseless data.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub k_range: (usize, usize),
    pub c_range: (f64, f64),
}

/// Observed mixtures, one spectrum per row (the row index plays the role of
/// the sample-space element), with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mixtures: Array2<f64>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(mixtures: Array2<f64>) -> Self {
        Dataset {
            mixtures,
            ground_truth: None,
        }
    }

    pub fn d(&self) -> usize {
        self.mixtures.ncols()
    }

    pub fn m(&self) -> usize {
        self.mixtures.nrows()
    }

    pub fn n_true(&self) -> Option<usize> {
        self.ground_truth.as_ref().map(|g| g.components.n())
    }
}

/// Reconstruction quality of a resolved model on its dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolutionMetrics {
    pub r2: f64,
    pub mse: f64,
    pub nmse: f64,
    /// Mean fraction of the candidate pool selected per sample.
    pub usage: f64,
}

/// Components and concentrations extracted from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSolution {
    /// Pool indices of the retained components, ascending.
    pub active_indices: Vec<usize>,
    pub active_components: ComponentBank,
    /// M x n_active, already masked by the hard selection.
    pub concentrations: Array2<f64>,
    pub pool_size: usize,
    pub metrics: SolutionMetrics,
}

impl ResolvedSolution {
    pub fn n_active(&self) -> usize {
        self.active_indices.len()
    }
}

/// A single violated dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

/// Checks every dataset invariant. An empty report means the dataset is valid.
///
/// The noiseless-consistency check is skipped when the ground truth records
/// an SNR, since the mixtures then carry injected noise.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut report = Vec::new();
    let (m, d) = dataset.mixtures.dim();
    for ((r, c), v) in dataset.mixtures.indexed_iter() {
        if !v.is_finite() {
            report.push(Violation {
                invariant: "finite mixtures",
                detail: format!("mixtures[{r}, {c}] = {v}"),
            });
        }
    }
    let Some(gt) = &dataset.ground_truth else {
        return report;
    };
    let n = gt.components.n();
    if gt.components.d() != d {
        report.push(Violation {
            invariant: "component length",
            detail: format!("components have {} channels, mixtures have {d}", gt.components.d()),
        });
    }
    for detail in gt.components.violations(false) {
        report.push(Violation {
            invariant: "component bank",
            detail,
        });
    }
    if gt.concentrations.dim() != (m, n) || gt.selection.dim() != (m, n) {
        report.push(Violation {
            invariant: "ground-truth shape",
            detail: format!(
                "expected {m}x{n}, concentrations {:?}, selection {:?}",
                gt.concentrations.dim(),
                gt.selection.dim()
            ),
        });
        return report;
    }
    let (k_min, k_max) = gt.k_range;
    let (c_low, c_high) = gt.c_range;
    for (i, sel_row) in gt.selection.axis_iter(Axis(0)).enumerate() {
        if let Some(j) = sel_row.iter().position(|&s| s > 1) {
            report.push(Violation {
                invariant: "binary selection",
                detail: format!("selection[{i}, {j}] = {}", sel_row[j]),
            });
        }
        let k: usize = sel_row.iter().map(|&s| s as usize).sum();
        if k < k_min || k > k_max {
            report.push(Violation {
                invariant: "selection count",
                detail: format!("row {i} selects {k} components, allowed [{k_min}, {k_max}]"),
            });
        }
        for (j, (&s, &c)) in sel_row.iter().zip(gt.concentrations.row(i)).enumerate() {
            if s == 0 && c != 0.0 {
                report.push(Violation {
                    invariant: "masked concentration",
                    detail: format!("concentrations[{i}, {j}] = {c} where unselected"),
                });
            } else if s != 0 && !(c >= c_low && c < c_high) {
                report.push(Violation {
                    invariant: "concentration range",
                    detail: format!("concentrations[{i}, {j}] = {c} outside [{c_low}, {c_high})"),
                });
            }
        }
    }
    if gt.snr_db.is_none() && gt.components.d() == d {
        let clean = gt.concentrations.dot(gt.components.vectors());
        for (i, (row, expect)) in dataset
            .mixtures
            .axis_iter(Axis(0))
            .zip(clean.axis_iter(Axis(0)))
            .enumerate()
        {
            let scale = expect.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
            let worst = row
                .iter()
                .zip(expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if worst > 1e-10 * scale {
                report.push(Violation {
                    invariant: "noiseless consistency",
                    detail: format!("row {i} deviates from C*S by {worst:e}"),
                });
            }
        }
    }
    report
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: String,
    d: usize,
    m: usize,
    n_true: Option<usize>,
    snr_db: Option<f64>,
    seed: Option<u64>,
    k_range: Option<(usize, usize)>,
    c_range: Option<(f64, f64)>,
}

/// Formats a real with 17 significant digits (lossless for `f64`).
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_matrix<T, F>(path: &Path, rows: usize, cols: usize, get: F) -> Result<()>
where
    F: Fn(usize, usize) -> T,
    T: std::fmt::Display,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..rows {
        let mut line = String::with_capacity(cols * 24);
        for c in 0..cols {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&get(r, c).to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a real matrix as CSV in the dataset number format.
pub fn write_real_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_matrix(path, m.nrows(), m.ncols(), |r, c| format_real(m[[r, c]]))
}

fn read_matrix<T, F>(path: &Path, rows: usize, cols: usize, parse: F) -> Result<Array2<T>>
where
    F: Fn(&str) -> Option<T>,
    T: Clone + Default,
{
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
        })?;
    let mut out = Array2::<T>::default((rows, cols));
    let mut seen = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        if r >= rows {
            return Err(Error::DimensionMismatch {
                file: path.to_path_buf(),
                expected_rows: rows,
                expected_cols: cols,
                detail: format!("found more than {rows} rows"),
            });
        }
        if record.len() != cols {
            return Err(Error::DimensionMismatch {
                file: path.to_path_buf(),
                expected_rows: rows,
                expected_cols: cols,
                detail: format!("row {r} has {} columns", record.len()),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let text = field.trim();
            out[[r, c]] = parse(text).ok_or_else(|| Error::MalformedNumber {
                file: path.to_path_buf(),
                row: r,
                col: c,
                text: text.to_string(),
            })?;
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::DimensionMismatch {
            file: path.to_path_buf(),
            expected_rows: rows,
            expected_cols: cols,
            detail: format!("found {seen} rows"),
        });
    }
    Ok(out)
}

pub(crate) fn read_real_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    read_matrix(path, rows, cols, |s| s.parse::<f64>().ok())
}

/// Writes `meta.json`, `mixtures.csv` and, with ground truth, the three
/// ground-truth matrices into `dir` (created if missing).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gt = dataset.ground_truth.as_ref();
    let meta = Meta {
        format_version: FORMAT_VERSION.to_string(),
        d: dataset.d(),
        m: dataset.m(),
        n_true: gt.map(|g| g.components.n()),
        snr_db: gt.and_then(|g| g.snr_db),
        seed: gt.map(|g| g.seed),
        k_range: gt.map(|g| g.k_range),
        c_range: gt.map(|g| g.c_range),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    write_real_matrix(&dir.join(MIXTURES_FILE), &dataset.mixtures)?;
    if let Some(gt) = gt {
        write_real_matrix(&dir.join(COMPONENTS_FILE), gt.components.vectors())?;
        write_real_matrix(&dir.join(CONCENTRATIONS_FILE), &gt.concentrations)?;
        let sel = &gt.selection;
        write_matrix(&dir.join(SELECTION_FILE), sel.nrows(), sel.ncols(), |r, c| sel[[r, c]])?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
///
/// Ground truth is attached when `meta.json` names a component count and all
/// three ground-truth files are present.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "{}: unsupported format_version {:?}",
            meta_path.display(),
            meta.format_version
        )));
    }
    let mixtures = read_real_matrix(&dir.join(MIXTURES_FILE), meta.m, meta.d)?;
    let files: Vec<PathBuf> = [COMPONENTS_FILE, CONCENTRATIONS_FILE, SELECTION_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let ground_truth = match meta.n_true {
        Some(n) if files.iter().all(|p| p.exists()) => {
            let components = read_real_matrix(&files[0], n, meta.d)?;
            let concentrations = read_real_matrix(&files[1], meta.m, n)?;
            let selection = read_matrix(&files[2], meta.m, n, |s| s.parse::<u8>().ok())?;
            Some(GroundTruth {
                components: ComponentBank::new(components),
                concentrations,
                selection,
                snr_db: meta.snr_db,
                seed: meta.seed.unwrap_or(0),
                k_range: meta.k_range.unwrap_or((1, 4)),
                c_range: meta.c_range.unwrap_or((1.0, 10.0)),
            })
        }
        _ => None,
    };
    Ok(Dataset {
        mixtures,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_truth() -> Dataset {
        let comps = array![[1.0, 0.0, 0.5], [0.0, 2.0, 0.25]];
        let conc = array![[2.0, 0.0], [1.5, 3.0]];
        let sel = array![[1u8, 0], [1, 1]];
        Dataset {
            mixtures: conc.dot(&comps),
            ground_truth: Some(GroundTruth {
                components: ComponentBank::new(comps),
                concentrations: conc,
                selection: sel,
                snr_db: None,
                seed: 3,
                k_range: (1, 2),
                c_range: (1.0, 10.0),
            }),
        }
    }

    #[test]
    fn minimal_dataset_writes_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        save_dataset(&ds, dir.path()).unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, vec!["meta.json", "mixtures.csv"]);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn awkward_reals_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 5e-324, -0.0];
        let ds = Dataset::new(Array2::from_shape_vec((2, 3), vals.to_vec()).unwrap());
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        for (a, b) in ds.mixtures.iter().zip(back.mixtures.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ground_truth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_truth();
        assert!(validate(&ds).is_empty());
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn short_row_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&Dataset::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), dir.path()).unwrap();
        fs::write(dir.path().join("mixtures.csv"), "1,2,3\n4,5\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::DimensionMismatch { file, detail, .. }) => {
                assert!(file.ends_with("mixtures.csv"));
                assert!(detail.contains("row 1"), "{detail}");
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(Array2::from_elem((64, 2), 1.0));
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("mixtures.csv")).unwrap();
        let truncated: String = text.lines().take(63).map(|l| format!("{l}\n")).collect();
        fs::write(dir.path().join("mixtures.csv"), truncated).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("found 63 rows"), "{err}");
    }

    #[test]
    fn malformed_number_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&Dataset::new(array![[1.0, 2.0], [3.0, 4.0]]), dir.path()).unwrap();
        fs::write(dir.path().join("mixtures.csv"), "1,2\n3,x4\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MalformedNumber { row, col, .. }) => assert_eq!((row, col), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_many_selected_is_one_violation() {
        let mut ds = tiny_truth();
        let gt = ds.ground_truth.as_mut().unwrap();
        gt.k_range = (1, 1);
        let report = validate(&ds);
        assert_eq!(report.len(), 1, "{report:?}");
        assert_eq!(report[0].invariant, "selection count");
    }

    #[test]
    fn concentration_below_range_is_one_violation() {
        let mut ds = tiny_truth();
        let gt = ds.ground_truth.as_mut().unwrap();
        gt.concentrations[[0, 0]] = 0.5;
        gt.snr_db = Some(20.0); // mixtures no longer match; skip that check
        let report = validate(&ds);
        assert_eq!(report.len(), 1, "{report:?}");
        assert_eq!(report[0].invariant, "concentration range");
    }

    #[test]
    fn duplicate_components_flagged() {
        let bank = ComponentBank::new(array![[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]]);
        assert_eq!(bank.violations(false).len(), 1);
        let neg = ComponentBank::new(array![[1.0, -2.0]]);
        assert!(neg.violations(false).is_empty());
        assert_eq!(neg.violations(true).len(), 1);
    }

    #[test]
    fn spectrum_rejects_nan() {
        assert!(Spectrum::new(array![1.0, f64::NAN]).is_err());
        let s = Spectrum::new(array![3.0, 4.0]).unwrap();
        assert_eq!(s.squared_norm(), 25.0);
    }
}
