//! CSV ingestion, streams, synthetic data and outlier injection.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservationWindow;
use crate::serde_mat;

/// Outlier magnitudes used in the reference experiments.
pub const OUTLIER_SCALE_GRID: [f64; 5] = [0.75, 1.0, 1.25, 1.5, 1.75];

fn is_missing(cell: &str, token: &str) -> bool {
    let cell = cell.trim();
    cell.is_empty() || (!token.is_empty() && cell == token)
}

/// Reads a rows-are-series CSV without a header. Empty cells and cells equal
/// to `missing_token` are missing.
pub fn read_csv<R: Read>(reader: R, missing_token: &str) -> Result<ObservationWindow> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut cells = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let expected = *cols.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Ragged {
                row,
                found: record.len(),
                expected,
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if is_missing(cell, missing_token) {
                cells.push(None);
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|e| Error::Parse {
                row,
                col,
                msg: format!("{cell:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col,
                    msg: format!("{cell:?} is not finite"),
                });
            }
            cells.push(Some(v));
        }
        rows += 1;
    }
    ObservationWindow::from_row_major(rows, cols.unwrap_or(0), &cells)
}

pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<ObservationWindow> {
    read_csv(std::fs::File::open(path)?, missing_token)
}

/// Writes a window with missing cells as `missing_token`.
pub fn write_window<W: Write>(win: &ObservationWindow, writer: W, missing_token: &str) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..win.m() {
        let row: Vec<String> = (0..win.t())
            .map(|tau| match win.get(i, tau) {
                Some(v) => format_value(v),
                None => missing_token.to_string(),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(win: &ObservationWindow, path: impl AsRef<Path>, missing_token: &str) -> Result<()> {
    write_window(win, std::fs::File::create(path)?, missing_token)
}

/// Writes a dense matrix, one row per line.
pub fn write_matrix<W: Write>(mat: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..mat.nrows() {
        let row: Vec<String> = mat.row(i).iter().map(|&v| format_value(v)).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_csv(mat: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_matrix(mat, std::fs::File::create(path)?)
}

/// Shortest representation that parses back to the same value.
fn format_value(v: f64) -> String {
    format!("{v:?}")
}

/// Reads a 0/1 mask sidecar.
pub fn read_mask<R: Read>(reader: R) -> Result<DMatrix<bool>> {
    let win = read_csv(reader, "")?;
    let mut mask = DMatrix::from_element(win.m(), win.t(), false);
    for i in 0..win.m() {
        for tau in 0..win.t() {
            mask[(i, tau)] = match win.get(i, tau) {
                Some(v) if v == 1.0 => true,
                Some(v) if v == 0.0 => false,
                other => {
                    return Err(Error::Parse {
                        row: i,
                        col: tau,
                        msg: format!("mask cell must be 0 or 1, got {other:?}"),
                    })
                }
            };
        }
    }
    Ok(mask)
}

pub fn load_mask_csv(path: impl AsRef<Path>) -> Result<DMatrix<bool>> {
    read_mask(std::fs::File::open(path)?)
}

/// Hides every cell whose mask entry is false.
pub fn apply_mask(win: &ObservationWindow, mask: &DMatrix<bool>) -> Result<ObservationWindow> {
    if mask.shape() != (win.m(), win.t()) {
        return Err(Error::Dimension(format!(
            "mask {:?} vs data {:?}",
            mask.shape(),
            (win.m(), win.t())
        )));
    }
    let combined = win.mask().zip_map(mask, |a, b| a && b);
    ObservationWindow::new(win.values().clone(), combined)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    CsvFile(String),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSchema {
    pub m: usize,
    /// Sampling interval in minutes, when known.
    pub interval_minutes: Option<u32>,
}

/// Replays a matrix one column at a time.
#[derive(Debug, Clone)]
pub struct StreamSource {
    pub origin: Origin,
    pub schema: StreamSchema,
    data: ObservationWindow,
    cursor: usize,
}

impl StreamSource {
    pub fn new(origin: Origin, data: ObservationWindow, interval_minutes: Option<u32>) -> Self {
        StreamSource {
            origin,
            schema: StreamSchema {
                m: data.m(),
                interval_minutes,
            },
            data,
            cursor: 0,
        }
    }

    pub fn from_csv(path: impl AsRef<Path>, missing_token: &str, interval_minutes: Option<u32>) -> Result<Self> {
        let path = path.as_ref();
        let data = load_csv(path, missing_token)?;
        Ok(Self::new(Origin::CsvFile(path.display().to_string()), data, interval_minutes))
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.data.t()
    }

    pub fn is_empty(&self) -> bool {
        self.data.t() == 0
    }

    pub fn remaining(&self) -> usize {
        self.data.t() - self.cursor
    }

    pub fn data(&self) -> &ObservationWindow {
        &self.data
    }

    /// The next `n` columns as one window, advancing the cursor.
    pub fn take_window(&mut self, n: usize) -> Result<ObservationWindow> {
        if n > self.remaining() {
            return Err(Error::Dimension(format!(
                "requested {n} columns, {} remain",
                self.remaining()
            )));
        }
        let win = self.data.columns(self.cursor, self.cursor + n)?;
        self.cursor += n;
        Ok(win)
    }
}

impl Iterator for StreamSource {
    type Item = Vec<Option<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.data.t() {
            return None;
        }
        let col = self.data.column(self.cursor);
        self.cursor += 1;
        Some(col)
    }
}

/// Parameters of a generated low-rank autoregressive stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub m: usize,
    pub t_total: usize,
    pub true_rank: usize,
    /// Spectral radius of the transition matrix.
    pub rho: f64,
    /// Observation-noise precision; `None` means noiseless.
    pub noise_precision: Option<f64>,
    /// Signal-to-noise ratio in dB; overrides `noise_precision` when set.
    pub snr_db: Option<f64>,
    /// Fraction of cells observed.
    pub observe_fraction: f64,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    /// Mean row level added on top of the low-rank part.
    pub level: f64,
    /// Amplitude of a daily sinusoid with a random phase per row.
    pub seasonal_amplitude: f64,
    /// Columns per day; needed when `seasonal_amplitude` is non-zero.
    pub slots_per_day: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            m: 20,
            t_total: 100,
            true_rank: 3,
            rho: 0.95,
            noise_precision: Some(100.0),
            snr_db: None,
            observe_fraction: 1.0,
            outlier_fraction: 0.0,
            outlier_scale: 0.75,
            level: 0.0,
            seasonal_amplitude: 0.0,
            slots_per_day: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.t_total == 0 {
            return fail("m and t_total must be positive".into());
        }
        if self.true_rank == 0 || self.true_rank > self.m {
            return fail(format!("true_rank must lie in 1..={}", self.m));
        }
        if !(self.rho >= 0.0 && self.rho <= 1.0) {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.observe_fraction > 0.0 && self.observe_fraction <= 1.0) {
            return fail(format!(
                "observe_fraction must lie in (0, 1], got {}",
                self.observe_fraction
            ));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 1.0) {
            return fail(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            ));
        }
        if let Some(p) = self.noise_precision {
            if !(p > 0.0) {
                return fail(format!("noise_precision must be positive, got {p}"));
            }
        }
        if self.seasonal_amplitude != 0.0 && self.slots_per_day.unwrap_or(0) == 0 {
            return fail("seasonal_amplitude needs slots_per_day".into());
        }
        Ok(())
    }
}

/// Factors behind a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(with = "serde_mat::matrix")]
    pub loadings: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub transition: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub states: DMatrix<f64>,
    /// Noise precision actually used (`None` when noiseless).
    pub noise_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    /// Complete data, noise included, before masking and corruption.
    #[serde(with = "serde_mat::matrix")]
    pub truth: DMatrix<f64>,
    pub observed: ObservationWindow,
    pub factors: GroundTruth,
    pub outliers: Vec<(usize, usize)>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random orthogonal matrix with a sign-fixed QR so the draw is unique.
fn random_orthogonal(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let qr = gaussian(rng, k, k).qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DVector::from_fn(k, |i, _| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 });
    q * DMatrix::from_diagonal(&signs)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, t, k) = (spec.m, spec.t_total, spec.true_rank);

    let loadings = gaussian(&mut rng, m, k);
    let transition = random_orthogonal(&mut rng, k) * spec.rho;
    let mut states = DMatrix::zeros(k, t);
    states.set_column(0, &gaussian(&mut rng, k, 1).column(0));
    for tau in 1..t {
        let next = &transition * states.column(tau - 1) + gaussian(&mut rng, k, 1);
        states.set_column(tau, &next);
    }
    let mut signal = &loadings * &states;

    if spec.level != 0.0 || spec.seasonal_amplitude != 0.0 {
        let period = spec.slots_per_day.unwrap_or(1) as f64;
        for i in 0..m {
            let level = spec.level * rng.random_range(0.75..1.25);
            let amp = spec.seasonal_amplitude * rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for tau in 0..t {
                let angle = std::f64::consts::TAU * tau as f64 / period + phase;
                signal[(i, tau)] += level + amp * angle.sin();
            }
        }
    }

    let noise_precision = match spec.snr_db {
        Some(db) => {
            let power = signal.norm_squared() / signal.len() as f64;
            Some(10f64.powf(db / 10.0) / power)
        }
        None => spec.noise_precision,
    };
    let truth = match noise_precision {
        Some(p) => &signal + gaussian(&mut rng, m, t) / p.sqrt(),
        None => signal,
    };

    let keep = spec.observe_fraction;
    let mask = DMatrix::from_fn(m, t, |_, _| rng.random::<f64>() < keep);
    let mut observed = ObservationWindow::new(truth.clone(), mask)?;

    let mut outliers = Vec::new();
    if spec.outlier_fraction > 0.0 {
        let inj = inject_outliers(
            &observed,
            spec.outlier_fraction,
            spec.outlier_scale,
            rng.random(),
        )?;
        observed = inj.window;
        outliers = inj.locations;
    }

    Ok(SyntheticData {
        truth,
        observed,
        factors: GroundTruth {
            loadings,
            transition,
            states,
            noise_precision,
        },
        outliers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub window: ObservationWindow,
    /// Corrupted `(row, column)` cells in row-major order.
    pub locations: Vec<(usize, usize)>,
    pub warning: Option<String>,
}

fn column_mean(win: &ObservationWindow, tau: usize) -> f64 {
    let set = win.column_set(tau);
    if set.is_empty() {
        return 0.0;
    }
    set.iter().map(|&i| win.values()[(i, tau)]).sum::<f64>() / set.len() as f64
}

/// Value written into a corrupted cell: `max(y_{τ−1}, y_{τ+1}) + c·μ_τ`.
pub fn outlier_value(prev: f64, next: f64, column_mean: f64, c: f64) -> f64 {
    prev.max(next) + c * column_mean
}

/// Replaces a fraction `p_o` of the observed interior cells with outliers.
///
/// Neighbors come from the uncorrupted window; a missing neighbor is replaced
/// by the mean of its column.
pub fn inject_outliers(win: &ObservationWindow, p_o: f64, c: f64, seed: u64) -> Result<Injection> {
    if !(0.0..1.0).contains(&p_o) {
        return Err(Error::Config(format!("outlier fraction must lie in [0, 1), got {p_o}")));
    }
    if win.t() < 3 {
        return Err(Error::Dimension(format!(
            "outlier injection needs at least 3 columns, got {}",
            win.t()
        )));
    }
    let warning = (!OUTLIER_SCALE_GRID.contains(&c)).then(|| {
        let msg = format!("outlier scale {c} is outside the reference grid {OUTLIER_SCALE_GRID:?}");
        tracing::warn!("{msg}");
        msg
    });

    let mut candidates = Vec::new();
    for i in 0..win.m() {
        for tau in 1..win.t() - 1 {
            if win.is_observed(i, tau) {
                candidates.push((i, tau));
            }
        }
    }
    let n = (p_o * candidates.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut locations: Vec<(usize, usize)> =
        rand::seq::index::sample(&mut rng, candidates.len(), n)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
    locations.sort_unstable();

    let means: Vec<f64> = (0..win.t()).map(|tau| column_mean(win, tau)).collect();
    let neighbor = |i: usize, tau: usize| win.get(i, tau).unwrap_or(means[tau]);
    let mut values = win.values().clone();
    for &(i, tau) in &locations {
        values[(i, tau)] = outlier_value(neighbor(i, tau - 1), neighbor(i, tau + 1), means[tau], c);
    }
    Ok(Injection {
        window: ObservationWindow::new(values, win.mask().clone())?,
        locations,
        warning,
    })
}
