//! Posterior state types, configuration, and second moments shared by every update.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;

/// A partially observed `m × t` block of measurements.
///
/// Unobserved cells always hold `0.0` in `values` so that two windows with the
/// same observations compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WindowPayload", into = "WindowPayload")]
pub struct ObservationWindow {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    col_sets: Vec<Vec<usize>>,
    row_sets: Vec<Vec<usize>>,
    omega: usize,
}

/// Wire form of a window: row-major cells, `null` where missing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowPayload {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Option<f64>>,
}

impl TryFrom<WindowPayload> for ObservationWindow {
    type Error = Error;

    fn try_from(p: WindowPayload) -> Result<Self> {
        ObservationWindow::from_row_major(p.rows, p.cols, &p.data)
    }
}

impl From<ObservationWindow> for WindowPayload {
    fn from(w: ObservationWindow) -> Self {
        let mut data = Vec::with_capacity(w.values.len());
        for i in 0..w.m() {
            for tau in 0..w.t() {
                data.push(w.get(i, tau));
            }
        }
        WindowPayload {
            rows: w.m(),
            cols: w.t(),
            data,
        }
    }
}

impl ObservationWindow {
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Dimension(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        let (m, t) = values.shape();
        let mut values = values;
        let mut col_sets = vec![Vec::new(); t];
        let mut row_sets = vec![Vec::new(); m];
        for tau in 0..t {
            for i in 0..m {
                if mask[(i, tau)] {
                    let y = values[(i, tau)];
                    if !y.is_finite() {
                        return Err(Error::Config(format!(
                            "observed cell ({i}, {tau}) is not finite"
                        )));
                    }
                    col_sets[tau].push(i);
                    row_sets[i].push(tau);
                } else {
                    values[(i, tau)] = 0.0;
                }
            }
        }
        let omega = col_sets.iter().map(Vec::len).sum();
        Ok(ObservationWindow {
            values,
            mask,
            col_sets,
            row_sets,
            omega,
        })
    }

    /// Fully observed window.
    pub fn dense(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask)
    }

    pub fn from_row_major(rows: usize, cols: usize, cells: &[Option<f64>]) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} cells for a {rows}x{cols} window",
                cells.len()
            )));
        }
        let values = DMatrix::from_fn(rows, cols, |i, j| cells[i * cols + j].unwrap_or(0.0));
        let mask = DMatrix::from_fn(rows, cols, |i, j| cells[i * cols + j].is_some());
        Self::new(values, mask)
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    /// Total number of observed cells.
    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, tau: usize) -> bool {
        self.mask[(i, tau)]
    }

    pub fn get(&self, i: usize, tau: usize) -> Option<f64> {
        self.mask[(i, tau)].then(|| self.values[(i, tau)])
    }

    /// Rows observed in column `tau`.
    pub fn column_set(&self, tau: usize) -> &[usize] {
        &self.col_sets[tau]
    }

    /// Columns in which row `i` is observed.
    pub fn row_set(&self, i: usize) -> &[usize] {
        &self.row_sets[i]
    }

    pub fn column(&self, tau: usize) -> Vec<Option<f64>> {
        (0..self.m()).map(|i| self.get(i, tau)).collect()
    }

    /// Sub-window of columns `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.t() {
            return Err(Error::Dimension(format!(
                "column range {start}..{end} outside window of width {}",
                self.t()
            )));
        }
        let n = end - start;
        Self::new(
            self.values.columns(start, n).into_owned(),
            self.mask.columns(start, n).into_owned(),
        )
    }

    /// Drops the oldest column and appends `column` at the end.
    pub fn shifted(&self, column: &[Option<f64>]) -> Result<Self> {
        if column.len() != self.m() {
            return Err(Error::Dimension(format!(
                "new column has {} entries, window has {} rows",
                column.len(),
                self.m()
            )));
        }
        let (m, t) = (self.m(), self.t());
        let values = DMatrix::from_fn(m, t, |i, j| {
            if j + 1 < t {
                self.values[(i, j + 1)]
            } else {
                column[i].unwrap_or(0.0)
            }
        });
        let mask = DMatrix::from_fn(m, t, |i, j| {
            if j + 1 < t {
                self.mask[(i, j + 1)]
            } else {
                column[i].is_some()
            }
        });
        Self::new(values, mask)
    }

    /// Appends `column` without dropping anything.
    pub fn appended(&self, column: &[Option<f64>]) -> Result<Self> {
        if column.len() != self.m() {
            return Err(Error::Dimension(format!(
                "new column has {} entries, window has {} rows",
                column.len(),
                self.m()
            )));
        }
        let (m, t) = (self.m(), self.t());
        let values = DMatrix::from_fn(m, t + 1, |i, j| {
            if j < t {
                self.values[(i, j)]
            } else {
                column[i].unwrap_or(0.0)
            }
        });
        let mask = DMatrix::from_fn(m, t + 1, |i, j| {
            if j < t {
                self.mask[(i, j)]
            } else {
                column[i].is_some()
            }
        });
        Self::new(values, mask)
    }
}

/// `μ_a μ_bᵀ + Ξ`.
pub fn cross_moment(
    mean_a: &DVector<f64>,
    mean_b: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if cov.nrows() != mean_a.len() || cov.ncols() != mean_b.len() {
        return Err(Error::Dimension(format!(
            "second moment of {}-vector and {}-vector with {}x{} covariance",
            mean_a.len(),
            mean_b.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    Ok(mean_a * mean_b.transpose() + cov)
}

/// `μ μᵀ + Ξ`.
pub fn second_moment(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cross_moment(mean, mean, cov)
}

fn outer_plus(mean: &DVector<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    mean * mean.transpose() + cov
}

/// Row-wise Gaussian posterior of the loading matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowLoadingPosterior {
    #[serde(with = "serde_mat::vectors")]
    pub means: Vec<DVector<f64>>,
    #[serde(with = "serde_mat::matrices")]
    pub covs: Vec<DMatrix<f64>>,
}

impl RowLoadingPosterior {
    pub fn m(&self) -> usize {
        self.means.len()
    }

    pub fn r(&self) -> usize {
        self.means.first().map_or(0, |v| v.len())
    }

    pub fn second_moment(&self, i: usize) -> DMatrix<f64> {
        outer_plus(&self.means[i], &self.covs[i])
    }

    /// Loading means stacked as an `m × r` matrix.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m(), self.r(), |i, k| self.means[i][k])
    }

    /// `Σ_i [μ^A_i]_k²` per latent column `k`.
    pub fn column_energies(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.r());
        for mu in &self.means {
            e += mu.component_mul(mu);
        }
        e
    }
}

/// Posterior of the state trajectory, keeping only the diagonal and
/// super-diagonal covariance blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectoryPosterior {
    #[serde(with = "serde_mat::vectors")]
    pub means: Vec<DVector<f64>>,
    /// `Ξ_{τ,τ}`
    #[serde(with = "serde_mat::matrices")]
    pub diag_blocks: Vec<DMatrix<f64>>,
    /// `Ξ_{τ,τ+1}` for `τ < t`.
    #[serde(with = "serde_mat::matrices")]
    pub super_blocks: Vec<DMatrix<f64>>,
    /// `log det` of the full `rt × rt` covariance.
    pub log_det_cov: f64,
}

impl StateTrajectoryPosterior {
    pub fn t(&self) -> usize {
        self.means.len()
    }

    pub fn r(&self) -> usize {
        self.means.first().map_or(0, |v| v.len())
    }

    /// `Σ^B_{τ,τ}`
    pub fn second_moment(&self, tau: usize) -> DMatrix<f64> {
        outer_plus(&self.means[tau], &self.diag_blocks[tau])
    }

    /// `Σ^B_{τ,τ+1} = μ_τ μ_{τ+1}ᵀ + Ξ_{τ,τ+1}`.
    pub fn cross_second_moment(&self, tau: usize) -> DMatrix<f64> {
        &self.means[tau] * self.means[tau + 1].transpose() + &self.super_blocks[tau]
    }

    /// State means stacked as an `r × t` matrix.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.r(), self.t(), |k, tau| self.means[tau][k])
    }
}

/// Posterior of the state-transition matrix. Rows are i.i.d. and share one
/// covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPosterior {
    #[serde(with = "serde_mat::vectors")]
    pub row_means: Vec<DVector<f64>>,
    #[serde(with = "serde_mat::matrix")]
    pub shared_cov: DMatrix<f64>,
}

impl TransitionPosterior {
    pub fn r(&self) -> usize {
        self.row_means.len()
    }

    pub fn prior(upsilon: &DVector<f64>) -> Self {
        let r = upsilon.len();
        TransitionPosterior {
            row_means: vec![DVector::zeros(r); r],
            shared_cov: DMatrix::from_diagonal(&upsilon.map(|u| 1.0 / u)),
        }
    }

    pub fn j_hat(&self) -> DMatrix<f64> {
        assemble_j_hat(self)
    }

    /// `Σ_i Σ^J_i = E[JᵀJ] = ĴᵀĴ + r Ξ^J`.
    pub fn expected_gram(&self) -> DMatrix<f64> {
        let r = self.r();
        let mut g = &self.shared_cov * r as f64;
        for mu in &self.row_means {
            g += mu * mu.transpose();
        }
        g
    }
}

/// `Ĵ` with `(μ^J_i)ᵀ` as its `i`-th row.
pub fn assemble_j_hat(tp: &TransitionPosterior) -> DMatrix<f64> {
    let r = tp.r();
    let c = tp.row_means.first().map_or(0, |v| v.len());
    DMatrix::from_fn(r, c, |i, k| tp.row_means[i][k])
}

/// Posterior means of the noise precision and the ARD precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionState {
    pub beta: f64,
    #[serde(with = "serde_mat::vector")]
    pub gamma: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub upsilon: DVector<f64>,
}

impl PrecisionState {
    pub fn ones(r: usize) -> Self {
        PrecisionState {
            beta: 1.0,
            gamma: DVector::from_element(r, 1.0),
            upsilon: DVector::from_element(r, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierCell {
    pub mu: f64,
    pub xi: f64,
}

impl OutlierCell {
    pub const INITIAL: OutlierCell = OutlierCell { mu: 0.0, xi: 1.0 };

    /// Implied precision `E[α] = 1 / E[e²]`.
    pub fn alpha(&self) -> f64 {
        1.0 / (self.mu * self.mu + self.xi)
    }
}

/// Sparse outlier field over observed cells, keyed by `(row, column)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<OutlierEntry>", into = "Vec<OutlierEntry>")]
pub struct OutlierPosterior {
    pub cells: BTreeMap<(usize, usize), OutlierCell>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutlierEntry {
    pub row: usize,
    pub col: usize,
    pub mu: f64,
    pub xi: f64,
}

impl From<Vec<OutlierEntry>> for OutlierPosterior {
    fn from(v: Vec<OutlierEntry>) -> Self {
        OutlierPosterior {
            cells: v
                .into_iter()
                .map(|e| ((e.row, e.col), OutlierCell { mu: e.mu, xi: e.xi }))
                .collect(),
        }
    }
}

impl From<OutlierPosterior> for Vec<OutlierEntry> {
    fn from(p: OutlierPosterior) -> Self {
        p.cells
            .into_iter()
            .map(|((row, col), c)| OutlierEntry {
                row,
                col,
                mu: c.mu,
                xi: c.xi,
            })
            .collect()
    }
}

impl OutlierPosterior {
    /// One cell per observed entry, all at `cell`.
    pub fn filled(win: &ObservationWindow, cell: OutlierCell) -> Self {
        let mut cells = BTreeMap::new();
        for tau in 0..win.t() {
            for &i in win.column_set(tau) {
                cells.insert((i, tau), cell);
            }
        }
        OutlierPosterior { cells }
    }

    pub fn initial(win: &ObservationWindow) -> Self {
        Self::filled(win, OutlierCell::INITIAL)
    }

    /// `(μ_e, Ξ_e)` at a cell, zero when absent.
    pub fn get(&self, i: usize, tau: usize) -> OutlierCell {
        self.cells
            .get(&(i, tau))
            .copied()
            .unwrap_or(OutlierCell { mu: 0.0, xi: 0.0 })
    }

    pub fn mean(&self, i: usize, tau: usize) -> f64 {
        self.cells.get(&(i, tau)).map_or(0.0, |c| c.mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Full variational Bayes: precisions are Gamma posterior means.
    #[default]
    Vb,
    /// Precisions are MAP point estimates (`n − 2` numerators).
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierVariant {
    /// `α̂ = 1/(μ_e² + Ξ_e)`, then `Ξ_e = 1/(β̂ + α̂)`.
    #[default]
    Derived,
    /// `Ξ_e = 1/(β̂ + μ_e² + Ξ_e)`, adding the second moment to the precision.
    PaperLiteral,
}

pub const DEFAULT_MAX_RANK: usize = 16;

/// Model and run configuration.
///
/// `rank`, `prior_mean` and `prior_cov` may be left unset; [`ModelConfig::resolve`]
/// fills them for a given number of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub rank: Option<usize>,
    /// Number of past columns kept; windows hold `h + 1` columns.
    pub h: usize,
    /// Fixed lag Δ at which estimates are reported.
    pub delta: usize,
    /// Longest forecast horizon.
    pub horizon: usize,
    #[serde(with = "opt_vector")]
    pub prior_mean: Option<DVector<f64>>,
    #[serde(with = "opt_matrix")]
    pub prior_cov: Option<DMatrix<f64>>,
    pub tol: f64,
    pub max_iters: usize,
    pub variant: Variant,
    pub robust: bool,
    pub outlier_variant: OutlierVariant,
    /// Keep outliers at zero even when `robust` is set.
    pub freeze_outliers: bool,
    /// Warm-start state means across windows, not only loadings and transition.
    pub warm_states: bool,
    /// Record the bound after every iteration (non-robust model only).
    pub track_elbo: bool,
    pub prec_min: f64,
    pub prec_max: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rank: None,
            h: 30,
            delta: 0,
            horizon: 5,
            prior_mean: None,
            prior_cov: None,
            tol: 1e-5,
            max_iters: 500,
            variant: Variant::Vb,
            robust: false,
            outlier_variant: OutlierVariant::Derived,
            freeze_outliers: false,
            warm_states: true,
            track_elbo: true,
            prec_min: 1e-12,
            prec_max: 1e12,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_rank(mut self, r: usize) -> Self {
        self.rank = Some(r);
        self
    }

    pub fn r(&self) -> usize {
        self.rank.expect("unresolved model config")
    }

    pub fn mu1(&self) -> DVector<f64> {
        self.prior_mean
            .clone()
            .unwrap_or_else(|| DVector::zeros(self.r()))
    }

    pub fn lambda1(&self) -> DMatrix<f64> {
        self.prior_cov
            .clone()
            .unwrap_or_else(|| DMatrix::identity(self.r(), self.r()))
    }

    pub fn clamp(&self, p: f64) -> f64 {
        if p.is_nan() {
            self.prec_max
        } else {
            p.clamp(self.prec_min, self.prec_max)
        }
    }

    /// Fills the rank default `min(m, h + 1, 16)` and validates everything
    /// against a window with `m` rows.
    pub fn resolve(&self, m: usize) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        let cap = m.min(self.h + 1);
        let r = self.rank.unwrap_or_else(|| cap.min(DEFAULT_MAX_RANK));
        if r == 0 || r > cap {
            return Err(Error::Config(format!(
                "rank {r} must lie in 1..={cap} (min(m, h+1))"
            )));
        }
        cfg.rank = Some(r);
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.h > 0 && self.delta >= self.h {
            return Err(Error::Config(format!(
                "lag {} must be below the window length {}",
                self.delta, self.h
            )));
        }
        if !(self.prec_min > 0.0 && self.prec_min < self.prec_max) {
            return Err(Error::Config("need 0 < prec_min < prec_max".into()));
        }
        if let Some(mu) = &self.prior_mean {
            if mu.len() != r {
                return Err(Error::Config(format!(
                    "prior mean has length {}, rank is {r}",
                    mu.len()
                )));
            }
        }
        if let Some(l) = &self.prior_cov {
            if l.shape() != (r, r) {
                return Err(Error::Config(format!(
                    "prior covariance is {:?}, rank is {r}",
                    l.shape()
                )));
            }
            if linalg::max_asymmetry(l) > 1e-10 * l.amax().max(1.0) || linalg::cholesky(l).is_none()
            {
                return Err(Error::Config("prior covariance must be SPD".into()));
            }
        }
        Ok(cfg)
    }
}

mod opt_vector {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}

mod opt_matrix {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};
    use serde_mat::RowMajor;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(RowMajor::from).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<RowMajor>::deserialize(d)?
            .map(|rm| rm.into_matrix().map_err(D::Error::custom))
            .transpose()
    }
}
