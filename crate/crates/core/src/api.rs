//! Request and response bodies of the HTTP service, shared by server and client.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{CellSource, FilterState, Imputation};
use crate::model::{ModelConfig, ObservationWindow};
use crate::serde_mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Short description of a fitted window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub m: usize,
    pub t: usize,
    pub rank: usize,
    pub cycles: usize,
    pub converged: bool,
    pub noise_precision: f64,
    /// Loading-column energies `‖μ^A_{·k}‖²`, largest first.
    pub column_energies: Vec<f64>,
    pub elbo: Option<f64>,
}

impl From<&FilterState> for FitSummary {
    fn from(s: &FilterState) -> Self {
        let mut column_energies: Vec<f64> = s.loadings.column_energies().iter().copied().collect();
        column_energies.sort_by(|a, b| b.total_cmp(a));
        FitSummary {
            m: s.m(),
            t: s.t(),
            rank: s.cfg.r(),
            cycles: s.cycle_count,
            converged: s.converged,
            noise_precision: s.precisions.beta,
            column_energies,
            elbo: s.elbo_trace.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub window: ObservationWindow,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub warm: Option<FilterState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResponse {
    pub summary: FitSummary,
    pub state: FilterState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeRequest {
    pub window: ObservationWindow,
    #[serde(default)]
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeResponse {
    pub summary: FitSummary,
    /// Every cell of the window, observed cells included, as the model sees them.
    #[serde(with = "serde_mat::matrix")]
    pub values: DMatrix<f64>,
    /// Row-major tags matching `values`.
    pub sources: Vec<CellSource>,
}

impl ImputeResponse {
    pub fn new(state: &FilterState, imp: Imputation) -> Self {
        let sources = (0..imp.sources.nrows())
            .flat_map(|i| imp.sources.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        ImputeResponse {
            summary: FitSummary::from(state),
            values: imp.values,
            sources,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub window: ObservationWindow,
    #[serde(default)]
    pub model: ModelConfig,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub summary: FitSummary,
    /// Column `k − 1` holds the `k`-step forecast.
    #[serde(with = "serde_mat::matrix")]
    pub forecast: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectRequest {
    pub window: ObservationWindow,
    pub fraction: f64,
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateStream {
    /// Initial window; later columns arrive through the stream.
    pub window: ObservationWindow,
    #[serde(default)]
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub id: String,
    /// Columns consumed so far, the initial window included.
    pub columns_seen: usize,
    pub summary: FitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushColumns {
    /// Each column has one entry per row, `null` where missing.
    pub columns: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushResponse {
    pub info: StreamInfo,
    /// Lag-Δ estimate after each pushed column.
    #[serde(with = "serde_mat::vectors")]
    pub estimates: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidRequest,
    Config,
    Dimension,
    Numerical,
    NotFound,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}
