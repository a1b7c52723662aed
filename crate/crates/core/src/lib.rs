//! Variational Bayesian subspace filtering.
//!
//! Streams of partially observed multivariate measurements are modelled as a
//! low-rank product `Y ≈ A B` whose latent columns follow a first-order
//! autoregression `b_τ = J b_{τ−1} + noise`. Mean-field variational updates
//! with ARD priors learn `A`, `B`, `J` and all precisions from the data, so
//! neither the rank nor the noise level needs tuning. A robust variant adds a
//! sparse outlier field over the observed cells.

pub mod api;
pub mod data;
pub mod elbo;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod serde_mat;
pub mod snapshot;
pub mod solver;
pub mod updates;

pub use engine::{fit_window, forecast, impute, slide, CellSource, FilterState, Imputation};
pub use error::{Error, Result};
pub use model::{ModelConfig, ObservationWindow, OutlierVariant, Variant};
