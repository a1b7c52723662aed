//! The cyclic update loop, fixed-lag sliding windows, imputation and
//! forecasting.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elbo::{self, ElboInputs};
use crate::error::{Error, Result};
use crate::model::{
    ModelConfig, ObservationWindow, OutlierCell, OutlierPosterior, PrecisionState,
    RowLoadingPosterior, StateTrajectoryPosterior, TransitionPosterior,
};
use crate::serde_mat;
use crate::solver;
use crate::updates;

/// Which factor group the next iteration updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// States, then `υ̂`, then the transition posterior.
    States,
    /// Loadings, then `γ̂`.
    Loadings,
    /// Outlier field (robust model only).
    Outliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub cfg: ModelConfig,
    pub window: ObservationWindow,
    pub loadings: RowLoadingPosterior,
    pub states: StateTrajectoryPosterior,
    pub transition: TransitionPosterior,
    pub precisions: PrecisionState,
    pub outliers: Option<OutlierPosterior>,
    #[serde(with = "serde_mat::matrix")]
    pub last_y_hat: DMatrix<f64>,
    pub cycle_count: usize,
    pub converged: bool,
    pub elbo_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellSource {
    Observed,
    Imputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub values: DMatrix<f64>,
    pub sources: DMatrix<CellSource>,
}

fn point_estimate(loadings: &RowLoadingPosterior, states: &StateTrajectoryPosterior) -> DMatrix<f64> {
    loadings.mean_matrix() * states.mean_matrix()
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let denom = old.norm();
    let diff = (new - old).norm();
    if denom > 0.0 {
        diff / denom
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn cold_states(r: usize, t: usize) -> StateTrajectoryPosterior {
    StateTrajectoryPosterior {
        means: vec![DVector::zeros(r); t],
        diag_blocks: vec![DMatrix::identity(r, r); t],
        super_blocks: vec![DMatrix::zeros(r, r); t.saturating_sub(1)],
        log_det_cov: 0.0,
    }
}

fn initial_outliers(win: &ObservationWindow, cfg: &ModelConfig) -> Option<OutlierPosterior> {
    if !cfg.robust {
        None
    } else if cfg.freeze_outliers {
        Some(OutlierPosterior::filled(win, OutlierCell { mu: 0.0, xi: 0.0 }))
    } else {
        Some(OutlierPosterior::initial(win))
    }
}

impl FilterState {
    /// Cold initialization: seeded loadings scaled by `1/√r`, zero states and
    /// transition, unit precisions.
    pub fn initialize(win: &ObservationWindow, cfg: &ModelConfig) -> Result<Self> {
        let cfg = cfg.resolve(win.m())?;
        let r = cfg.r();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (r as f64).sqrt();
        let loadings = RowLoadingPosterior {
            means: (0..win.m())
                .map(|_| {
                    DVector::from_fn(r, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                })
                .collect(),
            covs: vec![DMatrix::identity(r, r); win.m()],
        };
        let precisions = PrecisionState::ones(r);
        let states = cold_states(r, win.t());
        let transition = TransitionPosterior::prior(&precisions.upsilon);
        let last_y_hat = point_estimate(&loadings, &states);
        Ok(FilterState {
            outliers: initial_outliers(win, &cfg),
            cfg,
            window: win.clone(),
            loadings,
            states,
            transition,
            precisions,
            last_y_hat,
            cycle_count: 0,
            converged: false,
            elbo_trace: Vec::new(),
        })
    }

    /// Initialization taking loadings, transition and precisions from `warm`,
    /// and states too when the spans match and `warm_states` is set.
    fn warm_initialize(win: &ObservationWindow, cfg: &ModelConfig, warm: &FilterState) -> Result<Self> {
        let cfg = cfg.resolve(win.m())?;
        let r = cfg.r();
        if warm.loadings.m() != win.m() || warm.loadings.r() != r {
            return Err(Error::Dimension(format!(
                "warm start has {}x{} loadings, window needs {}x{r}",
                warm.loadings.m(),
                warm.loadings.r(),
                win.m()
            )));
        }
        let states = if cfg.warm_states && warm.states.t() == win.t() {
            warm.states.clone()
        } else {
            cold_states(r, win.t())
        };
        let outliers = match (&warm.outliers, cfg.robust && !cfg.freeze_outliers) {
            (Some(prev), true) => {
                let mut o = OutlierPosterior::default();
                for tau in 0..win.t() {
                    for &i in win.column_set(tau) {
                        let cell = prev.cells.get(&(i, tau)).copied().unwrap_or(OutlierCell::INITIAL);
                        o.cells.insert((i, tau), cell);
                    }
                }
                Some(o)
            }
            _ => initial_outliers(win, &cfg),
        };
        let last_y_hat = point_estimate(&warm.loadings, &states);
        Ok(FilterState {
            cfg,
            window: win.clone(),
            loadings: warm.loadings.clone(),
            states,
            transition: warm.transition.clone(),
            precisions: warm.precisions.clone(),
            outliers,
            last_y_hat,
            cycle_count: 0,
            converged: false,
            elbo_trace: Vec::new(),
        })
    }

    pub fn m(&self) -> usize {
        self.window.m()
    }

    pub fn t(&self) -> usize {
        self.window.t()
    }

    pub fn j_hat(&self) -> DMatrix<f64> {
        self.transition.j_hat()
    }

    fn active_outliers(&self) -> Option<&OutlierPosterior> {
        self.outliers.as_ref()
    }

    fn tracks_elbo(&self) -> bool {
        self.cfg.track_elbo && !self.cfg.robust
    }

    /// Evidence lower bound of the current posteriors (non-robust model).
    pub fn elbo(&self) -> Result<f64> {
        compute_elbo(self, &self.window)
    }

    fn step(&mut self, phase: Phase) -> Result<Phase> {
        let next = match phase {
            Phase::States => {
                let sys = solver::assemble(
                    &self.window,
                    &self.loadings,
                    &self.transition,
                    self.precisions.beta,
                    self.active_outliers(),
                    &self.cfg,
                )?;
                self.states = solver::forward_backward(&sys)?;
                self.precisions.upsilon = updates::update_upsilon(&self.transition, &self.cfg);
                self.transition = updates::update_transition(&self.states, &self.precisions.upsilon)?;
                Phase::Loadings
            }
            Phase::Loadings => {
                self.loadings = updates::update_loadings(
                    &self.window,
                    &self.states,
                    self.precisions.beta,
                    &self.precisions.gamma,
                    self.active_outliers(),
                )?;
                self.precisions.gamma = updates::update_gamma(&self.loadings, &self.cfg);
                if self.cfg.robust && !self.cfg.freeze_outliers {
                    Phase::Outliers
                } else {
                    Phase::States
                }
            }
            Phase::Outliers => {
                let prev = self.outliers.take().unwrap_or_default();
                self.outliers = Some(updates::update_outliers(
                    &self.window,
                    &self.loadings,
                    &self.states,
                    self.precisions.beta,
                    &prev,
                    &self.cfg,
                ));
                Phase::States
            }
        };
        self.precisions.beta = updates::update_noise_precision(
            &self.window,
            &self.loadings,
            &self.states,
            self.active_outliers(),
            &self.cfg,
        )?;
        Ok(next)
    }

    /// Runs update cycles until the relative change of `Ŷ` drops to `tol` or
    /// `max_iters` is reached. Outlier iterations leave `Ŷ` untouched and are
    /// not tested.
    fn run(&mut self) -> Result<()> {
        let mut phase = Phase::States;
        while self.cycle_count < self.cfg.max_iters {
            let y_old = std::mem::replace(&mut self.last_y_hat, DMatrix::zeros(0, 0));
            let updated_y_hat = phase != Phase::Outliers;
            phase = self.step(phase)?;
            self.cycle_count += 1;
            self.last_y_hat = point_estimate(&self.loadings, &self.states);
            if !self.precisions.beta.is_finite() || self.last_y_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    cycle: self.cycle_count,
                });
            }
            if self.tracks_elbo() {
                let bound = self.elbo()?;
                self.elbo_trace.push(bound);
            }
            let y_conv = relative_change(&self.last_y_hat, &y_old);
            tracing::trace!(cycle = self.cycle_count, y_conv, beta = self.precisions.beta);
            if updated_y_hat && y_conv <= self.cfg.tol {
                self.converged = true;
                break;
            }
        }
        Ok(())
    }

    /// Model estimate of the column `Δ` steps behind the newest one.
    pub fn lag_estimate(&self) -> DVector<f64> {
        let tau = self.t().saturating_sub(1 + self.cfg.delta);
        self.last_y_hat.column(tau).into_owned()
    }

    /// Forecasts `Ĵ^k μ^B_t` mapped through the loading means, for
    /// `k = 1..=horizon`.
    pub fn forecast(&self, horizon: usize) -> Result<DMatrix<f64>> {
        forecast(self, horizon)
    }
}

/// Fits one window, optionally warm-started from a previous state.
pub fn fit_window(
    win: &ObservationWindow,
    cfg: &ModelConfig,
    warm: Option<&FilterState>,
) -> Result<FilterState> {
    if win.omega() == 0 {
        return Err(Error::EmptyWindow);
    }
    let mut state = match warm {
        Some(w) => FilterState::warm_initialize(win, cfg, w)?,
        None => FilterState::initialize(win, cfg)?,
    };
    state.run()?;
    tracing::debug!(
        cycles = state.cycle_count,
        converged = state.converged,
        beta = state.precisions.beta,
        "window fitted"
    );
    Ok(state)
}

/// Every cell filled with `(μ^B_τ)ᵀ μ^A_i`, tagged by whether it was observed.
pub fn impute(state: &FilterState) -> Imputation {
    let values = point_estimate(&state.loadings, &state.states);
    let sources = state.window.mask().map(|observed| {
        if observed {
            CellSource::Observed
        } else {
            CellSource::Imputed
        }
    });
    Imputation { values, sources }
}

pub fn forecast(state: &FilterState, horizon: usize) -> Result<DMatrix<f64>> {
    if horizon == 0 || horizon > state.cfg.horizon {
        return Err(Error::Config(format!(
            "forecast horizon {horizon} outside 1..={}",
            state.cfg.horizon
        )));
    }
    let t = state.t();
    if t == 0 {
        return Err(Error::EmptyWindow);
    }
    let j_hat = state.j_hat();
    let a = state.loadings.mean_matrix();
    let mut b = state.states.means[t - 1].clone();
    let mut out = DMatrix::zeros(state.m(), horizon);
    for k in 0..horizon {
        b = &j_hat * b;
        out.set_column(k, &(&a * &b));
    }
    Ok(out)
}

/// Moves the window one column forward and refits from the previous posteriors.
///
/// Windows shorter than `h + 1` grow instead of dropping their oldest column.
pub fn slide(state: &FilterState, new_column: &[Option<f64>]) -> Result<FilterState> {
    if new_column.len() != state.m() {
        return Err(Error::Dimension(format!(
            "new column has {} entries, window has {} rows",
            new_column.len(),
            state.m()
        )));
    }
    let full = state.t() >= state.cfg.h + 1;
    let window = if full {
        state.window.shifted(new_column)?
    } else {
        state.window.appended(new_column)?
    };
    let warm = shifted_warm_start(state, &window, full);
    fit_window(&window, &state.cfg, Some(&warm))
}

/// Previous posteriors re-indexed onto the next window. The new state is
/// predicted through `Ĵ`.
fn shifted_warm_start(state: &FilterState, window: &ObservationWindow, dropped: bool) -> FilterState {
    let r = state.cfg.r();
    let skip = usize::from(dropped);
    let prev = &state.states;
    let mut states = StateTrajectoryPosterior {
        means: prev.means[skip..].to_vec(),
        diag_blocks: prev.diag_blocks[skip..].to_vec(),
        super_blocks: prev.super_blocks[skip.min(prev.super_blocks.len())..].to_vec(),
        log_det_cov: prev.log_det_cov,
    };
    let j_hat = state.j_hat();
    let last = states
        .means
        .last()
        .map(|b| &j_hat * b)
        .unwrap_or_else(|| DVector::zeros(r));
    states.means.push(last);
    states.diag_blocks.push(DMatrix::identity(r, r));
    if states.means.len() > 1 {
        states.super_blocks.push(DMatrix::zeros(r, r));
    }

    let outliers = state.outliers.as_ref().map(|o| {
        let mut cells = std::collections::BTreeMap::new();
        for (&(i, tau), &cell) in &o.cells {
            if tau >= skip {
                cells.insert((i, tau - skip), cell);
            }
        }
        OutlierPosterior { cells }
    });

    FilterState {
        cfg: state.cfg.clone(),
        window: window.clone(),
        loadings: state.loadings.clone(),
        states,
        transition: state.transition.clone(),
        precisions: state.precisions.clone(),
        outliers,
        last_y_hat: state.last_y_hat.clone(),
        cycle_count: 0,
        converged: false,
        elbo_trace: Vec::new(),
    }
}

/// Evidence lower bound of `state`'s posteriors on `win` (non-robust model).
pub fn compute_elbo(state: &FilterState, win: &ObservationWindow) -> Result<f64> {
    if state.cfg.robust && !state.cfg.freeze_outliers {
        return Err(Error::Config("the bound is only defined for the non-robust model".into()));
    }
    elbo::elbo(&ElboInputs {
        win,
        loadings: &state.loadings,
        states: &state.states,
        transition: &state.transition,
        precisions: &state.precisions,
        cfg: &state.cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn rank_one(m: usize, t: usize) -> ObservationWindow {
        let a = DVector::from_fn(m, |i, _| 1.0 + 0.3 * i as f64);
        let b = DVector::from_fn(t, |j, _| 2.0 + (0.4 * j as f64).sin());
        ObservationWindow::dense(&a * b.transpose()).unwrap()
    }

    fn cfg(h: usize) -> ModelConfig {
        ModelConfig {
            h,
            max_iters: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let win = rank_one(4, 6);
        let c = ModelConfig {
            max_iters: 0,
            ..cfg(5)
        };
        let state = fit_window(&win, &c, None).unwrap();
        let init = FilterState::initialize(&win, &c).unwrap();
        assert_eq!(state, init);
        assert!(!state.converged);
    }

    #[test]
    fn empty_window_rejected() {
        let win = ObservationWindow::from_row_major(2, 2, &[None; 4]).unwrap();
        assert!(matches!(fit_window(&win, &cfg(1), None), Err(Error::EmptyWindow)));
    }

    #[test]
    fn rank_one_fit_reproduces_data() {
        let win = rank_one(8, 12);
        let state = fit_window(&win, &cfg(11).with_rank(3), None).unwrap();
        assert!(state.converged);
        let rel = (&state.last_y_hat - win.values()).norm() / win.values().norm();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn y_hat_is_the_mean_product() {
        let win = rank_one(5, 7);
        let state = fit_window(&win, &cfg(6).with_rank(2), None).unwrap();
        let product = state.loadings.mean_matrix() * state.states.mean_matrix();
        assert_eq!(state.last_y_hat, product);
        assert!(state.cycle_count <= state.cfg.max_iters);
    }

    #[test]
    fn deterministic_under_seed() {
        let win = rank_one(6, 9);
        let c = cfg(8).with_rank(3);
        let a = fit_window(&win, &c, None).unwrap();
        let b = fit_window(&win, &c, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn imputation_examples() {
        let win = ObservationWindow::from_row_major(1, 1, &[None]).unwrap();
        let mut state = FilterState::initialize(&win, &ModelConfig { h: 0, ..Default::default() }).unwrap();
        state.loadings.means = vec![dvector![2.0]];
        state.states.means = vec![dvector![3.0]];
        let imp = impute(&state);
        assert_eq!(imp.values[(0, 0)], 6.0);
        assert_eq!(imp.sources[(0, 0)], CellSource::Imputed);

        state.loadings.means = vec![dvector![0.0]];
        assert_eq!(impute(&state).values, DMatrix::zeros(1, 1));
    }

    fn forecast_state(j: f64, b: f64, a: f64) -> FilterState {
        let win = ObservationWindow::from_row_major(1, 1, &[Some(1.0)]).unwrap();
        let mut state = FilterState::initialize(&win, &ModelConfig { h: 0, ..Default::default() }).unwrap();
        state.loadings.means = vec![dvector![a]];
        state.states.means = vec![dvector![b]];
        state.transition.row_means = vec![dvector![j]];
        state
    }

    #[test]
    fn forecast_examples() {
        let s = forecast_state(2.0, 1.0, 3.0);
        assert_eq!(forecast(&s, 2).unwrap()[(0, 1)], 12.0);

        let s = forecast_state(0.0, 1.0, 3.0);
        assert_eq!(forecast(&s, 3).unwrap(), DMatrix::zeros(1, 3));

        let s = forecast_state(1.0, 1.5, 3.0);
        let f = forecast(&s, 5).unwrap();
        let last = impute(&s).values[(0, 0)];
        assert!(f.iter().all(|&v| v == last));

        assert!(forecast(&s, 0).is_err());
        assert!(forecast(&s, 6).is_err());
    }

    #[test]
    fn slide_keeps_window_width() {
        let win = rank_one(4, 6);
        let state = fit_window(&win, &cfg(5).with_rank(2), None).unwrap();
        let next = slide(&state, &[Some(1.0), None, Some(2.0), Some(3.0)]).unwrap();
        assert_eq!(next.t(), 6);
        assert!(slide(&state, &[Some(1.0)]).is_err());
    }
}
