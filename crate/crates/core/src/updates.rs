//! Closed-form mean-field updates for every factor of the model.
//!
//! All functions are pure: they read the current posteriors and return the
//! new value of one factor.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    ModelConfig, ObservationWindow, OutlierCell, OutlierPosterior, OutlierVariant,
    RowLoadingPosterior, StateTrajectoryPosterior, TransitionPosterior, Variant,
};

/// Gamma-posterior numerator for `n` Gaussian terms: the mean under VB, the
/// mode under EM.
pub fn precision_numerator(n: usize, variant: Variant) -> f64 {
    match variant {
        Variant::Vb => n as f64,
        Variant::Em => n as f64 - 2.0,
    }
}

fn precision_from(numerator: f64, denominator: f64, cfg: &ModelConfig) -> f64 {
    if !(denominator > 0.0) {
        return cfg.prec_max;
    }
    cfg.clamp(numerator / denominator)
}

/// `γ̂_k = m / Σ_i ([μ^A_i]_k² + [Ξ^A_i]_kk)`.
pub fn update_gamma(loadings: &RowLoadingPosterior, cfg: &ModelConfig) -> DVector<f64> {
    let r = loadings.r();
    let numerator = precision_numerator(loadings.m(), cfg.variant);
    let mut denom = DVector::zeros(r);
    for (mu, cov) in loadings.means.iter().zip(&loadings.covs) {
        for k in 0..r {
            denom[k] += mu[k] * mu[k] + cov[(k, k)];
        }
    }
    denom.map(|d| precision_from(numerator, d, cfg))
}

/// `υ̂_k = r / Σ_i ([μ^J_i]_k² + [Ξ^J]_kk)` over the `r` rows of `J`.
pub fn update_upsilon(transition: &TransitionPosterior, cfg: &ModelConfig) -> DVector<f64> {
    let r = transition.r();
    let numerator = precision_numerator(r, cfg.variant);
    let mut denom = DVector::zeros(r);
    for mu in &transition.row_means {
        for k in 0..r {
            denom[k] += mu[k] * mu[k] + transition.shared_cov[(k, k)];
        }
    }
    denom.map(|d| precision_from(numerator, d, cfg))
}

/// Both ARD precision vectors `(γ̂, υ̂)`.
pub fn update_ard_precisions(
    loadings: &RowLoadingPosterior,
    transition: &TransitionPosterior,
    cfg: &ModelConfig,
) -> (DVector<f64>, DVector<f64>) {
    (update_gamma(loadings, cfg), update_upsilon(transition, cfg))
}

/// Sums the flattened `r × r` blocks selected by `member`. Mostly-full
/// selections start from `total` and subtract the complement instead.
fn masked_block_sum(
    flat: &[f64],
    total: &[f64],
    n: usize,
    selected: usize,
    member: impl Fn(usize) -> bool,
) -> Vec<f64> {
    let r2 = total.len();
    let block = |k: usize| &flat[k * r2..(k + 1) * r2];
    if 2 * selected >= n {
        let mut acc = total.to_vec();
        for k in (0..n).filter(|&k| !member(k)) {
            for (a, v) in acc.iter_mut().zip(block(k)) {
                *a -= v;
            }
        }
        acc
    } else {
        let mut acc = vec![0.0; r2];
        for k in (0..n).filter(|&k| member(k)) {
            for (a, v) in acc.iter_mut().zip(block(k)) {
                *a += v;
            }
        }
        acc
    }
}

fn flatten(blocks: impl Iterator<Item = DMatrix<f64>>, r2: usize) -> (Vec<f64>, Vec<f64>) {
    let mut flat = Vec::new();
    let mut total = vec![0.0; r2];
    for b in blocks {
        for (t, v) in total.iter_mut().zip(b.as_slice()) {
            *t += v;
        }
        flat.extend_from_slice(b.as_slice());
    }
    (flat, total)
}

/// `Σ_{i∈Ω_τ} Σ^A_i` for every column `τ`.
pub fn column_loading_moments(win: &ObservationWindow, loadings: &RowLoadingPosterior) -> Vec<DMatrix<f64>> {
    let r = loadings.r();
    let m = loadings.m();
    let (flat, total) = flatten((0..m).map(|i| loadings.second_moment(i)), r * r);
    (0..win.t())
        .map(|tau| {
            let acc = masked_block_sum(&flat, &total, m, win.column_set(tau).len(), |i| {
                win.is_observed(i, tau)
            });
            DMatrix::from_vec(r, r, acc)
        })
        .collect()
}

/// Sum of `E[(y − aᵀb − e)²]` over observed cells.
pub fn expected_squared_residual(
    win: &ObservationWindow,
    loadings: &RowLoadingPosterior,
    states: &StateTrajectoryPosterior,
    outliers: Option<&OutlierPosterior>,
) -> f64 {
    let moments = column_loading_moments(win, loadings);
    let mut total = 0.0;
    for tau in 0..win.t() {
        if win.column_set(tau).is_empty() {
            continue;
        }
        total += moments[tau].dot(&states.second_moment(tau));
        let b = &states.means[tau];
        for &i in win.column_set(tau) {
            let y = win.values()[(i, tau)];
            let pred = loadings.means[i].dot(b);
            let mut nu = y * y - 2.0 * y * pred;
            if let Some(o) = outliers {
                let e = o.get(i, tau);
                nu += 2.0 * e.mu * pred - 2.0 * y * e.mu + e.mu * e.mu + e.xi;
            }
            total += nu;
        }
    }
    total
}

/// `β̂ = ω / Σ E[(y − aᵀb − e)²]` (or `ω − 2` under EM).
pub fn update_noise_precision(
    win: &ObservationWindow,
    loadings: &RowLoadingPosterior,
    states: &StateTrajectoryPosterior,
    outliers: Option<&OutlierPosterior>,
    cfg: &ModelConfig,
) -> Result<f64> {
    if win.omega() == 0 {
        return Err(Error::EmptyWindow);
    }
    let denom = expected_squared_residual(win, loadings, states, outliers);
    let numerator = precision_numerator(win.omega(), cfg.variant);
    Ok(precision_from(numerator, denom, cfg))
}

/// `Ξ^J = (Diag(υ̂) + Σ_{τ<t} Σ^B_{τ,τ})⁻¹`, `Ĵ = (Σ_{τ≥2} Σ^B_{τ,τ−1}) Ξ^J`.
pub fn update_transition(
    states: &StateTrajectoryPosterior,
    upsilon: &DVector<f64>,
) -> Result<TransitionPosterior> {
    let t = states.t();
    let r = upsilon.len();
    if t < 2 {
        return Ok(TransitionPosterior::prior(upsilon));
    }
    let mut gram = DMatrix::from_diagonal(upsilon);
    let mut cross = DMatrix::zeros(r, r);
    for tau in 0..t - 1 {
        gram += states.second_moment(tau);
        cross += states.cross_second_moment(tau).transpose();
    }
    let (shared_cov, _) =
        linalg::spd_inverse(&gram).ok_or(Error::NotPositiveDefinite { block: 0 })?;
    let j_hat = cross * &shared_cov;
    Ok(TransitionPosterior {
        row_means: (0..r).map(|i| j_hat.row(i).transpose()).collect(),
        shared_cov,
    })
}

/// Row-wise `Ξ^A_i = (Diag(γ̂) + β̂ Σ_{τ∈Ω'_i} Σ^B_{τ,τ})⁻¹` and
/// `μ^A_i = β̂ Ξ^A_i Σ_{τ∈Ω'_i} μ^B_τ (y_{iτ} − μ_e^{iτ})`.
pub fn update_loadings(
    win: &ObservationWindow,
    states: &StateTrajectoryPosterior,
    beta: f64,
    gamma: &DVector<f64>,
    outliers: Option<&OutlierPosterior>,
) -> Result<RowLoadingPosterior> {
    let r = gamma.len();
    let t = states.t();
    let (flat, total) = flatten((0..t).map(|tau| states.second_moment(tau)), r * r);
    let prior = DMatrix::from_diagonal(gamma);
    let rows: Vec<Result<(DVector<f64>, DMatrix<f64>)>> = (0..win.m())
        .into_par_iter()
        .map(|i| {
            let taus = win.row_set(i);
            if taus.is_empty() {
                return Ok((
                    DVector::zeros(gamma.len()),
                    DMatrix::from_diagonal(&gamma.map(|g| 1.0 / g)),
                ));
            }
            let gram = DMatrix::from_vec(
                r,
                r,
                masked_block_sum(&flat, &total, t, taus.len(), |tau| win.is_observed(i, tau)),
            );
            let mut rhs = DVector::zeros(r);
            for &tau in taus {
                let y = win.values()[(i, tau)];
                let resid = match outliers {
                    Some(o) => y - o.mean(i, tau),
                    None => y,
                };
                rhs.axpy(resid, &states.means[tau], 1.0);
            }
            let prec = &prior + gram * beta;
            let (cov, _) =
                linalg::spd_inverse(&prec).ok_or(Error::NotPositiveDefinite { block: i })?;
            let mean = &cov * rhs * beta;
            Ok((mean, cov))
        })
        .collect();
    let mut means = Vec::with_capacity(win.m());
    let mut covs = Vec::with_capacity(win.m());
    for row in rows {
        let (mu, cov) = row?;
        means.push(mu);
        covs.push(cov);
    }
    Ok(RowLoadingPosterior { means, covs })
}

/// One sweep over the outlier cells of every observed entry.
pub fn update_outliers(
    win: &ObservationWindow,
    loadings: &RowLoadingPosterior,
    states: &StateTrajectoryPosterior,
    beta: f64,
    previous: &OutlierPosterior,
    cfg: &ModelConfig,
) -> OutlierPosterior {
    let mut next = OutlierPosterior::default();
    for tau in 0..win.t() {
        for &i in win.column_set(tau) {
            let prev = previous
                .cells
                .get(&(i, tau))
                .copied()
                .unwrap_or(OutlierCell::INITIAL);
            let xi = match cfg.outlier_variant {
                OutlierVariant::Derived => 1.0 / (beta + prev.alpha()),
                OutlierVariant::PaperLiteral => 1.0 / (beta + prev.mu * prev.mu + prev.xi),
            };
            let resid = win.values()[(i, tau)] - loadings.means[i].dot(&states.means[tau]);
            next.cells.insert(
                (i, tau),
                OutlierCell {
                    mu: beta * xi * resid,
                    xi,
                },
            );
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OutlierCell;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(r: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            h: 50,
            variant,
            ..Default::default()
        }
        .with_rank(r)
    }

    fn point_states(means: Vec<DVector<f64>>) -> StateTrajectoryPosterior {
        let r = means[0].len();
        let t = means.len();
        StateTrajectoryPosterior {
            means,
            diag_blocks: vec![DMatrix::zeros(r, r); t],
            super_blocks: vec![DMatrix::zeros(r, r); t - 1],
            log_det_cov: 0.0,
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng, r: usize, scale: f64) -> DMatrix<f64> {
        let x = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        (&x * x.transpose() + DMatrix::identity(r, r) * 0.1) * scale
    }

    #[test]
    fn gamma_direct_evaluation() {
        let loadings = RowLoadingPosterior {
            means: vec![dvector![1.0], dvector![1.0]],
            covs: vec![dmatrix![0.0], dmatrix![0.0]],
        };
        let g = update_gamma(&loadings, &cfg(1, Variant::Vb));
        assert_eq!(g, dvector![1.0]);
    }

    #[test]
    fn gamma_zero_column_clamps() {
        let loadings = RowLoadingPosterior {
            means: vec![dvector![1.0, 0.0], dvector![2.0, 0.0]],
            covs: vec![DMatrix::zeros(2, 2); 2],
        };
        let c = cfg(2, Variant::Vb);
        let g = update_gamma(&loadings, &c);
        assert_eq!(g[1], c.prec_max);
    }

    #[test]
    fn ard_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, r) = (9, 4);
        let loadings = RowLoadingPosterior {
            means: (0..m)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-2.0..2.0)))
                .collect(),
            covs: (0..m).map(|_| random_spd(&mut rng, r, 0.3)).collect(),
        };
        let transition = TransitionPosterior {
            row_means: (0..r)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            shared_cov: random_spd(&mut rng, r, 0.1),
        };
        let c = cfg(r, Variant::Vb);
        let (gamma, upsilon) = update_ard_precisions(&loadings, &transition, &c);
        for k in 0..r {
            let mut d = 0.0;
            for i in 0..m {
                d += loadings.means[i][k].powi(2);
                d += loadings.covs[i][(k, k)];
            }
            let expected = m as f64 / d;
            assert!((gamma[k] - expected).abs() <= 1e-12 * expected);

            let mut d = 0.0;
            for i in 0..r {
                d += transition.row_means[i][k].powi(2);
                d += transition.shared_cov[(k, k)];
            }
            let expected = r as f64 / d;
            assert!((upsilon[k] - expected).abs() <= 1e-12 * expected);
        }

        let em = cfg(r, Variant::Em);
        let (gamma_em, upsilon_em) = update_ard_precisions(&loadings, &transition, &em);
        for k in 0..r {
            let ratio = gamma_em[k] / gamma[k];
            assert!((ratio - (m as f64 - 2.0) / m as f64).abs() < 1e-14);
            let ratio = upsilon_em[k] / upsilon[k];
            assert!((ratio - (r as f64 - 2.0) / r as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn noise_precision_examples() {
        let win = ObservationWindow::from_row_major(1, 1, &[Some(3.0)]).unwrap();
        let loadings = RowLoadingPosterior {
            means: vec![dvector![1.0]],
            covs: vec![dmatrix![0.0]],
        };
        let states = StateTrajectoryPosterior {
            means: vec![dvector![2.0]],
            diag_blocks: vec![dmatrix![0.0]],
            super_blocks: vec![],
            log_det_cov: 0.0,
        };
        let c = cfg(1, Variant::Vb);
        assert_eq!(
            update_noise_precision(&win, &loadings, &states, None, &c).unwrap(),
            1.0
        );

        let perfect = ObservationWindow::from_row_major(1, 1, &[Some(2.0)]).unwrap();
        assert_eq!(
            update_noise_precision(&perfect, &loadings, &states, None, &c).unwrap(),
            c.prec_max
        );

        let empty = ObservationWindow::from_row_major(1, 1, &[None]).unwrap();
        assert!(matches!(
            update_noise_precision(&empty, &loadings, &states, None, &c),
            Err(Error::EmptyWindow)
        ));
    }

    #[test]
    fn robust_noise_precision_single_cell() {
        let win = ObservationWindow::from_row_major(1, 1, &[Some(3.0)]).unwrap();
        let loadings = RowLoadingPosterior {
            means: vec![dvector![1.0]],
            covs: vec![dmatrix![0.0]],
        };
        let states = point_states(vec![dvector![2.0]]);
        let outliers = OutlierPosterior::filled(&win, OutlierCell { mu: 1.0, xi: 0.0 });

        // Independent scalar evaluation of E[(y - ab - e)^2].
        let (y, p, mu_e, xi_e) = (3.0f64, 2.0f64, 1.0f64, 0.0f64);
        let nu = (y - mu_e - p).powi(2) + xi_e;
        assert_eq!(nu, 0.0);
        assert_eq!(
            expected_squared_residual(&win, &loadings, &states, Some(&outliers)),
            nu
        );
        let c = cfg(1, Variant::Vb);
        assert_eq!(
            update_noise_precision(&win, &loadings, &states, Some(&outliers), &c).unwrap(),
            c.prec_max
        );
    }

    #[test]
    fn robust_residual_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, t, r) = (4, 5, 2);
        let cells: Vec<Option<f64>> = (0..m * t)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(-3.0..3.0)))
            .collect();
        let win = ObservationWindow::from_row_major(m, t, &cells).unwrap();
        let loadings = RowLoadingPosterior {
            means: (0..m)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            covs: (0..m).map(|_| random_spd(&mut rng, r, 0.2)).collect(),
        };
        let states = StateTrajectoryPosterior {
            means: (0..t)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            diag_blocks: (0..t).map(|_| random_spd(&mut rng, r, 0.2)).collect(),
            super_blocks: vec![DMatrix::zeros(r, r); t - 1],
            log_det_cov: 0.0,
        };
        let mut outliers = OutlierPosterior::default();
        for tau in 0..t {
            for &i in win.column_set(tau) {
                outliers.cells.insert(
                    (i, tau),
                    OutlierCell {
                        mu: rng.random_range(-1.0..1.0),
                        xi: rng.random_range(0.0..0.5),
                    },
                );
            }
        }
        // E[(y - aᵀb - e)²] = (y - μe)² - 2(y - μe) E[aᵀb] + E[(aᵀb)²] + Ξe,
        // with E[(aᵀb)²] = Σ_kl E[a_k a_l] E[b_k b_l].
        let mut expected = 0.0;
        for tau in 0..t {
            for &i in win.column_set(tau) {
                let y = win.values()[(i, tau)];
                let e = outliers.cells[&(i, tau)];
                let mut mean_ab = 0.0;
                for k in 0..r {
                    mean_ab += loadings.means[i][k] * states.means[tau][k];
                }
                let mut second_ab = 0.0;
                for k in 0..r {
                    for l in 0..r {
                        let eaa = loadings.means[i][k] * loadings.means[i][l]
                            + loadings.covs[i][(k, l)];
                        let ebb = states.means[tau][k] * states.means[tau][l]
                            + states.diag_blocks[tau][(k, l)];
                        second_ab += eaa * ebb;
                    }
                }
                expected += (y - e.mu).powi(2) - 2.0 * (y - e.mu) * mean_ab + second_ab + e.xi;
            }
        }
        let got = expected_squared_residual(&win, &loadings, &states, Some(&outliers));
        assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn transition_scalar_least_squares() {
        let states = point_states(vec![dvector![1.0], dvector![2.0], dvector![4.0], dvector![8.0]]);
        let tp = update_transition(&states, &dvector![1e-12]).unwrap();
        let oracle = (1.0 * 2.0 + 2.0 * 4.0 + 4.0 * 8.0) / (1.0 + 4.0 + 16.0);
        assert!((tp.row_means[0][0] - oracle).abs() < 1e-12);
        assert!((oracle - 2.0f64).abs() < 1e-15);
    }

    #[test]
    fn transition_all_zero_states() {
        let states = point_states(vec![DVector::zeros(2); 3]);
        let upsilon = dvector![2.0, 4.0];
        let tp = update_transition(&states, &upsilon).unwrap();
        assert_eq!(tp.j_hat(), DMatrix::zeros(2, 2));
        assert!((&tp.shared_cov - dmatrix![0.5, 0.0; 0.0, 0.25]).amax() < 1e-15);
    }

    #[test]
    fn transition_short_window_is_prior() {
        let states = point_states(vec![dvector![3.0, 1.0]]);
        let tp = update_transition(&states, &dvector![2.0, 4.0]).unwrap();
        assert_eq!(tp, TransitionPosterior::prior(&dvector![2.0, 4.0]));
    }

    #[test]
    fn transition_matches_dense_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, t) = (2, 6);
        let states = StateTrajectoryPosterior {
            means: (0..t)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-2.0..2.0)))
                .collect(),
            diag_blocks: (0..t).map(|_| random_spd(&mut rng, r, 0.2)).collect(),
            super_blocks: (0..t - 1)
                .map(|_| DMatrix::from_fn(r, r, |_, _| rng.random_range(-0.05..0.05)))
                .collect(),
            log_det_cov: 0.0,
        };
        let upsilon = dvector![0.7, 1.3];
        let tp = update_transition(&states, &upsilon).unwrap();

        let mut a = [[0.0f64; 2]; 2];
        let mut c = [[0.0f64; 2]; 2];
        a[0][0] = upsilon[0];
        a[1][1] = upsilon[1];
        for tau in 0..t - 1 {
            for k in 0..r {
                for l in 0..r {
                    a[k][l] += states.means[tau][k] * states.means[tau][l]
                        + states.diag_blocks[tau][(k, l)];
                    // E[b_{τ+1} b_τᵀ]_{kl} = μ_{τ+1,k} μ_{τ,l} + Ξ_{τ,τ+1}[l][k]
                    c[k][l] += states.means[tau + 1][k] * states.means[tau][l]
                        + states.super_blocks[tau][(l, k)];
                }
            }
        }
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        for i in 0..2 {
            for k in 0..2 {
                let j_ik = c[i][0] * inv[0][k] + c[i][1] * inv[1][k];
                assert!((tp.row_means[i][k] - j_ik).abs() <= 1e-10 * j_ik.abs().max(1.0));
                assert!((tp.shared_cov[(i, k)] - inv[i][k]).abs() <= 1e-10 * inv[i][k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn loadings_examples() {
        let win = ObservationWindow::from_row_major(2, 1, &[Some(2.0), None]).unwrap();
        // μ^B = 1 with Σ^B = 1 means Ξ^B = 0.
        let states = point_states(vec![dvector![1.0]]);
        let gamma = dvector![1.0];
        let post = update_loadings(&win, &states, 1.0, &gamma, None).unwrap();
        assert!((post.covs[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.means[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(post.means[1], dvector![0.0]);
        assert_eq!(post.covs[1], dmatrix![1.0]);

        let gamma = dvector![4.0, 0.5];
        let states = point_states(vec![dvector![1.0, 2.0]]);
        let win = ObservationWindow::from_row_major(1, 1, &[None]).unwrap();
        let post = update_loadings(&win, &states, 1.0, &gamma, None).unwrap();
        assert_eq!(post.means[0], DVector::zeros(2));
        assert_eq!(post.covs[0], dmatrix![0.25, 0.0; 0.0, 2.0]);
    }

    #[test]
    fn loadings_match_ridge_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, t, r) = (5, 12, 3);
        let cells: Vec<Option<f64>> = (0..m * t)
            .map(|_| rng.random_bool(0.6).then(|| rng.random_range(-3.0..3.0)))
            .collect();
        let win = ObservationWindow::from_row_major(m, t, &cells).unwrap();
        let states = StateTrajectoryPosterior {
            means: (0..t)
                .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-2.0..2.0)))
                .collect(),
            diag_blocks: (0..t).map(|_| random_spd(&mut rng, r, 0.1)).collect(),
            super_blocks: vec![DMatrix::zeros(r, r); t - 1],
            log_det_cov: 0.0,
        };
        let gamma = dvector![0.5, 2.0, 10.0];
        let beta = 3.0;
        let post = update_loadings(&win, &states, beta, &gamma, None).unwrap();
        for i in 0..m {
            // Ridge regression: design rows μ^B_τ, regularizer Diag(γ)/β, plus
            // the covariance correction Σ Ξ^B_τ.
            let taus = win.row_set(i);
            let x = DMatrix::from_fn(taus.len(), r, |row, k| states.means[taus[row]][k]);
            let y = DVector::from_fn(taus.len(), |row, _| win.values()[(i, taus[row])]);
            let mut lhs = x.transpose() * &x + DMatrix::from_diagonal(&gamma) / beta;
            for &tau in taus {
                lhs += &states.diag_blocks[tau];
            }
            let ridge = lhs.clone().lu().solve(&(x.transpose() * y)).unwrap();
            let rel = (&post.means[i] - &ridge).norm() / ridge.norm().max(1e-300);
            assert!(rel < 1e-8, "row {i}: {rel}");
            let cov = (lhs * beta).try_inverse().unwrap();
            assert!(linalg::rel_error(&post.covs[i], &cov) < 1e-8);
        }
    }

    #[test]
    fn outlier_examples() {
        let win = ObservationWindow::from_row_major(1, 1, &[Some(2.0)]).unwrap();
        let loadings = RowLoadingPosterior {
            means: vec![dvector![0.0]],
            covs: vec![dmatrix![1.0]],
        };
        let states = point_states(vec![dvector![1.0]]);
        let c = cfg(1, Variant::Vb);
        let out = update_outliers(&win, &loadings, &states, 1.0, &OutlierPosterior::initial(&win), &c);
        let cell = out.cells[&(0, 0)];
        assert_eq!(cell.xi, 0.5);
        assert_eq!(cell.mu, 1.0);

        let literal = ModelConfig {
            outlier_variant: OutlierVariant::PaperLiteral,
            ..c.clone()
        };
        let prev = OutlierPosterior::filled(&win, OutlierCell { mu: 1.0, xi: 0.5 });
        let out = update_outliers(&win, &loadings, &states, 1.0, &prev, &literal);
        assert_eq!(out.cells[&(0, 0)].xi, 1.0 / 2.5);

        // Zero residual gives a zero outlier whatever β is.
        let exact = RowLoadingPosterior {
            means: vec![dvector![2.0]],
            covs: vec![dmatrix![1.0]],
        };
        for beta in [0.1, 1.0, 1e6] {
            let out = update_outliers(&win, &exact, &states, beta, &OutlierPosterior::initial(&win), &c);
            assert_eq!(out.cells[&(0, 0)].mu, 0.0);
        }
    }

    #[test]
    fn outliers_only_at_observed_cells() {
        let win = ObservationWindow::from_row_major(2, 2, &[Some(1.0), None, None, Some(3.0)]).unwrap();
        let loadings = RowLoadingPosterior {
            means: vec![dvector![1.0]; 2],
            covs: vec![dmatrix![0.0]; 2],
        };
        let states = point_states(vec![dvector![1.0], dvector![1.0]]);
        let out = update_outliers(&win, &loadings, &states, 1.0, &OutlierPosterior::default(), &cfg(1, Variant::Vb));
        let keys: Vec<_> = out.cells.keys().copied().collect();
        assert_eq!(keys, vec![(0, 0), (1, 1)]);
        assert!(out.cells.values().all(|c| c.xi > 0.0));
    }
}
