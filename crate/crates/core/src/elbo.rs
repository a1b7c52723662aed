//! Mean-field evidence lower bound of the non-robust model.
//!
//! Under VB the precisions carry Gamma posteriors whose shapes are fixed by
//! the model (`ω/2`, `m/2`, `r/2`) and whose rates are set so the means match
//! the stored point values. Under EM the precisions are point estimates and the
//! bound becomes the MAP objective `E_q[log p(y, A, B, J, β, γ, υ)] + H[q]`.

use std::f64::consts::PI;

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    ModelConfig, ObservationWindow, PrecisionState, RowLoadingPosterior,
    StateTrajectoryPosterior, TransitionPosterior, Variant,
};
use crate::updates::expected_squared_residual;

/// `(E[x], E[ln x], entropy)` of one precision with the given Gamma shape and
/// posterior mean.
fn precision_terms(shape: f64, mean: f64, variant: Variant) -> (f64, f64, f64) {
    match variant {
        Variant::Vb if shape > 0.0 => {
            let rate = shape / mean;
            let e_ln = digamma(shape) - rate.ln();
            let entropy = shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape);
            (mean, e_ln, entropy)
        }
        _ => (mean, mean.ln(), 0.0),
    }
}

fn gaussian_entropy(dim: usize, log_det_cov: f64) -> f64 {
    0.5 * dim as f64 * (1.0 + (2.0 * PI).ln()) + 0.5 * log_det_cov
}

/// All pieces the bound depends on.
pub struct ElboInputs<'a> {
    pub win: &'a ObservationWindow,
    pub loadings: &'a RowLoadingPosterior,
    pub states: &'a StateTrajectoryPosterior,
    pub transition: &'a TransitionPosterior,
    pub precisions: &'a PrecisionState,
    pub cfg: &'a ModelConfig,
}

pub fn elbo(inp: &ElboInputs<'_>) -> Result<f64> {
    let ElboInputs {
        win,
        loadings,
        states,
        transition,
        precisions,
        cfg,
    } = *inp;
    let ln2pi = (2.0 * PI).ln();
    let r = cfg.r();
    let m = win.m();
    let t = win.t();
    let omega = win.omega() as f64;
    let variant = cfg.variant;

    let (beta, ln_beta, h_beta) = precision_terms(omega / 2.0, precisions.beta, variant);
    let mut total = 0.0;

    // Likelihood and Jeffreys prior on β.
    let sq = expected_squared_residual(win, loadings, states, None);
    total += 0.5 * omega * ln_beta - 0.5 * omega * ln2pi - 0.5 * beta * sq;
    total += -ln_beta + h_beta;

    // Loadings prior, ARD on columns.
    for k in 0..r {
        let (g, ln_g, h_g) = precision_terms(m as f64 / 2.0, precisions.gamma[k], variant);
        let energy: f64 = loadings
            .means
            .iter()
            .zip(&loadings.covs)
            .map(|(mu, cov)| mu[k] * mu[k] + cov[(k, k)])
            .sum();
        total += 0.5 * m as f64 * (ln_g - ln2pi) - 0.5 * g * energy;
        total += -ln_g + h_g;
    }

    // Transition prior, ARD on columns.
    for k in 0..r {
        let (u, ln_u, h_u) = precision_terms(r as f64 / 2.0, precisions.upsilon[k], variant);
        let energy: f64 = transition
            .row_means
            .iter()
            .map(|mu| mu[k] * mu[k] + transition.shared_cov[(k, k)])
            .sum();
        total += 0.5 * r as f64 * (ln_u - ln2pi) - 0.5 * u * energy;
        total += -ln_u + h_u;
    }

    // State chain.
    if t > 0 {
        let mu1 = cfg.mu1();
        let lambda1 = cfg.lambda1();
        let (lambda_inv, ln_det_lambda) = linalg::spd_inverse(&lambda1)
            .ok_or_else(|| Error::Config("prior covariance must be SPD".into()))?;
        let m0 = &states.means[0];
        let centered =
            states.second_moment(0) - m0 * mu1.transpose() - &mu1 * m0.transpose() + &mu1 * mu1.transpose();
        total += -0.5 * r as f64 * ln2pi
            - 0.5 * ln_det_lambda
            - 0.5 * lambda_inv.component_mul(&centered).sum();

        let j_hat = transition.j_hat();
        let gram_j = transition.expected_gram();
        for tau in 1..t {
            let cross = states.cross_second_moment(tau - 1);
            let sq = states.second_moment(tau).trace()
                - 2.0 * (&j_hat * cross).trace()
                + gram_j.component_mul(&states.second_moment(tau - 1)).sum();
            total += -0.5 * r as f64 * ln2pi - 0.5 * sq;
        }
    }

    // Gaussian entropies.
    for cov in &loadings.covs {
        let ld = spd_log_det(cov)?;
        total += gaussian_entropy(r, ld);
    }
    total += gaussian_entropy(r * t, states.log_det_cov);
    let ld_j = spd_log_det(&transition.shared_cov)?;
    total += r as f64 * gaussian_entropy(r, ld_j);

    Ok(total)
}

fn spd_log_det(m: &nalgebra::DMatrix<f64>) -> Result<f64> {
    let chol = linalg::cholesky(m).ok_or(Error::NotPositiveDefinite { block: 0 })?;
    Ok(linalg::chol_log_det(&chol))
}
