//! Block-tridiagonal natural-parameter system of the state posterior and its
//! O(t r³) two-pass solver.
//!
//! The precision of `q(B)` has diagonal blocks `Ψ_τ`, lower blocks
//! `P_{τ+1,τ} = −Ĵ` and upper blocks `P_{τ,τ+1} = −Ĵᵀ`. The forward pass is a
//! block LDLᵀ elimination; the backward pass recovers the means and the
//! diagonal and super-diagonal covariance blocks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::updates;
use crate::model::{
    ModelConfig, ObservationWindow, OutlierPosterior, RowLoadingPosterior,
    StateTrajectoryPosterior, TransitionPosterior,
};

/// Largest `r·t` the dense oracle will materialize.
pub const DENSE_ORACLE_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct StateSystem {
    /// Diagonal precision blocks `Ψ_τ`.
    pub psi: Vec<DMatrix<f64>>,
    /// Lower off-diagonal block `−Ĵ`, shared by every `τ`.
    pub off: DMatrix<f64>,
    /// Natural-parameter vectors `v_τ`.
    pub v: Vec<DVector<f64>>,
}

impl StateSystem {
    pub fn t(&self) -> usize {
        self.psi.len()
    }

    pub fn r(&self) -> usize {
        self.off.nrows()
    }

    /// The full `rt × rt` precision matrix.
    pub fn dense_precision(&self) -> DMatrix<f64> {
        let (r, t) = (self.r(), self.t());
        let mut p = DMatrix::zeros(r * t, r * t);
        for tau in 0..t {
            p.view_mut((tau * r, tau * r), (r, r)).copy_from(&self.psi[tau]);
            if tau + 1 < t {
                p.view_mut(((tau + 1) * r, tau * r), (r, r))
                    .copy_from(&self.off);
                p.view_mut((tau * r, (tau + 1) * r), (r, r))
                    .copy_from(&self.off.transpose());
            }
        }
        p
    }

    pub fn dense_rhs(&self) -> DVector<f64> {
        let r = self.r();
        let mut v = DVector::zeros(r * self.t());
        for (tau, vt) in self.v.iter().enumerate() {
            v.rows_mut(tau * r, r).copy_from(vt);
        }
        v
    }
}

/// Builds `Ψ_τ`, `v_τ` and `−Ĵ` from the current factor posteriors.
///
/// With `outliers`, the observation entering `v_τ` is `y − μ_e`.
pub fn assemble(
    win: &ObservationWindow,
    loadings: &RowLoadingPosterior,
    transition: &TransitionPosterior,
    beta: f64,
    outliers: Option<&OutlierPosterior>,
    cfg: &ModelConfig,
) -> Result<StateSystem> {
    let r = cfg.r();
    if loadings.m() != win.m() || loadings.r() != r || transition.r() != r {
        return Err(Error::Dimension(format!(
            "window has {} rows, loadings {}x{}, transition rank {}, model rank {r}",
            win.m(),
            loadings.m(),
            loadings.r(),
            transition.r()
        )));
    }
    assemble_parts(
        win,
        loadings,
        &transition.j_hat(),
        &transition.expected_gram(),
        beta,
        outliers,
        cfg,
    )
}

/// [`assemble`] with `Ĵ` and `E[JᵀJ]` supplied directly.
pub fn assemble_parts(
    win: &ObservationWindow,
    loadings: &RowLoadingPosterior,
    j_hat: &DMatrix<f64>,
    gram_j: &DMatrix<f64>,
    beta: f64,
    outliers: Option<&OutlierPosterior>,
    cfg: &ModelConfig,
) -> Result<StateSystem> {
    let r = cfg.r();
    let t = win.t();
    let lambda1 = cfg.lambda1();
    let (lambda_inv, _) = linalg::spd_inverse(&lambda1)
        .ok_or_else(|| Error::Config("prior covariance must be SPD".into()))?;
    let identity = DMatrix::<f64>::identity(r, r);

    let moments = updates::column_loading_moments(win, loadings);
    let mut psi = Vec::with_capacity(t);
    let mut v = Vec::with_capacity(t);
    for tau in 0..t {
        let mut obs_vec = DVector::zeros(r);
        for &i in win.column_set(tau) {
            let y = win.values()[(i, tau)];
            let resid = match outliers {
                Some(o) => y - o.mean(i, tau),
                None => y,
            };
            obs_vec.axpy(resid, &loadings.means[i], 1.0);
        }
        let mut p = &moments[tau] * beta;
        if tau == 0 {
            p += &lambda_inv;
        } else {
            p += &identity;
        }
        if tau + 1 < t {
            p += gram_j;
        }
        linalg::symmetrize(&mut p);
        psi.push(p);
        v.push(obs_vec * beta);
    }
    if t > 0 {
        v[0] += &lambda_inv * cfg.mu1();
    }
    Ok(StateSystem {
        psi,
        off: -j_hat,
        v,
    })
}

/// Solves the block-tridiagonal system in two passes.
pub fn forward_backward(sys: &StateSystem) -> Result<StateTrajectoryPosterior> {
    let t = sys.t();
    let r = sys.r();
    if t == 0 {
        return Ok(StateTrajectoryPosterior {
            means: Vec::new(),
            diag_blocks: Vec::new(),
            super_blocks: Vec::new(),
            log_det_cov: 0.0,
        });
    }
    let j_hat = -&sys.off;
    let j_hat_t = j_hat.transpose();

    // Forward: pivots D_τ, gains G_τ = D_τ⁻¹ Ĵᵀ, partial means D_τ⁻¹ z_τ.
    let mut pivot_inv = Vec::with_capacity(t);
    let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(t.saturating_sub(1));
    let mut partial = Vec::with_capacity(t);
    let mut log_det_prec = 0.0;

    let mut pivot = sys.psi[0].clone();
    let mut z = sys.v[0].clone();
    for tau in 0..t {
        linalg::symmetrize(&mut pivot);
        let chol = linalg::cholesky(&pivot).ok_or(Error::NotPositiveDefinite { block: tau })?;
        log_det_prec += linalg::chol_log_det(&chol);
        let mut d_inv = chol.inverse();
        linalg::symmetrize(&mut d_inv);
        let mu = &d_inv * &z;
        if tau + 1 < t {
            let gain = &d_inv * &j_hat_t;
            pivot = &sys.psi[tau + 1] - &j_hat * &gain;
            z = &sys.v[tau + 1] + &j_hat * &mu;
            gains.push(gain);
        }
        partial.push(mu);
        pivot_inv.push(d_inv);
    }
    if !log_det_prec.is_finite() {
        return Err(Error::NotPositiveDefinite { block: t - 1 });
    }

    // Backward.
    let mut means = vec![DVector::zeros(r); t];
    let mut diag_blocks = vec![DMatrix::zeros(r, r); t];
    let mut super_blocks = vec![DMatrix::zeros(r, r); t - 1];
    means[t - 1] = partial[t - 1].clone();
    diag_blocks[t - 1] = pivot_inv[t - 1].clone();
    for tau in (0..t - 1).rev() {
        let gain = &gains[tau];
        let upper = gain * &diag_blocks[tau + 1];
        let mut d = &pivot_inv[tau] + &upper * gain.transpose();
        linalg::symmetrize(&mut d);
        means[tau] = &partial[tau] + gain * &means[tau + 1];
        diag_blocks[tau] = d;
        super_blocks[tau] = upper;
    }

    Ok(StateTrajectoryPosterior {
        means,
        diag_blocks,
        super_blocks,
        log_det_cov: -log_det_prec,
    })
}

/// Inverts the assembled precision directly. Test oracle only.
pub fn dense_oracle(sys: &StateSystem) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let size = sys.r() * sys.t();
    if size > DENSE_ORACLE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    let cov = sys
        .dense_precision()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { block: 0 })?;
    let mean = &cov * sys.dense_rhs();
    Ok((mean, cov))
}
