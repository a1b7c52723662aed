use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vbsf_core::metrics::{mae, mre, Grouping};
use vbsf_core::solver::{dense_oracle, forward_backward, StateSystem};
use vbsf_core::{fit_window, snapshot, ModelConfig, ObservationWindow};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-50.0f64..50.0, rows * cols)
        .prop_map(move |v| DMatrix::from_column_slice(rows, cols, &v))
}

fn window() -> impl Strategy<Value = ObservationWindow> {
    (2usize..6, 3usize..8).prop_flat_map(|(m, t)| {
        (
            matrix(m, t),
            prop::collection::vec(prop::bool::weighted(0.8), m * t),
        )
            .prop_filter_map("needs an observed cell", move |(values, keep)| {
                let mask = DMatrix::from_column_slice(m, t, &keep);
                let win = ObservationWindow::new(values, mask).ok()?;
                (win.omega() > 0).then_some(win)
            })
    })
}

fn spd_system() -> impl Strategy<Value = StateSystem> {
    (1usize..4, 2usize..7, any::<u64>()).prop_map(|(r, t, seed)| {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = |rows, cols| DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
        let j = g(r, r) * 0.5;
        let gram = j.transpose() * &j;
        let psi = (0..t)
            .map(|tau| {
                let x = g(r, r);
                let mut p = &x * x.transpose() + DMatrix::identity(r, r);
                if tau + 1 < t {
                    p += &gram;
                }
                p
            })
            .collect();
        let v = (0..t).map(|_| DVector::from_column_slice(g(r, 1).as_slice())).collect();
        StateSystem { psi, off: -j, v }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fitted_state_survives_json(win in window(), seed in any::<u64>(), robust in any::<bool>()) {
        let cfg = ModelConfig { h: win.t() - 1, max_iters: 6, robust, seed, ..Default::default() };
        let state = fit_window(&win, &cfg, None).unwrap();
        let text = snapshot::to_json(&state).unwrap();
        let back = snapshot::from_json(&text).unwrap();
        prop_assert_eq!(&back, &state);
        prop_assert_eq!(snapshot::to_json(&back).unwrap(), text);
    }

    #[test]
    fn mre_ignores_common_scale(est in matrix(4, 6), truth in matrix(4, 6), c in 0.01f64..100.0) {
        let base = mre(&est, &truth, Grouping::PerColumn).unwrap();
        let scaled = mre(&(&est * c), &(&truth * c), Grouping::PerColumn).unwrap();
        prop_assert!((base.overall - scaled.overall).abs() <= 1e-12 * base.overall.max(1.0));
    }

    #[test]
    fn mae_scales_linearly(est in matrix(3, 5), truth in matrix(3, 5), c in 0.01f64..100.0) {
        let base = mae(&est, &truth).unwrap();
        let scaled = mae(&(&est * c), &(&truth * c)).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-10 * (c * base).max(1.0));
    }

    #[test]
    fn solver_agrees_with_dense_inverse(sys in spd_system()) {
        let (r, t) = (sys.r(), sys.t());
        let post = forward_backward(&sys).unwrap();
        let (mean, cov) = dense_oracle(&sys).unwrap();
        let scale = cov.amax().max(1.0);
        for tau in 0..t {
            let m = mean.rows(tau * r, r);
            prop_assert!((&post.means[tau] - m).amax() <= 1e-8 * mean.amax().max(1.0));
            let d = cov.view((tau * r, tau * r), (r, r));
            prop_assert!((&post.diag_blocks[tau] - d).amax() <= 1e-8 * scale);
            if tau + 1 < t {
                let s = cov.view((tau * r, (tau + 1) * r), (r, r));
                prop_assert!((&post.super_blocks[tau] - s).amax() <= 1e-8 * scale);
            }
        }
    }
}
