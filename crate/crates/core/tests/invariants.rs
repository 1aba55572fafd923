use delay_lqr_core::linalg::{self, Matrix};
use delay_lqr_core::model::build_grid;
use delay_lqr_core::oracle::{build_augmented, compare, solve_discrete_lq};
use delay_lqr_core::riccati::{certify_max_alpha, solve_are, solve_dre, AreOptions};
use delay_lqr_core::sim::{lyapunov_profile, simulate_paths, GainSchedule, SimConfig};
use delay_lqr_core::{Channel, CostSpec, StochasticDelaySystem, TimeGrid};
use proptest::prelude::*;

fn scalar(v: f64) -> Matrix {
    Matrix::scalar(v)
}

fn scalar_sys(a: f64, channels: &[(f64, f64, f64)]) -> StochasticDelaySystem {
    StochasticDelaySystem::new(
        scalar(a),
        channels
            .iter()
            .map(|&(b, bb, h)| Channel::new(scalar(b), scalar(bb), h))
            .collect(),
    )
    .unwrap()
}

fn mat(n: usize, m: usize, v: &[f64]) -> Matrix {
    Matrix::from_fn(n, m, |i, j| v[(i * m + j) % v.len()])
}

/// Random system with `n ≤ 2`, one input and up to two delayed channels on
/// multiples of 1/8.
fn system() -> impl Strategy<Value = StochasticDelaySystem> {
    (
        1usize..=2,
        prop::collection::vec(-1.0f64..1.0, 4),
        prop::collection::vec((-1.0f64..1.0, -0.5f64..0.5), 3),
        prop::collection::vec(1u32..=4, 0..=2),
    )
        .prop_map(|(n, a, bs, delays)| {
            let mut channels = vec![Channel::new(
                mat(n, 1, &[bs[0].0, 1.0]),
                mat(n, 1, &[bs[0].1, 0.1]),
                0.0,
            )];
            for (k, d) in delays.iter().enumerate() {
                let (b, bb) = bs[k + 1];
                channels.push(Channel::new(
                    mat(n, 1, &[b, 0.5]),
                    mat(n, 1, &[bb, -0.2]),
                    *d as f64 / 8.0,
                ));
            }
            StochasticDelaySystem::new(mat(n, n, &a), channels).unwrap()
        })
}

/// `A'P + PA + I − P B W⁻¹ B'P`, `W = I + Σ B̄'PB̄`.
fn standard_residual(a: &Matrix, b: &Matrix, b_bars: &[&Matrix], p: &Matrix) -> f64 {
    let mut w = Matrix::identity(b.cols());
    for bb in b_bars {
        w += &p.congruence(bb);
    }
    let bp = &b.transpose() * p;
    let lhs = &(&(&a.transpose() * p) + &(p * a)) + &Matrix::identity(a.rows());
    (&lhs - &(&bp.transpose() * &linalg::solve(&w, &bp).unwrap())).norm_max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn optimal_cost_grows_with_horizon(sys in system(), x0 in prop::collection::vec(-1.0f64..1.0, 2)) {
        let x0 = &x0[..sys.state_dim()];
        let mut prev = 0.0;
        for t in [0.5, 1.0, 2.0, 4.0] {
            let cost = CostSpec::identity(&sys, t);
            let grid = TimeGrid::with_step(&sys, t, 1.0 / 64.0).unwrap();
            let v = solve_dre(&sys, &cost, &grid, 0.0).unwrap().phat[0].quad_form(x0);
            prop_assert!(v >= prev - 1e-8, "T = {t}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn ordering_at_every_node(sys in system(), alpha in prop_oneof![Just(0.0), 0.0f64..2.0]) {
        let cost = CostSpec::identity(&sys, 1.0);
        let grid = TimeGrid::with_step(&sys, 1.0, 1.0 / 64.0).unwrap();
        let sol = solve_dre(&sys, &cost, &grid, alpha).unwrap();
        for k in 0..sol.p.len() {
            let gap = linalg::min_eigenvalue(&(&sol.p[k] - &sol.phat[k])).unwrap();
            let hat = linalg::min_eigenvalue(&sol.phat[k]).unwrap();
            let om = linalg::min_eigenvalue(&(&sol.omega[k] - &cost.r)).unwrap();
            prop_assert!(gap >= -1e-8 && hat >= -1e-8 && om >= -1e-8, "node {k}: {gap} {hat} {om}");
        }
    }

    #[test]
    fn delay_free_are_is_the_standard_one(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(0.2f64..1.0, 2),
        bb in prop::collection::vec(-0.5f64..0.5, 2),
    ) {
        let sys = StochasticDelaySystem::new(
            mat(2, 2, &a),
            vec![Channel::new(mat(2, 1, &b), mat(2, 1, &bb), 0.0)],
        ).unwrap();
        let g = solve_are(&sys, 0.0, &AreOptions::default());
        prop_assume!(g.is_ok());
        let g = g.unwrap();
        let ch = &sys.channels()[0];
        prop_assert!((&g.p - &g.phat).norm_max() <= 1e-10);
        let r = standard_residual(sys.a(), &ch.b, &[&ch.b_bar], &g.p);
        prop_assert!(r <= 1e-8, "residual {r}");
    }

    #[test]
    fn noise_free_are_is_the_predictor_one(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        delays in prop::collection::vec(1u32..=4, 1..=2),
    ) {
        let zero = Matrix::zeros(2, 1);
        let mut channels = vec![Channel::new(mat(2, 1, &b[..2]), zero.clone(), 0.0)];
        for d in &delays {
            channels.push(Channel::new(mat(2, 1, &b[2..]), zero.clone(), *d as f64 / 8.0));
        }
        let sys = StochasticDelaySystem::new(mat(2, 2, &a), channels).unwrap();
        let g = solve_are(&sys, 0.0, &AreOptions::default());
        prop_assume!(g.is_ok());
        let g = g.unwrap();
        let mut b_sum = Matrix::zeros(2, 1);
        for ch in sys.channels() {
            b_sum += &(&linalg::mat_exp(&-sys.a(), ch.delay).unwrap() * &ch.b);
        }
        let r = standard_residual(sys.a(), &b_sum, &[], &g.phat);
        prop_assert!(r <= 1e-8, "residual {r}");
    }
}

#[test]
fn certified_rate_matches_solvability_scan() {
    let sys = scalar_sys(0.0, &[(1.0, 0.0, 0.0)]);
    let opts = AreOptions::default();
    let tol = 0.25;
    let cert = certify_max_alpha(&sys, 3.0, tol, &opts).unwrap();
    let scan = (0..=12)
        .map(|k| k as f64 * tol)
        .take_while(|&a| solve_are(&sys, a, &opts).is_ok())
        .last()
        .unwrap();
    assert!(
        (cert.alpha_max - scan).abs() <= tol,
        "{} vs {scan}",
        cert.alpha_max
    );
}

#[test]
fn certified_rate_closed_form_with_input_noise() {
    // a = 0, b = b̄ = 1: (α − 1)p² + (α + 1)p + 1 = 0 has a positive root iff α < 1.
    let sys = scalar_sys(0.0, &[(1.0, 1.0, 0.0)]);
    let opts = AreOptions {
        t_max: Some(4000.0),
        ..AreOptions::default()
    };
    let cert = certify_max_alpha(&sys, 2.0, 0.01, &opts).unwrap();
    assert!((cert.alpha_max - 1.0).abs() <= 0.02, "{}", cert.alpha_max);
    let p = cert.gain.p[(0, 0)];
    let a = cert.alpha_max;
    let root = (-(a + 1.0) - ((a + 1.0).powi(2) - 4.0 * (a - 1.0)).sqrt()) / (2.0 * (a - 1.0));
    assert!((p - root).abs() <= 1e-6 * root, "{p} vs {root}");
}

#[test]
fn oracle_gap_is_first_order() {
    let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -0.5]]).unwrap();
    let col = |x: f64, y: f64| Matrix::from_rows(&[vec![x], vec![y]]).unwrap();
    let sys = StochasticDelaySystem::new(
        a,
        vec![
            Channel::new(col(0.0, 0.5), col(0.0, 0.2), 0.0),
            Channel::new(col(0.0, 1.0), col(0.1, 0.3), 0.125),
            Channel::new(col(0.2, 0.0), col(0.0, 0.1), 0.25),
        ],
    )
    .unwrap();
    let cost = CostSpec::identity(&sys, 1.0);
    let errs: Vec<f64> = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0]
        .iter()
        .map(|&dt| {
            let grid = TimeGrid::with_step(&sys, 1.0, dt).unwrap();
            let sol = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
            let aug = build_augmented(&sys, &cost, &grid).unwrap();
            let disc = solve_discrete_lq(&aug, grid.horizon_steps).unwrap();
            compare(&sol, &aug, &disc, &[1.0, -0.5]).unwrap().rel_error
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.4).contains(&ratio), "{errs:?}");
    }
}

#[test]
fn lyapunov_value_does_not_increase() {
    let sys = scalar_sys(0.5, &[(0.0, 0.0, 0.0), (1.0, 0.3, 0.25)]);
    let alpha = 1.0;
    let steady = solve_are(&sys, alpha, &AreOptions::default()).unwrap();
    let cfg = SimConfig::new(1.0 / 256.0, 4.0, 2000, 17, vec![1.0]);
    let checkpoints = [0, 256, 512, 768, 1024];
    let prof = lyapunov_profile(&sys, &steady, &cfg, &checkpoints).unwrap();
    assert_eq!(prof.len(), checkpoints.len());
    for w in prof.windows(2) {
        let slack = 3.0 * (w[0].stderr + w[1].stderr);
        assert!(w[1].mean <= w[0].mean + slack, "{prof:?}");
    }
    assert!(prof[4].mean < 0.5 * prof[0].mean, "{prof:?}");
}

#[test]
fn optimal_gain_beats_perturbed_gains() {
    // Same seed for every gain, so paths share their noise.
    let sys = scalar_sys(0.0, &[(0.0, 0.0, 0.0), (1.0, 0.5, 0.25)]);
    let cost = CostSpec::identity(&sys, 2.0);
    let grid = build_grid(&sys, 2.0, Some(1.0 / 128.0)).unwrap();
    let sol = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
    let mut cfg = SimConfig::new(grid.dt, 2.0, 4000, 3, vec![1.0]);
    cfg.cost = Some(cost);
    let run = |scale: f64| {
        let k = sol.k.iter().map(|k| k.scale(scale)).collect();
        let sched = GainSchedule::Nodes { dt: grid.dt, k };
        simulate_paths(&sys, &sched, &cfg).unwrap().cost_mean
    };
    let best = run(1.0);
    assert!(run(0.5) > best && run(1.5) > best);
    let predicted = sol.phat[0][(0, 0)];
    assert!(
        (best - predicted).abs() < 0.05 * predicted,
        "{best} vs {predicted}"
    );
}
