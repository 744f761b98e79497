mod common;

use graphmoe::flow::FlowShape;

use common::{flow_density_mass, flow_logdet_fd_error, flow_round_trip_error, log_abs_det};

#[test]
fn determinant_helper_matches_closed_form() {
    let a = vec![vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 4.0]];
    assert!((log_abs_det(a) - 18f64.ln()).abs() < 1e-12);
    assert!((log_abs_det(vec![vec![0.0, -2.0], vec![3.0, 0.0]]) - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    for seed in 0..10 {
        let err = flow_logdet_fd_error(seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    for seed in 0..5 {
        let mass = flow_density_mass(seed);
        assert!((mass - 1.0).abs() < 1e-3, "seed {seed}: {mass}");
    }
}

#[test]
fn round_trip_at_window_width() {
    let shape = FlowShape { dim: 60, cond_dim: 8, blocks: 2, hidden: 16, scale_clamp: 5.0 };
    for seed in 0..5 {
        let err = flow_round_trip_error(shape, seed, 20, 1.0);
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
    let odd = FlowShape { dim: 7, blocks: 3, ..shape };
    assert!(flow_round_trip_error(odd, 1, 20, 1.0) < 1e-8);
}

#[test]
fn round_trip_survives_saturated_scales() {
    // log-scales near the clamp compound across couplings; the error grows
    // with conditioning but stays small
    let shape = FlowShape { dim: 60, cond_dim: 8, blocks: 2, hidden: 16, scale_clamp: 5.0 };
    for seed in 0..5 {
        let err = flow_round_trip_error(shape, seed, 20, 3.0);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}
