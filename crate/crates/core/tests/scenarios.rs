mod common;

use nalgebra::DVector;
use pemadm::model::validate_model;
use pemadm::scenarios::{
    build_car_following, collision_metrics, physical_gap, reference_sogcc_controller, CarFollowingParams, IdmParams,
    IdmPolicy,
};
use pemadm::sim::{monte_carlo, rollout, BiasSignal, MonteCarloConfig, Policy, Trajectory};
use proptest::prelude::*;

fn params_strategy() -> impl Strategy<Value = CarFollowingParams> {
    (0.001f64..0.5, -20.0f64..0.0, prop::array::uniform8(0.0f64..1.0), 0.0f64..=1.0, 0.0f64..=1.0, prop::array::uniform4(-20.0f64..20.0))
        .prop_map(|(h, delta_d, g, p00, p10, init)| CarFollowingParams {
            h,
            delta_d,
            d00: g[0],
            d01: g[1],
            d10: g[2],
            d11: g[3],
            e00: g[4],
            e01: g[5],
            e10: g[6],
            e11: g[7],
            p00,
            p01: 1.0 - p00,
            p10,
            p11: 1.0 - p10,
            ego_init: [init[0], init[1]],
            leader_init: [init[2], init[3]],
            bias: BiasSignal::Constant(vec![-1.0, -1.0]),
            bias_bound: None,
        })
}

fn trajectory_from_x1(x1: &[f64]) -> Trajectory {
    Trajectory {
        x: x1.iter().map(|&v| DVector::from_vec(vec![v, 0.0])).collect(),
        r: vec![1; x1.len()],
        u: vec![DVector::zeros(1); x1.len()],
        y: vec![DVector::zeros(2); x1.len()],
        seed: 0,
        diverged_at: None,
        flagged_steps: 0,
    }
}

proptest! {
    #[test]
    fn builder_output_is_valid(p in params_strategy()) {
        let (model, x0) = build_car_following(&p).unwrap();
        prop_assert!(validate_model(&model).is_valid());
        prop_assert_eq!(x0[0], p.ego_init[0] - p.leader_init[0] - p.delta_d);
        prop_assert_eq!(x0[1], p.ego_init[1] - p.leader_init[1]);
    }

    #[test]
    fn collision_flag_iff_gap_closes(x1 in prop::collection::vec(-15.0f64..10.0, 1..50), delta_d in -10.0f64..-1.0) {
        let params = CarFollowingParams { delta_d, ..CarFollowingParams::default() };
        let m = collision_metrics(&[trajectory_from_x1(&x1)], &params);
        let min_gap = x1.iter().map(|&v| physical_gap(v, delta_d)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(m.min_gap[0], min_gap);
        prop_assert_eq!(m.collided[0], min_gap <= 0.0);
    }
}

#[test]
fn noise_free_loop_matches_two_vehicle_simulation() {
    let mut params = CarFollowingParams::default();
    for g in [&mut params.d00, &mut params.d01, &mut params.d10, &mut params.d11] {
        *g = 0.0;
    }
    params.bias = BiasSignal::Zero;
    (params.p10, params.p11) = (0.0, 1.0);
    let (model, x0) = build_car_following(&params).unwrap();
    let k = reference_sogcc_controller();
    let horizon = 2000;
    let traj = rollout(&model, &k, &x0, 1, horizon, &BiasSignal::Zero, 1).unwrap();
    assert!(traj.r.iter().all(|&r| r == 1));

    let h = params.h;
    let [mut pe, mut ve] = params.ego_init;
    let [mut pl, vl] = params.leader_init;
    for k_step in 0..=horizon {
        let e = [pe - pl - params.delta_d, ve - vl];
        let x = &traj.x[k_step];
        assert!((x[0] - e[0]).abs() < 1e-12 && (x[1] - e[1]).abs() < 1e-12, "step {k_step}: {x} vs {e:?}");
        let a = k.gains[1][(0, 0)] * e[0] + k.gains[1][(0, 1)] * e[1];
        (pe, ve) = (pe + h * ve, ve + h * a);
        pl += h * vl;
    }
}

#[test]
fn zero_error_trajectory_keeps_desired_gap() {
    let params = CarFollowingParams::default();
    let m = collision_metrics(&[trajectory_from_x1(&[0.0; 10])], &params);
    assert_eq!(m.min_gap[0], 5.0);
    assert_eq!(m.count, 0);
    let m = collision_metrics(&[trajectory_from_x1(&[0.0, 2.0, 5.0])], &params);
    assert_eq!(m.count, 1);
}

#[test]
fn idm_sees_the_same_measurement_channel() {
    let params = CarFollowingParams::default();
    let idm = IdmPolicy::new(IdmParams::default(), &params).unwrap();
    // In the misdetection mode the position channel reads zero, so the
    // perceived gap equals the desired offset.
    let y = DVector::from_vec(vec![0.0, 0.0]);
    let a = idm.act(0, &y)[0];
    let p = &idm.params;
    let v = params.leader_speed();
    let expected = p.clamp(p.acceleration(v, 0.0, -params.delta_d));
    assert!((a - expected).abs() < 1e-12);
}

#[test]
fn idm_ensemble_reports_collision_metrics() {
    let params = CarFollowingParams::default();
    let (model, x0) = build_car_following(&params).unwrap();
    let idm = IdmPolicy::new(IdmParams::default(), &params).unwrap();
    let cfg = MonteCarloConfig {
        x0: x0.iter().copied().collect(),
        r0: 1,
        horizon: 3000,
        bias: params.bias.clone(),
        trials: 20,
        master_seed: 4,
        q: None,
        r: None,
        workers: None,
        keep_trajectories: true,
    };
    let s = monte_carlo(&model, &idm, &cfg).unwrap();
    let m = collision_metrics(&s.trajectories, &params);
    assert_eq!(m.min_gap.len(), 20);
    assert_eq!(m.count, m.collided.iter().filter(|&&c| c).count());
    assert!((m.fraction - m.count as f64 / 20.0).abs() < 1e-15);
}
