mod common;

use nalgebra::{DMatrix, DVector};
use pemadm::model::{Controller, PemAdmModel, PerceptionMode, TransitionMatrix};
use pemadm::scenarios::reference_sogcc_controller;
use pemadm::sim::{monte_carlo, rollout, sample_markov_path, BiasSignal, MonteCarloConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(x0: Vec<f64>, horizon: usize, trials: usize, seed: u64, workers: Option<usize>) -> MonteCarloConfig {
    MonteCarloConfig {
        x0,
        r0: 1,
        horizon,
        bias: BiasSignal::Constant(vec![-1.0, -1.0]),
        trials,
        master_seed: seed,
        q: None,
        r: None,
        workers,
        keep_trajectories: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn summaries_do_not_depend_on_worker_count(seed in any::<u64>(), trials in 1usize..40, w in 2usize..6) {
        let (model, x0, _) = common::car_following();
        let k = reference_sogcc_controller();
        let a = monte_carlo(&model, &k, &config(x0.iter().copied().collect(), 200, trials, seed, Some(1))).unwrap();
        let b = monte_carlo(&model, &k, &config(x0.iter().copied().collect(), 200, trials, seed, Some(w))).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn markov_occupancy_matches_stationary_distribution() {
    let (model, _, _) = common::car_following();
    let t = &model.transition;
    let steps = 1_000_000;
    let path = sample_markov_path(t, 0, steps, &mut ChaCha8Rng::seed_from_u64(5));
    let occ0 = path.iter().filter(|&&r| r == 0).count() as f64 / path.len() as f64;
    let pi0 = t.stationary_distribution()[0];
    assert!((pi0 - 0.4).abs() < 1e-12);
    // Two-state chain: Var ≈ π₀π₁(1+λ)/((1−λ)T) with λ = 1 − p₀₁ − p₁₀.
    let lambda = 1.0 - t.prob(0, 1) - t.prob(1, 0);
    let sigma = (pi0 * (1.0 - pi0) * (1.0 + lambda) / ((1.0 - lambda) * steps as f64)).sqrt();
    assert!((occ0 - pi0).abs() < 3.0 * sigma, "occupancy {occ0}, 3σ {}", 3.0 * sigma);
}

#[test]
fn measurement_noise_is_standard_normal() {
    let z = DMatrix::zeros(2, 2);
    let model = PemAdmModel::new(
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 1),
        vec![PerceptionMode::new(z.clone(), DMatrix::identity(2, 2), z)],
        TransitionMatrix::identity(1),
        0.0,
    )
    .unwrap();
    let steps = 100_000;
    let traj =
        rollout(&model, &Controller::zeros(&model), &DVector::zeros(2), 0, steps - 1, &BiasSignal::Zero, 9).unwrap();
    let n = traj.y.len() as f64;
    let mean = traj.y.iter().fold(DVector::zeros(2), |acc, y| acc + y) / n;
    let cov = traj.y.iter().fold(DMatrix::zeros(2, 2), |acc, y| acc + (y - &mean) * (y - &mean).transpose()) / n;
    for i in 0..2 {
        assert!(mean[i].abs() < 3.0 / n.sqrt(), "mean {mean}");
        for j in 0..2 {
            let (target, sd) = if i == j { (1.0, (2.0 / n).sqrt()) } else { (0.0, (1.0 / n).sqrt()) };
            assert!((cov[(i, j)] - target).abs() < 3.0 * sd, "cov {cov}");
        }
    }
}

#[test]
fn noise_free_loop_converges() {
    let (mut model, x0, _) = common::car_following();
    for m in &mut model.modes {
        m.d.fill(0.0);
        m.e.fill(0.0);
    }
    let final_norm = |k: &Controller| {
        let traj = rollout(&model, k, &x0, 1, 3000, &BiasSignal::Zero, 17).unwrap();
        let norms: Vec<f64> = traj.x.iter().map(|x| x.norm()).collect();
        assert!(norms.iter().all(|&v| v <= norms[0] * 10.0));
        norms[3000]
    };
    let refined = common::refined_controller();
    let v = final_norm(&refined);
    assert!(v < 1e-6, "refined gains: final norm {v}");
    // The reference gains contract more slowly (second-moment radius 0.9947,
    // so roughly 0.9974 per step): about 6.4 · 0.9974³⁰⁰⁰ ≈ 3e-3.
    let v = final_norm(&reference_sogcc_controller());
    assert!(v < 1e-2, "reference gains: final norm {v}");
}

#[test]
fn certified_loop_is_bounded_in_mean_square() {
    let (model, x0, _) = common::car_following();
    let k = reference_sogcc_controller();
    let mut cfg = config(x0.iter().copied().collect(), 3000, 200, 23, None);
    cfg.keep_trajectories = true;
    let s = monte_carlo(&model, &k, &cfg).unwrap();
    let second_moment = |step: usize| {
        let v: Vec<f64> = s.trajectories.iter().map(|t| t.x[step].norm_squared()).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, (var / v.len() as f64).sqrt())
    };
    let (mid, sd_mid) = second_moment(1500);
    let (end, sd_end) = second_moment(3000);
    assert!(end <= mid + 3.0 * (sd_mid * sd_mid + sd_end * sd_end).sqrt(), "E|x|² {mid} -> {end}");
    assert!(end < second_moment(0).0);
}
