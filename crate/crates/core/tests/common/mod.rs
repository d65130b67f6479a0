#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pemadm::analysis::ms_spectral_radius;
use pemadm::model::{ClosedLoopModel, PemAdmModel, TransitionMatrix};
use pemadm::scenarios::{build_car_following, CarFollowingParams};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn car_following() -> (PemAdmModel, DVector<f64>, CarFollowingParams) {
    let params = CarFollowingParams::default();
    let (model, x0) = build_car_following(&params).unwrap();
    (model, x0, params)
}

/// `Q = diag(10, 10)`, `R = 1`.
pub fn weights() -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_diagonal_element(2, 2, 10.0), DMatrix::identity(1, 1))
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random row-stochastic matrix, occasionally with exact zeros.
pub fn random_transition<R: Rng>(rng: &mut R, n: usize) -> TransitionMatrix {
    let mut p = DMatrix::from_fn(n, n, |_, _| if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>() + 1e-3 });
    for i in 0..n {
        if p.row(i).sum() == 0.0 {
            p[(i, i)] = 1.0;
        }
        let s = p.row(i).sum();
        p.row_mut(i).scale_mut(1.0 / s);
    }
    TransitionMatrix::new(p).unwrap()
}

/// Noise-free closed loop with `n ≤ 3`, `N ≤ 3` and second-moment spectral
/// radius scaled to `target`. Returns the loop and its radius.
pub fn random_closed_loop<R: Rng>(rng: &mut R, target: f64) -> (ClosedLoopModel, f64) {
    let n = rng.random_range(1..=3);
    let nm = rng.random_range(1..=3);
    let transition = random_transition(rng, nm);
    let a: Vec<DMatrix<f64>> = (0..nm).map(|_| gaussian_matrix(rng, n, n)).collect();
    let raw = ClosedLoopModel::from_state_matrices(a.clone(), transition.clone()).unwrap();
    let rho = ms_spectral_radius(&raw);
    // The operator is quadratic in A.
    let s = (target / rho).sqrt();
    let cl = ClosedLoopModel::from_state_matrices(a.into_iter().map(|m| m * s).collect(), transition).unwrap();
    let rho = ms_spectral_radius(&cl);
    (cl, rho)
}

/// Guaranteed-cost gains from the descent started at the stabilizing
/// synthesis, with default options.
pub fn refined_controller() -> pemadm::model::Controller {
    use pemadm::synthesis::{refine_guaranteed_cost, synthesize_ssc, RefineOptions, SynthesisStatus};
    let (model, _, _) = car_following();
    let (q, r) = weights();
    let initial = synthesize_ssc(&model).unwrap().controller.expect("stabilizing gains");
    let refined = refine_guaranteed_cost(&model, &q, &r, &initial, &RefineOptions::default()).unwrap();
    assert_eq!(refined.status, SynthesisStatus::Feasible);
    refined.controller
}
