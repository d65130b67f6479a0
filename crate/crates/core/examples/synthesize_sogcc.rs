//! Guaranteed-cost synthesis: the fixed-λ LMI route on a small instance and
//! on the car-following model, and the descent route that starts from
//! stabilizing gains.

use nalgebra::DMatrix;
use pemadm::model::{PemAdmModel, PerceptionMode, TransitionMatrix};
use pemadm::scenarios::{build_car_following, CarFollowingParams};
use pemadm::synthesis::{refine_guaranteed_cost, synthesize_sogcc, synthesize_ssc, RefineOptions, DEFAULT_LAMBDA};

fn main() -> pemadm::Result<()> {
    // No uncertainty channel: γ is driven to the strictness floor. λ must stay
    // below 1 here, since S ≻ λI and the cost block needs S ≺ Q⁻¹ = I.
    let i1 = DMatrix::identity(1, 1);
    let z1 = DMatrix::zeros(1, 1);
    let trivial = PemAdmModel::new(
        z1.clone(),
        i1.clone(),
        vec![PerceptionMode::new(i1.clone(), z1.clone(), z1)],
        TransitionMatrix::identity(1),
        0.0,
    )?;
    let res = synthesize_sogcc(&trivial, &i1, &i1, 0.5)?;
    println!("trivial: {:?}, gamma = {:?}", res.status, res.gamma);

    let (model, _) = build_car_following(&CarFollowingParams::default())?;
    let q = DMatrix::from_diagonal_element(2, 2, 10.0);
    let r = DMatrix::identity(1, 1);
    let res = synthesize_sogcc(&model, &q, &r, DEFAULT_LAMBDA)?;
    println!("car following, lambda = {DEFAULT_LAMBDA:e}: {:?} ({})", res.status, res.message);

    let ssc = synthesize_ssc(&model)?;
    let Some(initial) = ssc.controller else {
        println!("no stabilizing gains to start from");
        return Ok(());
    };
    let refined = refine_guaranteed_cost(&model, &q, &r, &initial, &RefineOptions::default())?;
    println!("descent: {:?} after {} accepted steps, {}", refined.status, refined.history.len() - 1, refined.message);
    println!("gamma: {:.4} -> {:.6}", refined.history[0].sqrt(), refined.gamma);
    for (i, g) in refined.controller.gains.iter().enumerate() {
        println!("K{i} = {:.4?}", g.as_slice());
    }
    Ok(())
}
