//! Mode-dependent static output feedback that stabilizes the car-following
//! loop in mean square, then a plant that cannot be stabilized.

use nalgebra::DMatrix;
use pemadm::model::{PemAdmModel, PerceptionMode, TransitionMatrix};
use pemadm::scenarios::{build_car_following, CarFollowingParams};
use pemadm::synthesis::synthesize_ssc;

fn main() -> pemadm::Result<()> {
    let (model, _) = build_car_following(&CarFollowingParams::default())?;
    let res = synthesize_ssc(&model)?;
    println!("status: {:?}", res.status);
    if let (Some(k), Some(check)) = (&res.controller, &res.closed_loop) {
        for (i, g) in k.gains.iter().enumerate() {
            println!("K{i} = {:.4?}", g.as_slice());
        }
        println!("closed loop: certified = {}, rho = {:.6}", check.stability.feasible, check.spectral_radius);
        println!("equality residual = {:.2e}, cond(Y) = {:.2e}", res.gain_residual, res.condition_numbers.iter().cloned().fold(0.0, f64::max));
    }

    let unstable = PemAdmModel::new(
        DMatrix::from_element(1, 1, 1.2),
        DMatrix::zeros(1, 1),
        vec![PerceptionMode::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1))],
        TransitionMatrix::identity(1),
        0.0,
    )?;
    let res = synthesize_ssc(&unstable)?;
    println!("uncontrollable plant: {:?} ({})", res.status, res.message);
    Ok(())
}
