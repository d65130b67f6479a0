//! Guaranteed-cost level of a fixed controller and the resulting bound on the
//! expected quadratic cost over a horizon.

use nalgebra::DMatrix;
use pemadm::analysis::{cost_bound, guaranteed_cost_gamma};
use pemadm::model::close_loop;
use pemadm::scenarios::{build_car_following, reference_sogcc_controller, reference_ssc_controller, CarFollowingParams};

fn main() -> pemadm::Result<()> {
    let params = CarFollowingParams::default();
    let (model, x0) = build_car_following(&params)?;
    let q = DMatrix::from_diagonal_element(2, 2, 10.0);
    let r = DMatrix::identity(1, 1);
    let horizon = 3000;

    for (name, k) in [("reference guaranteed-cost", reference_sogcc_controller()), ("reference stabilizing", reference_ssc_controller())] {
        let cl = close_loop(&model, &k)?;
        let cert = guaranteed_cost_gamma(&cl, &k, &model, &q, &r)?;
        if !cert.feasible {
            println!("{name}: no guaranteed cost ({:?})", cert.diagnostics.status);
            continue;
        }
        let bound = cost_bound(&cert, &x0, 1, horizon, &params.bias, model.noise_dim())?;
        println!("{name}: gamma = {:.6}, bound over {horizon} steps = {bound:.1}", cert.gamma);
    }

    // The bound doubles with the weights.
    let k = reference_sogcc_controller();
    let cl = close_loop(&model, &k)?;
    let base = guaranteed_cost_gamma(&cl, &k, &model, &q, &r)?;
    let doubled = guaranteed_cost_gamma(&cl, &k, &model, &(&q * 2.0), &(&r * 2.0))?;
    println!("mu ratio under (2Q, 2R): {:.4}", doubled.mu / base.mu);
    Ok(())
}
