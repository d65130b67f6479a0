//! Monte Carlo ensemble of the car-following loop: RMSE profile, gap
//! statistics and the empirical cost against the guaranteed bound.

use nalgebra::DMatrix;
use pemadm::analysis::{cost_bound, guaranteed_cost_gamma};
use pemadm::model::close_loop;
use pemadm::scenarios::{build_car_following, physical_gap, reference_sogcc_controller, CarFollowingParams};
use pemadm::sim::{monte_carlo, MonteCarloConfig};

fn main() -> pemadm::Result<()> {
    let params = CarFollowingParams::default();
    let (model, x0) = build_car_following(&params)?;
    let k = reference_sogcc_controller();
    let q = DMatrix::from_diagonal_element(2, 2, 10.0);
    let r = DMatrix::identity(1, 1);
    let cfg = MonteCarloConfig {
        x0: x0.iter().copied().collect(),
        r0: 1,
        horizon: 3000,
        bias: params.bias.clone(),
        trials: 200,
        master_seed: 7,
        q: Some(q.clone()),
        r: Some(r.clone()),
        workers: None,
        keep_trajectories: false,
    };
    let summary = monte_carlo(&model, &k, &cfg)?;
    for step in [0, 100, 500, 1000, 2000, 3000] {
        println!(
            "k = {step:>4}  rmse = {:>9.5}  gap = {:>7.3} ± {:.3} m",
            summary.rmse[step],
            physical_gap(summary.x_mean[step][0], params.delta_d),
            summary.x_std[step][0]
        );
    }

    let cl = close_loop(&model, &k)?;
    let cert = guaranteed_cost_gamma(&cl, &k, &model, &q, &r)?;
    let bound = cost_bound(&cert, &x0, cfg.r0, cfg.horizon, &cfg.bias, model.noise_dim())?;
    println!("mean cost {:.1} <= bound {bound:.1}: {}", summary.mean_cost(), summary.mean_cost() <= bound);
    Ok(())
}
