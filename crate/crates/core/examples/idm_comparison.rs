//! The intelligent driver model against a linear controller on the same
//! perturbed perception channel, with collision metrics.

use pemadm::scenarios::{
    build_car_following, collision_metrics, reference_sogcc_controller, CarFollowingParams, IdmParams, IdmPolicy,
    MisdetectionHandling,
};
use pemadm::sim::{monte_carlo, MonteCarloConfig, Policy};

fn main() -> pemadm::Result<()> {
    let params = CarFollowingParams::default();
    let (model, x0) = build_car_following(&params)?;
    let cfg = MonteCarloConfig {
        x0: x0.iter().copied().collect(),
        r0: 1,
        horizon: 3000,
        bias: params.bias.clone(),
        trials: 200,
        master_seed: 11,
        q: None,
        r: None,
        workers: None,
        keep_trajectories: true,
    };
    let idm = IdmPolicy::new(IdmParams::default(), &params)?;
    let free_road = IdmPolicy::new(IdmParams { misdetection: MisdetectionHandling::FreeRoad, ..IdmParams::default() }, &params)?;
    let linear = reference_sogcc_controller();
    let policies: [(&str, &dyn Policy); 3] = [("idm", &idm), ("idm, free road on misdetection", &free_road), ("linear", &linear)];
    for (name, policy) in policies {
        let s = monte_carlo(&model, policy, &cfg)?;
        let c = collision_metrics(&s.trajectories, &params);
        let min_gap = c.min_gap.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "{name:>31}: final rmse {:>8.4}, collisions {}/{}, smallest gap {min_gap:.3} m",
            s.rmse.last().unwrap(),
            c.count,
            cfg.trials
        );
    }
    Ok(())
}
