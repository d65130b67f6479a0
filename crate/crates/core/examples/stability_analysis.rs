//! Mean-square stability of the car-following loop under a few gain choices,
//! certified by the coupled Lyapunov inequalities and cross-checked against
//! the second-moment spectral radius.

use pemadm::analysis::{ms_spectral_radius, ms_stability_test};
use pemadm::model::{close_loop, Controller};
use pemadm::scenarios::{build_car_following, reference_sogcc_controller, reference_ssc_controller, CarFollowingParams};

fn main() -> pemadm::Result<()> {
    let (model, _) = build_car_following(&CarFollowingParams::default())?;
    let cases = [
        ("reference stabilizing", reference_ssc_controller()),
        ("reference guaranteed-cost", reference_sogcc_controller()),
        ("zero", Controller::zeros(&model)),
        ("too aggressive", Controller::from_rows(&[&[0.0, -250.0], &[-10.0, -250.0]])),
    ];
    for (name, k) in cases {
        let cl = close_loop(&model, &k)?;
        let cert = ms_stability_test(&cl);
        let rho = ms_spectral_radius(&cl);
        let verdict = match (cert.feasible, cert.inconclusive) {
            (true, _) => "stable",
            (false, true) => "inconclusive",
            (false, false) => "not certified",
        };
        println!("{name:>26}: {verdict:<13} rho = {rho:.6}  margin = {:.3e}", cert.margin);
        if cert.feasible {
            for (i, p) in cert.p.iter().enumerate() {
                println!("{:>28}P{i} = {:.4?}", "", p.as_slice());
            }
        }
    }
    Ok(())
}
