//! Builds the car-following error model, validates it, and round-trips a
//! hand-written model through JSON.

use nalgebra::DMatrix;
use pemadm::model::{validate_model, PemAdmModel, PerceptionMode, TransitionMatrix};
use pemadm::scenarios::{build_car_following, CarFollowingParams};

fn main() -> pemadm::Result<()> {
    let params = CarFollowingParams::default();
    let (model, x0) = build_car_following(&params)?;
    println!("car following: n = {}, modes = {}, x0 = {:?}", model.state_dim(), model.mode_count(), x0.as_slice());
    println!("stationary mode distribution: {:?}", model.transition.stationary_distribution().as_slice());
    println!("validation: {}", validate_model(&model));

    // A scalar plant that loses its measurement half the time.
    let scalar = PemAdmModel::new(
        DMatrix::from_element(1, 1, 1.05),
        DMatrix::from_element(1, 1, 1.0),
        vec![
            PerceptionMode::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 0.1), DMatrix::zeros(1, 1)),
            PerceptionMode::new(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, 0.1), DMatrix::zeros(1, 1)),
        ],
        TransitionMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]])?,
        0.0,
    )?;
    let json = scalar.to_json()?;
    println!("{json}");
    assert_eq!(PemAdmModel::from_json(&json)?, scalar);

    // Corrupt the chain: the report lists violations instead of failing.
    let mut broken = scalar;
    broken.transition = TransitionMatrix::new_unchecked(DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.5, 0.5]));
    println!("corrupted: {}", validate_model(&broken));
    Ok(())
}
