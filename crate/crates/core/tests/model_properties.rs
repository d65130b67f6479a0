mod common;

use nalgebra::DMatrix;
use pemadm::model::{close_loop, validate_model, Controller, PemAdmModel, PerceptionMode, TransitionMatrix, ViolationCode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
enum Corruption {
    None,
    RowSum,
    NegativeEntry,
    ModeCount,
    CColumns,
    DRows,
    NonSquareE,
    NegativeBias,
    NonFinite,
    NonSquareA,
}

fn random_model(seed: u64, n1: usize, n2: usize, n3: usize, nw: usize, nm: usize) -> PemAdmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = (0..nm)
        .map(|_| {
            PerceptionMode::new(
                common::gaussian_matrix(&mut rng, n3, n1),
                common::gaussian_matrix(&mut rng, n3, nw),
                common::gaussian_matrix(&mut rng, n3, n3),
            )
        })
        .collect();
    PemAdmModel {
        a: common::gaussian_matrix(&mut rng, n1, n1),
        b: common::gaussian_matrix(&mut rng, n1, n2),
        modes,
        transition: common::random_transition(&mut rng, nm),
        bias_bound: 1.0,
    }
}

fn corrupt(m: &mut PemAdmModel, c: Corruption) -> Option<ViolationCode> {
    let nm = m.mode_count();
    let t = m.transition.matrix().clone();
    match c {
        Corruption::None => return None,
        Corruption::RowSum => {
            let mut t = t;
            t[(0, 0)] += 0.1;
            if t[(0, 0)] > 1.0 {
                t[(0, 0)] -= 0.2;
            }
            m.transition = TransitionMatrix::new_unchecked(t);
            return Some(ViolationCode::RowNotStochastic);
        }
        Corruption::NegativeEntry => {
            let mut t = t;
            t[(0, 0)] -= 1.5;
            m.transition = TransitionMatrix::new_unchecked(t);
            return Some(ViolationCode::EntryOutOfRange);
        }
        Corruption::ModeCount => {
            m.transition = TransitionMatrix::identity(nm + 1);
            return Some(ViolationCode::ModeCountMismatch);
        }
        Corruption::CColumns => {
            let c = &mut m.modes[nm - 1].c;
            *c = DMatrix::zeros(c.nrows(), c.ncols() + 1);
        }
        Corruption::DRows => {
            let d = &mut m.modes[0].d;
            *d = DMatrix::zeros(d.nrows() + 1, d.ncols());
        }
        Corruption::NonSquareE => {
            let e = &mut m.modes[0].e;
            *e = DMatrix::zeros(e.nrows(), e.ncols() + 1);
        }
        Corruption::NegativeBias => {
            m.bias_bound = -0.5;
            return Some(ViolationCode::NegativeBiasBound);
        }
        Corruption::NonFinite => {
            m.b[(0, 0)] = f64::NAN;
            return Some(ViolationCode::NonFinite);
        }
        Corruption::NonSquareA => {
            m.a = DMatrix::zeros(m.a.nrows(), m.a.ncols() + 1);
            return Some(ViolationCode::NotSquare);
        }
    }
    Some(ViolationCode::DimensionMismatch)
}

fn corruption() -> impl Strategy<Value = Corruption> {
    prop_oneof![
        3 => Just(Corruption::None),
        1 => Just(Corruption::RowSum),
        1 => Just(Corruption::NegativeEntry),
        1 => Just(Corruption::ModeCount),
        1 => Just(Corruption::CColumns),
        1 => Just(Corruption::DRows),
        1 => Just(Corruption::NonSquareE),
        1 => Just(Corruption::NegativeBias),
        1 => Just(Corruption::NonFinite),
        1 => Just(Corruption::NonSquareA),
    ]
}

proptest! {
    #[test]
    fn validate_accepts_iff_invariants_hold(
        seed in any::<u64>(), n1 in 1usize..4, n2 in 1usize..3, n3 in 1usize..4, nw in 1usize..4, nm in 1usize..4,
        c in corruption(),
    ) {
        let mut m = random_model(seed, n1, n2, n3, nw, nm);
        let expected = corrupt(&mut m, c);
        let report = validate_model(&m);
        match expected {
            None => prop_assert!(report.is_valid(), "{report}"),
            Some(code) => prop_assert!(report.has(code), "{c:?}: {report}"),
        }
    }

    #[test]
    fn close_loop_is_the_defining_formula(
        seed in any::<u64>(), n1 in 1usize..4, n2 in 1usize..3, n3 in 1usize..4, nw in 1usize..4, nm in 1usize..4,
    ) {
        let m = random_model(seed, n1, n2, n3, nw, nm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let k = Controller::new((0..nm).map(|_| common::gaussian_matrix(&mut rng, n2, n3)).collect());
        let cl = close_loop(&m, &k).unwrap();
        let again = close_loop(&m, &k).unwrap();
        prop_assert_eq!(&cl, &again);
        for (i, mode) in cl.modes.iter().enumerate() {
            let bk = &m.b * &k.gains[i];
            prop_assert_eq!(&mode.a - (&m.a + &bk * &m.modes[i].c), DMatrix::zeros(n1, n1));
            prop_assert_eq!(&mode.d, &(&bk * &m.modes[i].d));
            prop_assert_eq!(&mode.e, &(&bk * &m.modes[i].e));
        }
        prop_assert_eq!(&cl.transition, &m.transition);
        prop_assert_eq!(cl.bias_bound, m.bias_bound);
    }

    #[test]
    fn close_loop_rejects_mismatched_gains(seed in any::<u64>(), extra in 1usize..3) {
        let m = random_model(seed, 2, 1, 2, 2, 2);
        let k = Controller::new(vec![DMatrix::zeros(1, 2 + extra), DMatrix::zeros(1, 2)]);
        prop_assert!(close_loop(&m, &k).is_err());
        let k = Controller::new(vec![DMatrix::zeros(1, 2)]);
        prop_assert!(close_loop(&m, &k).is_err());
    }
}

#[test]
fn car_following_examples() {
    let (model, _, _) = common::car_following();
    assert!(validate_model(&model).is_valid());
    let k = Controller::from_rows(&[&[0.0, -101.0], &[-0.45, -100.0]]);
    let cl = close_loop(&model, &k).unwrap();
    let expect0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.0, -0.01]);
    let expect1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.01, -0.0045, 0.0]);
    assert!((&cl.modes[0].a - expect0).amax() < 1e-15);
    assert!((&cl.modes[1].a - expect1).amax() < 1e-15);
}

#[test]
fn model_json_rejects_missing_transition() {
    let (model, _, _) = common::car_following();
    let mut v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("transition");
    assert!(PemAdmModel::from_json(&v.to_string()).is_err());
}
