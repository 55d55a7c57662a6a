use proptest::prelude::*;
use zoh_cbf::integrate::rk4;
use zoh_cbf::model::Dynamics;
use zoh_cbf::systems::unicycle::{arc, reach_exact_unicycle, Unicycle};
use zoh_cbf::verify::{reach_bound, VerifyConfig};
use zoh_cbf::{reach_ball, SupConfig, SystemId, Vector};

#[test]
fn flows_stay_inside_the_speed_bound_ball() {
    let cfg = VerifyConfig {
        reach_pairs: 60,
        ..VerifyConfig::quick()
    };
    for id in [
        SystemId::DoubleIntegrator,
        SystemId::Unicycle,
        SystemId::Spacecraft,
    ] {
        for horizon in [0.01, 0.1] {
            let check = reach_bound(id, &cfg, horizon);
            assert!(check.passed, "{check}");
        }
    }
}

#[test]
fn ball_contains_the_exact_unicycle_cover() {
    let model = Unicycle::new();
    let input = model.input_set().clone();
    let sup = SupConfig::default().with_samples(512);
    for (i, horizon) in [0.01, 0.1, 0.5].into_iter().enumerate() {
        let x_k = Vector::from_vec(vec![3.0 * i as f64, -4.0, 0.3 + i as f64]);
        let ball = reach_ball(&model, &input, &x_k, horizon, 1.0, &sup).unwrap();
        let radius = ball.radius().unwrap();
        for y in reach_exact_unicycle(&x_k, horizon, 9).cover(&model, &input) {
            assert!((&y - &x_k).norm() <= radius + 1e-12, "T={horizon}: {y:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_arc_matches_rk4(
        x in prop::collection::vec(-10.0f64..10.0, 3),
        v in 0.0f64..5.0,
        w in -0.25f64..0.25,
        tau in 0.0f64..0.1,
    ) {
        let model = Unicycle::new();
        let x = Vector::from_vec(x);
        let u = Vector::from_vec(vec![v, w]);
        let exact = arc(&x, &u, tau);
        let dense = rk4(|z| model.velocity(z, &u), &x, tau, 200);
        prop_assert!((exact - dense).amax() <= 1e-8);
    }
}
