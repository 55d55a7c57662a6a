use std::sync::Arc;

use approx::assert_relative_eq;
use zoh_cbf::margins::{nu0_global, phi1, phi3, Needs, L2_LIMIT};
use zoh_cbf::verify::{half_nu1_bound, ordering, VerifyConfig};
use zoh_cbf::{
    lie_derivatives, local_constants, physical_margin_inf, solve_filter, ClassK, Constraint, Gain,
    MarginFunction, Plant, QpProblem, QpStatus, ScenarioConfig, SupConfig, SystemId, Variant,
    Vector,
};

fn small() -> VerifyConfig {
    VerifyConfig {
        states: 12,
        horizons: vec![0.001, 0.1],
        local_samples: 96,
        ..VerifyConfig::quick()
    }
}

#[test]
fn local_margins_are_ordered_below_the_global_ones() {
    let cfg = small();
    for id in [SystemId::Unicycle, SystemId::DoubleIntegrator] {
        let check = ordering(id, &cfg, 0.1);
        assert!(check.passed, "{check}");
    }
}

#[test]
fn quadratic_margin_is_at_most_half_the_lipschitz_one() {
    let cfg = small();
    for id in [SystemId::Unicycle, SystemId::DoubleIntegrator] {
        let check = half_nu1_bound(id, &cfg);
        assert!(check.passed, "{check}");
    }
}

#[test]
fn exponential_margin_is_continuous_as_l2_vanishes() {
    for (t, l1, delta) in [(0.1, 3.0, 2.0), (0.01, 570.0, 5.0), (0.001, 1.0, 1.0)] {
        let limit = nu0_global(t, l1, 0.0, delta);
        let near = nu0_global(t, l1, 1e-8, delta);
        assert_relative_eq!(limit, l1 * delta * t);
        assert!(
            (near - limit).abs() <= 1e-9 * (1.0 + limit),
            "{near} vs {limit}"
        );
        // Both sides of the branch switch agree.
        let below = nu0_global(t, l1, 0.999 * L2_LIMIT, delta);
        let above = nu0_global(t, l1, 1.001 * L2_LIMIT, delta);
        assert_relative_eq!(below, above, max_relative = 1e-12);
    }
}

#[test]
fn margin_formulas_on_hand_values() {
    let id = ClassK::identity();
    assert_relative_eq!(phi1(-2.0, 0.1, 3.0, 4.0, &id).unwrap(), 2.0 - 1.2);
    assert_relative_eq!(phi3(-2.0, 0.1, 4.0, 1.0).unwrap(), 20.0 - 0.2);
    // Negative η is clipped to zero.
    assert_relative_eq!(phi3(-2.0, 0.1, -4.0, 0.5).unwrap(), 10.0);
    assert!(phi3(-2.0, 0.1, 1.0, 1.5).is_err());
}

#[test]
fn quadratic_physical_margin_scales_with_the_square_of_t() {
    let plant = Plant::build(SystemId::DoubleIntegrator, &ScenarioConfig::default()).unwrap();
    let sup = SupConfig::default().with_samples(512);
    let at = |t: f64| {
        let g = zoh_cbf::report::plant_constants(&plant, t, &ClassK::identity(), &sup).unwrap();
        physical_margin_inf(&g, Variant::Phi3G).unwrap().value
    };
    let (a, b) = (at(0.1), at(0.01));
    assert!(a > 0.0);
    assert_relative_eq!(a / b, 100.0, max_relative = 1e-6);
}

/// A constant input meeting `ḣ ≤ φ₁ˡ` at `x_k` keeps `ḣ ≤ α(-h)` along the
/// whole held period.
#[test]
fn lipschitz_margin_keeps_the_continuous_condition_over_the_period() {
    let alpha = ClassK::identity();
    let horizon = 0.1;
    for id in [SystemId::DoubleIntegrator, SystemId::Unicycle] {
        let plant = Plant::build(id, &ScenarioConfig::default()).unwrap();
        let setup = plant.setup(0, &SupConfig::default().with_samples(256));
        let model = plant.model.as_ref();
        let barrier = plant.barriers[0].as_ref();
        let needs = Needs {
            lipschitz: true,
            upsilon: false,
            psi: false,
        };
        let mut judged = 0;
        for (k, x) in plant.random_safe_states(12, 5, 0.0).iter().enumerate() {
            let c = local_constants(&setup, x, horizon, &alpha, needs, None).unwrap();
            let h0 = barrier.value(x);
            let phi = alpha.eval(-h0) - c.nu1().unwrap();
            let (lfh, lgh) = lie_derivatives(model, barrier, x).unwrap();
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let problem = QpProblem {
                u_nom: plant.input_set.hi() * sign,
                constraints: vec![Constraint {
                    a: lgh,
                    b: phi - lfh,
                }],
                input_set: plant.input_set.clone(),
            };
            let sol = solve_filter(&problem).unwrap();
            if sol.status != QpStatus::Optimal {
                continue;
            }
            judged += 1;
            for i in 0..=50 {
                let tau = horizon * i as f64 / 50.0;
                let y = model.flow(x, &sol.u, tau, 100);
                if barrier.near_nondifferentiable(&y, 1e-6) {
                    continue;
                }
                let (lf, lg) = lie_derivatives(model, barrier, &y).unwrap();
                let slack = lf + lg.dot(&sol.u) - alpha.eval(-barrier.value(&y));
                assert!(slack <= 1e-9, "{id}: x={x:?} tau={tau} slack={slack}");
            }
        }
        assert!(judged > 0, "{id}: every problem was infeasible");
    }
}

#[test]
fn global_variants_need_constants_at_the_same_horizon() {
    let plant = Plant::build(SystemId::DoubleIntegrator, &ScenarioConfig::default()).unwrap();
    let sup = SupConfig::default().with_samples(128);
    let setup = plant.setup(0, &sup);
    let g = zoh_cbf::report::plant_constants(&plant, 0.1, &ClassK::identity(), &sup).unwrap();
    let f = MarginFunction::new(Variant::Phi1G, Gain::Alpha(ClassK::identity())).unwrap();
    let x = Vector::from_vec(vec![-1.0, 0.0]);
    assert!(f.phi(&setup, 0.1, &x).is_err());
    let f = f.with_globals(Arc::new(g));
    assert!(f.phi(&setup, 0.1, &x).is_ok());
    assert!(f.phi(&setup, 0.05, &x).is_err());
}
