use zoh_cbf::report::{sim_config, simulate};
use zoh_cbf::sim::closest_approach;
use zoh_cbf::verify::{forward_invariance, VerifyConfig};
use zoh_cbf::{min_h_over_trace, run, Plant, ScenarioConfig, SimConfig, SystemId, Variant};

#[test]
fn integrator_stays_safe_under_every_local_variant() {
    let plant = Plant::build(SystemId::Integrator, &ScenarioConfig::default()).unwrap();
    for v in [Variant::Phi1L, Variant::Phi2L, Variant::Phi3L] {
        let trace = run(&plant, &SimConfig::new(v, 0.1, 3.0)).unwrap();
        let top = min_h_over_trace(&trace);
        assert!(top <= 1e-9, "{v}: {top}");
    }
}

#[test]
fn unfiltered_unicycle_enters_the_obstacle() {
    let config = ScenarioConfig::default();
    let plant = Plant::build(SystemId::Unicycle, &config).unwrap();
    let mut cfg = sim_config(&plant, &config, Variant::Phi3L, 0.1, 0).unwrap();
    cfg.filter = false;
    cfg.duration = 10.0;
    let trace = run(&plant, &cfg).unwrap();
    assert!(closest_approach(&trace) > 0.0);
}

#[test]
fn input_is_bit_identical_within_each_period() {
    let plant = Plant::build(SystemId::DoubleIntegrator, &ScenarioConfig::default()).unwrap();
    let mut cfg = SimConfig::new(Variant::Phi3L, 0.1, 2.0);
    cfg.substeps = 20;
    let trace = run(&plant, &cfg).unwrap();
    for (k, p) in trace.periods.iter().enumerate() {
        for s in &trace.substeps[1 + k * 20..1 + (k + 1) * 20] {
            assert_eq!(s.u.as_slice(), p.u.as_slice());
        }
    }
}

#[test]
fn halving_the_substeps_barely_moves_the_final_state() {
    for id in [SystemId::DoubleIntegrator, SystemId::Spacecraft] {
        let plant = Plant::build(id, &ScenarioConfig::default()).unwrap();
        let final_with = |substeps: usize| {
            let mut cfg = SimConfig::new(Variant::Phi3L, 0.1, 1.0);
            cfg.substeps = substeps;
            run(&plant, &cfg).unwrap().final_state().clone()
        };
        let (fine, coarse) = (final_with(100), final_with(50));
        let rel = (&fine - &coarse).norm() / fine.norm().max(1.0);
        assert!(rel < 1e-6, "{id}: {rel}");
    }
}

#[test]
fn spacecraft_pointing_stays_on_the_unit_sphere() {
    let mut config = ScenarioConfig::default();
    config.spacecraft.duration = 20.0;
    let trace = simulate(SystemId::Spacecraft, &config, Variant::Phi3L, 0.1, 0).unwrap();
    for s in &trace.substeps {
        let norm = s.x.rows(0, 3).norm();
        assert!((norm - 1.0).abs() <= 1e-9, "t={} |p|={norm}", s.t);
    }
}

#[test]
fn same_seed_gives_identical_traces() {
    let config = ScenarioConfig::default();
    let csv = || {
        let mut buf = Vec::new();
        let mut cfg = config.clone();
        cfg.unicycle.duration = 3.0;
        simulate(SystemId::Unicycle, &cfg, Variant::Phi2L, 0.1, 3)
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        buf
    };
    assert_eq!(csv(), csv());
}

#[test]
fn random_starts_stay_safe_on_the_double_integrator() {
    let cfg = VerifyConfig {
        invariance_runs: 5,
        invariance_duration: 2.0,
        ..VerifyConfig::quick()
    };
    for v in Variant::ALL {
        let check = forward_invariance(SystemId::DoubleIntegrator, v, &cfg);
        assert!(check.passed, "{check}");
    }
}
