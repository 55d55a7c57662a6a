use proptest::prelude::*;
use zoh_cbf::model::InputSet;
use zoh_cbf::sup::maximize;
use zoh_cbf::{hdot, Plant, ScenarioConfig, SupConfig, SystemId, Vector};

const SYSTEMS: [SystemId; 4] = [
    SystemId::Unicycle,
    SystemId::Spacecraft,
    SystemId::DoubleIntegrator,
    SystemId::Integrator,
];

fn states(id: SystemId, count: usize) -> (Plant, Vec<Vector>) {
    let plant = Plant::build(id, &ScenarioConfig::default()).unwrap();
    let xs = plant.random_safe_states(count, 11, 1e-3);
    (plant, xs)
}

fn input_at(input: &InputSet, k: usize) -> Vector {
    let m = input.dim();
    let t: Vec<f64> = (0..m)
        .map(|j| ((k * 7 + j * 3) % 11) as f64 / 10.0)
        .collect();
    input.from_unit(&t)
}

#[test]
fn hdot_matches_a_forward_difference() {
    let eps = 1e-6;
    for id in SYSTEMS {
        let (plant, xs) = states(id, 40);
        for (k, x) in xs.iter().enumerate() {
            let u = input_at(&plant.input_set, k);
            for b in &plant.barriers {
                if b.near_nondifferentiable(x, 1e-3) {
                    continue;
                }
                let v = plant.model.velocity(x, &u);
                let mut y = x + &v * eps;
                plant.model.project(&mut y);
                let fd = (b.value(&y) - b.value(x)) / eps;
                let exact = hdot(plant.model.as_ref(), b.as_ref(), x, &u).unwrap();
                let scale = 1.0 + exact.abs().max(b.gradient(x).norm() * v.norm());
                assert!(
                    (fd - exact).abs() <= 1e-4 * scale,
                    "{id}: x={x:?} fd={fd} hdot={exact}"
                );
            }
        }
    }
}

#[test]
fn psi_is_the_rate_of_hdot_along_a_held_input() {
    let eps = 1e-4;
    for id in SYSTEMS {
        let (plant, xs) = states(id, 30);
        let model = plant.model.as_ref();
        for (k, x) in xs.iter().enumerate() {
            let u = input_at(&plant.input_set, k);
            for b in &plant.barriers {
                if b.near_nondifferentiable(x, 1e-2) {
                    continue;
                }
                let along = |tau: f64| {
                    let y = model.flow(x, &u, tau, 200);
                    hdot(model, b.as_ref(), &y, &u).unwrap()
                };
                // Second-order one-sided difference over dense flows.
                let rate = (-3.0 * along(0.0) + 4.0 * along(eps) - along(2.0 * eps)) / (2.0 * eps);
                let psi = b.psi(model, x, &u);
                assert!(
                    (psi - rate).abs() <= 1e-4 * (1.0 + psi.abs()),
                    "{id}: x={x:?} psi={psi} rate={rate}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn u_max_is_the_largest_corner_norm(
        bounds in prop::collection::vec((-3.0f64..3.0, 0.0f64..3.0), 1..=4),
    ) {
        let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let hi: Vec<f64> = bounds.iter().map(|b| b.0 + b.1).collect();
        let input = InputSet::new(lo.clone(), hi.clone()).unwrap();
        let m = lo.len();
        let brute = (0..1usize << m)
            .map(|mask| {
                (0..m)
                    .map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] })
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        prop_assert!((input.u_max() - brute).abs() <= 1e-12 * (1.0 + brute));
    }

    #[test]
    fn doubling_the_budget_never_lowers_the_estimate(
        c in prop::collection::vec(0.0f64..1.0, 2),
        freq in 1.0f64..20.0,
        seed in 0u64..1000,
        base in 3u32..8,
    ) {
        let f = |t: &[f64]| {
            -(t[0] - c[0]).powi(2) - (t[1] - c[1]).powi(2) + 0.1 * (freq * t[0]).sin()
        };
        let mut last = f64::NEG_INFINITY;
        for n in [1usize << base, 1 << (base + 1), 1 << (base + 2)] {
            let cfg = SupConfig::default().with_samples(n).with_seed(seed);
            let est = maximize(2, &cfg, f).unwrap();
            prop_assert!(est.raw >= last, "n={} {} < {}", n, est.raw, last);
            last = est.raw;
        }
    }
}
