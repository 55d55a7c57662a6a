use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use zoh_cbf::margins::Needs;
use zoh_cbf::sup::maximize;
use zoh_cbf::{global_constants, local_constants, solve_filter, ClassK, SupConfig, SystemId};
use zoh_cbf_bench::{filter_problem, plant_and_state};

fn qp(c: &mut Criterion) {
    let problem = filter_problem();
    c.bench_function("filter qp, 2 inputs, 3 rows", |b| {
        b.iter(|| solve_filter(black_box(&problem)).unwrap())
    });
}

fn sup_engine(c: &mut Criterion) {
    let cfg = SupConfig::default().with_samples(1024);
    let f = |t: &[f64]| -(t[0] - 0.3).powi(2) - (t[1] - 0.7).powi(2) + 0.1 * (9.0 * t[0]).sin();
    c.bench_function("sup, 2-d, 1024 samples", |b| {
        b.iter(|| maximize(2, black_box(&cfg), f).unwrap())
    });
}

fn local_margins(c: &mut Criterion) {
    let sup = zoh_cbf::ScenarioConfig::default().online_sup();
    let alpha = ClassK::identity();
    let mut group = c.benchmark_group("local constants at T=0.1");
    group.sample_size(10);
    for id in [SystemId::Unicycle, SystemId::Spacecraft] {
        let (plant, x) = plant_and_state(id);
        let setup = plant.setup(0, &sup);
        for (name, needs) in [
            (
                "lipschitz",
                Needs {
                    lipschitz: true,
                    upsilon: false,
                    psi: false,
                },
            ),
            (
                "upsilon",
                Needs {
                    lipschitz: false,
                    upsilon: true,
                    psi: false,
                },
            ),
            (
                "psi",
                Needs {
                    lipschitz: false,
                    upsilon: false,
                    psi: true,
                },
            ),
        ] {
            group.bench_function(format!("{id}/{name}"), |b| {
                b.iter(|| local_constants(&setup, black_box(&x), 0.1, &alpha, needs, None).unwrap())
            });
        }
    }
    group.finish();
}

fn global_margins(c: &mut Criterion) {
    let sup = SupConfig::default().with_samples(1024);
    let alpha = ClassK::identity();
    let mut group = c.benchmark_group("global constants at T=0.1, 1024 samples");
    group.sample_size(10);
    for id in [SystemId::DoubleIntegrator, SystemId::Unicycle] {
        let (plant, _) = plant_and_state(id);
        let setup = plant.setup(0, &sup);
        group.bench_function(id.name(), |b| {
            b.iter(|| global_constants(black_box(&setup), 0.1, &alpha).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, qp, sup_engine, local_margins, global_margins);
criterion_main!(benches);
