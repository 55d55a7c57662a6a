//! Fixtures shared by the benchmarks.

use zoh_cbf::model::InputSet;
use zoh_cbf::{Constraint, Plant, QpProblem, ScenarioConfig, SystemId, Vector};

/// A two-input filter QP with three rows, two of them active at the optimum.
pub fn filter_problem() -> QpProblem {
    let row = |a: [f64; 2], b: f64| Constraint {
        a: Vector::from_vec(a.to_vec()),
        b,
    };
    QpProblem {
        u_nom: Vector::from_vec(vec![2.0, 1.5]),
        constraints: vec![
            row([1.0, 1.0], 1.0),
            row([1.0, -0.5], 0.4),
            row([-1.0, 0.2], 3.0),
        ],
        input_set: InputSet::symmetric(2, 1.0).expect("valid box"),
    }
}

/// A case-study plant with its default scenario and a safe state near the
/// boundary, where local margins are evaluated during a run.
pub fn plant_and_state(id: SystemId) -> (Plant, Vector) {
    let plant = Plant::build(id, &ScenarioConfig::default()).expect("default plant");
    let x = plant
        .random_safe_states(1, 3, 0.0)
        .pop()
        .unwrap_or_else(|| plant.x0.clone());
    (plant, x)
}
