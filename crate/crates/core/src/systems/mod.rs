//! Case-study plants, nominal controllers and scenario constants.

pub mod spacecraft;
pub mod toy;
pub mod unicycle;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CorridorConfig, ScenarioConfig, SpacecraftConfig, UnicycleConfig};
use crate::error::{Error, Result};
use crate::margins::{LocalReach, MarginSetup};
use crate::model::{Barrier, Dynamics, InputSet, WorkingDomain};
use crate::sup::SupConfig;
use crate::Vector;

use self::spacecraft::{omega_box_barriers, spacecraft_nominal, PointingBarrier, Spacecraft};
use self::toy::{DoubleIntegrator, Integrator1D, LinearBarrier, StaticSystem};
use self::unicycle::{unicycle_nominal, PolarBarrier, Unicycle};

/// Wraps an angle to `[-π, π]`; `±π` map to themselves.
pub fn wrap_pi(lambda: f64) -> f64 {
    use std::f64::consts::PI;
    if (-PI..=PI).contains(&lambda) {
        return lambda;
    }
    let tau = 2.0 * PI;
    lambda - tau * (lambda / tau).round()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemId {
    Unicycle,
    Corridor,
    Spacecraft,
    Integrator,
    DoubleIntegrator,
    Static,
}

impl SystemId {
    pub const ALL: [SystemId; 6] = [
        SystemId::Unicycle,
        SystemId::Corridor,
        SystemId::Spacecraft,
        SystemId::Integrator,
        SystemId::DoubleIntegrator,
        SystemId::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemId::Unicycle => "unicycle",
            SystemId::Corridor => "corridor",
            SystemId::Spacecraft => "spacecraft",
            SystemId::Integrator => "integrator",
            SystemId::DoubleIntegrator => "double-integrator",
            SystemId::Static => "static",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown system '{s}'")))
    }
}

/// Nominal (obstacle-unaware) control law.
#[derive(Debug, Clone)]
pub enum Nominal {
    Unicycle {
        target: [f64; 2],
        k_v: f64,
        k_omega: f64,
    },
    Spacecraft {
        target: Vector3<f64>,
        k_p: f64,
        k_d: f64,
        u_bound: f64,
    },
    Constant(Vector),
}

impl Nominal {
    pub fn eval(&self, x: &Vector, input: &InputSet) -> Vector {
        match self {
            Nominal::Unicycle {
                target,
                k_v,
                k_omega,
            } => unicycle_nominal(x, *target, *k_v, *k_omega, input),
            Nominal::Spacecraft {
                target,
                k_p,
                k_d,
                u_bound,
            } => spacecraft_nominal(x, target, *k_p, *k_d, *u_bound),
            Nominal::Constant(u) => input.clamp(u),
        }
    }
}

/// When a run counts as having completed its task.
#[derive(Debug, Clone)]
pub enum Goal {
    /// Planar distance to `target` below `tolerance`.
    Position {
        target: [f64; 2],
        tolerance: f64,
    },
    /// Angle between `p` and `target` below `tolerance` radians.
    Pointing {
        target: Vector3<f64>,
        tolerance: f64,
    },
    None,
}

impl Goal {
    pub fn reached(&self, x: &Vector) -> bool {
        match self {
            Goal::Position { target, tolerance } => {
                (x[0] - target[0]).hypot(x[1] - target[1]) < *tolerance
            }
            Goal::Pointing { target, tolerance } => {
                let p = Vector3::new(x[0], x[1], x[2]);
                p.angle(target) < *tolerance
            }
            Goal::None => false,
        }
    }

    /// Distance to the goal in the goal's own units.
    pub fn distance(&self, x: &Vector) -> f64 {
        match self {
            Goal::Position { target, .. } => (x[0] - target[0]).hypot(x[1] - target[1]),
            Goal::Pointing { target, .. } => Vector3::new(x[0], x[1], x[2]).angle(target),
            Goal::None => f64::NAN,
        }
    }
}

/// A plant with its barriers, domain and scenario.
#[derive(Clone)]
pub struct Plant {
    pub id: SystemId,
    pub model: Arc<dyn Dynamics>,
    pub input_set: InputSet,
    pub domain: WorkingDomain,
    /// Rows constrained with the configured margin variant.
    pub barriers: Vec<Arc<dyn Barrier>>,
    /// Rows with `ψ ≡ 0`, always constrained with `φ₃` and `η = 0`.
    pub auxiliary: Vec<Arc<dyn Barrier>>,
    pub local_reach: LocalReach,
    pub lipschitz_step: f64,
    pub x0: Vector,
    pub nominal: Nominal,
    pub goal: Goal,
    /// Scenario time budget in seconds.
    pub duration: f64,
}

impl fmt::Debug for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plant")
            .field("id", &self.id)
            .field("x0", &self.x0)
            .field("barriers", &self.barriers.len())
            .field("auxiliary", &self.auxiliary.len())
            .finish()
    }
}

impl Plant {
    pub fn build(id: SystemId, config: &ScenarioConfig) -> Result<Self> {
        match id {
            SystemId::Unicycle => unicycle_plant(&config.unicycle),
            SystemId::Corridor => corridor_plant(&config.unicycle, &config.corridor),
            SystemId::Spacecraft => spacecraft_plant(&config.spacecraft),
            SystemId::Integrator => Ok(integrator_plant()),
            SystemId::DoubleIntegrator => Ok(double_integrator_plant()),
            SystemId::Static => Ok(static_plant()),
        }
    }

    /// Margin setup for primary barrier `row`.
    pub fn setup(&self, row: usize, sup: &SupConfig) -> MarginSetup<'_> {
        MarginSetup {
            model: self.model.as_ref(),
            input_set: &self.input_set,
            barrier: self.barriers[row].as_ref(),
            domain: &self.domain,
            local_reach: self.local_reach,
            lipschitz_step: self.lipschitz_step,
            sup: sup.clone(),
        }
    }

    /// `max_i h_i(x)` over all rows (primary and auxiliary).
    pub fn max_h(&self, x: &Vector) -> f64 {
        self.barriers
            .iter()
            .chain(&self.auxiliary)
            .map(|b| b.value(x))
            .fold(f64::NEG_INFINITY, |a, v| {
                if v.is_nan() || a.is_nan() {
                    f64::NAN
                } else {
                    a.max(v)
                }
            })
    }

    /// Primary-barrier maximum, the quantity reported as closest approach.
    pub fn primary_h(&self, x: &Vector) -> f64 {
        self.barriers
            .iter()
            .map(|b| b.value(x))
            .fold(f64::NEG_INFINITY, |a, v| {
                if v.is_nan() || a.is_nan() {
                    f64::NAN
                } else {
                    a.max(v)
                }
            })
    }

    pub fn is_safe(&self, x: &Vector) -> bool {
        self.domain.contains(x) && self.max_h(x) <= 0.0
    }

    /// Random initial states inside every safe set, with primary `h <= -depth`.
    pub fn random_safe_states(&self, count: usize, seed: u64, depth: f64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.initial_box();
        let mut out = Vec::with_capacity(count);
        let mut tries = 0usize;
        while out.len() < count && tries < 1_000_000 {
            tries += 1;
            let mut x = Vector::from_iterator(
                lo.len(),
                (0..lo.len()).map(|i| rng.random_range(lo[i]..=hi[i])),
            );
            self.model.project(&mut x);
            if self.is_safe(&x) && self.primary_h(&x) <= -depth {
                out.push(x);
            }
        }
        out
    }

    fn initial_box(&self) -> (Vec<f64>, Vec<f64>) {
        let lo: Vec<f64> = self.domain.lo().iter().copied().collect();
        let hi: Vec<f64> = self.domain.hi().iter().copied().collect();
        match self.id {
            // Keep the body rates well inside the ω-box so runs start with slack.
            SystemId::Spacecraft => {
                let w = 0.05;
                let mut lo = lo;
                let mut hi = hi;
                for i in 3..6 {
                    lo[i] = -w;
                    hi[i] = w;
                }
                (lo, hi)
            }
            // Positions well inside the domain so the goal stays reachable.
            SystemId::Unicycle | SystemId::Corridor => {
                let mut lo = lo;
                let mut hi = hi;
                for i in 0..2 {
                    lo[i] *= 0.8;
                    hi[i] *= 0.8;
                }
                (lo, hi)
            }
            _ => (lo, hi),
        }
    }
}

fn unicycle_domain(c: &UnicycleConfig) -> Result<WorkingDomain> {
    WorkingDomain::new(c.domain_lo.clone(), c.domain_hi.clone())
}

pub fn unicycle_plant(c: &UnicycleConfig) -> Result<Plant> {
    let model = Unicycle::new();
    let input_set = model.input_set().clone();
    Ok(Plant {
        id: SystemId::Unicycle,
        model: Arc::new(model),
        input_set,
        domain: unicycle_domain(c)?,
        barriers: vec![Arc::new(PolarBarrier::new(c.obstacle, c.rho, c.sigma))],
        auxiliary: Vec::new(),
        local_reach: LocalReach::ExactFlow,
        lipschitz_step: c.lipschitz_step,
        x0: Vector::from_row_slice(&c.start),
        nominal: Nominal::Unicycle {
            target: c.target,
            k_v: c.k_v,
            k_omega: c.k_omega,
        },
        goal: Goal::Position {
            target: c.target,
            tolerance: c.goal_tolerance,
        },
        duration: c.duration,
    })
}

pub fn corridor_plant(u: &UnicycleConfig, c: &CorridorConfig) -> Result<Plant> {
    let mut plant = unicycle_plant(u)?;
    plant.id = SystemId::Corridor;
    plant.barriers = c
        .centers
        .iter()
        .map(|&center| Arc::new(PolarBarrier::new(center, c.rho, c.sigma)) as Arc<dyn Barrier>)
        .collect();
    plant.x0 = Vector::from_row_slice(&c.start);
    plant.nominal = Nominal::Unicycle {
        target: c.target,
        k_v: u.k_v,
        k_omega: u.k_omega,
    };
    plant.goal = Goal::Position {
        target: c.target,
        tolerance: u.goal_tolerance,
    };
    plant.duration = c.duration;
    Ok(plant)
}

fn unit(v: [f64; 3]) -> Result<Vector3<f64>> {
    let v = Vector3::from(v);
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Config(format!(
            "expected a nonzero direction, got {v:?}"
        )));
    }
    Ok(v / n)
}

pub fn spacecraft_plant(c: &SpacecraftConfig) -> Result<Plant> {
    let model = Spacecraft::with_bounds(c.u_bound, c.omega_max);
    let input_set = model.input_set().clone();
    let p0 = unit(c.start_p)?;
    let target = unit(c.target_p)?;
    let mut lo = vec![-1.0; 3];
    let mut hi = vec![1.0; 3];
    lo.extend([-c.omega_max; 3]);
    hi.extend([c.omega_max; 3]);
    Ok(Plant {
        id: SystemId::Spacecraft,
        model: Arc::new(model),
        input_set,
        domain: WorkingDomain::new(lo, hi)?,
        barriers: vec![Arc::new(PointingBarrier::new(
            unit(c.avoid)?.into(),
            c.theta,
            c.mu,
        ))],
        auxiliary: omega_box_barriers(c.omega_max)
            .into_iter()
            .map(|b| Arc::new(b) as Arc<dyn Barrier>)
            .collect(),
        local_reach: LocalReach::Delta0Ball,
        lipschitz_step: c.lipschitz_step,
        x0: Vector::from_vec(vec![
            p0.x,
            p0.y,
            p0.z,
            c.start_omega[0],
            c.start_omega[1],
            c.start_omega[2],
        ]),
        nominal: Nominal::Spacecraft {
            target,
            k_p: c.k_p,
            k_d: c.k_d,
            u_bound: c.u_bound,
        },
        goal: Goal::Pointing {
            target,
            tolerance: c.goal_tolerance_deg.to_radians(),
        },
        duration: c.duration,
    })
}

fn toy_plant(
    id: SystemId,
    model: Arc<dyn Dynamics>,
    input_set: InputSet,
    barrier: LinearBarrier,
    domain: WorkingDomain,
    x0: Vec<f64>,
) -> Plant {
    let m = input_set.dim();
    Plant {
        id,
        model,
        input_set,
        domain,
        barriers: vec![Arc::new(barrier)],
        auxiliary: Vec::new(),
        local_reach: LocalReach::ExactFlow,
        lipschitz_step: 1e-4,
        x0: Vector::from_vec(x0),
        nominal: Nominal::Constant(Vector::from_element(m, 1.0)),
        goal: Goal::None,
        duration: 2.0,
    }
}

/// `ẋ = u`, `h = x`, pushed toward the boundary by `u_nom = 1`.
pub fn integrator_plant() -> Plant {
    let model = Integrator1D::new();
    let input = model.input_set().clone();
    let domain = WorkingDomain::new(vec![-5.0], vec![5.0]).expect("valid box");
    toy_plant(
        SystemId::Integrator,
        Arc::new(model),
        input,
        LinearBarrier::new(vec![1.0], 0.0),
        domain,
        vec![-1.0],
    )
}

/// `ẋ₁ = x₂`, `ẋ₂ = u`, `h = x₁ + x₂` (so `ψ = u`), pushed by `u_nom = 1`.
pub fn double_integrator_plant() -> Plant {
    let model = DoubleIntegrator::new();
    let input = model.input_set().clone();
    let domain = WorkingDomain::new(vec![-5.0, -3.0], vec![5.0, 3.0]).expect("valid box");
    let barrier = LinearBarrier::new(vec![1.0, 1.0], 0.0);
    toy_plant(
        SystemId::DoubleIntegrator,
        Arc::new(model),
        input,
        barrier,
        domain,
        vec![-1.0, 0.0],
    )
}

/// `ẋ = 0`, `h = x`.
pub fn static_plant() -> Plant {
    let model = StaticSystem::new();
    let input = model.input_set().clone();
    let domain = WorkingDomain::new(vec![-5.0], vec![5.0]).expect("valid box");
    toy_plant(
        SystemId::Static,
        Arc::new(model),
        input,
        LinearBarrier::new(vec![1.0], 0.0),
        domain,
        vec![-1.0],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_pi(0.0), 0.0);
        assert!((wrap_pi(1.5 * PI) + 0.5 * PI).abs() < 1e-15);
        assert!((wrap_pi(-2.5 * PI) + 0.5 * PI).abs() < 1e-15);
        assert_eq!(wrap_pi(PI), PI);
        assert_eq!(wrap_pi(-PI), -PI);
    }

    #[test]
    fn scenario_starts_are_safe() {
        let cfg = ScenarioConfig::default();
        for id in SystemId::ALL {
            let plant = Plant::build(id, &cfg).unwrap();
            assert!(plant.is_safe(&plant.x0), "{id}");
        }
    }

    #[test]
    fn random_states_are_safe_and_deterministic() {
        let plant = Plant::build(SystemId::Spacecraft, &ScenarioConfig::default()).unwrap();
        let a = plant.random_safe_states(5, 3, 0.0);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|x| plant.is_safe(x)));
        assert_eq!(a, plant.random_safe_states(5, 3, 0.0));
    }

    #[test]
    fn system_names_round_trip() {
        for id in SystemId::ALL {
            assert_eq!(id.name().parse::<SystemId>().unwrap(), id);
        }
    }
}
