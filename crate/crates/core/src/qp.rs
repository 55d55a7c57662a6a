//! Min-norm safety filter: the Euclidean projection of a nominal input onto
//! `{u ∈ U : a_i·u <= b_i}`.
//!
//! Problems are small (`m <= 6`, a handful of rows), so the solver enumerates
//! candidate active sets exactly instead of iterating. When the rows admit no
//! input in the box, the input minimizing the largest row violation is used.

use serde::Serialize;

use crate::error::{non_finite, Error, Result};
use crate::margins::{MarginFunction, MarginSetup};
use crate::model::{lie_derivatives, InputSet};
use crate::{Matrix, Vector};

/// Feasibility tolerance, scaled by `1 + |b|`.
pub const FEAS_TOL: f64 = 1e-10;

/// One half-space `a·u <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub a: Vector,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub u_nom: Vector,
    pub constraints: Vec<Constraint>,
    pub input_set: InputSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    InfeasibleRelaxed,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::InfeasibleRelaxed => "infeasible_relaxed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vector,
    pub status: QpStatus,
    /// `max_i (a_i·u - b_i)⁺`; zero when optimal.
    pub violation: f64,
    /// Indices of constraint rows active at `u`.
    pub active: Vec<usize>,
    /// Multipliers of the constraint rows followed by the box rows
    /// (`u_j <= hi_j`, then `-u_j <= -lo_j`, for each `j`).
    pub multipliers: Vec<f64>,
}

impl QpSolution {
    /// Norm of `u - u_nom + Σ λ_i a_i` over all rows, with constraint rows
    /// relaxed by `violation`.
    pub fn kkt_residual(&self, problem: &QpProblem) -> f64 {
        let rows = stacked_rows(problem, 0.0);
        let mut r = &self.u - &problem.u_nom;
        for (row, lam) in rows.iter().zip(&self.multipliers) {
            r += &row.a * *lam;
        }
        r.norm()
    }
}

fn stacked_rows(problem: &QpProblem, relax: f64) -> Vec<Constraint> {
    let m = problem.input_set.dim();
    let mut rows: Vec<Constraint> = problem
        .constraints
        .iter()
        .map(|c| Constraint {
            a: c.a.clone(),
            b: c.b + relax,
        })
        .collect();
    for j in 0..m {
        let e = Vector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 });
        rows.push(Constraint {
            a: e.clone(),
            b: problem.input_set.hi()[j],
        });
        rows.push(Constraint {
            a: -e,
            b: -problem.input_set.lo()[j],
        });
    }
    rows
}

fn satisfied(row: &Constraint, u: &Vector) -> bool {
    row.a.dot(u) - row.b <= FEAS_TOL * (1.0 + row.b.abs())
}

/// Every subset of `0..n` with at most `k` elements, smallest first.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..k {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l: &usize| l + 1);
            for i in start..n {
                let mut t: Vec<usize> = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Projection of `u_nom` onto the polyhedron of `rows`, by enumeration of
/// active sets satisfying the KKT conditions.
fn project(u_nom: &Vector, rows: &[Constraint]) -> Option<(Vector, Vec<f64>)> {
    let m = u_nom.len();
    if rows.iter().all(|r| satisfied(r, u_nom)) {
        return Some((u_nom.clone(), vec![0.0; rows.len()]));
    }
    let mut best: Option<(f64, Vector, Vec<f64>)> = None;
    for set in subsets(rows.len(), m).into_iter().skip(1) {
        let k = set.len();
        let a = Matrix::from_fn(k, m, |r, c| rows[set[r]].a[c]);
        let gram = &a * a.transpose();
        let rhs = Vector::from_fn(k, |r, _| rows[set[r]].a.dot(u_nom) - rows[set[r]].b);
        let Some(lam) = gram.clone().lu().solve(&rhs) else {
            continue;
        };
        if (&gram * &lam - &rhs).norm() > 1e-9 * (1.0 + rhs.norm()) {
            continue;
        }
        if lam.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let u = u_nom - a.transpose() * &lam;
        if !rows.iter().all(|r| satisfied(r, &u)) {
            continue;
        }
        let cost = (&u - u_nom).norm_squared();
        if best.as_ref().is_none_or(|b| cost < b.0) {
            let mut mult = vec![0.0; rows.len()];
            for (r, &i) in set.iter().enumerate() {
                mult[i] = lam[r].max(0.0);
            }
            best = Some((cost, u, mult));
        }
    }
    best.map(|(_, u, mult)| (u, mult))
}

/// `min t` subject to `a_i·u - b_i <= t` and `u ∈ U`, by vertex enumeration.
fn min_max_violation(problem: &QpProblem) -> f64 {
    let m = problem.input_set.dim();
    let k = problem.constraints.len();
    // Variables (u, t); rows of the form c·(u, t) <= d.
    let mut rows: Vec<(Vector, f64)> = problem
        .constraints
        .iter()
        .map(|c| {
            let mut a = c.a.clone().resize_vertically(m + 1, -1.0);
            a[m] = -1.0;
            (a, c.b)
        })
        .collect();
    for j in 0..m {
        let e = Vector::from_fn(m + 1, |i, _| if i == j { 1.0 } else { 0.0 });
        rows.push((e.clone(), problem.input_set.hi()[j]));
        rows.push((-e, -problem.input_set.lo()[j]));
    }
    let mut best = f64::INFINITY;
    for set in subsets(rows.len(), m + 1) {
        if set.len() != m + 1 || !set.iter().any(|&i| i < k) {
            continue;
        }
        let a = Matrix::from_fn(m + 1, m + 1, |r, c| rows[set[r]].0[c]);
        let d = Vector::from_fn(m + 1, |r, _| rows[set[r]].1);
        let Some(v) = a.lu().solve(&d) else {
            continue;
        };
        if v.iter().any(|x| !x.is_finite()) {
            continue;
        }
        if rows
            .iter()
            .all(|(c, d)| c.dot(&v) - d <= 1e-9 * (1.0 + d.abs()))
        {
            best = best.min(v[m]);
        }
    }
    best
}

fn check(problem: &QpProblem) -> Result<()> {
    let m = problem.input_set.dim();
    if problem.u_nom.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: problem.u_nom.len(),
        });
    }
    for c in &problem.constraints {
        if c.a.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: c.a.len(),
            });
        }
        if !(c.b.is_finite() && c.a.iter().all(|v| v.is_finite())) {
            return Err(non_finite("constraint row", &c.a));
        }
    }
    if problem.u_nom.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("nominal input", &problem.u_nom));
    }
    Ok(())
}

fn active_rows(problem: &QpProblem, u: &Vector, relax: f64) -> Vec<usize> {
    problem
        .constraints
        .iter()
        .enumerate()
        .filter(|(_, c)| (c.a.dot(u) - c.b - relax).abs() <= 1e-8 * (1.0 + c.b.abs()))
        .map(|(i, _)| i)
        .collect()
}

/// Solves the filter QP. Infeasibility is reported through the status; only
/// malformed problems are errors.
pub fn solve_filter(problem: &QpProblem) -> Result<QpSolution> {
    check(problem)?;
    let rows = stacked_rows(problem, 0.0);
    if let Some((u, multipliers)) = project(&problem.u_nom, &rows) {
        return Ok(QpSolution {
            active: active_rows(problem, &u, 0.0),
            u,
            status: QpStatus::Optimal,
            violation: 0.0,
            multipliers,
        });
    }
    // Shift offsets so the most violated row has `b = 0`; a huge `|b|` would
    // otherwise swamp `a·u` in floating point and make every input look alike.
    let shift = problem
        .constraints
        .iter()
        .map(|c| -c.b)
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = QpProblem {
        u_nom: problem.u_nom.clone(),
        constraints: problem
            .constraints
            .iter()
            .map(|c| Constraint {
                a: c.a.clone(),
                b: c.b + shift,
            })
            .collect(),
        input_set: problem.input_set.clone(),
    };
    let t = min_max_violation(&shifted).max(-shift);
    // Nudge the relaxation so the relaxed polyhedron is not empty through rounding.
    let scale = 1.0 + t.abs();
    let relax_shifted = t + 1e-12 * scale;
    let relaxed = stacked_rows(&shifted, relax_shifted);
    let (u, multipliers) = project(&problem.u_nom, &relaxed).unwrap_or_else(|| {
        let u = problem.input_set.clamp(&problem.u_nom);
        (u, vec![0.0; relaxed.len()])
    });
    let violation = problem
        .constraints
        .iter()
        .map(|c| c.a.dot(&u) - c.b)
        .fold(0.0_f64, f64::max);
    Ok(QpSolution {
        active: active_rows(&shifted, &u, relax_shifted),
        u,
        status: QpStatus::InfeasibleRelaxed,
        violation,
        multipliers,
    })
}

/// Row `L_g h(x_k)·u <= φ(T, x_k) - L_f h(x_k)` together with `φ` and `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltConstraint {
    pub row: Constraint,
    pub phi: f64,
    pub nu: f64,
    pub h: f64,
}

pub fn build_constraint(
    setup: &MarginSetup<'_>,
    margin: &MarginFunction,
    x: &Vector,
    horizon: f64,
) -> Result<BuiltConstraint> {
    let (lfh, lgh) = lie_derivatives(setup.model, setup.barrier, x)?;
    let m = margin.evaluate(setup, horizon, x)?;
    Ok(BuiltConstraint {
        row: Constraint {
            a: lgh,
            b: m.phi - lfh,
        },
        phi: m.phi,
        nu: m.nu,
        h: m.h,
    })
}
