//! Supremum estimation over the unit cube.
//!
//! Objectives are sampled on a digit-scrambled Halton sequence, then the best
//! samples are refined by coordinate ascent and the result is multiplied by an
//! inflation factor. Sample `i` is always the same point for a given seed, so
//! results do not depend on the worker count, and the refinement seeds of a
//! budget are contained in the seeds of any doubled budget, so the estimate is
//! nondecreasing under doubling.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Sampling and refinement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupConfig {
    pub samples: usize,
    pub refine_rounds: usize,
    pub top_k: usize,
    pub inflation: f64,
    pub seed: u64,
    /// 0 uses the global thread pool, 1 runs sequentially.
    pub workers: usize,
}

impl Default for SupConfig {
    fn default() -> Self {
        Self {
            samples: 4096,
            refine_rounds: 8,
            top_k: 16,
            inflation: 1.05,
            seed: 0,
            workers: 0,
        }
    }
}

impl SupConfig {
    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_inflation(mut self, inflation: f64) -> Self {
        self.inflation = inflation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidParameter(
                "sample budget must be positive".into(),
            ));
        }
        if !(self.inflation.is_finite() && self.inflation > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inflation must be positive, got {}",
                self.inflation
            )));
        }
        Ok(())
    }

    /// Applies the inflation factor in the conservative direction.
    pub fn inflate(&self, value: f64) -> f64 {
        if value >= 0.0 {
            value * self.inflation
        } else {
            value / self.inflation
        }
    }
}

/// Estimated supremum with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SupEstimate {
    /// Inflated estimate.
    pub value: f64,
    /// Best objective value actually observed.
    pub raw: f64,
    pub n_samples: usize,
    pub refinement_rounds: usize,
    pub inflation: f64,
    pub rejected: usize,
    /// Unit-cube coordinates of the best point.
    pub argmax: Vec<f64>,
}

/// A vector of objectives evaluated at a unit-cube point. Non-finite outputs
/// mark the point as rejected for that objective.
pub trait Objective: Sync {
    fn count(&self) -> usize;

    fn eval(&self, t: &[f64], out: &mut [f64]);

    fn eval_one(&self, t: &[f64], which: usize) -> f64 {
        let mut out = vec![f64::NAN; self.count()];
        self.eval(t, &mut out);
        out[which]
    }
}

struct Scalar<F>(F);

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for Scalar<F> {
    fn count(&self) -> usize {
        1
    }

    fn eval(&self, t: &[f64], out: &mut [f64]) {
        out[0] = (self.0)(t);
    }

    fn eval_one(&self, t: &[f64], _which: usize) -> f64 {
        (self.0)(t)
    }
}

/// Digit-scrambled Halton sequence.
#[derive(Debug, Clone)]
pub struct Halton {
    perms: Vec<Vec<u32>>,
    digits: Vec<u32>,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim > PRIMES.len() {
            return Err(Error::InvalidParameter(format!(
                "quasi-random sampling supports at most {} dimensions, got {dim}",
                PRIMES.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e55_c0de_0000);
        let mut perms = Vec::with_capacity(dim);
        let mut digits = Vec::with_capacity(dim);
        for &base in &PRIMES[..dim] {
            let mut perm: Vec<u32> = (0..base).collect();
            perm.shuffle(&mut rng);
            perms.push(perm);
            digits.push((53.0 * std::f64::consts::LN_2 / (base as f64).ln()).ceil() as u32);
        }
        Ok(Self { perms, digits })
    }

    pub fn dim(&self) -> usize {
        self.perms.len()
    }

    /// Point number `index` (0-based) of the sequence.
    pub fn point(&self, index: u64, out: &mut [f64]) {
        let n = index + 1;
        for (j, perm) in self.perms.iter().enumerate() {
            let base = PRIMES[j] as u64;
            let inv = 1.0 / base as f64;
            let mut k = n;
            let mut scale = inv;
            let mut value = 0.0;
            for _ in 0..self.digits[j] {
                let d = (k % base) as usize;
                k /= base;
                value += perm[d] as f64 * scale;
                scale *= inv;
            }
            out[j] = value.min(1.0 - f64::EPSILON);
        }
    }
}

fn pool(workers: usize) -> Option<Arc<rayon::ThreadPool>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    if workers <= 1 {
        return None;
    }
    let mut pools = POOLS.get_or_init(Default::default).lock().ok()?;
    if let Some(p) = pools.get(&workers) {
        return Some(p.clone());
    }
    let p = Arc::new(
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .ok()?,
    );
    pools.insert(workers, p.clone());
    Some(p)
}

/// Runs `op` according to the worker setting.
pub fn with_workers<R: Send>(workers: usize, op: impl FnOnce() -> R + Send) -> R {
    match pool(workers) {
        Some(p) => p.install(op),
        None => op(),
    }
}

fn map_indices<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if workers == 1 {
        (0..n).map(f).collect()
    } else {
        with_workers(workers, || (0..n).into_par_iter().map(f).collect())
    }
}

/// Estimates `sup` of a scalar objective over `[0, 1]^dim`.
pub fn maximize(
    dim: usize,
    cfg: &SupConfig,
    objective: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<SupEstimate> {
    Ok(maximize_many(dim, cfg, &Scalar(objective))?.remove(0))
}

/// Estimates the suprema of several objectives on one shared sample set.
pub fn maximize_many(
    dim: usize,
    cfg: &SupConfig,
    objective: &dyn Objective,
) -> Result<Vec<SupEstimate>> {
    cfg.validate()?;
    let count = objective.count();
    if dim == 0 {
        let mut out = vec![f64::NAN; count];
        objective.eval(&[], &mut out);
        return out
            .into_iter()
            .map(|v| {
                if v.is_finite() {
                    Ok(SupEstimate {
                        value: cfg.inflate(v),
                        raw: v,
                        n_samples: 1,
                        refinement_rounds: 0,
                        inflation: cfg.inflation,
                        rejected: 0,
                        argmax: vec![],
                    })
                } else {
                    Err(Error::AllSamplesRejected(1))
                }
            })
            .collect();
    }

    let seq = Halton::new(dim, cfg.seed)?;
    let n = cfg.samples;
    let values: Vec<Vec<f64>> = map_indices(cfg.workers, n, |i| {
        let mut t = vec![0.0; dim];
        seq.point(i as u64, &mut t);
        let mut out = vec![f64::NAN; count];
        objective.eval(&t, &mut out);
        out
    });

    let mut estimates = Vec::with_capacity(count);
    for which in 0..count {
        let column: Vec<f64> = values.iter().map(|v| v[which]).collect();
        let rejected = column.iter().filter(|v| !v.is_finite()).count();
        if rejected == n {
            return Err(Error::AllSamplesRejected(n));
        }
        let starts = refinement_starts(&column, cfg.top_k.max(1));
        let refined: Vec<(f64, Vec<f64>)> = map_indices(cfg.workers, starts.len(), |s| {
            let mut t = vec![0.0; dim];
            seq.point(starts[s] as u64, &mut t);
            let v0 = column[starts[s]];
            coordinate_ascent(&mut t, v0, cfg.refine_rounds, |p| {
                objective.eval_one(p, which)
            })
        });
        let (mut best, mut best_idx) = (f64::NEG_INFINITY, 0);
        for (i, &v) in column.iter().enumerate() {
            if v.is_finite() && v > best {
                best = v;
                best_idx = i;
            }
        }
        let mut argmax = vec![0.0; dim];
        seq.point(best_idx as u64, &mut argmax);
        for (v, t) in refined {
            if v > best {
                best = v;
                argmax = t;
            }
        }
        estimates.push(SupEstimate {
            value: cfg.inflate(best),
            raw: best,
            n_samples: n,
            refinement_rounds: cfg.refine_rounds,
            inflation: cfg.inflation,
            rejected,
            argmax,
        });
    }
    Ok(estimates)
}

/// Union of the `k` best finite samples of every dyadic prefix of the budget.
fn refinement_starts(column: &[f64], k: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut len = column.len();
    loop {
        let mut idx: Vec<usize> = (0..len).filter(|&i| column[i].is_finite()).collect();
        idx.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
        starts.extend(idx.into_iter().take(k));
        if len <= k || len % 2 == 1 {
            break;
        }
        len /= 2;
    }
    starts.sort_unstable();
    starts.dedup();
    starts
}

fn coordinate_ascent(
    t: &mut [f64],
    mut value: f64,
    rounds: usize,
    f: impl Fn(&[f64]) -> f64,
) -> (f64, Vec<f64>) {
    let mut step = 0.125;
    let mut probe = t.to_vec();
    for _ in 0..rounds {
        for j in 0..t.len() {
            for dir in [1.0, -1.0] {
                for _ in 0..4 {
                    let next = (t[j] + dir * step).clamp(0.0, 1.0 - f64::EPSILON);
                    if next == t[j] {
                        break;
                    }
                    probe[j] = next;
                    let v = f(&probe);
                    if v.is_finite() && v > value {
                        value = v;
                        t[j] = next;
                    } else {
                        probe[j] = t[j];
                        break;
                    }
                }
            }
        }
        step *= 0.5;
    }
    (value, t.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_points_lie_in_unit_cube_and_differ() {
        let h = Halton::new(5, 3).unwrap();
        let mut a = [0.0; 5];
        let mut b = [0.0; 5];
        h.point(0, &mut a);
        h.point(1, &mut b);
        assert!(a.iter().chain(&b).all(|v| (0.0..1.0).contains(v)));
        assert_ne!(a, b);
    }

    #[test]
    fn halton_first_dimension_is_well_spread() {
        let h = Halton::new(1, 11).unwrap();
        let mut bins = [0usize; 8];
        let mut t = [0.0];
        for i in 0..1024 {
            h.point(i, &mut t);
            bins[(t[0] * 8.0) as usize] += 1;
        }
        assert!(bins.iter().all(|&b| b == 128), "{bins:?}");
    }

    #[test]
    fn constant_objective_is_inflated() {
        let cfg = SupConfig::default();
        let est = maximize(2, &cfg, |_| 3.0).unwrap();
        assert!((est.value - 3.0 * 1.05).abs() < 1e-12);
    }

    #[test]
    fn smooth_peak_is_found_by_refinement() {
        let cfg = SupConfig::default().with_samples(256).with_inflation(1.0);
        let est = maximize(3, &cfg, |t| {
            -((t[0] - 0.3137).powi(2) + (t[1] - 0.777).powi(2) + (t[2] - 0.05).powi(2))
        })
        .unwrap();
        assert!(est.value > -1e-5, "{}", est.value);
    }

    #[test]
    fn all_rejected_is_an_error() {
        let cfg = SupConfig::default().with_samples(64);
        assert!(matches!(
            maximize(2, &cfg, |_| f64::NAN),
            Err(Error::AllSamplesRejected(64))
        ));
    }

    #[test]
    fn rejected_samples_are_skipped() {
        let cfg = SupConfig::default().with_samples(512).with_inflation(1.0);
        let est = maximize(1, &cfg, |t| if t[0] > 0.5 { f64::NAN } else { t[0] }).unwrap();
        assert!(est.rejected > 200);
        assert!(est.value <= 0.5 && est.value > 0.49);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let f = |t: &[f64]| (7.0 * t[0]).sin() * (3.0 * t[1]).cos() + t[2];
        let a = maximize(
            3,
            &SupConfig {
                workers: 1,
                ..SupConfig::default()
            },
            f,
        )
        .unwrap();
        let b = maximize(
            3,
            &SupConfig {
                workers: 4,
                ..SupConfig::default()
            },
            f,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_values_inflate_upward() {
        let cfg = SupConfig::default();
        assert!(cfg.inflate(-2.0) > -2.0);
    }
}
