//! Fixed-step classic Runge-Kutta integration.

use crate::Vector;

/// One RK4 step of size `dt`.
pub fn rk4_step(f: impl Fn(&Vector) -> Vector, x: &Vector, dt: f64) -> Vector {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * dt)));
    let k3 = f(&(x + &k2 * (0.5 * dt)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
}

/// Integrates `ẋ = f(x)` over `duration` with `steps` equal RK4 steps.
pub fn rk4(f: impl Fn(&Vector) -> Vector, x: &Vector, duration: f64, steps: usize) -> Vector {
    let steps = steps.max(1);
    let dt = duration / steps as f64;
    let mut y = x.clone();
    for _ in 0..steps {
        y = rk4_step(&f, &y, dt);
    }
    y
}
