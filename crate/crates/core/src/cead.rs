//! Canonical equation ż = ∂₁Fit(z, z)·β(z)·m₂(z) and comparison with simulated mean traits.

use serde::Serialize;
use thiserror::Error;

use crate::model::{Domain, ModelSpec};

#[derive(Debug, Error, PartialEq)]
pub enum CeadError {
    #[error("non-finite state {z} at t = {t}")]
    NonFinite { t: f64, z: f64 },
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("trajectory horizon {traj} exceeds ODE horizon {ode}")]
    Horizon { traj: f64, ode: f64 },
    #[error("time grid and values differ in length")]
    Shape,
}

pub fn cead_rhs(model: &ModelSpec, z: f64) -> f64 {
    model.fitness_gradient_diag(z) * model.beta(z) * model.m2(z)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CeadPath {
    pub times: Vec<f64>,
    pub z: Vec<f64>,
    pub dt: f64,
    pub method: &'static str,
}

impl CeadPath {
    pub fn end(&self) -> f64 {
        *self.z.last().expect("path is never empty")
    }

    /// Linear interpolation; clamps outside the grid.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.z[0];
        }
        if t >= self.times[n - 1] {
            return self.z[n - 1];
        }
        let k = ((t - self.times[0]) / self.dt).floor() as usize;
        let k = k.min(n - 2);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        self.z[k] * (1.0 - w) + self.z[k + 1] * w
    }
}

/// Fixed-step RK4 for a scalar autonomous ODE.
pub fn rk4(f: impl Fn(f64) -> f64, x0: f64, t_end: f64, dt: f64) -> Result<CeadPath, CeadError> {
    if !(dt > 0.0) {
        return Err(CeadError::BadStep(dt));
    }
    let n = if t_end <= 0.0 { 0 } else { ((t_end / dt).round() as usize).max(1) };
    let h = if n == 0 { dt } else { t_end / n as f64 };
    let mut times = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n + 1);
    times.push(0.0);
    z.push(x0);
    let mut x = x0;
    for i in 0..n {
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let t = (i + 1) as f64 * h;
        if !x.is_finite() {
            return Err(CeadError::NonFinite { t, z: x });
        }
        times.push(t);
        z.push(x);
    }
    Ok(CeadPath { times, z, dt: h, method: "rk4" })
}

pub fn integrate(model: &ModelSpec, x0: f64, t_slow: f64, dt: f64) -> Result<CeadPath, CeadError> {
    rk4(|z| cead_rhs(model, z), x0, t_slow, dt)
}

/// Default step T/4096.
pub fn default_dt(t_slow: f64) -> f64 {
    if t_slow > 0.0 {
        t_slow / 4096.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub sup_error: f64,
    pub errors: Vec<f64>,
}

/// Sup over the trajectory grid of |z_traj(t) - z_ode(t)|, measured as minimal arc on a torus.
pub fn compare(path: &CeadPath, times: &[f64], z: &[f64], domain: Domain) -> Result<Comparison, CeadError> {
    if times.len() != z.len() {
        return Err(CeadError::Shape);
    }
    let ode_end = *path.times.last().expect("non-empty path");
    if let Some(&t_last) = times.last() {
        if t_last > ode_end * (1.0 + 1e-12) + 1e-15 {
            return Err(CeadError::Horizon { traj: t_last, ode: ode_end });
        }
    }
    let errors: Vec<f64> = times.iter().zip(z).map(|(&t, &v)| domain.diff(v, path.at(t)).abs()).collect();
    let sup_error = errors.iter().cloned().fold(0.0, f64::max);
    Ok(Comparison { sup_error, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MutationLaw;

    #[test]
    fn rhs_examples() {
        let c = ModelSpec::from_strings("2", "1", MutationLaw::uniform(1.0)).unwrap();
        assert_eq!(cead_rhs(&c, 0.3), 0.0);
        let a = ModelSpec::model_a();
        for z in [-1.0, 0.0, 2.0] {
            assert!((cead_rhs(&a, z) - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn model_a_linear_solution() {
        let a = ModelSpec::model_a();
        let p = integrate(&a, 0.0, 1.0, 1e-3).unwrap();
        assert_eq!(p.times.len(), 1001);
        assert!((p.end() - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_horizon_and_constant_b() {
        let a = ModelSpec::model_a();
        let p = integrate(&a, 0.7, 0.0, 1e-3).unwrap();
        assert_eq!(p.z, vec![0.7]);
        let c = ModelSpec::from_strings("2", "1", MutationLaw::uniform(1.0)).unwrap();
        let p = integrate(&c, 0.7, 1.0, 0.01).unwrap();
        assert!(p.z.iter().all(|&z| z == 0.7));
    }

    #[test]
    fn self_comparison_is_zero() {
        let b = ModelSpec::model_b();
        let p = integrate(&b, 0.1, 2.0, 0.01).unwrap();
        let c = compare(&p, &p.times, &p.z, Domain::Line).unwrap();
        assert_eq!(c.sup_error, 0.0);
    }

    #[test]
    fn horizon_mismatch() {
        let a = ModelSpec::model_a();
        let p = integrate(&a, 0.0, 1.0, 0.01).unwrap();
        assert!(matches!(compare(&p, &[0.0, 2.0], &[0.0, 0.0], Domain::Line), Err(CeadError::Horizon { .. })));
    }

    #[test]
    fn blow_up_reported() {
        assert!(matches!(rk4(|z| z * z, 1.0, 2.0, 0.01), Err(CeadError::NonFinite { .. })));
    }

    #[test]
    fn interpolation() {
        let p = rk4(|_| 2.0, 0.0, 1.0, 0.25).unwrap();
        assert!((p.at(0.6) - 1.2).abs() < 1e-14);
        assert_eq!(p.at(5.0), 2.0);
    }
}
