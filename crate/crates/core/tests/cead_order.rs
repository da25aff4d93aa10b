use cead_core::cead::{self, cead_rhs, compare, rk4};
use cead_core::model::{Domain, ModelSpec};
use cead_core::stats::loglog_slope;

/// ż = cos z / (6(2 + sin(z)/2)): the canonical equation for b = 2 + sin(y)/2, θ = 1, m₂ = 1/3.
fn rhs(z: f64) -> f64 {
    z.cos() / (6.0 * (2.0 + 0.5 * z.sin()))
}

/// G' = 1/rhs on (-π/2, π/2).
fn g(z: f64) -> f64 {
    6.0 * (2.0 * (1.0 / z.cos() + z.tan()).ln() - 0.5 * z.cos().ln())
}

/// Exact solution by bisection on G(z) = G(z₀) + t.
fn exact(z0: f64, t: f64) -> f64 {
    let target = g(z0) + t;
    let (mut lo, mut hi) = (z0, std::f64::consts::FRAC_PI_2 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn model_b_rhs_matches_closed_form() {
    let m = ModelSpec::model_b();
    for z in [-1.2, -0.3, 0.0, 0.4, 1.1] {
        assert!((cead_rhs(&m, z) - rhs(z)).abs() < 1e-9);
    }
}

#[test]
fn rk4_is_fourth_order() {
    let (z0, t) = (-1.0, 8.0);
    let truth = exact(z0, t);
    let dts: Vec<f64> = (2..7).map(|p| t / f64::powi(2.0, p)).collect();
    let errs: Vec<f64> = dts.iter().map(|&dt| (rk4(rhs, z0, t, dt).unwrap().end() - truth).abs()).collect();
    let order = loglog_slope(&dts, &errs);
    assert!(order >= 3.7, "observed order {order}, errors {errs:?}");
    // the model-driven integrator agrees with the closed-form rhs
    let m = ModelSpec::model_b();
    let path = cead::integrate(&m, z0, t, t / 4096.0).unwrap();
    assert!((path.end() - truth).abs() < 1e-8);
}

#[test]
fn comparison_is_invariant_under_period_shift() {
    let r = 0.75;
    let domain = Domain::Torus { center: 0.5, r };
    let path = rk4(|_| 1.0, 0.0, 4.0, 1.0 / 64.0).unwrap();
    let times: Vec<f64> = (0..=16).map(|i| i as f64 * 0.25).collect();
    let z: Vec<f64> = times.iter().map(|&t| domain.wrap(t + 0.01 * (7.0 * t).sin())).collect();
    let base = compare(&path, &times, &z, domain).unwrap();
    let shifted: Vec<f64> = z.iter().map(|v| v + 4.0 * r).collect();
    let again = compare(&path, &times, &shifted, domain).unwrap();
    assert!((base.sup_error - again.sup_error).abs() < 1e-12);
    assert!(base.sup_error <= 0.01 + 1e-12);
    // wrapping the ODE path itself does not change the comparison either
    let mut wrapped = path.clone();
    wrapped.z.iter_mut().for_each(|v| *v = domain.wrap(*v));
    let third = compare(&wrapped, &times, &z, domain).unwrap();
    assert!(third.sup_error <= 0.01 + 1e-12);
}
