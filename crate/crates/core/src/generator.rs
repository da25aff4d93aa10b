//! Exact evaluation of the two-component generator on test functionals, its
//! slow and fast approximations, and Monte-Carlo drift / quadratic-variation
//! estimators for M₂.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fv::{eval_l_fvc_cyl, eval_l_fvc_poly, C2};
use crate::model::{ModelSpec, Population};
use crate::poly::Poly;
use crate::quadrature::GaussLegendre;
use crate::sim::Simulator;
use crate::stats::{loglog_slope, mean_se};

pub const DEFAULT_GL_ORDER: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("quadrature order must be at least 2, got {0}")]
    Order(usize),
    #[error("fast state needs at least 2 atoms")]
    TooFewAtoms,
}

/// Test functional Φ(z, μ).
pub enum TestFunctional<'a> {
    /// f(z)
    Slow(C2<'a>),
    /// F(⟨g, μ⟩)
    Cylindrical { big_f: C2<'a>, g: C2<'a> },
    /// ⟨p, μⁿ⟩
    Polynomial(Poly),
}

impl TestFunctional<'_> {
    pub fn value(&self, z: f64, atoms: &[f64]) -> f64 {
        match self {
            TestFunctional::Slow(f) => (f.f)(z),
            TestFunctional::Cylindrical { big_f, g } => {
                let m = atoms.iter().map(|&u| (g.f)(u)).sum::<f64>() / atoms.len() as f64;
                (big_f.f)(m)
            }
            TestFunctional::Polynomial(p) => p.integrate_atoms(atoms),
        }
    }

    fn depends_on_mu(&self) -> bool {
        !matches!(self, TestFunctional::Slow(_))
    }
}

/// Shift every atom by -d and put `new_i` (pre-shift) at position i.
#[inline]
fn moved(atoms: &[f64], i: usize, new_i: f64, d: f64, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(atoms.iter().map(|u| u - d));
    buf[i] = new_i - d;
}

/// L^K Φ(z, μ) on slow time: exact sum over ordered atom pairs for resampling
/// and Gauss-Legendre over h for mutation. `atoms` are the centered fast
/// coordinates u_i = (x_i - z)/(σ√K), K = atoms.len().
pub fn eval_lk_exact(
    model: &ModelSpec,
    phi: &TestFunctional,
    z: f64,
    atoms: &[f64],
    sigma: f64,
    gl_order: usize,
) -> Result<f64, GenError> {
    if gl_order < 2 {
        return Err(GenError::Order(gl_order));
    }
    let k = atoms.len();
    if k < 2 {
        return Err(GenError::TooFewAtoms);
    }
    let kf = k as f64;
    let s = sigma * kf.sqrt();
    let gl = GaussLegendre::new(gl_order);
    let base = phi.value(z, atoms);
    let needs_mu = phi.depends_on_mu();
    let traits: Vec<f64> = atoms.iter().map(|u| z + s * u).collect();
    let mut buf = Vec::with_capacity(k);
    let mut eval_after = |i: usize, new_i: f64, d: f64| -> f64 {
        let z_new = z + s * d;
        if needs_mu {
            moved(atoms, i, new_i, d, &mut buf);
            phi.value(z_new, &buf)
        } else {
            phi.value(z_new, &[])
        }
    };

    let mut res = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let rate = model.b(traits[i], traits[j]);
            let d = (atoms[j] - atoms[i]) / kf;
            res += rate * (eval_after(i, atoms[j], d) - base);
        }
    }
    res /= kf * kf * sigma * sigma;

    let mut mutation = 0.0;
    for i in 0..k {
        let x = traits[i];
        let a = model.mutation.support(x);
        let integral = gl.integrate(-a, a, |h| {
            let du = h / kf.sqrt();
            model.mutation.density(x, h) * (eval_after(i, atoms[i] + du, du / kf) - base)
        });
        mutation += model.theta(x) * integral;
    }
    mutation /= kf * sigma * sigma;
    Ok(res + mutation)
}

/// f'(z) M₂(μ) ∂₁Fit(z, z).
pub fn eval_l_slow(model: &ModelSpec, f: &C2, z: f64, atoms: &[f64]) -> f64 {
    let m2 = atoms.iter().map(|u| u * u).sum::<f64>() / atoms.len() as f64;
    (f.d1)(z) * m2 * model.fitness_gradient_diag(z)
}

/// (θm₂ / K²σ²) L_FVc Φ(μ) at λ = λ(z); `None` for slow functionals.
pub fn eval_fast_approx(model: &ModelSpec, phi: &TestFunctional, z: f64, atoms: &[f64], sigma: f64) -> Option<f64> {
    let kf = atoms.len() as f64;
    let lambda = model.lambda_rate(z);
    let pre = model.theta(z) * model.m2(z) / (kf * kf * sigma * sigma);
    match phi {
        TestFunctional::Slow(_) => None,
        TestFunctional::Cylindrical { big_f, g } => Some(pre * eval_l_fvc_cyl(big_f, g, atoms, lambda)),
        TestFunctional::Polynomial(p) => Some(pre * eval_l_fvc_poly(p, atoms, lambda)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenEvalReport {
    pub exact: f64,
    pub slow_approx: Option<f64>,
    pub fast_approx: Option<f64>,
    /// exact - approx
    pub residual: f64,
    /// Error-order expression with unit constants.
    pub predicted_bound: f64,
}

pub fn gen_eval_report(
    model: &ModelSpec,
    phi: &TestFunctional,
    z: f64,
    atoms: &[f64],
    sigma: f64,
) -> Result<GenEvalReport, GenError> {
    let exact = eval_lk_exact(model, phi, z, atoms, sigma, DEFAULT_GL_ORDER)?;
    let kf = atoms.len() as f64;
    let m2 = mean_abs_pow(atoms, 2);
    let m3 = mean_abs_pow(atoms, 3);
    Ok(match phi {
        TestFunctional::Slow(f) => {
            let approx = eval_l_slow(model, f, z, atoms);
            GenEvalReport {
                exact,
                slow_approx: Some(approx),
                fast_approx: None,
                residual: exact - approx,
                predicted_bound: 1.0 / (kf * kf) + m2 / kf + sigma * kf.sqrt() * m3,
            }
        }
        _ => {
            let approx = eval_fast_approx(model, phi, z, atoms, sigma).expect("fast functional");
            let pre = model.theta(z) * model.m2(z) / (kf * kf * sigma * sigma);
            GenEvalReport {
                exact,
                slow_approx: None,
                fast_approx: Some(approx),
                residual: exact - approx,
                predicted_bound: pre * (1.0 / kf.sqrt() + sigma * kf.powf(1.5) * m2 + m3 / kf),
            }
        }
    })
}

fn mean_abs_pow(atoms: &[f64], ell: i32) -> f64 {
    atoms.iter().map(|u| u.abs().powi(ell)).sum::<f64>() / atoms.len() as f64
}

/// Random centered state: K i.i.d. uniform atoms, recentered and scaled to M₂ = `m2`.
pub fn random_state<R: Rng + ?Sized>(k: usize, m2: f64, rng: &mut R) -> Vec<f64> {
    let mut u: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = u.iter().sum::<f64>() / k as f64;
    u.iter_mut().for_each(|v| *v -= mean);
    let cur = mean_abs_pow(&u, 2);
    let c = if cur > 0.0 { (m2 / cur).sqrt() } else { 0.0 };
    u.iter_mut().for_each(|v| *v *= c);
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ResidualKind {
    Slow,
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub k: usize,
    pub sigma: f64,
    /// Mean over states of the largest |residual| across the functional family.
    pub mean_abs_residual: f64,
    pub states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub kind: ResidualKind,
    /// σ = K^{-sigma_exponent}
    pub sigma_exponent: f64,
    pub rows: Vec<ResidualRow>,
    pub slope: f64,
    /// Exponents of the competing error terms, by name.
    pub predicted: Vec<(String, f64)>,
    /// Exponent the slope is held against (plus 0.3 slack).
    pub dominant: f64,
    pub pass: bool,
}

/// Fitted log-log slope of generator residuals against K, σ = K^{-a}.
/// Slow residuals use f(z) = z + sin z; fast residuals use ⟨x², μ⟩, ⟨x³, μ⟩,
/// ⟨x⁴, μ⟩ and ⟨x₁²x₂², μ²⟩, normalized by K²σ²/(θm₂).
pub fn residual_scaling(
    model: &ModelSpec,
    kind: ResidualKind,
    ks: &[usize],
    a: f64,
    z: f64,
    states_per_k: usize,
    m2: f64,
    seed: u64,
) -> ScalingReport {
    assert!(ks.len() >= 3, "need at least three K values");
    let f = |x: f64| x + x.sin();
    let d1 = |x: f64| 1.0 + x.cos();
    let d2 = |x: f64| -x.sin();
    let rows: Vec<ResidualRow> = ks
        .iter()
        .enumerate()
        .map(|(idx, &k)| {
            let sigma = (k as f64).powf(-a);
            let kf = k as f64;
            let norm = kf * kf * sigma * sigma / (model.theta(z) * model.m2(z));
            let residuals: Vec<f64> = (0..states_per_k)
                .into_par_iter()
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((idx * states_per_k + s) as u64);
                    let atoms = random_state(k, m2, &mut rng);
                    match kind {
                        ResidualKind::Slow => {
                            let phi = TestFunctional::Slow(C2 { f: &f, d1: &d1, d2: &d2 });
                            gen_eval_report(model, &phi, z, &atoms, sigma).unwrap().residual.abs()
                        }
                        ResidualKind::Fast => fast_family()
                            .into_iter()
                            .map(|p| {
                                let phi = TestFunctional::Polynomial(p);
                                gen_eval_report(model, &phi, z, &atoms, sigma).unwrap().residual.abs() * norm
                            })
                            .fold(0.0, f64::max),
                    }
                })
                .collect();
            ResidualRow { k, sigma, mean_abs_residual: mean_se(&residuals).0, states: states_per_k }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_abs_residual).collect();
    let slope = loglog_slope(&x, &y);
    let (predicted, dominant) = match kind {
        ResidualKind::Slow => (
            vec![
                ("1/K^2".to_string(), -2.0),
                ("M2/K".to_string(), -1.0),
                ("sigma*sqrt(K)*M3".to_string(), 0.5 - a),
            ],
            (0.5 - a).max(-1.0),
        ),
        ResidualKind::Fast => (
            vec![
                ("1/sqrt(K)".to_string(), -0.5),
                ("sigma*K^1.5*M2".to_string(), 1.5 - a),
                ("M3/K".to_string(), -1.0),
            ],
            -0.5,
        ),
    };
    ScalingReport { kind, sigma_exponent: a, rows, slope, predicted, dominant, pass: slope <= dominant + 0.3 }
}

fn fast_family() -> Vec<Poly> {
    vec![
        Poly::monomial(vec![2], 1.0),
        Poly::monomial(vec![3], 1.0),
        Poly::monomial(vec![4], 1.0),
        Poly::monomial(vec![2, 2], 1.0),
    ]
}

/// Drift and quadratic-variation estimates of M₂ from short IBM runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct M2Increments {
    pub reps: usize,
    /// Slow-time window δ.
    pub delta: f64,
    pub m2_0: f64,
    pub m4_0: f64,
    pub drift: f64,
    pub drift_se: f64,
    /// Var(ΔM₂)/δ
    pub qv_rate: f64,
    /// Standard error of the QV rate (delta method on the sample variance).
    pub qv_se: f64,
    /// -(2bM₂ - θm₂)/(K²σ²)
    pub drift_predicted: f64,
    /// 2b(M₄ - M₂²)/(K²σ²)
    pub qv_predicted: f64,
    /// Mean of ΔΦ - δ·L^K Φ for Φ = M₂, with its standard error.
    pub dynkin_mean: f64,
    pub dynkin_se: f64,
}

/// Run `reps` independent copies of the IBM from the state (z, atoms) for slow time δ.
pub fn m2_increments(
    model: &ModelSpec,
    z: f64,
    atoms: &[f64],
    sigma: f64,
    delta: f64,
    reps: usize,
    seed: u64,
) -> M2Increments {
    let k = atoms.len();
    let kf = k as f64;
    let s = sigma * kf.sqrt();
    let traits: Vec<f64> = atoms.iter().map(|u| z + s * u).collect();
    let m2_of = |tr: &[f64]| {
        let m = tr.iter().sum::<f64>() / kf;
        tr.iter().map(|x| ((x - m) / s).powi(2)).sum::<f64>() / kf
    };
    let m2_0 = mean_abs_pow(atoms, 2);
    let m4_0 = mean_abs_pow(atoms, 4);
    let nu_end = delta / (kf * sigma * sigma);
    let incs: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut pop = Population::new(traits.clone());
            let mut sim = Simulator::new(model, k, sigma);
            loop {
                let ev = sim.propose(&mut pop, &mut rng);
                if ev.time > nu_end {
                    break;
                }
                if ev.accepted {
                    crate::sim::apply(&mut pop, ev.kind, sigma);
                }
            }
            m2_of(&pop.traits) - m2_0
        })
        .collect();
    let (mean, se) = mean_se(&incs);
    let var = crate::stats::variance(&incs);
    let m4c = incs.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / reps as f64;
    let var_se = ((m4c - var * var) / reps as f64).max(0.0).sqrt();
    let b = model.b(z, z);
    let th = model.theta(z);
    let mm2 = model.m2(z);
    let ks2 = kf * kf * sigma * sigma;
    let exact = eval_lk_exact(model, &TestFunctional::Polynomial(Poly::monomial(vec![2], 1.0)), z, atoms, sigma, DEFAULT_GL_ORDER)
        .expect("valid state");
    M2Increments {
        reps,
        delta,
        m2_0,
        m4_0,
        drift: mean / delta,
        drift_se: se / delta,
        qv_rate: var / delta,
        qv_se: var_se / delta,
        drift_predicted: -(2.0 * b * m2_0 - th * mm2) / ks2,
        qv_predicted: 2.0 * b * (m4_0 - m2_0 * m2_0) / ks2,
        dynkin_mean: mean - delta * exact,
        dynkin_se: se,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id() -> (impl Fn(f64) -> f64, impl Fn(f64) -> f64, impl Fn(f64) -> f64) {
        (|x: f64| x, |_: f64| 1.0, |_: f64| 0.0)
    }

    fn constant_model() -> ModelSpec {
        ModelSpec::from_strings("2", "1", crate::model::MutationLaw::uniform(1.0)).unwrap()
    }

    #[test]
    fn order_below_two_rejected() {
        let m = constant_model();
        let phi = TestFunctional::Polynomial(Poly::monomial(vec![2], 1.0));
        assert_eq!(eval_lk_exact(&m, &phi, 0.0, &[-1.0, 1.0], 0.01, 1), Err(GenError::Order(1)));
    }

    #[test]
    fn identity_on_monomorphic_state_vanishes() {
        let m = ModelSpec::model_a();
        let (f, d1, d2) = id();
        let phi = TestFunctional::Slow(C2 { f: &f, d1: &d1, d2: &d2 });
        let v = eval_lk_exact(&m, &phi, 0.3, &[0.0; 5], 1e-3, 16).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn constant_cylinder_vanishes() {
        let m = ModelSpec::model_a();
        let one = |_: f64| 1.0;
        let zero = |_: f64| 0.0;
        let (f, d1, d2) = id();
        let phi = TestFunctional::Cylindrical {
            big_f: C2 { f: &f, d1: &d1, d2: &d2 },
            g: C2 { f: &one, d1: &zero, d2: &zero },
        };
        let v = eval_lk_exact(&m, &phi, 0.0, &[-1.0, 0.5, 0.5], 1e-2, 16).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn m2_drift_closed_form_for_constant_rates() {
        let m = constant_model();
        let atoms = [-1.0, 0.0, 1.0, 0.5, -0.5];
        let (k, sigma) = (atoms.len() as f64, 1e-2);
        let m2 = atoms.iter().map(|u| u * u).sum::<f64>() / k;
        let v = eval_lk_exact(&m, &TestFunctional::Polynomial(Poly::monomial(vec![2], 1.0)), 0.0, &atoms, sigma, 8)
            .unwrap();
        let expect = (m.m2(0.0) * (1.0 - 1.0 / k) - 4.0 * m2) / (k * k * sigma * sigma);
        assert!((v - expect).abs() < 1e-9 * expect.abs(), "{v} vs {expect}");
    }

    #[test]
    fn slow_examples() {
        let (f, d1, d2) = id();
        let c = C2 { f: &f, d1: &d1, d2: &d2 };
        assert_eq!(eval_l_slow(&constant_model(), &c, 0.0, &[-1.0, 1.0]), 0.0);
        let m = ModelSpec::model_a();
        let atoms = [-(0.5f64).sqrt() / (3.0f64).sqrt(), (0.5f64).sqrt() / (3.0f64).sqrt()];
        // M₂ = 1/6, ∂₁Fit = 2
        // ∂₁Fit is a central difference
        assert!((eval_l_slow(&m, &c, 0.0, &atoms) - 1.0 / 3.0).abs() < 1e-9);
        let doubled: Vec<f64> = atoms.iter().map(|u| 2.0 * u).collect();
        assert!((eval_l_slow(&m, &c, 0.0, &doubled) - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn random_state_is_centered_with_target_m2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_state(50, 0.7, &mut rng);
        assert!(u.iter().sum::<f64>().abs() < 1e-12);
        assert!((mean_abs_pow(&u, 2) - 0.7).abs() < 1e-12);
    }
}
