//! Model triple (b, θ, m), scaling parameters and the population state.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, BoundsReport, Expr, ExprError, Rect};
use crate::quadrature::GaussLegendre;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{slot}: {source}")]
    Expr {
        slot: &'static str,
        #[source]
        source: ExprError,
    },
    #[error("invalid model parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationFamily {
    Uniform,
    CosineBump,
}

#[derive(Debug, Clone)]
pub struct MutationLaw {
    pub family: MutationFamily,
    pub half_width: f64,
    /// Trait-dependent scale s(x); `None` means s ≡ 1.
    pub scale: Option<Expr>,
}

impl MutationLaw {
    pub fn uniform(half_width: f64) -> Self {
        MutationLaw { family: MutationFamily::Uniform, half_width, scale: None }
    }

    pub fn cosine_bump(half_width: f64) -> Self {
        MutationLaw { family: MutationFamily::CosineBump, half_width, scale: None }
    }

    pub fn scale_at(&self, x: f64) -> f64 {
        self.scale.as_ref().map_or(1.0, |s| s.eval1(x))
    }

    pub fn support(&self, x: f64) -> f64 {
        self.half_width * self.scale_at(x)
    }

    /// Density m(x, h).
    pub fn density(&self, x: f64, h: f64) -> f64 {
        let a = self.support(x);
        if h.abs() > a {
            return 0.0;
        }
        match self.family {
            MutationFamily::Uniform => 0.5 / a,
            MutationFamily::CosineBump => (1.0 + (std::f64::consts::PI * h / a).cos()) / (2.0 * a),
        }
    }

    /// ∫|h|^ℓ m(x, h) dh by Gauss-Legendre on each half of the support.
    pub fn moment_with(&self, x: f64, ell: u32, gl: &GaussLegendre) -> f64 {
        let a = self.support(x);
        2.0 * gl.integrate(0.0, a, |h| h.powi(ell as i32) * self.density(x, h))
    }

    pub fn moment(&self, x: f64, ell: u32) -> f64 {
        assert!((1..=8).contains(&ell), "moment order must be in 1..=8");
        self.moment_with(x, ell, &GaussLegendre::new(32))
    }

    /// Draw h ~ m(x, ·). Uniform by inversion, cosine bump by rejection from the uniform.
    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let a = self.support(x);
        match self.family {
            MutationFamily::Uniform => a * (2.0 * rng.random::<f64>() - 1.0),
            MutationFamily::CosineBump => loop {
                let h = a * (2.0 * rng.random::<f64>() - 1.0);
                let accept = 0.5 * (1.0 + (std::f64::consts::PI * h / a).cos());
                if rng.random::<f64>() < accept {
                    return h;
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Line,
    /// Periodic domain [x0 - 2R, x0 + 2R).
    Torus { center: f64, r: f64 },
}

impl Domain {
    pub fn wrap(&self, x: f64) -> f64 {
        match *self {
            Domain::Line => x,
            Domain::Torus { center, r } => {
                let lo = center - 2.0 * r;
                let w = lo + (x - lo).rem_euclid(4.0 * r);
                // rem_euclid may round up to the period itself
                if w >= center + 2.0 * r {
                    lo
                } else {
                    w
                }
            }
        }
    }

    pub fn period(&self) -> Option<f64> {
        match *self {
            Domain::Line => None,
            Domain::Torus { r, .. } => Some(4.0 * r),
        }
    }

    /// Signed minimal-arc difference `a - b`.
    pub fn diff(&self, a: f64, b: f64) -> f64 {
        match self.period() {
            None => a - b,
            Some(p) => {
                let d = (a - b).rem_euclid(p);
                if d >= 0.5 * p {
                    d - p
                } else {
                    d
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateBounds {
    pub b_lo: f64,
    pub b_hi: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

/// Grid used to verify the rate bounds.
#[derive(Debug, Clone, Copy)]
pub struct BoundsCheck {
    pub domain: Rect,
    pub grid_n: usize,
    pub margin: f64,
}

impl Default for BoundsCheck {
    fn default() -> Self {
        BoundsCheck { domain: Rect::square(-10.0, 10.0), grid_n: 101, margin: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub b: Expr,
    pub theta: Expr,
    pub mutation: MutationLaw,
    pub bounds: RateBounds,
    pub domain: Domain,
    pub b_report: BoundsReport,
    pub theta_report: BoundsReport,
}

impl ModelSpec {
    /// Validate b and θ on the check grid. Upper bounds default to the grid maxima.
    pub fn new(
        b: Expr,
        theta: Expr,
        mutation: MutationLaw,
        domain: Domain,
        check: BoundsCheck,
    ) -> Result<Self, ModelError> {
        if theta.uses(expr::Var::Y) {
            return Err(ModelError::Invalid("theta may only depend on x".into()));
        }
        if !(mutation.half_width > 0.0 && mutation.half_width.is_finite()) {
            return Err(ModelError::Invalid("mutation half-width must be positive".into()));
        }
        let b_report = expr::check_bounds(&b, check.domain, check.grid_n, check.margin)
            .map_err(|source| ModelError::Expr { slot: "b", source })?;
        let theta_report = expr::check_bounds(&theta, check.domain, check.grid_n, check.margin)
            .map_err(|source| ModelError::Expr { slot: "theta", source })?;
        if let Some(s) = &mutation.scale {
            expr::check_bounds(s, check.domain, check.grid_n, check.margin)
                .map_err(|source| ModelError::Expr { slot: "mutation scale", source })?;
        }
        let bounds = RateBounds {
            b_lo: b_report.min_observed,
            b_hi: b_report.max_observed,
            theta_lo: theta_report.min_observed,
            theta_hi: theta_report.max_observed,
        };
        Ok(ModelSpec { b, theta, mutation, bounds, domain, b_report, theta_report })
    }

    pub fn from_strings(b: &str, theta: &str, mutation: MutationLaw) -> Result<Self, ModelError> {
        let b = expr::parse(b).map_err(|source| ModelError::Expr { slot: "b", source })?;
        let theta = expr::parse_x(theta).map_err(|source| ModelError::Expr { slot: "theta", source })?;
        Self::new(b, theta, mutation, Domain::Line, BoundsCheck::default())
    }

    /// b = 2 + tanh(y - x), θ ≡ 1, uniform mutation on [-1, 1].
    pub fn model_a() -> Self {
        Self::from_strings("2 + tanh(y - x)", "1", MutationLaw::uniform(1.0)).expect("built-in model")
    }

    /// b = 2 + 0.5 sin(y), θ ≡ 1, uniform mutation on [-1, 1].
    pub fn model_b() -> Self {
        Self::from_strings("2 + 0.5*sin(y)", "1", MutationLaw::uniform(1.0)).expect("built-in model")
    }

    /// Override the upper bounds used as thinning envelope.
    pub fn with_upper_bounds(mut self, b_hi: f64, theta_hi: f64) -> Self {
        self.bounds.b_hi = b_hi;
        self.bounds.theta_hi = theta_hi;
        self
    }

    #[inline]
    pub fn b(&self, x: f64, y: f64) -> f64 {
        self.b.eval(self.domain.wrap(x), self.domain.wrap(y))
    }

    #[inline]
    pub fn theta(&self, x: f64) -> f64 {
        self.theta.eval1(self.domain.wrap(x))
    }

    /// Fit(y, x) = b(x, y) - b(y, x).
    pub fn fitness(&self, y: f64, x: f64) -> f64 {
        self.b(x, y) - self.b(y, x)
    }

    /// ∂₁Fit(z, z) = ∂₂b(z, z) - ∂₁b(z, z): central difference, one Richardson step.
    pub fn fitness_gradient_diag(&self, z: f64) -> f64 {
        let h = 1e-5f64.max(1e-5 * z.abs());
        let d = |h: f64| (self.fitness(z + h, z) - self.fitness(z - h, z)) / (2.0 * h);
        (4.0 * d(0.5 * h) - d(h)) / 3.0
    }

    pub fn mutation_moment(&self, x: f64, ell: u32) -> f64 {
        self.mutation.moment(self.domain.wrap(x), ell)
    }

    pub fn m2(&self, x: f64) -> f64 {
        self.mutation_moment(x, 2)
    }

    pub fn beta(&self, z: f64) -> f64 {
        self.theta(z) / self.b(z, z)
    }

    pub fn lambda_rate(&self, z: f64) -> f64 {
        self.b(z, z) / (self.theta(z) * self.m2(z))
    }

    pub fn sample_mutation<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        self.mutation.sample(self.domain.wrap(x), rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// σ < K^-(2+ε)
    Theorem,
    /// σ < K^-3/2 only
    Conjectured,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub k: usize,
    pub sigma: f64,
    pub eps: f64,
    pub t_slow: f64,
}

impl ScalingParams {
    pub fn new(k: usize, sigma: f64, eps: f64, t_slow: f64) -> Result<Self, ModelError> {
        if k < 2 {
            return Err(ModelError::Invalid(format!("K must be at least 2, got {k}")));
        }
        for (name, v) in [("sigma", sigma), ("eps", eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(t_slow >= 0.0 && t_slow.is_finite()) {
            return Err(ModelError::Invalid(format!("t_slow must be non-negative, got {t_slow}")));
        }
        Ok(ScalingParams { k, sigma, eps, t_slow })
    }

    pub fn regime(&self) -> Regime {
        let k = self.k as f64;
        if self.sigma < k.powf(-(2.0 + self.eps)) {
            Regime::Theorem
        } else if self.sigma < k.powf(-1.5) {
            Regime::Conjectured
        } else {
            Regime::Outside
        }
    }

    /// ν-time per unit of slow time.
    pub fn slow_to_nu(&self) -> f64 {
        1.0 / (self.k as f64 * self.sigma * self.sigma)
    }
}

/// Full recomputation period of the running sum.
pub const REFRESH_EVERY: u64 = 1 << 20;

/// K traits with a running sum. On a torus the traits are kept unwrapped
/// (lifted), so the mean and diameters are continuous.
#[derive(Debug, Clone)]
pub struct Population {
    pub traits: Vec<f64>,
    sum: f64,
    pub events: u64,
    pub time: f64,
    since_refresh: u64,
}

impl Population {
    pub fn new(traits: Vec<f64>) -> Self {
        let sum = traits.iter().sum();
        Population { traits, sum, events: 0, time: 0.0, since_refresh: 0 }
    }

    pub fn monomorphic(k: usize, x0: f64) -> Self {
        Self::new(vec![x0; k])
    }

    pub fn len(&self) -> usize {
        self.traits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.traits.len() as f64
    }

    pub fn recomputed_mean(&self) -> f64 {
        self.traits.iter().sum::<f64>() / self.traits.len() as f64
    }

    /// Set trait `i` to `v`, keeping the running sum in step.
    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.sum += v - self.traits[i];
        self.traits[i] = v;
        self.since_refresh += 1;
        if self.since_refresh >= REFRESH_EVERY {
            self.refresh();
        }
    }

    pub fn refresh(&mut self) {
        self.sum = self.traits.iter().sum();
        self.since_refresh = 0;
    }
}
