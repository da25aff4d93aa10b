//! Dual process of the centered Fleming-Viot process on polynomial test functions:
//! the Ornstein-Uhlenbeck-type semigroup T_λ⁽ⁿ⁾, the birth-death chain M(t) with
//! jump operators Φᵢⱼ / Kᵢⱼ, and a Monte-Carlo check of the first-jump-stopped
//! duality identity.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;
use thiserror::Error;

use crate::fv::{FrozenDynamics, MoranState};
use crate::poly::{apply_k, apply_phi, Poly};
use crate::stats::mean_se;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("polynomial budget exceeded: {what} = {value} > {limit}")]
    Budget { what: &'static str, value: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub max_degree: u32,
    pub max_terms: usize,
    pub max_vars: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_degree: 8, max_terms: 10_000, max_vars: 6 }
    }
}

impl Budget {
    pub fn check(&self, p: &Poly) -> Result<(), DualError> {
        if p.nvars() > self.max_vars {
            return Err(DualError::Budget { what: "variables", value: p.nvars(), limit: self.max_vars });
        }
        if p.degree() > self.max_degree {
            return Err(DualError::Budget {
                what: "degree",
                value: p.degree() as usize,
                limit: self.max_degree as usize,
            });
        }
        if p.len() > self.max_terms {
            return Err(DualError::Budget { what: "terms", value: p.len(), limit: self.max_terms });
        }
        Ok(())
    }
}

/// Helmert-type orthogonal matrix: first column 1/√n, column k ≥ 2 has
/// 1/√(k(k-1)) in rows 1..k-1, -√((k-1)/k) in row k and zeros below.
pub fn helmert(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        p[(i, 0)] = 1.0 / (n as f64).sqrt();
    }
    for k in 2..=n {
        let kf = k as f64;
        for i in 0..k - 1 {
            p[(i, k - 1)] = 1.0 / (kf * (kf - 1.0)).sqrt();
        }
        p[(k - 1, k - 1)] = -((kf - 1.0) / kf).sqrt();
    }
    p
}

/// (1 - e^{-a t}) / a, continuous at a = 0.
fn one_minus_exp_over(a: f64, t: f64) -> f64 {
    if a == 0.0 {
        t
    } else {
        -(-a * t).exp_m1() / a
    }
}

/// Mean map A and covariance Σ of the semigroup: T_t f(x) = E f(Ax + G), G ~ N(0, Σ).
pub fn semigroup_params(n: usize, t: f64, lambda: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let nf = n as f64;
    let c = -(-2.0 * lambda * nf * t).exp_m1() / nf;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - c } else { -c });
    let p = helmert(n);
    let mut d = DMatrix::zeros(n, n);
    d[(0, 0)] = one_minus_exp_over(4.0 * lambda * nf, t);
    for k in 1..n {
        d[(k, k)] = t;
    }
    // P is orthogonal, so P⁻¹ = Pᵀ
    let sigma = &p * d * p.transpose();
    (a, sigma)
}

/// Centered Gaussian moments E[G^β] by Isserlis recursion.
pub struct GaussMoments<'a> {
    cov: &'a DMatrix<f64>,
    memo: HashMap<Vec<u32>, f64>,
}

impl<'a> GaussMoments<'a> {
    pub fn new(cov: &'a DMatrix<f64>) -> Self {
        GaussMoments { cov, memo: HashMap::new() }
    }

    pub fn moment(&mut self, beta: &[u32]) -> f64 {
        let total: u32 = beta.iter().sum();
        if total == 0 {
            return 1.0;
        }
        if total % 2 == 1 {
            return 0.0;
        }
        if let Some(v) = self.memo.get(beta) {
            return *v;
        }
        // E[G_i G^β'] = Σ_j β'_j Σ_ij E[G^{β' - e_j}]
        let i = beta.iter().position(|&b| b > 0).expect("non-zero multi-index");
        let mut rest = beta.to_vec();
        rest[i] -= 1;
        let mut v = 0.0;
        for j in 0..rest.len() {
            if rest[j] == 0 {
                continue;
            }
            let c = self.cov[(i, j)];
            if c == 0.0 {
                continue;
            }
            let mult = rest[j] as f64;
            rest[j] -= 1;
            v += mult * c * self.moment(&rest);
            rest[j] += 1;
        }
        self.memo.insert(beta.to_vec(), v);
        v
    }
}

/// T_λ⁽ⁿ⁾(t)p as a polynomial, via x ↦ Ax + G and Gaussian moment contraction.
pub fn semigroup_apply(t: f64, lambda: f64, p: &Poly) -> Poly {
    if t == 0.0 || p.is_zero() {
        return p.clone();
    }
    let n = p.nvars();
    let (a, sigma) = semigroup_params(n, t, lambda);
    // linear forms L_k = Σ_j A_kj x_j + g_k in 2n variables (x first, then g)
    let forms: Vec<Poly> = (0..n)
        .map(|k| {
            let mut l = Poly::var(2 * n, n + k);
            for j in 0..n {
                l.add_term(unit(2 * n, j), a[(k, j)]);
            }
            l
        })
        .collect();
    let mut powers: HashMap<(usize, u32), Poly> = HashMap::new();
    let mut expanded = Poly::zero(2 * n);
    for (mono, c) in p.terms() {
        let mut term = Poly::constant(2 * n, c);
        for (k, &e) in mono.iter().enumerate() {
            if e == 0 {
                continue;
            }
            let pk = powers.entry((k, e)).or_insert_with(|| forms[k].pow(e));
            term = term.mul(pk);
        }
        expanded = expanded.add(&term);
    }
    let mut gm = GaussMoments::new(&sigma);
    let mut out = Poly::zero(n);
    for (mono, c) in expanded.terms() {
        let (xs, gs) = mono.split_at(n);
        let m = gm.moment(gs);
        if m != 0.0 {
            out.add_term(xs.to_vec(), c * m);
        }
    }
    out
}

fn unit(n: usize, i: usize) -> Vec<u32> {
    let mut m = vec![0; n];
    m[i] = 1;
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum JumpKind {
    /// Kᵢⱼ (1-based), one more variable
    Up { i: usize, j: usize },
    /// Φᵢⱼ (1-based), one fewer variable
    Down { i: usize, j: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualJump {
    pub time: f64,
    pub kind: JumpKind,
    pub m_after: usize,
}

#[derive(Debug, Clone)]
pub struct DualState {
    pub m: usize,
    pub xi: Poly,
    pub elapsed: f64,
    /// ∫₀ᵗ M(u)² du
    pub int_m2: f64,
    pub log: Vec<DualJump>,
    /// Piecewise-constant levels of M as (interval length, level).
    pub segments: Vec<(f64, usize)>,
}

impl DualState {
    pub fn new(xi: Poly) -> Self {
        DualState { m: xi.nvars(), xi, elapsed: 0.0, int_m2: 0.0, log: Vec::new(), segments: Vec::new() }
    }

    pub fn weight(&self, lambda: f64) -> f64 {
        (lambda * self.int_m2).exp()
    }
}

/// Run the dual from `xi0` (in M₀ = `xi0.nvars()` variables) until `horizon`
/// or until `max_jumps` jumps have happened, whichever comes first.
pub fn simulate_dual<R: Rng + ?Sized>(
    xi0: &Poly,
    lambda: f64,
    horizon: f64,
    max_jumps: Option<usize>,
    budget: &Budget,
    rng: &mut R,
) -> Result<DualState, DualError> {
    budget.check(xi0)?;
    let mut st = DualState::new(xi0.clone());
    loop {
        let n = st.m as f64;
        let up = lambda * n * n;
        let down = lambda * n * (n - 1.0);
        let total = up + down;
        let wait = if total > 0.0 { rng.sample::<f64, _>(Exp1) / total } else { f64::INFINITY };
        let done_by_count = max_jumps.is_some_and(|k| st.log.len() >= k);
        if done_by_count || st.elapsed + wait >= horizon {
            let dt = horizon - st.elapsed;
            if done_by_count {
                return Ok(st);
            }
            st.xi = semigroup_apply(dt, lambda, &st.xi);
            st.int_m2 += dt * n * n;
            st.segments.push((dt, st.m));
            st.elapsed = horizon;
            return Ok(st);
        }
        st.xi = semigroup_apply(wait, lambda, &st.xi);
        st.int_m2 += wait * n * n;
        st.segments.push((wait, st.m));
        st.elapsed += wait;
        let kind = if rng.random::<f64>() * total < up {
            let i = rng.random_range(1..=st.m);
            let j = rng.random_range(1..=st.m);
            st.xi = apply_k(i, j, &st.xi);
            st.m += 1;
            JumpKind::Up { i, j }
        } else {
            let i = rng.random_range(1..=st.m);
            let mut j = rng.random_range(1..st.m);
            if j >= i {
                j += 1;
            }
            st.xi = apply_phi(i, j, &st.xi).expect("i ≠ j by construction");
            st.m -= 1;
            JumpKind::Down { i, j }
        };
        st.log.push(DualJump { time: st.elapsed, kind, m_after: st.m });
        budget.check(&st.xi)?;
    }
}

/// Simulate only the chain M(t); returns the number of jumps on [0, t].
pub fn birth_death_jumps<R: Rng + ?Sized>(m0: usize, lambda: f64, t: f64, rng: &mut R) -> usize {
    let mut m = m0 as f64;
    let mut now = 0.0;
    let mut jumps = 0;
    loop {
        let up = lambda * m * m;
        let down = lambda * m * (m - 1.0);
        if up + down == 0.0 {
            return jumps;
        }
        now += rng.sample::<f64, _>(Exp1) / (up + down);
        if now > t {
            return jumps;
        }
        jumps += 1;
        if rng.random::<f64>() * (up + down) < up {
            m += 1.0;
        } else {
            m -= 1.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityReport {
    pub t: f64,
    pub lambda: f64,
    pub reps: usize,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// |lhs - rhs| / sqrt(lhs_se² + rhs_se²)
    pub z_score: f64,
    pub aborted: usize,
}

/// Settings of the particle side of [`duality_check`].
#[derive(Debug, Clone)]
pub struct FvSide {
    pub dynamics: FrozenDynamics,
    /// Initial atoms; their count is the particle number N.
    pub atoms: Vec<f64>,
}

/// Monte-Carlo estimates of both sides of
/// E⟨ξ₀, X^{M₀}_{t∧τ₁}⟩ = ⟨E[ξ^{(M₀+1)}_{t∧τ₁} exp(λ∫M²)], μ^{M₀+1}⟩,
/// where τ₁ is the first jump of the dual chain, drawn independently of X.
pub fn duality_check<R: Rng + ?Sized>(
    fv: &FvSide,
    xi0: &Poly,
    t: f64,
    reps: usize,
    budget: &Budget,
    rng_fv: &mut R,
    rng_dual: &mut R,
) -> DualityReport {
    let lambda = fv.dynamics.lambda;
    let m0 = xi0.nvars() as f64;
    let jump_rate = lambda * m0 * m0 + lambda * m0 * (m0 - 1.0);
    let mut lhs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let tau1 = if jump_rate > 0.0 { rng_fv.sample::<f64, _>(Exp1) / jump_rate } else { f64::INFINITY };
        let s = t.min(tau1);
        let mut st = MoranState::new(fv.atoms.clone());
        let mut next_obs = f64::INFINITY;
        st.advance(&fv.dynamics, s, f64::INFINITY, &mut next_obs, f64::INFINITY, rng_fv, |_, _| {});
        lhs.push(xi0.integrate_atoms(&st.centered()));
    }
    let mut rhs = Vec::with_capacity(reps);
    let mut aborted = 0;
    for _ in 0..reps {
        match simulate_dual(xi0, lambda, t, Some(1), budget, rng_dual) {
            Ok(st) => rhs.push(st.xi.integrate_atoms(&fv.atoms) * st.weight(lambda)),
            Err(_) => aborted += 1,
        }
    }
    let (l, lse) = mean_se(&lhs);
    let (r, rse) = mean_se(&rhs);
    let s = (lse * lse + rse * rse).sqrt();
    let z_score = if s > 0.0 { (l - r).abs() / s } else if l == r { 0.0 } else { f64::INFINITY };
    DualityReport { t, lambda, reps, lhs: l, lhs_se: lse, rhs: r, rhs_se: rse, z_score, aborted }
}
