//! Fast component at a frozen slow variable: the N-particle Moran pre-limit of
//! the centered Fleming-Viot process, and the limit generator on cylindrical
//! and polynomial test functions.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::model::{ModelSpec, MutationLaw};
use crate::poly::{apply_k, apply_phi, b_operator, raw_moments, Poly};

/// Frozen-z particle dynamics in FV time units: every ordered pair resamples at
/// rate λ, every particle mutates at rate N/m₂ by a step h/√N with h ~ m(x, ·).
#[derive(Debug, Clone)]
pub struct FrozenDynamics {
    pub lambda: f64,
    pub law: MutationLaw,
    /// Trait at which the mutation law is evaluated.
    pub x: f64,
    pub m2: f64,
}

impl FrozenDynamics {
    pub fn new(lambda: f64, law: MutationLaw, x: f64) -> Self {
        let m2 = law.moment(x, 2);
        FrozenDynamics { lambda, law, x, m2 }
    }

    pub fn from_model(model: &ModelSpec, z: f64) -> Self {
        let x = model.domain.wrap(z);
        FrozenDynamics { lambda: model.lambda_rate(z), law: model.mutation.clone(), x, m2: model.m2(z) }
    }

    /// FV time per unit of ν-time: θm₂/N.
    pub fn fv_per_nu(model: &ModelSpec, z: f64, n: usize) -> f64 {
        model.theta(z) * model.m2(z) / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrozenConfig {
    pub z: f64,
    pub n: usize,
    /// Horizon in FV time.
    pub horizon: f64,
    /// Fraction of the horizon discarded before averaging.
    pub burn_in: f64,
    /// Spacing of recorded observations in FV time.
    pub obs_dt: f64,
}

impl FrozenConfig {
    pub fn new(z: f64, n: usize, horizon: f64) -> Self {
        FrozenConfig { z, n, horizon, burn_in: 0.2, obs_dt: horizon / 1000.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n < 2 {
            return Err(format!("N must be at least 2, got {}", self.n));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(format!("burn-in must lie in [0, 1), got {}", self.burn_in));
        }
        if !(self.horizon >= 0.0) || !(self.obs_dt > 0.0) {
            return Err("horizon must be non-negative and obs_dt positive".into());
        }
        Ok(())
    }
}

/// Moran particle system with running sums of u and u².
#[derive(Debug, Clone)]
pub struct MoranState {
    pub atoms: Vec<f64>,
    s1: f64,
    s2: f64,
    pub time: f64,
    pub events: u64,
    since_refresh: u64,
}

impl MoranState {
    pub fn new(atoms: Vec<f64>) -> Self {
        let mut s = MoranState { atoms, s1: 0.0, s2: 0.0, time: 0.0, events: 0, since_refresh: 0 };
        s.refresh();
        s
    }

    pub fn refresh(&mut self) {
        self.s1 = self.atoms.iter().sum();
        self.s2 = self.atoms.iter().map(|u| u * u).sum();
        self.since_refresh = 0;
    }

    pub fn mean(&self) -> f64 {
        self.s1 / self.atoms.len() as f64
    }

    /// Second moment of the centered state.
    pub fn m2(&self) -> f64 {
        let n = self.atoms.len() as f64;
        (self.s2 / n - (self.s1 / n).powi(2)).max(0.0)
    }

    pub fn centered(&self) -> Vec<f64> {
        let m = self.mean();
        self.atoms.iter().map(|u| u - m).collect()
    }

    #[inline]
    fn set(&mut self, i: usize, v: f64) {
        let old = self.atoms[i];
        self.s1 += v - old;
        self.s2 += v * v - old * old;
        self.atoms[i] = v;
        self.since_refresh += 1;
        if self.since_refresh >= 1 << 16 {
            self.refresh();
        }
    }

    /// One event of the frozen dynamics; returns the waiting time.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, dynamics: &FrozenDynamics, rng: &mut R) -> f64 {
        let nf = self.atoms.len() as f64;
        let e: f64 = rng.sample(Exp1);
        let dt = e / (dynamics.lambda * nf * nf + nf * nf / dynamics.m2);
        self.time += dt;
        self.events += 1;
        self.jump(dynamics, rng);
        dt
    }

    /// Run until `t_end`, returning the exact time integral of M₂ over
    /// `[t_from, t_end]`. `observe` is called at `*next_obs`, which then
    /// advances by `obs_dt`.
    #[allow(clippy::too_many_arguments)]
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        dynamics: &FrozenDynamics,
        t_end: f64,
        t_from: f64,
        next_obs: &mut f64,
        obs_dt: f64,
        rng: &mut R,
        mut observe: impl FnMut(f64, &MoranState),
    ) -> f64 {
        let nf = self.atoms.len() as f64;
        let rate = dynamics.lambda * nf * nf + nf * nf / dynamics.m2;
        let mut integral = 0.0;
        loop {
            let t0 = self.time;
            let e: f64 = rng.sample(Exp1);
            let t1 = t0 + e / rate;
            let stop = t1 >= t_end;
            while *next_obs < t1 && (*next_obs <= t_end) {
                observe(*next_obs, self);
                *next_obs += obs_dt;
            }
            let lo = t0.max(t_from);
            let hi = t1.min(t_end);
            if hi > lo {
                integral += self.m2() * (hi - lo);
            }
            if stop {
                // memoryless clock: discarding the overshoot keeps the law exact
                self.time = t_end;
                return integral;
            }
            self.jump(dynamics, rng);
            self.time = t1;
            self.events += 1;
        }
    }

    #[inline]
    fn jump<R: Rng + ?Sized>(&mut self, dynamics: &FrozenDynamics, rng: &mut R) {
        let n = self.atoms.len();
        let nf = n as f64;
        let r_res = dynamics.lambda * nf * nf;
        let r_mut = nf * nf / dynamics.m2;
        if rng.random::<f64>() * (r_res + r_mut) < r_res {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                let v = self.atoms[j];
                self.set(i, v);
            }
        } else {
            let i = rng.random_range(0..n);
            let h = dynamics.law.sample(dynamics.x, rng);
            let v = self.atoms[i] + h / nf.sqrt();
            self.set(i, v);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FastTrajectory {
    pub times: Vec<f64>,
    pub m2: Vec<f64>,
    /// Centered atoms at observation times, when requested.
    #[serde(skip)]
    pub snapshots: Vec<Vec<f64>>,
    /// Time average of M₂ after burn-in.
    pub time_avg_m2: f64,
    /// Time averages of M₂ over 8 equal post-burn-in batches.
    pub batch_means: Vec<f64>,
    pub batch_se: f64,
    /// Welch statistic between the first and last four batches.
    pub batch_t: f64,
    pub events: u64,
    pub lambda: f64,
}

pub const BATCHES: usize = 8;

/// Simulate the frozen system from `init` atoms.
pub fn run_frozen<R: Rng + ?Sized>(
    dynamics: &FrozenDynamics,
    cfg: &FrozenConfig,
    init: Vec<f64>,
    keep_snapshots: bool,
    rng: &mut R,
) -> FastTrajectory {
    assert_eq!(init.len(), cfg.n, "initial atom count must equal N");
    let mut st = MoranState::new(init);
    let burn = cfg.burn_in * cfg.horizon;
    let mut times = Vec::new();
    let mut m2 = Vec::new();
    let mut snapshots = Vec::new();
    let mut obs = |t: f64, s: &MoranState| {
        times.push(t);
        m2.push(s.m2());
        if keep_snapshots {
            snapshots.push(s.centered());
        }
    };
    let mut next_obs = 0.0;
    st.advance(dynamics, burn, f64::INFINITY, &mut next_obs, cfg.obs_dt, rng, &mut obs);
    let width = (cfg.horizon - burn) / BATCHES as f64;
    let mut batch_means = Vec::with_capacity(BATCHES);
    for b in 0..BATCHES {
        let from = burn + b as f64 * width;
        let to = if b + 1 == BATCHES { cfg.horizon } else { from + width };
        let integral = st.advance(dynamics, to, from, &mut next_obs, cfg.obs_dt, rng, &mut obs);
        batch_means.push(if width > 0.0 { integral / width } else { st.m2() });
    }
    let time_avg_m2 = batch_means.iter().sum::<f64>() / BATCHES as f64;
    let batch_se = crate::stats::mean_se(&batch_means).1;
    let (a, b) = batch_means.split_at(BATCHES / 2);
    let batch_t = crate::stats::welch_t(a, b);
    FastTrajectory {
        times,
        m2,
        snapshots,
        time_avg_m2,
        batch_means,
        batch_se,
        batch_t,
        events: st.events,
        lambda: dynamics.lambda,
    }
}

/// A scalar function with its first two derivatives.
pub struct C2<'a> {
    pub f: &'a dyn Fn(f64) -> f64,
    pub d1: &'a dyn Fn(f64) -> f64,
    pub d2: &'a dyn Fn(f64) -> f64,
}

fn mean_of(atoms: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    atoms.iter().map(|&u| f(u)).sum::<f64>() / atoms.len() as f64
}

/// L_FVc applied to F(⟨g, μ⟩), term by term over the atoms of μ.
pub fn eval_l_fvc_cyl(big_f: &C2, g: &C2, atoms: &[f64], lambda: f64) -> f64 {
    let m2 = mean_of(atoms, |u| u * u);
    let g_mean = mean_of(atoms, |u| (g.f)(u));
    let g1 = mean_of(atoms, |u| (g.d1)(u));
    let g2 = mean_of(atoms, |u| (g.d2)(u));
    let g1_id = mean_of(atoms, |u| (g.d1)(u) * u);
    let g_id = mean_of(atoms, |u| (g.f)(u) * u);
    let g_sq = mean_of(atoms, |u| (g.f)(u).powi(2));
    let first = (big_f.d1)(g_mean) * (0.5 * g2 + lambda * (g2 * m2 - 2.0 * g1_id));
    let second = lambda * (big_f.d2)(g_mean) * (g_sq - g_mean * g_mean + g1 * g1 * m2 - 2.0 * g1 * g_id);
    first + second
}

/// The polynomial J in n+1 variables with L_FVc P_{f,n}(μ) = ⟨J, μ^{n+1}⟩.
pub fn l_fvc_poly(p: &Poly, lambda: f64) -> Poly {
    let n = p.nvars();
    let mut out = b_operator(p, lambda).extend(n + 1);
    if n >= 2 {
        let mut phi_sum = Poly::zero(n - 1);
        for i in 1..=n {
            for j in 1..=n {
                if i != j {
                    phi_sum = phi_sum.add(&apply_phi(i, j, p).expect("i ≠ j"));
                }
            }
        }
        let pairs = (n * (n - 1)) as f64;
        out = out.add(&phi_sum.extend(n + 1).scale(lambda));
        out = out.add(&p.extend(n + 1).scale(-lambda * pairs));
    }
    for i in 1..=n {
        for j in 1..=n {
            out = out.add(&apply_k(i, j, p).scale(lambda));
        }
    }
    out
}

/// L_FVc P_{f,n}(μ) by exact polynomial manipulation and contraction with the
/// raw moments of μ.
pub fn eval_l_fvc_poly(p: &Poly, atoms: &[f64], lambda: f64) -> f64 {
    let j = l_fvc_poly(p, lambda);
    let deg = j.terms().flat_map(|(m, _)| m.to_vec()).max().unwrap_or(0);
    let raw = raw_moments(atoms, deg);
    j.integrate(|r| raw[r as usize])
}
