//! Exact simulation of the resampling-mutation process by thinning.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::model::{ModelSpec, Population, ScalingParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// `i` dies and is replaced by a copy of `j`.
    Resampling { i: usize, j: usize },
    /// `i` moves by σh.
    Mutation { i: usize, h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    /// ν-time of the proposal.
    pub time: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub proposals: u64,
    pub resamplings: u64,
    pub mutations: u64,
    /// Proposals whose true rate exceeded the envelope.
    pub envelope_violations: u64,
}

/// K·b̄ + K·θ̄.
pub fn total_proposal_rate(model: &ModelSpec, k: usize) -> f64 {
    k as f64 * (model.bounds.b_hi + model.bounds.theta_hi)
}

pub struct Simulator<'m> {
    pub model: &'m ModelSpec,
    pub sigma: f64,
    rate: f64,
    p_resample: f64,
    pub stats: SimStats,
}

impl<'m> Simulator<'m> {
    pub fn new(model: &'m ModelSpec, k: usize, sigma: f64) -> Self {
        let (bb, tb) = (model.bounds.b_hi, model.bounds.theta_hi);
        Simulator {
            model,
            sigma,
            rate: total_proposal_rate(model, k),
            p_resample: bb / (bb + tb),
            stats: SimStats::default(),
        }
    }

    pub fn envelope(&self) -> f64 {
        self.rate
    }

    /// Propose one event at the envelope rate and apply it if accepted.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, pop: &mut Population, rng: &mut R) -> Event {
        let ev = self.propose(pop, rng);
        if ev.accepted {
            apply(pop, ev.kind, self.sigma);
        }
        ev
    }

    /// Like [`Simulator::step`] without touching the traits (time still advances).
    #[inline]
    pub fn propose<R: Rng + ?Sized>(&mut self, pop: &mut Population, rng: &mut R) -> Event {
        let k = pop.len();
        let e: f64 = rng.sample(Exp1);
        pop.time += e / self.rate;
        pop.events += 1;
        self.stats.proposals += 1;
        let b = &self.model.bounds;
        if rng.random::<f64>() < self.p_resample {
            let i = rng.random_range(0..k);
            let j = rng.random_range(0..k);
            let r = self.model.b(pop.traits[i], pop.traits[j]);
            if r > b.b_hi {
                self.stats.envelope_violations += 1;
            }
            let accepted = rng.random::<f64>() * b.b_hi < r;
            if accepted {
                self.stats.resamplings += 1;
            }
            Event { kind: EventKind::Resampling { i, j }, time: pop.time, accepted }
        } else {
            let i = rng.random_range(0..k);
            let x = pop.traits[i];
            let r = self.model.theta(x);
            if r > b.theta_hi {
                self.stats.envelope_violations += 1;
            }
            let accepted = rng.random::<f64>() * b.theta_hi < r;
            let h = if accepted { self.model.sample_mutation(x, rng) } else { 0.0 };
            if accepted {
                self.stats.mutations += 1;
            }
            Event { kind: EventKind::Mutation { i, h }, time: pop.time, accepted }
        }
    }
}

#[inline]
pub fn apply(pop: &mut Population, kind: EventKind, sigma: f64) {
    match kind {
        EventKind::Resampling { i, j } => {
            if i != j {
                let v = pop.traits[j];
                pop.set(i, v);
            }
        }
        EventKind::Mutation { i, h } => {
            let v = pop.traits[i] + sigma * h;
            pop.set(i, v);
        }
    }
}

/// Direct-method Gillespie over all K² + K channels. O(K²) per event; small-K oracle only.
pub fn direct_step<R: Rng + ?Sized>(
    model: &ModelSpec,
    pop: &mut Population,
    sigma: f64,
    rng: &mut R,
    apply_event: bool,
) -> Event {
    let k = pop.len();
    let mut rates = Vec::with_capacity(k * k + k);
    for i in 0..k {
        for j in 0..k {
            rates.push(model.b(pop.traits[i], pop.traits[j]) / k as f64);
        }
    }
    for i in 0..k {
        rates.push(model.theta(pop.traits[i]));
    }
    let total: f64 = rates.iter().sum();
    let e: f64 = rng.sample(Exp1);
    pop.time += e / total;
    pop.events += 1;
    let mut u = rng.random::<f64>() * total;
    let mut c = rates.len() - 1;
    for (n, r) in rates.iter().enumerate() {
        if u < *r {
            c = n;
            break;
        }
        u -= r;
    }
    let kind = if c < k * k {
        EventKind::Resampling { i: c / k, j: c % k }
    } else {
        let i = c - k * k;
        EventKind::Mutation { i, h: model.sample_mutation(pop.traits[i], rng) }
    };
    if apply_event {
        apply(pop, kind, sigma);
    }
    Event { kind, time: pop.time, accepted: true }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: ScalingParams,
    /// Observation times in slow time, increasing, within [0, T_slow].
    pub obs_grid: Vec<f64>,
    pub max_events: u64,
}

pub const DEFAULT_MAX_EVENTS: u64 = 2_000_000_000;

impl SimConfig {
    /// `n_obs + 1` equally spaced observation times on [0, T_slow].
    pub fn uniform(params: ScalingParams, n_obs: usize) -> Self {
        let obs_grid = if params.t_slow == 0.0 || n_obs == 0 {
            vec![0.0]
        } else {
            (0..=n_obs).map(|i| params.t_slow * i as f64 / n_obs as f64).collect()
        };
        SimConfig { params, obs_grid, max_events: DEFAULT_MAX_EVENTS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunOutcome {
    pub stats: SimStats,
    pub truncated: bool,
    pub final_nu_time: f64,
}

/// Advance `pop` to the slow-time horizon, calling `observe(t_slow, pop)` at each grid time.
/// The state is piecewise constant, so the state seen at a grid time is the one
/// left by the last event before it.
pub fn run<R: Rng + ?Sized>(
    model: &ModelSpec,
    pop: &mut Population,
    cfg: &SimConfig,
    rng: &mut R,
    mut observe: impl FnMut(f64, &Population),
) -> RunOutcome {
    let p = &cfg.params;
    let to_nu = p.slow_to_nu();
    let mut sim = Simulator::new(model, pop.len(), p.sigma);
    let t0 = pop.time;
    let mut truncated = false;
    let mut next = 0;
    while next < cfg.obs_grid.len() && cfg.obs_grid[next] <= 0.0 {
        observe(cfg.obs_grid[next], pop);
        next += 1;
    }
    let horizon = t0 + p.t_slow * to_nu;
    while next < cfg.obs_grid.len() {
        if sim.stats.proposals >= cfg.max_events {
            truncated = true;
            break;
        }
        let ev = sim.propose(pop, rng);
        while next < cfg.obs_grid.len() && ev.time > t0 + cfg.obs_grid[next] * to_nu {
            observe(cfg.obs_grid[next], pop);
            next += 1;
        }
        if ev.time > horizon {
            break;
        }
        if ev.accepted {
            apply(pop, ev.kind, p.sigma);
        }
    }
    RunOutcome { stats: sim.stats, truncated, final_nu_time: pop.time }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MutationLaw;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn envelope_examples() {
        let a = ModelSpec::model_a();
        assert_eq!(total_proposal_rate(&a, 100), 400.0);
        let c = ModelSpec::from_strings("2", "1", MutationLaw::uniform(1.0)).unwrap();
        assert_eq!(total_proposal_rate(&c, 2), 6.0);
        let mut sim = Simulator::new(&c, 2, 0.1);
        let mut pop = Population::new(vec![0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sim.step(&mut pop, &mut rng).accepted);
        }
    }

    #[test]
    fn monomorphic_resampling_is_noop() {
        let a = ModelSpec::model_a();
        let mut sim = Simulator::new(&a, 10, 0.1);
        let mut pop = Population::monomorphic(10, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let before = pop.traits.clone();
            let ev = sim.step(&mut pop, &mut rng);
            if let EventKind::Resampling { .. } = ev.kind {
                assert_eq!(pop.traits, before);
            }
            if pop.traits != before {
                break;
            }
        }
    }

    #[test]
    fn mean_increments_exact() {
        let a = ModelSpec::model_a();
        let sigma = 0.125;
        let mut sim = Simulator::new(&a, 8, sigma);
        let mut pop = Population::new((0..8).map(|i| i as f64 * 0.25).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let z = pop.mean();
            let before = pop.traits.clone();
            let ev = sim.step(&mut pop, &mut rng);
            if !ev.accepted {
                continue;
            }
            let expected = match ev.kind {
                EventKind::Resampling { i, j } => (before[j] - before[i]) / 8.0,
                EventKind::Mutation { h, .. } => sigma * h / 8.0,
            };
            assert!((pop.mean() - z - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_horizon_observes_initial_only() {
        let a = ModelSpec::model_a();
        let params = ScalingParams::new(10, 1e-2, 0.5, 0.0).unwrap();
        let cfg = SimConfig::uniform(params, 16);
        let mut pop = Population::monomorphic(10, 0.0);
        let mut seen = Vec::new();
        let out = run(&a, &mut pop, &cfg, &mut ChaCha8Rng::seed_from_u64(0), |t, p| seen.push((t, p.mean())));
        assert_eq!(seen, vec![(0.0, 0.0)]);
        assert_eq!(out.stats.proposals, 0);
    }

    #[test]
    fn run_observes_every_grid_point() {
        let a = ModelSpec::model_a();
        let params = ScalingParams::new(10, 1e-2, 0.5, 0.5).unwrap();
        let cfg = SimConfig::uniform(params, 8);
        let mut pop = Population::monomorphic(10, 0.0);
        let mut seen = Vec::new();
        run(&a, &mut pop, &cfg, &mut ChaCha8Rng::seed_from_u64(4), |t, _| seen.push(t));
        assert_eq!(seen, cfg.obs_grid);
    }

    #[test]
    fn budget_truncates() {
        let a = ModelSpec::model_a();
        let params = ScalingParams::new(10, 1e-3, 0.5, 1.0).unwrap();
        let mut cfg = SimConfig::uniform(params, 4);
        cfg.max_events = 1000;
        let mut pop = Population::monomorphic(10, 0.0);
        let out = run(&a, &mut pop, &cfg, &mut ChaCha8Rng::seed_from_u64(4), |_, _| {});
        assert!(out.truncated);
        assert_eq!(out.stats.proposals, 1000);
    }
}
