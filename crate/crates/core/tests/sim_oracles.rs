use cead_core::experiments::replicate_rng;
use cead_core::model::{ModelSpec, MutationLaw, Population, ScalingParams};
use cead_core::observables::Recorder;
use cead_core::sim::{self, direct_step, total_proposal_rate, EventKind, SimConfig, Simulator};
use rand::Rng;

/// Σ_ij b(x_i, x_j) / K + Σ_i θ(x_i).
fn true_rate(model: &ModelSpec, traits: &[f64]) -> f64 {
    let k = traits.len() as f64;
    let mut res = 0.0;
    for &x in traits {
        for &y in traits {
            res += model.b(x, y);
        }
    }
    res / k + traits.iter().map(|&x| model.theta(x)).sum::<f64>()
}

fn category(kind: EventKind, k: usize) -> usize {
    match kind {
        EventKind::Resampling { i, j } => i * k + j,
        EventKind::Mutation { i, .. } => k * k + i,
    }
}

#[test]
fn thinning_matches_direct_method() {
    // wide σ so that b varies strongly across pairs
    let model = ModelSpec::model_a();
    let k = 4;
    let sigma = 0.7;
    let state = vec![-1.0, -0.2, 0.4, 1.5];
    let n = 100_000;
    let mut rng = replicate_rng(1, 0);

    let mut thin = vec![0usize; k * k + k];
    let mut thin_wait = 0.0;
    let mut sim = Simulator::new(&model, k, sigma);
    for _ in 0..n {
        let mut pop = Population::new(state.clone());
        loop {
            let ev = sim.propose(&mut pop, &mut rng);
            if ev.accepted {
                thin[category(ev.kind, k)] += 1;
                thin_wait += ev.time;
                break;
            }
        }
    }
    let mut direct = vec![0usize; k * k + k];
    let mut direct_wait = 0.0;
    for _ in 0..n {
        let mut pop = Population::new(state.clone());
        let ev = direct_step(&model, &mut pop, sigma, &mut rng, false);
        direct[category(ev.kind, k)] += 1;
        direct_wait += ev.time;
    }
    let nf = n as f64;
    // exact channel probabilities, then a χ² goodness-of-fit for each sampler
    let mut probs = Vec::with_capacity(k * k + k);
    for &x in &state {
        for &y in &state {
            probs.push(model.b(x, y) / k as f64);
        }
    }
    probs.extend(state.iter().map(|&x| model.theta(x)));
    let total = true_rate(&model, &state);
    let chi2 = |counts: &[usize]| -> f64 {
        counts.iter().zip(&probs).map(|(&c, &r)| (c as f64 - nf * r / total).powi(2) / (nf * r / total)).sum()
    };
    // 19 degrees of freedom, 0.1% critical value
    for (name, counts) in [("thinning", &thin), ("direct", &direct)] {
        let x = chi2(counts);
        assert!(x < 43.82, "{name}: chi2 = {x}");
    }
    // both waiting times are Exp(total true rate)
    let se = (1.0 / total) / nf.sqrt();
    for w in [thin_wait / nf, direct_wait / nf] {
        assert!((w - 1.0 / total).abs() <= 4.0 * se, "{w} vs {}", 1.0 / total);
    }
}

#[test]
fn constant_rate_gaps_are_exponential() {
    let model = ModelSpec::from_strings("2", "1", MutationLaw::uniform(1.0)).unwrap();
    let k = 10;
    let rate = total_proposal_rate(&model, k);
    assert_eq!(rate, 30.0);
    let mut sim = Simulator::new(&model, k, 0.01);
    let mut pop = Population::monomorphic(k, 0.0);
    let mut rng = replicate_rng(2, 0);
    let n = 100_000;
    let mut gaps = Vec::with_capacity(n);
    let mut last = 0.0;
    for _ in 0..n {
        let ev = sim.step(&mut pop, &mut rng);
        assert!(ev.accepted);
        gaps.push(ev.time - last);
        last = ev.time;
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let f = 1.0 - (-rate * g).exp();
            (f - i as f64 / nf).abs().max(((i + 1) as f64 / nf - f).abs())
        })
        .fold(0.0, f64::max);
    // Kolmogorov 1% critical value
    assert!(d * nf.sqrt() < 1.628, "KS statistic {}", d * nf.sqrt());
}

#[test]
fn running_mean_drift_and_increment_decomposition() {
    let model = ModelSpec::model_a();
    let (k, sigma) = (50, 3e-2);
    let mut sim = Simulator::new(&model, k, sigma);
    let mut pop = Population::new((0..k).map(|i| 0.37 + 0.01 * i as f64).collect());
    let z0 = pop.mean();
    let mut rng = replicate_rng(3, 0);
    let mut increments = 0.0;
    for n in 0..1_000_000u64 {
        let ev = sim.propose(&mut pop, &mut rng);
        if ev.accepted {
            increments += match ev.kind {
                EventKind::Resampling { i, j } => (pop.traits[j] - pop.traits[i]) / k as f64,
                EventKind::Mutation { h, .. } => sigma * h / k as f64,
            };
            sim::apply(&mut pop, ev.kind, sigma);
        }
        if n % 10_000 == 0 {
            assert_eq!(pop.len(), k);
        }
    }
    assert!((pop.mean() - pop.recomputed_mean()).abs() <= 1e-9);
    assert!((pop.mean() - (z0 + increments)).abs() <= 1e-9);
}

#[test]
fn envelope_dominates_true_rate() {
    let model = ModelSpec::model_a();
    let k = 20;
    let mut rng = replicate_rng(4, 0);
    for _ in 0..1000 {
        let traits: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
        assert!(true_rate(&model, &traits) <= total_proposal_rate(&model, k));
    }
}

#[test]
fn same_seed_same_trajectory() {
    let model = ModelSpec::model_a();
    let params = ScalingParams::new(30, 1e-2, 0.5, 0.02).unwrap();
    let cfg = SimConfig::uniform(params, 20);
    let go = || {
        let mut pop = Population::monomorphic(30, 0.0);
        let mut rec = Recorder::new(params, model.domain);
        sim::run(&model, &mut pop, &cfg, &mut replicate_rng(8, 3), |t, p| rec.observe(t, p));
        rec.finish().rows
    };
    let (a, b) = (go(), go());
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].t_slow < w[1].t_slow));
}

#[test]
fn mutation_samplers_match_moments() {
    let n = 1_000_000;
    let mut rng = replicate_rng(9, 0);
    for (law, m2) in [
        (MutationLaw::uniform(1.5), 1.5f64.powi(2) / 3.0),
        (MutationLaw::cosine_bump(2.0), 4.0 * (1.0 / 3.0 - 2.0 / std::f64::consts::PI.powi(2))),
    ] {
        let xs: Vec<f64> = (0..n).map(|_| law.sample(0.0, &mut rng)).collect();
        let a = law.support(0.0);
        assert!(xs.iter().all(|h| h.abs() <= a));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sq: Vec<f64> = xs.iter().map(|h| h * h).collect();
        let (s2, s2_se) = cead_core::stats::mean_se(&sq);
        assert!(mean.abs() <= 4.0 * (m2 / n as f64).sqrt(), "mean {mean}");
        assert!((s2 - m2).abs() <= 4.0 * s2_se, "{s2} vs {m2}");
        assert!((law.moment(0.0, 2) - m2).abs() < 1e-12);
    }
}
