use cead_core::experiments::replicate_rng;
use cead_core::fv::{eval_l_fvc_cyl, eval_l_fvc_poly, run_frozen, FrozenConfig, FrozenDynamics, C2};
use cead_core::model::{ModelSpec, MutationLaw, Population};
use cead_core::observables::fast_state;
use cead_core::poly::Poly;
use cead_core::sim::Simulator;
use proptest::prelude::*;

fn centered(raw: Vec<f64>) -> Vec<f64> {
    let m = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|u| u - m).collect()
}

proptest! {
    // F(s) = a s + c s², g(u) = g0 + g1 u + g2 u² + g3 u³: both evaluators must agree.
    #[test]
    fn cylindrical_and_polynomial_generators_agree(
        raw in prop::collection::vec(-2.0f64..2.0, 2..12),
        a in -2.0f64..2.0, c in -2.0f64..2.0,
        gc in prop::array::uniform4(-1.5f64..1.5),
        lambda in 0.05f64..3.0,
    ) {
        let atoms = centered(raw);
        let gf = move |u: f64| gc[0] + gc[1] * u + gc[2] * u * u + gc[3] * u * u * u;
        let gd1 = move |u: f64| gc[1] + 2.0 * gc[2] * u + 3.0 * gc[3] * u * u;
        let gd2 = move |u: f64| 2.0 * gc[2] + 6.0 * gc[3] * u;
        let ff = move |s: f64| a * s + c * s * s;
        let fd1 = move |s: f64| a + 2.0 * c * s;
        let fd2 = move |_: f64| 2.0 * c;
        let cyl = eval_l_fvc_cyl(&C2 { f: &ff, d1: &fd1, d2: &fd2 }, &C2 { f: &gf, d1: &gd1, d2: &gd2 }, &atoms, lambda);

        // a g(x₁) + c g(x₁) g(x₂)
        let g1 = Poly::from_terms(2, (0..4u32).map(|e| (vec![e, 0], gc[e as usize])));
        let g2 = Poly::from_terms(2, (0..4u32).map(|e| (vec![0, e], gc[e as usize])));
        let p = g1.scale(a).add(&g1.mul(&g2).scale(c));
        let poly = eval_l_fvc_poly(&p, &atoms, lambda);
        prop_assert!((cyl - poly).abs() <= 1e-12 * cyl.abs().max(poly.abs()).max(1.0),
            "cyl {cyl} vs poly {poly}");
    }
}

#[test]
fn moran_stationary_second_moment() {
    let (n, lambda) = (50, 2.0);
    let dyn_ = FrozenDynamics::new(lambda, MutationLaw::uniform(1.0), 0.0);
    let cfg = FrozenConfig::new(0.0, n, 400.0);
    let target = (1.0 - 1.0 / n as f64) / (2.0 * lambda);
    let runs: Vec<f64> = (0..8)
        .map(|r| run_frozen(&dyn_, &cfg, vec![0.0; n], false, &mut replicate_rng(21, r)).time_avg_m2)
        .collect();
    let (mean, se) = cead_core::stats::mean_se(&runs);
    assert!((mean - target).abs() <= 4.0 * se.max(1e-3), "{mean} ± {se} vs {target}");
}

#[test]
fn ibm_second_moment_relaxes_at_rate_2b_over_k() {
    // constant rates: E M₂(t) = M*(1 - e^{-2bt/K}) in ν-time, M* = θm₂(1 - 1/K)/(2b)
    let (b, theta, k, sigma) = (2.0, 1.0, 20usize, 1.0);
    let model = ModelSpec::from_strings("2", "1", MutationLaw::uniform(1.0)).unwrap();
    let m_star = theta / 3.0 * (1.0 - 1.0 / k as f64) / (2.0 * b);
    let times: Vec<f64> = (1..=12).map(|i| i as f64).collect();
    let reps = 4000;
    let mut sums = vec![0.0; times.len()];
    for r in 0..reps {
        let mut rng = replicate_rng(22, r);
        let mut pop = Population::monomorphic(k, 0.0);
        let mut sim = Simulator::new(&model, k, sigma);
        let mut next = 0;
        while next < times.len() {
            let snapshot = fast_state(&pop, sigma, k).m2();
            let ev = sim.propose(&mut pop, &mut rng);
            while next < times.len() && ev.time > times[next] {
                sums[next] += snapshot;
                next += 1;
            }
            if ev.accepted {
                cead_core::sim::apply(&mut pop, ev.kind, sigma);
            }
        }
    }
    let ys: Vec<f64> = sums.iter().map(|s| (1.0 - s / reps as f64 / m_star).ln()).collect();
    let (_, slope) = cead_core::stats::linear_fit(&times, &ys);
    let rate = -slope;
    let want = 2.0 * b / k as f64;
    assert!((rate - want).abs() <= 0.1 * want, "rate {rate} vs {want}");
}
