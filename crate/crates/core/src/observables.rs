//! Slow component, centered dilated fast component, stopping times and the
//! threshold ladder.

use serde::{Deserialize, Serialize};

use crate::model::{Domain, Population, ScalingParams};

/// Mean trait ⟨id, ν⟩.
pub fn slow_component(pop: &Population) -> f64 {
    pop.mean()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastState {
    /// uᵢ = (xᵢ - z) / (σ√K)
    pub atoms: Vec<f64>,
    /// M₁..M₆ as mean |u|^ℓ; index 0 holds M₁.
    pub moments: [f64; 6],
    pub m3_signed: f64,
    pub m1_signed: f64,
    /// max uᵢ - min uᵢ
    pub diam: f64,
}

impl FastState {
    pub fn from_traits(traits: &[f64], z: f64, sigma: f64, k: usize) -> Self {
        let scale = 1.0 / (sigma * (k as f64).sqrt());
        let atoms: Vec<f64> = traits.iter().map(|x| (x - z) * scale).collect();
        Self::from_atoms(atoms)
    }

    /// Atoms are taken as given (not re-centered).
    pub fn from_atoms(atoms: Vec<f64>) -> Self {
        let n = atoms.len() as f64;
        let mut m = [0.0; 6];
        let mut m1s = 0.0;
        let mut m3s = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &u in &atoms {
            let a = u.abs();
            let mut p = 1.0;
            for slot in m.iter_mut() {
                p *= a;
                *slot += p;
            }
            m1s += u;
            m3s += u * u * u;
            lo = lo.min(u);
            hi = hi.max(u);
        }
        for slot in m.iter_mut() {
            *slot /= n;
        }
        FastState { atoms, moments: m, m3_signed: m3s / n, m1_signed: m1s / n, diam: hi - lo }
    }

    /// M_ℓ for ℓ in 1..=6.
    pub fn m(&self, ell: usize) -> f64 {
        self.moments[ell - 1]
    }

    pub fn m2(&self) -> f64 {
        self.moments[1]
    }

    /// Diameter of the support of ν, i.e. σ√K·Diam(μ).
    pub fn nu_diam(&self, sigma: f64, k: usize) -> f64 {
        sigma * (k as f64).sqrt() * self.diam
    }
}

/// Centered dilated state of a population.
pub fn fast_state(pop: &Population, sigma: f64, k: usize) -> FastState {
    FastState::from_traits(&pop.traits, pop.mean(), sigma, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// τ̂: M₂ ≥ K^ε
    pub m2: f64,
    /// τ̌: Diam > 1 / (σ K^((3+ε)/2))
    pub diam: f64,
}

impl Thresholds {
    pub fn new(p: &ScalingParams) -> Self {
        let k = p.k as f64;
        Thresholds { m2: k.powf(p.eps), diam: 1.0 / (p.sigma * k.powf(0.5 * (3.0 + p.eps))) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StopFlags {
    pub tau_hat_hit: bool,
    pub tau_check_hit: bool,
    pub tau_hat_time: Option<f64>,
    pub tau_check_time: Option<f64>,
}

impl StopFlags {
    /// Fold in an observation; flags never reset.
    pub fn observe(&mut self, fs: &FastState, th: &Thresholds, t_slow: f64) {
        if !self.tau_hat_hit && fs.m2() >= th.m2 {
            self.tau_hat_hit = true;
            self.tau_hat_time = Some(t_slow);
        }
        if !self.tau_check_hit && fs.diam > th.diam {
            self.tau_check_hit = true;
            self.tau_check_time = Some(t_slow);
        }
    }
}

/// Flags for a single snapshot.
pub fn stop_flags(fs: &FastState, params: &ScalingParams) -> StopFlags {
    let mut f = StopFlags::default();
    f.observe(fs, &Thresholds::new(params), 0.0);
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub t_slow: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderDiag {
    /// K^(ε/2)
    pub unit: f64,
    pub level: usize,
    pub log: Vec<Transition>,
}

impl LadderDiag {
    pub fn new(k: usize, eps: f64, m2_initial: f64) -> Self {
        let unit = (k as f64).powf(0.5 * eps);
        let mut d = LadderDiag { unit, level: 1, log: Vec::new() };
        d.level = d.level_for(m2_initial);
        d
    }

    /// u₀ = 0, u_ℓ = 3^ℓ K^(ε/2).
    pub fn u(&self, ell: usize) -> f64 {
        if ell == 0 {
            0.0
        } else {
            3f64.powi(ell as i32) * self.unit
        }
    }

    /// I_ℓ = [u_{ℓ-1}, u_{ℓ+1})
    pub fn interval(&self, ell: usize) -> (f64, f64) {
        (self.u(ell.saturating_sub(1)), self.u(ell + 1))
    }

    /// Smallest ℓ ≥ 1 with M₂ ≤ 2u_ℓ + 1.
    pub fn level_for(&self, m2: f64) -> usize {
        let mut ell = 1;
        while m2 > 2.0 * self.u(ell) + 1.0 {
            ell += 1;
        }
        ell
    }

    /// Log a transition when M₂ leaves the current interval.
    pub fn update(&mut self, m2: f64, t_slow: f64) -> Option<Transition> {
        let (lo, hi) = self.interval(self.level);
        if m2 >= lo && m2 < hi {
            return None;
        }
        let direction = if m2 >= hi { Direction::Up } else { Direction::Down };
        let to = self.level_for(m2);
        let tr = Transition { from: self.level, to, t_slow, direction };
        self.level = to;
        self.log.push(tr);
        Some(tr)
    }
}

/// Functional form of [`LadderDiag::update`].
pub fn ladder_update(mut diag: LadderDiag, fs: &FastState, t_slow: f64) -> LadderDiag {
    diag.update(fs.m2(), t_slow);
    diag
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t_slow: f64,
    pub z: f64,
    #[serde(rename = "M1")]
    pub m1: f64,
    #[serde(rename = "M2")]
    pub m2: f64,
    #[serde(rename = "M3")]
    pub m3: f64,
    #[serde(rename = "M4")]
    pub m4: f64,
    #[serde(rename = "M5")]
    pub m5: f64,
    #[serde(rename = "M6")]
    pub m6: f64,
    #[serde(rename = "M3_signed")]
    pub m3_signed: f64,
    pub diam: f64,
    pub tau_hat: u8,
    pub tau_check: u8,
    pub ladder_level: usize,
    pub events_so_far: u64,
}

pub const CSV_HEADER: &str =
    "t_slow,z,M1,M2,M3,M4,M5,M6,M3_signed,diam,tau_hat,tau_check,ladder_level,events_so_far";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<Record>,
    pub flags: StopFlags,
    pub transitions: Vec<Transition>,
    /// Largest ν-diameter seen at observation times.
    pub sup_nu_diam: f64,
    pub truncated: bool,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_slow).collect()
    }

    pub fn z(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.z).collect()
    }
}

/// Builds trajectory rows from population snapshots.
pub struct Recorder {
    params: ScalingParams,
    domain: Domain,
    thresholds: Thresholds,
    ladder: Option<LadderDiag>,
    pub traj: Trajectory,
}

impl Recorder {
    pub fn new(params: ScalingParams, domain: Domain) -> Self {
        Recorder {
            params,
            domain,
            thresholds: Thresholds::new(&params),
            ladder: None,
            traj: Trajectory::default(),
        }
    }

    pub fn observe(&mut self, t_slow: f64, pop: &Population) {
        let fs = fast_state(pop, self.params.sigma, self.params.k);
        let m2 = fs.m2();
        let ladder = self.ladder.get_or_insert_with(|| LadderDiag::new(self.params.k, self.params.eps, m2));
        if let Some(tr) = ladder.update(m2, t_slow) {
            self.traj.transitions.push(tr);
        }
        let level = ladder.level;
        self.traj.flags.observe(&fs, &self.thresholds, t_slow);
        self.traj.sup_nu_diam = self.traj.sup_nu_diam.max(fs.nu_diam(self.params.sigma, self.params.k));
        let m = fs.moments;
        self.traj.rows.push(Record {
            t_slow,
            z: self.domain.wrap(pop.mean()),
            m1: m[0],
            m2: m[1],
            m3: m[2],
            m4: m[3],
            m5: m[4],
            m6: m[5],
            m3_signed: fs.m3_signed,
            diam: fs.diam,
            tau_hat: self.traj.flags.tau_hat_hit as u8,
            tau_check: self.traj.flags.tau_check_hit as u8,
            ladder_level: level,
            events_so_far: pop.events,
        });
    }

    pub fn finish(self) -> Trajectory {
        self.traj
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slow_component_examples() {
        assert_eq!(slow_component(&Population::monomorphic(5, 1.7)), 1.7);
        assert_eq!(slow_component(&Population::new(vec![-1.0, 3.0])), 1.0);
    }

    #[test]
    fn monomorphic_fast_state() {
        let fs = fast_state(&Population::monomorphic(7, 2.5), 0.1, 7);
        assert!(fs.atoms.iter().all(|&u| u == 0.0));
        assert_eq!(fs.moments, [0.0; 6]);
        assert_eq!(fs.diam, 0.0);
        let f = stop_flags(&fs, &ScalingParams::new(7, 0.1, 0.5, 1.0).unwrap());
        assert!(!f.tau_hat_hit && !f.tau_check_hit);
    }

    #[test]
    fn two_point_fast_state() {
        let fs = fast_state(&Population::new(vec![-1.0, 1.0]), 0.1, 2);
        let a = 1.0 / (0.1 * 2f64.sqrt());
        assert!((fs.atoms[1] - a).abs() < 1e-12 && (fs.atoms[0] + a).abs() < 1e-12);
        assert!((fs.m2() - 50.0).abs() < 1e-10);
        assert!((fs.diam - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn thresholds_examples() {
        let p = ScalingParams::new(16, 1e-3, 0.5, 1.0).unwrap();
        let th = Thresholds::new(&p);
        assert!((th.m2 - 4.0).abs() < 1e-12);
        assert!((th.diam - 7.8125).abs() < 1e-9);
        let fs = FastState::from_atoms(vec![-5f64.sqrt(), 5f64.sqrt()]);
        assert!(stop_flags(&fs, &p).tau_hat_hit);
    }

    #[test]
    fn flags_are_sticky() {
        let p = ScalingParams::new(16, 1e-3, 0.5, 1.0).unwrap();
        let th = Thresholds::new(&p);
        let mut f = StopFlags::default();
        f.observe(&FastState::from_atoms(vec![-3.0, 3.0]), &th, 0.1);
        assert!(f.tau_hat_hit);
        f.observe(&FastState::from_atoms(vec![0.0, 0.0]), &th, 0.2);
        assert!(f.tau_hat_hit);
        assert_eq!(f.tau_hat_time, Some(0.1));
    }

    #[test]
    fn ladder_thresholds() {
        let d = LadderDiag::new(16, 0.5, 0.0);
        assert_eq!((d.u(1), d.u(2)), (6.0, 18.0));
        assert_eq!(d.level, 1);
        let d = LadderDiag::new(256, 0.5, 0.0);
        assert_eq!((d.u(1), d.u(2)), (12.0, 36.0));
    }

    #[test]
    fn ladder_jump_up() {
        // K^(ε/2) = 4: u₁ = 12, u₂ = 36, 2u₂ + 1 = 73
        let mut d = LadderDiag::new(256, 0.5, 10.0);
        assert_eq!(d.level, 1);
        let tr = d.update(40.0, 0.5).unwrap();
        assert_eq!((tr.from, tr.to, tr.direction), (1, 2, Direction::Up));
        // K^(ε/2) = 2: u₂ = 18, u₃ = 54, so 40 lands on level 3
        let mut d = LadderDiag::new(16, 0.5, 10.0);
        assert_eq!(d.update(40.0, 0.5).unwrap().to, 3);
    }

    #[test]
    fn ladder_stays_inside() {
        let mut d = LadderDiag::new(256, 0.5, 1.0);
        for m2 in [0.0, 5.0, 20.0, 35.9] {
            assert!(d.update(m2, 0.0).is_none());
        }
        assert!(d.log.is_empty());
    }

    #[test]
    fn ladder_down() {
        let mut d = LadderDiag::new(256, 0.5, 60.0);
        assert_eq!(d.level, 2);
        assert_eq!(d.interval(2), (12.0, 108.0));
        let tr = d.update(11.0, 1.0).unwrap();
        assert_eq!((tr.to, tr.direction), (1, Direction::Down));
    }

    #[test]
    fn header_matches_record_fields() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(Record {
            t_slow: 0.0,
            z: 0.0,
            m1: 0.0,
            m2: 0.0,
            m3: 0.0,
            m4: 0.0,
            m5: 0.0,
            m6: 0.0,
            m3_signed: 0.0,
            diam: 0.0,
            tau_hat: 0,
            tau_check: 0,
            ladder_level: 1,
            events_so_far: 0,
        })
        .unwrap();
        let s = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(s.lines().next().unwrap(), CSV_HEADER);
    }
}
