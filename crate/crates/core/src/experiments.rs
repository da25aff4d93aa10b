//! Run configuration, replicate orchestration and data emission.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cead::{self, CeadPath};
use crate::dual::{duality_check, Budget, DualityReport, FvSide};
use crate::expr;
use crate::fv::{run_frozen, FastTrajectory, FrozenConfig, FrozenDynamics};
use crate::generator::{m2_increments, random_state, residual_scaling, M2Increments, ResidualKind, ScalingReport};
use crate::model::{BoundsCheck, Domain, ModelError, ModelSpec, MutationFamily, MutationLaw, Population, Regime, ScalingParams};
use crate::observables::{fast_state, LadderDiag, Record, Recorder, Thresholds, Trajectory, CSV_HEADER};
use crate::poly::Poly;
use crate::sim::{self, SimConfig, Simulator};
use crate::stats::{mean_se, wilson_lower};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("event budget exceeded in {0} replicate(s)")]
    Budget(usize),
    #[error("I/O error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("schema mismatch in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    CeadCompare,
    FastEquilibrium,
    GeneratorCheck,
    DualCheck,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationCfg {
    #[serde(default = "default_family")]
    pub family: MutationFamily,
    #[serde(default = "one")]
    pub half_width: f64,
    /// Optional trait-dependent scale s(x).
    pub scale: Option<String>,
}

fn default_family() -> MutationFamily {
    MutationFamily::Uniform
}

fn one() -> f64 {
    1.0
}

impl Default for MutationCfg {
    fn default() -> Self {
        MutationCfg { family: MutationFamily::Uniform, half_width: 1.0, scale: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub b: String,
    pub theta: String,
    #[serde(default)]
    pub mutation: MutationCfg,
    #[serde(default = "line")]
    pub domain: Domain,
    #[serde(default)]
    pub x0: f64,
    /// Initial spread w₀: traits x₀ + σ√K·w₀·N(0,1). Zero means monomorphic.
    #[serde(default)]
    pub init_spread: f64,
    pub b_max: Option<f64>,
    pub theta_max: Option<f64>,
}

fn line() -> Domain {
    Domain::Line
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCfg {
    pub k: usize,
    /// Explicit σ; exclusive with `sigma_exponent`.
    pub sigma: Option<f64>,
    /// σ = K^{-a}.
    pub sigma_exponent: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "one")]
    pub t_slow: f64,
    #[serde(default = "default_n_obs")]
    pub n_obs: usize,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
}

fn default_eps() -> f64 {
    0.5
}
fn default_n_obs() -> usize {
    1000
}
fn default_max_events() -> u64 {
    sim::DEFAULT_MAX_EVENTS
}

impl ScalingCfg {
    pub fn sigma_for(&self, k: usize) -> Result<f64, ExperimentError> {
        match (self.sigma, self.sigma_exponent) {
            (Some(s), None) => Ok(s),
            (None, Some(a)) if a > 0.0 => Ok((k as f64).powf(-a)),
            (None, Some(a)) => Err(ExperimentError::Config(format!("sigma_exponent must be positive, got {a}"))),
            _ => Err(ExperimentError::Config("give exactly one of sigma or sigma_exponent".into())),
        }
    }

    pub fn params(&self, k: usize) -> Result<ScalingParams, ExperimentError> {
        Ok(ScalingParams::new(k, self.sigma_for(k)?, self.eps, self.t_slow)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastCfg {
    #[serde(default)]
    pub z: f64,
    #[serde(default = "default_fast_n")]
    pub n: usize,
    #[serde(default = "default_fast_horizon")]
    pub horizon: f64,
    #[serde(default = "default_burn")]
    pub burn_in: f64,
}

fn default_fast_n() -> usize {
    200
}
fn default_fast_horizon() -> f64 {
    200.0
}
fn default_burn() -> f64 {
    0.2
}

impl Default for FastCfg {
    fn default() -> Self {
        FastCfg { z: 0.0, n: 200, horizon: 200.0, burn_in: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorCfg {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_gen_exponents")]
    pub sigma_exponents: Vec<f64>,
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default = "default_state_m2")]
    pub m2: f64,
    #[serde(default = "default_gen_z")]
    pub z: f64,
    /// ν-time window of the M₂ increment estimator.
    #[serde(default = "default_delta_nu")]
    pub delta_nu: f64,
    #[serde(default = "default_drift_reps")]
    pub drift_reps: usize,
}

fn default_ks() -> Vec<usize> {
    vec![32, 64, 128, 256]
}
fn default_gen_exponents() -> Vec<f64> {
    vec![1.6, 2.2]
}
fn default_states() -> usize {
    8
}
fn default_state_m2() -> f64 {
    0.5
}
fn default_gen_z() -> f64 {
    0.5
}
fn default_delta_nu() -> f64 {
    0.5
}
fn default_drift_reps() -> usize {
    10_000
}

impl Default for GeneratorCfg {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualCfg {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "default_dual_t")]
    pub t: f64,
    #[serde(default = "default_dual_reps")]
    pub reps: usize,
    /// Particle count of the Fleming-Viot side.
    #[serde(default = "default_dual_n")]
    pub n: usize,
    /// Half-width of the uniform mutation law used by the particle side.
    #[serde(default = "default_fv_width")]
    pub fv_half_width: f64,
    /// Atoms of the initial centered measure, repeated cyclically to n particles.
    #[serde(default = "default_dual_atoms")]
    pub atoms: Vec<f64>,
    /// ξ₀ = x^p in one variable.
    #[serde(default = "default_xi_power")]
    pub xi_power: u32,
}

fn default_dual_t() -> f64 {
    0.1
}
fn default_dual_reps() -> usize {
    100_000
}
fn default_dual_n() -> usize {
    500
}
fn default_fv_width() -> f64 {
    3.0
}
fn default_dual_atoms() -> Vec<f64> {
    vec![-1.0, 1.0]
}
fn default_xi_power() -> u32 {
    2
}

impl Default for DualCfg {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfg {
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub replicates: usize,
    pub out_dir: Option<PathBuf>,
    pub model: ModelCfg,
    pub scaling: Option<ScalingCfg>,
    #[serde(default)]
    pub fast: FastCfg,
    #[serde(default)]
    pub generator: GeneratorCfg,
    #[serde(default)]
    pub dual: DualCfg,
    pub sweep: Option<SweepCfg>,
}

fn one_usize() -> usize {
    1
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        Self::parse(s, None)
    }

    /// Parse, optionally replacing the experiment tag, then validate.
    pub fn parse(s: &str, experiment: Option<Experiment>) -> Result<Self, ExperimentError> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(e) = experiment {
            cfg.experiment = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, experiment: Option<Experiment>) -> Result<Self, ExperimentError> {
        let s = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&s, experiment)
    }

    /// Schema checks plus model validation.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.replicates == 0 {
            return Err(ExperimentError::Config("replicates must be at least 1".into()));
        }
        build_model(&self.model)?;
        let needs_scaling = matches!(self.experiment, Experiment::Simulate | Experiment::CeadCompare | Experiment::Sweep);
        match (&self.scaling, needs_scaling) {
            (None, true) => return Err(ExperimentError::Config("missing [scaling] block".into())),
            (Some(s), _) => {
                s.params(s.k)?;
            }
            _ => {}
        }
        if self.experiment == Experiment::Sweep {
            let sw = self.sweep.as_ref().ok_or_else(|| ExperimentError::Config("missing [sweep] block".into()))?;
            if sw.ks.is_empty() {
                return Err(ExperimentError::Config("sweep.ks is empty".into()));
            }
            let s = self.scaling.as_ref().expect("checked");
            for &k in &sw.ks {
                s.params(k)?;
            }
        }
        if self.experiment == Experiment::FastEquilibrium {
            let f = &self.fast;
            FrozenConfig { z: f.z, n: f.n, horizon: f.horizon, burn_in: f.burn_in, obs_dt: f.horizon / 1000.0 }
                .validate()
                .map_err(ExperimentError::Config)?;
        }
        if self.experiment == Experiment::GeneratorCheck && self.generator.ks.len() < 3 {
            return Err(ExperimentError::Config("generator.ks needs at least three values".into()));
        }
        if self.experiment == Experiment::DualCheck {
            let d = &self.dual;
            if d.n < 2 || d.atoms.is_empty() || d.reps == 0 || !(d.t >= 0.0) || !(d.lambda >= 0.0) {
                return Err(ExperimentError::Config("invalid [dual] block".into()));
            }
        }
        Ok(())
    }
}

pub fn build_model(m: &ModelCfg) -> Result<ModelSpec, ExperimentError> {
    let b = expr::parse(&m.b).map_err(|e| ExperimentError::Config(format!("b: {e}")))?;
    let theta = expr::parse_x(&m.theta).map_err(|e| ExperimentError::Config(format!("theta: {e}")))?;
    let scale = match &m.mutation.scale {
        Some(s) => Some(expr::parse_x(s).map_err(|e| ExperimentError::Config(format!("mutation scale: {e}")))?),
        None => None,
    };
    let law = MutationLaw { family: m.mutation.family, half_width: m.mutation.half_width, scale };
    if let Domain::Torus { r, .. } = m.domain {
        if !(r > 0.0 && r.is_finite()) {
            return Err(ExperimentError::Config("torus radius must be positive".into()));
        }
    }
    let mut spec = ModelSpec::new(b, theta, law, m.domain, BoundsCheck::default())?;
    if m.b_max.is_some() || m.theta_max.is_some() {
        let bh = m.b_max.unwrap_or(spec.bounds.b_hi);
        let th = m.theta_max.unwrap_or(spec.bounds.theta_hi);
        spec = spec.with_upper_bounds(bh, th);
    }
    Ok(spec)
}

/// Replicate r of base seed s: ChaCha8 seeded from s on stream r.
pub fn replicate_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

pub fn initial_population(m: &ModelCfg, params: &ScalingParams, rng: &mut ChaCha8Rng) -> Population {
    if m.init_spread == 0.0 {
        return Population::monomorphic(params.k, m.x0);
    }
    let w = params.sigma * (params.k as f64).sqrt() * m.init_spread;
    let traits = (0..params.k)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            m.x0 + w * g
        })
        .collect();
    Population::new(traits)
}

#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub replicate: usize,
    pub trajectory: Trajectory,
    pub outcome: sim::RunOutcome,
}

/// One replicate of the IBM with observation at `n_obs + 1` grid points.
pub fn simulate_replicate(
    model: &ModelSpec,
    mcfg: &ModelCfg,
    params: ScalingParams,
    n_obs: usize,
    max_events: u64,
    seed: u64,
    r: usize,
) -> ReplicateRun {
    let mut rng = replicate_rng(seed, r as u64);
    let mut pop = initial_population(mcfg, &params, &mut rng);
    let mut cfg = SimConfig::uniform(params, n_obs);
    cfg.max_events = max_events;
    let mut rec = Recorder::new(params, model.domain);
    let outcome = sim::run(model, &mut pop, &cfg, &mut rng, |t, p| rec.observe(t, p));
    let mut trajectory = rec.finish();
    trajectory.truncated = outcome.truncated;
    ReplicateRun { replicate: r, trajectory, outcome }
}

pub fn emit_trajectory(rows: &[Record], path: &Path) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(|e| io_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Record>, ExperimentError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = rd.headers().map_err(|e| io_err(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(ExperimentError::Schema { path: path.to_path_buf(), msg: format!("header {header:?}") });
    }
    rd.deserialize()
        .collect::<Result<Vec<Record>, _>>()
        .map_err(|e| ExperimentError::Schema { path: path.to_path_buf(), msg: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub z_end: f64,
    pub m2_end: f64,
    /// Time average of M₂ over the observation grid.
    pub m2_avg: f64,
    pub sup_cead_error: Option<f64>,
    /// Largest support diameter in trait units, over the observation grid.
    pub sup_nu_diam: f64,
    pub tau_hat_hit: bool,
    pub tau_check_hit: bool,
    pub events: u64,
}

/// Endpoints and errors of one replicate, computed from its rows only.
pub fn replicate_row(
    replicate: usize,
    rows: &[Record],
    params: &ScalingParams,
    path: Option<&CeadPath>,
    domain: Domain,
) -> ReplicateRow {
    let last = rows.last().expect("at least one row");
    let sup_cead_error = path.map(|p| {
        let times: Vec<f64> = rows.iter().map(|r| r.t_slow).collect();
        let z: Vec<f64> = rows.iter().map(|r| r.z).collect();
        cead::compare(p, &times, &z, domain).map(|c| c.sup_error).unwrap_or(f64::NAN)
    });
    let scale = params.sigma * (params.k as f64).sqrt();
    ReplicateRow {
        replicate,
        z_end: last.z,
        m2_end: last.m2,
        m2_avg: rows.iter().map(|r| r.m2).sum::<f64>() / rows.len() as f64,
        sup_cead_error,
        sup_nu_diam: rows.iter().map(|r| r.diam * scale).fold(0.0, f64::max),
        tau_hat_hit: rows.iter().any(|r| r.tau_hat == 1),
        tau_check_hit: rows.iter().any(|r| r.tau_check == 1),
        events: last.events_so_far,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub k: usize,
    pub sigma: f64,
    pub eps: f64,
    pub t_slow: f64,
    pub regime: String,
    pub seed: u64,
    pub replicates: Vec<ReplicateRow>,
    pub mean_z_end: f64,
    pub se_z_end: f64,
    pub mean_m2_avg: f64,
    pub se_m2_avg: f64,
    pub mean_sup_cead_error: Option<f64>,
    pub se_sup_cead_error: Option<f64>,
    pub tau_hat_rate: f64,
    pub tau_check_rate: f64,
    pub total_events: u64,
    pub truncated: usize,
}

/// Aggregate per-replicate rows; rows are sorted by replicate index first.
pub fn aggregate(params: &ScalingParams, seed: u64, mut rows: Vec<ReplicateRow>, truncated: usize) -> RunSummary {
    assert!(!rows.is_empty(), "need at least one replicate");
    rows.sort_by_key(|r| r.replicate);
    let n = rows.len() as f64;
    let col = |f: &dyn Fn(&ReplicateRow) -> f64| mean_se(&rows.iter().map(f).collect::<Vec<_>>());
    let (mz, sz) = col(&|r| r.z_end);
    let (mm, sm) = col(&|r| r.m2_avg);
    let errs: Option<Vec<f64>> = rows.iter().map(|r| r.sup_cead_error).collect();
    let (me, se) = match errs {
        Some(e) => {
            let (m, s) = mean_se(&e);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    RunSummary {
        k: params.k,
        sigma: params.sigma,
        eps: params.eps,
        t_slow: params.t_slow,
        regime: regime_name(params.regime()).into(),
        seed,
        mean_z_end: mz,
        se_z_end: sz,
        mean_m2_avg: mm,
        se_m2_avg: sm,
        mean_sup_cead_error: me,
        se_sup_cead_error: se,
        tau_hat_rate: rows.iter().filter(|r| r.tau_hat_hit).count() as f64 / n,
        tau_check_rate: rows.iter().filter(|r| r.tau_check_hit).count() as f64 / n,
        total_events: rows.iter().map(|r| r.events).sum(),
        truncated,
        replicates: rows,
    }
}

/// Rebuild a summary from replicate CSV files (file i is replicate i).
pub fn aggregate_files(
    files: &[PathBuf],
    params: &ScalingParams,
    seed: u64,
    path: Option<&CeadPath>,
    domain: Domain,
) -> Result<RunSummary, ExperimentError> {
    if files.is_empty() {
        return Err(ExperimentError::Config("no replicate files".into()));
    }
    let mut rows = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let recs = read_trajectory(f)?;
        if recs.is_empty() {
            return Err(ExperimentError::Schema { path: f.clone(), msg: "no data rows".into() });
        }
        rows.push(replicate_row(i, &recs, params, path, domain));
    }
    Ok(aggregate(params, seed, rows, 0))
}

pub fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Theorem => "theorem",
        Regime::Conjectured => "conjectured",
        Regime::Outside => "outside",
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, s + "\n").map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub wall_clock_s: f64,
    pub per_replicate_s: Vec<f64>,
}

/// Replicates in parallel, CSV per replicate, `summary.json` and `timing.json`.
/// Returns `Budget` after writing everything if any replicate was truncated.
pub fn run_simulations(
    cfg: &RunConfig,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<RunSummary, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let s = cfg.scaling.as_ref().ok_or_else(|| ExperimentError::Config("missing [scaling] block".into()))?;
    let params = s.params(k)?;
    let path = cead::integrate(&model, cfg.model.x0, params.t_slow.max(f64::MIN_POSITIVE), cead::default_dt(params.t_slow))
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let start = std::time::Instant::now();
    let runs: Vec<(ReplicateRow, bool, f64)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let t0 = std::time::Instant::now();
            let run = simulate_replicate(&model, &cfg.model, params, s.n_obs, s.max_events, seed, r);
            let file = out.join(format!("rep_{r:03}.csv"));
            emit_trajectory(&run.trajectory.rows, &file)?;
            let row = replicate_row(r, &run.trajectory.rows, &params, Some(&path), model.domain);
            Ok((row, run.outcome.truncated, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let truncated = runs.iter().filter(|r| r.1).count();
    let per = runs.iter().map(|r| r.2).collect();
    let summary = aggregate(&params, seed, runs.into_iter().map(|r| r.0).collect(), truncated);
    write_json(&summary, &out.join("summary.json"))?;
    write_json(&Timing { wall_clock_s: start.elapsed().as_secs_f64(), per_replicate_s: per }, &out.join("timing.json"))?;
    if truncated > 0 {
        return Err(ExperimentError::Budget(truncated));
    }
    Ok(summary)
}

/// `cead.csv` with the ODE path, then the replicate runs.
pub fn run_cead_compare(cfg: &RunConfig, seed: u64, out: &Path) -> Result<RunSummary, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let s = cfg.scaling.as_ref().ok_or_else(|| ExperimentError::Config("missing [scaling] block".into()))?;
    let path = cead::integrate(&model, cfg.model.x0, s.t_slow, cead::default_dt(s.t_slow))
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let file = out.join("cead.csv");
    let mut w = csv::Writer::from_path(&file).map_err(|e| io_err(&file, e))?;
    w.write_record(["t_slow", "z"]).map_err(|e| io_err(&file, e))?;
    for (t, z) in path.times.iter().zip(&path.z) {
        w.write_record([t.to_string(), z.to_string()]).map_err(|e| io_err(&file, e))?;
    }
    w.flush().map_err(|e| io_err(&file, e))?;
    run_simulations(cfg, s.k, seed, out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub ks: Vec<usize>,
    pub runs: Vec<RunSummary>,
}

pub fn run_sweep(cfg: &RunConfig, seed: u64, out: &Path) -> Result<SweepSummary, ExperimentError> {
    let ks = cfg.sweep.as_ref().ok_or_else(|| ExperimentError::Config("missing [sweep] block".into()))?.ks.clone();
    let mut runs = Vec::new();
    let mut truncated = 0;
    for &k in &ks {
        match run_simulations(cfg, k, seed, &out.join(format!("K{k}"))) {
            Ok(s) => runs.push(s),
            Err(ExperimentError::Budget(n)) => {
                truncated += n;
                let f = out.join(format!("K{k}")).join("summary.json");
                let s = fs::read_to_string(&f).map_err(|e| io_err(&f, e))?;
                runs.push(serde_json::from_str(&s).map_err(|e| io_err(&f, e))?);
            }
            Err(e) => return Err(e),
        }
    }
    let summary = SweepSummary { ks, runs };
    write_json(&summary, &out.join("sweep_summary.json"))?;
    if truncated > 0 {
        return Err(ExperimentError::Budget(truncated));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct FastSummary {
    pub z: f64,
    pub n: usize,
    pub lambda: f64,
    pub time_avg_m2: f64,
    /// (1 - 1/N)/(2λ), the stationary mean of M₂ for the particle system.
    pub moran_stationary_m2: f64,
    /// 1/λ
    pub inverse_lambda: f64,
    pub batch_means: Vec<f64>,
    pub batch_se: f64,
    pub batch_t: f64,
    pub events: u64,
}

pub fn fast_equilibrium(model: &ModelSpec, f: &FastCfg, seed: u64) -> (FastSummary, FastTrajectory) {
    let dynamics = FrozenDynamics::from_model(model, f.z);
    let cfg = FrozenConfig { z: f.z, n: f.n, horizon: f.horizon, burn_in: f.burn_in, obs_dt: f.horizon / 1000.0 };
    let mut rng = replicate_rng(seed, 0);
    let traj = run_frozen(&dynamics, &cfg, vec![0.0; f.n], false, &mut rng);
    let lambda = dynamics.lambda;
    let s = FastSummary {
        z: f.z,
        n: f.n,
        lambda,
        time_avg_m2: traj.time_avg_m2,
        moran_stationary_m2: (1.0 - 1.0 / f.n as f64) / (2.0 * lambda),
        inverse_lambda: 1.0 / lambda,
        batch_means: traj.batch_means.clone(),
        batch_se: traj.batch_se,
        batch_t: traj.batch_t,
        events: traj.events,
    };
    (s, traj)
}

pub fn run_fast_equilibrium(cfg: &RunConfig, seed: u64, out: &Path) -> Result<FastSummary, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let (s, traj) = fast_equilibrium(&model, &cfg.fast, seed);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let file = out.join("fast.csv");
    let mut w = csv::Writer::from_path(&file).map_err(|e| io_err(&file, e))?;
    w.write_record(["t_fv", "M2"]).map_err(|e| io_err(&file, e))?;
    for (t, m) in traj.times.iter().zip(&traj.m2) {
        w.write_record([t.to_string(), m.to_string()]).map_err(|e| io_err(&file, e))?;
    }
    w.flush().map_err(|e| io_err(&file, e))?;
    write_json(&s, &out.join("fast_summary.json"))?;
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorSummary {
    pub slow: Vec<ScalingReport>,
    pub fast: Vec<ScalingReport>,
    pub m2_increments: M2Increments,
}

pub fn run_generator_check(cfg: &RunConfig, seed: u64, out: &Path) -> Result<GeneratorSummary, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let g = &cfg.generator;
    let mut slow = Vec::new();
    let mut fast = Vec::new();
    for &a in &g.sigma_exponents {
        slow.push(residual_scaling(&model, ResidualKind::Slow, &g.ks, a, g.z, g.states, g.m2, seed));
        fast.push(residual_scaling(&model, ResidualKind::Fast, &g.ks, a, g.z, g.states, g.m2, seed));
    }
    let (k, sigma) = match &cfg.scaling {
        Some(s) => (s.k, s.sigma_for(s.k)?),
        None => (100, 3e-4),
    };
    let atoms = random_state(k, g.m2, &mut replicate_rng(seed, u64::MAX));
    let delta = g.delta_nu * k as f64 * sigma * sigma;
    let inc = m2_increments(&model, g.z, &atoms, sigma, delta, g.drift_reps, seed);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let file = out.join("residuals.csv");
    let mut w = csv::Writer::from_path(&file).map_err(|e| io_err(&file, e))?;
    w.write_record(["kind", "sigma_exponent", "k", "sigma", "mean_abs_residual"]).map_err(|e| io_err(&file, e))?;
    for r in slow.iter().chain(&fast) {
        for row in &r.rows {
            w.write_record([
                format!("{:?}", r.kind).to_lowercase(),
                r.sigma_exponent.to_string(),
                row.k.to_string(),
                row.sigma.to_string(),
                row.mean_abs_residual.to_string(),
            ])
            .map_err(|e| io_err(&file, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&file, e))?;
    let s = GeneratorSummary { slow, fast, m2_increments: inc };
    write_json(&s, &out.join("generator.json"))?;
    Ok(s)
}

/// Both sides of the stopped duality identity for ξ₀ = x^p against the configured measure.
pub fn dual_check(d: &DualCfg, seed: u64) -> DualityReport {
    let mean = d.atoms.iter().sum::<f64>() / d.atoms.len() as f64;
    let atoms: Vec<f64> = (0..d.n).map(|i| d.atoms[i % d.atoms.len()] - mean).collect();
    let fv = FvSide { dynamics: FrozenDynamics::new(d.lambda, MutationLaw::uniform(d.fv_half_width), 0.0), atoms };
    let xi = Poly::monomial(vec![d.xi_power], 1.0);
    let mut r1 = replicate_rng(seed, 0);
    let mut r2 = replicate_rng(seed, 1);
    duality_check(&fv, &xi, d.t, d.reps, &Budget::default(), &mut r1, &mut r2)
}

pub fn run_dual_check(cfg: &RunConfig, seed: u64, out: &Path) -> Result<DualityReport, ExperimentError> {
    let r = dual_check(&cfg.dual, seed);
    write_json(&r, &out.join("dual.json"))?;
    Ok(r)
}

/// One first-transition trial of the M₂ ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderTrial {
    pub start_level: usize,
    /// Level L₁ after the first exit, if the exit happened before the horizon.
    pub next_level: Option<usize>,
    /// Slow time of the first exit.
    pub t_exit: Option<f64>,
    /// Slow time at which the diameter threshold was first exceeded.
    pub t_check: Option<f64>,
    /// [{L₁ = ℓ-1} ∩ {τ̌ > T₁ ≥ Kσ²}] ∪ {T₁ ≥ τ̌}
    pub event: bool,
}

/// Run from `pop` until the first exit of M₂ from the start level's interval,
/// checking M₂ and the diameter after every accepted event. With `stop_at_check`
/// false the diameter threshold is recorded but the run continues to the exit.
pub fn ladder_trial(
    model: &ModelSpec,
    params: &ScalingParams,
    mut pop: Population,
    stop_at_check: bool,
    rng: &mut ChaCha8Rng,
) -> LadderTrial {
    let k = params.k;
    let th = Thresholds::new(params);
    let fs0 = fast_state(&pop, params.sigma, k);
    let diag = LadderDiag::new(k, params.eps, fs0.m2());
    let start = diag.level;
    let (lo, hi) = diag.interval(start);
    let to_nu = params.slow_to_nu();
    let horizon = params.t_slow * to_nu;
    let mut sim = Simulator::new(model, k, params.sigma);
    let t0 = pop.time;
    let mut t_check = if fs0.diam > th.diam { Some(0.0) } else { None };
    let mut exit: Option<(f64, f64)> = None;
    while exit.is_none() && !(stop_at_check && t_check.is_some()) {
        let ev = sim.propose(&mut pop, rng);
        if ev.time - t0 > horizon {
            break;
        }
        if !ev.accepted {
            continue;
        }
        sim::apply(&mut pop, ev.kind, params.sigma);
        let fs = fast_state(&pop, params.sigma, k);
        let t_slow = (ev.time - t0) / to_nu;
        if t_check.is_none() && fs.diam > th.diam {
            t_check = Some(t_slow);
        }
        let m2 = fs.m2();
        if m2 < lo || m2 >= hi {
            exit = Some((t_slow, m2));
        }
    }
    // L₁ ranges over ℕ including 0, with u₀ = 0
    let next_level = exit.map(|(_, m2)| {
        if m2 <= 1.0 {
            0
        } else {
            diag.level_for(m2)
        }
    });
    let t_exit = exit.map(|e| e.0);
    let k_sigma2 = k as f64 * params.sigma * params.sigma;
    let down_branch = match (next_level, t_exit) {
        (Some(l), Some(t1)) => l + 1 == start && t1 >= k_sigma2 && t_check.is_none_or(|tc| tc > t1),
        _ => false,
    };
    let check_branch = match (t_check, t_exit) {
        (Some(tc), Some(t1)) => t1 >= tc,
        (Some(_), None) => true,
        _ => false,
    };
    LadderTrial { start_level: start, next_level, t_exit, t_check, event: down_branch || check_branch }
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderSummary {
    pub trials: usize,
    pub start_level: usize,
    pub events: usize,
    pub downward: usize,
    pub censored: usize,
    pub event_wilson_lower: f64,
    pub downward_wilson_lower: f64,
}

pub fn summarize_ladder(trials: &[LadderTrial]) -> LadderSummary {
    let n = trials.len();
    let events = trials.iter().filter(|t| t.event).count();
    let downward = trials
        .iter()
        .filter(|t| t.next_level.is_some_and(|l| l < t.start_level))
        .count();
    LadderSummary {
        trials: n,
        start_level: trials.first().map_or(0, |t| t.start_level),
        events,
        downward,
        censored: trials.iter().filter(|t| t.t_exit.is_none()).count(),
        event_wilson_lower: wilson_lower(events, n, 1.645),
        downward_wilson_lower: wilson_lower(downward, n, 1.645),
    }
}
