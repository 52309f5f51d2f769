//! Configuration, seeded Monte Carlo sweeps and result files.
//!
//! Every trial owns an independent RNG bundle keyed by (master seed, trial
//! index), trials run on a rayon pool and are folded in index order, so a
//! sweep is reproducible bit for bit whatever the number of workers.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{
    aggregate, baseline_detection_probability, collision_probability, complexity_counts,
    expected_code_load, AnalyticsError, RunMetrics,
};
use crate::channel::NetworkGeometry;
use crate::protocol::{
    attempts_until_detected, run_ra_round, BiasMode, Fading, PowerMode, ProtocolError, RaParams,
    RngBundle, Scenario, ScenarioConfig, TrialMetrics, World,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("sweep point {point}: {source}")]
    Point {
        point: String,
        #[source]
        source: ProtocolError,
    },
    #[error("sweep point {point}: {source}")]
    Analytic {
        point: String,
        #[source]
        source: AnalyticsError,
    },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("nothing to emit")]
    NoRows,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of cells: 1 (isolated) or 9 (3×3 grid).
    pub cells: usize,
    /// Cell side D, metres.
    pub cell_side_m: f64,
    /// Minimum UE to BS distance, metres.
    pub min_distance_m: f64,
    /// Bandwidth B, Hz.
    pub bandwidth_hz: f64,
    pub n_fft: usize,
    /// Potential UEs per cell |I|.
    pub population: u64,
    /// UE density in UE/km²; overrides `population` when set.
    pub density_per_km2: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let g = NetworkGeometry::default();
        Self {
            cells: g.num_cells,
            cell_side_m: g.cell_side,
            min_distance_m: g.min_distance,
            bandwidth_hz: g.bandwidth,
            n_fft: g.n_fft,
            population: 2500,
            density_per_km2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodesConfig {
    /// Time-code length Q.
    pub q: usize,
    /// Frequency-code length N.
    pub n: usize,
}

impl Default for CodesConfig {
    fn default() -> Self {
        Self { q: 2, n: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub rho_min_w: f64,
    pub rho_max_w: f64,
    pub rho_dl_w: f64,
    /// Noise power per resource element, dBm.
    pub noise_dbm: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        let p = RaParams::default();
        Self {
            rho_min_w: p.rho_min,
            rho_max_w: p.rho_max,
            rho_dl_w: p.rho_dl,
            noise_dbm: -97.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub p_active: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// "auto" or { fixed = value } in noise-normalised units.
    pub decision_bias: BiasMode,
    pub snr_floor_db: f64,
    pub max_attempts: u32,
    /// Mean number of skipped RA blocks before a retry.
    pub backoff_mean: f64,
    pub power_mode: PowerMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let p = RaParams::default();
        Self {
            p_active: p.p_active,
            delta1: p.delta1,
            delta2: p.delta2,
            decision_bias: p.bias,
            snr_floor_db: p.snr_floor_db,
            max_attempts: p.max_attempts,
            backoff_mean: p.backoff_mean,
            power_mode: PowerMode::Ensemble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Exponential correlation factor r; 0 selects uncorrelated fading.
    pub correlation: f64,
    pub intercell: bool,
    pub interferers_per_cell: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            correlation: 0.0,
            intercell: false,
            interferers_per_cell: 10,
        }
    }
}

/// Complete simulation input. Absent keys take the reference defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub trials: u64,
    /// RA blocks run per trial.
    pub rounds: u32,
    /// BS antenna counts to simulate.
    pub antennas: Vec<usize>,
    pub network: NetworkConfig,
    pub codes: CodesConfig,
    pub power: PowerConfig,
    pub protocol: ProtocolConfig,
    pub channel: ChannelConfig,
    pub output: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 1000,
            rounds: 1,
            antennas: vec![100],
            network: NetworkConfig::default(),
            codes: CodesConfig::default(),
            power: PowerConfig::default(),
            protocol: ProtocolConfig::default(),
            channel: ChannelConfig::default(),
            output: None,
        }
    }
}

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl SimConfig {
    pub fn geometry(&self) -> NetworkGeometry {
        NetworkGeometry {
            cell_side: self.network.cell_side_m,
            min_distance: self.network.min_distance_m,
            bandwidth: self.network.bandwidth_hz,
            n_fft: self.network.n_fft,
            num_cells: self.network.cells,
            inter_site: self.network.cell_side_m,
        }
    }

    /// |I|, from the density when one is given.
    pub fn population(&self) -> u64 {
        match self.network.density_per_km2 {
            Some(mu) => (mu * (self.network.cell_side_m / 1000.0).powi(2)).round() as u64,
            None => self.network.population,
        }
    }

    pub fn noise_var(&self) -> f64 {
        dbm_to_watts(self.power.noise_dbm)
    }

    pub fn params(&self) -> RaParams {
        let p = &self.protocol;
        RaParams {
            p_active: p.p_active,
            rho_min: self.power.rho_min_w,
            rho_max: self.power.rho_max_w,
            rho_dl: self.power.rho_dl_w,
            delta1: p.delta1,
            delta2: p.delta2,
            bias: p.decision_bias,
            snr_floor_db: p.snr_floor_db,
            max_attempts: p.max_attempts,
            backoff_mean: p.backoff_mean,
        }
    }

    /// Protocol-level scenario for one point of the grid.
    pub fn scenario(&self, m_ant: usize) -> std::result::Result<Scenario, ProtocolError> {
        let r = self.channel.correlation;
        Scenario::new(ScenarioConfig {
            geometry: self.geometry(),
            population: self.population() as usize,
            m_ant,
            q_len: self.codes.q,
            n_len: self.codes.n,
            noise_var: self.noise_var(),
            fading: if r == 0.0 {
                Fading::Uncorrelated
            } else {
                Fading::Exponential { r }
            },
            interferers_per_cell: if self.channel.intercell {
                self.channel.interferers_per_cell
            } else {
                0
            },
            params: self.params(),
            power_mode: self.protocol.power_mode,
            forced_pair: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.antennas.is_empty() {
            return bad("antennas must list at least one M");
        }
        if !self.power.noise_dbm.is_finite() {
            return bad("noise_dbm must be finite");
        }
        if let Some(mu) = self.network.density_per_km2 {
            if !(mu >= 0.0 && mu.is_finite()) {
                return bad("density_per_km2 must be a non-negative number");
            }
        }
        if self.channel.intercell && self.network.cells != 9 {
            return bad("inter-cell interference needs cells = 9");
        }
        for &m in &self.antennas {
            self.scenario(m)
                .map_err(|e| HarnessError::Invalid(format!("M = {m}: {e}")))?;
        }
        Ok(())
    }

    /// Canonical TOML text, the input of the config hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Parses and validates TOML text; absent keys keep their defaults.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// What a sweep point measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Experiment {
    /// Independent worlds run for `rounds` RA blocks each.
    Snapshot,
    /// Snapshot plus two tagged UEs on one code with θ₁ = 0, θ₂ = Δθ.
    Pair { delta_theta: u32 },
    /// Attempts needed by a ramping UE under a stationary load.
    Attempts,
    /// Closed-form collision statistics, no simulation.
    Collision,
    /// Closed-form operation counts, no simulation.
    Complexity,
}

impl Experiment {
    fn name(&self) -> &'static str {
        match self {
            Self::Snapshot => "snapshot",
            Self::Pair { .. } => "pair",
            Self::Attempts => "attempts",
            Self::Collision => "collision",
            Self::Complexity => "complexity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub experiment: Experiment,
    pub m_ant: usize,
    pub n_len: usize,
    pub correlation: f64,
    pub p_active: f64,
    pub intercell: bool,
    pub population: u64,
    pub trials: u64,
}

impl SweepPoint {
    /// The base point of a config: snapshot at its first M.
    pub fn from_config(cfg: &SimConfig, m_ant: usize) -> Self {
        Self {
            experiment: Experiment::Snapshot,
            m_ant,
            n_len: cfg.codes.n,
            correlation: cfg.channel.correlation,
            p_active: cfg.protocol.p_active,
            intercell: cfg.channel.intercell,
            population: cfg.population(),
            trials: cfg.trials,
        }
    }

    fn describe(&self) -> String {
        format!(
            "{} M={} N={} r={} pA={} intercell={} I={}",
            self.experiment.name(),
            self.m_ant,
            self.n_len,
            self.correlation,
            self.p_active,
            self.intercell,
            self.population
        )
    }

    /// The config with this point's coordinates applied.
    fn apply(&self, cfg: &SimConfig) -> SimConfig {
        let mut c = cfg.clone();
        c.codes.n = self.n_len;
        c.channel.correlation = self.correlation;
        c.protocol.p_active = self.p_active;
        c.channel.intercell = self.intercell;
        c.network.population = self.population;
        c.network.density_per_km2 = None;
        c.trials = self.trials;
        c.antennas = vec![self.m_ant];
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

pub const PRESETS: [&str; 7] = ["fig2", "fig4", "fig5", "fig6", "fig7", "fig8", "table2"];

/// Sweep grid of a named preset. `trials` replaces the preset's trial count
/// when given; otherwise desk runs use a reduced count and full runs use
/// the config's.
pub fn preset_points(name: &str, scale: Scale, cfg: &SimConfig, trials: Option<u64>) -> Result<Vec<SweepPoint>> {
    let desk = scale == Scale::Desk;
    let count = |desk_trials: u64| trials.unwrap_or(if desk { desk_trials } else { cfg.trials });
    let base = SweepPoint::from_config(cfg, 100);
    let mut out = Vec::new();
    match name {
        "fig2" => {
            let decades = if desk { 12 } else { 60 };
            for p in [0.005, 0.01, 0.02] {
                for k in 0..=decades {
                    let mu = 10f64.powf(2.0 + 3.0 * k as f64 / decades as f64);
                    let area = (cfg.network.cell_side_m / 1000.0).powi(2);
                    out.push(SweepPoint {
                        experiment: Experiment::Collision,
                        p_active: p,
                        population: (mu * area).round() as u64,
                        trials: 0,
                        ..base.clone()
                    });
                }
            }
        }
        "fig4" => {
            let gaps: Vec<u32> = if desk {
                vec![0, 4, 8, 12, 16, 24, 32]
            } else {
                (0..=32).step_by(2).collect()
            };
            for p in [0.005, 0.01, 0.02] {
                for &dt in &gaps {
                    out.push(SweepPoint {
                        experiment: Experiment::Pair { delta_theta: dt },
                        n_len: 8,
                        p_active: p,
                        intercell: false,
                        correlation: 0.0,
                        trials: count(500),
                        ..base.clone()
                    });
                }
            }
        }
        "fig5" => {
            let ms: Vec<usize> = if desk {
                vec![20, 50, 100]
            } else {
                (1..=10).map(|k| 10 * k).collect()
            };
            for n in [8, 12] {
                for ic in [false, true] {
                    for &m in &ms {
                        out.push(SweepPoint {
                            m_ant: m,
                            n_len: n,
                            intercell: ic,
                            correlation: 0.0,
                            p_active: 0.01,
                            trials: count(200),
                            ..base.clone()
                        });
                    }
                }
            }
        }
        "fig6" => {
            let rs: &[f64] = if desk {
                &[0.0, 0.4, 0.6, 0.8, 0.9]
            } else {
                &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
            };
            for m in [50, 100] {
                for ic in [false, true] {
                    for &r in rs {
                        out.push(SweepPoint {
                            m_ant: m,
                            n_len: 8,
                            correlation: r,
                            intercell: ic,
                            p_active: 0.01,
                            trials: count(200),
                            ..base.clone()
                        });
                    }
                }
            }
        }
        "fig7" => {
            let ps: &[f64] = if desk {
                &[0.005, 0.01, 0.02]
            } else {
                &[0.005, 0.0075, 0.01, 0.0125, 0.015, 0.0175, 0.02]
            };
            for n in [8, 12] {
                for ic in [false, true] {
                    for &p in ps {
                        out.push(SweepPoint {
                            experiment: Experiment::Attempts,
                            n_len: n,
                            intercell: ic,
                            correlation: 0.0,
                            p_active: p,
                            trials: count(200),
                            ..base.clone()
                        });
                    }
                }
            }
        }
        "fig8" => {
            let k = (cfg.population() as f64 * cfg.protocol.p_active).round() as u64;
            for n in [8, 12] {
                for m in (1..=10).map(|j| 10 * j) {
                    out.push(SweepPoint {
                        experiment: Experiment::Complexity,
                        m_ant: m,
                        n_len: n,
                        population: k,
                        trials: 0,
                        ..base.clone()
                    });
                }
            }
        }
        "table2" => {
            for ic in [false, true] {
                for n in [8, 12] {
                    out.push(SweepPoint {
                        n_len: n,
                        intercell: ic,
                        correlation: 0.0,
                        p_active: 0.01,
                        trials: count(300),
                        ..base.clone()
                    });
                }
            }
        }
        other => return Err(HarnessError::UnknownPreset(other.to_string())),
    }
    Ok(out)
}

/// One output line: the sweep coordinates, the measured metrics and the
/// closed-form companions that apply.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub m_ant: u64,
    pub n_len: u64,
    pub q_len: u64,
    pub correlation: f64,
    pub p_active: f64,
    pub intercell: bool,
    pub population: u64,
    pub delta_theta: Option<u64>,
    pub trials: u64,
    pub metrics: Option<RunMetrics>,
    pub collision_prob: Option<f64>,
    pub code_load: Option<f64>,
    pub baseline_prob: Option<f64>,
    /// Operation counts; for the complexity experiment `population` holds K.
    pub step1_ops: Option<u64>,
    pub step3_ops: Option<u64>,
    pub seed: u64,
    pub config_hash: String,
}

/// One CSV / JSON value.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(Option<u64>),
    Float(Option<f64>),
    Bool(bool),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.map(|x| x.to_string()).unwrap_or_default(),
            Cell::Float(v) => v.map(fmt_float).unwrap_or_default(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> String {
        match self {
            Cell::Text(s) => serde_json::to_string(s).expect("string serialises"),
            Cell::Int(v) => v.map(|x| x.to_string()).unwrap_or_else(|| "null".into()),
            Cell::Float(v) => v
                .filter(|x| x.is_finite())
                .map(fmt_float)
                .unwrap_or_else(|| "null".into()),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl ResultRow {
    /// Cells in the fixed column order shared by CSV and JSON lines.
    pub fn cells(&self) -> Vec<(&'static str, Cell)> {
        let m = self.metrics.as_ref();
        let f = |g: fn(&RunMetrics) -> Option<f64>| Cell::Float(m.and_then(g));
        let i = |g: fn(&RunMetrics) -> u64| Cell::Int(m.map(g));
        vec![
            ("experiment", Cell::Text(self.experiment.clone())),
            ("m_ant", Cell::Int(Some(self.m_ant))),
            ("n_len", Cell::Int(Some(self.n_len))),
            ("q_len", Cell::Int(Some(self.q_len))),
            ("correlation", Cell::Float(Some(self.correlation))),
            ("p_active", Cell::Float(Some(self.p_active))),
            ("intercell", Cell::Bool(self.intercell)),
            ("population", Cell::Int(Some(self.population))),
            ("delta_theta", Cell::Int(self.delta_theta)),
            ("trials", Cell::Int(Some(self.trials))),
            ("activated", i(|r| r.activated)),
            ("eligible", i(|r| r.eligible)),
            ("detection_prob", f(|r| r.detection_prob)),
            ("detection_stderr", f(|r| r.detection_stderr)),
            ("timing_rmse", f(|r| r.timing_rmse)),
            ("timing_samples", i(|r| r.timing_samples)),
            ("collisions_offered", i(|r| r.collisions_offered)),
            ("collision_resolution_prob", f(|r| r.collision_resolution_prob)),
            ("collision_any_prob", f(|r| r.collision_any_prob)),
            ("avg_attempts", f(|r| r.avg_attempts)),
            ("attempts_stderr", f(|r| r.attempts_stderr)),
            ("dropped", i(|r| r.dropped)),
            ("code_detected_mean", f(|r| r.code_detected_mean)),
            ("tagged_detected_mean", f(|r| r.tagged_detected_mean)),
            ("tagged_stderr", f(|r| r.tagged_stderr)),
            ("collision_prob", Cell::Float(self.collision_prob)),
            ("code_load", Cell::Float(self.code_load)),
            ("baseline_prob", Cell::Float(self.baseline_prob)),
            ("step1_ops", Cell::Int(self.step1_ops)),
            ("step3_ops", Cell::Int(self.step3_ops)),
            ("seed", Cell::Int(Some(self.seed))),
            ("config_hash", Cell::Text(self.config_hash.clone())),
        ]
    }
}

fn config_hash(cfg: &SimConfig, point: &SweepPoint) -> String {
    let mut h = Sha256::new();
    h.update(cfg.canonical().as_bytes());
    h.update(format!("{point:?}").as_bytes());
    h.finalize()[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn run_trials(scenario: &Scenario, point: &SweepPoint, rounds: u32, seed: u64) -> std::result::Result<Vec<TrialMetrics>, ProtocolError> {
    (0..point.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rngs = RngBundle::for_trial(seed, trial);
            if point.experiment == Experiment::Attempts {
                return Ok(match attempts_until_detected(scenario, &mut rngs)? {
                    Some(a) => TrialMetrics {
                        attempts: vec![a],
                        ..Default::default()
                    },
                    None => TrialMetrics {
                        dropped: 1,
                        ..Default::default()
                    },
                });
            }
            let mut world = World::new(scenario, &mut rngs);
            let mut total = TrialMetrics::default();
            for _ in 0..rounds {
                total.merge(&run_ra_round(scenario, &mut world, &mut rngs)?.metrics);
            }
            Ok(total)
        })
        .collect()
}

fn run_point(cfg: &SimConfig, point: &SweepPoint) -> Result<ResultRow> {
    let local = point.apply(cfg);
    let ctx = |source| HarnessError::Point {
        point: point.describe(),
        source,
    };
    let actx = |source| HarnessError::Analytic {
        point: point.describe(),
        source,
    };
    let (q, n, pop, p) = (local.codes.q, point.n_len, point.population, point.p_active);
    let mut row = ResultRow {
        experiment: point.experiment.name().to_string(),
        m_ant: point.m_ant as u64,
        n_len: n as u64,
        q_len: q as u64,
        correlation: point.correlation,
        p_active: p,
        intercell: point.intercell,
        population: pop,
        delta_theta: None,
        trials: point.trials,
        metrics: None,
        collision_prob: None,
        code_load: None,
        baseline_prob: None,
        step1_ops: None,
        step3_ops: None,
        seed: cfg.seed,
        config_hash: config_hash(cfg, point),
    };
    match point.experiment {
        Experiment::Collision => {
            row.collision_prob = Some(collision_probability(pop, p, q, n).map_err(actx)?);
            row.code_load = Some(expected_code_load(pop, p, q, n).map_err(actx)?);
            row.baseline_prob = baseline_detection_probability(pop, p, q, n).ok();
        }
        Experiment::Complexity => {
            let c = complexity_counts(point.m_ant as u64, n as u64, pop, q as u64).map_err(actx)?;
            row.step1_ops = Some(c.step1());
            row.step3_ops = Some(c.step3());
        }
        Experiment::Snapshot | Experiment::Pair { .. } | Experiment::Attempts => {
            let mut sc = local.scenario(point.m_ant).map_err(ctx)?;
            if let Experiment::Pair { delta_theta } = point.experiment {
                row.delta_theta = Some(delta_theta as u64);
                let mut c = sc.config.clone();
                c.forced_pair = Some(delta_theta);
                sc = Scenario::new(c).map_err(ctx)?;
            }
            if point.trials == 0 {
                return Err(HarnessError::Invalid(format!("{}: zero trials", point.describe())));
            }
            let trials = run_trials(&sc, point, local.rounds, cfg.seed).map_err(ctx)?;
            row.metrics = Some(aggregate(&trials).map_err(actx)?);
            row.collision_prob = collision_probability(pop, p, q, n).ok();
            row.baseline_prob = baseline_detection_probability(pop, p, q, n).ok();
        }
    }
    Ok(row)
}

/// Runs every point in order. `workers` bounds the thread pool; `None` uses
/// rayon's global pool. Output does not depend on the worker count.
pub fn run_sweep(cfg: &SimConfig, points: &[SweepPoint], workers: Option<usize>) -> Result<Vec<ResultRow>> {
    let run = || points.iter().map(|p| run_point(cfg, p)).collect::<Result<Vec<_>>>();
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonLines,
}

/// Writes rows as CSV (one header line) or JSON lines.
pub fn emit<W: Write>(rows: &[ResultRow], format: Format, out: &mut W) -> Result<()> {
    let first = rows.first().ok_or(HarnessError::NoRows)?;
    match format {
        Format::Csv => {
            let header: Vec<&str> = first.cells().iter().map(|(k, _)| *k).collect();
            writeln!(out, "{}", header.join(","))?;
            for row in rows {
                let line: Vec<String> = row.cells().iter().map(|(_, c)| c.csv()).collect();
                writeln!(out, "{}", line.join(","))?;
            }
        }
        Format::JsonLines => {
            for row in rows {
                let fields: Vec<String> = row
                    .cells()
                    .iter()
                    .map(|(k, c)| format!("\"{k}\":{}", c.json()))
                    .collect();
                writeln!(out, "{{{}}}", fields.join(","))?;
            }
        }
    }
    Ok(())
}

pub fn emit_to_path(rows: &[ResultRow], format: Format, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    emit(rows, format, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
