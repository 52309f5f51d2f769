//! The three-step random-access procedure and its retry dynamics.
//!
//! All protocol arithmetic runs in noise-normalised units: large-scale gains
//! are divided by the thermal noise power so that σ² = 1 inside a round.
//! The retransmission power rule divides by β², and in watts it would call
//! for transmit powers many orders of magnitude above ρ_max; normalised
//! units keep every statistic dimensionless and make the procedure exactly
//! invariant to a common rescaling of gains and noise.

use std::collections::HashMap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airlink::{
    despread_time, synthesize_step3, synthesize_ul, ue_correlate_dl, AirlinkError, DlPrecoder,
    Interferer, Transmission, UlObservation,
};
use crate::channel::{
    draw_angle, draw_channel, mean_interferer_gain, place_interferers, place_ues, ChannelError,
    CovarianceModel, NetworkGeometry, SpatialCovariance, UeRecord,
};
use crate::codebook::{effective_code, effective_offset, CodebookError, RaCodebook};
use crate::estimator::{run_step1, DetectionReport, EstimatorError};
use crate::numerics::{dot_conj, norm, C64};

/// Number of steps of the power ladder above ρ_min.
pub const POWER_STEPS: usize = 10;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("power level {0} outside 0..={POWER_STEPS}")]
    PowerLevelOutOfRange(usize),
    #[error("report index {index} out of range (K̂ = {k_hat})")]
    ReportIndex { index: usize, k_hat: usize },
    #[error(transparent)]
    Airlink(#[from] AirlinkError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Decision-bias policy for the Step-2 rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// 0 without inter-cell interference, −ω̄/2 with it.
    Auto,
    /// Fixed bias in noise-normalised units.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaParams {
    pub p_active: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_dl: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub bias: BiasMode,
    pub snr_floor_db: f64,
    pub max_attempts: u32,
    /// Mean number of skipped RA blocks before a retry.
    pub backoff_mean: f64,
}

impl Default for RaParams {
    fn default() -> Self {
        Self {
            p_active: 0.01,
            rho_min: 0.1,
            rho_max: 1.0,
            rho_dl: 1.0,
            delta1: 0.5,
            delta2: 1.5,
            bias: BiasMode::Auto,
            snr_floor_db: 5.0,
            max_attempts: 20,
            backoff_mean: 1.0,
        }
    }
}

impl RaParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ProtocolError::InvalidParameter(msg));
        if !(0.0..=1.0).contains(&self.p_active) {
            return bad(format!("p_active = {} must lie in [0, 1]", self.p_active));
        }
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho_max) {
            return bad(format!(
                "powers must satisfy 0 < rho_min ({}) <= rho_max ({})",
                self.rho_min, self.rho_max
            ));
        }
        if !(self.rho_dl > 0.0) {
            return bad(format!("rho_dl = {} must be positive", self.rho_dl));
        }
        if !(0.0 < self.delta1 && self.delta1 < 1.0 && 1.0 < self.delta2 && self.delta2 < 2.0) {
            return bad(format!(
                "thresholds must satisfy 0 < delta1 ({}) < 1 < delta2 ({}) < 2",
                self.delta1, self.delta2
            ));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if !(self.backoff_mean >= 0.0) {
            return bad(format!("backoff_mean = {} must be non-negative", self.backoff_mean));
        }
        if !self.snr_floor_db.is_finite() {
            return bad("snr_floor_db must be finite".into());
        }
        Ok(())
    }

    pub fn snr_floor(&self) -> f64 {
        10f64.powf(self.snr_floor_db / 10.0)
    }

    /// Δ_i = ρ_min e^{iΔ}, Δ = ln(ρ_max/ρ_min)/10.
    pub fn power_level(&self, i: usize) -> Result<f64> {
        power_level(i, self.rho_min, self.rho_max)
    }

    /// Mean of the power ladder.
    pub fn mean_power(&self) -> f64 {
        (0..=POWER_STEPS)
            .map(|i| self.power_level(i).expect("in range"))
            .sum::<f64>()
            / (POWER_STEPS + 1) as f64
    }
}

pub fn power_level(i: usize, rho_min: f64, rho_max: f64) -> Result<f64> {
    if i > POWER_STEPS {
        return Err(ProtocolError::PowerLevelOutOfRange(i));
    }
    let step = (rho_max / rho_min).ln() / POWER_STEPS as f64;
    Ok(rho_min * (i as f64 * step).exp())
}

/// How activated UEs choose their RA power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// Uniform over the ladder, emulating a population at mixed attempts.
    Ensemble,
    /// Level = failed attempts so far, wrapping to ρ_min after ρ_max.
    Ramping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Fading {
    Uncorrelated,
    Exponential { r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Repeat,
    Wait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    Detected,
    Undetected,
}

/// α̂ = max(Mρ_dlτ·ρβ²Q/(Re r)² − σ², ρβQ).
pub fn alpha_hat(
    r_dl: C64,
    m_ant: usize,
    rho_dl: f64,
    tau: usize,
    rho: f64,
    beta: f64,
    q_len: usize,
    noise_var: f64,
) -> f64 {
    let floor = rho * beta * q_len as f64;
    if r_dl.re == 0.0 {
        debug!("downlink correlation has zero real part; using the floor");
        return floor;
    }
    let first = m_ant as f64 * rho_dl * tau as f64 * rho * beta * beta * q_len as f64
        / (r_dl.re * r_dl.re)
        - noise_var;
    first.max(floor)
}

/// Repeat iff ρβQ > α̂/2 + bias.
pub fn ue_decide(alpha_hat: f64, rho: f64, beta: f64, q_len: usize, bias: f64) -> Decision {
    if rho * beta * q_len as f64 > alpha_hat / 2.0 + bias {
        Decision::Repeat
    } else {
        Decision::Wait
    }
}

/// ρ_ul = min(α̂/(ρτQβ²), ρ_max).
pub fn ul_retx_power(alpha_hat: f64, rho: f64, tau: usize, q_len: usize, beta: f64, rho_max: f64) -> f64 {
    (alpha_hat / (rho * tau as f64 * q_len as f64 * beta * beta)).min(rho_max)
}

/// Detected iff δ₁ < Re(r)/√M < δ₂.
pub fn detect_rule(r_ul: C64, m_ant: usize, delta1: f64, delta2: f64) -> Detection {
    let s = r_ul.re / (m_ant as f64).sqrt();
    if delta1 < s && s < delta2 {
        Detection::Detected
    } else {
        Detection::Undetected
    }
}

/// Step-3 statistics r_(j) for every estimate of a report, from the
/// despread retransmission block z_m of the report's time code.
pub fn step3_statistics(z: &[Vec<C64>], report: &DetectionReport) -> Vec<Option<C64>> {
    if report.channels.len() != report.k_hat {
        return vec![None; report.k_hat];
    }
    let n_len = z.first().map_or(0, |v| v.len());
    let sqrt_n = (n_len as f64).sqrt();
    report
        .eps_hats
        .iter()
        .zip(&report.channels)
        .map(|(&eps, h)| {
            let hn = norm(h);
            if !(hn > 0.0) {
                return None;
            }
            let c = effective_code(eps, n_len);
            let r: C64 = z
                .iter()
                .zip(h)
                .map(|(zm, hm)| hm.conj() * dot_conj(&c, zm) / sqrt_n)
                .sum();
            Some(r / hn)
        })
        .collect()
}

/// r_(j) for a single estimate.
pub fn step3_statistic(
    y3: &UlObservation,
    report: &DetectionReport,
    j: usize,
    codebook: &RaCodebook,
) -> Result<C64> {
    if j >= report.k_hat {
        return Err(ProtocolError::ReportIndex {
            index: j,
            k_hat: report.k_hat,
        });
    }
    let z = despread_time(y3, codebook.time_code(report.time_code))?;
    step3_statistics(&z, report)[j].ok_or(ProtocolError::Airlink(AirlinkError::ZeroNormEstimate(j)))
}

/// Independent random streams of one trial.
#[derive(Debug, Clone)]
pub struct RngBundle {
    pub geometry: ChaCha8Rng,
    pub traffic: ChaCha8Rng,
    pub fading: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub interferers: ChaCha8Rng,
}

impl RngBundle {
    /// Keyed by (master seed, purpose); the trial index selects the stream.
    pub fn for_trial(master_seed: u64, trial: u64) -> Self {
        let make = |purpose: u64| {
            let mut seed = [0u8; 32];
            seed[..8].copy_from_slice(&master_seed.to_le_bytes());
            seed[8..16].copy_from_slice(&purpose.to_le_bytes());
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(trial);
            r
        };
        Self {
            geometry: make(1),
            traffic: make(2),
            fading: make(3),
            noise: make(4),
            interferers: make(5),
        }
    }
}

/// Inputs shared by every trial of a sweep point.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub geometry: NetworkGeometry,
    pub population: usize,
    pub m_ant: usize,
    pub q_len: usize,
    pub n_len: usize,
    /// Thermal noise power per resource element, watts.
    pub noise_var: f64,
    pub fading: Fading,
    /// Active interferers per neighbouring cell; 0 disables inter-cell
    /// interference.
    pub interferers_per_cell: usize,
    pub params: RaParams,
    pub power_mode: PowerMode,
    /// Adds two tagged UEs on one code pair with θ₁ = 0 and θ₂ = Δθ.
    pub forced_pair: Option<u32>,
}

/// A validated scenario with its derived constants.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub codebook: RaCodebook,
    /// ω̄ = E Σ_ν ρ_ν β_ν over the interferer ensemble, noise-normalised.
    pub omega_bar: f64,
    pub decision_bias: f64,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.params.validate()?;
        config.geometry.validate()?;
        let codebook = RaCodebook::new(config.q_len, config.n_len)?;
        config.geometry.check_unique_demapping(config.n_len)?;
        if config.m_ant == 0 {
            return Err(ProtocolError::InvalidParameter("M must be at least 1".into()));
        }
        if !(config.noise_var > 0.0) {
            return Err(ProtocolError::InvalidParameter("noise power must be positive".into()));
        }
        if let Fading::Exponential { r } = config.fading {
            if !(0.0..1.0).contains(&r) {
                return Err(ProtocolError::Channel(ChannelError::InvalidCorrelation(r)));
            }
        }
        if let Some(dt) = config.forced_pair {
            let limit = config.geometry.n_fft as f64 / config.n_len as f64;
            if dt as f64 > limit {
                return Err(ProtocolError::InvalidParameter(format!(
                    "forced timing gap {dt} exceeds N_FFT/N = {limit}"
                )));
            }
        }
        let omega_bar = if config.interferers_per_cell > 0 && config.geometry.num_cells > 1 {
            let count = config.interferers_per_cell * config.geometry.neighbor_sites().len();
            count as f64 * config.params.mean_power() * mean_interferer_gain(&config.geometry, 200)
                / config.noise_var
        } else {
            0.0
        };
        let decision_bias = match config.params.bias {
            BiasMode::Auto => -omega_bar / 2.0,
            BiasMode::Fixed(b) => b,
        };
        Ok(Self {
            config,
            codebook,
            omega_bar,
            decision_bias,
        })
    }

    fn covariance(&self, ue: &UeRecord) -> Result<SpatialCovariance> {
        let beta = ue.beta / self.config.noise_var;
        Ok(SpatialCovariance::for_model(ue.cov_model, beta, self.config.m_ant)?)
    }

    fn assign_model<R: Rng + ?Sized>(&self, ue: &mut UeRecord, rng: &mut R) {
        ue.cov_model = match self.config.fading {
            Fading::Uncorrelated => CovarianceModel::Uncorrelated,
            Fading::Exponential { r } => CovarianceModel::Exponential {
                r,
                phi: draw_angle(rng),
            },
        };
    }
}

/// Mutable state of one trial: the UE population and retry timers.
#[derive(Debug, Clone)]
pub struct World {
    pub ues: Vec<UeRecord>,
    /// RA blocks each backlogged UE still skips before retrying.
    pub backoff: Vec<u32>,
    pub next_id: u64,
    pub round: u64,
}

impl World {
    pub fn new(scenario: &Scenario, rngs: &mut RngBundle) -> Self {
        let n = scenario.config.population;
        let mut ues = place_ues(n, 0, &scenario.config.geometry, &mut rngs.geometry);
        for ue in ues.iter_mut() {
            scenario.assign_model(ue, &mut rngs.geometry);
        }
        Self {
            ues,
            backoff: vec![0; n],
            next_id: n as u64,
            round: 0,
        }
    }

    fn replace(&mut self, idx: usize, scenario: &Scenario, rngs: &mut RngBundle) {
        let mut fresh = place_ues(1, self.next_id, &scenario.config.geometry, &mut rngs.geometry)
            .pop()
            .expect("one UE");
        scenario.assign_model(&mut fresh, &mut rngs.geometry);
        self.next_id += 1;
        self.ues[idx] = fresh;
        self.backoff[idx] = 0;
    }
}

fn pick_codes<R: Rng + ?Sized>(ue: &mut UeRecord, codebook: &RaCodebook, rng: &mut R) {
    ue.time_code = rng.random_range(0..codebook.q_len());
    ue.freq_code = rng.random_range(0..codebook.n_len());
}

fn pick_power<R: Rng + ?Sized>(ue: &UeRecord, params: &RaParams, mode: PowerMode, rng: &mut R) -> f64 {
    let level = match mode {
        PowerMode::Ensemble => rng.random_range(0..=POWER_STEPS),
        PowerMode::Ramping => ue.attempts as usize % (POWER_STEPS + 1),
    };
    params.power_level(level).expect("level in range")
}

/// Each inactive UE activates independently with probability p_A, picks a
/// code pair uniformly and a power per `mode`. Returns the indices of the
/// newly activated UEs.
pub fn activate<R: Rng + ?Sized>(
    ues: &mut [UeRecord],
    params: &RaParams,
    codebook: &RaCodebook,
    mode: PowerMode,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::new();
    for (idx, ue) in ues.iter_mut().enumerate() {
        if ue.active || !rng.random_bool(params.p_active) {
            continue;
        }
        ue.active = true;
        ue.attempts = 0;
        pick_codes(ue, codebook, rng);
        ue.power = pick_power(ue, params, mode, rng);
        out.push(idx);
    }
    out
}

/// What happened to one transmitting UE in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct UeOutcome {
    pub id: u64,
    pub snr: f64,
    pub eligible: bool,
    pub decision: Decision,
    pub detected: bool,
    /// Attempt number of this transmission, starting at 1.
    pub attempt: u32,
    pub timing_error: Option<f64>,
    pub tagged: bool,
}

/// Counters of one round (or one trial when rounds are merged).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// UEs transmitting in Step 1.
    pub activated: u64,
    /// Transmitting UEs with SNR above the floor.
    pub eligible: u64,
    pub eligible_detected: u64,
    pub detected: u64,
    /// Code pairs chosen by two or more eligible Step-2 repliers.
    pub collisions_offered: u64,
    /// Offered collisions in which every replier was detected.
    pub collisions_resolved: u64,
    /// Offered collisions in which at least one replier was detected.
    pub collisions_resolved_any: u64,
    /// Code pairs with at least one eligible transmitter.
    pub codes_occupied: u64,
    /// Step-3 declarations that were attributed to a UE.
    pub codes_detected: u64,
    /// Squared timing errors (samples²) of detected eligible UEs.
    pub timing_sq_err: Vec<f64>,
    /// Attempts needed by eligible UEs that were admitted.
    pub attempts: Vec<u32>,
    /// Eligible UEs dropped after `max_attempts`.
    pub dropped: u64,
    /// Detected tagged UEs (forced-pair scenario).
    pub tagged_detected: u64,
    /// Detected UEs of any kind on the tagged code pair.
    pub code_detected: u64,
    pub tagged_rounds: u64,
}

impl TrialMetrics {
    pub fn merge(&mut self, other: &TrialMetrics) {
        self.activated += other.activated;
        self.eligible += other.eligible;
        self.eligible_detected += other.eligible_detected;
        self.detected += other.detected;
        self.collisions_offered += other.collisions_offered;
        self.collisions_resolved += other.collisions_resolved;
        self.collisions_resolved_any += other.collisions_resolved_any;
        self.codes_occupied += other.codes_occupied;
        self.codes_detected += other.codes_detected;
        self.timing_sq_err.extend_from_slice(&other.timing_sq_err);
        self.attempts.extend_from_slice(&other.attempts);
        self.dropped += other.dropped;
        self.tagged_detected += other.tagged_detected;
        self.code_detected += other.code_detected;
        self.tagged_rounds += other.tagged_rounds;
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: TrialMetrics,
    pub ues: Vec<UeOutcome>,
    pub reports: Vec<DetectionReport>,
}

/// One transmitting UE during a round.
struct Contender {
    /// Index into the population, or None for a tagged UE.
    index: Option<usize>,
    ue: UeRecord,
    /// Noise-normalised gain β/σ².
    beta: f64,
    eps: f64,
    channel: Vec<C64>,
}

fn tagged_pair(scenario: &Scenario, dt: u32, rngs: &mut RngBundle) -> Result<Vec<UeRecord>> {
    let cfg = &scenario.config;
    let floor = cfg.params.snr_floor();
    let i = rngs.traffic.random_range(0..cfg.q_len);
    let l = rngs.traffic.random_range(0..cfg.n_len);
    let mut out = Vec::with_capacity(2);
    for (k, theta) in [0u32, dt].into_iter().enumerate() {
        // Condition on an eligible SNR so the pair is counted.
        let ue = loop {
            let mut ue = place_ues(1, u64::MAX - k as u64, &cfg.geometry, &mut rngs.geometry)
                .pop()
                .expect("one UE");
            ue.power = pick_power(&ue, &cfg.params, PowerMode::Ensemble, &mut rngs.traffic);
            if ue.snr(cfg.noise_var) > floor {
                scenario.assign_model(&mut ue, &mut rngs.geometry);
                break ue;
            }
        };
        let mut ue = ue;
        ue.theta = theta;
        ue.time_code = i;
        ue.freq_code = l;
        ue.active = true;
        out.push(ue);
    }
    Ok(out)
}

fn draw_interferers(scenario: &Scenario, rngs: &mut RngBundle) -> (Vec<Interferer>, f64) {
    let cfg = &scenario.config;
    if cfg.interferers_per_cell == 0 || cfg.geometry.num_cells <= 1 {
        return (Vec::new(), 0.0);
    }
    let r = &mut rngs.interferers;
    let sites = place_interferers(cfg.interferers_per_cell, &cfg.geometry, r);
    let mut total = 0.0;
    let list = sites
        .iter()
        .map(|s| {
            let level = r.random_range(0..=POWER_STEPS);
            let power = cfg.params.power_level(level).expect("level in range");
            let beta = s.beta / cfg.noise_var;
            total += power * beta;
            Interferer {
                power,
                channel: draw_channel(&SpatialCovariance::uncorrelated(beta, cfg.m_ant), r),
            }
        })
        .collect();
    (list, total)
}

/// Wrapped timing error N_FFT·(ε − ε̂), equal to θ̂ − θ when l̂ = l.
fn timing_error(eps: f64, eps_hat: f64, n_fft: usize) -> f64 {
    let d = (eps - eps_hat + 0.5).rem_euclid(1.0) - 0.5;
    d * n_fft as f64
}

/// Index of the estimate closest to `eps` on the unit circle.
fn nearest_estimate(eps: f64, eps_hats: &[f64]) -> Option<usize> {
    eps_hats
        .iter()
        .map(|&e| ((eps - e + 0.5).rem_euclid(1.0) - 0.5).abs())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
}

/// Runs one RA block through Steps 1–3 and updates the world.
pub fn run_ra_round(scenario: &Scenario, world: &mut World, rngs: &mut RngBundle) -> Result<RoundOutcome> {
    let extras = match scenario.config.forced_pair {
        Some(dt) => tagged_pair(scenario, dt, rngs)?,
        None => Vec::new(),
    };
    run_round_with(scenario, world, rngs, extras)
}

/// Follows one ramping UE through independent RA blocks, each carrying a
/// fresh ensemble load from a new world, until it is detected. The UE is
/// placed so that it clears the SNR floor at ρ_max. Returns the number of
/// attempts, or None once `max_attempts` is exhausted.
pub fn attempts_until_detected(scenario: &Scenario, rngs: &mut RngBundle) -> Result<Option<u32>> {
    let cfg = &scenario.config;
    let params = &cfg.params;
    let floor = params.snr_floor();
    let mut ue = loop {
        let mut ue = place_ues(1, u64::MAX, &cfg.geometry, &mut rngs.geometry)
            .pop()
            .expect("one UE");
        ue.power = params.rho_max;
        if ue.snr(cfg.noise_var) > floor {
            scenario.assign_model(&mut ue, &mut rngs.geometry);
            break ue;
        }
    };
    ue.active = true;
    for attempt in 0..params.max_attempts {
        ue.attempts = attempt;
        pick_codes(&mut ue, &scenario.codebook, &mut rngs.traffic);
        ue.power = pick_power(&ue, params, PowerMode::Ramping, &mut rngs.traffic);
        let mut world = World::new(scenario, rngs);
        let out = run_round_with(scenario, &mut world, rngs, vec![ue.clone()])?;
        if out.ues.iter().any(|u| u.tagged && u.detected) {
            return Ok(Some(attempt + 1));
        }
    }
    Ok(None)
}

/// One round with `extras` appended as tagged contenders that live outside
/// the world.
fn run_round_with(
    scenario: &Scenario,
    world: &mut World,
    rngs: &mut RngBundle,
    extras: Vec<UeRecord>,
) -> Result<RoundOutcome> {
    let cfg = &scenario.config;
    let params = &cfg.params;
    let cb = &scenario.codebook;
    let tau = cb.tau();
    let m_ant = cfg.m_ant;
    let floor = params.snr_floor();
    world.round += 1;

    // Backlogged UEs whose timer expired retry with fresh codes.
    let mut transmitting: Vec<usize> = Vec::new();
    for (idx, ue) in world.ues.iter_mut().enumerate() {
        if !ue.active {
            continue;
        }
        if world.backoff[idx] > 0 {
            world.backoff[idx] -= 1;
            continue;
        }
        pick_codes(ue, cb, &mut rngs.traffic);
        ue.power = pick_power(ue, params, cfg.power_mode, &mut rngs.traffic);
        transmitting.push(idx);
    }
    transmitting.extend(activate(&mut world.ues, params, cb, cfg.power_mode, &mut rngs.traffic));
    transmitting.sort_unstable();

    let mut contenders: Vec<Contender> = Vec::with_capacity(transmitting.len() + 2);
    for &idx in &transmitting {
        contenders.push(Contender {
            index: Some(idx),
            ue: world.ues[idx].clone(),
            beta: 0.0,
            eps: 0.0,
            channel: Vec::new(),
        });
    }
    let tagged_code = extras.first().map(|u| (u.time_code, u.freq_code));
    for ue in extras {
        contenders.push(Contender {
            index: None,
            ue,
            beta: 0.0,
            eps: 0.0,
            channel: Vec::new(),
        });
    }
    for c in contenders.iter_mut() {
        c.beta = c.ue.beta / cfg.noise_var;
        c.eps = effective_offset(c.ue.freq_code, c.ue.theta as f64, cfg.n_len, cfg.geometry.n_fft);
        let cov = scenario.covariance(&c.ue)?;
        c.channel = draw_channel(&cov, &mut rngs.fading);
    }

    let (interferers, dl_interference) = draw_interferers(scenario, rngs);

    // Step 1.
    let txs: Vec<Transmission> = contenders
        .iter()
        .map(|c| Transmission {
            channel: &c.channel,
            power: c.ue.power,
            eps: c.eps,
            time_code: c.ue.time_code,
        })
        .collect();
    let y1 = synthesize_ul(&txs, cb, m_ant, 1.0, &interferers, &mut rngs.noise)?;
    let reports = run_step1(&y1, cb, cfg.geometry.n_fft)?;

    // Step 2.
    let beams: Vec<(Vec<C64>, usize, usize)> = reports
        .iter()
        .flat_map(|r| {
            r.channels
                .iter()
                .zip(&r.code_timing)
                .filter(|(h, _)| norm(h) > 0.0)
                .map(move |(h, d)| (h.clone(), d.code_index, r.time_code))
        })
        .collect();
    let precoder = DlPrecoder::new(&beams, params.rho_dl)?;
    let mut decisions = Vec::with_capacity(contenders.len());
    let mut ul_powers = Vec::with_capacity(contenders.len());
    for c in &contenders {
        let obs = precoder.receive(&c.channel, cb, 1.0, dl_interference, &mut rngs.noise)?;
        let r = ue_correlate_dl(&obs, cb.freq_code(c.ue.freq_code), cb.time_code(c.ue.time_code))?;
        let a = alpha_hat(r, m_ant, params.rho_dl, tau, c.ue.power, c.beta, cfg.q_len, 1.0);
        let d = ue_decide(a, c.ue.power, c.beta, cfg.q_len, scenario.decision_bias);
        decisions.push(d);
        ul_powers.push(ul_retx_power(a, c.ue.power, tau, cfg.q_len, c.beta, params.rho_max));
    }

    // Step 3.
    let repliers: Vec<usize> = (0..contenders.len())
        .filter(|&k| decisions[k] == Decision::Repeat)
        .collect();
    let retx: Vec<Transmission> = repliers
        .iter()
        .map(|&k| Transmission {
            power: ul_powers[k],
            ..txs[k]
        })
        .collect();
    let y3 = synthesize_step3(&retx, cb, m_ant, 1.0, &interferers, &mut rngs.noise)?;

    // Each replier maps to the estimate of its time code with the nearest
    // effective offset. A declared estimate credits the mapped replier with
    // the largest noiseless contribution to r_(j).
    let mut detected_by: Vec<Option<f64>> = vec![None; contenders.len()];
    let mut codes_detected = 0u64;
    let sqrt_n = (cfg.n_len as f64).sqrt();
    for report in &reports {
        let z = despread_time(&y3, cb.time_code(report.time_code))?;
        let stats = step3_statistics(&z, report);
        let mapped: Vec<(usize, usize)> = repliers
            .iter()
            .filter(|&&k| contenders[k].ue.time_code == report.time_code)
            .filter_map(|&k| {
                nearest_estimate(contenders[k].eps, &report.eps_hats).map(|j| (k, j))
            })
            .collect();
        for (j, stat) in stats.iter().enumerate() {
            let Some(r) = stat else { continue };
            if detect_rule(*r, m_ant, params.delta1, params.delta2) != Detection::Detected {
                continue;
            }
            let h = &report.channels[j];
            let hn = norm(h);
            let c_hat = effective_code(report.eps_hats[j], cfg.n_len);
            let best = mapped
                .iter()
                .filter(|&&(_, jk)| jk == j)
                .map(|&(k, _)| {
                    let c = &contenders[k];
                    let code_gain = dot_conj(&c_hat, &effective_code(c.eps, cfg.n_len)) / sqrt_n;
                    let beam_gain = dot_conj(h, &c.channel) / hn;
                    let amp = (ul_powers[k] * cfg.q_len as f64).sqrt();
                    (k, (code_gain * beam_gain * amp).norm())
                })
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((k, _)) = best {
                codes_detected += 1;
                detected_by[k] =
                    Some(timing_error(contenders[k].eps, report.eps_hats[j], cfg.geometry.n_fft));
            }
        }
    }

    // Metrics.
    let mut m = TrialMetrics::default();
    let mut outcomes = Vec::with_capacity(contenders.len());
    let mut occupied: HashMap<(usize, usize), ()> = HashMap::new();
    let mut groups: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (k, c) in contenders.iter().enumerate() {
        let snr = c.ue.power * c.beta;
        let eligible = snr > floor;
        let detected = detected_by[k].is_some();
        let tagged = c.index.is_none();
        let attempt = c.ue.attempts + 1;
        if !tagged {
            m.activated += 1;
            if eligible {
                m.eligible += 1;
                occupied.insert((c.ue.time_code, c.ue.freq_code), ());
                if detected {
                    m.eligible_detected += 1;
                    m.attempts.push(attempt);
                    m.timing_sq_err.push(detected_by[k].unwrap().powi(2));
                }
            }
            if detected {
                m.detected += 1;
            }
        } else if detected {
            m.tagged_detected += 1;
        }
        if detected && tagged_code == Some((c.ue.time_code, c.ue.freq_code)) {
            m.code_detected += 1;
        }
        if decisions[k] == Decision::Repeat && eligible {
            groups.entry((c.ue.time_code, c.ue.freq_code)).or_default().push(k);
        }
        outcomes.push(UeOutcome {
            id: c.ue.id,
            snr,
            eligible,
            decision: decisions[k],
            detected,
            attempt,
            timing_error: detected_by[k],
            tagged,
        });
    }
    if tagged_code.is_some() {
        m.tagged_rounds = 1;
    }
    m.codes_occupied = occupied.len() as u64;
    m.codes_detected = codes_detected;
    for members in groups.values().filter(|g| g.len() >= 2) {
        m.collisions_offered += 1;
        let hits = members.iter().filter(|&&k| detected_by[k].is_some()).count();
        if hits == members.len() {
            m.collisions_resolved += 1;
        }
        if hits > 0 {
            m.collisions_resolved_any += 1;
        }
    }

    // State update: admitted UEs leave and are replaced; the rest back off.
    let backoff = if params.backoff_mean > 0.0 {
        Some(Geometric::new(1.0 / (1.0 + params.backoff_mean)).expect("valid probability"))
    } else {
        None
    };
    for (k, c) in contenders.iter().enumerate() {
        let Some(idx) = c.index else { continue };
        if detected_by[k].is_some() {
            world.replace(idx, scenario, rngs);
            continue;
        }
        let ue = &mut world.ues[idx];
        ue.attempts += 1;
        if ue.attempts >= params.max_attempts {
            m.dropped += u64::from(outcomes[k].eligible);
            world.replace(idx, scenario, rngs);
            continue;
        }
        world.backoff[idx] = backoff
            .as_ref()
            .map_or(0, |g| g.sample(&mut rngs.traffic) as u32);
    }

    Ok(RoundOutcome {
        metrics: m,
        ues: outcomes,
        reports,
    })
}
