//! Closed-form companions of the simulator and aggregation of trial
//! counters into figure-ready numbers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::TrialMetrics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("activation probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("code dimensions must be at least 1 (Q = {q}, N = {n})")]
    InvalidCodebook { q: usize, n: usize },
    #[error("conditional probability undefined: no UE can pick the code")]
    Undefined,
    #[error("complexity counts need every argument at least 1")]
    InvalidComplexity,
    #[error("nothing to aggregate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

/// Probability that one UE picks a specific code pair, p_A/(QN).
fn per_code(p_active: f64, q_len: usize, n_len: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_active) {
        return Err(AnalyticsError::InvalidProbability(p_active));
    }
    if q_len == 0 || n_len == 0 {
        return Err(AnalyticsError::InvalidCodebook { q: q_len, n: n_len });
    }
    Ok(p_active / (q_len * n_len) as f64)
}

/// (1−p)^n evaluated through log1p.
fn none_pick(p: f64, n: f64) -> f64 {
    if n == 0.0 {
        1.0
    } else {
        (n * (-p).ln_1p()).exp()
    }
}

/// Probability that a given code pair is picked by two or more of the
/// `inactive` UEs.
pub fn collision_probability(inactive: u64, p_active: f64, q_len: usize, n_len: usize) -> Result<f64> {
    let p = per_code(p_active, q_len, n_len)?;
    if inactive < 2 || p == 0.0 {
        return Ok(0.0);
    }
    let n = inactive as f64;
    let none = none_pick(p, n);
    let one = n * p * none_pick(p, n - 1.0);
    Ok((1.0 - none - one).max(0.0))
}

/// Mean number of UEs on one code pair, |I|·p_A/(QN).
pub fn expected_code_load(inactive: u64, p_active: f64, q_len: usize, n_len: usize) -> Result<f64> {
    Ok(inactive as f64 * per_code(p_active, q_len, n_len)?)
}

/// Probability that a picked code pair has exactly one picker. This is the
/// detection probability of a scheme that only succeeds without collisions.
pub fn baseline_detection_probability(
    inactive: u64,
    p_active: f64,
    q_len: usize,
    n_len: usize,
) -> Result<f64> {
    let p = per_code(p_active, q_len, n_len)?;
    if inactive == 0 || p == 0.0 {
        return Err(AnalyticsError::Undefined);
    }
    let n = inactive as f64;
    let picked = -(n * (-p).ln_1p()).exp_m1();
    Ok(n * p * none_pick(p, n - 1.0) / picked)
}

/// Complex multiplications and divisions of Steps 1 and 3, split into the
/// part that does not depend on M and the per-antenna part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityCounts {
    pub step1_fixed: u64,
    pub step1_per_antenna: u64,
    pub step3_per_antenna: u64,
    pub m_ant: u64,
}

impl ComplexityCounts {
    pub fn step1(&self) -> u64 {
        self.step1_fixed + self.m_ant * self.step1_per_antenna
    }

    pub fn step3(&self) -> u64 {
        self.m_ant * self.step3_per_antenna
    }
}

/// Operation counts for M antennas, code length N, K active codes per time
/// code and Q time codes:
///
/// Step 1: Q((K²+K)/2·(N−1) + K²(N−1) + K³ + (K³−K)/3
///           + M(N + (N²+N)/2 + K²N + KN² + K² + (K³−K)/3))
/// Step 3: Q(MK(N+NQ) + MK)
pub fn complexity_counts(m_ant: u64, n_len: u64, k: u64, q_len: u64) -> Result<ComplexityCounts> {
    if m_ant == 0 || n_len == 0 || k == 0 || q_len == 0 {
        return Err(AnalyticsError::InvalidComplexity);
    }
    let (n, q) = (n_len, q_len);
    // K³−K = (K−1)K(K+1) and N²+N are always divisible as needed.
    let ldl = (k * k * k - k) / 3;
    let fixed = (k * k + k) / 2 * (n - 1) + k * k * (n - 1) + k * k * k + ldl;
    let per_m = n + (n * n + n) / 2 + k * k * n + k * n * n + k * k + ldl;
    Ok(ComplexityCounts {
        step1_fixed: q * fixed,
        step1_per_antenna: q * per_m,
        step3_per_antenna: q * (k * (n + n * q) + k),
        m_ant,
    })
}

/// Figure-ready summary of a set of trials. Ratios with an empty
/// denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub trials: u64,
    pub activated: u64,
    pub eligible: u64,
    /// Detected / eligible, pooled over trials.
    pub detection_prob: Option<f64>,
    /// Standard error of the mean of per-trial detection rates.
    pub detection_stderr: Option<f64>,
    pub timing_rmse: Option<f64>,
    pub timing_samples: u64,
    pub collisions_offered: u64,
    /// Collisions in which every eligible replier was detected.
    pub collision_resolution_prob: Option<f64>,
    /// Collisions in which at least one replier was detected.
    pub collision_any_prob: Option<f64>,
    pub avg_attempts: Option<f64>,
    pub attempts_stderr: Option<f64>,
    pub dropped: u64,
    /// Mean detected UEs on the tagged code pair per round.
    pub code_detected_mean: Option<f64>,
    /// Mean detected tagged UEs per round.
    pub tagged_detected_mean: Option<f64>,
    pub tagged_stderr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Mean and standard error of the mean; the latter needs two samples.
fn mean_stderr(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// Folds per-trial counters into a [`RunMetrics`].
pub fn aggregate(trials: &[TrialMetrics]) -> Result<RunMetrics> {
    if trials.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let mut total = TrialMetrics::default();
    for t in trials {
        total.merge(t);
    }
    let rates: Vec<f64> = trials
        .iter()
        .filter_map(|t| ratio(t.eligible_detected, t.eligible))
        .collect();
    let (_, detection_stderr) = mean_stderr(&rates);
    let timing_rmse = (!total.timing_sq_err.is_empty()).then(|| {
        (total.timing_sq_err.iter().sum::<f64>() / total.timing_sq_err.len() as f64).sqrt()
    });
    let attempts: Vec<f64> = total.attempts.iter().map(|&a| a as f64).collect();
    let (avg_attempts, attempts_stderr) = mean_stderr(&attempts);
    let per_round: Vec<f64> = trials
        .iter()
        .filter(|t| t.tagged_rounds > 0)
        .map(|t| t.code_detected as f64 / t.tagged_rounds as f64)
        .collect();
    let (_, tagged_stderr) = mean_stderr(&per_round);
    Ok(RunMetrics {
        trials: trials.len() as u64,
        activated: total.activated,
        eligible: total.eligible,
        detection_prob: ratio(total.eligible_detected, total.eligible),
        detection_stderr,
        timing_rmse,
        timing_samples: total.timing_sq_err.len() as u64,
        collisions_offered: total.collisions_offered,
        collision_resolution_prob: ratio(total.collisions_resolved, total.collisions_offered),
        collision_any_prob: ratio(total.collisions_resolved_any, total.collisions_offered),
        avg_attempts,
        attempts_stderr,
        dropped: total.dropped,
        code_detected_mean: ratio(total.code_detected, total.tagged_rounds),
        tagged_detected_mean: ratio(total.tagged_detected, total.tagged_rounds),
        tagged_stderr,
    })
}
