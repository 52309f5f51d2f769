//! Step-1 processing at the base station.
//!
//! For each time code: despread, form the sample covariance of the M
//! despread vectors, pick the number of active codes with MDL, estimate the
//! effective offsets with least-squares ESPRIT, demap them into (l̂, θ̂) and
//! finally compute LS estimates of the effective channels.

use std::f64::consts::PI;

use log::warn;
use thiserror::Error;

use crate::airlink::{despread_time, AirlinkError, UlObservation};
use crate::codebook::{demap_offset, effective_code, CodebookError, Demapped, RaCodebook};
use crate::numerics::{
    general_eigenvalues, hermitian_evd, ls_solve, ComplexMatrix, HermitianEvd, NumericsError, C64,
};

const EIGENVALUE_FLOOR: f64 = 1e-300;
/// Eigenvalues below this fraction of the largest are treated as exact
/// zeros; Jacobi cannot resolve anything smaller.
const RELATIVE_EIGENVALUE_FLOOR: f64 = 1e-12;
/// cond(ĈᴴĈ) above this marks a report as saturated.
pub const SATURATION_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("no snapshots")]
    Empty,
    #[error("snapshot {index} has length {len}, expected {expected}")]
    RaggedSnapshots {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("eigenvalues must be sorted non-increasing and non-negative")]
    UnsortedEigenvalues,
    #[error("need at least two eigenvalues, got {0}")]
    TooFewEigenvalues(usize),
    #[error("model order {k} outside 1..={max}")]
    InvalidOrder { k: usize, max: usize },
    #[error("offsets must be distinct")]
    CoincidentOffsets,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Airlink(#[from] AirlinkError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Outcome of Step 1 for one time code.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub time_code: usize,
    pub k_hat: usize,
    /// Estimated effective offsets, ascending in [0, 1).
    pub eps_hats: Vec<f64>,
    /// Demapped (l̂, θ̂) for each entry of `eps_hats`.
    pub code_timing: Vec<Demapped>,
    /// Column j is ĥ′_(j), one entry per antenna. Empty when K̂ = 0 or the
    /// LS system was rank deficient.
    pub channels: Vec<Vec<C64>>,
    /// cond(ĈᴴĈ) exceeded [`SATURATION_CONDITION`] or the LS solve failed.
    pub saturated: bool,
}

impl DetectionReport {
    pub fn empty(time_code: usize) -> Self {
        Self {
            time_code,
            k_hat: 0,
            eps_hats: Vec::new(),
            code_timing: Vec::new(),
            channels: Vec::new(),
            saturated: false,
        }
    }
}

fn check_snapshots(z: &[Vec<C64>]) -> Result<usize> {
    let n = z.first().ok_or(EstimatorError::Empty)?.len();
    for (index, zm) in z.iter().enumerate() {
        if zm.len() != n {
            return Err(EstimatorError::RaggedSnapshots {
                index,
                len: zm.len(),
                expected: n,
            });
        }
    }
    Ok(n)
}

/// R̂ = (1/M) Σ z_m z_mᴴ.
pub fn sample_covariance(z: &[Vec<C64>]) -> Result<ComplexMatrix> {
    let n = check_snapshots(z)?;
    let mut r = ComplexMatrix::zeros(n, n);
    for zm in z {
        for i in 0..n {
            for j in i..n {
                r[(i, j)] += zm[i] * zm[j].conj();
            }
        }
    }
    let inv_m = 1.0 / z.len() as f64;
    for i in 0..n {
        r[(i, i)] = C64::new(r[(i, i)].re * inv_m, 0.0);
        for j in i + 1..n {
            r[(i, j)] *= inv_m;
            r[(j, i)] = r[(i, j)].conj();
        }
    }
    Ok(r)
}

/// MDL(ℓ) for ℓ = 0..N−1.
pub fn mdl_objective(eigenvalues: &[f64], m_snapshots: usize) -> Result<Vec<f64>> {
    let n = eigenvalues.len();
    if n < 2 {
        return Err(EstimatorError::TooFewEigenvalues(n));
    }
    if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues[n - 1] < 0.0 {
        return Err(EstimatorError::UnsortedEigenvalues);
    }
    let floor = (eigenvalues[0] * RELATIVE_EIGENVALUE_FLOOR).max(EIGENVALUE_FLOOR);
    if eigenvalues[n - 1] < floor {
        warn!("flooring eigenvalues below {floor:.3e} before MDL");
    }
    let lam: Vec<f64> = eigenvalues.iter().map(|&l| l.max(floor)).collect();
    let ln_m = (m_snapshots as f64).ln();
    let mf = m_snapshots as f64;
    Ok((0..n)
        .map(|l| {
            let tail = &lam[l..];
            let len = tail.len() as f64;
            let mean_ln = tail.iter().map(|x| x.ln()).sum::<f64>() / len;
            let ln_mean = (tail.iter().sum::<f64>() / len).ln();
            // ln ĝ ≤ 0; clamp the rounding noise of equal tails.
            let ln_g = (mean_ln - ln_mean).min(0.0);
            let lf = l as f64;
            0.5 * lf * (2.0 * n as f64 - lf) * ln_m - mf * len * ln_g
        })
        .collect())
}

/// K̂ = argmin_ℓ MDL(ℓ); the first minimiser wins ties.
pub fn mdl_order(eigenvalues: &[f64], m_snapshots: usize) -> Result<usize> {
    let obj = mdl_objective(eigenvalues, m_snapshots)?;
    let mut best = 0;
    for (l, &v) in obj.iter().enumerate() {
        if v < obj[best] {
            best = l;
        }
    }
    Ok(best)
}

/// ESPRIT estimates from the `k_hat` dominant eigenvectors, ascending in
/// [0, 1).
pub fn esprit_offsets(evd: &HermitianEvd, k_hat: usize) -> Result<Vec<f64>> {
    let n = evd.eigenvalues.len();
    if k_hat == 0 || k_hat >= n {
        return Err(EstimatorError::InvalidOrder {
            k: k_hat,
            max: n.saturating_sub(1),
        });
    }
    let v = evd.eigenvectors.leading_columns(k_hat);
    let v1 = v.row_block(0, n - 1);
    let v2 = v.row_block(1, n - 1);
    let rotation = ls_solve(&v1, &v2)?;
    let mut eps: Vec<f64> = general_eigenvalues(&rotation)?
        .iter()
        .map(|psi| (psi.arg() / (2.0 * PI)).rem_euclid(1.0))
        .collect();
    eps.sort_by(f64::total_cmp);
    Ok(eps)
}

fn vandermonde(eps: &[f64], n_len: usize) -> ComplexMatrix {
    let cols: Vec<Vec<C64>> = eps.iter().map(|&e| effective_code(e, n_len)).collect();
    ComplexMatrix::from_columns(&cols).expect("non-empty offset list")
}

/// Asymptotic variance of each ESPRIT estimate for uncorrelated sources.
///
/// `snr[k]` is the per-snapshot SNR of source k after despreading
/// (ρ_kQβ_k/σ²). For source k with steering matrix C = [c(ε_1) … c(ε_K)]
/// and d_k = ∂c(ε)/∂(2πε) at ε_k,
///
/// Var = 1/(4π²) · 1/(2M·SNR_k·h_kk) · (1 + [(CᴴC)⁻¹]_kk/SNR_k),
/// h_kk = d_kᴴ(I − C(CᴴC)⁻¹Cᴴ)d_k.
///
/// For K = 1 this is 6/(4π²M·SNR·N(N²−1))·(1 + 1/(N·SNR)).
pub fn esprit_variance(eps: &[f64], snr: &[f64], n_len: usize, m_snapshots: usize) -> Result<Vec<f64>> {
    let k = eps.len();
    if k == 0 || k >= n_len || snr.len() != k {
        return Err(EstimatorError::InvalidOrder {
            k,
            max: n_len.saturating_sub(1),
        });
    }
    let c = vandermonde(eps, n_len);
    let ch = c.adjoint();
    let gram = ch.matmul(&c)?;
    let gram_inv = ls_solve(&gram, &ComplexMatrix::identity(k)).map_err(|e| match e {
        NumericsError::RankDeficient { .. } => EstimatorError::CoincidentOffsets,
        other => other.into(),
    })?;
    // Projector onto the orthogonal complement of span(C).
    let proj = ComplexMatrix::identity(n_len).sub(&c.matmul(&gram_inv)?.matmul(&ch)?)?;
    let mf = m_snapshots as f64;
    Ok((0..k)
        .map(|j| {
            let d: Vec<C64> = c
                .column(j)
                .iter()
                .enumerate()
                .map(|(n, &x)| C64::new(0.0, n as f64) * x)
                .collect();
            let pd = proj.mul_vec(&d).expect("N×N projector");
            let h = crate::numerics::dot_conj(&d, &pd).re.max(0.0);
            let s = snr[j];
            let bracket = 1.0 + gram_inv[(j, j)].re / s;
            bracket / (2.0 * mf * s * h) / (4.0 * PI * PI)
        })
        .collect())
}

/// Large-N, high-SNR limit 6/(4π²N³M·SNR).
pub fn esprit_variance_limit(n_len: usize, m_snapshots: usize, snr: f64) -> f64 {
    6.0 / (4.0 * PI * PI * (n_len as f64).powi(3) * m_snapshots as f64 * snr)
}

/// Two offsets are resolvable when they differ by more than 8 standard
/// deviations of the estimator.
pub fn resolvable(eps_a: f64, eps_b: f64, variance: f64) -> bool {
    (eps_a - eps_b).abs() > 8.0 * variance.sqrt()
}

/// LS effective-channel estimates; also returns cond(ĈᴴĈ).
///
/// Column j of the result holds ĥ′_(j)m = e_jᵀ(ĈᴴĈ)⁻¹Ĉᴴz_m over m.
pub fn ls_channels(eps_hats: &[f64], z: &[Vec<C64>]) -> Result<(Vec<Vec<C64>>, f64)> {
    let n = check_snapshots(z)?;
    let k = eps_hats.len();
    if k == 0 || k > n {
        return Err(EstimatorError::InvalidOrder { k, max: n });
    }
    let c = vandermonde(eps_hats, n);
    let gram = c.adjoint().matmul(&c)?;
    let gram_evd = hermitian_evd(&gram)?;
    let smallest = gram_evd.eigenvalues[k - 1];
    let cond = if smallest > 0.0 {
        gram_evd.eigenvalues[0] / smallest
    } else {
        f64::INFINITY
    };
    let rhs = ComplexMatrix::from_columns(z)?;
    let x = ls_solve(&c, &rhs).map_err(|e| match e {
        NumericsError::RankDeficient { .. } => EstimatorError::CoincidentOffsets,
        other => other.into(),
    })?;
    let channels = (0..k).map(|j| x.row(j).to_vec()).collect();
    Ok((channels, cond))
}

/// Step 1 on one despread snapshot set.
pub fn detect_code(z: &[Vec<C64>], time_code: usize, n_fft: usize) -> Result<DetectionReport> {
    let r = sample_covariance(z)?;
    let evd = hermitian_evd(&r)?;
    let k_hat = mdl_order(&evd.eigenvalues, z.len())?;
    if k_hat == 0 {
        return Ok(DetectionReport::empty(time_code));
    }
    let eps_hats = esprit_offsets(&evd, k_hat)?;
    let n_len = evd.eigenvalues.len();
    let code_timing = eps_hats
        .iter()
        .map(|&e| demap_offset(e, n_len, n_fft))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (channels, saturated) = match ls_channels(&eps_hats, z) {
        Ok((ch, cond)) => (ch, !(cond <= SATURATION_CONDITION)),
        Err(EstimatorError::CoincidentOffsets) => (Vec::new(), true),
        Err(e) => return Err(e),
    };
    Ok(DetectionReport {
        time_code,
        k_hat,
        eps_hats,
        code_timing,
        channels,
        saturated,
    })
}

/// Step 1 for every time code of the block.
pub fn run_step1(y: &UlObservation, codebook: &RaCodebook, n_fft: usize) -> Result<Vec<DetectionReport>> {
    (0..codebook.q_len())
        .map(|i| {
            let z = despread_time(y, codebook.time_code(i))?;
            detect_code(&z, i, n_fft)
        })
        .collect()
}
