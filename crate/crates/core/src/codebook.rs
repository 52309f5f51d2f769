//! Random-access codes and the effective-offset bijection.
//!
//! Each access attempt spreads over a block of `Q` OFDM symbols and `N`
//! adjacent subcarriers with a time code (Walsh–Hadamard) and a frequency
//! code (a Fourier basis vector). A propagation delay of θ samples turns the
//! frequency code `l` into a complex exponential whose normalised frequency
//! ε = l/N − θ/N_FFT is what the base station observes.

use std::f64::consts::PI;

use thiserror::Error;

use crate::numerics::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodebookError {
    #[error("frequency code index {index} out of range for N = {n_len}")]
    CodeIndexOutOfRange { index: usize, n_len: usize },
    #[error("time code length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("code length must be at least {min}, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("timing offset {theta} exceeds N_FFT/N = {limit}")]
    TimingOutOfRange { theta: f64, limit: f64 },
    #[error("effective offset {eps} demaps to timing {theta:.3} outside [0, {limit}]")]
    OutOfModel { eps: f64, theta: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, CodebookError>;

/// Tolerance on N·ε when deciding which code bin an effective offset falls
/// in, so ε = l/N computed in floating point still demaps to (l, 0).
const BIN_TOLERANCE: f64 = 1e-9;
/// Slack (in samples) tolerated outside [0, N_FFT/N] before a demapped
/// timing is flagged as out of model.
const TIMING_SLACK: f64 = 1e-6;

/// Fourier frequency code `l`: entry `n` is e^{j2πnl/N}.
pub fn fourier_code(l: usize, n_len: usize) -> Result<Vec<C64>> {
    if l >= n_len {
        return Err(CodebookError::CodeIndexOutOfRange { index: l, n_len });
    }
    Ok((0..n_len)
        .map(|n| C64::from_polar(1.0, 2.0 * PI * ((n * l) % n_len) as f64 / n_len as f64))
        .collect())
}

/// Sylvester-ordered Walsh–Hadamard codes of length `q_len`.
pub fn walsh_hadamard_codebook(q_len: usize) -> Result<Vec<Vec<f64>>> {
    if q_len == 0 || !q_len.is_power_of_two() {
        return Err(CodebookError::NotPowerOfTwo(q_len));
    }
    let mut codes = vec![vec![1.0]];
    while codes.len() < q_len {
        let len = codes.len();
        let mut next = Vec::with_capacity(2 * len);
        for row in &codes {
            next.push(row.iter().chain(row.iter()).copied().collect());
        }
        for row in &codes {
            next.push(row.iter().copied().chain(row.iter().map(|x| -x)).collect());
        }
        codes = next;
    }
    Ok(codes)
}

/// Effective frequency-domain code c(ε) = [1, e^{j2πε}, …, e^{j2π(N−1)ε}]ᵀ.
pub fn effective_code(eps: f64, n_len: usize) -> Vec<C64> {
    (0..n_len)
        .map(|n| {
            let phase = (n as f64 * eps).rem_euclid(1.0);
            C64::from_polar(1.0, 2.0 * PI * phase)
        })
        .collect()
}

/// ε = l/N − θ/N_FFT.
pub fn effective_offset(l: usize, theta: f64, n_len: usize, n_fft: usize) -> f64 {
    l as f64 / n_len as f64 - theta / n_fft as f64
}

/// Code index and timing recovered from an effective offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demapped {
    pub code_index: usize,
    /// Timing in samples; real-valued because estimates are.
    pub timing: f64,
}

impl Demapped {
    /// Timing rounded to whole samples for timing-advance reporting.
    pub fn timing_advance(&self) -> i64 {
        self.timing.round() as i64
    }
}

/// Inverse of [`effective_offset`]: l = ceil(Nε), θ = N_FFT(l/N − ε).
///
/// Offsets just above (N−1)/N wrap to code 0 with a positive timing, so the
/// [0, 1) output range of the subspace estimator is handled directly. An ε
/// sitting exactly on a bin edge l/N demaps to (l, 0).
pub fn demap_offset(eps: f64, n_len: usize, n_fft: usize) -> Result<Demapped> {
    let n = n_len as f64;
    let limit = n_fft as f64 / n;
    let bin = (n * eps - BIN_TOLERANCE).ceil();
    let timing = n_fft as f64 * (bin / n - eps);
    if !(-TIMING_SLACK..=limit + TIMING_SLACK).contains(&timing) {
        return Err(CodebookError::OutOfModel {
            eps,
            theta: timing,
            limit,
        });
    }
    let code_index = (bin as i64).rem_euclid(n_len as i64) as usize;
    Ok(Demapped {
        code_index,
        timing: timing.max(0.0),
    })
}

/// One UE's effective offset together with the pair that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveOffset {
    pub value: f64,
    pub code_index: usize,
    pub timing: u32,
}

impl EffectiveOffset {
    pub fn new(code_index: usize, timing: u32, n_len: usize, n_fft: usize) -> Result<Self> {
        if code_index >= n_len {
            return Err(CodebookError::CodeIndexOutOfRange {
                index: code_index,
                n_len,
            });
        }
        let limit = n_fft as f64 / n_len as f64;
        if timing as f64 > limit {
            return Err(CodebookError::TimingOutOfRange {
                theta: timing as f64,
                limit,
            });
        }
        Ok(Self {
            value: effective_offset(code_index, timing as f64, n_len, n_fft),
            code_index,
            timing,
        })
    }
}

/// The Q time codes and N frequency codes of one RA block.
#[derive(Debug, Clone)]
pub struct RaCodebook {
    q_len: usize,
    n_len: usize,
    time_codes: Vec<Vec<f64>>,
    freq_codes: Vec<Vec<C64>>,
}

impl RaCodebook {
    pub fn new(q_len: usize, n_len: usize) -> Result<Self> {
        if n_len < 2 {
            return Err(CodebookError::TooShort { min: 2, got: n_len });
        }
        let time_codes = walsh_hadamard_codebook(q_len)?;
        let freq_codes = (0..n_len)
            .map(|l| fourier_code(l, n_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            q_len,
            n_len,
            time_codes,
            freq_codes,
        })
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn n_len(&self) -> usize {
        self.n_len
    }

    /// τ = QN resource elements per block.
    pub fn tau(&self) -> usize {
        self.q_len * self.n_len
    }

    /// Number of distinct (time, frequency) code pairs.
    pub fn num_pairs(&self) -> usize {
        self.tau()
    }

    pub fn time_code(&self, i: usize) -> &[f64] {
        &self.time_codes[i]
    }

    pub fn freq_code(&self, l: usize) -> &[C64] {
        &self.freq_codes[l]
    }

    pub fn time_codes(&self) -> &[Vec<f64>] {
        &self.time_codes
    }
}
