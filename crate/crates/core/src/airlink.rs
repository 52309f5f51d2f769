//! Received-signal synthesis at the DFT output for the three protocol steps.
//!
//! Every antenna sees an N×Q matrix per RA block. Intra-cell terms are
//! rank-1 (`√ρ h_m c(ε) tᵀ`), inter-cell interferers carry i.i.d. CN(0,1)
//! data per resource element, and thermal noise is white.

use rand::Rng;
use thiserror::Error;

use crate::channel::complex_gaussian;
use crate::codebook::{effective_code, RaCodebook};
use crate::numerics::{dot_conj, norm, ComplexMatrix, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AirlinkError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("channel estimate {0} has zero norm")]
    ZeroNormEstimate(usize),
    #[error("time code {index} out of range for Q = {q_len}")]
    TimeCodeOutOfRange { index: usize, q_len: usize },
}

pub type Result<T> = std::result::Result<T, AirlinkError>;

/// One intra-cell transmission: an RA code pair sent with power `power`
/// through `channel`, arriving with effective offset `eps`.
#[derive(Debug, Clone, Copy)]
pub struct Transmission<'a> {
    pub channel: &'a [C64],
    pub power: f64,
    pub eps: f64,
    pub time_code: usize,
}

/// A UE of a neighbouring cell sending regular data.
#[derive(Debug, Clone)]
pub struct Interferer {
    pub power: f64,
    /// Channel to the serving base station's M antennas.
    pub channel: Vec<C64>,
}

/// The stack of per-antenna N×Q DFT outputs for one RA block.
#[derive(Debug, Clone, PartialEq)]
pub struct UlObservation {
    pub per_antenna: Vec<ComplexMatrix>,
    pub noise_var: f64,
}

impl UlObservation {
    pub fn m_ant(&self) -> usize {
        self.per_antenna.len()
    }

    pub fn n_len(&self) -> usize {
        self.per_antenna.first().map_or(0, |y| y.rows())
    }

    pub fn q_len(&self) -> usize {
        self.per_antenna.first().map_or(0, |y| y.cols())
    }
}

/// The N×Q block received by one UE in the downlink.
#[derive(Debug, Clone, PartialEq)]
pub struct DlObservation {
    pub matrix: ComplexMatrix,
}

fn check_transmissions(txs: &[Transmission], codebook: &RaCodebook, m_ant: usize) -> Result<()> {
    for (k, tx) in txs.iter().enumerate() {
        if tx.channel.len() != m_ant {
            return Err(AirlinkError::DimensionMismatch(format!(
                "transmission {k} has {} channel taps, expected M = {m_ant}",
                tx.channel.len()
            )));
        }
        if tx.time_code >= codebook.q_len() {
            return Err(AirlinkError::TimeCodeOutOfRange {
                index: tx.time_code,
                q_len: codebook.q_len(),
            });
        }
    }
    Ok(())
}

/// Noiseless intra-cell superposition Σ √ρ h_m c(ε) tᵀ per antenna.
pub fn superpose(
    txs: &[Transmission],
    codebook: &RaCodebook,
    m_ant: usize,
) -> Result<Vec<ComplexMatrix>> {
    check_transmissions(txs, codebook, m_ant)?;
    let (n_len, q_len) = (codebook.n_len(), codebook.q_len());
    let mut out = vec![ComplexMatrix::zeros(n_len, q_len); m_ant];
    for tx in txs {
        let code = effective_code(tx.eps, n_len);
        let t = codebook.time_code(tx.time_code);
        let amp = tx.power.sqrt();
        for (y, &h) in out.iter_mut().zip(tx.channel) {
            let g = h * amp;
            for n in 0..n_len {
                let gc = g * code[n];
                for q in 0..q_len {
                    y[(n, q)] += gc * t[q];
                }
            }
        }
    }
    Ok(out)
}

/// Inter-cell interference: each interferer contributes √ρ_ν h_νm times an
/// i.i.d. unit-power data matrix.
pub fn intercell_term<R: Rng + ?Sized>(
    interferers: &[Interferer],
    n_len: usize,
    q_len: usize,
    m_ant: usize,
    rng: &mut R,
) -> Result<Vec<ComplexMatrix>> {
    let mut out = vec![ComplexMatrix::zeros(n_len, q_len); m_ant];
    for (v, intf) in interferers.iter().enumerate() {
        if intf.channel.len() != m_ant {
            return Err(AirlinkError::DimensionMismatch(format!(
                "interferer {v} has {} channel taps, expected M = {m_ant}",
                intf.channel.len()
            )));
        }
        let amp = intf.power.sqrt();
        let data: Vec<C64> = (0..n_len * q_len)
            .map(|_| complex_gaussian(rng, 1.0))
            .collect();
        for (y, &h) in out.iter_mut().zip(&intf.channel) {
            let g = h * amp;
            for n in 0..n_len {
                for q in 0..q_len {
                    y[(n, q)] += g * data[n * q_len + q];
                }
            }
        }
    }
    Ok(out)
}

fn add_noise<R: Rng + ?Sized>(ys: &mut [ComplexMatrix], noise_var: f64, rng: &mut R) {
    if noise_var <= 0.0 {
        return;
    }
    for y in ys.iter_mut() {
        for n in 0..y.rows() {
            for q in 0..y.cols() {
                y[(n, q)] += complex_gaussian(rng, noise_var);
            }
        }
    }
}

/// Step-1 uplink block: intra-cell RA signals plus interference and noise.
pub fn synthesize_ul<R: Rng + ?Sized>(
    txs: &[Transmission],
    codebook: &RaCodebook,
    m_ant: usize,
    noise_var: f64,
    interferers: &[Interferer],
    rng: &mut R,
) -> Result<UlObservation> {
    let mut ys = superpose(txs, codebook, m_ant)?;
    if !interferers.is_empty() {
        let ic = intercell_term(interferers, codebook.n_len(), codebook.q_len(), m_ant, rng)?;
        for (y, i) in ys.iter_mut().zip(&ic) {
            *y = add(y, i);
        }
    }
    add_noise(&mut ys, noise_var, rng);
    Ok(UlObservation {
        per_antenna: ys,
        noise_var,
    })
}

/// Step-3 retransmission block; identical structure with the repliers' UL
/// powers.
pub fn synthesize_step3<R: Rng + ?Sized>(
    repliers: &[Transmission],
    codebook: &RaCodebook,
    m_ant: usize,
    noise_var: f64,
    interferers: &[Interferer],
    rng: &mut R,
) -> Result<UlObservation> {
    synthesize_ul(repliers, codebook, m_ant, noise_var, interferers, rng)
}

fn add(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    ComplexMatrix::from_fn(a.rows(), a.cols(), |r, c| a[(r, c)] + b[(r, c)])
}

/// z_m = Y_m t*/‖t‖ for every antenna.
pub fn despread_time(y: &UlObservation, t: &[f64]) -> Result<Vec<Vec<C64>>> {
    if t.len() != y.q_len() {
        return Err(AirlinkError::DimensionMismatch(format!(
            "time code has length {}, observation has Q = {}",
            t.len(),
            y.q_len()
        )));
    }
    let t_norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(y.per_antenna
        .iter()
        .map(|ym| {
            (0..ym.rows())
                .map(|n| {
                    ym.row(n)
                        .iter()
                        .zip(t)
                        .map(|(&v, &tq)| v * tq)
                        .sum::<C64>()
                        / t_norm
                })
                .collect()
        })
        .collect())
}

/// One precoded downlink beam: unit-norm direction ĥ′/‖ĥ′‖ carrying the
/// code pair (f_l̂, t).
#[derive(Debug, Clone)]
pub struct DlBeam {
    pub direction: Vec<C64>,
    pub freq_code: usize,
    pub time_code: usize,
}

impl DlBeam {
    pub fn new(estimate: &[C64], freq_code: usize, time_code: usize) -> Option<Self> {
        let n = norm(estimate);
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        Some(Self {
            direction: estimate.iter().map(|&h| h / n).collect(),
            freq_code,
            time_code,
        })
    }
}

/// The multicast downlink precoder built from every detection report.
#[derive(Debug, Clone)]
pub struct DlPrecoder {
    pub beams: Vec<DlBeam>,
    pub rho_dl: f64,
}

impl DlPrecoder {
    /// Builds one beam per column of each estimate matrix. `estimates[j]`
    /// is (ĥ′_(j), l̂_(j), time code).
    pub fn new(estimates: &[(Vec<C64>, usize, usize)], rho_dl: f64) -> Result<Self> {
        let beams = estimates
            .iter()
            .enumerate()
            .map(|(j, (h, l, i))| DlBeam::new(h, *l, *i).ok_or(AirlinkError::ZeroNormEstimate(j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { beams, rho_dl })
    }

    /// Noiseless block at a UE with channel `h`:
    /// √ρ_dl Σ_j (hᴴ ĥ′_j/‖ĥ′_j‖) f_l̂j t_jᵀ.
    pub fn noiseless(&self, h: &[C64], codebook: &RaCodebook) -> Result<ComplexMatrix> {
        let (n_len, q_len) = (codebook.n_len(), codebook.q_len());
        let mut out = ComplexMatrix::zeros(n_len, q_len);
        let amp = self.rho_dl.sqrt();
        for beam in &self.beams {
            if beam.direction.len() != h.len() {
                return Err(AirlinkError::DimensionMismatch(format!(
                    "beam has {} taps, UE channel has {}",
                    beam.direction.len(),
                    h.len()
                )));
            }
            let g = dot_conj(h, &beam.direction) * amp;
            let f = codebook.freq_code(beam.freq_code);
            let t = codebook.time_code(beam.time_code);
            for n in 0..n_len {
                for q in 0..q_len {
                    out[(n, q)] += g * f[n] * t[q];
                }
            }
        }
        Ok(out)
    }

    /// Block received by a UE with channel `h`, adding white noise and
    /// downlink inter-cell interference of total per-entry power
    /// `interference_var`.
    pub fn receive<R: Rng + ?Sized>(
        &self,
        h: &[C64],
        codebook: &RaCodebook,
        noise_var: f64,
        interference_var: f64,
        rng: &mut R,
    ) -> Result<DlObservation> {
        let mut m = self.noiseless(h, codebook)?;
        let var = noise_var + interference_var;
        if var > 0.0 {
            for n in 0..m.rows() {
                for q in 0..m.cols() {
                    m[(n, q)] += complex_gaussian(rng, var);
                }
            }
        }
        Ok(DlObservation { matrix: m })
    }
}

/// r = f_lᴴ R t*/(‖f_l‖‖t‖).
pub fn ue_correlate_dl(r: &DlObservation, f: &[C64], t: &[f64]) -> Result<C64> {
    let m = &r.matrix;
    if f.len() != m.rows() || t.len() != m.cols() {
        return Err(AirlinkError::DimensionMismatch(format!(
            "codes ({}, {}) do not match the {}x{} block",
            f.len(),
            t.len(),
            m.rows(),
            m.cols()
        )));
    }
    let f_norm = norm(f);
    let t_norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut acc = C64::new(0.0, 0.0);
    for n in 0..m.rows() {
        let row: C64 = m.row(n).iter().zip(t).map(|(&v, &tq)| v * tq).sum();
        acc += f[n].conj() * row;
    }
    Ok(acc / (f_norm * t_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, SpatialCovariance};
    use crate::codebook::fourier_code;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn single_ue_noiseless() {
        let cb = RaCodebook::new(1, 4).unwrap();
        let h = [C64::new(0.3, -1.2)];
        let tx = Transmission {
            channel: &h,
            power: 1.0,
            eps: 0.0,
            time_code: 0,
        };
        let y = synthesize_ul(&[tx], &cb, 1, 0.0, &[], &mut rng(0)).unwrap();
        for n in 0..4 {
            assert_eq!(y.per_antenna[0][(n, 0)], h[0]);
        }
    }

    #[test]
    fn noise_only_variance() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let sigma2 = 2.5;
        let y = synthesize_ul(&[], &cb, 4000, sigma2, &[], &mut rng(1)).unwrap();
        let count = 4000 * 16;
        let p: f64 = y
            .per_antenna
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|x| x.norm_sqr()))
            .sum::<f64>()
            / count as f64;
        // |y|²/σ² is Exp(1); 4 standard errors.
        assert!((p / sigma2 - 1.0).abs() < 4.0 / (count as f64).sqrt());
    }

    #[test]
    fn despreading_separates_time_codes() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let mut r = rng(2);
        let cov = SpatialCovariance::uncorrelated(1.0, 6);
        let h1 = draw_channel(&cov, &mut r);
        let h2 = draw_channel(&cov, &mut r);
        for (i1, i2) in [(0usize, 1usize), (1, 0)] {
            let txs = [
                Transmission {
                    channel: &h1,
                    power: 2.0,
                    eps: 0.31,
                    time_code: i1,
                },
                Transmission {
                    channel: &h2,
                    power: 0.7,
                    eps: 0.62,
                    time_code: i2,
                },
            ];
            let y = synthesize_ul(&txs, &cb, 6, 0.0, &[], &mut r).unwrap();
            let z = despread_time(&y, cb.time_code(i1)).unwrap();
            let c = effective_code(0.31, 8);
            let gain = (2.0f64 * 2.0).sqrt();
            for m in 0..6 {
                for n in 0..8 {
                    assert!(close(z[m][n], h1[m] * c[n] * gain, 1e-12));
                }
            }
            // UE 2 alone on the other code.
            let y2 = synthesize_ul(&txs[1..], &cb, 6, 0.0, &[], &mut r).unwrap();
            let z2 = despread_time(&y2, cb.time_code(i1)).unwrap();
            assert!(z2.iter().flatten().all(|v| *v == C64::new(0.0, 0.0)));
        }
    }

    #[test]
    fn linearity_of_synthesis() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let mut r = rng(3);
        let cov = SpatialCovariance::uncorrelated(1.0, 3);
        let hs: Vec<Vec<C64>> = (0..3).map(|_| draw_channel(&cov, &mut r)).collect();
        let txs: Vec<Transmission> = hs
            .iter()
            .enumerate()
            .map(|(k, h)| Transmission {
                channel: h,
                power: 0.5 + k as f64,
                eps: 0.1 * k as f64 + 0.05,
                time_code: k % 2,
            })
            .collect();
        let all = superpose(&txs, &cb, 3).unwrap();
        let a = superpose(&txs[..1], &cb, 3).unwrap();
        let b = superpose(&txs[1..], &cb, 3).unwrap();
        for m in 0..3 {
            let diff = all[m].sub(&add(&a[m], &b[m])).unwrap();
            assert!(diff.frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn despread_noise_calibration() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let sigma2 = 0.8;
        let draws = 10_000;
        let y = synthesize_ul(&[], &cb, draws, sigma2, &[], &mut rng(4)).unwrap();
        let z = despread_time(&y, cb.time_code(1)).unwrap();
        let mean: f64 = z
            .iter()
            .map(|zm| zm.iter().map(|x| x.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / draws as f64;
        assert!((mean / (8.0 * sigma2) - 1.0).abs() < 0.02);
    }

    #[test]
    fn intercell_power() {
        assert!(intercell_term(&[], 8, 2, 3, &mut rng(5))
            .unwrap()
            .iter()
            .all(|m| m.frobenius_norm() == 0.0));
        // One interferer with unit channel and power: per-entry power ρβ = 1.
        let m_ant = 2000;
        let intf = Interferer {
            power: 1.0,
            channel: vec![C64::new(1.0, 0.0); m_ant],
        };
        let mut r = rng(6);
        let ic = intercell_term(&[intf], 8, 2, m_ant, &mut r).unwrap();
        let p = ic
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|x| x.norm_sqr()))
            .sum::<f64>()
            / (m_ant * 16) as f64;
        // The same data matrix is shared by all antennas, so only 16
        // independent samples back this average.
        assert!((p - 1.0).abs() < 1.0);

        // ω̄ = E‖I t*/‖t‖‖²/M over fresh draws equals N Σρβ.
        let cb = RaCodebook::new(2, 8).unwrap();
        let cov = SpatialCovariance::uncorrelated(0.3, 16);
        let n_draws = 4000;
        let mut acc = 0.0;
        for _ in 0..n_draws {
            let ints = vec![
                Interferer {
                    power: 2.0,
                    channel: draw_channel(&cov, &mut r),
                },
                Interferer {
                    power: 0.5,
                    channel: draw_channel(&cov, &mut r),
                },
            ];
            let ic = intercell_term(&ints, 8, 2, 16, &mut r).unwrap();
            let y = UlObservation {
                per_antenna: ic,
                noise_var: 0.0,
            };
            let z = despread_time(&y, cb.time_code(0)).unwrap();
            acc += z
                .iter()
                .map(|zm| zm.iter().map(|x| x.norm_sqr()).sum::<f64>())
                .sum::<f64>()
                / 16.0;
        }
        let expected = 8.0 * (2.0 * 0.3 + 0.5 * 0.3);
        assert!((acc / n_draws as f64 / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn dl_aligned_and_orthogonal_beams() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let h = vec![C64::new(1.0, 1.0), C64::new(0.0, -2.0), C64::new(0.5, 0.0)];
        let pre = DlPrecoder::new(&[(h.iter().map(|x| x * 3.0).collect(), 5, 1)], 4.0).unwrap();
        let r = pre.noiseless(&h, &cb).unwrap();
        let f = fourier_code(5, 8).unwrap();
        let t = cb.time_code(1);
        let hn = norm(&h);
        for n in 0..8 {
            for q in 0..2 {
                assert!(close(r[(n, q)], f[n] * t[q] * 2.0 * hn, 1e-12));
            }
        }
        let orth = vec![C64::new(1.0, -1.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
        let h2 = vec![C64::new(0.0, 0.0), C64::new(5.0, 0.0), C64::new(0.0, 3.0)];
        let pre = DlPrecoder::new(&[(orth, 5, 1)], 4.0).unwrap();
        assert!(pre.noiseless(&h2, &cb).unwrap().frobenius_norm() < 1e-12);
        assert!(DlPrecoder::new(&[(vec![C64::new(0.0, 0.0); 3], 0, 0)], 1.0).is_err());
    }

    #[test]
    fn ue_correlation() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let f = fourier_code(3, 8).unwrap();
        let t = cb.time_code(1);
        let m = ComplexMatrix::from_fn(8, 2, |n, q| f[n] * t[q]);
        let r = ue_correlate_dl(&DlObservation { matrix: m }, &f, t).unwrap();
        assert!(close(r, C64::new(16f64.sqrt(), 0.0), 1e-12));
        let f2 = fourier_code(4, 8).unwrap();
        let m2 = ComplexMatrix::from_fn(8, 2, |n, q| f2[n] * t[q]);
        let r = ue_correlate_dl(&DlObservation { matrix: m2 }, &f, t).unwrap();
        assert!(r.norm() < 1e-12);

        let mut g = rng(7);
        let sigma2 = 1.7;
        let draws = 20_000;
        let pre = DlPrecoder {
            beams: Vec::new(),
            rho_dl: 1.0,
        };
        let h = vec![C64::new(1.0, 0.0)];
        let var = (0..draws)
            .map(|_| {
                let obs = pre.receive(&h, &cb, sigma2, 0.0, &mut g).unwrap();
                ue_correlate_dl(&obs, &f, t).unwrap().norm_sqr()
            })
            .sum::<f64>()
            / draws as f64;
        assert!((var / sigma2 - 1.0).abs() < 0.03);
    }

    #[test]
    fn dl_asymptote_at_large_m() {
        // Single UE, exact LS estimate ĥ′ = √(ρQ) h. The correlator output
        // normalised by √M approaches √(ρ_dl τ)·√(ρQ)β/√α with α = ρQβ.
        let cb = RaCodebook::new(2, 8).unwrap();
        let m_ant = 4096;
        let (beta, rho, rho_dl) = (2.0, 0.5, 1.0);
        let mut g = rng(8);
        let h = draw_channel(&SpatialCovariance::uncorrelated(beta, m_ant), &mut g);
        let est: Vec<C64> = h.iter().map(|x| x * (rho * 2.0f64).sqrt()).collect();
        let pre = DlPrecoder::new(&[(est, 3, 0)], rho_dl).unwrap();
        let obs = pre.receive(&h, &cb, 1.0, 0.0, &mut g).unwrap();
        let r = ue_correlate_dl(&obs, cb.freq_code(3), cb.time_code(0)).unwrap();
        let alpha = rho * 2.0 * beta;
        let predicted = (rho_dl * 16.0).sqrt() * (rho * 2.0f64).sqrt() * beta / alpha.sqrt();
        let got = r.re / (m_ant as f64).sqrt();
        assert!((got / predicted - 1.0).abs() < 0.05, "{got} vs {predicted}");
    }

    #[test]
    fn dimension_checks() {
        let cb = RaCodebook::new(2, 8).unwrap();
        let h = [C64::new(1.0, 0.0)];
        let tx = Transmission {
            channel: &h,
            power: 1.0,
            eps: 0.0,
            time_code: 0,
        };
        assert!(synthesize_ul(&[tx], &cb, 2, 0.0, &[], &mut rng(9)).is_err());
        let bad = Transmission { time_code: 2, ..tx };
        assert!(synthesize_ul(&[bad], &cb, 1, 0.0, &[], &mut rng(9)).is_err());
        let y = synthesize_ul(&[], &cb, 1, 1.0, &[], &mut rng(9)).unwrap();
        assert!(despread_time(&y, &[1.0, 1.0, 1.0]).is_err());
    }
}
