//! Cell geometry, large-scale fading, and small-scale channel draws.
//!
//! The cell under study is a square of side D centred on its base station at
//! the origin; its eight neighbours sit on a regular 3×3 grid with the
//! configured inter-site distance. Path loss follows β = Ω·d_km^(−κ) with
//! Ω = −148.1 dB and κ = 3.7, and the round-trip delay in samples is
//! round(2dB/c).

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::{cholesky, ComplexMatrix, NumericsError, C64};

pub const SPEED_OF_LIGHT: f64 = 3e8;
/// Path loss at the 1 km reference distance, in dB.
pub const PATH_LOSS_REFERENCE_DB: f64 = -148.1;
pub const PATH_LOSS_EXPONENT: f64 = 3.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("correlation factor must lie in [0, 1), got {0}")]
    InvalidCorrelation(f64),
    #[error("maximum timing offset {theta_max} exceeds N_FFT/N = {limit} for N = {n_len}")]
    LemmaViolation {
        theta_max: u32,
        limit: f64,
        n_len: usize,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

/// Linear path-loss gain at distance `d_m` metres.
pub fn path_loss(d_m: f64) -> Result<f64> {
    if !(d_m > 0.0) {
        return Err(ChannelError::NonPositiveDistance(d_m));
    }
    let d_km = d_m / 1000.0;
    Ok(10f64.powf(PATH_LOSS_REFERENCE_DB / 10.0) * d_km.powf(-PATH_LOSS_EXPONENT))
}

/// Round-trip delay in whole samples, rounded half away from zero.
pub fn timing_offset(d_m: f64, bandwidth_hz: f64) -> u32 {
    (2.0 * d_m * bandwidth_hz / SPEED_OF_LIGHT).round() as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGeometry {
    /// Side D of each square cell, metres.
    pub cell_side: f64,
    /// UEs are never closer than this to their own base station.
    pub min_distance: f64,
    pub bandwidth: f64,
    pub n_fft: usize,
    pub num_cells: usize,
    pub inter_site: f64,
}

impl Default for NetworkGeometry {
    fn default() -> Self {
        Self {
            cell_side: 500.0,
            min_distance: 25.0,
            bandwidth: 20e6,
            n_fft: 1024,
            num_cells: 9,
            inter_site: 500.0,
        }
    }
}

impl NetworkGeometry {
    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.n_fft as f64
    }

    /// T_s = 1/(Δf·N_FFT).
    pub fn sampling_period(&self) -> f64 {
        1.0 / (self.subcarrier_spacing() * self.n_fft as f64)
    }

    /// Delay of a UE in the cell corner.
    pub fn theta_max(&self) -> u32 {
        timing_offset(SQRT_2 * self.cell_side / 2.0, self.bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_side > 0.0) {
            return Err(ChannelError::InvalidGeometry("cell side must be positive".into()));
        }
        if !(self.min_distance >= 0.0) || self.min_distance >= self.cell_side / 2.0 {
            return Err(ChannelError::InvalidGeometry(
                "minimum distance must lie in [0, D/2)".into(),
            ));
        }
        if !(self.bandwidth > 0.0) || self.n_fft == 0 {
            return Err(ChannelError::InvalidGeometry(
                "bandwidth and DFT size must be positive".into(),
            ));
        }
        if self.num_cells != 1 && self.num_cells != 9 {
            return Err(ChannelError::InvalidGeometry(format!(
                "only 1 or 9 cells (3x3 grid) are supported, got {}",
                self.num_cells
            )));
        }
        Ok(())
    }

    /// Checks θ_max ≤ N_FFT/N, the condition for ε ↦ (l, θ) to be unique.
    pub fn check_unique_demapping(&self, n_len: usize) -> Result<()> {
        let theta_max = self.theta_max();
        let limit = self.n_fft as f64 / n_len as f64;
        if theta_max as f64 > limit {
            return Err(ChannelError::LemmaViolation {
                theta_max,
                limit,
                n_len,
            });
        }
        Ok(())
    }

    /// Base-station positions of the neighbouring cells.
    pub fn neighbor_sites(&self) -> Vec<(f64, f64)> {
        if self.num_cells == 1 {
            return Vec::new();
        }
        let mut sites = Vec::with_capacity(8);
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                if dx != 0 || dy != 0 {
                    sites.push((dx as f64 * self.inter_site, dy as f64 * self.inter_site));
                }
            }
        }
        sites
    }

    /// Uniform point in the cell square centred at `center`, outside the
    /// exclusion disk around it.
    pub fn sample_position<R: Rng + ?Sized>(&self, center: (f64, f64), rng: &mut R) -> (f64, f64) {
        let half = self.cell_side / 2.0;
        loop {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            if x.hypot(y) >= self.min_distance {
                return (center.0 + x, center.1 + y);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceModel {
    Uncorrelated,
    /// Exponential correlation with factor `r` and angle of arrival `phi`.
    Exponential { r: f64, phi: f64 },
}

/// One UE of the cell population, active or not.
#[derive(Debug, Clone, PartialEq)]
pub struct UeRecord {
    pub id: u64,
    pub position: (f64, f64),
    pub distance: f64,
    /// Linear large-scale gain β_k.
    pub beta: f64,
    /// Round-trip delay θ_k in samples.
    pub theta: u32,
    pub cov_model: CovarianceModel,
    pub time_code: usize,
    pub freq_code: usize,
    /// Transmit power ρ_k in watts, zero while idle.
    pub power: f64,
    /// Failed attempts so far in the current access procedure.
    pub attempts: u32,
    pub active: bool,
}

impl UeRecord {
    pub fn at_position(id: u64, position: (f64, f64), geometry: &NetworkGeometry) -> Result<Self> {
        let distance = position.0.hypot(position.1);
        Ok(Self {
            id,
            position,
            distance,
            beta: path_loss(distance)?,
            theta: timing_offset(distance, geometry.bandwidth),
            cov_model: CovarianceModel::Uncorrelated,
            time_code: 0,
            freq_code: 0,
            power: 0.0,
            attempts: 0,
            active: false,
        })
    }

    /// Received SNR ρβ/σ² at the current power.
    pub fn snr(&self, noise_var: f64) -> f64 {
        self.power * self.beta / noise_var
    }
}

/// Places `count` UEs uniformly in the serving cell (minus the exclusion
/// disk). Ids are assigned sequentially from `first_id`.
pub fn place_ues<R: Rng + ?Sized>(
    count: usize,
    first_id: u64,
    geometry: &NetworkGeometry,
    rng: &mut R,
) -> Vec<UeRecord> {
    (0..count)
        .map(|i| {
            let pos = geometry.sample_position((0.0, 0.0), rng);
            UeRecord::at_position(first_id + i as u64, pos, geometry)
                .expect("sampled positions respect the exclusion disk")
        })
        .collect()
}

/// An active UE of a neighbouring cell as seen from the serving base station.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfererSite {
    pub position: (f64, f64),
    /// Distance to the serving base station.
    pub distance: f64,
    pub beta: f64,
}

/// Places `per_cell` interferers uniformly in every neighbouring cell.
pub fn place_interferers<R: Rng + ?Sized>(
    per_cell: usize,
    geometry: &NetworkGeometry,
    rng: &mut R,
) -> Vec<InterfererSite> {
    let mut out = Vec::with_capacity(per_cell * 8);
    for site in geometry.neighbor_sites() {
        for _ in 0..per_cell {
            let position = geometry.sample_position(site, rng);
            let distance = position.0.hypot(position.1);
            out.push(InterfererSite {
                position,
                distance,
                beta: path_loss(distance).expect("neighbour cells exclude the origin"),
            });
        }
    }
    out
}

/// Mean path-loss gain to the serving base station of a UE placed uniformly
/// in a neighbouring cell, averaged over all neighbours (midpoint rule on a
/// `grid`×`grid` lattice per cell).
pub fn mean_interferer_gain(geometry: &NetworkGeometry, grid: usize) -> f64 {
    let sites = geometry.neighbor_sites();
    if sites.is_empty() {
        return 0.0;
    }
    let step = geometry.cell_side / grid as f64;
    let half = geometry.cell_side / 2.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for (cx, cy) in &sites {
        for i in 0..grid {
            for j in 0..grid {
                let x = -half + (i as f64 + 0.5) * step;
                let y = -half + (j as f64 + 0.5) * step;
                if x.hypot(y) < geometry.min_distance {
                    continue;
                }
                let d = (cx + x).hypot(cy + y);
                total += path_loss(d).expect("positive distance");
                count += 1;
            }
        }
    }
    total / count as f64
}

#[derive(Debug, Clone)]
enum CovarianceKind {
    ScaledIdentity,
    Dense {
        matrix: ComplexMatrix,
        factor: ComplexMatrix,
    },
}

/// Spatial covariance R_k of a UE's channel across M antennas.
#[derive(Debug, Clone)]
pub struct SpatialCovariance {
    beta: f64,
    m_ant: usize,
    kind: CovarianceKind,
}

impl SpatialCovariance {
    /// R = βI_M.
    pub fn uncorrelated(beta: f64, m_ant: usize) -> Self {
        Self {
            beta,
            m_ant,
            kind: CovarianceKind::ScaledIdentity,
        }
    }

    /// Dense covariance; the colouring factor is the Cholesky factor of
    /// R + 1e-12·β·I.
    pub fn dense(matrix: ComplexMatrix) -> Result<Self> {
        let m_ant = matrix.rows();
        let beta = matrix.trace().re / m_ant as f64;
        let ridge = 1e-12 * beta;
        let mut loaded = matrix.clone();
        for i in 0..m_ant {
            loaded[(i, i)] += C64::new(ridge, 0.0);
        }
        let factor = cholesky(&loaded)?;
        Ok(Self {
            beta,
            m_ant,
            kind: CovarianceKind::Dense { matrix, factor },
        })
    }

    pub fn for_model(model: CovarianceModel, beta: f64, m_ant: usize) -> Result<Self> {
        match model {
            CovarianceModel::Uncorrelated => Ok(Self::uncorrelated(beta, m_ant)),
            CovarianceModel::Exponential { r, phi } => exp_correlation(beta, r, phi, m_ant),
        }
    }

    /// Normalised trace tr(R)/M.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn m_ant(&self) -> usize {
        self.m_ant
    }

    pub fn matrix(&self) -> ComplexMatrix {
        match &self.kind {
            CovarianceKind::ScaledIdentity => {
                ComplexMatrix::identity(self.m_ant).scale(self.beta)
            }
            CovarianceKind::Dense { matrix, .. } => matrix.clone(),
        }
    }
}

/// Exponential correlation model [R]_{m,n} = β r^{|n−m|} e^{jφ(n−m)}.
pub fn exp_correlation(beta: f64, r: f64, phi: f64, m_ant: usize) -> Result<SpatialCovariance> {
    if !(0.0..1.0).contains(&r) {
        return Err(ChannelError::InvalidCorrelation(r));
    }
    if r == 0.0 {
        return Ok(SpatialCovariance::uncorrelated(beta, m_ant));
    }
    let matrix = ComplexMatrix::from_fn(m_ant, m_ant, |m, n| {
        let lag = n as i64 - m as i64;
        C64::from_polar(beta * r.powi(lag.unsigned_abs() as i32), phi * lag as f64)
    });
    SpatialCovariance::dense(matrix)
}

/// Draws h ~ CN(0, R).
pub fn draw_channel<R: Rng + ?Sized>(cov: &SpatialCovariance, rng: &mut R) -> Vec<C64> {
    match &cov.kind {
        CovarianceKind::ScaledIdentity => (0..cov.m_ant)
            .map(|_| complex_gaussian(rng, cov.beta))
            .collect(),
        CovarianceKind::Dense { factor, .. } => {
            let w: Vec<C64> = (0..cov.m_ant).map(|_| complex_gaussian(rng, 1.0)).collect();
            factor.mul_vec(&w).expect("factor is M×M")
        }
    }
}

/// Angle of arrival for the exponential model, uniform on [−π, π).
pub fn draw_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-PI..PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::hermitian_evd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn db(x: f64) -> f64 {
        10.0 * x.log10()
    }

    #[test]
    fn path_loss_examples() {
        assert!((db(path_loss(1000.0).unwrap()) + 148.1).abs() < 1e-9);
        let expected = -148.1 + 37.0 * 2f64.log10();
        assert!((db(path_loss(500.0).unwrap()) - expected).abs() < 1e-9);
        assert!((expected + 136.96).abs() < 0.01);
        assert!(path_loss(100.0).unwrap() > path_loss(200.0).unwrap());
        assert!(path_loss(0.0).is_err());
        assert!(path_loss(-3.0).is_err());
    }

    #[test]
    fn timing_offset_examples() {
        assert_eq!(timing_offset(353.553, 20e6), 47);
        assert_eq!(timing_offset(25.0, 20e6), 3);
        assert_eq!(timing_offset(0.0, 20e6), 0);
        // 2dB/c = 0.5 exactly rounds away from zero.
        assert_eq!(timing_offset(3.75, 20e6), 1);
    }

    #[test]
    fn geometry_defaults() {
        let g = NetworkGeometry::default();
        assert_eq!(g.theta_max(), 47);
        assert!((g.sampling_period() - 5e-8).abs() < 1e-20);
        assert!(g.check_unique_demapping(8).is_ok());
        assert!(g.check_unique_demapping(12).is_ok());
        let big = NetworkGeometry {
            cell_side: 2000.0,
            ..g.clone()
        };
        assert!(matches!(
            big.check_unique_demapping(8),
            Err(ChannelError::LemmaViolation { theta_max: 189, .. })
        ));
        assert_eq!(g.neighbor_sites().len(), 8);
    }

    #[test]
    fn placement_statistics() {
        let g = NetworkGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(place_ues(0, 0, &g, &mut rng).is_empty());
        let ues = place_ues(100_000, 0, &g, &mut rng);
        assert!(ues.iter().all(|u| u.distance >= 25.0));
        assert!(ues
            .iter()
            .all(|u| u.position.0.abs() <= 250.0 && u.position.1.abs() <= 250.0));
        assert_eq!(ues.iter().map(|u| u.theta).max(), Some(47));
        assert!(ues.iter().all(|u| u.beta > 0.0));
    }

    #[test]
    fn interferers_live_in_neighbour_cells() {
        let g = NetworkGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ifs = place_interferers(10, &g, &mut rng);
        assert_eq!(ifs.len(), 80);
        assert!(ifs
            .iter()
            .all(|i| i.position.0.abs().max(i.position.1.abs()) >= 250.0));
        let mc: f64 = place_interferers(2000, &g, &mut rng)
            .iter()
            .map(|i| i.beta)
            .sum::<f64>()
            / 16000.0;
        let quad = mean_interferer_gain(&g, 200);
        assert!((mc / quad - 1.0).abs() < 0.1, "mc {mc} quad {quad}");
    }

    #[test]
    fn exponential_model() {
        let r0 = exp_correlation(2.0, 0.0, 0.7, 4).unwrap();
        assert_eq!(r0.matrix(), ComplexMatrix::identity(4).scale(2.0));
        let r = exp_correlation(1.0, 0.5, 0.0, 4).unwrap();
        let m = r.matrix();
        assert!((m[(1, 3)] - C64::new(0.25, 0.0)).norm() < 1e-15);
        let r = exp_correlation(3.0, 0.9, 1.3, 16).unwrap();
        let m = r.matrix();
        for i in 0..16 {
            assert!((m[(i, i)] - C64::new(3.0, 0.0)).norm() < 1e-15);
        }
        assert!(m.hermitian_asymmetry() < 1e-15);
        assert!((r.beta() - 3.0).abs() < 1e-12);
        let evd = hermitian_evd(&m).unwrap();
        assert!(evd.eigenvalues.iter().all(|&l| l >= -1e-10 * 3.0));
        assert!(exp_correlation(1.0, 1.0, 0.0, 4).is_err());
    }

    #[test]
    fn white_channel_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = SpatialCovariance::uncorrelated(1.0, 1);
        let n = 100_000;
        let var: f64 = (0..n)
            .map(|_| draw_channel(&cov, &mut rng)[0].norm_sqr())
            .sum::<f64>()
            / n as f64;
        // |h|² is Exp(1): standard error 1/√n.
        assert!((var - 1.0).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn correlated_channel_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m_ant = 4;
        let cov = exp_correlation(1.5, 0.7, 0.4, m_ant).unwrap();
        let target = cov.matrix();
        let n = 100_000;
        let mut acc = ComplexMatrix::zeros(m_ant, m_ant);
        for _ in 0..n {
            let h = draw_channel(&cov, &mut rng);
            for r in 0..m_ant {
                for c in 0..m_ant {
                    acc[(r, c)] += h[r] * h[c].conj();
                }
            }
        }
        let sample = acc.scale(1.0 / n as f64);
        for r in 0..m_ant {
            for c in 0..m_ant {
                // Entry standard error is at most β/√n.
                let err = (sample[(r, c)] - target[(r, c)]).norm();
                assert!(err < 5.0 * 1.5 / (n as f64).sqrt(), "({r},{c}) err {err}");
            }
        }
    }

    #[test]
    fn channel_hardening() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta = 2.5;
        let cov = SpatialCovariance::uncorrelated(beta, 4096);
        let draws = 200;
        let within = (0..draws)
            .filter(|_| {
                let h = draw_channel(&cov, &mut rng);
                let g = h.iter().map(|x| x.norm_sqr()).sum::<f64>() / 4096.0;
                ((g - beta) / beta).abs() < 0.1
            })
            .count();
        assert!(within as f64 >= 0.99 * draws as f64);

        // Var(‖h‖²/M) = β²/M at M = 1024.
        let cov = SpatialCovariance::uncorrelated(beta, 1024);
        let n = 10_000;
        let gains: Vec<f64> = (0..n)
            .map(|_| {
                draw_channel(&cov, &mut rng)
                    .iter()
                    .map(|x| x.norm_sqr())
                    .sum::<f64>()
                    / 1024.0
            })
            .collect();
        let mean = gains.iter().sum::<f64>() / n as f64;
        let var = gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = beta * beta / 1024.0;
        assert!((var / expected - 1.0).abs() < 0.1, "var {var} expected {expected}");
    }

    #[test]
    fn favourable_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (bk, bi) = (1.0, 4.0);
        let ck = SpatialCovariance::uncorrelated(bk, 1024);
        let ci = SpatialCovariance::uncorrelated(bi, 1024);
        let n = 500;
        let mean: f64 = (0..n)
            .map(|_| {
                let hk = draw_channel(&ck, &mut rng);
                let hi = draw_channel(&ci, &mut rng);
                crate::numerics::dot_conj(&hk, &hi).norm() / 1024.0
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean <= 2.0 * (bk * bi / 1024.0).sqrt());
    }
}
