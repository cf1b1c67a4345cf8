//! Spatially correlated Rayleigh fading MIMO-OFDM channel synthesis.
//!
//! Channels are generated in three steps: i.i.d. complex-normal time-domain
//! taps shaped by a delay profile, an unnormalized DFT across taps to obtain
//! per-subcarrier frequency responses, and a two-sided spatial coloring with
//! the PSD square roots of the antenna correlation matrices. The stacked
//! channel vector concatenates the vectorized per-subcarrier matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::Cpx;

/// Relative tolerance below which a negative correlation eigenvalue is
/// treated as a PSD violation rather than rounding noise.
pub const EPS_PSD: f64 = 1e-9;

/// Rectangular antenna panel with an adjacent-element correlation factor.
///
/// Elements are indexed row-major from the top-left to the bottom-right
/// corner; the correlation between two elements decays as `rho` raised to
/// their Euclidean grid distance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AntennaArray {
    /// Horizontal element count.
    pub n_h: usize,
    /// Vertical element count.
    pub n_v: usize,
    /// Correlation between adjacent elements, in \[0, 1\].
    pub rho: f64,
}

impl AntennaArray {
    pub fn new(n_h: usize, n_v: usize, rho: f64) -> Result<Self> {
        if n_h < 1 || n_v < 1 {
            return Err(Error::InvalidParameter(format!(
                "antenna array must have at least one element per axis, got {n_h}x{n_v}"
            )));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidParameter(format!(
                "correlation factor must lie in [0, 1], got {rho}"
            )));
        }
        Ok(Self { n_h, n_v, rho })
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Real symmetric antenna correlation matrix with unit diagonal.
///
/// The eigendecomposition is computed at construction; eigenvalues in
/// `(-EPS_PSD·λ_max, 0)` are clamped to zero with a warning, anything more
/// negative is rejected.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    entries: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "correlation matrix must be square and nonempty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for i in 0..n {
            if (entries[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "correlation diagonal entry {} is {}, expected 1",
                    i,
                    entries[(i, i)]
                )));
            }
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "correlation matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = entries.clone().symmetric_eigen();
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let floor = -EPS_PSD * lambda_max.max(1.0);
        let mut eigenvalues = Vec::with_capacity(n);
        for &v in eig.eigenvalues.iter() {
            if v < floor {
                return Err(Error::NotPositiveSemidefinite { min_eigenvalue: v });
            }
            if v < 0.0 {
                log::warn!("clamping near-zero correlation eigenvalue {v:.3e} to 0");
            }
            eigenvalues.push(v.max(0.0));
        }
        Ok(Self {
            entries,
            eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    /// Identity correlation (uncorrelated antennas).
    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is a valid correlation matrix")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Eigenvalues, clamped nonnegative, in the solver's order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Numerical rank with threshold `tol` relative to the largest eigenvalue.
    pub fn rank(&self, tol: f64) -> usize {
        let lambda_max = self.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        self.eigenvalues
            .iter()
            .filter(|&&v| v > tol * lambda_max)
            .count()
    }

    /// Symmetric PSD square root, valid at rank deficiency.
    pub fn sqrt_psd(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for (c, &v) in self.eigenvalues.iter().enumerate() {
            let s = v.sqrt();
            for r in 0..n {
                scaled[(r, c)] *= s;
            }
        }
        &scaled * self.eigenvectors.transpose()
    }
}

/// Builds the 2-D antenna correlation matrix of an array: a symmetric block
/// Toeplitz matrix whose (p, q) entry is `rho` raised to the Euclidean grid
/// distance between elements p and q.
pub fn build_correlation(array: &AntennaArray) -> Result<CorrelationMatrix> {
    if !(0.0..=1.0).contains(&array.rho) {
        return Err(Error::InvalidParameter(format!(
            "correlation factor must lie in [0, 1], got {}",
            array.rho
        )));
    }
    let n = array.len();
    let mut entries = DMatrix::zeros(n, n);
    for p in 0..n {
        let (pv, ph) = (p / array.n_h, p % array.n_h);
        for q in 0..n {
            let (qv, qh) = (q / array.n_h, q % array.n_h);
            let dv = pv.abs_diff(qv) as f64;
            let dh = ph.abs_diff(qh) as f64;
            let dist = (dv * dv + dh * dh).sqrt();
            entries[(p, q)] = if p == q { 1.0 } else { array.rho.powf(dist) };
        }
    }
    CorrelationMatrix::new(entries)
}

/// Per-tap average power of the time-domain impulse response, normalized to
/// sum to one so that the channel variance is carried by `sigma_h2` alone.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DelayProfile {
    taps: Vec<f64>,
}

impl DelayProfile {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidParameter(
                "delay profile needs at least one tap".into(),
            ));
        }
        if taps.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(
                "delay profile powers must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = taps.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter(
                "delay profile must carry positive total power".into(),
            ));
        }
        Ok(Self {
            taps: taps.into_iter().map(|d| d / total).collect(),
        })
    }

    /// Exponentially decaying profile `d_l ∝ exp(-decay·l)`, `l = 0..len-1`.
    pub fn exponential(len: usize, decay: f64) -> Result<Self> {
        if !decay.is_finite() || decay < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "decay constant must be nonnegative, got {decay}"
            )));
        }
        Self::new((0..len).map(|l| (-decay * l as f64).exp()).collect())
    }

    /// Single-tap (frequency-flat) profile.
    pub fn flat() -> Self {
        Self { taps: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Normalized tap powers (sum to one).
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

/// One channel realization: per-subcarrier MIMO matrices and their stacked
/// vector (subcarrier-major, each subcarrier block column-vectorized).
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub per_subcarrier: Vec<DMatrix<Cpx>>,
    pub h: DVector<Cpx>,
    pub sigma_h2: f64,
}

impl ChannelRealization {
    fn from_matrices(per_subcarrier: Vec<DMatrix<Cpx>>, sigma_h2: f64) -> Self {
        let mut h = Vec::new();
        for m in &per_subcarrier {
            h.extend_from_slice(m.as_slice());
        }
        Self {
            per_subcarrier,
            h: DVector::from_vec(h),
            sigma_h2,
        }
    }

    pub fn n(&self) -> usize {
        self.h.len()
    }
}

/// Draws L i.i.d. complex-normal taps per antenna pair, tap `l` with
/// variance `sigma_h2 · d_l`. Returned as one `n_r × n_t` matrix per tap.
pub fn sample_time_domain<R: Rng + ?Sized>(
    n_r: usize,
    n_t: usize,
    profile: &DelayProfile,
    sigma_h2: f64,
    rng: &mut R,
) -> Result<Vec<DMatrix<Cpx>>> {
    if n_r < 1 || n_t < 1 {
        return Err(Error::InvalidParameter(
            "antenna counts must be at least 1".into(),
        ));
    }
    if sigma_h2 < 0.0 || !sigma_h2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "channel variance must be finite and nonnegative, got {sigma_h2}"
        )));
    }
    let mut taps = Vec::with_capacity(profile.len());
    for &d in profile.taps() {
        let std = (sigma_h2 * d / 2.0).sqrt();
        // Column-major fill keeps the draw order stable for a given rng.
        let mut m = DMatrix::zeros(n_r, n_t);
        for t in 0..n_t {
            for r in 0..n_r {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                m[(r, t)] = Cpx::new(re * std, im * std);
            }
        }
        taps.push(m);
    }
    Ok(taps)
}

/// Unnormalized DFT across taps: subcarrier `n` (0-based) gets
/// `Σ_l tap_l · exp(-j·2π·n·l / n_f)`.
pub fn to_frequency_domain(taps: &[DMatrix<Cpx>], n_f: usize) -> Result<Vec<DMatrix<Cpx>>> {
    let l_taps = taps.len();
    if n_f < l_taps {
        return Err(Error::InvalidParameter(format!(
            "subcarrier count {n_f} must be at least the tap count {l_taps}"
        )));
    }
    let (n_r, n_t) = (taps[0].nrows(), taps[0].ncols());
    let mut out = Vec::with_capacity(n_f);
    for n in 0..n_f {
        let mut m = DMatrix::zeros(n_r, n_t);
        for (l, tap) in taps.iter().enumerate() {
            let phase = -TAU * (n as f64) * (l as f64) / (n_f as f64);
            let w = Cpx::from_polar(1.0, phase);
            m.zip_apply(tap, |acc, x| *acc += w * x);
        }
        out.push(m);
    }
    Ok(out)
}

/// Colors uncorrelated per-subcarrier matrices with the PSD square roots of
/// the transmit and receive correlation matrices and stacks the result.
pub fn apply_spatial_correlation(
    h_iid: &[DMatrix<Cpx>],
    r_t: &CorrelationMatrix,
    r_r: &CorrelationMatrix,
    sigma_h2: f64,
) -> Result<ChannelRealization> {
    let sqrt_t = r_t.sqrt_psd();
    let sqrt_r = r_r.sqrt_psd();
    color_with_sqrts(h_iid, &sqrt_t, &sqrt_r, sigma_h2)
}

fn color_with_sqrts(
    h_iid: &[DMatrix<Cpx>],
    sqrt_t: &DMatrix<f64>,
    sqrt_r: &DMatrix<f64>,
    sigma_h2: f64,
) -> Result<ChannelRealization> {
    let (n_r, n_t) = (h_iid[0].nrows(), h_iid[0].ncols());
    if sqrt_r.nrows() != n_r || sqrt_t.nrows() != n_t {
        return Err(Error::DimensionMismatch(format!(
            "correlation dimensions ({}, {}) do not match channel ({n_r}, {n_t})",
            sqrt_r.nrows(),
            sqrt_t.nrows()
        )));
    }
    let sqrt_t_c = sqrt_t.map(|x| Cpx::new(x, 0.0));
    let sqrt_r_c = sqrt_r.map(|x| Cpx::new(x, 0.0));
    let colored = h_iid
        .iter()
        .map(|m| &sqrt_r_c * m * &sqrt_t_c)
        .collect::<Vec<_>>();
    Ok(ChannelRealization::from_matrices(colored, sigma_h2))
}

/// Vector layout of the stacked CSI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CsiLayout {
    /// Per-subcarrier spatial blocks, one after another (the native layout).
    SubcarrierMajor,
    /// Per-antenna-pair frequency tracks, one after another.
    TrackMajor,
}

/// Reorders a subcarrier-major vector into the requested layout.
///
/// `n_spatial` is the per-subcarrier block size (receive × transmit antenna
/// count); the vector length must equal `n_spatial · n_f`.
pub fn restructure(h: &[Cpx], n_spatial: usize, n_f: usize, layout: CsiLayout) -> Result<Vec<Cpx>> {
    check_layout_dims(h.len(), n_spatial, n_f)?;
    match layout {
        CsiLayout::SubcarrierMajor => Ok(h.to_vec()),
        CsiLayout::TrackMajor => {
            let mut out = vec![Cpx::default(); h.len()];
            for f in 0..n_f {
                for s in 0..n_spatial {
                    out[s * n_f + f] = h[f * n_spatial + s];
                }
            }
            Ok(out)
        }
    }
}

/// Inverse of [`restructure`]: maps a vector in the given layout back to
/// subcarrier-major order.
pub fn restructure_inverse(
    v: &[Cpx],
    n_spatial: usize,
    n_f: usize,
    layout: CsiLayout,
) -> Result<Vec<Cpx>> {
    check_layout_dims(v.len(), n_spatial, n_f)?;
    match layout {
        CsiLayout::SubcarrierMajor => Ok(v.to_vec()),
        CsiLayout::TrackMajor => {
            let mut out = vec![Cpx::default(); v.len()];
            for f in 0..n_f {
                for s in 0..n_spatial {
                    out[f * n_spatial + s] = v[s * n_f + f];
                }
            }
            Ok(out)
        }
    }
}

fn check_layout_dims(len: usize, n_spatial: usize, n_f: usize) -> Result<()> {
    if n_spatial == 0 || n_f == 0 || len != n_spatial * n_f {
        return Err(Error::DimensionMismatch(format!(
            "vector length {len} does not equal n_spatial {n_spatial} × n_f {n_f}"
        )));
    }
    Ok(())
}

/// Channel generator with precomputed spatial coloring matrices.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    n_f: usize,
    profile: DelayProfile,
    r_t: CorrelationMatrix,
    r_r: CorrelationMatrix,
    sigma_h2: f64,
    sqrt_t: DMatrix<f64>,
    sqrt_r: DMatrix<f64>,
}

impl ChannelModel {
    pub fn new(
        tx: &AntennaArray,
        rx: &AntennaArray,
        n_f: usize,
        profile: DelayProfile,
        sigma_h2: f64,
    ) -> Result<Self> {
        Self::from_parts(
            build_correlation(tx)?,
            build_correlation(rx)?,
            n_f,
            profile,
            sigma_h2,
        )
    }

    pub fn from_parts(
        r_t: CorrelationMatrix,
        r_r: CorrelationMatrix,
        n_f: usize,
        profile: DelayProfile,
        sigma_h2: f64,
    ) -> Result<Self> {
        if n_f < profile.len() {
            return Err(Error::InvalidParameter(format!(
                "subcarrier count {n_f} must be at least the tap count {}",
                profile.len()
            )));
        }
        if sigma_h2 <= 0.0 || !sigma_h2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "channel variance must be positive, got {sigma_h2}"
            )));
        }
        let sqrt_t = r_t.sqrt_psd();
        let sqrt_r = r_r.sqrt_psd();
        Ok(Self {
            n_f,
            profile,
            r_t,
            r_r,
            sigma_h2,
            sqrt_t,
            sqrt_r,
        })
    }

    pub fn n_t(&self) -> usize {
        self.r_t.dim()
    }

    pub fn n_r(&self) -> usize {
        self.r_r.dim()
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    /// Stacked vector length `n_r · n_t · n_f`.
    pub fn n(&self) -> usize {
        self.n_r() * self.n_t() * self.n_f
    }

    pub fn profile(&self) -> &DelayProfile {
        &self.profile
    }

    pub fn r_t(&self) -> &CorrelationMatrix {
        &self.r_t
    }

    pub fn r_r(&self) -> &CorrelationMatrix {
        &self.r_r
    }

    pub fn sigma_h2(&self) -> f64 {
        self.sigma_h2
    }

    /// Draws one realization. Variance can be overridden per call so one
    /// model serves users with different large-scale fading.
    pub fn sample_with_variance<R: Rng + ?Sized>(
        &self,
        sigma_h2: f64,
        rng: &mut R,
    ) -> Result<ChannelRealization> {
        let taps = sample_time_domain(self.n_r(), self.n_t(), &self.profile, sigma_h2, rng)?;
        let h_iid = to_frequency_domain(&taps, self.n_f)?;
        color_with_sqrts(&h_iid, &self.sqrt_t, &self.sqrt_r, sigma_h2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ChannelRealization> {
        self.sample_with_variance(self.sigma_h2, rng)
    }
}
