//! Kronecker-factored channel covariance and its Karhunen-Loève transform.
//!
//! The stacked spatial-and-frequency channel vector has covariance
//! `C_h = C_f ⊗ R_t ⊗ R_r`: a Hermitian Toeplitz frequency factor built from
//! the delay profile, and the two antenna correlation matrices. Everything
//! downstream (eigensystem, transform, compression ratios) works on the
//! factors; the full `N × N` matrix is materialized only below a size guard,
//! for oracles and empirical estimation.

use nalgebra::DMatrix;
use std::f64::consts::TAU;

use crate::channel::{CorrelationMatrix, DelayProfile, EPS_PSD};
use crate::error::{Error, Result};
use crate::Cpx;

/// Default guard above which the dense covariance is never materialized.
pub const DENSE_THRESHOLD: usize = 4096;

/// Default relative eigenvalue threshold for numerical rank decisions.
pub const TAU_RANK: f64 = 1e-9;

/// Frequency-domain covariance factor: Hermitian Toeplitz, defined by the
/// correlation factors between subcarrier 0 and subcarriers `0..n_f`.
#[derive(Debug, Clone)]
pub struct FrequencyCovariance {
    first: Vec<Cpx>,
}

impl FrequencyCovariance {
    pub fn new(first: Vec<Cpx>) -> Result<Self> {
        if first.is_empty() {
            return Err(Error::InvalidParameter(
                "frequency covariance needs at least one subcarrier".into(),
            ));
        }
        let c0 = first[0];
        if c0.im.abs() > 1e-12 * c0.re.abs().max(1.0) || c0.re < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "zero-lag correlation must be real and nonnegative, got {c0}"
            )));
        }
        Ok(Self { first })
    }

    pub fn n_f(&self) -> usize {
        self.first.len()
    }

    /// Correlation factors `c_n²` for lags `0..n_f`.
    pub fn correlation_factors(&self) -> &[Cpx] {
        &self.first
    }

    /// Channel variance (the zero-lag correlation).
    pub fn sigma_h2(&self) -> f64 {
        self.first[0].re
    }

    /// Dense Hermitian Toeplitz view. Entry `(i, j)` with `i ≥ j` holds the
    /// lag-`(i-j)` factor; the upper triangle is conjugated.
    pub fn matrix(&self) -> DMatrix<Cpx> {
        let n = self.n_f();
        DMatrix::from_fn(n, n, |i, j| {
            if i >= j {
                self.first[i - j]
            } else {
                self.first[j - i].conj()
            }
        })
    }
}

/// Correlation factors of the frequency-domain channels obtained by the
/// unnormalized DFT of the profile's time-domain taps:
/// lag `k` carries `sigma_h2 · Σ_l d_l · exp(-j·2π·k·l / n_f)`.
pub fn frequency_correlation(
    profile: &DelayProfile,
    sigma_h2: f64,
    n_f: usize,
) -> Result<FrequencyCovariance> {
    if n_f < profile.len() {
        return Err(Error::InvalidParameter(format!(
            "subcarrier count {n_f} must be at least the tap count {}",
            profile.len()
        )));
    }
    if sigma_h2 < 0.0 || !sigma_h2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "channel variance must be finite and nonnegative, got {sigma_h2}"
        )));
    }
    let first = (0..n_f)
        .map(|k| {
            profile
                .taps()
                .iter()
                .enumerate()
                .map(|(l, &d)| {
                    Cpx::from_polar(sigma_h2 * d, -TAU * (k as f64) * (l as f64) / (n_f as f64))
                })
                .sum()
        })
        .collect();
    FrequencyCovariance::new(first)
}

/// Distortion-free compression ratios: overall and per factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionRatios {
    pub gamma_star: f64,
    pub gamma_f: f64,
    pub gamma_t: f64,
    pub gamma_r: f64,
}

/// Channel covariance in factored form with its combined eigensystem.
///
/// Eigenvalues within each factor are sorted descending; combined
/// eigenvalues are products `λ_f(i)·λ_t(j)·λ_r(k)`, globally sorted
/// descending with ties broken by the lexicographic factor-index triple.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    c_f: FrequencyCovariance,
    r_t: CorrelationMatrix,
    r_r: CorrelationMatrix,
    lambda_f: Vec<f64>,
    u_f: DMatrix<Cpx>,
    lambda_t: Vec<f64>,
    u_t: DMatrix<Cpx>,
    lambda_r: Vec<f64>,
    u_r: DMatrix<Cpx>,
    /// Combined eigenvalues, descending.
    eigenvalues: Vec<f64>,
    /// Sorted position -> natural flat index `i·(n_t·n_r) + j·n_r + k`.
    order: Vec<usize>,
    /// Sorted position -> factor-index triple `(i, j, k)`.
    triples: Vec<(u32, u32, u32)>,
    tau_rank: f64,
    dense_threshold: usize,
}

/// Eigendecomposition of a Hermitian complex matrix with eigenvalues
/// clamped at the PSD tolerance and sorted descending.
fn hermitian_eigen_desc(m: DMatrix<Cpx>, what: &str) -> Result<(Vec<f64>, DMatrix<Cpx>)> {
    let eig = m.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let floor = -EPS_PSD * lambda_max.max(1.0);
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(eig.eigenvalues.len());
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < floor {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: v });
        }
        if v < 0.0 {
            log::warn!("clamping near-zero {what} eigenvalue {v:.3e} to 0");
        }
        pairs.push((v.max(0.0), i));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let n = pairs.len();
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &(v, src)) in pairs.iter().enumerate() {
        vals.push(v);
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vals, vecs))
}

fn real_to_complex(m: &DMatrix<f64>) -> DMatrix<Cpx> {
    m.map(|x| Cpx::new(x, 0.0))
}

/// Builds the covariance model from its three factors.
pub fn analytic_covariance(
    c_f: FrequencyCovariance,
    r_t: CorrelationMatrix,
    r_r: CorrelationMatrix,
) -> Result<CovarianceModel> {
    CovarianceModel::new(c_f, r_t, r_r, TAU_RANK, DENSE_THRESHOLD)
}

impl CovarianceModel {
    pub fn new(
        c_f: FrequencyCovariance,
        r_t: CorrelationMatrix,
        r_r: CorrelationMatrix,
        tau_rank: f64,
        dense_threshold: usize,
    ) -> Result<Self> {
        let (lambda_f, u_f) = hermitian_eigen_desc(c_f.matrix(), "frequency-factor")?;
        let (lambda_t_raw, u_t_raw) =
            hermitian_eigen_desc(real_to_complex(r_t.matrix()), "transmit-factor")?;
        let (lambda_r_raw, u_r_raw) =
            hermitian_eigen_desc(real_to_complex(r_r.matrix()), "receive-factor")?;

        let (n_f, n_t, n_r) = (c_f.n_f(), r_t.dim(), r_r.dim());
        let n = n_f * n_t * n_r;
        let mut combined: Vec<(f64, u32, u32, u32)> = Vec::with_capacity(n);
        for i in 0..n_f {
            for j in 0..n_t {
                for k in 0..n_r {
                    combined.push((
                        lambda_f[i] * lambda_t_raw[j] * lambda_r_raw[k],
                        i as u32,
                        j as u32,
                        k as u32,
                    ));
                }
            }
        }
        combined.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
        });
        let eigenvalues = combined.iter().map(|c| c.0).collect();
        let order = combined
            .iter()
            .map(|&(_, i, j, k)| (i as usize * n_t + j as usize) * n_r + k as usize)
            .collect();
        let triples = combined.iter().map(|&(_, i, j, k)| (i, j, k)).collect();

        Ok(Self {
            c_f,
            r_t,
            r_r,
            lambda_f,
            u_f,
            lambda_t: lambda_t_raw,
            u_t: u_t_raw,
            lambda_r: lambda_r_raw,
            u_r: u_r_raw,
            eigenvalues,
            order,
            triples,
            tau_rank,
            dense_threshold,
        })
    }

    pub fn n_f(&self) -> usize {
        self.c_f.n_f()
    }

    pub fn n_t(&self) -> usize {
        self.r_t.dim()
    }

    pub fn n_r(&self) -> usize {
        self.r_r.dim()
    }

    pub fn n(&self) -> usize {
        self.n_f() * self.n_t() * self.n_r()
    }

    pub fn c_f(&self) -> &FrequencyCovariance {
        &self.c_f
    }

    pub fn r_t(&self) -> &CorrelationMatrix {
        &self.r_t
    }

    pub fn r_r(&self) -> &CorrelationMatrix {
        &self.r_r
    }

    pub fn tau_rank(&self) -> f64 {
        self.tau_rank
    }

    pub fn dense_threshold(&self) -> usize {
        self.dense_threshold
    }

    /// Combined eigenvalues, sorted descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Factor-index triples `(i, j, k)` in sorted-eigenvalue order.
    pub fn factor_triples(&self) -> &[(u32, u32, u32)] {
        &self.triples
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    fn factor_rank(values: &[f64], tau: f64) -> usize {
        let max = values.iter().cloned().fold(0.0_f64, f64::max);
        values.iter().filter(|&&v| v > tau * max).count()
    }

    pub fn rank_f(&self) -> usize {
        Self::factor_rank(&self.lambda_f, self.tau_rank)
    }

    pub fn rank_t(&self) -> usize {
        Self::factor_rank(&self.lambda_t, self.tau_rank)
    }

    pub fn rank_r(&self) -> usize {
        Self::factor_rank(&self.lambda_r, self.tau_rank)
    }

    /// Rank of the full covariance via the factor ranks.
    pub fn rank(&self) -> usize {
        self.rank_f() * self.rank_t() * self.rank_r()
    }

    /// Maximum distortion-free compression ratio and its per-factor parts.
    pub fn distortion_free_ratio(&self) -> CompressionRatios {
        let gamma_f = self.n_f() as f64 / self.rank_f() as f64;
        let gamma_t = self.n_t() as f64 / self.rank_t() as f64;
        let gamma_r = self.n_r() as f64 / self.rank_r() as f64;
        CompressionRatios {
            gamma_star: gamma_f * gamma_t * gamma_r,
            gamma_f,
            gamma_t,
            gamma_r,
        }
    }

    /// Forward transform: coefficients of `h` in the eigenbasis, ordered by
    /// descending eigenvalue. Costs `O(N·(n_f + n_t + n_r))`.
    pub fn klt_forward(&self, h: &[Cpx]) -> Result<Vec<Cpx>> {
        if h.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "vector length {} does not match model dimension {}",
                h.len(),
                self.n()
            )));
        }
        let (n_f, n_t, n_r) = (self.n_f(), self.n_t(), self.n_r());
        let mut a = h.to_vec();
        let mut b = vec![Cpx::default(); h.len()];
        mode_apply_outer(&a, &mut b, &self.u_f, true, n_f, n_t * n_r);
        mode_apply_middle(&b, &mut a, &self.u_t, true, n_f, n_t, n_r);
        mode_apply_inner(&a, &mut b, &self.u_r, true, n_f * n_t, n_r);
        Ok(self.order.iter().map(|&idx| b[idx]).collect())
    }

    /// Inverse transform from eigenvalue-ordered coefficients.
    pub fn klt_inverse(&self, s: &[Cpx]) -> Result<Vec<Cpx>> {
        if s.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient length {} does not match model dimension {}",
                s.len(),
                self.n()
            )));
        }
        let (n_f, n_t, n_r) = (self.n_f(), self.n_t(), self.n_r());
        let mut a = vec![Cpx::default(); s.len()];
        for (pos, &idx) in self.order.iter().enumerate() {
            a[idx] = s[pos];
        }
        let mut b = vec![Cpx::default(); s.len()];
        mode_apply_outer(&a, &mut b, &self.u_f, false, n_f, n_t * n_r);
        mode_apply_middle(&b, &mut a, &self.u_t, false, n_f, n_t, n_r);
        mode_apply_inner(&a, &mut b, &self.u_r, false, n_f * n_t, n_r);
        Ok(b)
    }

    /// Dense `N × N` covariance; only available below the size guard.
    pub fn dense_covariance(&self) -> Result<DMatrix<Cpx>> {
        if self.n() > self.dense_threshold {
            return Err(Error::DenseThresholdExceeded {
                n: self.n(),
                threshold: self.dense_threshold,
            });
        }
        let spatial = real_to_complex(self.r_t.matrix()).kronecker(&real_to_complex(self.r_r.matrix()));
        Ok(self.c_f.matrix().kronecker(&spatial))
    }

    /// File form for storing the model so both link ends share one transform.
    pub fn to_file(&self) -> CovarianceFile {
        CovarianceFile {
            schema: COVARIANCE_SCHEMA.to_string(),
            n_f: self.n_f(),
            n_t: self.n_t(),
            n_r: self.n_r(),
            c_f_first: self
                .c_f
                .correlation_factors()
                .iter()
                .map(|c| [c.re, c.im])
                .collect(),
            r_t: matrix_rows(self.r_t.matrix()),
            r_r: matrix_rows(self.r_r.matrix()),
            eps_psd: EPS_PSD,
            tau_rank: self.tau_rank,
            dense_threshold: self.dense_threshold,
        }
    }
}

const COVARIANCE_SCHEMA: &str = "csifb-covariance-v1";

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serialized covariance model: factor dimensions, the first column of the
/// frequency factor, the full antenna correlation entries and tolerances.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceFile {
    pub schema: String,
    pub n_f: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub c_f_first: Vec<[f64; 2]>,
    pub r_t: Vec<Vec<f64>>,
    pub r_r: Vec<Vec<f64>>,
    pub eps_psd: f64,
    pub tau_rank: f64,
    pub dense_threshold: usize,
}

impl CovarianceFile {
    pub fn to_model(&self) -> Result<CovarianceModel> {
        if self.schema != COVARIANCE_SCHEMA {
            return Err(Error::MalformedData(format!(
                "unsupported covariance schema {:?}",
                self.schema
            )));
        }
        if self.c_f_first.len() != self.n_f {
            return Err(Error::MalformedData(format!(
                "frequency factor has {} lags, expected {}",
                self.c_f_first.len(),
                self.n_f
            )));
        }
        let c_f = FrequencyCovariance::new(
            self.c_f_first
                .iter()
                .map(|&[re, im]| Cpx::new(re, im))
                .collect(),
        )?;
        let r_t = CorrelationMatrix::new(rows_to_matrix(&self.r_t, self.n_t)?)?;
        let r_r = CorrelationMatrix::new(rows_to_matrix(&self.r_r, self.n_r)?)?;
        CovarianceModel::new(c_f, r_t, r_r, self.tau_rank, self.dense_threshold)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::MalformedData(format!(
            "correlation matrix rows do not form an {n}x{n} matrix"
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Applies `t` (or its adjoint) along the outermost axis of the flat tensor.
fn mode_apply_outer(
    x: &[Cpx],
    out: &mut [Cpx],
    t: &DMatrix<Cpx>,
    adjoint: bool,
    dim: usize,
    chunk: usize,
) {
    out.fill(Cpx::default());
    for fp in 0..dim {
        for f in 0..dim {
            let w = if adjoint { t[(f, fp)].conj() } else { t[(fp, f)] };
            let src = &x[f * chunk..(f + 1) * chunk];
            let dst = &mut out[fp * chunk..(fp + 1) * chunk];
            for c in 0..chunk {
                dst[c] += w * src[c];
            }
        }
    }
}

/// Applies `t` (or its adjoint) along the middle axis.
fn mode_apply_middle(
    x: &[Cpx],
    out: &mut [Cpx],
    t: &DMatrix<Cpx>,
    adjoint: bool,
    n_outer: usize,
    dim: usize,
    inner: usize,
) {
    out.fill(Cpx::default());
    for blk in 0..n_outer {
        let base = blk * dim * inner;
        for tp in 0..dim {
            for tt in 0..dim {
                let w = if adjoint { t[(tt, tp)].conj() } else { t[(tp, tt)] };
                let src = base + tt * inner;
                let dst = base + tp * inner;
                for r in 0..inner {
                    out[dst + r] += w * x[src + r];
                }
            }
        }
    }
}

/// Applies `t` (or its adjoint) along the innermost (unit-stride) axis.
fn mode_apply_inner(x: &[Cpx], out: &mut [Cpx], t: &DMatrix<Cpx>, adjoint: bool, n_outer: usize, dim: usize) {
    for blk in 0..n_outer {
        let base = blk * dim;
        for rp in 0..dim {
            let mut acc = Cpx::default();
            for r in 0..dim {
                let w = if adjoint { t[(r, rp)].conj() } else { t[(rp, r)] };
                acc += w * x[base + r];
            }
            out[base + rp] = acc;
        }
    }
}

/// Cumulative moving-average estimate of the channel covariance.
///
/// Materializes the full matrix, so it is guarded by the dense threshold.
/// Single-writer: updates are sequential.
#[derive(Debug, Clone)]
pub struct EmpiricalCovariance {
    sum: DMatrix<Cpx>,
    count: u64,
}

impl EmpiricalCovariance {
    pub fn new(n: usize) -> Result<Self> {
        if n > DENSE_THRESHOLD {
            return Err(Error::DenseThresholdExceeded {
                n,
                threshold: DENSE_THRESHOLD,
            });
        }
        Ok(Self {
            sum: DMatrix::zeros(n, n),
            count: 0,
        })
    }

    pub fn update(&mut self, h: &[Cpx]) -> Result<()> {
        let n = self.sum.nrows();
        if h.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "realization length {} does not match accumulator dimension {n}",
                h.len()
            )));
        }
        for j in 0..n {
            let cj = h[j].conj();
            for i in 0..n {
                self.sum[(i, j)] += h[i] * cj;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Current running average (zero matrix before any update).
    pub fn estimate(&self) -> DMatrix<Cpx> {
        if self.count == 0 {
            return self.sum.clone();
        }
        &self.sum / Cpx::new(self.count as f64, 0.0)
    }

    /// Eigendecomposition of the Hermitian-symmetrized estimate, descending.
    pub fn eigensystem(&self) -> Result<(Vec<f64>, DMatrix<Cpx>)> {
        let est = self.estimate();
        let herm = (&est + est.adjoint()) * Cpx::new(0.5, 0.0);
        hermitian_eigen_desc(herm, "empirical-covariance")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        apply_spatial_correlation, build_correlation, sample_time_domain, to_frequency_domain,
        AntennaArray,
    };
    use crate::seed::rng_for;
    use approx::assert_relative_eq;

    fn small_model() -> CovarianceModel {
        let profile = DelayProfile::exponential(2, 0.7).unwrap();
        let c_f = frequency_correlation(&profile, 1.0, 4).unwrap();
        let r_t = build_correlation(&AntennaArray::new(2, 1, 0.8).unwrap()).unwrap();
        let r_r = build_correlation(&AntennaArray::new(2, 1, 0.5).unwrap()).unwrap();
        analytic_covariance(c_f, r_t, r_r).unwrap()
    }

    #[test]
    fn flat_profile_gives_all_ones_factor() {
        let c = frequency_correlation(&DelayProfile::flat(), 1.0, 4).unwrap();
        for &v in c.correlation_factors() {
            assert_relative_eq!((v - Cpx::new(1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        }
        let m = c.matrix();
        assert!(m.iter().all(|&x| (x - Cpx::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn two_tap_lag_one_factor_value() {
        // Equal-power two-tap profile over four subcarriers:
        // lag 1 is 0.5 + 0.5·exp(-jπ/2) = 0.5 - 0.5j.
        let profile = DelayProfile::new(vec![0.5, 0.5]).unwrap();
        let c = frequency_correlation(&profile, 1.0, 4).unwrap();
        let c2 = c.correlation_factors()[1];
        assert_relative_eq!(c2.re, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c2.im, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn frequency_factor_rank_equals_tap_count() {
        let profile = DelayProfile::exponential(3, 0.5).unwrap();
        let c_f = frequency_correlation(&profile, 1.0, 16).unwrap();
        let (vals, _) = hermitian_eigen_desc(c_f.matrix(), "test").unwrap();
        let max = vals[0];
        let rank = vals.iter().filter(|&&v| v > TAU_RANK * max).count();
        assert_eq!(rank, 3);
        // Nonzero eigenvalues of the DFT-generated factor are n_f·σ²·d_l.
        let mut expect: Vec<f64> = profile.taps().iter().map(|&d| 16.0 * d).collect();
        expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (got, want) in vals.iter().zip(&expect) {
            assert_relative_eq!(got, want, max_relative = 1e-9);
        }
    }

    #[test]
    fn identity_factors_give_unit_spectrum() {
        let c_f = frequency_correlation(&DelayProfile::flat(), 1.0, 1).unwrap();
        let model = analytic_covariance(
            c_f,
            CorrelationMatrix::identity(3),
            CorrelationMatrix::identity(2),
        )
        .unwrap();
        for &v in model.eigenvalues() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn factored_matches_dense_kronecker_entrywise() {
        let model = small_model();
        let dense = model.dense_covariance().unwrap();
        // Rebuild from the raw factors independently.
        let spatial = model
            .r_t()
            .matrix()
            .map(|x| Cpx::new(x, 0.0))
            .kronecker(&model.r_r().matrix().map(|x| Cpx::new(x, 0.0)));
        let expect = model.c_f().matrix().kronecker(&spatial);
        assert_relative_eq!((dense - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn trace_identity_holds() {
        let model = small_model();
        let expect = model.c_f().sigma_h2()
            * model.n_f() as f64
            * model.n_t() as f64
            * model.n_r() as f64;
        assert_relative_eq!(model.trace(), expect, max_relative = 1e-10);
    }

    #[test]
    fn factored_eigensystem_matches_dense() {
        let model = small_model();
        let dense = model.dense_covariance().unwrap();
        let (dense_vals, _) = hermitian_eigen_desc(dense, "test").unwrap();
        let scale = dense_vals[0];
        for (a, b) in model.eigenvalues().iter().zip(&dense_vals) {
            assert!((a - b).abs() <= 1e-9 * scale, "eigenvalue mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn klt_round_trip_is_identity() {
        let model = small_model();
        let mut rng = rng_for(17, &[0]);
        let taps = sample_time_domain(
            2,
            2,
            &DelayProfile::exponential(2, 0.7).unwrap(),
            1.0,
            &mut rng,
        )
        .unwrap();
        let h_iid = to_frequency_domain(&taps, 4).unwrap();
        let real = apply_spatial_correlation(&h_iid, model.r_t(), model.r_r(), 1.0).unwrap();
        let h: Vec<Cpx> = real.h.iter().cloned().collect();
        let s = model.klt_forward(&h).unwrap();
        let back = model.klt_inverse(&s).unwrap();
        let num: f64 = h
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = h.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        assert!(num / den < 1e-10, "round trip error {}", num / den);
        // Unitary transform preserves the norm.
        let ns: f64 = s.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        assert_relative_eq!(ns, den, max_relative = 1e-10);
    }

    #[test]
    fn klt_forward_agrees_with_dense_projection() {
        let model = small_model();
        let dense = model.dense_covariance().unwrap();
        let (_, dense_vecs) = hermitian_eigen_desc(dense, "test").unwrap();
        let mut rng = rng_for(23, &[1]);
        let taps = sample_time_domain(
            2,
            2,
            &DelayProfile::exponential(2, 0.7).unwrap(),
            1.0,
            &mut rng,
        )
        .unwrap();
        let h_iid = to_frequency_domain(&taps, 4).unwrap();
        let real = apply_spatial_correlation(&h_iid, model.r_t(), model.r_r(), 1.0).unwrap();
        let h: Vec<Cpx> = real.h.iter().cloned().collect();
        let s = model.klt_forward(&h).unwrap();
        // Compare coefficient magnitudes (phase conventions differ).
        let hv = nalgebra::DVector::from_vec(h);
        for (pos, coeff) in s.iter().enumerate() {
            let dense_coeff = dense_vecs.column(pos).adjoint() * &hv;
            // Degenerate eigenvalues make per-position comparison invalid;
            // this model has distinct nonzero eigenvalues, and positions past
            // the rank carry (near-)zero coefficients in both bases.
            if model.eigenvalues()[pos] > 1e-9 * model.eigenvalues()[0] {
                assert_relative_eq!(coeff.norm(), dense_coeff[0].norm(), epsilon = 1e-9);
            } else {
                assert!(coeff.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn klt_coefficients_are_decorrelated_with_eigenvalue_variances() {
        let model = small_model();
        let n = model.n();
        let profile = DelayProfile::exponential(2, 0.7).unwrap();
        let mut rng = rng_for(29, &[0]);
        let trials = 20_000usize;
        let mut acc = DMatrix::<Cpx>::zeros(n, n);
        for _ in 0..trials {
            let taps = sample_time_domain(2, 2, &profile, 1.0, &mut rng).unwrap();
            let h_iid = to_frequency_domain(&taps, 4).unwrap();
            let real = apply_spatial_correlation(&h_iid, model.r_t(), model.r_r(), 1.0).unwrap();
            let h: Vec<Cpx> = real.h.iter().cloned().collect();
            let s = model.klt_forward(&h).unwrap();
            for j in 0..n {
                let cj = s[j].conj();
                for i in 0..n {
                    acc[(i, j)] += s[i] * cj;
                }
            }
        }
        let est = acc / Cpx::new(trials as f64, 0.0);
        let lambda_max = model.eigenvalues()[0];
        for i in 0..n {
            let want = model.eigenvalues()[i];
            if want > 1e-6 * lambda_max {
                assert_relative_eq!(est[(i, i)].re, want, max_relative = 0.05);
            }
            for j in 0..n {
                if i != j {
                    assert!(
                        est[(i, j)].norm() < 0.05 * lambda_max,
                        "off-diagonal ({i},{j}) = {}",
                        est[(i, j)].norm()
                    );
                }
            }
        }
    }

    #[test]
    fn generated_channels_match_analytic_covariance() {
        // Cross-module Monte-Carlo check of the factored covariance against
        // the sample covariance of synthesized channels.
        let profile = DelayProfile::exponential(2, 0.7).unwrap();
        let r_t = build_correlation(&AntennaArray::new(2, 1, 0.8).unwrap()).unwrap();
        let r_r = build_correlation(&AntennaArray::new(2, 1, 0.5).unwrap()).unwrap();
        let c_f = frequency_correlation(&profile, 1.0, 4).unwrap();
        let model = analytic_covariance(c_f, r_t.clone(), r_r.clone()).unwrap();
        let dense = model.dense_covariance().unwrap();

        let mut emp = EmpiricalCovariance::new(model.n()).unwrap();
        let mut rng = rng_for(31, &[0]);
        for _ in 0..20_000 {
            let taps = sample_time_domain(2, 2, &profile, 1.0, &mut rng).unwrap();
            let h_iid = to_frequency_domain(&taps, 4).unwrap();
            let real = apply_spatial_correlation(&h_iid, &r_t, &r_r, 1.0).unwrap();
            emp.update(real.h.as_slice()).unwrap();
        }
        let est = emp.estimate();
        let rel = (est - &dense).norm() / dense.norm();
        assert!(rel < 0.05, "covariance mismatch: {rel}");
    }

    #[test]
    fn empirical_covariance_basics() {
        let mut emp = EmpiricalCovariance::new(2).unwrap();
        // Before any update the estimate is the zero matrix.
        assert_relative_eq!(emp.estimate().norm(), 0.0);
        let h = [Cpx::new(1.0, 1.0), Cpx::new(0.0, -2.0)];
        emp.update(&h).unwrap();
        let est = emp.estimate();
        // Single sample: exactly the outer product h·h^H.
        assert_relative_eq!(est[(0, 0)].re, 2.0, epsilon = 1e-15);
        assert_relative_eq!(est[(1, 1)].re, 4.0, epsilon = 1e-15);
        assert_relative_eq!((est[(0, 1)] - Cpx::new(-2.0, 2.0)).norm(), 0.0, epsilon = 1e-15);
        // Dimension mismatch is rejected.
        assert!(emp.update(&[Cpx::default()]).is_err());
        // Streams of zeros stay zero.
        let mut z = EmpiricalCovariance::new(2).unwrap();
        z.update(&[Cpx::default(), Cpx::default()]).unwrap();
        assert_relative_eq!(z.estimate().norm(), 0.0);
        // The size guard rejects huge accumulators.
        assert!(EmpiricalCovariance::new(DENSE_THRESHOLD + 1).is_err());
    }

    #[test]
    fn distortion_free_ratios() {
        // Full-rank factors: no distortion-free compression available.
        let full = analytic_covariance(
            frequency_correlation(&DelayProfile::exponential(4, 0.5).unwrap(), 1.0, 4).unwrap(),
            CorrelationMatrix::identity(2),
            CorrelationMatrix::identity(2),
        )
        .unwrap();
        assert_relative_eq!(full.distortion_free_ratio().gamma_star, 1.0);

        // Two taps over eight subcarriers: frequency factor rank 2.
        let model = analytic_covariance(
            frequency_correlation(&DelayProfile::new(vec![0.6, 0.4]).unwrap(), 1.0, 8).unwrap(),
            CorrelationMatrix::identity(2),
            CorrelationMatrix::identity(2),
        )
        .unwrap();
        let r = model.distortion_free_ratio();
        assert_relative_eq!(r.gamma_f, 4.0);
        assert_relative_eq!(r.gamma_star, 4.0);

        // Fully correlated two-antenna transmitter: rank-one factor.
        let ones = build_correlation(&AntennaArray::new(2, 1, 1.0).unwrap()).unwrap();
        let model = analytic_covariance(
            frequency_correlation(&DelayProfile::flat(), 1.0, 2).unwrap(),
            ones,
            CorrelationMatrix::identity(1),
        )
        .unwrap();
        assert_relative_eq!(model.distortion_free_ratio().gamma_t, 2.0);
    }

    #[test]
    fn rank_recovery_is_exact() {
        // Keeping rank-many principal components reconstructs exactly.
        let model = small_model();
        let rank = model.rank();
        assert!(rank < model.n());
        let profile = DelayProfile::exponential(2, 0.7).unwrap();
        let mut rng = rng_for(37, &[0]);
        for _ in 0..50 {
            let taps = sample_time_domain(2, 2, &profile, 1.0, &mut rng).unwrap();
            let h_iid = to_frequency_domain(&taps, 4).unwrap();
            let real = apply_spatial_correlation(&h_iid, model.r_t(), model.r_r(), 1.0).unwrap();
            let h: Vec<Cpx> = real.h.iter().cloned().collect();
            let mut s = model.klt_forward(&h).unwrap();
            for v in s.iter_mut().skip(rank) {
                *v = Cpx::default();
            }
            let back = model.klt_inverse(&s).unwrap();
            let num: f64 = h.iter().zip(&back).map(|(a, b)| (a - b).norm_sqr()).sum();
            let den: f64 = h.iter().map(|a| a.norm_sqr()).sum();
            assert!(
                (num / den).sqrt() < 1e-8,
                "rank-truncated recovery error {}",
                (num / den).sqrt()
            );
        }
    }

    #[test]
    fn file_round_trip_preserves_transform() {
        let model = small_model();
        let json = serde_json::to_string(&model.to_file()).unwrap();
        let file: CovarianceFile = serde_json::from_str(&json).unwrap();
        let restored = file.to_model().unwrap();
        let mut rng = rng_for(41, &[0]);
        let taps = sample_time_domain(
            2,
            2,
            &DelayProfile::exponential(2, 0.7).unwrap(),
            1.0,
            &mut rng,
        )
        .unwrap();
        let h_iid = to_frequency_domain(&taps, 4).unwrap();
        let real = apply_spatial_correlation(&h_iid, model.r_t(), model.r_r(), 1.0).unwrap();
        let h: Vec<Cpx> = real.h.iter().cloned().collect();
        let a = model.klt_forward(&h).unwrap();
        let b = restored.klt_forward(&h).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y, "restored transform must be bit-identical");
        }
    }

    #[test]
    fn forward_of_basis_vector_has_unit_norm_for_identity_model() {
        let model = analytic_covariance(
            frequency_correlation(&DelayProfile::flat(), 1.0, 2).unwrap(),
            CorrelationMatrix::identity(2),
            CorrelationMatrix::identity(1),
        )
        .unwrap();
        let mut e1 = vec![Cpx::default(); model.n()];
        e1[0] = Cpx::new(1.0, 0.0);
        let s = model.klt_forward(&e1).unwrap();
        let norm: f64 = s.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
    }
}
