//! Closed-form and empirical performance measures: recovery NMSE, the
//! Gaussian tail function, Gray-mapped 16-QAM BER with its Jensen lower
//! bound, and spectral efficiency.

use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::Cpx;

/// Batch NMSE: summed squared error over summed squared norm.
pub fn nmse_empirical(h_batch: &[Vec<Cpx>], recovered_batch: &[Vec<Cpx>]) -> Result<f64> {
    if h_batch.is_empty() || h_batch.len() != recovered_batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "batch sizes {} and {} must match and be nonzero",
            h_batch.len(),
            recovered_batch.len()
        )));
    }
    let mut acc = NmseAccumulator::default();
    for (h, r) in h_batch.iter().zip(recovered_batch) {
        acc.update(h, r)?;
    }
    acc.value()
}

/// Streaming NMSE accumulator (numerator and denominator of the batch ratio).
#[derive(Debug, Clone, Copy, Default)]
pub struct NmseAccumulator {
    pub error_energy: f64,
    pub signal_energy: f64,
}

impl NmseAccumulator {
    pub fn update(&mut self, h: &[Cpx], recovered: &[Cpx]) -> Result<()> {
        if h.len() != recovered.len() {
            return Err(Error::DimensionMismatch(format!(
                "vector lengths {} and {} differ",
                h.len(),
                recovered.len()
            )));
        }
        for (a, b) in h.iter().zip(recovered) {
            self.error_energy += (a - b).norm_sqr();
            self.signal_energy += a.norm_sqr();
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &NmseAccumulator) {
        self.error_energy += other.error_energy;
        self.signal_energy += other.signal_energy;
    }

    pub fn value(&self) -> Result<f64> {
        if self.signal_energy <= 0.0 {
            return Err(Error::InvalidParameter(
                "NMSE undefined for zero signal energy".into(),
            ));
        }
        Ok(self.error_energy / self.signal_energy)
    }
}

/// Best-possible recovery NMSE when keeping the `m` leading components of a
/// descending spectrum: the uncaptured eigenvalue mass fraction.
pub fn nmse_from_spectrum(eigenvalues_desc: &[f64], m: usize) -> f64 {
    let total: f64 = eigenvalues_desc.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let tail: f64 = eigenvalues_desc.iter().skip(m).sum();
    tail / total
}

/// Analytic recovery NMSE of the model when keeping `m` principal components.
pub fn nmse_analytic(model: &CovarianceModel, m: usize) -> f64 {
    nmse_from_spectrum(model.eigenvalues(), m)
}

/// Standard normal tail probability Q(x).
pub fn qfunc(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Exact BER of Gray-mapped square 16-QAM at linear symbol SNR `mu`
/// (average symbol energy over complex noise variance).
pub fn ber_16qam(mu: f64) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "SNR must be nonnegative, got {mu}"
        )));
    }
    let beta = (mu / 5.0).sqrt();
    Ok(0.75 * qfunc(beta) + 0.5 * qfunc(3.0 * beta) - 0.25 * qfunc(5.0 * beta))
}

/// Jensen lower bound on the average 16-QAM BER of a beamforming link whose
/// CSI keeps `m` principal components: the BER curve evaluated at the mean
/// effective SNR `tr(D)·(1 − δ(m)) / σ²`.
pub fn ber_lower_bound(model: &CovarianceModel, m: usize, sigma2: f64) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "noise power must be positive, got {sigma2}"
        )));
    }
    let mean_mu = model.trace() * (1.0 - nmse_analytic(model, m)) / sigma2;
    ber_16qam(mean_mu)
}

/// Spectral efficiency of a SINR grid (rows: users or streams, columns:
/// subcarriers): mean over subcarriers of the per-subcarrier sum of
/// `log2(1 + SINR)`.
pub fn spectral_efficiency(sinrs: &[Vec<f64>]) -> Result<f64> {
    if sinrs.is_empty() {
        return Err(Error::DimensionMismatch("SINR grid is empty".into()));
    }
    let n_sc = sinrs[0].len();
    if n_sc == 0 || sinrs.iter().any(|row| row.len() != n_sc) {
        return Err(Error::DimensionMismatch(
            "SINR rows must be nonempty and equally long".into(),
        ));
    }
    let mut total = 0.0;
    for row in sinrs {
        for &x in row {
            if !(x >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "SINR must be nonnegative, got {x}"
                )));
            }
            total += (1.0 + x).log2();
        }
    }
    Ok(total / n_sc as f64)
}

/// NMSE summary for one compression point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmseReport {
    pub m: usize,
    /// Closed-form value; only defined for eigenbasis compression.
    pub delta_analytic: Option<f64>,
    pub delta_empirical: f64,
    /// Data compression ratio N/m.
    pub gamma: f64,
    /// Feedback compression ratio including index side information.
    pub gamma_fb: f64,
}

/// BER summary of a Monte-Carlo link evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerReport {
    /// Mean effective SNR across realizations (linear).
    pub mu_mean: f64,
    /// Jensen lower bound on the average BER.
    pub ber_bound: f64,
    pub ber_empirical: f64,
    /// Total bits counted.
    pub bits: u64,
}

impl BerReport {
    /// Binomial standard error of the empirical BER.
    pub fn standard_error(&self) -> f64 {
        let p = self.ber_empirical;
        (p * (1.0 - p) / self.bits as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{CorrelationMatrix, DelayProfile};
    use crate::covariance::{analytic_covariance, frequency_correlation};
    use approx::assert_relative_eq;

    #[test]
    fn nmse_trivial_cases() {
        let h = vec![vec![Cpx::new(1.0, 0.0), Cpx::new(0.0, 1.0)]];
        assert_relative_eq!(nmse_empirical(&h, &h).unwrap(), 0.0);
        let zeros = vec![vec![Cpx::default(); 2]];
        assert_relative_eq!(nmse_empirical(&h, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn nmse_hand_example() {
        // h = [1, 0], recovered [1, 1]: error [0, -1] so ratio is 1.
        let h = vec![vec![Cpx::new(1.0, 0.0), Cpx::new(0.0, 0.0)]];
        let r = vec![vec![Cpx::new(1.0, 0.0), Cpx::new(1.0, 0.0)]];
        assert_relative_eq!(nmse_empirical(&h, &r).unwrap(), 1.0);
    }

    #[test]
    fn nmse_rejects_degenerate_input() {
        assert!(nmse_empirical(&[], &[]).is_err());
        let zeros = vec![vec![Cpx::default(); 2]];
        assert!(nmse_empirical(&zeros, &zeros).is_err());
        let a = vec![vec![Cpx::default(); 2]];
        let b = vec![vec![Cpx::default(); 3]];
        assert!(nmse_empirical(&a, &b).is_err());
    }

    #[test]
    fn spectrum_nmse_examples() {
        let d = [4.0, 3.0, 2.0, 1.0];
        assert_relative_eq!(nmse_from_spectrum(&d, 2), 0.3);
        assert_relative_eq!(nmse_from_spectrum(&d, 0), 1.0);
        assert_relative_eq!(nmse_from_spectrum(&d, 4), 0.0);
    }

    #[test]
    fn analytic_nmse_hits_zero_at_rank() {
        let model = analytic_covariance(
            frequency_correlation(&DelayProfile::new(vec![0.7, 0.3]).unwrap(), 1.0, 8).unwrap(),
            CorrelationMatrix::identity(2),
            CorrelationMatrix::identity(1),
        )
        .unwrap();
        let rank = model.rank();
        assert!(nmse_analytic(&model, rank) < 1e-12);
        let mut last = 1.0;
        for m in 0..=model.n() {
            let d = nmse_analytic(&model, m);
            assert!(d <= last + 1e-15, "non-increasing in m");
            assert!((0.0..=1.0).contains(&d));
            last = d;
        }
    }

    /// Independent Q-function oracle: composite Simpson integration of the
    /// standard normal density from x to a far cutoff.
    fn qfunc_quadrature(x: f64) -> f64 {
        let hi = 40.0_f64;
        let steps = 200_000usize;
        let h = (hi - x) / steps as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(x) + pdf(hi);
        for i in 1..steps {
            let t = x + i as f64 * h;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn qfunc_matches_quadrature() {
        assert_relative_eq!(qfunc(0.0), 0.5);
        assert_relative_eq!(qfunc(1.0), 0.158_655_253_931_457, max_relative = 1e-12);
        for &x in &[0.5, 1.0, 2.0, 3.5, 5.0, 8.0] {
            assert_relative_eq!(qfunc(x), qfunc_quadrature(x), max_relative = 1e-12);
        }
    }

    #[test]
    fn qfunc_symmetry() {
        for &x in &[0.1, 0.7, 1.3, 2.9] {
            assert_relative_eq!(qfunc(-x) + qfunc(x), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ber_16qam_at_zero_is_half() {
        // All three Q terms are 1/2: 3/8 + 1/4 - 1/8 = 1/2 exactly.
        assert_eq!(ber_16qam(0.0).unwrap(), 0.5);
    }

    #[test]
    fn ber_16qam_decays_and_is_monotone() {
        assert!(ber_16qam(1000.0).unwrap() < 1e-10);
        let mut last = 0.5;
        for i in 0..=1000 {
            let mu = i as f64 * 0.1;
            let b = ber_16qam(mu).unwrap();
            assert!(b <= last + 1e-15, "BER must not increase with SNR");
            assert!(b > 0.0 && b <= 0.5);
            last = b;
        }
        assert!(ber_16qam(-1.0).is_err());
    }

    #[test]
    fn ber_16qam_against_q_composition() {
        // Re-evaluate the closed form through the quadrature-backed oracle.
        let mu = 10.0_f64;
        let beta = (mu / 5.0).sqrt();
        let expect = 0.75 * qfunc_quadrature(beta) + 0.5 * qfunc_quadrature(3.0 * beta)
            - 0.25 * qfunc_quadrature(5.0 * beta);
        assert_relative_eq!(ber_16qam(mu).unwrap(), expect, max_relative = 1e-10);
    }

    #[test]
    fn jensen_bound_endpoints() {
        let model = analytic_covariance(
            frequency_correlation(&DelayProfile::new(vec![0.7, 0.3]).unwrap(), 1.0, 4).unwrap(),
            CorrelationMatrix::identity(2),
            CorrelationMatrix::identity(1),
        )
        .unwrap();
        let sigma2 = 2.0;
        // Keeping everything: the bound is the curve at tr(D)/σ².
        let full = ber_lower_bound(&model, model.n(), sigma2).unwrap();
        assert_relative_eq!(full, ber_16qam(model.trace() / sigma2).unwrap());
        // Keeping nothing: mean SNR zero, BER one half.
        assert_relative_eq!(ber_lower_bound(&model, 0, sigma2).unwrap(), 0.5);
        assert!(ber_lower_bound(&model, 1, 0.0).is_err());
    }

    #[test]
    fn spectral_efficiency_examples() {
        assert_relative_eq!(spectral_efficiency(&[vec![0.0, 0.0]]).unwrap(), 0.0);
        assert_relative_eq!(spectral_efficiency(&[vec![3.0]]).unwrap(), 2.0);
        // Two users, two subcarriers.
        let grid = vec![vec![1.0, 3.0], vec![1.0, 3.0]];
        assert_relative_eq!(spectral_efficiency(&grid).unwrap(), 3.0);
        assert!(spectral_efficiency(&[]).is_err());
        assert!(spectral_efficiency(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(spectral_efficiency(&[vec![-0.1]]).is_err());
    }
}
