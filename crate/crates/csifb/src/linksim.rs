//! Multi-user downlink link-level simulation.
//!
//! Users are dropped uniformly in a square cell; large-scale fading follows
//! a log-distance path-loss law. The transmitter builds a zero-forcing
//! precoder from the *recovered* CSI of all users (one stream per receive
//! antenna), while SINR, bit errors and spectral efficiency are measured
//! against the *true* channels.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

use crate::channel::ChannelModel;
use crate::codec::Codec;
use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::metrics::{ber_lower_bound, spectral_efficiency, BerReport, NmseAccumulator};
use crate::seed::rng_for;
use crate::Cpx;

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10.0_f64.powf(dbm / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10.0_f64.powf(db / 10.0)
}

/// Supported downlink modulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modulation {
    #[serde(rename = "16qam")]
    Qam16,
}

/// Downlink system parameters. Powers are in dBm, the noise density in
/// dBm/Hz, distances in kilometers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    /// Side length of the square coverage area, transmitter at the center.
    pub coverage_km: f64,
    /// Path loss in dB at 1 km.
    pub pathloss_intercept_db: f64,
    /// Path loss distance exponent.
    pub pathloss_exponent: f64,
    pub users: usize,
    /// Users closer than this are pushed out to keep the path loss finite.
    pub min_distance_km: f64,
    pub modulation: Modulation,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1.0e7,
            tx_power_dbm: 43.0,
            noise_psd_dbm_hz: -174.0,
            coverage_km: 1.0,
            pathloss_intercept_db: -123.0,
            pathloss_exponent: 3.76,
            users: 4,
            min_distance_km: 0.035,
            modulation: Modulation::Qam16,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_hz <= 0.0 || self.coverage_km <= 0.0 || self.users < 1 {
            return Err(Error::InvalidParameter(
                "bandwidth, coverage and user count must be positive".into(),
            ));
        }
        if self.min_distance_km < 0.0 || self.min_distance_km > self.coverage_km {
            return Err(Error::InvalidParameter(
                "minimum user distance must lie within the coverage".into(),
            ));
        }
        Ok(())
    }

    /// Total in-band noise power in dBm.
    pub fn noise_power_dbm(&self) -> f64 {
        self.noise_psd_dbm_hz + 10.0 * self.bandwidth_hz.log10()
    }

    /// Per-subcarrier noise power in mW for an `n_f`-subcarrier system.
    pub fn noise_power_per_subcarrier_mw(&self, n_f: usize) -> f64 {
        dbm_to_mw(self.noise_power_dbm()) / n_f as f64
    }

    /// Per-subcarrier transmit power budget in mW (equal split).
    pub fn tx_power_per_subcarrier_mw(&self, n_f: usize) -> f64 {
        dbm_to_mw(self.tx_power_dbm) / n_f as f64
    }

    /// Large-scale channel gain in dB at distance `l_km`.
    pub fn pathloss_db(&self, l_km: f64) -> f64 {
        self.pathloss_intercept_db - 10.0 * self.pathloss_exponent * l_km.log10()
    }
}

/// One placement of the users with their large-scale fading.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDrop {
    /// Positions in km relative to the transmitter at the origin.
    pub positions: Vec<(f64, f64)>,
    /// Per-user linear channel variance from the path-loss law.
    pub sigma_h2: Vec<f64>,
}

/// Places users i.i.d. uniformly over the coverage square and converts
/// their distances into linear channel variances.
pub fn drop_users<R: Rng + ?Sized>(config: &LinkConfig, rng: &mut R) -> Result<UserDrop> {
    config.validate()?;
    let half = config.coverage_km / 2.0;
    let mut positions = Vec::with_capacity(config.users);
    let mut sigma_h2 = Vec::with_capacity(config.users);
    for _ in 0..config.users {
        let x = rng.random::<f64>() * config.coverage_km - half;
        let y = rng.random::<f64>() * config.coverage_km - half;
        positions.push((x, y));
        let l = (x * x + y * y).sqrt().max(config.min_distance_km);
        sigma_h2.push(db_to_linear(config.pathloss_db(l)));
    }
    Ok(UserDrop {
        positions,
        sigma_h2,
    })
}

/// Per-subcarrier precoding state.
#[derive(Debug, Clone)]
pub struct PrecodedSubcarrier {
    /// Columns are unit-norm per-stream beamformers (`n_t × streams`).
    pub w: DMatrix<Cpx>,
    /// Per-stream transmit power in mW.
    pub power: Vec<f64>,
}

/// Zero-forcing precoding computed from recovered CSI.
#[derive(Debug, Clone)]
pub struct PrecodedFrame {
    pub subcarriers: Vec<PrecodedSubcarrier>,
    /// Set when rank deficiency forced diagonal regularization.
    pub regularized: bool,
}

impl PrecodedFrame {
    /// Transmitted power on one subcarrier.
    pub fn transmit_power(&self, subcarrier: usize) -> f64 {
        let sc = &self.subcarriers[subcarrier];
        sc.power
            .iter()
            .enumerate()
            .map(|(k, &p)| p * sc.w.column(k).norm_squared())
            .sum()
    }
}

/// Builds the zero-forcing precoder from the aggregated recovered channels.
///
/// `recovered[user][subcarrier]` is the user's recovered `n_r × n_t` matrix;
/// every receive antenna becomes one stream. Columns of the pseudo-inverse
/// are normalized to unit norm and the per-subcarrier power budget is split
/// equally across streams.
pub fn zf_precoder(
    recovered: &[Vec<DMatrix<Cpx>>],
    power_per_subcarrier_mw: f64,
) -> Result<PrecodedFrame> {
    if recovered.is_empty() || recovered[0].is_empty() {
        return Err(Error::DimensionMismatch("no recovered channels".into()));
    }
    let n_f = recovered[0].len();
    let n_t = recovered[0][0].ncols();
    let streams: usize = recovered.iter().map(|u| u[0].nrows()).sum();
    if streams > n_t {
        return Err(Error::InvalidParameter(format!(
            "{streams} streams exceed {n_t} transmit antennas"
        )));
    }
    let mut regularized = false;
    let mut subcarriers = Vec::with_capacity(n_f);
    for f in 0..n_f {
        let mut agg = DMatrix::zeros(streams, n_t);
        let mut row = 0;
        for user in recovered {
            let m = &user[f];
            if m.ncols() != n_t || user.len() != n_f {
                return Err(Error::DimensionMismatch(
                    "recovered channel dimensions are inconsistent".into(),
                ));
            }
            for a in 0..m.nrows() {
                for t in 0..n_t {
                    agg[(row, t)] = m[(a, t)];
                }
                row += 1;
            }
        }
        let gram = &agg * agg.adjoint();
        let inv = match gram.clone().try_inverse() {
            Some(inv) if inv.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => inv,
            _ => {
                regularized = true;
                let eps = 1e-12 * gram.trace().re / streams as f64;
                let reg = &gram + DMatrix::identity(streams, streams) * Cpx::new(eps.max(f64::MIN_POSITIVE), 0.0);
                reg.try_inverse().ok_or_else(|| {
                    Error::InvalidParameter("aggregated channel is singular even after regularization".into())
                })?
            }
        };
        let mut w = agg.adjoint() * inv;
        for k in 0..streams {
            let norm = w.column(k).norm();
            if norm > 0.0 {
                let inv_norm = Cpx::new(1.0 / norm, 0.0);
                for t in 0..n_t {
                    w[(t, k)] *= inv_norm;
                }
            } else {
                regularized = true;
            }
        }
        let power = vec![power_per_subcarrier_mw / streams as f64; streams];
        subcarriers.push(PrecodedSubcarrier { w, power });
    }
    Ok(PrecodedFrame {
        subcarriers,
        regularized,
    })
}

/// Flattens `true_channels[user][subcarrier]` into per-stream row vectors in
/// stream order (user-major, then receive antenna).
fn stream_rows(true_channels: &[Vec<DMatrix<Cpx>>], f: usize) -> Vec<Vec<Cpx>> {
    let mut rows = Vec::new();
    for user in true_channels {
        let m = &user[f];
        for a in 0..m.nrows() {
            rows.push((0..m.ncols()).map(|t| m[(a, t)]).collect());
        }
    }
    rows
}

/// Per-stream SINR against the true channels: desired power over residual
/// interference plus noise. Returns `[stream][subcarrier]`.
pub fn measure_sinr(
    true_channels: &[Vec<DMatrix<Cpx>>],
    frame: &PrecodedFrame,
    noise_mw: f64,
) -> Result<Vec<Vec<f64>>> {
    let n_f = frame.subcarriers.len();
    if true_channels.is_empty() || true_channels[0].len() != n_f {
        return Err(Error::DimensionMismatch(
            "true channels do not match the precoded frame".into(),
        ));
    }
    let streams: usize = true_channels.iter().map(|u| u[0].nrows()).sum();
    let mut sinr = vec![vec![0.0; n_f]; streams];
    for f in 0..n_f {
        let sc = &frame.subcarriers[f];
        let rows = stream_rows(true_channels, f);
        if rows.len() != sc.w.ncols() {
            return Err(Error::DimensionMismatch(
                "stream count does not match the precoder".into(),
            ));
        }
        for (k, row) in rows.iter().enumerate() {
            let mut signal = 0.0;
            let mut interference = 0.0;
            for j in 0..rows.len() {
                let gain: Cpx = row
                    .iter()
                    .zip(sc.w.column(j).iter())
                    .map(|(h, w)| h * w)
                    .sum();
                let p = sc.power[j] * gain.norm_sqr();
                if j == k {
                    signal = p;
                } else {
                    interference += p;
                }
            }
            sinr[k][f] = signal / (interference + noise_mw);
        }
    }
    Ok(sinr)
}

// ---------------------------------------------------------------------------
// 16-QAM modem
// ---------------------------------------------------------------------------

/// Unit-average-energy 16-QAM amplitude scale (levels ±1, ±3 per axis).
const QAM_SCALE: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

/// Gray mapping per axis: 00 → -3, 01 → -1, 11 → +1, 10 → +3.
fn pam_level(b0: bool, b1: bool) -> f64 {
    match (b0, b1) {
        (false, false) => -3.0,
        (false, true) => -1.0,
        (true, true) => 1.0,
        (true, false) => 3.0,
    }
}

fn pam_demap(x: f64) -> (bool, bool) {
    if x < -2.0 {
        (false, false)
    } else if x < 0.0 {
        (false, true)
    } else if x < 2.0 {
        (true, true)
    } else {
        (true, false)
    }
}

fn qam16_mod(bits: [bool; 4]) -> Cpx {
    Cpx::new(
        pam_level(bits[0], bits[1]) * QAM_SCALE,
        pam_level(bits[2], bits[3]) * QAM_SCALE,
    )
}

fn qam16_demod(z: Cpx) -> [bool; 4] {
    let (i0, i1) = pam_demap(z.re / QAM_SCALE);
    let (q0, q1) = pam_demap(z.im / QAM_SCALE);
    [i0, i1, q0, q1]
}

fn complex_noise<R: Rng + ?Sized>(variance_mw: f64, rng: &mut R) -> Cpx {
    let std = (variance_mw / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Cpx::new(re * std, im * std)
}

/// Bit-error tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BitErrors {
    pub errors: u64,
    pub bits: u64,
}

impl BitErrors {
    pub fn rate(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.bits as f64
        }
    }

    pub fn merge(&mut self, other: BitErrors) {
        self.errors += other.errors;
        self.bits += other.bits;
    }
}

/// Sends Gray-mapped 16-QAM symbols through the precoded downlink and
/// counts bit errors under genie-aided per-stream equalization (the known
/// effective gain of the stream's own beam; residual interference from the
/// other streams is untouched).
pub fn transmit_16qam<R: Rng + ?Sized>(
    frame: &PrecodedFrame,
    true_channels: &[Vec<DMatrix<Cpx>>],
    n_symbols: usize,
    noise_mw: f64,
    rng: &mut R,
) -> Result<BitErrors> {
    let n_f = frame.subcarriers.len();
    if true_channels.is_empty() || true_channels[0].len() != n_f {
        return Err(Error::DimensionMismatch(
            "true channels do not match the precoded frame".into(),
        ));
    }
    let mut tally = BitErrors::default();
    for f in 0..n_f {
        let sc = &frame.subcarriers[f];
        let rows = stream_rows(true_channels, f);
        let streams = rows.len();
        if streams != sc.w.ncols() {
            return Err(Error::DimensionMismatch(
                "stream count does not match the precoder".into(),
            ));
        }
        // Effective gains: g[k][j] = (true row k) · (beam j).
        let mut gains = vec![vec![Cpx::default(); streams]; streams];
        for (k, row) in rows.iter().enumerate() {
            for j in 0..streams {
                gains[k][j] = row
                    .iter()
                    .zip(sc.w.column(j).iter())
                    .map(|(h, w)| h * w)
                    .sum();
            }
        }
        let amps: Vec<f64> = sc.power.iter().map(|&p| p.sqrt()).collect();
        let mut bits = vec![[false; 4]; streams];
        let mut symbols = vec![Cpx::default(); streams];
        for _ in 0..n_symbols {
            for s in bits.iter_mut() {
                for b in s.iter_mut() {
                    *b = rng.random::<bool>();
                }
            }
            for (s, x) in bits.iter().zip(symbols.iter_mut()) {
                *x = qam16_mod(*s);
            }
            for k in 0..streams {
                let mut y = complex_noise(noise_mw, rng);
                for j in 0..streams {
                    y += gains[k][j] * symbols[j] * amps[j];
                }
                let gain = gains[k][k] * amps[k];
                let z = if gain.norm_sqr() > 0.0 { y / gain } else { y };
                let detected = qam16_demod(z);
                for (a, b) in detected.iter().zip(&bits[k]) {
                    if a != b {
                        tally.errors += 1;
                    }
                    tally.bits += 1;
                }
            }
        }
    }
    Ok(tally)
}

/// Reference modem check: Gray 16-QAM over a plain AWGN channel at linear
/// symbol SNR `mu`.
pub fn awgn_ber_16qam<R: Rng + ?Sized>(mu: f64, n_bits: u64, rng: &mut R) -> Result<BitErrors> {
    if mu < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "SNR must be nonnegative, got {mu}"
        )));
    }
    let noise_var = if mu > 0.0 { 1.0 / mu } else { f64::INFINITY };
    let mut tally = BitErrors::default();
    let mut bits = [false; 4];
    while tally.bits < n_bits {
        for b in bits.iter_mut() {
            *b = rng.random::<bool>();
        }
        let x = qam16_mod(bits);
        let y = if noise_var.is_finite() {
            x + complex_noise(noise_var, rng)
        } else {
            complex_noise(1.0, rng)
        };
        let detected = qam16_demod(y);
        for (a, b) in detected.iter().zip(&bits) {
            if a != b {
                tally.errors += 1;
            }
            tally.bits += 1;
        }
    }
    Ok(tally)
}

// ---------------------------------------------------------------------------
// Single-user beamforming link (bound validation)
// ---------------------------------------------------------------------------

/// Monte-Carlo BER of a single-user beamforming link whose beam is built
/// from compressed CSI, together with the Jensen bound at the same
/// compression point. The receiver has one antenna; the effective SNR of a
/// realization is the squared norm of the recovered CSI over `sigma2`.
#[allow(clippy::too_many_arguments)]
pub fn beamforming_ber<R: Rng + ?Sized>(
    channel_model: &ChannelModel,
    covariance: &Arc<CovarianceModel>,
    codec: &Codec,
    m: usize,
    sigma2: f64,
    realizations: usize,
    symbols_per_realization: usize,
    rng: &mut R,
) -> Result<BerReport> {
    if channel_model.n_r() != 1 {
        return Err(Error::InvalidParameter(
            "beamforming link assumes a single receive antenna".into(),
        ));
    }
    if sigma2 <= 0.0 {
        return Err(Error::InvalidParameter("noise power must be positive".into()));
    }
    let mut tally = BitErrors::default();
    let mut mu_sum = 0.0;
    for _ in 0..realizations {
        let real = channel_model.sample(rng)?;
        let h: Vec<Cpx> = real.h.iter().cloned().collect();
        let fb = codec.compress(&h, m, None)?;
        let recovered = codec.recover(&fb)?;
        let rec_norm_sqr: f64 = recovered.iter().map(|c| c.norm_sqr()).sum();
        mu_sum += rec_norm_sqr / sigma2;
        if rec_norm_sqr == 0.0 {
            // Zero beam carries nothing; count random guesses.
            for _ in 0..symbols_per_realization * 4 {
                if rng.random::<bool>() {
                    tally.errors += 1;
                }
                tally.bits += 1;
            }
            continue;
        }
        let rec_norm = rec_norm_sqr.sqrt();
        // Beam along the recovered CSI; the true channel projects onto it.
        let gain: Cpx = h
            .iter()
            .zip(&recovered)
            .map(|(a, b)| a.conj() * b)
            .sum::<Cpx>()
            / Cpx::new(rec_norm, 0.0);
        let mut bits = [false; 4];
        for _ in 0..symbols_per_realization {
            for b in bits.iter_mut() {
                *b = rng.random::<bool>();
            }
            let x = qam16_mod(bits);
            let y = gain * x + complex_noise(sigma2, rng);
            let detected = qam16_demod(y / gain);
            for (a, b) in detected.iter().zip(&bits) {
                if a != b {
                    tally.errors += 1;
                }
                tally.bits += 1;
            }
        }
    }
    Ok(BerReport {
        mu_mean: mu_sum / realizations as f64,
        ber_bound: ber_lower_bound(covariance, m, sigma2)?,
        ber_empirical: tally.rate(),
        bits: tally.bits,
    })
}

// ---------------------------------------------------------------------------
// Drop orchestration
// ---------------------------------------------------------------------------

/// One compression point to evaluate within a drop.
#[derive(Debug, Clone, Copy)]
pub struct RowSpec<'a> {
    pub codec: &'a Codec,
    pub m: usize,
    pub q: u32,
}

/// Per-row partial results of one drop, mergeable across drops.
#[derive(Debug, Clone, Default)]
pub struct RowOutcome {
    /// NMSE of the quantized feedback actually used for precoding.
    pub nmse_quantized: NmseAccumulator,
    /// NMSE with quantization disabled (compression error only).
    pub nmse_unquantized: NmseAccumulator,
    pub se_sum: f64,
    pub ber: BitErrors,
    pub zf_regularized_drops: u64,
}

impl RowOutcome {
    pub fn merge(&mut self, other: &RowOutcome) {
        self.nmse_quantized.merge(&other.nmse_quantized);
        self.nmse_unquantized.merge(&other.nmse_unquantized);
        self.se_sum += other.se_sum;
        self.ber.merge(other.ber);
        self.zf_regularized_drops += other.zf_regularized_drops;
    }
}

/// Everything needed to run one independent drop.
#[derive(Debug, Clone, Copy)]
pub struct DropSpec<'a> {
    pub channel_model: &'a ChannelModel,
    pub link: &'a LinkConfig,
    pub rows: &'a [RowSpec<'a>],
    /// 16-QAM symbols per subcarrier per drop.
    pub n_symbols: usize,
    pub master_seed: u64,
    pub drop_index: u64,
}

/// Seed-stream tags for the per-drop random sources.
mod stream {
    pub const PLACEMENT: u64 = 0;
    pub const CHANNEL: u64 = 1;
    pub const SYMBOLS: u64 = 2;
}

/// Runs one drop: places users, synthesizes their channels once, then
/// evaluates every row (feedback → recovery → ZF precoding → SINR/SE → BER)
/// against the same channels and the same symbol/noise stream, so rows are
/// compared with common randomness.
pub fn run_drop(spec: &DropSpec<'_>) -> Result<Vec<RowOutcome>> {
    let model = spec.channel_model;
    let n_f = model.n_f();
    let (n_r, n_t) = (model.n_r(), model.n_t());
    let streams = spec.link.users * n_r;
    if streams > n_t {
        return Err(Error::InvalidParameter(format!(
            "{streams} streams exceed {n_t} transmit antennas"
        )));
    }

    let mut placement_rng = rng_for(spec.master_seed, &[spec.drop_index, stream::PLACEMENT]);
    let drop = drop_users(spec.link, &mut placement_rng)?;

    let mut true_channels: Vec<Vec<DMatrix<Cpx>>> = Vec::with_capacity(spec.link.users);
    let mut true_vectors: Vec<Vec<Cpx>> = Vec::with_capacity(spec.link.users);
    for (u, &sigma_h2) in drop.sigma_h2.iter().enumerate() {
        let mut ch_rng = rng_for(
            spec.master_seed,
            &[spec.drop_index, stream::CHANNEL, u as u64],
        );
        let real = model.sample_with_variance(sigma_h2, &mut ch_rng)?;
        true_vectors.push(real.h.iter().cloned().collect());
        true_channels.push(real.per_subcarrier);
    }

    let p_sc = spec.link.tx_power_per_subcarrier_mw(n_f);
    let noise_sc = spec.link.noise_power_per_subcarrier_mw(n_f);

    let mut outcomes = Vec::with_capacity(spec.rows.len());
    for row in spec.rows {
        let mut outcome = RowOutcome::default();
        let mut recovered_mats: Vec<Vec<DMatrix<Cpx>>> = Vec::with_capacity(spec.link.users);
        for h in &true_vectors {
            let fb = row.codec.compress(h, row.m, Some(row.q))?;
            let recovered = row.codec.recover(&fb)?;
            outcome.nmse_quantized.update(h, &recovered)?;
            let fb_unq = row.codec.compress(h, row.m, None)?;
            let rec_unq = row.codec.recover(&fb_unq)?;
            outcome.nmse_unquantized.update(h, &rec_unq)?;
            recovered_mats.push(
                (0..n_f)
                    .map(|f| {
                        DMatrix::from_column_slice(
                            n_r,
                            n_t,
                            &recovered[f * n_r * n_t..(f + 1) * n_r * n_t],
                        )
                    })
                    .collect(),
            );
        }
        let frame = zf_precoder(&recovered_mats, p_sc)?;
        if frame.regularized {
            outcome.zf_regularized_drops = 1;
        }
        let sinr = measure_sinr(&true_channels, &frame, noise_sc)?;
        outcome.se_sum = spectral_efficiency(&sinr)?;
        // Same symbol/noise stream for every row of the drop.
        let mut qam_rng = rng_for(spec.master_seed, &[spec.drop_index, stream::SYMBOLS]);
        outcome.ber = transmit_16qam(
            &frame,
            &true_channels,
            spec.n_symbols,
            noise_sc,
            &mut qam_rng,
        )?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{AntennaArray, DelayProfile};
    use crate::codec::SchemeId;
    use crate::covariance::{analytic_covariance, frequency_correlation};
    use crate::metrics::ber_16qam;
    use approx::assert_relative_eq;

    fn desk_model(n_t_side: usize, n_f: usize) -> ChannelModel {
        ChannelModel::new(
            &AntennaArray::new(n_t_side, n_t_side, 0.8).unwrap(),
            &AntennaArray::new(2, 1, 0.5).unwrap(),
            n_f,
            DelayProfile::exponential(3, 0.5).unwrap(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn pathloss_law_values() {
        let cfg = LinkConfig::default();
        assert_relative_eq!(cfg.pathloss_db(1.0), -123.0);
        assert_relative_eq!(cfg.pathloss_db(0.1), -85.4, epsilon = 1e-9);
        assert_relative_eq!(cfg.noise_power_dbm(), -104.0, epsilon = 1e-9);
    }

    #[test]
    fn drops_are_deterministic_and_in_bounds() {
        let cfg = LinkConfig::default();
        let a = drop_users(&cfg, &mut rng_for(3, &[0])).unwrap();
        let b = drop_users(&cfg, &mut rng_for(3, &[0])).unwrap();
        assert_eq!(a, b);
        for &(x, y) in &a.positions {
            assert!(x.abs() <= 0.5 && y.abs() <= 0.5);
        }
        for &s in &a.sigma_h2 {
            // No user may exceed the minimum-distance path gain.
            assert!(s <= db_to_linear(cfg.pathloss_db(cfg.min_distance_km)));
            assert!(s > 0.0);
        }
    }

    #[test]
    fn perfect_csi_zf_nulls_interference() {
        let model = desk_model(3, 4);
        let mut rng = rng_for(11, &[5]);
        let real = model.sample(&mut rng).unwrap();
        let user = vec![real.per_subcarrier.clone()];
        let frame = zf_precoder(&user, 2.0).unwrap();
        assert!(!frame.regularized);
        for f in 0..4 {
            assert_relative_eq!(frame.transmit_power(f), 2.0, max_relative = 1e-10);
            let rows = stream_rows(&user, f);
            for (k, row) in rows.iter().enumerate() {
                for j in 0..rows.len() {
                    let gain: Cpx = row
                        .iter()
                        .zip(frame.subcarriers[f].w.column(j).iter())
                        .map(|(h, w)| h * w)
                        .sum();
                    let row_norm: f64 = row.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                    if k != j {
                        assert!(
                            gain.norm() <= 1e-10 * row_norm,
                            "leakage {} at ({k},{j})",
                            gain.norm()
                        );
                    }
                }
            }
        }
        let sinr = measure_sinr(&user, &frame, 1e-9).unwrap();
        assert_eq!(sinr.len(), 2);
        assert!(sinr.iter().all(|row| row.iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn single_antenna_user_gets_matched_beam() {
        // One user, one receive antenna: the ZF direction collapses to the
        // matched filter along the recovered channel row.
        let h = DMatrix::from_row_slice(1, 3, &[
            Cpx::new(1.0, 0.5),
            Cpx::new(-0.3, 0.2),
            Cpx::new(0.0, -1.1),
        ]);
        let frame = zf_precoder(&[vec![h.clone()]], 1.0).unwrap();
        let w = frame.subcarriers[0].w.column(0).into_owned();
        let hh = h.row(0).adjoint();
        let cross = (hh.adjoint() * &w)[(0, 0)];
        assert_relative_eq!(cross.norm(), hh.norm() * w.norm(), max_relative = 1e-12);
    }

    #[test]
    fn imperfect_csi_leaks_interference() {
        let model = desk_model(3, 8);
        let covariance = Arc::new(
            analytic_covariance(
                frequency_correlation(model.profile(), 1.0, 8).unwrap(),
                model.r_t().clone(),
                model.r_r().clone(),
            )
            .unwrap(),
        );
        let codec = Codec::new(SchemeId::ScfF, 8, 18, Some(covariance.clone())).unwrap();
        let mut rng = rng_for(13, &[2]);
        let real = model.sample(&mut rng).unwrap();
        let h: Vec<Cpx> = real.h.iter().cloned().collect();
        // Keep far fewer than rank components: sizable recovery error.
        let fb = codec.compress(&h, 12, None).unwrap();
        let rec = codec.recover(&fb).unwrap();
        let rec_mats: Vec<DMatrix<Cpx>> = (0..8)
            .map(|f| DMatrix::from_column_slice(2, 9, &rec[f * 18..(f + 1) * 18]))
            .collect();
        let frame = zf_precoder(&[rec_mats], 1.0).unwrap();
        let user = vec![real.per_subcarrier.clone()];
        let mut worst = 0.0_f64;
        for f in 0..8 {
            let rows = stream_rows(&user, f);
            for (k, row) in rows.iter().enumerate() {
                for j in 0..rows.len() {
                    if j == k {
                        continue;
                    }
                    let gain: Cpx = row
                        .iter()
                        .zip(frame.subcarriers[f].w.column(j).iter())
                        .map(|(h, w)| h * w)
                        .sum();
                    worst = worst.max(gain.norm());
                }
            }
        }
        assert!(worst > 1e-8, "imperfect CSI must leak, got {worst}");
    }

    #[test]
    fn sinr_hand_case() {
        // Fixed 2-stream frame: signal and leakage computed by hand.
        let w = DMatrix::from_column_slice(
            2,
            2,
            &[
                Cpx::new(1.0, 0.0),
                Cpx::new(0.0, 0.0),
                Cpx::new(0.6, 0.0),
                Cpx::new(0.8, 0.0),
            ],
        );
        let frame = PrecodedFrame {
            subcarriers: vec![PrecodedSubcarrier {
                w,
                power: vec![2.0, 1.0],
            }],
            regularized: false,
        };
        let h = DMatrix::from_row_slice(
            2,
            2,
            &[
                Cpx::new(1.0, 0.0),
                Cpx::new(0.5, 0.0),
                Cpx::new(0.2, 0.0),
                Cpx::new(1.0, 0.0),
            ],
        );
        let sinr = measure_sinr(&[vec![h]], &frame, 0.5).unwrap();
        // Stream 0: signal 2·|1|², interference 1·|0.6+0.4|².
        assert_relative_eq!(sinr[0][0], 2.0 / 1.5, max_relative = 1e-12);
        // Stream 1: signal 1·|0.12+0.8|² = 0.8464, interference 2·|0.2|² = 0.08.
        assert_relative_eq!(sinr[1][0], 0.8464 / 0.58, max_relative = 1e-12);
    }

    #[test]
    fn zero_power_gives_zero_sinr_and_coinflip_ber() {
        let model = desk_model(2, 4);
        let mut rng = rng_for(19, &[0]);
        let real = model.sample(&mut rng).unwrap();
        let user = vec![real.per_subcarrier.clone()];
        let frame = zf_precoder(&user, 0.0).unwrap();
        let sinr = measure_sinr(&user, &frame, 1e-9).unwrap();
        assert!(sinr.iter().all(|row| row.iter().all(|&s| s == 0.0)));
        let tally = transmit_16qam(&frame, &user, 2000, 1e-9, &mut rng).unwrap();
        let p = tally.rate();
        let se = (0.25 / tally.bits as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * se, "BER {p} not near 0.5");
    }

    #[test]
    fn noiseless_perfect_csi_is_error_free() {
        let model = desk_model(3, 4);
        let mut rng = rng_for(23, &[0]);
        let real = model.sample(&mut rng).unwrap();
        let user = vec![real.per_subcarrier.clone()];
        let frame = zf_precoder(&user, 1.0).unwrap();
        let tally = transmit_16qam(&frame, &user, 500, 0.0, &mut rng).unwrap();
        assert_eq!(tally.errors, 0);
        assert_eq!(tally.bits, 500 * 4 * 4 * 2);
    }

    #[test]
    fn awgn_modem_matches_closed_form() {
        let mu = 5.0;
        let mut rng = rng_for(29, &[0]);
        let tally = awgn_ber_16qam(mu, 200_000, &mut rng).unwrap();
        let expect = ber_16qam(mu).unwrap();
        let se = (expect * (1.0 - expect) / tally.bits as f64).sqrt();
        assert!(
            (tally.rate() - expect).abs() < 4.0 * se,
            "AWGN BER {} vs closed form {expect}",
            tally.rate()
        );
    }

    #[test]
    fn run_drop_is_deterministic() {
        let model = desk_model(3, 8);
        let covariance = Arc::new(
            analytic_covariance(
                frequency_correlation(model.profile(), 1.0, 8).unwrap(),
                model.r_t().clone(),
                model.r_r().clone(),
            )
            .unwrap(),
        );
        let scf = Codec::new(SchemeId::ScfF, 8, 18, Some(covariance.clone())).unwrap();
        let full = Codec::new(SchemeId::Full, 8, 18, None).unwrap();
        let link = LinkConfig {
            users: 2,
            ..LinkConfig::default()
        };
        let rows = [
            RowSpec {
                codec: &full,
                m: 144,
                q: 12,
            },
            RowSpec {
                codec: &scf,
                m: 54,
                q: 12,
            },
        ];
        let spec = DropSpec {
            channel_model: &model,
            link: &link,
            rows: &rows,
            n_symbols: 20,
            master_seed: 99,
            drop_index: 5,
        };
        let a = run_drop(&spec).unwrap();
        let b = run_drop(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.se_sum.to_bits(), y.se_sum.to_bits());
            assert_eq!(x.ber, y.ber);
            assert_eq!(
                x.nmse_quantized.error_energy.to_bits(),
                y.nmse_quantized.error_energy.to_bits()
            );
        }
        // Full feedback recovers to quantizer precision.
        assert!(a[0].nmse_quantized.value().unwrap() < 1e-6);
        assert!(a[0].nmse_unquantized.value().unwrap() < 1e-20);
        // Sparse-domain feedback at full rank: compression error negligible.
        assert!(a[1].nmse_unquantized.value().unwrap() < 1e-12);
    }
}
