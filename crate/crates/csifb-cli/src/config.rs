//! Experiment configuration: a single strict JSON document.
//!
//! Unknown fields are rejected so a typo cannot silently fall back to a
//! default. Units: powers in dBm, noise density in dBm/Hz, distances in km,
//! bandwidth in Hz.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use csifb::channel::{build_correlation, AntennaArray, ChannelModel, DelayProfile};
use csifb::codec::SchemeId;
use csifb::covariance::{analytic_covariance, CovarianceFile, CovarianceModel};
use csifb::linksim::LinkConfig;

/// Delay profile specification. Tap powers are normalized to sum to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelaySpec {
    /// `d_l ∝ exp(-decay·l)` for `l = 0..taps-1`.
    Exponential { taps: usize, decay: f64 },
    /// Explicit per-tap powers.
    Custom { powers: Vec<f64> },
}

impl DelaySpec {
    pub fn to_profile(&self) -> anyhow::Result<DelayProfile> {
        let profile = match self {
            DelaySpec::Exponential { taps, decay } => DelayProfile::exponential(*taps, *decay)?,
            DelaySpec::Custom { powers } => DelayProfile::new(powers.clone())?,
        };
        Ok(profile)
    }
}

fn default_sweep_sides() -> Vec<usize> {
    vec![2, 3, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Transmit panel geometry and adjacent-element correlation.
    pub tx_array: AntennaArray,
    /// Receive panel geometry and adjacent-element correlation.
    pub rx_array: AntennaArray,
    pub n_subcarriers: usize,
    pub delay_profile: DelaySpec,
    /// Schemes to evaluate, by acronym.
    pub schemes: Vec<SchemeId>,
    /// Feedback compression ratio targets; each scheme gets the largest kept
    /// count whose total bits fit the implied budget.
    #[serde(default)]
    pub gamma_fb_grid: Vec<f64>,
    /// Alternative to `gamma_fb_grid`: evaluate these kept counts directly.
    #[serde(default)]
    pub m_grid: Vec<usize>,
    /// Quantizer bits per real dimension.
    pub quant_bits: u32,
    /// Independent user placements per row.
    pub drops: usize,
    /// 16-QAM symbols per subcarrier per drop.
    pub symbols_per_drop: usize,
    pub master_seed: u64,
    pub link: LinkConfig,
    /// Square transmit-array sides for the antenna-count sweep.
    #[serde(default = "default_sweep_sides")]
    pub sweep_sides: Vec<usize>,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: 16 transmit antennas (4×4), 2 receive antennas,
    /// 16 subcarriers, 3 exponential taps, 4 users.
    fn default() -> Self {
        Self {
            tx_array: AntennaArray {
                n_h: 4,
                n_v: 4,
                rho: 0.8,
            },
            rx_array: AntennaArray {
                n_h: 2,
                n_v: 1,
                rho: 0.5,
            },
            n_subcarriers: 16,
            delay_profile: DelaySpec::Exponential {
                taps: 3,
                decay: 0.5,
            },
            schemes: vec![
                SchemeId::ScfF,
                SchemeId::TcfV1,
                SchemeId::TcfF2,
                SchemeId::FcfF2,
                SchemeId::Full,
            ],
            gamma_fb_grid: vec![2.0, 4.0, 8.0, 16.0],
            m_grid: Vec::new(),
            quant_bits: 12,
            drops: 100,
            symbols_per_drop: 40,
            master_seed: 1,
            link: LinkConfig::default(),
            sweep_sides: default_sweep_sides(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let config = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        AntennaArray::new(self.tx_array.n_h, self.tx_array.n_v, self.tx_array.rho)?;
        AntennaArray::new(self.rx_array.n_h, self.rx_array.n_v, self.rx_array.rho)?;
        let profile = self.delay_profile.to_profile()?;
        if self.n_subcarriers < profile.len() {
            bail!(
                "n_subcarriers {} must be at least the tap count {}",
                self.n_subcarriers,
                profile.len()
            );
        }
        if self.schemes.is_empty() {
            bail!("at least one scheme is required");
        }
        if self.gamma_fb_grid.is_empty() == self.m_grid.is_empty() {
            bail!("exactly one of gamma_fb_grid and m_grid must be nonempty");
        }
        if self.gamma_fb_grid.iter().any(|&g| g < 1.0 || !g.is_finite()) {
            bail!("gamma_fb targets must be finite and at least 1");
        }
        let n = self.n();
        if self.m_grid.iter().any(|&m| m < 1 || m > n) {
            bail!("m grid entries must lie in 1..={n}");
        }
        if self.quant_bits < 1 || self.quant_bits > 32 {
            bail!("quant_bits must lie in 1..=32");
        }
        if self.drops < 1 || self.symbols_per_drop < 1 {
            bail!("drops and symbols_per_drop must be at least 1");
        }
        self.link.validate()?;
        let streams = self.link.users * self.rx_array.len();
        if streams > self.tx_array.len() {
            bail!(
                "{streams} streams (users × receive antennas) exceed {} transmit antennas",
                self.tx_array.len()
            );
        }
        Ok(())
    }

    pub fn n_spatial(&self) -> usize {
        self.tx_array.len() * self.rx_array.len()
    }

    /// Stacked CSI dimension.
    pub fn n(&self) -> usize {
        self.n_spatial() * self.n_subcarriers
    }

    /// Unit-variance channel generator (per-user variance comes from the
    /// path-loss law at run time).
    pub fn channel_model(&self) -> anyhow::Result<ChannelModel> {
        Ok(ChannelModel::new(
            &self.tx_array,
            &self.rx_array,
            self.n_subcarriers,
            self.delay_profile.to_profile()?,
            1.0,
        )?)
    }

    /// Channel generator for a different transmit panel (antenna sweep).
    pub fn channel_model_with_tx(&self, tx: &AntennaArray) -> anyhow::Result<ChannelModel> {
        Ok(ChannelModel::new(
            tx,
            &self.rx_array,
            self.n_subcarriers,
            self.delay_profile.to_profile()?,
            1.0,
        )?)
    }

    /// Analytic covariance model of the unit-variance channel.
    pub fn covariance_model(&self) -> anyhow::Result<CovarianceModel> {
        self.covariance_model_with_tx(&self.tx_array)
    }

    pub fn covariance_model_with_tx(&self, tx: &AntennaArray) -> anyhow::Result<CovarianceModel> {
        let profile = self.delay_profile.to_profile()?;
        let c_f = csifb::covariance::frequency_correlation(&profile, 1.0, self.n_subcarriers)?;
        let r_t = build_correlation(tx)?;
        let r_r = build_correlation(&self.rx_array)?;
        Ok(analytic_covariance(c_f, r_t, r_r)?)
    }
}

/// Loads a stored covariance model and checks it against the configuration.
pub fn load_covariance(path: &Path, config: &ExperimentConfig) -> anyhow::Result<Arc<CovarianceModel>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading covariance {}", path.display()))?;
    let file: CovarianceFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing covariance {}", path.display()))?;
    let model = file.to_model()?;
    if model.n_f() != config.n_subcarriers
        || model.n_t() != config.tx_array.len()
        || model.n_r() != config.rx_array.len()
    {
        bail!(
            "covariance dimensions ({}, {}, {}) do not match the config ({}, {}, {})",
            model.n_f(),
            model.n_t(),
            model.n_r(),
            config.n_subcarriers,
            config.tx_array.len(),
            config.rx_array.len()
        );
    }
    Ok(Arc::new(model))
}
