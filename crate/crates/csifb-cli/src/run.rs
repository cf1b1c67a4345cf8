//! Simulation orchestration and CSV emission.
//!
//! Drops are independent work units fanned out to a thread pool; per-drop
//! partial results are reduced in drop order, so the emitted CSV is
//! byte-identical for any thread count.

use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::Context;
use rayon::prelude::*;

use csifb::codec::{feedback_bits, Codec, SchemeId, SelectionKind};
use csifb::covariance::CovarianceModel;
use csifb::linksim::{run_drop, DropSpec, RowOutcome, RowSpec};
use csifb::metrics::nmse_analytic;

use crate::config::ExperimentConfig;

/// CSV schema marker emitted in every row.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Header of the simulation CSV.
pub const CSV_HEADER: &str = "schema_version,scheme,m,total_bits,gamma,gamma_fb,nmse_analytic,nmse_empirical,nmse_empirical_unquantized,ber_empirical,ber_bound,se,se_degradation_pct,feedback_reduction_pct,drops,seed,error";

/// One output row of the simulation sweep.
#[derive(Debug, Clone, Default)]
pub struct MetricsRecord {
    pub scheme: String,
    pub m: Option<usize>,
    pub total_bits: Option<u64>,
    pub gamma: Option<f64>,
    pub gamma_fb: Option<f64>,
    pub nmse_analytic: Option<f64>,
    pub nmse_empirical: Option<f64>,
    pub nmse_empirical_unquantized: Option<f64>,
    pub ber_empirical: Option<f64>,
    pub ber_bound: Option<f64>,
    pub se: Option<f64>,
    pub se_degradation_pct: Option<f64>,
    pub feedback_reduction_pct: Option<f64>,
    pub drops: usize,
    pub seed: u64,
    pub error: Option<String>,
}

fn fmt_opt_f(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_opt_u(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        // Commas in error messages would break the column grid.
        let error = self
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            CSV_SCHEMA_VERSION,
            self.scheme,
            self.m.map(|m| m.to_string()).unwrap_or_default(),
            fmt_opt_u(self.total_bits),
            fmt_opt_f(self.gamma),
            fmt_opt_f(self.gamma_fb),
            fmt_opt_f(self.nmse_analytic),
            fmt_opt_f(self.nmse_empirical),
            fmt_opt_f(self.nmse_empirical_unquantized),
            fmt_opt_f(self.ber_empirical),
            fmt_opt_f(self.ber_bound),
            fmt_opt_f(self.se),
            fmt_opt_f(self.se_degradation_pct),
            fmt_opt_f(self.feedback_reduction_pct),
            self.drops,
            self.seed,
            error
        )
    }
}

/// Largest kept count whose total feedback bits fit the budget, honoring
/// the scheme's structural constraints.
pub fn resolve_m(
    scheme: SchemeId,
    budget_bits: u64,
    q: u32,
    n: usize,
    n_spatial: usize,
) -> Result<usize, String> {
    match scheme.selection() {
        SelectionKind::All => Ok(n),
        SelectionKind::VariableMagnitude => {
            // total_bits is strictly increasing in m.
            let mut best = None;
            for m in 1..=n {
                let bits = feedback_bits(scheme, m, q, n)
                    .map_err(|e| e.to_string())?
                    .total_bits;
                if bits <= budget_bits {
                    best = Some(m);
                } else {
                    break;
                }
            }
            best.ok_or_else(|| format!("budget of {budget_bits} bits fits no coefficient"))
        }
        SelectionKind::FcfEquidistant => {
            let m_cap = (budget_bits / (2 * q as u64)) as usize;
            let m = (m_cap.min(n) / n_spatial) * n_spatial;
            if m >= n_spatial {
                Ok(m)
            } else {
                Err(format!(
                    "budget of {budget_bits} bits fits no whole subcarrier"
                ))
            }
        }
        _ => {
            let m = (budget_bits / (2 * q as u64)) as usize;
            if m >= 1 {
                Ok(m.min(n))
            } else {
                Err(format!("budget of {budget_bits} bits fits no coefficient"))
            }
        }
    }
}

/// One planned output row: a scheme at one budget point.
#[derive(Debug, Clone)]
pub struct PlannedRow {
    pub scheme: SchemeId,
    pub m: Result<usize, String>,
}

/// Expands the configured budget grid into per-scheme rows. Full feedback
/// is budget-independent and appears once, first.
pub fn plan_rows(config: &ExperimentConfig) -> Vec<PlannedRow> {
    let n = config.n();
    let n_spatial = config.n_spatial();
    let q = config.quant_bits;
    let mut rows = Vec::new();
    if config.schemes.contains(&SchemeId::Full) {
        rows.push(PlannedRow {
            scheme: SchemeId::Full,
            m: Ok(n),
        });
    }
    let compressing: Vec<SchemeId> = config
        .schemes
        .iter()
        .copied()
        .filter(|&s| s != SchemeId::Full)
        .collect();
    if !config.gamma_fb_grid.is_empty() {
        for &gamma in &config.gamma_fb_grid {
            let budget_bits = ((2 * n as u64 * q as u64) as f64 / gamma).floor() as u64;
            for &scheme in &compressing {
                rows.push(PlannedRow {
                    scheme,
                    m: resolve_m(scheme, budget_bits, q, n, n_spatial),
                });
            }
        }
    } else {
        for &m in &config.m_grid {
            for &scheme in &compressing {
                let m_eff = if scheme.selection() == SelectionKind::FcfEquidistant {
                    let down = (m / n_spatial) * n_spatial;
                    if down >= n_spatial {
                        Ok(down)
                    } else {
                        Err(format!("m = {m} fits no whole subcarrier"))
                    }
                } else {
                    Ok(m)
                };
                rows.push(PlannedRow { scheme, m: m_eff });
            }
        }
    }
    rows
}

/// Aggregated simulation output plus the merged per-row partials.
pub struct SimulationOutput {
    pub records: Vec<MetricsRecord>,
    pub csv: String,
}

/// Runs the configured sweep and renders the CSV.
pub fn simulate(
    config: &ExperimentConfig,
    covariance: Option<Arc<CovarianceModel>>,
    seed_override: Option<u64>,
    threads: Option<usize>,
) -> anyhow::Result<SimulationOutput> {
    config.validate()?;
    let seed = seed_override.unwrap_or(config.master_seed);
    let channel_model = config.channel_model()?;
    let needs_model = config
        .schemes
        .iter()
        .any(|s| matches!(s, SchemeId::ScfF | SchemeId::ScfV));
    let covariance = match covariance {
        Some(c) => Some(c),
        None if needs_model => Some(Arc::new(config.covariance_model()?)),
        None => None,
    };

    let planned = plan_rows(config);
    let n = config.n();
    let n_spatial = config.n_spatial();

    // Codecs are built once per scheme and shared across drops.
    let mut codecs: Vec<(SchemeId, Codec)> = Vec::new();
    let mut scheme_codecs: Vec<SchemeId> = planned.iter().map(|r| r.scheme).collect();
    scheme_codecs.push(SchemeId::Full); // always evaluated as the SE baseline
    for scheme in scheme_codecs {
        if codecs.iter().any(|(s, _)| *s == scheme) {
            continue;
        }
        codecs.push((
            scheme,
            Codec::new(scheme, config.n_subcarriers, n_spatial, covariance.clone())?,
        ));
    }
    let codec_of = |scheme: SchemeId| {
        &codecs
            .iter()
            .find(|(s, _)| *s == scheme)
            .expect("codec built above")
            .1
    };

    // Rows that actually run, plus the implicit full-feedback baseline.
    let mut row_specs: Vec<RowSpec<'_>> = Vec::new();
    let mut spec_index: Vec<Option<usize>> = Vec::with_capacity(planned.len());
    for row in &planned {
        match &row.m {
            Ok(m) => {
                spec_index.push(Some(row_specs.len()));
                row_specs.push(RowSpec {
                    codec: codec_of(row.scheme),
                    m: *m,
                    q: config.quant_bits,
                });
            }
            Err(_) => spec_index.push(None),
        }
    }
    let baseline_index = match planned
        .iter()
        .position(|r| r.scheme == SchemeId::Full && r.m.is_ok())
    {
        Some(i) => spec_index[i].expect("full row runs"),
        None => {
            row_specs.push(RowSpec {
                codec: codec_of(SchemeId::Full),
                m: n,
                q: config.quant_bits,
            });
            row_specs.len() - 1
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("building thread pool")?;
    let drop_results: Vec<Vec<RowOutcome>> = pool.install(|| {
        (0..config.drops as u64)
            .into_par_iter()
            .map(|drop_index| {
                run_drop(&DropSpec {
                    channel_model: &channel_model,
                    link: &config.link,
                    rows: &row_specs,
                    n_symbols: config.symbols_per_drop,
                    master_seed: seed,
                    drop_index,
                })
            })
            .collect::<Result<_, _>>()
    })?;

    // Ordered reduction keeps aggregation independent of scheduling.
    let mut merged: Vec<RowOutcome> = vec![RowOutcome::default(); row_specs.len()];
    for drop_rows in &drop_results {
        for (acc, one) in merged.iter_mut().zip(drop_rows) {
            acc.merge(one);
        }
    }

    let se_full = merged[baseline_index].se_sum / config.drops as f64;

    let mut records = Vec::with_capacity(planned.len());
    for (row, spec_idx) in planned.iter().zip(&spec_index) {
        let mut record = MetricsRecord {
            scheme: row.scheme.acronym().to_string(),
            drops: config.drops,
            seed,
            ..MetricsRecord::default()
        };
        match (&row.m, spec_idx) {
            (Ok(m), Some(idx)) => {
                let outcome = &merged[*idx];
                let budget = feedback_bits(row.scheme, *m, config.quant_bits, n)?;
                let se = outcome.se_sum / config.drops as f64;
                record.m = Some(*m);
                record.total_bits = Some(budget.total_bits);
                record.gamma = Some(n as f64 / *m as f64);
                record.gamma_fb = Some(budget.gamma_fb);
                record.feedback_reduction_pct =
                    Some((budget.gamma_fb - 1.0) / budget.gamma_fb * 100.0);
                if row.scheme == SchemeId::ScfF || row.scheme == SchemeId::ScfV {
                    record.nmse_analytic = covariance.as_deref().map(|c| nmse_analytic(c, *m));
                }
                record.nmse_empirical = Some(outcome.nmse_quantized.value()?);
                record.nmse_empirical_unquantized = Some(outcome.nmse_unquantized.value()?);
                record.ber_empirical = Some(outcome.ber.rate());
                record.se = Some(se);
                record.se_degradation_pct = Some((se_full - se) / se_full * 100.0);
            }
            (Err(msg), _) => record.error = Some(msg.clone()),
            (Ok(_), None) => unreachable!("resolved rows always run"),
        }
        records.push(record);
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &records {
        let _ = writeln!(csv, "{}", r.to_csv_row());
    }
    Ok(SimulationOutput { records, csv })
}

/// Closed-form compression curves: recovery NMSE and the BER lower bound
/// over a kept-count grid, no Monte Carlo.
pub fn analyze(model: &CovarianceModel, m_grid: &[usize], sigma2: f64) -> anyhow::Result<String> {
    let n = model.n() as f64;
    let mut csv = String::from("schema_version,m,gamma,delta,ber_bound\n");
    for &m in m_grid {
        let delta = nmse_analytic(model, m);
        let bound = csifb::metrics::ber_lower_bound(model, m, sigma2)?;
        let gamma = if m == 0 {
            f64::INFINITY
        } else {
            n / m as f64
        };
        let _ = writeln!(csv, "{CSV_SCHEMA_VERSION},{m},{gamma},{delta},{bound}");
    }
    Ok(csv)
}
