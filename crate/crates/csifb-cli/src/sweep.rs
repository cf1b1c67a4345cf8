//! Antenna-count sweep: best spectral efficiency per transmit-array size
//! under per-user feedback byte budgets.

use std::fmt::Write as _;

use anyhow::{bail, Context};
use rayon::prelude::*;
use std::sync::Arc;

use csifb::channel::AntennaArray;
use csifb::codec::{feedback_bits, Codec, SchemeId};
use csifb::linksim::{run_drop, DropSpec, RowOutcome, RowSpec};

use crate::config::ExperimentConfig;
use crate::run::CSV_SCHEMA_VERSION;

pub const SWEEP_CSV_HEADER: &str = "schema_version,budget_bytes_per_user_per_subcarrier,n_t_side,n_t,m,total_bits,gamma_fb,se,is_argmax,error";

#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub budget_bytes: f64,
    pub side: usize,
    pub m: Option<usize>,
    pub total_bits: Option<u64>,
    pub gamma_fb: Option<f64>,
    pub se: Option<f64>,
    pub is_argmax: bool,
    pub error: Option<String>,
}

/// Sweeps square transmit arrays against per-user feedback budgets
/// (bytes per user per subcarrier), evaluating the eigenbasis scheme with
/// the largest kept count that fits each budget.
pub fn sweep_antennas(
    config: &ExperimentConfig,
    budgets_bytes: &[f64],
    seed_override: Option<u64>,
    threads: Option<usize>,
) -> anyhow::Result<(Vec<SweepRecord>, String)> {
    config.validate()?;
    if budgets_bytes.is_empty() {
        bail!("at least one byte budget is required");
    }
    if config.sweep_sides.is_empty() {
        bail!("at least one array side is required");
    }
    let seed = seed_override.unwrap_or(config.master_seed);
    let q = config.quant_bits;
    let n_f = config.n_subcarriers;
    let n_r = config.rx_array.len();
    let streams = config.link.users * n_r;
    for &side in &config.sweep_sides {
        if streams > side * side {
            bail!(
                "{streams} streams exceed the {} antennas of the {side}x{side} array; \
                 reduce users or receive antennas for the sweep",
                side * side
            );
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("building thread pool")?;

    // One simulation pass per side, all fitting budgets evaluated against
    // the same channel realizations.
    let mut records: Vec<SweepRecord> = Vec::new();
    for &side in &config.sweep_sides {
        let tx = AntennaArray::new(side, side, config.tx_array.rho)?;
        let n = side * side * n_r * n_f;
        let channel_model = config.channel_model_with_tx(&tx)?;
        let covariance = Arc::new(config.covariance_model_with_tx(&tx)?);
        let codec = Codec::new(SchemeId::ScfF, n_f, side * side * n_r, Some(covariance))?;

        let mut resolved: Vec<(usize, Result<usize, String>)> = Vec::new();
        for (bi, &bytes) in budgets_bytes.iter().enumerate() {
            let budget_bits = (bytes * 8.0 * n_f as f64).floor() as u64;
            let m = (budget_bits / (2 * q as u64)) as usize;
            if m >= 1 {
                resolved.push((bi, Ok(m.min(n))));
            } else {
                resolved.push((
                    bi,
                    Err(format!("budget of {bytes} bytes/user/subcarrier fits no coefficient")),
                ));
            }
        }
        let row_specs: Vec<RowSpec<'_>> = resolved
            .iter()
            .filter_map(|(_, m)| m.as_ref().ok())
            .map(|&m| RowSpec {
                codec: &codec,
                m,
                q,
            })
            .collect();
        let outcomes: Vec<RowOutcome> = if row_specs.is_empty() {
            Vec::new()
        } else {
            let per_drop: Vec<Vec<RowOutcome>> = pool.install(|| {
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
            let mut merged = vec![RowOutcome::default(); row_specs.len()];
            for drop_rows in &per_drop {
                for (acc, one) in merged.iter_mut().zip(drop_rows) {
                    acc.merge(one);
                }
            }
            merged
        };

        let mut outcome_iter = outcomes.into_iter();
        for (bi, m) in resolved {
            match m {
                Ok(m) => {
                    let outcome = outcome_iter.next().expect("one outcome per resolved row");
                    let budget = feedback_bits(SchemeId::ScfF, m, q, n)?;
                    records.push(SweepRecord {
                        budget_bytes: budgets_bytes[bi],
                        side,
                        m: Some(m),
                        total_bits: Some(budget.total_bits),
                        gamma_fb: Some(budget.gamma_fb),
                        se: Some(outcome.se_sum / config.drops as f64),
                        is_argmax: false,
                        error: None,
                    });
                }
                Err(msg) => records.push(SweepRecord {
                    budget_bytes: budgets_bytes[bi],
                    side,
                    m: None,
                    total_bits: None,
                    gamma_fb: None,
                    se: None,
                    is_argmax: false,
                    error: Some(msg),
                }),
            }
        }
    }

    // Mark the best side per budget.
    for (bi, &bytes) in budgets_bytes.iter().enumerate() {
        let _ = bi;
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in records.iter().enumerate() {
            if r.budget_bytes == bytes {
                if let Some(se) = r.se {
                    if best.map(|(_, b)| se > b).unwrap_or(true) {
                        best = Some((i, se));
                    }
                }
            }
        }
        if let Some((i, _)) = best {
            records[i].is_argmax = true;
        }
    }

    // Budget-major ordering in the emitted CSV.
    let mut ordered: Vec<&SweepRecord> = Vec::new();
    for &bytes in budgets_bytes {
        for r in &records {
            if r.budget_bytes == bytes {
                ordered.push(r);
            }
        }
    }
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for r in ordered {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            CSV_SCHEMA_VERSION,
            r.budget_bytes,
            r.side,
            r.side * r.side,
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            r.total_bits.map(|b| b.to_string()).unwrap_or_default(),
            r.gamma_fb.map(|g| g.to_string()).unwrap_or_default(),
            r.se.map(|s| s.to_string()).unwrap_or_default(),
            if r.is_argmax { 1 } else { 0 },
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    Ok((records, csv))
}
