//! Mean-square error of the `M`-server chain against the mean-field
//! equilibrium, as a function of `M`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use supermarket::meanfield::fmt17;
use supermarket::simulator::estimate_mse;
use supermarket::stats::{fit_line, t975, LineFit};
use supermarket::ModelParams;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::io::{generated_line, VERSION};

/// Slack on the envelope constant calibrated at the smallest `M`.
pub const ENVELOPE_SLACK: f64 = 4.0;

/// `(ln M)³ (ln ln M)² / M`.
pub fn log_envelope(m: f64) -> f64 {
    let l = m.ln();
    l.powi(3) * l.ln().powi(2) / m
}

/// One `(λ, M)` cell pooled over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub lambda: f64,
    #[serde(rename = "M")]
    pub servers: usize,
    pub n: usize,
    /// Mean over replications of the stationary mean-square error.
    pub mse: f64,
    /// 95% half-width across replications (the single run's batch-means
    /// half-width when there is one replication).
    pub ci: f64,
    pub reps: usize,
    pub per_replication: Vec<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub lambda: f64,
    pub points: usize,
    /// Least-squares slope of `ln mse` on `ln M`.
    pub slope: f64,
    pub slope_stderr: f64,
    /// Same fit after dividing `mse` by `(ln M)³ (ln ln M)²`.
    pub corrected_slope: f64,
    pub corrected_slope_stderr: f64,
}

/// `mse(M) <= slack · C (ln M)³(ln ln M)²/M` with `C` fitted at the
/// smallest `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub lambda: f64,
    pub calibrated_constant: f64,
    pub slack: f64,
    /// `mse / (C · envelope)` per `M`, in row order.
    pub ratios: Vec<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub replications: usize,
    pub warmup_time: Option<f64>,
    pub horizon_time: Option<f64>,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub rows: Vec<RateRow>,
    pub fits: Vec<RateFit>,
    pub envelope: Vec<EnvelopeFit>,
    pub provenance: Provenance,
}

/// Runs `replications` independent chains per `(λ, M)`: the seed is shared
/// and the replication index selects the generator stream. All runs go to
/// the rayon pool; results are keyed and sorted before pooling.
pub fn rate_study(cfg: &ExperimentConfig) -> Result<RateStudyResult> {
    cfg.validate_rate_study()?;
    let mut cells = Vec::new();
    for &lambda in &cfg.lambda {
        for &m in &cfg.servers {
            cells.push((lambda, m, cfg.n.resolve(lambda, Some(m))?));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.replications).map(move |r| (c, r)))
        .collect();
    let mut runs: Vec<(usize, usize, std::result::Result<(f64, f64), String>)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (lambda, m, n) = cells[c];
            let out = ModelParams::new(lambda, m)
                .and_then(|p| estimate_mse(&p, &cfg.sim.sim_config(cfg.seed, r as u64, n), n))
                .map_err(|e| e.to_string());
            (c, r, out)
        })
        .collect();
    runs.sort_by_key(|(c, r, _)| (*c, *r));

    let rows: Vec<RateRow> = cells
        .iter()
        .enumerate()
        .map(|(c, &(lambda, m, n))| {
            let mine: Vec<_> = runs.iter().filter(|(cc, _, _)| *cc == c).collect();
            let error = mine.iter().find_map(|(_, r, o)| {
                o.as_ref().err().map(|e| format!("replication {r}: {e}"))
            });
            let vals: Vec<(f64, f64)> = mine.iter().filter_map(|(_, _, o)| o.clone().ok()).collect();
            let per: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let (mse, ci) = if error.is_some() {
                (f64::NAN, f64::NAN)
            } else {
                pool(&vals)
            };
            RateRow {
                lambda,
                servers: m,
                n,
                mse,
                ci,
                reps: per.len(),
                per_replication: per,
                seed: cfg.seed,
                error,
            }
        })
        .collect();

    let mut fits = Vec::new();
    let mut envelope = Vec::new();
    for &lambda in &cfg.lambda {
        let mine: Vec<&RateRow> = rows
            .iter()
            .filter(|r| r.lambda == lambda && r.error.is_none() && r.mse > 0.0)
            .collect();
        let x: Vec<f64> = mine.iter().map(|r| (r.servers as f64).ln()).collect();
        let y: Vec<f64> = mine.iter().map(|r| r.mse.ln()).collect();
        let yc: Vec<f64> = mine
            .iter()
            .map(|r| {
                let m = r.servers as f64;
                (r.mse / (log_envelope(m) * m)).ln()
            })
            .collect();
        if let (Some(raw), Some(cor)) = (fit_line(&x, &y), fit_line(&x, &yc)) {
            fits.push(fit_entry(lambda, mine.len(), raw, cor));
        }
        if let Some(first) = mine.first() {
            let c = first.mse / log_envelope(first.servers as f64);
            let ratios: Vec<f64> = mine
                .iter()
                .map(|r| r.mse / (c * log_envelope(r.servers as f64)))
                .collect();
            envelope.push(EnvelopeFit {
                lambda,
                calibrated_constant: c,
                slack: ENVELOPE_SLACK,
                passed: ratios.iter().all(|&q| q <= ENVELOPE_SLACK),
                ratios,
            });
        }
    }

    Ok(RateStudyResult {
        rows,
        fits,
        envelope,
        provenance: Provenance {
            version: VERSION.into(),
            seed: cfg.seed,
            replications: cfg.replications,
            warmup_time: cfg.sim.warmup_time,
            horizon_time: cfg.sim.horizon_time,
            batches: cfg.sim.batches,
        },
    })
}

fn fit_entry(lambda: f64, points: usize, raw: LineFit, cor: LineFit) -> RateFit {
    RateFit {
        lambda,
        points,
        slope: raw.slope,
        slope_stderr: raw.slope_stderr,
        corrected_slope: cor.slope,
        corrected_slope_stderr: cor.slope_stderr,
    }
}

/// Mean over replications with a Student-t half-width across them.
fn pool(vals: &[(f64, f64)]) -> (f64, f64) {
    match vals.len() {
        0 => (f64::NAN, f64::NAN),
        1 => vals[0],
        k => {
            let mean = vals.iter().map(|v| v.0).sum::<f64>() / k as f64;
            let var = vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (mean, t975(k - 1) * (var / k as f64).sqrt())
        }
    }
}

impl RateStudyResult {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    /// `lambda,M,n,mse,ci,reps` followed by provenance columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", generated_line())?;
        writeln!(
            w,
            "lambda,M,n,mse,ci,reps,seed,warmup_time,horizon_time,batches,version,status"
        )?;
        let p = &self.provenance;
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_else(|| "default".into());
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                fmt17(r.lambda),
                r.servers,
                r.n,
                fmt17(r.mse),
                fmt17(r.ci),
                r.reps,
                r.seed,
                opt(p.warmup_time),
                opt(p.horizon_time),
                p.batches,
                p.version,
                status
            )?;
        }
        Ok(())
    }
}
