//! Subcommand implementations. Each takes a validated configuration and an
//! output path, writes its files and reports whether its numerical checks
//! held.

use std::path::{Path, PathBuf};

use serde::Serialize;
use supermarket::lyapunov::{base_weights, tilde_weights, verify_decay, DecayReport, RegimeReport};
use supermarket::meanfield::{fmt17, solve_to_equilibrium};
use supermarket::perturbation::{
    integrate_sensitivity, remainder, remainder_bound_check, sensitivity_envelope_check,
    EnvelopeReport, RemainderReport, SensitivitySetup,
};
use supermarket::simulator::{simulate, StationaryEstimate};
use supermarket::stein::{stein_decomposition, SteinReport};
use supermarket::{equilibrium, ModelParams};

use crate::config::{ExperimentConfig, Format};
use crate::error::{HarnessError, Result};
use crate::initial::InitialCondition;
use crate::io::{create, generated_line, write_json, write_trajectory, VERSION};
use crate::rate::rate_study;

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    /// Failed numerical checks; nonempty means exit status 2.
    pub failures: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            summary: Vec::new(),
            failures: Vec::new(),
        }
    }
}

fn single_lambda(cfg: &ExperimentConfig, cmd: &str) -> Result<f64> {
    match cfg.lambda.as_slice() {
        [l] => Ok(*l),
        _ => Err(HarnessError::config(format!("{cmd} takes exactly one lambda"))),
    }
}

fn out_or(out: Option<&Path>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(name))
}

#[derive(Debug, Serialize)]
struct SimulationEntry {
    lambda: f64,
    #[serde(rename = "M")]
    servers: usize,
    n: usize,
    estimate: StationaryEstimate,
}

/// Stationary tail estimates for every `(λ, M)` and replication.
pub fn run_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for &lambda in &cfg.lambda {
        for &m in &cfg.servers {
            let params = ModelParams::new(lambda, m)?;
            let n = cfg.n.resolve(lambda, Some(m))?;
            for rep in 0..cfg.replications {
                let est = simulate(&params, &cfg.sim.sim_config(cfg.seed, rep as u64, n))?;
                entries.push(SimulationEntry {
                    lambda,
                    servers: m,
                    n,
                    estimate: est,
                });
            }
        }
    }
    let mut outcome = Outcome::new();
    let path = match cfg.format {
        Format::Json => {
            let path = out_or(out, cfg, "simulate.json");
            write_json(&path, &entries)?;
            path
        }
        Format::Csv => {
            let path = out_or(out, cfg, "simulate.csv");
            write_simulation_csv(&path, &entries)?;
            path
        }
    };
    for e in &entries {
        outcome.summary.push(format!(
            "lambda={} M={} stream={}: mse={:.6e} ± {:.2e} ({} events)",
            e.lambda,
            e.servers,
            e.estimate.stream_used,
            e.estimate.full_square_error,
            e.estimate.ci_halfwidth.full_square_error,
            e.estimate.total_events
        ));
    }
    outcome.files.push(path);
    Ok(outcome)
}

fn write_simulation_csv(path: &Path, entries: &[SimulationEntry]) -> Result<()> {
    use std::io::Write;
    let mut w = create(path)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{}", generated_line())?;
        writeln!(w, "lambda,M,seed,stream,k,s_k,ci,s_star_k,version")?;
        for e in entries {
            let star = equilibrium(e.lambda, e.n).expect("validated lambda");
            for (k, (s, ci)) in e
                .estimate
                .mean_tail
                .iter()
                .zip(&e.estimate.ci_halfwidth.mean_tail)
                .enumerate()
            {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    fmt17(e.lambda),
                    e.servers,
                    e.estimate.seed_used,
                    e.estimate.stream_used,
                    k + 1,
                    fmt17(*s),
                    fmt17(*ci),
                    fmt17(star[k]),
                    VERSION
                )?;
            }
        }
        w.flush()
    };
    body().map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Serialize)]
struct TrajectoryJson<'a> {
    version: &'a str,
    lambda: f64,
    n: usize,
    x0: String,
    settle_time: f64,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

/// Solves the truncated shifted system from `x0` until it settles.
pub fn run_meanfield(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let lambda = single_lambda(cfg, "meanfield")?;
    let servers = (cfg.servers.len() == 1).then(|| cfg.servers[0]);
    let n = cfg.n.resolve(lambda, servers)?;
    let ic = cfg.initial_condition()?;
    let x0 = ic.resolve(lambda, n, cfg.seed)?;
    let (traj, settle) = solve_to_equilibrium(&x0, lambda, n, &cfg.integrator)?;
    let mut outcome = Outcome::new();
    let path = match cfg.format {
        Format::Csv => {
            let path = out_or(out, cfg, "traj.csv");
            write_trajectory(&path, &traj, cfg.grid)?;
            path
        }
        Format::Json => {
            let path = out_or(out, cfg, "traj.json");
            let doc = TrajectoryJson {
                version: VERSION,
                lambda,
                n,
                x0: ic.to_string(),
                settle_time: settle,
                times: traj.times().to_vec(),
                states: (0..traj.len()).map(|i| traj.state(i).into_inner()).collect(),
            };
            write_json(&path, &doc)?;
            path
        }
    };
    outcome.summary.push(format!(
        "lambda={lambda} n={n} x0={ic}: |x|_1 below {:e} at t={settle:.6} after {} steps",
        cfg.integrator.settle_tol,
        traj.len().saturating_sub(1)
    ));
    outcome.files.push(path);
    Ok(outcome)
}

/// `n` values for sweeps: the fixed `n`, or the auto truncation of each `M`.
fn sweep_levels(cfg: &ExperimentConfig, lambda: f64) -> Result<Vec<usize>> {
    let mut ns = Vec::new();
    for &m in &cfg.servers {
        let n = cfg.n.resolve(lambda, Some(m))?;
        if !ns.contains(&n) {
            ns.push(n);
        }
    }
    Ok(ns)
}

/// Starting points for a sweep: the configured `x0` first, then
/// `probes - 1` random ones (or `probes` random ones when `x0` is
/// itself random).
fn sweep_starts(cfg: &ExperimentConfig) -> Result<Vec<InitialCondition>> {
    let ic = cfg.initial_condition()?;
    let mut out = Vec::new();
    let random = matches!(ic, InitialCondition::Random(_));
    if !random {
        out.push(ic);
    }
    let seed0 = cfg.seed.wrapping_mul(1_000_003);
    let mut i = 0u64;
    while out.len() < cfg.probes {
        out.push(InitialCondition::Random(Some(seed0.wrapping_add(i))));
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct DecayEntry {
    pub lambda: f64,
    pub n: usize,
    pub x0: String,
    pub settle_time: f64,
    pub base: DecayReport,
    pub tilde: DecayReport,
}

#[derive(Debug, Serialize)]
pub struct DecayDocument {
    pub version: String,
    pub regimes: Vec<RegimeEntry>,
    pub entries: Vec<DecayEntry>,
}

#[derive(Debug, Serialize)]
pub struct RegimeEntry {
    pub lambda: f64,
    pub n: usize,
    pub k_lambda: usize,
    pub k_tilde: usize,
    pub base: RegimeReport,
    pub tilde: RegimeReport,
}

/// Checks that the weighted ℓ1 functions decay at their certified rates on
/// trajectories from every sweep start.
pub fn run_lyapunov_check(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let starts = sweep_starts(cfg)?;
    let mut doc = DecayDocument {
        version: VERSION.into(),
        regimes: Vec::new(),
        entries: Vec::new(),
    };
    let mut outcome = Outcome::new();
    for &lambda in &cfg.lambda {
        for n in sweep_levels(cfg, lambda)? {
            let base = base_weights(lambda, n)?;
            let tilde = tilde_weights(lambda, n)?;
            doc.regimes.push(RegimeEntry {
                lambda,
                n,
                k_lambda: base.threshold,
                k_tilde: tilde.threshold,
                base: base.regime.clone(),
                tilde: tilde.regime.clone(),
            });
            let mut worst: f64 = 0.0;
            for ic in &starts {
                let x0 = ic.resolve(lambda, n, cfg.seed)?;
                let (traj, settle) = solve_to_equilibrium(&x0, lambda, n, &cfg.integrator)?;
                let b = verify_decay(&traj, &base, 0.0)?;
                let t = verify_decay(&traj, &tilde, 0.0)?;
                worst = worst.max(b.max_ratio).max(t.max_ratio);
                for r in [&b, &t] {
                    if !r.passed {
                        outcome.failures.push(format!(
                            "lambda={lambda} n={n} x0={ic}: {:?} weights, max ratio {}",
                            r.variant, r.max_ratio
                        ));
                    }
                }
                doc.entries.push(DecayEntry {
                    lambda,
                    n,
                    x0: ic.to_string(),
                    settle_time: settle,
                    base: b,
                    tilde: t,
                });
            }
            outcome.summary.push(format!(
                "lambda={lambda} n={n}: {} starts, worst V(t)e^(rate t)/V(0) = {worst:.9}, \
                 case inequalities {}",
                starts.len(),
                if base.regime.certified && tilde.regime.certified {
                    "hold"
                } else {
                    "violated (decay checked numerically only)"
                }
            ));
        }
    }
    let path = out_or(out, cfg, "decay_report.json");
    write_json(&path, &doc)?;
    outcome.files.push(path);
    Ok(outcome)
}

#[derive(Debug, Serialize)]
pub struct PerturbEntry {
    pub lambda: f64,
    pub n: usize,
    pub x0: String,
    pub direction: Vec<f64>,
    pub envelope: EnvelopeReport,
    pub regime_certified: bool,
    pub remainders: Vec<RemainderReport>,
    /// `∫|e|` ratios of consecutive epsilons over `(ε_i/ε_{i+1})²`.
    pub normalized_ratios: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct PerturbDocument {
    pub version: String,
    pub entries: Vec<PerturbEntry>,
}

/// Band on `∫|e|` ratios relative to `(ε_i/ε_{i+1})²`.
pub const REMAINDER_RATIO_BAND: (f64, f64) = (0.8, 1.2);

/// Sensitivity envelope and second-order remainder checks from `x0` along
/// the first coordinate direction, with `M = 1/ε` for each configured `ε`.
pub fn run_perturb_check(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let ic = cfg.initial_condition()?;
    let mut doc = PerturbDocument {
        version: VERSION.into(),
        entries: Vec::new(),
    };
    let mut outcome = Outcome::new();
    let mut eps = cfg.epsilon.clone();
    eps.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    for &lambda in &cfg.lambda {
        for n in sweep_levels(cfg, lambda)? {
            let x0 = ic.resolve(lambda, n, cfg.seed)?;
            let cert = tilde_weights(lambda, n)?;
            let mut z = vec![0.0; n];
            z[0] = 1.0;
            let sens = integrate_sensitivity(&SensitivitySetup::new(x0.clone(), z.clone(), 0.0), lambda, n, &cfg.integrator)?;
            let envelope = sensitivity_envelope_check(&sens, &cert)?;
            if !envelope.passed {
                outcome.failures.push(format!(
                    "lambda={lambda} n={n}: sensitivity envelope exceeded by {}",
                    envelope.max_excess
                ));
            }
            let mut remainders = Vec::new();
            for &e in &eps {
                let rem = remainder(&SensitivitySetup::new(x0.clone(), z.clone(), e), lambda, n, &cfg.integrator)?;
                let report = remainder_bound_check(&rem, &cert, 1.0 / e)?;
                if cert.regime.certified && !report.passed {
                    outcome.failures.push(format!(
                        "lambda={lambda} n={n} eps={e}: remainder bounds violated"
                    ));
                }
                remainders.push(report);
            }
            let normalized: Vec<f64> = remainders
                .windows(2)
                .map(|w| (w[0].l1_integral / w[1].l1_integral) / (w[0].epsilon / w[1].epsilon).powi(2))
                .collect();
            for q in &normalized {
                if !(REMAINDER_RATIO_BAND.0..=REMAINDER_RATIO_BAND.1).contains(q) {
                    outcome.failures.push(format!(
                        "lambda={lambda} n={n}: remainder integral not quadratic in eps (normalized ratio {q})"
                    ));
                }
            }
            outcome.summary.push(format!(
                "lambda={lambda} n={n}: envelope {}, remainder integrals {:?}, normalized ratios {:?}",
                if envelope.passed { "ok" } else { "FAILED" },
                remainders.iter().map(|r| r.l1_integral).collect::<Vec<_>>(),
                normalized
            ));
            doc.entries.push(PerturbEntry {
                lambda,
                n,
                x0: ic.to_string(),
                direction: z,
                envelope,
                regime_certified: cert.regime.certified,
                remainders,
                normalized_ratios: normalized,
            });
        }
    }
    let path = out_or(out, cfg, "perturb_report.json");
    write_json(&path, &doc)?;
    outcome.files.push(path);
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct SteinDocument {
    version: &'static str,
    stream: u64,
    report: SteinReport,
}

/// Stationary basic adjoint relation and error decomposition at one
/// `(λ, M, n)`.
pub fn run_stein_check(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let lambda = single_lambda(cfg, "stein-check")?;
    let m = match cfg.servers.as_slice() {
        [m] => *m,
        _ => return Err(HarnessError::config("stein-check takes exactly one M")),
    };
    let n = cfg.n.resolve(lambda, Some(m))?;
    let params = ModelParams::new(lambda, m)?;
    let sim = cfg.sim.sim_config(cfg.seed, 0, n);
    let report = stein_decomposition(&params, &sim, n, &cfg.stein_config())?;
    let mut outcome = Outcome::new();
    if !report.bar_holds() {
        outcome.failures.push(format!(
            "mean generator term {} is {:.2} half-widths from zero",
            report.bar_residual.mean, report.bar_residual_in_ci
        ));
    }
    if !report.identity_holds() {
        outcome.failures.push(format!(
            "decomposition residual {} is {:.2} half-widths from zero",
            report.identity_residual.mean, report.identity_residual_in_ci
        ));
    }
    outcome.summary.push(format!(
        "lambda={lambda} M={m} n={n}: {} states ({} distinct), E[sum x^2]={:.4e}, \
         second-order={:.4e}, truncation={:.4e}, generator mean {:.2} hw, identity {:.2} hw",
        report.samples,
        report.distinct_states,
        report.lhs_mse.mean,
        report.second_order_term.mean,
        report.truncation_term.mean,
        report.bar_residual_in_ci,
        report.identity_residual_in_ci
    ));
    let path = out_or(out, cfg, "stein_report.json");
    write_json(
        &path,
        &SteinDocument {
            version: VERSION,
            stream: sim.stream,
            report,
        },
    )?;
    outcome.files.push(path);
    Ok(outcome)
}

/// Writes `rate_study.csv` and `summary.json` into the output directory.
pub fn run_rate_study(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    let result = rate_study(cfg)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let csv_path = dir.join("rate_study.csv");
    let mut w = create(&csv_path)?;
    result
        .write_csv(&mut w)
        .and_then(|_| std::io::Write::flush(&mut w))
        .map_err(|e| HarnessError::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    write_json(&json_path, &result)?;
    let mut outcome = Outcome::new();
    for r in &result.rows {
        if let Some(e) = &r.error {
            outcome
                .failures
                .push(format!("lambda={} M={}: {e}", r.lambda, r.servers));
        }
    }
    for f in &result.fits {
        outcome.summary.push(format!(
            "lambda={}: slope {:.4} ± {:.4}, log-corrected slope {:.4} ± {:.4}",
            f.lambda, f.slope, f.slope_stderr, f.corrected_slope, f.corrected_slope_stderr
        ));
    }
    outcome.files.push(csv_path);
    outcome.files.push(json_path);
    Ok(outcome)
}
