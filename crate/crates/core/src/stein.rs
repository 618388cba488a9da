//! The Poisson-equation solution `g(x) = -∫_0^∞ Σ_k x_k(t, x)^2 dt` of the
//! truncated flow, the chain generator applied to `g`, and stationary checks
//! of the basic adjoint relation `E[G_M g] = 0` and of the error
//! decomposition
//!
//! `E[Σ x_k^2] = E[-∂g/∂x_n · x_{n+1}] + E[-Σ_y q(x,y) (g(y) - g(x) - ∇g(x)·(y - x))]`.
//!
//! Every quantity is computed by integrating the flow together with
//! running integrals. Differences `g(y) - g(x)` and second-order residuals
//! for a neighbor `y = x ± 1_k/M` come from one augmented solve of
//! `(x⁰, x¹, u)` as in [`crate::perturbation`], which avoids subtracting two
//! nearly equal values of `g`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{
    increment_rhs, increment_rhs_with, linearized_rhs_with, solve_until, validate_initial,
    IntegratorConfig,
};
use crate::model::{equilibrium, equilibrium_level, ModelParams, OccupancyState, ShiftedState, TailState};
use crate::ode::{OdeSystem, DenseSolution};
use crate::simulator::{sample_states, transition_rates, EventKind, SimConfig};
use crate::stats::{fit_line, MeanCi};

/// `g(x)` with the accuracy bookkeeping of its evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GEvaluation {
    pub value: f64,
    pub settle_time: f64,
    pub quadrature_error_estimate: f64,
}

/// `[x, q]` with `q' = Σ x_k^2`.
struct ValueSystem {
    lambda: f64,
    star: Vec<f64>,
}

impl OdeSystem for ValueSystem {
    fn dim(&self) -> usize {
        self.star.len() + 1
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.star.len();
        increment_rhs(self.lambda, &self.star, &y[..n], &mut dy[..n]);
        dy[n] = y[..n].iter().map(|v| v * v).sum();
    }
}

/// `[x⁰, x¹, p]` with `p' = Σ 2 x⁰_k x¹_k`.
struct GradientSystem {
    lambda: f64,
    star: Vec<f64>,
}

impl OdeSystem for GradientSystem {
    fn dim(&self) -> usize {
        2 * self.star.len() + 1
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.star.len();
        let (x0, x1) = (&y[..n], &y[n..2 * n]);
        increment_rhs(self.lambda, &self.star, x0, &mut dy[..n]);
        let star = &self.star;
        linearized_rhs_with(self.lambda, |k| x0[k] + star[k], x1, &mut dy[n..2 * n]);
        dy[2 * n] = x0.iter().zip(x1).map(|(a, b)| 2.0 * a * b).sum();
    }
}

/// `[x⁰, x¹, u, a, b, c]` for a neighbor `x + εz`:
/// `a' = Σ (u² + 2x⁰u)` gives `g(y) - g(x) = -a`,
/// `b' = Σ 2x⁰x¹` gives `∇g·z = -b`,
/// `c' = Σ (u² + 2x⁰(u - εx¹))` gives the second-order residual `-c`.
struct NeighborSystem {
    lambda: f64,
    epsilon: f64,
    star: Vec<f64>,
}

impl OdeSystem for NeighborSystem {
    fn dim(&self) -> usize {
        3 * self.star.len() + 3
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.star.len();
        let (x0, x1, u) = (&y[..n], &y[n..2 * n], &y[2 * n..3 * n]);
        increment_rhs(self.lambda, &self.star, x0, &mut dy[..n]);
        let star = &self.star;
        let base = |k: usize| x0[k] + star[k];
        linearized_rhs_with(self.lambda, base, x1, &mut dy[n..2 * n]);
        increment_rhs_with(self.lambda, base, u, &mut dy[2 * n..3 * n]);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let e = u[k] - self.epsilon * x1[k];
            a += u[k] * (u[k] + 2.0 * x0[k]);
            b += 2.0 * x0[k] * x1[k];
            c += u[k] * u[k] + 2.0 * x0[k] * e;
        }
        dy[3 * n] = a;
        dy[3 * n + 1] = b;
        dy[3 * n + 2] = c;
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Exponential decay rate of `|x|₁` fitted on the last third of the steps.
fn fitted_rate(sol: &DenseSolution, n: usize) -> Option<f64> {
    let len = sol.len();
    if len < 6 {
        return None;
    }
    let (mut ts, mut ls) = (Vec::new(), Vec::new());
    for i in (2 * len / 3)..len {
        let v = l1(&sol.state(i)[..n]);
        if v > 0.0 {
            ts.push(sol.times()[i]);
            ls.push(v.ln());
        }
    }
    fit_line(&ts, &ls).map(|f| -f.slope).filter(|r| *r > 0.0)
}

fn check_input(x: &ShiftedState, lambda: f64, n: usize, cfg: &IntegratorConfig) -> Result<()> {
    cfg.validate()?;
    validate_initial(x, lambda, n)
}

/// `g(x)`: integrates the flow from `x` until `|x(t)|₁ < settle_tol` and
/// accumulates `Σ x_k^2`. The error estimate adds the integrator tolerance
/// budget to an exponential bound on the neglected tail.
pub fn g_value(x: &ShiftedState, lambda: f64, n: usize, cfg: &IntegratorConfig) -> Result<GEvaluation> {
    check_input(x, lambda, n, cfg)?;
    let sys = ValueSystem {
        lambda,
        star: equilibrium(lambda, n)?,
    };
    let mut y0 = x.as_slice().to_vec();
    y0.push(0.0);
    let (sol, settle) = solve_until(&sys, &y0, cfg.horizon(lambda, n), cfg, 0.0, |y| l1(&y[..n]))?;
    let end = sol.last_state();
    let q = end[n];
    let rate = fitted_rate(&sol, n).unwrap_or(crate::lyapunov::base_rate(lambda, n));
    let sq_end: f64 = end[..n].iter().map(|v| v * v).sum();
    Ok(GEvaluation {
        value: -q,
        settle_time: settle,
        quadrature_error_estimate: sq_end / (2.0 * rate) + cfg.rel_tol * q.abs() + cfg.abs_tol * settle,
    })
}

/// `∇g(x)·v = -∫ Σ 2 x_k(t) x¹_k(t) dt` with `x¹(0) = v`.
pub fn g_gradient_dir(
    x: &ShiftedState,
    v: &[f64],
    lambda: f64,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    check_input(x, lambda, n, cfg)?;
    if v.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: v.len() });
    }
    let sys = GradientSystem {
        lambda,
        star: equilibrium(lambda, n)?,
    };
    let mut y0 = x.as_slice().to_vec();
    y0.extend_from_slice(v);
    y0.push(0.0);
    let (sol, _) = solve_until(&sys, &y0, cfg.horizon(lambda, n), cfg, 0.0, |y| l1(&y[..2 * n]))?;
    Ok(-sol.last_state()[2 * n])
}

/// First-order and second-order pieces of `g(x + εz) - g(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborIncrement {
    /// `g(x + εz) - g(x)`.
    pub difference: f64,
    /// `∇g(x)·z`.
    pub gradient: f64,
    /// `g(x + εz) - g(x) - ε ∇g(x)·z`.
    pub residual: f64,
}

/// Evaluates [`NeighborIncrement`] with one augmented solve.
pub fn neighbor_increment(
    x: &ShiftedState,
    z: &[f64],
    epsilon: f64,
    lambda: f64,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<NeighborIncrement> {
    check_input(x, lambda, n, cfg)?;
    if z.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: z.len() });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::domain("epsilon must be positive"));
    }
    let sys = NeighborSystem {
        lambda,
        epsilon,
        star: equilibrium(lambda, n)?,
    };
    let mut y0 = x.as_slice().to_vec();
    y0.extend_from_slice(z);
    y0.extend(z.iter().map(|v| epsilon * v));
    y0.extend([0.0, 0.0, 0.0]);
    let measure = |y: &[f64]| l1(&y[..2 * n]) + l1(&y[2 * n..3 * n]) / epsilon;
    let (sol, _) = solve_until(&sys, &y0, cfg.horizon(lambda, n), cfg, 0.0, measure)?;
    let end = sol.last_state();
    Ok(NeighborIncrement {
        difference: -end[3 * n],
        gradient: -end[3 * n + 1],
        residual: -end[3 * n + 2],
    })
}

fn quantized_counts(s: &TailState, servers: usize) -> Result<Vec<u64>> {
    let m = servers as f64;
    let mut tails = vec![servers as u64];
    for (k, &v) in s.as_slice().iter().enumerate() {
        let c = v * m;
        let r = c.round();
        if (c - r).abs() > 1e-9 * m.max(1.0) || !(0.0..=m).contains(&r) {
            return Err(Error::domain(format!(
                "s_{} = {v} is not a multiple of 1/{servers}",
                k + 1
            )));
        }
        tails.push(r as u64);
    }
    Ok(tails)
}

fn occupancy_from_tail(s: &TailState, servers: usize) -> Result<OccupancyState> {
    OccupancyState::from_tail_counts(&quantized_counts(s, servers)?)
}

/// Transitions out of an `M`-quantized tail state: `(rate, neighbor)` for
/// every arrival level `k` with `s_{k-1} > s_k` and departure level `k` with
/// `s_k > s_{k+1}`. Neighbors are padded to include a newly occupied level.
pub fn generator_neighbors(s: &TailState, params: &ModelParams) -> Result<Vec<(f64, TailState)>> {
    params.validate()?;
    let occ = occupancy_from_tail(s, params.servers)?;
    let m = params.servers as f64;
    let base = s.as_slice();
    let mut out = Vec::new();
    for (event, rate) in transition_rates(&occ, params) {
        let k = event.level;
        let mut y = base.to_vec();
        if y.len() < k {
            y.resize(k, 0.0);
        }
        match event.kind {
            EventKind::Arrival => y[k - 1] += 1.0 / m,
            EventKind::Departure => y[k - 1] -= 1.0 / m,
        }
        out.push((rate, TailState::new_unchecked(y)));
    }
    Ok(out)
}

/// Everything the stationary checks need at one chain state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTerms {
    /// `Σ_{k<=n} x_k^2`.
    pub lhs: f64,
    /// `-∂g/∂x_n · x_{n+1}`.
    pub truncation: f64,
    /// `-Σ_y q(x,y) (g(y) - g(x) - ∇g·(y - x))`.
    pub second_order: f64,
    /// `G_M g(x) = Σ_y q(x,y) (g(y) - g(x))`.
    pub generator: f64,
    pub grad_n: f64,
    pub x_next: f64,
}

impl StateTerms {
    /// `lhs - truncation - second_order`; equals `G_M g(x)` up to the error
    /// in solving the Poisson equation.
    pub fn identity_residual(&self) -> f64 {
        self.lhs - self.truncation - self.second_order
    }
}

/// Settings for the stationary Stein checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteinConfig {
    pub integrator: IntegratorConfig,
    /// Expected number of inspected states.
    pub samples: usize,
    /// Hard cap on inspected states; reaching it flags the result partial.
    pub max_samples: usize,
}

impl Default for SteinConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::default(),
            samples: 200,
            max_samples: 400,
        }
    }
}

/// Memoized per-state evaluation of [`StateTerms`]. The table is shared by
/// worker threads: lookups take a read lock, inserts a write lock.
pub struct SteinEvaluator {
    params: ModelParams,
    n: usize,
    cfg: IntegratorConfig,
    star_next: f64,
    memo: RwLock<HashMap<Vec<u64>, Arc<StateTerms>>>,
}

impl SteinEvaluator {
    pub fn new(params: &ModelParams, n: usize, cfg: &IntegratorConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        if params.choices != 2 {
            return Err(Error::domain("the Stein decomposition is set up for d = 2"));
        }
        if n == 0 {
            return Err(Error::domain("n must be at least 1"));
        }
        Ok(Self {
            params: *params,
            n,
            cfg: *cfg,
            star_next: equilibrium_level(params.lambda, n + 1),
            memo: RwLock::new(HashMap::new()),
        })
    }

    pub fn memo_len(&self) -> usize {
        self.memo.read().expect("memo lock").len()
    }

    fn key(&self, occ: &OccupancyState) -> Vec<u64> {
        let mut t = occ.tail_counts();
        t.resize(self.n + 2, 0);
        t
    }

    pub fn terms(&self, occ: &OccupancyState) -> Result<StateTerms> {
        if occ.servers() != self.params.servers as u64 {
            return Err(Error::InvalidState("occupancy has the wrong server count".into()));
        }
        let key = self.key(occ);
        if let Some(hit) = self.memo.read().expect("memo lock").get(&key) {
            return Ok(**hit);
        }
        let terms = self.compute(&key)?;
        self.memo
            .write()
            .expect("memo lock")
            .insert(key, Arc::new(terms));
        Ok(terms)
    }

    fn compute(&self, tails: &[u64]) -> Result<StateTerms> {
        let (lambda, n) = (self.params.lambda, self.n);
        let m = self.params.servers as f64;
        let star = equilibrium(lambda, n)?;
        let x = ShiftedState::new((1..=n).map(|k| tails[k] as f64 / m - star[k - 1]).collect());
        let x_next = tails[n + 1] as f64 / m - self.star_next;
        let lhs: f64 = x.as_slice().iter().map(|v| v * v).sum();
        let mut unit = vec![0.0; n];
        unit[n - 1] = 1.0;
        let grad_n = g_gradient_dir(&x, &unit, lambda, n, &self.cfg)?;
        let occ = OccupancyState::from_tail_counts(tails)?;
        let eps = 1.0 / m;
        let (mut generator, mut second) = (0.0, 0.0);
        for (event, rate) in transition_rates(&occ, &self.params) {
            let k = event.level;
            if k > n {
                // the neighbor agrees with x on the first n levels
                continue;
            }
            let mut z = vec![0.0; n];
            z[k - 1] = match event.kind {
                EventKind::Arrival => 1.0,
                EventKind::Departure => -1.0,
            };
            let inc = neighbor_increment(&x, &z, eps, lambda, n, &self.cfg)?;
            generator += rate * inc.difference;
            second -= rate * inc.residual;
        }
        Ok(StateTerms {
            lhs,
            truncation: -grad_n * x_next,
            second_order: second,
            generator,
            grad_n,
            x_next,
        })
    }
}

/// `G_M g` at an `M`-quantized tail state, with `g` evaluated on the
/// first `n` shifted coordinates.
pub fn generator_apply_g(
    s: &TailState,
    params: &ModelParams,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let occ = occupancy_from_tail(s, params.servers)?;
    Ok(SteinEvaluator::new(params, n, cfg)?.terms(&occ)?.generator)
}

/// Time-stationary sample of chain states with their [`StateTerms`].
#[derive(Debug, Clone)]
pub struct SteinSample {
    pub times: Vec<f64>,
    pub terms: Vec<StateTerms>,
    pub window: (f64, f64),
    pub partial: bool,
    pub distinct_states: usize,
}

/// Samples a stationary run at exponential inspection times and evaluates
/// every distinct state in parallel.
pub fn stein_sample(
    params: &ModelParams,
    sim: &SimConfig,
    n: usize,
    cfg: &SteinConfig,
) -> Result<SteinSample> {
    let eval = SteinEvaluator::new(params, n, &cfg.integrator)?;
    let sample = sample_states(params, sim, cfg.samples, cfg.max_samples.max(cfg.samples))?;
    let terms = sample
        .states
        .par_iter()
        .map(|occ| eval.terms(occ))
        .collect::<Result<Vec<_>>>()?;
    Ok(SteinSample {
        times: sample.times,
        terms,
        window: sample.window,
        partial: sample.partial,
        distinct_states: eval.memo_len(),
    })
}

impl SteinSample {
    /// Batch means over equal time windows; empty windows are skipped.
    pub fn summarize<F: Fn(&StateTerms) -> f64>(&self, batches: usize, f: F) -> MeanCi {
        let (a, b) = self.window;
        let width = (b - a) / batches.max(1) as f64;
        let mut sums = vec![(0.0, 0usize); batches.max(1)];
        for (t, terms) in self.times.iter().zip(&self.terms) {
            let i = (((t - a) / width) as usize).min(sums.len() - 1);
            sums[i].0 += f(terms);
            sums[i].1 += 1;
        }
        let means: Vec<f64> = sums
            .iter()
            .filter(|(_, c)| *c > 0)
            .map(|(s, c)| s / *c as f64)
            .collect();
        let mut out = MeanCi::from_samples(&means);
        if !self.terms.is_empty() {
            out.mean = self.terms.iter().map(&f).sum::<f64>() / self.terms.len() as f64;
        }
        out
    }
}

/// Stationary average of `G_M g` with a batch-means CI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarResult {
    pub mean: f64,
    pub ci: f64,
    pub samples: usize,
    pub partial: bool,
}

impl BarResult {
    /// `|mean| <= 3 ci`.
    pub fn consistent_with_zero(&self) -> bool {
        self.mean.abs() <= 3.0 * self.ci
    }
}

pub fn bar_check(params: &ModelParams, sim: &SimConfig, n: usize, cfg: &SteinConfig) -> Result<BarResult> {
    let sample = stein_sample(params, sim, n, cfg)?;
    let s = sample.summarize(sim.batches, |t| t.generator);
    Ok(BarResult {
        mean: s.mean,
        ci: s.ci,
        samples: sample.terms.len(),
        partial: sample.partial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinReport {
    pub lambda: f64,
    pub servers: usize,
    pub n: usize,
    pub seed: u64,
    pub samples: usize,
    pub distinct_states: usize,
    pub partial: bool,
    pub lhs_mse: MeanCi,
    pub truncation_term: MeanCi,
    pub second_order_term: MeanCi,
    pub bar_residual: MeanCi,
    /// Paired `lhs - truncation - second_order` per sampled state.
    pub identity_residual: MeanCi,
    /// `|identity_residual.mean| / identity_residual.ci`.
    pub identity_residual_in_ci: f64,
    pub bar_residual_in_ci: f64,
    /// Sample mean of `|x_{n+1}|`.
    pub mean_abs_x_next: f64,
    /// Largest `|∂g/∂x_n|` seen.
    pub max_abs_grad_n: f64,
}

impl SteinReport {
    pub fn identity_holds(&self) -> bool {
        self.identity_residual_in_ci <= 3.0
    }

    pub fn bar_holds(&self) -> bool {
        self.bar_residual_in_ci <= 3.0
    }
}

pub fn stein_decomposition(
    params: &ModelParams,
    sim: &SimConfig,
    n: usize,
    cfg: &SteinConfig,
) -> Result<SteinReport> {
    let sample = stein_sample(params, sim, n, cfg)?;
    Ok(report_from_sample(params, sim, n, &sample))
}

pub fn report_from_sample(params: &ModelParams, sim: &SimConfig, n: usize, sample: &SteinSample) -> SteinReport {
    let b = sim.batches;
    let bar = sample.summarize(b, |t| t.generator);
    let ident = sample.summarize(b, |t| t.identity_residual());
    let in_ci = |m: &MeanCi| {
        if m.mean == 0.0 {
            0.0
        } else {
            m.mean.abs() / m.ci
        }
    };
    let count = sample.terms.len().max(1) as f64;
    SteinReport {
        lambda: params.lambda,
        servers: params.servers,
        n,
        seed: sim.seed,
        samples: sample.terms.len(),
        distinct_states: sample.distinct_states,
        partial: sample.partial,
        lhs_mse: sample.summarize(b, |t| t.lhs),
        truncation_term: sample.summarize(b, |t| t.truncation),
        second_order_term: sample.summarize(b, |t| t.second_order),
        identity_residual_in_ci: in_ci(&ident),
        bar_residual_in_ci: in_ci(&bar),
        bar_residual: bar,
        identity_residual: ident,
        mean_abs_x_next: sample.terms.iter().map(|t| t.x_next.abs()).sum::<f64>() / count,
        max_abs_grad_n: sample.terms.iter().map(|t| t.grad_n.abs()).fold(0.0, f64::max),
    }
}
