//! First-order sensitivity of the shifted flow and its Taylor remainder.
//!
//! For a nominal start `x` and a direction `z`, the perturbed solution from
//! `x + εz` splits as `x(t, ε) = x⁰(t) + ε x¹(t) + e(t)` where `x¹` solves
//! the variational system along `x⁰`. All three are integrated together as
//! one augmented system `(x⁰, x¹, u)` with `u = x(t, ε) - x⁰(t)`, so they share
//! one step sequence and `e = u - ε x¹` is formed without subtracting two
//! `O(1)` quantities. `e(0) = εz - εz = 0` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyapunov::{self, LyapunovCert};
use crate::meanfield::{
    increment_rhs, increment_rhs_with, linearized_rhs_with, solve_until, validate_initial,
    IntegratorConfig,
};
use crate::model::{check_lambda, equilibrium, ShiftedState};
use crate::ode::{self, Control, DenseCurve, DenseSolution, OdeSystem, StepStats};
use crate::quadrature::adaptive_simpson;

/// Tridiagonal matrix stored by diagonals; `sub[0]` and `sup[n-1]` are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|k| {
                let mut acc = self.diag[k] * v[k];
                if k > 0 {
                    acc += self.sub[k] * v[k - 1];
                }
                if k + 1 < n {
                    acc += self.sup[k] * v[k + 1];
                }
                acc
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut rows = vec![vec![0.0; n]; n];
        for k in 0..n {
            rows[k][k] = self.diag[k];
            if k > 0 {
                rows[k][k - 1] = self.sub[k];
            }
            if k + 1 < n {
                rows[k][k + 1] = self.sup[k];
            }
        }
        rows
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.sub[k] + self.diag[k] + self.sup[k])
            .collect()
    }
}

/// Jacobian of the shifted right-hand side at `x`.
pub fn jacobian(x: &ShiftedState, lambda: f64, n: usize) -> Result<Tridiagonal> {
    check_lambda(lambda)?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    if x.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let star = equilibrium(lambda, n)?;
    let b: Vec<f64> = x.as_slice().iter().zip(&star).map(|(a, s)| a + s).collect();
    let mut sub = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for k in 1..n {
        sub[k] = 2.0 * lambda * b[k - 1];
        sup[k - 1] = 1.0;
    }
    let diag = b.iter().map(|bk| -2.0 * lambda * bk - 1.0).collect();
    Ok(Tridiagonal { sub, diag, sup })
}

/// Nominal start, perturbation direction and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySetup {
    pub x0: ShiftedState,
    pub z: Vec<f64>,
    /// `ε`, typically `1/M`. Zero skips the perturbed solution.
    pub epsilon: f64,
}

impl SensitivitySetup {
    pub fn new(x0: ShiftedState, z: Vec<f64>, epsilon: f64) -> Self {
        Self { x0, z, epsilon }
    }

    /// Unit direction `1_j` (1-based level `j`).
    pub fn unit(x0: ShiftedState, j: usize, epsilon: f64) -> Self {
        let mut z = vec![0.0; x0.len()];
        z[j - 1] = 1.0;
        Self { x0, z, epsilon }
    }

    pub fn z_norm(&self) -> f64 {
        self.z.iter().map(|v| v.abs()).sum()
    }

    fn validate(&self, lambda: f64, n: usize) -> Result<()> {
        validate_initial(&self.x0, lambda, n)?;
        if self.z.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: self.z.len(),
            });
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("direction z must be finite"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::domain(format!(
                "epsilon must be a finite nonnegative number, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `(x⁰, x¹)` or `(x⁰, x¹, u)` stacked into one state vector.
pub(crate) struct AugmentedSystem {
    lambda: f64,
    star: Vec<f64>,
    perturbed: bool,
}

impl AugmentedSystem {
    pub(crate) fn new(lambda: f64, n: usize, perturbed: bool) -> Result<Self> {
        Ok(Self {
            lambda,
            star: equilibrium(lambda, n)?,
            perturbed,
        })
    }
}

impl OdeSystem for AugmentedSystem {
    fn dim(&self) -> usize {
        self.star.len() * if self.perturbed { 3 } else { 2 }
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.star.len();
        let (x0, rest) = y.split_at(n);
        let (dx0, drest) = dy.split_at_mut(n);
        increment_rhs(self.lambda, &self.star, x0, dx0);
        let star = &self.star;
        let base = |k: usize| x0[k] + star[k];
        linearized_rhs_with(self.lambda, base, &rest[..n], &mut drest[..n]);
        if self.perturbed {
            increment_rhs_with(self.lambda, base, &rest[n..], &mut drest[n..]);
        }
    }
}

/// Jointly integrated nominal, sensitivity and (optionally) perturbed
/// trajectories.
#[derive(Debug, Clone)]
pub struct AugmentedTrajectory {
    lambda: f64,
    n: usize,
    setup: SensitivitySetup,
    perturbed: bool,
    sol: DenseSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Nominal,
    Sensitivity,
    Perturbed,
    Remainder,
}

/// One component of an [`AugmentedTrajectory`] as a [`DenseCurve`].
pub struct ComponentView<'a> {
    traj: &'a AugmentedTrajectory,
    which: Component,
}

impl AugmentedTrajectory {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn setup(&self) -> &SensitivitySetup {
        &self.setup
    }

    pub fn has_perturbed(&self) -> bool {
        self.perturbed
    }

    pub fn times(&self) -> &[f64] {
        self.sol.times()
    }

    pub fn stats(&self) -> StepStats {
        self.sol.stats()
    }

    pub fn t_end(&self) -> f64 {
        self.sol.t_end()
    }

    pub fn nominal(&self) -> ComponentView<'_> {
        self.view(Component::Nominal)
    }

    pub fn sensitivity(&self) -> ComponentView<'_> {
        self.view(Component::Sensitivity)
    }

    /// Perturbed solution `x(t, ε)`; requires `ε > 0`.
    pub fn perturbed(&self) -> Option<ComponentView<'_>> {
        self.perturbed.then(|| self.view(Component::Perturbed))
    }

    /// Remainder `e(t)`; requires `ε > 0`.
    pub fn remainder(&self) -> Option<ComponentView<'_>> {
        self.perturbed.then(|| self.view(Component::Remainder))
    }

    fn view(&self, which: Component) -> ComponentView<'_> {
        ComponentView { traj: self, which }
    }

    fn extract(&self, which: Component, y: &[f64], out: &mut [f64]) {
        let n = self.n;
        let eps = self.setup.epsilon;
        for k in 0..n {
            out[k] = match which {
                Component::Nominal => y[k],
                Component::Sensitivity => y[n + k],
                Component::Perturbed => y[k] + y[2 * n + k],
                Component::Remainder => y[2 * n + k] - eps * y[n + k],
            };
        }
    }

    /// Remainder at the `i`-th stored step point.
    pub fn remainder_at_step(&self, i: usize) -> Option<Vec<f64>> {
        if !self.perturbed {
            return None;
        }
        let mut out = vec![0.0; self.n];
        self.extract(Component::Remainder, self.sol.state(i), &mut out);
        Some(out)
    }

    /// `Σ_k |c_k(t)|` for one component at a stored step point.
    pub fn l1_at_step(&self, which: Component, i: usize) -> f64 {
        let mut out = vec![0.0; self.n];
        self.extract(which, self.sol.state(i), &mut out);
        out.iter().map(|v| v.abs()).sum()
    }
}

impl DenseCurve for ComponentView<'_> {
    fn dim(&self) -> usize {
        self.traj.n
    }

    fn t_start(&self) -> f64 {
        self.traj.sol.times()[0]
    }

    fn t_end(&self) -> f64 {
        self.traj.sol.t_end()
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let y = self.traj.sol.eval(t);
        self.traj.extract(self.which, &y, out);
    }
}

fn augmented_start(setup: &SensitivitySetup, perturbed: bool) -> Vec<f64> {
    let mut y0 = setup.x0.as_slice().to_vec();
    y0.extend_from_slice(&setup.z);
    if perturbed {
        y0.extend(setup.z.iter().map(|v| setup.epsilon * v));
    }
    y0
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Integrates `(x⁰, x¹)` and, when `ε > 0`, the perturbed solution. With an
/// explicit `t_max` the horizon is fixed; otherwise integration stops once
/// every component has settled below `settle_tol` (the perturbed offset
/// measured in units of `ε`).
pub fn integrate_sensitivity(
    setup: &SensitivitySetup,
    lambda: f64,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<AugmentedTrajectory> {
    cfg.validate()?;
    setup.validate(lambda, n)?;
    let perturbed = setup.epsilon > 0.0;
    let sys = AugmentedSystem::new(lambda, n, perturbed)?;
    let y0 = augmented_start(setup, perturbed);
    let sol = match cfg.t_max {
        Some(t_max) => ode::integrate(&sys, 0.0, &y0, t_max, &cfg.step_control(), |_, _| {
            Control::Continue
        })?,
        None => {
            let horizon = cfg.horizon(lambda, n);
            solve_until(&sys, &y0, horizon, cfg, 0.0, settle_measure(n, setup.epsilon))?.0
        }
    };
    Ok(AugmentedTrajectory {
        lambda,
        n,
        setup: setup.clone(),
        perturbed,
        sol,
    })
}

fn settle_measure(n: usize, epsilon: f64) -> impl Fn(&[f64]) -> f64 {
    move |y: &[f64]| {
        let mut m = l1(&y[..2 * n]);
        if y.len() > 2 * n && epsilon > 0.0 {
            m += l1(&y[2 * n..]) / epsilon;
        }
        m
    }
}

/// Remainder trajectory with the quadrature of `|e(t)|₁`.
#[derive(Debug, Clone)]
pub struct RemainderResult {
    pub traj: AugmentedTrajectory,
    /// `∫_0^∞ |e(t)|₁ dt`: quadrature up to `settle_time` plus `tail`.
    pub l1_integral: f64,
    /// Bound on the integral beyond `settle_time`, `|e(T)|₁ / δ̃`.
    pub tail: f64,
    pub settle_time: f64,
    pub t_tilde: f64,
}

/// Tolerances used for remainder solves.
pub const REMAINDER_REL_TOL: f64 = 1e-10;
pub const REMAINDER_ABS_TOL: f64 = 1e-12;

/// Integrates the augmented system with tightened tolerances past
/// `1.05 t̃` and until every component settles, then integrates `|e(t)|₁`
/// with adaptive Simpson on each step of the dense output.
pub fn remainder(
    setup: &SensitivitySetup,
    lambda: f64,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<RemainderResult> {
    cfg.validate()?;
    setup.validate(lambda, n)?;
    if setup.epsilon <= 0.0 {
        return Err(Error::domain("remainder needs epsilon > 0"));
    }
    let tight = cfg.tightened(REMAINDER_REL_TOL, REMAINDER_ABS_TOL);
    let t_tilde = lyapunov::t_tilde(lambda, n);
    let min_time = 1.05 * t_tilde;
    let horizon = cfg.horizon(lambda, n).max(2.0 * min_time);
    let sys = AugmentedSystem::new(lambda, n, true)?;
    let y0 = augmented_start(setup, true);
    let (sol, settle) = solve_until(
        &sys,
        &y0,
        horizon,
        &tight,
        min_time,
        settle_measure(n, setup.epsilon),
    )?;
    let traj = AugmentedTrajectory {
        lambda,
        n,
        setup: setup.clone(),
        perturbed: true,
        sol,
    };
    let l1_integral = integrate_l1(&traj.remainder().expect("perturbed"));
    let e_end = l1(&traj.remainder_at_step(traj.times().len() - 1).expect("perturbed"));
    let tail = e_end / lyapunov::tilde_rate(lambda, n);
    Ok(RemainderResult {
        l1_integral: l1_integral + tail,
        tail,
        settle_time: settle,
        t_tilde,
        traj,
    })
}

/// `∫ |c(t)|₁ dt` over the curve's time range, adaptive Simpson per stored
/// step with absolute tolerance `1e-14 * t_end` in total.
fn integrate_l1(view: &ComponentView<'_>) -> f64 {
    let times = view.traj.times();
    let t_end = view.t_end();
    if times.len() < 2 || t_end <= 0.0 {
        return 0.0;
    }
    let mut buf = vec![0.0; view.dim()];
    let mut total = 0.0;
    for w in times.windows(2) {
        let tol = 1e-14 * (w[1] - w[0]);
        total += adaptive_simpson(
            |t| {
                view.eval_into(t, &mut buf);
                l1(&buf)
            },
            w[0],
            w[1],
            tol,
            12,
        );
    }
    total
}

/// `1` up to `t̃`, then `min(1, 4 e^{-δ̃(t - t̃)})`.
pub fn sensitivity_envelope(t: f64, t_tilde: f64, delta_tilde: f64) -> f64 {
    if t <= t_tilde {
        1.0
    } else {
        (4.0 * (-delta_tilde * (t - t_tilde)).exp()).min(1.0)
    }
}

/// `∫_0^∞` of the envelope bound used in the rate argument: `t̃ + 4/δ̃`.
pub fn envelope_integral(cert: &LyapunovCert) -> f64 {
    cert.t_tilde.unwrap_or(0.0) + 4.0 / cert.rate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub z_norm: f64,
    /// Largest `|x¹(t)|₁ - |z|₁ · envelope(t)` seen.
    pub max_excess: f64,
    /// Largest increase of `|x¹|₁` between consecutive step points.
    pub max_l1_increase: f64,
    pub points_checked: usize,
    pub tolerance: f64,
    pub t_tilde: f64,
    pub delta_tilde: f64,
    pub passed: bool,
}

pub const ENVELOPE_TOL: f64 = 1e-6;

/// Checks `|x¹(t)|₁ <= |z|₁ · min{1, 4 e^{-δ̃(t - t̃)}}` (1 before `t̃`) at
/// every step point and on a 400-point uniform grid, and that `|x¹|₁` never
/// increases between step points.
pub fn sensitivity_envelope_check(
    traj: &AugmentedTrajectory,
    cert: &LyapunovCert,
) -> Result<EnvelopeReport> {
    let t_tilde = cert
        .t_tilde
        .ok_or_else(|| Error::domain("the envelope check needs a tilde certificate"))?;
    if cert.n != traj.n {
        return Err(Error::LengthMismatch {
            expected: traj.n,
            got: cert.n,
        });
    }
    let z_norm = traj.setup.z_norm();
    let view = traj.sensitivity();
    let mut report = EnvelopeReport {
        z_norm,
        max_excess: f64::NEG_INFINITY,
        max_l1_increase: 0.0,
        points_checked: 0,
        tolerance: ENVELOPE_TOL,
        t_tilde,
        delta_tilde: cert.rate,
        passed: true,
    };
    let check = |t: f64, v: f64, report: &mut EnvelopeReport| {
        let excess = v - z_norm * sensitivity_envelope(t, t_tilde, cert.rate);
        report.max_excess = report.max_excess.max(excess);
        report.points_checked += 1;
    };
    let mut prev = f64::INFINITY;
    for (i, &t) in traj.times().iter().enumerate() {
        let v = traj.l1_at_step(Component::Sensitivity, i);
        check(t, v, &mut report);
        if prev.is_finite() {
            report.max_l1_increase = report.max_l1_increase.max(v - prev);
        }
        prev = v;
    }
    let t_end = traj.t_end();
    let mut buf = vec![0.0; traj.n];
    for i in 0..400 {
        let t = t_end * i as f64 / 399.0;
        view.eval_into(t, &mut buf);
        check(t, l1(&buf), &mut report);
    }
    report.passed = report.max_excess <= ENVELOPE_TOL && report.max_l1_increase <= ENVELOPE_TOL;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub servers: f64,
    pub epsilon: f64,
    pub t_tilde: f64,
    pub delta_tilde: f64,
    /// `sup_{t <= t̃} |e(t)|₁` over step points and a uniform grid.
    pub sup_before_t_tilde: f64,
    /// `2 t̃ / M²`.
    pub early_bound: f64,
    pub early_ok: bool,
    /// Largest `|e(t)|₁ / bound(t)` for `t >= t̃` with the decaying bound
    /// `4|e(t̃)| e^{-δ̃(t-t̃)} + 128 λ ε² e^{-δ̃(t+t̃)} (1 - e^{-δ̃(t-t̃)}) / δ̃`.
    pub late_max_ratio: f64,
    pub late_ok: bool,
    /// The unnamed decay rate of the late bound is read as `δ̃`.
    pub late_rate_reading: String,
    pub l1_integral: f64,
    /// `2t̃²/M² + 8t̃/(δ̃ M²) + 128 λ ε² / δ̃²`.
    pub integral_bound: f64,
    pub integral_ok: bool,
    /// `l1_integral / ((n ln n)² / M²)`.
    pub scaling_constant: f64,
    /// `sup_t |e(t)|₁ / ε²`.
    pub sup_over_eps2: f64,
    pub passed: bool,
}

/// Checks the early, late and integral remainder bounds for `M` servers.
pub fn remainder_bound_check(
    rem: &RemainderResult,
    cert: &LyapunovCert,
    servers: f64,
) -> Result<RemainderReport> {
    let t_tilde = cert
        .t_tilde
        .ok_or_else(|| Error::domain("the remainder check needs a tilde certificate"))?;
    let traj = &rem.traj;
    let view = traj
        .remainder()
        .ok_or_else(|| Error::domain("trajectory carries no perturbed solution"))?;
    let lambda = traj.lambda;
    let n = traj.n as f64;
    let eps = traj.setup.epsilon;
    let dt = cert.rate;
    let m2 = servers * servers;
    let early_bound = 2.0 * t_tilde / m2;

    // sample step points plus a uniform grid on [0, t_end]
    let t_end = traj.t_end();
    let mut samples: Vec<f64> = traj.times().to_vec();
    samples.extend((0..=800).map(|i| t_end * i as f64 / 800.0));
    samples.push(t_tilde.min(t_end));
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples.dedup();

    let mut buf = vec![0.0; traj.n];
    let mut at = |t: f64| {
        view.eval_into(t, &mut buf);
        l1(&buf)
    };
    let e_tt = at(t_tilde.min(t_end));
    let late_bound = |t: f64| {
        4.0 * e_tt * (-dt * (t - t_tilde)).exp()
            + 128.0 * lambda * eps * eps * (-dt * (t + t_tilde)).exp() / dt
                * (1.0 - (-dt * (t - t_tilde)).exp())
    };
    // noise floor for the late check, far below the early-time scale
    let floor = 1e-6 * early_bound.max(eps * eps);
    let mut sup_early: f64 = 0.0;
    let mut sup_all: f64 = 0.0;
    let mut late_ratio: f64 = 0.0;
    for &t in &samples {
        let v = at(t);
        sup_all = sup_all.max(v);
        if t <= t_tilde {
            sup_early = sup_early.max(v);
        } else {
            late_ratio = late_ratio.max(v / (late_bound(t) + floor));
        }
    }
    let integral_bound =
        2.0 * t_tilde * t_tilde / m2 + 8.0 * t_tilde / (dt * m2) + 128.0 * lambda * eps * eps / (dt * dt);
    let early_ok = sup_early <= early_bound;
    let late_ok = late_ratio <= 1.0;
    let integral_ok = rem.l1_integral <= integral_bound;
    Ok(RemainderReport {
        servers,
        epsilon: eps,
        t_tilde,
        delta_tilde: dt,
        sup_before_t_tilde: sup_early,
        early_bound,
        early_ok,
        late_max_ratio: late_ratio,
        late_ok,
        late_rate_reading: "delta_tilde".into(),
        l1_integral: rem.l1_integral,
        integral_bound,
        integral_ok,
        scaling_constant: rem.l1_integral / ((n * n.ln()).powi(2) / m2),
        sup_over_eps2: sup_all / (eps * eps),
        passed: early_ok && late_ok && integral_ok,
    })
}

/// Slack factor on the constant calibrated at the smallest `M`.
pub const SCALING_SLACK: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub servers: Vec<f64>,
    pub integrals: Vec<f64>,
    /// `integral · M² / (n ln n)²` at the smallest `M`.
    pub calibrated_constant: f64,
    /// Ratios of consecutive integrals (smaller `M` over larger `M`).
    pub ratios: Vec<f64>,
    pub slack: f64,
    pub passed: bool,
}

/// Calibrates `C` at the smallest `M` and requires
/// `∫|e| <= slack · C (n ln n)² / M²` at every larger `M`.
pub fn integral_scaling(n: usize, servers: &[f64], integrals: &[f64]) -> ScalingReport {
    let mut pairs: Vec<(f64, f64)> = servers.iter().copied().zip(integrals.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let nf = n as f64;
    let unit = |m: f64| (nf * nf.ln()).powi(2) / (m * m);
    let c = pairs.first().map(|(m, v)| v / unit(*m)).unwrap_or(f64::NAN);
    let passed = pairs
        .iter()
        .all(|(m, v)| *v <= SCALING_SLACK * c * unit(*m));
    ScalingReport {
        servers: pairs.iter().map(|p| p.0).collect(),
        integrals: pairs.iter().map(|p| p.1).collect(),
        calibrated_constant: c,
        ratios: pairs.windows(2).map(|w| w[0].1 / w[1].1).collect(),
        slack: SCALING_SLACK,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{integrate, random_initial, rhs_shifted};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobian_at_equilibrium() {
        let j = jacobian(&ShiftedState::zeros(2), 0.5, 2).unwrap();
        assert_eq!(j.to_dense(), vec![vec![-1.5, 1.0], vec![0.5, -1.125]]);
        // row k: 2λs*_{k-1} - 2λs*_k - 1 + [k < n]
        let star = equilibrium(0.5, 2).unwrap();
        let sums = j.row_sums();
        assert!((sums[0] - (-2.0 * 0.5 * star[0] - 1.0 + 1.0)).abs() < 1e-15);
        assert!((sums[1] - (2.0 * 0.5 * star[0] - 2.0 * 0.5 * star[1] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_initial(0.6, 7, &mut rng);
            let v: Vec<f64> = (0..7).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
            let j = jacobian(&x, 0.6, 7).unwrap().mul_vec(&v);
            let h = 1e-6;
            let shifted = |s: f64| {
                let y: Vec<f64> = x.as_slice().iter().zip(&v).map(|(a, b)| a + s * b).collect();
                rhs_shifted(&ShiftedState::new(y), 0.6, 7).unwrap()
            };
            let (p, m) = (shifted(h), shifted(-h));
            for k in 0..7 {
                assert!((j[k] - (p[k] - m[k]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_direction_gives_zero_sensitivity() {
        let x0 = ShiftedState::new(vec![0.3, 0.1, -0.005, 0.0]);
        let setup = SensitivitySetup::new(x0, vec![0.0; 4], 0.0);
        let cfg = IntegratorConfig {
            t_max: Some(20.0),
            ..Default::default()
        };
        let traj = integrate_sensitivity(&setup, 0.5, 4, &cfg).unwrap();
        for &t in traj.times() {
            assert!(traj.sensitivity().eval(t).iter().all(|&v| v == 0.0));
        }
        assert!(traj.remainder().is_none());
    }

    #[test]
    fn nominal_component_matches_plain_integration() {
        let x0 = ShiftedState::new(vec![0.4, 0.1, -0.005, 0.0]);
        let cfg = IntegratorConfig {
            t_max: Some(30.0),
            ..Default::default()
        };
        let setup = SensitivitySetup::unit(x0.clone(), 2, 1e-3);
        let aug = integrate_sensitivity(&setup, 0.5, 4, &cfg).unwrap();
        let plain = integrate(&x0, 0.5, 4, &cfg).unwrap();
        for i in 0..=30 {
            let t = i as f64;
            let a = aug.nominal().eval(t);
            let b = plain.at(t);
            for k in 0..4 {
                assert!((a[k] - b.as_slice()[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn remainder_starts_at_zero_and_reconstructs() {
        let x0 = ShiftedState::new(vec![0.2, 0.05, 0.0]);
        let setup = SensitivitySetup::new(x0, vec![0.5, -0.5, 0.0], 1e-3);
        let cfg = IntegratorConfig {
            t_max: Some(10.0),
            ..Default::default()
        };
        let traj = integrate_sensitivity(&setup, 0.5, 3, &cfg).unwrap();
        assert!(traj.remainder_at_step(0).unwrap().iter().all(|&v| v == 0.0));
        for &t in traj.times() {
            let x = traj.perturbed().unwrap().eval(t);
            let a = traj.nominal().eval(t);
            let b = traj.sensitivity().eval(t);
            let e = traj.remainder().unwrap().eval(t);
            for k in 0..3 {
                let rebuilt = a[k] + 1e-3 * b[k] + e[k];
                assert!((x[k] - rebuilt).abs() <= 1e-15 * (1.0 + x[k].abs()) * 4.0);
            }
        }
    }

    #[test]
    fn envelope_values() {
        assert_eq!(sensitivity_envelope(3.0, 5.0, 0.1), 1.0);
        assert_eq!(sensitivity_envelope(6.0, 5.0, 0.1), 1.0);
        let v = sensitivity_envelope(5.0 + 40.0, 5.0, 0.1);
        assert!((v - 4.0 * (-4.0f64).exp()).abs() < 1e-15);
        let cert = lyapunov::tilde_weights(0.5, 10).unwrap();
        let expected = cert.t_tilde.unwrap() + 4.0 / 0.01875;
        assert!((envelope_integral(&cert) - expected).abs() < 1e-9);
    }

    #[test]
    fn integral_scaling_calibration() {
        let r = integral_scaling(10, &[2000.0, 1000.0], &[0.25, 1.0]);
        assert_eq!(r.servers, vec![1000.0, 2000.0]);
        assert!((r.ratios[0] - 4.0).abs() < 1e-12);
        assert!(r.passed);
        let r = integral_scaling(10, &[1000.0, 2000.0], &[1.0, 0.5]);
        assert!(!r.passed);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn sensitivity_is_linear_in_direction(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let n = 6;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = random_initial(0.5, n, &mut rng);
            let z1: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
            let z2: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
            let combo: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| a * p + b * q).collect();
            let cfg = IntegratorConfig { t_max: Some(25.0), ..Default::default() };
            let run = |z: Vec<f64>| {
                integrate_sensitivity(&SensitivitySetup::new(x0.clone(), z, 0.0), 0.5, n, &cfg).unwrap()
            };
            let (t1, t2, tc) = (run(z1), run(z2), run(combo));
            for i in 0..=25 {
                let t = i as f64;
                let (p, q, c) = (t1.sensitivity().eval(t), t2.sensitivity().eval(t), tc.sensitivity().eval(t));
                for k in 0..n {
                    prop_assert!((c[k] - (a * p[k] + b * q[k])).abs() < 1e-6);
                }
            }
        }
    }
}
