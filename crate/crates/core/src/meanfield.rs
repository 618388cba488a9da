//! Truncated mean-field dynamics in tail and shifted coordinates.
//!
//! The `n`-level system closes the hierarchy by pinning level `n + 1` at its
//! equilibrium value. In shifted coordinates `x = s - s*` the origin is the
//! unique fixed point and every trajectory started from a monotone tail stays
//! inside the box `-s*_k <= x_k <= 1 - s*_k`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_lambda, equilibrium, equilibrium_level, equilibrium_padded, unshift, ShiftedState,
    TailState,
};
use crate::ode::{self, Control, DenseCurve, DenseSolution, OdeSystem, StepControl, StepStats};

/// Accuracy and stopping settings shared by every trajectory solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Integration horizon; `None` picks a horizon from the certified decay
    /// rate (see [`default_t_max`]).
    pub t_max: Option<f64>,
    /// ℓ1 threshold below which a trajectory counts as settled.
    pub settle_tol: f64,
    pub h_max: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            t_max: None,
            settle_tol: 1e-10,
            h_max: 0.5,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.rel_tol) && ok(self.abs_tol) && ok(self.settle_tol) && ok(self.h_max)) {
            return Err(Error::Config("integrator tolerances must be positive".into()));
        }
        if let Some(t) = self.t_max {
            if !ok(t) {
                return Err(Error::Config(format!("t_max must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Same settings with tolerances no looser than the given ones.
    pub fn tightened(&self, rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol: self.rel_tol.min(rel_tol),
            abs_tol: self.abs_tol.min(abs_tol),
            ..*self
        }
    }

    pub(crate) fn step_control(&self) -> StepControl {
        StepControl {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            h_max: self.h_max,
            ..StepControl::default()
        }
    }

    pub(crate) fn horizon(&self, lambda: f64, n: usize) -> f64 {
        self.t_max
            .unwrap_or_else(|| default_t_max(lambda, n, self.settle_tol))
    }
}

/// `(20 / δ) * max(1, ln(n / settle_tol))` with `δ = (1 - √λ) / (4n)`.
pub fn default_t_max(lambda: f64, n: usize, settle_tol: f64) -> f64 {
    let delta = (1.0 - lambda.sqrt()) / (4.0 * n as f64);
    20.0 / delta * (n as f64 / settle_tol).ln().max(1.0)
}

/// Rate-optimal truncation level `ceil(3 ln M / ln(1/λ))`, at least 1.
pub fn default_truncation(servers: usize, lambda: f64) -> usize {
    let m = servers.max(1) as f64;
    ((3.0 * m.ln() / (1.0 / lambda).ln()).ceil() as usize).max(1)
}

fn check_dims(len: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("truncation level n must be at least 1"));
    }
    if len != n {
        return Err(Error::LengthMismatch { expected: n, got: len });
    }
    Ok(())
}

/// Right-hand side of the truncated system in tail coordinates.
pub fn rhs_truncated(s: &TailState, lambda: f64, n: usize) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_dims(s.len(), n)?;
    let s = s.as_slice();
    let closure = equilibrium_level(lambda, n + 1);
    let level = |k: usize| -> f64 {
        match k {
            0 => 1.0,
            k if k <= n => s[k - 1],
            _ => closure,
        }
    };
    Ok((1..=n)
        .map(|k| {
            let (prev, cur, next) = (level(k - 1), level(k), level(k + 1));
            lambda * (prev * prev - cur * cur) - (cur - next)
        })
        .collect())
}

/// Right-hand side of the shifted system.
pub fn rhs_shifted(x: &ShiftedState, lambda: f64, n: usize) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_dims(x.len(), n)?;
    let star = equilibrium(lambda, n)?;
    let mut out = vec![0.0; n];
    increment_rhs(lambda, &star, x.as_slice(), &mut out);
    Ok(out)
}

/// `f(b + u) - f(b)` for the truncated tail dynamics, where `b` is a base
/// tail (levels `1..=n`, level 0 fixed at 1) and `u` an increment with
/// `u_0 = u_{n+1} = 0`. With `b = s*` this is the shifted right-hand side.
pub(crate) fn increment_rhs(lambda: f64, base: &[f64], u: &[f64], out: &mut [f64]) {
    increment_rhs_with(lambda, |k| base[k], u, out)
}

/// [`increment_rhs`] with the base tail given per level (0-based index).
#[inline]
pub(crate) fn increment_rhs_with<B: Fn(usize) -> f64>(
    lambda: f64,
    base: B,
    u: &[f64],
    out: &mut [f64],
) {
    let n = u.len();
    let mut prev = 0.0; // λ(u_{k-1}^2 + 2 b_{k-1} u_{k-1}), zero at k = 1
    for k in 0..n {
        let uk = u[k];
        let cur = lambda * uk * (uk + 2.0 * base(k));
        let next = if k + 1 < n { u[k + 1] } else { 0.0 };
        out[k] = prev - cur - (uk - next);
        prev = cur;
    }
}

/// Jacobian-vector product of the truncated dynamics at base tail `b`:
/// sub-diagonal `2λ b_{k-1}`, diagonal `-2λ b_k - 1`, super-diagonal `1`.
#[inline]
pub(crate) fn linearized_rhs_with<B: Fn(usize) -> f64>(
    lambda: f64,
    base: B,
    v: &[f64],
    out: &mut [f64],
) {
    let n = v.len();
    let mut prev = 0.0;
    for k in 0..n {
        let cur = 2.0 * lambda * base(k) * v[k];
        let next = if k + 1 < n { v[k + 1] } else { 0.0 };
        out[k] = prev - cur - v[k] + next;
        prev = cur;
    }
}

/// The shifted system as an [`OdeSystem`].
#[derive(Debug, Clone)]
pub struct ShiftedSystem {
    lambda: f64,
    star: Vec<f64>,
}

impl ShiftedSystem {
    pub fn new(lambda: f64, n: usize) -> Result<Self> {
        Ok(Self {
            lambda,
            star: equilibrium(lambda, n)?,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn equilibrium(&self) -> &[f64] {
        &self.star
    }
}

impl OdeSystem for ShiftedSystem {
    fn dim(&self) -> usize {
        self.star.len()
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        increment_rhs(self.lambda, &self.star, x, dx);
    }
}

/// The truncated system in tail coordinates, used to cross-check the shifted
/// form.
#[derive(Debug, Clone)]
pub struct TruncatedSystem {
    lambda: f64,
    padded: Vec<f64>,
}

impl TruncatedSystem {
    pub fn new(lambda: f64, n: usize) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            padded: equilibrium_padded(lambda, n),
        })
    }
}

impl OdeSystem for TruncatedSystem {
    fn dim(&self) -> usize {
        self.padded.len() - 2
    }

    fn rhs(&self, _t: f64, s: &[f64], ds: &mut [f64]) {
        let n = s.len();
        let closure = self.padded[n + 1];
        for k in 0..n {
            let prev = if k == 0 { 1.0 } else { s[k - 1] };
            let next = if k + 1 < n { s[k + 1] } else { closure };
            ds[k] = self.lambda * (prev * prev - s[k] * s[k]) - (s[k] - next);
        }
    }
}

/// Dense solution of the shifted system.
#[derive(Debug, Clone)]
pub struct Trajectory {
    lambda: f64,
    n: usize,
    config: IntegratorConfig,
    sol: DenseSolution,
}

impl Trajectory {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.config
    }

    pub fn times(&self) -> &[f64] {
        self.sol.times()
    }

    pub fn len(&self) -> usize {
        self.sol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sol.is_empty()
    }

    pub fn stats(&self) -> StepStats {
        self.sol.stats()
    }

    pub fn state(&self, i: usize) -> ShiftedState {
        ShiftedState::new(self.sol.state(i).to_vec())
    }

    pub fn at(&self, t: f64) -> ShiftedState {
        ShiftedState::new(self.sol.eval(t))
    }

    pub fn tail_at(&self, t: f64) -> TailState {
        unshift(&self.at(t), self.lambda).expect("lambda validated at construction")
    }

    pub fn l1_at(&self, t: f64) -> f64 {
        self.at(t).l1_norm()
    }

    pub fn solution(&self) -> &DenseSolution {
        &self.sol
    }

    /// CSV with header `t,x_1,...,x_n`, one row per accepted step (or per
    /// point of a uniform grid when `grid` is given), 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W, grid: Option<usize>) -> std::io::Result<()> {
        write!(w, "t")?;
        for k in 1..=self.n {
            write!(w, ",x_{k}")?;
        }
        writeln!(w)?;
        let mut row = |t: f64, x: &[f64]| -> std::io::Result<()> {
            write!(w, "{}", fmt17(t))?;
            for v in x {
                write!(w, ",{}", fmt17(*v))?;
            }
            writeln!(w)
        };
        match grid {
            Some(points) if points >= 2 => {
                let (a, b) = (self.t_start(), self.t_end());
                for i in 0..points {
                    let t = a + (b - a) * i as f64 / (points - 1) as f64;
                    row(t, &self.sol.eval(t))?;
                }
            }
            _ => {
                for i in 0..self.sol.len() {
                    row(self.sol.times()[i], self.sol.state(i))?;
                }
            }
        }
        Ok(())
    }
}

impl DenseCurve for Trajectory {
    fn dim(&self) -> usize {
        self.n
    }

    fn t_start(&self) -> f64 {
        self.sol.times()[0]
    }

    fn t_end(&self) -> f64 {
        self.sol.t_end()
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        self.sol.eval_into(t, out)
    }
}

/// Floating-point formatting with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Checks the initial condition: right length and an unshifted tail with
/// `1 >= s_1 >= ... >= s_n >= 0`.
pub fn validate_initial(x0: &ShiftedState, lambda: f64, n: usize) -> Result<()> {
    check_lambda(lambda)?;
    check_dims(x0.len(), n)?;
    let tail = unshift(x0, lambda)?;
    TailState::new(tail.into_inner()).map(|_| ())
}

/// Integrates the shifted system on `[0, t_max]`.
pub fn integrate(
    x0: &ShiftedState,
    lambda: f64,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    validate_initial(x0, lambda, n)?;
    let sys = ShiftedSystem::new(lambda, n)?;
    let horizon = cfg.horizon(lambda, n);
    let sol = ode::integrate(&sys, 0.0, x0.as_slice(), horizon, &cfg.step_control(), |_, _| {
        Control::Continue
    })?;
    Ok(Trajectory {
        lambda,
        n,
        config: *cfg,
        sol,
    })
}

/// Integrates until the ℓ1 norm first drops below `settle_tol`; the returned
/// trajectory ends at that crossing time.
pub fn solve_to_equilibrium(
    x0: &ShiftedState,
    lambda: f64,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, f64)> {
    cfg.validate()?;
    validate_initial(x0, lambda, n)?;
    let sys = ShiftedSystem::new(lambda, n)?;
    let horizon = cfg.horizon(lambda, n);
    let l1 = |x: &[f64]| x.iter().map(|v| v.abs()).sum::<f64>();
    let (sol, settle) = solve_until(&sys, x0.as_slice(), horizon, cfg, 0.0, |y| l1(y))?;
    Ok((
        Trajectory {
            lambda,
            n,
            config: *cfg,
            sol,
        },
        settle,
    ))
}

/// Shared settle-driven solve: integrates `sys` until `measure(y)` drops
/// below `cfg.settle_tol` at some `t >= min_time`, then cuts the solution at
/// the first crossing after `min_time`.
pub(crate) fn solve_until<S, M>(
    sys: &S,
    y0: &[f64],
    horizon: f64,
    cfg: &IntegratorConfig,
    min_time: f64,
    measure: M,
) -> Result<(DenseSolution, f64)>
where
    S: OdeSystem + ?Sized,
    M: Fn(&[f64]) -> f64,
{
    let tol = cfg.settle_tol;
    if min_time <= 0.0 && measure(y0) < tol {
        let sol = ode::integrate(sys, 0.0, y0, 0.0, &cfg.step_control(), |_, _| Control::Stop)?;
        return Ok((sol, 0.0));
    }
    let mut settled = false;
    let mut sol = ode::integrate(sys, 0.0, y0, horizon, &cfg.step_control(), |t, y| {
        if t >= min_time && measure(y) < tol {
            settled = true;
            Control::Stop
        } else {
            Control::Continue
        }
    })?;
    if !settled {
        return Err(Error::ConvergenceTimeout {
            t_max: horizon,
            residual: measure(sol.last_state()),
        });
    }
    // bisect the crossing inside the final step
    let times = sol.times();
    let mut hi = sol.t_end();
    let mut lo = times[times.len() - 2].max(min_time);
    if measure(&sol.eval(lo)) < tol {
        hi = lo;
    } else {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if measure(&sol.eval(mid)) < tol {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    sol.truncate_at(hi);
    Ok((sol, hi))
}

/// Random initial conditions inside the unit box that satisfy the monotone
/// tail precondition. Mixes three families so sweeps see both bulk and
/// boundary starts: sorted uniforms, 0/1 staircases and small perturbations
/// of the equilibrium.
pub fn random_initial<R: Rng + ?Sized>(lambda: f64, n: usize, rng: &mut R) -> ShiftedState {
    let star = equilibrium(lambda, n).expect("valid lambda and n");
    let mut s: Vec<f64> = match rng.random_range(0..3) {
        0 => {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        }
        1 => {
            let j = rng.random_range(0..=n);
            (0..n).map(|k| if k < j { 1.0 } else { 0.0 }).collect()
        }
        _ => {
            let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
            star.iter()
                .map(|v| (v + scale * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0))
                .collect()
        }
    };
    for k in 1..n {
        if s[k] > s[k - 1] {
            s[k] = s[k - 1];
        }
    }
    ShiftedState::new(s.iter().zip(&star).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::shift;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_rhs_hand_values() {
        let s = TailState::new(vec![1.0, 1.0]).unwrap();
        let r = rhs_truncated(&s, 0.5, 2).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - (-0.9921875)).abs() < 1e-15);
    }

    #[test]
    fn shifted_rhs_hand_values() {
        let mut x = vec![0.0; 4];
        x[0] = 0.1;
        let r = rhs_shifted(&ShiftedState::new(x), 0.5, 4).unwrap();
        assert!((r[0] + 0.155).abs() < 1e-15);
        assert!((r[1] - 0.055).abs() < 1e-15);
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        for &l in &[0.3, 0.5, 0.7, 0.9] {
            for &n in &[5, 10, 20, 40] {
                let r = rhs_shifted(&ShiftedState::zeros(n), l, n).unwrap();
                assert!(r.iter().all(|v| v.abs() < 1e-12));
                let star = TailState::new(equilibrium(l, n).unwrap()).unwrap();
                let r = rhs_truncated(&star, l, n).unwrap();
                assert!(r.iter().all(|v| v.abs() < 1e-12), "{l} {n}: {r:?}");
            }
        }
    }

    #[test]
    fn rhs_rejects_bad_sizes() {
        assert!(rhs_shifted(&ShiftedState::zeros(3), 0.5, 4).is_err());
        assert!(rhs_shifted(&ShiftedState::zeros(0), 0.5, 0).is_err());
        assert!(rhs_truncated(&TailState::new(vec![]).unwrap(), 0.5, 0).is_err());
    }

    #[test]
    fn zero_start_stays_at_zero() {
        let cfg = IntegratorConfig {
            t_max: Some(50.0),
            ..Default::default()
        };
        let traj = integrate(&ShiftedState::zeros(6), 0.7, 6, &cfg).unwrap();
        assert!(traj.times().iter().all(|&t| traj.l1_at(t) == 0.0));
        let (_, settle) = solve_to_equilibrium(&ShiftedState::zeros(6), 0.7, 6, &cfg).unwrap();
        assert_eq!(settle, 0.0);
    }

    #[test]
    fn rejects_non_monotone_start() {
        let s = TailState::new_unchecked(vec![0.2, 0.6, 0.1]);
        let x = shift(&s, 0.5).unwrap();
        assert!(integrate(&x, 0.5, 3, &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn shifted_and_truncated_integrations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = IntegratorConfig {
            t_max: Some(60.0),
            ..Default::default()
        };
        for _ in 0..5 {
            let x0 = random_initial(0.6, 8, &mut rng);
            let traj = integrate(&x0, 0.6, 8, &cfg).unwrap();
            let s0 = unshift(&x0, 0.6).unwrap();
            let sys = TruncatedSystem::new(0.6, 8).unwrap();
            let tails = ode::integrate(&sys, 0.0, s0.as_slice(), 60.0, &cfg.step_control(), |_, _| {
                Control::Continue
            })
            .unwrap();
            let star = equilibrium(0.6, 8).unwrap();
            for i in 0..=30 {
                let t = 2.0 * i as f64;
                let a = traj.at(t);
                let b = tails.eval(t);
                for k in 0..8 {
                    let diff = (a.as_slice()[k] - (b[k] - star[k])).abs();
                    assert!(diff < 10.0 * (cfg.rel_tol + cfg.abs_tol) * 10.0, "{diff}");
                }
            }
        }
    }

    #[test]
    fn settle_time_grows_by_log2_over_rate() {
        let cfg = IntegratorConfig::default();
        let x0 = shift(&TailState::new(vec![0.9, 0.5, 0.3, 0.1, 0.0, 0.0]).unwrap(), 0.5).unwrap();
        let (traj, t1) = solve_to_equilibrium(&x0, 0.5, 6, &cfg).unwrap();
        let tighter = IntegratorConfig {
            settle_tol: cfg.settle_tol / 2.0,
            ..cfg
        };
        let (_, t2) = solve_to_equilibrium(&x0, 0.5, 6, &tighter).unwrap();
        // empirical tail rate from the last third of the first trajectory
        let (a, b) = (t1 * 2.0 / 3.0, t1);
        let ts: Vec<f64> = (0..50).map(|i| a + (b - a) * i as f64 / 49.0).collect();
        let ls: Vec<f64> = ts.iter().map(|&t| traj.l1_at(t).ln()).collect();
        let rate = -crate::stats::fit_line(&ts, &ls).unwrap().slope;
        let expected = std::f64::consts::LN_2 / rate;
        assert!(((t2 - t1) - expected).abs() < 0.2 * expected, "{} vs {expected}", t2 - t1);
    }

    #[test]
    fn csv_layout() {
        let cfg = IntegratorConfig {
            t_max: Some(1.0),
            ..Default::default()
        };
        let x0 = ShiftedState::new(vec![0.1, 0.0, 0.0]);
        let traj = integrate(&x0, 0.5, 3, &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, Some(5)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x_1,x_2,x_3");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0.0000000000000000e0,"));
    }

    #[test]
    fn default_truncation_values() {
        assert_eq!(default_truncation(1024, 0.5), 30);
        assert_eq!(default_truncation(16, 0.7), 24);
        assert_eq!(default_truncation(1, 0.7), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rhs_forms_agree(lambda in 0.05f64..0.95, seed in 0u64..1000) {
            let n = 9;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_initial(lambda, n, &mut rng);
            let s = unshift(&x, lambda).unwrap();
            let a = rhs_truncated(&s, lambda, n).unwrap();
            let b = rhs_shifted(&x, lambda, n).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn box_and_contraction_hold(lambda in 0.1f64..0.9, seed in 0u64..1000) {
            let n = 8;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = random_initial(lambda, n, &mut rng);
            let cfg = IntegratorConfig::default();
            let (traj, _) = solve_to_equilibrium(&x0, lambda, n, &cfg).unwrap();
            let slack = 10.0 * cfg.abs_tol;
            let mut prev = f64::INFINITY;
            for i in 0..traj.len() {
                let x = traj.state(i);
                prop_assert!(x.in_box(lambda, slack));
                let l1 = x.l1_norm();
                prop_assert!(l1 <= prev + slack);
                prev = l1;
                let s = unshift(&x, lambda).unwrap();
                for w in s.as_slice().windows(2) {
                    prop_assert!(w[1] <= w[0] + slack);
                }
            }
        }
    }
}
