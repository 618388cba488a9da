//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! The integrator advances one state vector with a shared step sequence, so
//! several trajectories packed into a single augmented system (nominal,
//! sensitivity, perturbed) are discretised identically.

use crate::error::{Error, Result};

/// Right-hand side `dy/dt = f(t, y)` of an autonomous or time-dependent ODE.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

/// A vector-valued function of time that can be sampled anywhere in
/// `[t_start, t_end]`.
pub trait DenseCurve {
    fn dim(&self) -> usize;
    fn t_start(&self) -> f64;
    fn t_end(&self) -> f64;
    fn eval_into(&self, t: f64, out: &mut [f64]);

    fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest admissible step. Bounded so that decaying solutions far below
    /// `abs_tol` stay inside the stability region instead of drifting back up
    /// to the tolerance level.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            h_max: 0.5,
            max_steps: 5_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Accepted step points plus the interpolation coefficients of each step.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    // four coefficient vectors per step (the fifth is the step's start state)
    coeffs: Vec<f64>,
    // step length used by each segment's interpolant
    steps: Vec<f64>,
    stats: StepStats,
}

impl DenseSolution {
    fn start(dim: usize, t0: f64, y0: &[f64]) -> Self {
        Self {
            dim,
            times: vec![t0],
            states: y0.to_vec(),
            coeffs: Vec::new(),
            steps: Vec::new(),
            stats: StepStats::default(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn stats(&self) -> StepStats {
        self.stats
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the step containing `t` (clamped to the stored range).
    fn segment(&self, t: f64) -> usize {
        let steps = self.len() - 1;
        if steps == 0 {
            return 0;
        }
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).expect("NaN time"))
        {
            Ok(i) => i.min(steps - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(steps - 1),
        }
    }

    fn eval_segment(&self, seg: usize, t: f64, out: &mut [f64]) {
        let d = self.dim;
        if self.len() == 1 {
            out.copy_from_slice(self.state(0));
            return;
        }
        let t0 = self.times[seg];
        let h = self.steps[seg];
        let theta = ((t - t0) / h).clamp(0.0, (self.times[seg + 1] - t0) / h);
        let theta1 = 1.0 - theta;
        let y0 = self.state(seg);
        let c = &self.coeffs[seg * 4 * d..(seg + 1) * 4 * d];
        for i in 0..d {
            let (r2, r3, r4, r5) = (c[i], c[d + i], c[2 * d + i], c[3 * d + i]);
            out[i] = y0[i] + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5)));
        }
    }

    /// Interpolated state at `t`, clamped to the integration interval.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        self.eval_segment(self.segment(t), t, out);
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    /// Drops everything after `t`; the last kept step keeps its interpolant
    /// and simply ends early.
    pub(crate) fn truncate_at(&mut self, t: f64) {
        if self.len() < 2 || t >= self.t_end() {
            return;
        }
        let seg = self.segment(t);
        let mut y = vec![0.0; self.dim];
        self.eval_segment(seg, t, &mut y);
        self.times.truncate(seg + 2);
        self.steps.truncate(seg + 1);
        self.states.truncate((seg + 2) * self.dim);
        self.coeffs.truncate((seg + 1) * 4 * self.dim);
        self.times[seg + 1] = t;
        let d = self.dim;
        self.states[(seg + 1) * d..(seg + 2) * d].copy_from_slice(&y);
    }
}

impl DenseCurve for DenseSolution {
    fn dim(&self) -> usize {
        self.dim
    }

    fn t_start(&self) -> f64 {
        self.times[0]
    }

    fn t_end(&self) -> f64 {
        DenseSolution::t_end(self)
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        DenseSolution::eval_into(self, t, out)
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// What to do after each accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Integrates `sys` from `(t0, y0)` until `t_end` or until `observer`
/// returns [`Control::Stop`] after an accepted step.
pub fn integrate<S, F>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    ctl: &StepControl,
    mut observer: F,
) -> Result<DenseSolution>
where
    S: OdeSystem + ?Sized,
    F: FnMut(f64, &[f64]) -> Control,
{
    let d = sys.dim();
    if y0.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            got: y0.len(),
        });
    }
    if !(ctl.rel_tol > 0.0 && ctl.abs_tol > 0.0 && ctl.h_max > 0.0) {
        return Err(Error::Config("tolerances and h_max must be positive".into()));
    }
    let mut sol = DenseSolution::start(d, t0, y0);
    if t_end <= t0 || d == 0 {
        return Ok(sol);
    }

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut k5 = vec![0.0; d];
    let mut k6 = vec![0.0; d];
    let mut k7 = vec![0.0; d];
    let mut ytmp = vec![0.0; d];
    let mut ynew = vec![0.0; d];

    sys.rhs(t0, &y, &mut k1);
    sol.stats.rhs_evals += 1;
    let mut h = initial_step(sys, t0, &y, &k1, ctl, &mut sol.stats).min(t_end - t0);
    let mut t = t0;
    let mut last_rejected = false;

    loop {
        if sol.stats.accepted + sol.stats.rejected >= ctl.max_steps {
            return Err(Error::TooManySteps(ctl.max_steps));
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepUnderflow { t, h });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }

        for i in 0..d {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(t + C2 * h, &ytmp, &mut k2);
        for i in 0..d {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h, &ytmp, &mut k3);
        for i in 0..d {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h, &ytmp, &mut k4);
        for i in 0..d {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h, &ytmp, &mut k5);
        for i in 0..d {
            ytmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(t + h, &ytmp, &mut k6);
        for i in 0..d {
            ynew[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(t + h, &ynew, &mut k7);
        sol.stats.rhs_evals += 6;

        let mut err = 0.0;
        for i in 0..d {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sk = ctl.abs_tol + ctl.rel_tol * y[i].abs().max(ynew[i].abs());
            err += (e / sk).powi(2);
        }
        let err = (err / d as f64).sqrt();
        if !err.is_finite() {
            sol.stats.rejected += 1;
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }

        if err <= 1.0 {
            sol.stats.accepted += 1;
            let base = sol.coeffs.len();
            sol.coeffs.resize(base + 4 * d, 0.0);
            let c = &mut sol.coeffs[base..];
            for i in 0..d {
                let dy = ynew[i] - y[i];
                let bspl = h * k1[i] - dy;
                c[i] = dy;
                c[d + i] = bspl;
                c[2 * d + i] = dy - h * k7[i] - bspl;
                c[3 * d + i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            t = if last { t_end } else { t + h };
            y.copy_from_slice(&ynew);
            k1.copy_from_slice(&k7);
            sol.times.push(t);
            sol.steps.push(h);
            sol.states.extend_from_slice(&y);

            if last || observer(t, &y) == Control::Stop {
                return Ok(sol);
            }
            let mut fac = SAFETY * err.max(1e-10).powf(-0.2);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(ctl.h_max);
            last_rejected = false;
        } else {
            sol.stats.rejected += 1;
            let fac = (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
            h *= fac;
            last_rejected = true;
        }
    }
}

fn initial_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    ctl: &StepControl,
    stats: &mut StepStats,
) -> f64 {
    let d = y0.len();
    let sk: Vec<f64> = y0
        .iter()
        .map(|v| ctl.abs_tol + ctl.rel_tol * v.abs())
        .collect();
    let rms = |v: &dyn Fn(usize) -> f64| -> f64 {
        ((0..d).map(|i| (v(i) / sk[i]).powi(2)).sum::<f64>() / d as f64).sqrt()
    };
    let dnf = rms(&|i| f0[i]);
    let dny = rms(&|i| y0[i]);
    let h0 = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        0.01 * dny / dnf
    };
    let h0 = h0.min(ctl.h_max);
    let y1: Vec<f64> = (0..d).map(|i| y0[i] + h0 * f0[i]).collect();
    let mut f1 = vec![0.0; d];
    sys.rhs(t0 + h0, &y1, &mut f1);
    stats.rhs_evals += 1;
    let der2 = rms(&|i| f1[i] - f0[i]) / h0;
    let der = dnf.max(der2);
    let h1 = if der <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / der).powf(0.2)
    };
    (100.0 * h0).min(h1).min(ctl.h_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay(f64);
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = -self.0 * y[0];
        }
    }

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[1];
            dy[1] = -y[0];
        }
    }

    #[test]
    fn exponential_decay_end_and_dense() {
        let ctl = StepControl {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..Default::default()
        };
        let sol = integrate(&Decay(1.5), 0.0, &[2.0], 4.0, &ctl, |_, _| Control::Continue).unwrap();
        assert!((sol.t_end() - 4.0).abs() < 1e-15);
        let exact = |t: f64| 2.0 * (-1.5 * t).exp();
        assert!((sol.last_state()[0] - exact(4.0)).abs() < 1e-9);
        for i in 0..200 {
            let t = 4.0 * i as f64 / 199.0;
            let v = sol.eval(t)[0];
            assert!((v - exact(t)).abs() < 1e-8, "t={t}: {v} vs {}", exact(t));
        }
    }

    #[test]
    fn dense_output_matches_step_points() {
        let ctl = StepControl::default();
        let sol = integrate(&Oscillator, 0.0, &[1.0, 0.0], 10.0, &ctl, |_, _| Control::Continue)
            .unwrap();
        for i in 0..sol.len() {
            let v = sol.eval(sol.times()[i]);
            assert!((v[0] - sol.state(i)[0]).abs() < 1e-14);
        }
        let mid = sol.eval(std::f64::consts::PI);
        assert!((mid[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn observer_can_stop_early() {
        let sol = integrate(&Decay(1.0), 0.0, &[1.0], 100.0, &StepControl::default(), |_, y| {
            if y[0] < 1e-3 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert!(sol.t_end() < 100.0);
        assert!(sol.last_state()[0] < 1e-3);
    }

    #[test]
    fn truncation_keeps_interpolant() {
        let ctl = StepControl {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..Default::default()
        };
        let mut sol =
            integrate(&Oscillator, 0.0, &[1.0, 0.0], 10.0, &ctl, |_, _| Control::Continue).unwrap();
        let cut = 3.3;
        sol.truncate_at(cut);
        assert_eq!(sol.t_end(), cut);
        for i in 0..50 {
            let t = cut * i as f64 / 49.0;
            assert!((sol.eval(t)[0] - t.cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn h_max_is_respected() {
        let ctl = StepControl {
            h_max: 0.1,
            ..Default::default()
        };
        let sol = integrate(&Decay(0.01), 0.0, &[1.0], 5.0, &ctl, |_, _| Control::Continue).unwrap();
        for w in sol.times().windows(2) {
            assert!(w[1] - w[0] <= 0.1 + 1e-15);
        }
    }
}
