//! Weighted ℓ1 Lyapunov certificates for the shifted system.
//!
//! Two weight families are provided. The base family `w` with rate
//! `δ = (1 - √λ)/(4n)` certifies `V(t) = Σ w_k |x_k(t)| <= V(0) e^{-δt}` for
//! the nonlinear flow. The tilde family `w̃` with rate `δ̃ = (2 - λ)/(8n)`
//! certifies the same kind of decay for the variational flow once the
//! nominal trajectory is within `1/8` of the origin, which happens after
//! `t̃ = (1/δ) ln(32n)`.
//!
//! Both certificates rest on per-level inequalities that only hold for `n`
//! large enough. The constructors evaluate those inequalities for the
//! requested `(λ, n)` and record the outcome in [`RegimeReport`] instead of
//! guessing; [`certified_base_weights`] and [`certified_tilde_weights`]
//! turn a failed check into an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_lambda, equilibrium_level};
use crate::ode::DenseCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertVariant {
    Base,
    Tilde,
}

/// Outcome of the per-level sufficient conditions behind a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// All case inequalities hold.
    pub certified: bool,
    /// `n >= 4 * threshold`, the working definition of "n large enough".
    pub n_large: bool,
    /// One message per violated inequality.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCert {
    pub variant: CertVariant,
    pub lambda: f64,
    pub n: usize,
    /// `k_λ` for the base variant, `k̃` for the tilde variant.
    pub threshold: usize,
    /// Geometric factor `max(1, 4λ)` (base) or `max(1, 5λ)` (tilde).
    pub ratio: f64,
    /// `w_0..=w_n`, with `w_0 = 0`.
    pub weights: Vec<f64>,
    /// Certified decay rate: `δ` (base) or `δ̃` (tilde).
    pub rate: f64,
    /// The base rate `δ`, also carried by tilde certificates.
    pub base_delta: f64,
    /// `t̃ = (1/δ) ln(32n)`; tilde certificates only.
    pub t_tilde: Option<f64>,
    pub regime: RegimeReport,
}

impl LyapunovCert {
    /// `Σ_{k=1}^n w_k |x_k|`.
    pub fn weighted_norm(&self, x: &[f64]) -> f64 {
        self.weights[1..].iter().zip(x).map(|(w, v)| w * v.abs()).sum()
    }

    pub fn k_lambda(&self) -> usize {
        self.threshold
    }
}

/// `δ = (1 - √λ) / (4n)`.
pub fn base_rate(lambda: f64, n: usize) -> f64 {
    (1.0 - lambda.sqrt()) / (4.0 * n as f64)
}

/// `δ̃ = (2 - λ) / (8n)`.
pub fn tilde_rate(lambda: f64, n: usize) -> f64 {
    (2.0 - lambda) / (8.0 * n as f64)
}

/// `t̃ = (1/δ) ln(32n)` with the base rate `δ`.
pub fn t_tilde(lambda: f64, n: usize) -> f64 {
    (32.0 * n as f64).ln() / base_rate(lambda, n)
}

fn ceil_log2_clamped(v: f64) -> usize {
    if !(v > 1.0) || !v.is_finite() {
        return 1;
    }
    (v.log2().ceil() as usize).max(1)
}

/// Smallest-level threshold with `λ(2 s*_k + 1) <= √λ`, from the closed
/// form `⌈log2(ln((1-√λ)/(2√λ)) / ln λ + 1)⌉` clamped below at 1. The result
/// is checked against the defining inequality and bumped if rounding in the
/// closed form left it one short.
pub fn k_lambda(lambda: f64) -> Result<usize> {
    check_lambda(lambda)?;
    let r = lambda.sqrt();
    let inner = ((1.0 - r) / (2.0 * r)).ln() / lambda.ln() + 1.0;
    let mut k = ceil_log2_clamped(inner);
    while lambda * (2.0 * equilibrium_level(lambda, k) + 1.0) > r {
        k += 1;
    }
    Ok(k)
}

/// `k̃ = ⌈log2(ln 8 / ln(1/λ) + 1)⌉` clamped below at 1, which makes
/// `s*_k <= 1/8` for all `k >= k̃`.
pub fn k_tilde(lambda: f64) -> Result<usize> {
    check_lambda(lambda)?;
    let inner = 8f64.ln() / (1.0 / lambda).ln() + 1.0;
    let mut k = ceil_log2_clamped(inner);
    while equilibrium_level(lambda, k) > 0.125 {
        k += 1;
    }
    Ok(k)
}

/// `w_0 = 0`, `w_1 = 1`, `w_k = 1 + (1/K) Σ_{j=1}^k ratio^{-(j-1)}` for
/// `2 <= k <= K`, then `w_k = (1 + (k - K)/n) w_K` up to `n`.
fn weight_sequence(threshold: usize, ratio: f64, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    w[1] = 1.0;
    let mut partial = 1.0;
    for k in 2..=threshold.min(n) {
        partial += ratio.powi(-(k as i32 - 1));
        w[k] = 1.0 + partial / threshold as f64;
    }
    let anchor = w[threshold];
    for k in threshold + 1..=n {
        w[k] = (1.0 + (k - threshold) as f64 / n as f64) * anchor;
    }
    w
}

fn check_n(n: usize, threshold: usize, name: &str) -> Result<()> {
    if n < threshold.max(1) {
        return Err(Error::domain(format!(
            "n = {n} is below the threshold {name} = {threshold}"
        )));
    }
    Ok(())
}

/// Base certificate: weights `w`, rate `δ`.
pub fn base_weights(lambda: f64, n: usize) -> Result<LyapunovCert> {
    let k = k_lambda(lambda)?;
    check_n(n, k, "k_lambda")?;
    let ratio = (4.0 * lambda).max(1.0);
    let w = weight_sequence(k, ratio, n);
    let delta = base_rate(lambda, n);
    let nf = n as f64;
    let r = lambda.sqrt();
    let mut failures = Vec::new();
    for j in 1..k {
        let lhs = delta * w[j] * k as f64 * ratio.powi(j as i32);
        if lhs > lambda {
            failures.push(format!("level {j}: delta*w*k*m^k = {lhs:.4e} > lambda"));
        }
    }
    for j in k + 1..=n {
        if w[j] > 4.0 * w[k] {
            failures.push(format!("level {j}: w_k > 4 w_(k_lambda)"));
        }
    }
    let rhs = 4.0 / (1.0 - r) * (nf / (k as f64 * ratio.powi(k as i32 - 1)) - r * w[k]);
    if w[k] > rhs {
        failures.push(format!(
            "level {k}: w_(k_lambda) = {:.4} exceeds {rhs:.4}",
            w[k]
        ));
    }
    bound_failures(&w, &mut failures);
    Ok(LyapunovCert {
        variant: CertVariant::Base,
        lambda,
        n,
        threshold: k,
        ratio,
        weights: w,
        rate: delta,
        base_delta: delta,
        t_tilde: None,
        regime: RegimeReport {
            certified: failures.is_empty(),
            n_large: n >= 4 * k,
            failures,
        },
    })
}

/// Tilde certificate: weights `w̃`, rate `δ̃`, threshold time `t̃`.
pub fn tilde_weights(lambda: f64, n: usize) -> Result<LyapunovCert> {
    let k = k_tilde(lambda)?;
    check_n(n, k, "k_tilde")?;
    let ratio = (5.0 * lambda).max(1.0);
    let w = weight_sequence(k, ratio, n);
    let delta_t = tilde_rate(lambda, n);
    let nf = n as f64;
    let mut failures = Vec::new();
    for j in 1..k {
        let lhs = delta_t * w[j] * k as f64 * ratio.powi(j as i32);
        if lhs > lambda {
            failures.push(format!("level {j}: delta~*w~*k~*m~^k = {lhs:.4e} > lambda"));
        }
    }
    for j in k + 1..=n {
        if w[j] > 4.0 * w[k] {
            failures.push(format!("level {j}: w~_k > 4 w~_(k~)"));
        }
    }
    let lhs = (lambda / 2.0 + (2.0 - lambda) / 8.0) * w[k];
    let rhs = nf / (k as f64 * ratio.powi(k as i32 - 1));
    if lhs > rhs {
        failures.push(format!("level {k}: {lhs:.4} > n/(k~ m~^(k~-1)) = {rhs:.4}"));
    }
    bound_failures(&w, &mut failures);
    Ok(LyapunovCert {
        variant: CertVariant::Tilde,
        lambda,
        n,
        threshold: k,
        ratio,
        weights: w,
        rate: delta_t,
        base_delta: base_rate(lambda, n),
        t_tilde: Some(t_tilde(lambda, n)),
        regime: RegimeReport {
            certified: failures.is_empty(),
            n_large: n >= 4 * k,
            failures,
        },
    })
}

fn bound_failures(w: &[f64], failures: &mut Vec<String>) {
    for (k, v) in w.iter().enumerate().skip(1) {
        if !(1.0..=4.0).contains(v) {
            failures.push(format!("level {k}: weight {v} outside [1, 4]"));
        }
    }
}

fn require_certified(cert: LyapunovCert) -> Result<LyapunovCert> {
    if cert.regime.certified {
        Ok(cert)
    } else {
        Err(Error::Uncertified {
            lambda: cert.lambda,
            n: cert.n,
            reason: cert.regime.failures.join("; "),
        })
    }
}

/// [`base_weights`], failing when any case inequality is violated.
pub fn certified_base_weights(lambda: f64, n: usize) -> Result<LyapunovCert> {
    require_certified(base_weights(lambda, n)?)
}

/// [`tilde_weights`], failing when any case inequality is violated.
pub fn certified_tilde_weights(lambda: f64, n: usize) -> Result<LyapunovCert> {
    require_certified(tilde_weights(lambda, n)?)
}

/// Grid check of `V(t) e^{rate (t - t_start)} <= V(t_start)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub variant: CertVariant,
    pub max_ratio: f64,
    /// Minus the least-squares slope of `ln V` on the grid; `None` when `V`
    /// vanishes at `t_start` or too few points are above the noise floor.
    pub empirical_rate: Option<f64>,
    pub certified_rate: f64,
    pub grid_points: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub certified_regime: bool,
}

pub const DEFAULT_GRID: usize = 400;
pub const DEFAULT_DECAY_TOL: f64 = 1e-6;

/// Samples `V(t) = Σ w_k |x_k(t)|` on a uniform grid over
/// `[t_start, curve.t_end()]` and compares it with the certified envelope.
pub fn verify_decay<C: DenseCurve + ?Sized>(
    curve: &C,
    cert: &LyapunovCert,
    t_start: f64,
) -> Result<DecayReport> {
    verify_decay_with(curve, cert, t_start, DEFAULT_GRID, DEFAULT_DECAY_TOL)
}

pub fn verify_decay_with<C: DenseCurve + ?Sized>(
    curve: &C,
    cert: &LyapunovCert,
    t_start: f64,
    grid_points: usize,
    tolerance: f64,
) -> Result<DecayReport> {
    if curve.dim() != cert.n {
        return Err(Error::LengthMismatch {
            expected: cert.n,
            got: curve.dim(),
        });
    }
    let t_end = curve.t_end();
    if t_start < curve.t_start() || t_start > t_end {
        return Err(Error::domain(format!(
            "t_start = {t_start} outside the trajectory [{}, {t_end}]",
            curve.t_start()
        )));
    }
    let grid_points = grid_points.max(2);
    let mut buf = vec![0.0; cert.n];
    curve.eval_into(t_start, &mut buf);
    let v0 = cert.weighted_norm(&buf);
    let mut report = DecayReport {
        variant: cert.variant,
        max_ratio: 0.0,
        empirical_rate: None,
        certified_rate: cert.rate,
        grid_points,
        t_start,
        t_end,
        tolerance,
        passed: true,
        certified_regime: cert.regime.certified,
    };
    if v0 == 0.0 {
        return Ok(report);
    }
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    let floor = v0 * 1e-8;
    for i in 0..grid_points {
        let t = t_start + (t_end - t_start) * i as f64 / (grid_points - 1) as f64;
        curve.eval_into(t, &mut buf);
        let v = cert.weighted_norm(&buf);
        let ratio = v * (cert.rate * (t - t_start)).exp() / v0;
        report.max_ratio = report.max_ratio.max(ratio);
        if v > floor {
            ts.push(t);
            logs.push(v.ln());
        }
    }
    if ts.len() >= 3 {
        report.empirical_rate = crate::stats::fit_line(&ts, &logs).map(|f| -f.slope);
    }
    report.passed = report.max_ratio <= 1.0 + tolerance;
    Ok(report)
}

/// Largest ℓ1 norm of the curve on a grid over `[t̃, t_end]`, or the final
/// ℓ1 norm if the curve ends before `t̃` (the norm is nonincreasing, so that
/// value bounds everything after it).
pub fn max_l1_after<C: DenseCurve + ?Sized>(curve: &C, t_from: f64, grid_points: usize) -> f64 {
    let l1 = |t: f64| curve.eval(t).iter().map(|v| v.abs()).sum::<f64>();
    let t_end = curve.t_end();
    if t_from >= t_end {
        return l1(t_end);
    }
    let g = grid_points.max(2);
    (0..g)
        .map(|i| l1(t_from + (t_end - t_from) * i as f64 / (g - 1) as f64))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_lambda_examples() {
        assert_eq!(k_lambda(0.25).unwrap(), 1);
        assert!(0.25 * (2.0 * 0.25 + 1.0) <= 0.5);
        assert_eq!(k_lambda(0.81).unwrap(), 4);
        assert_eq!(k_lambda(0.5).unwrap(), 2);
        assert_eq!(k_lambda(0.9).unwrap(), 6);
        assert_eq!(k_lambda(0.05).unwrap(), 1);
        assert!(k_lambda(1.0).is_err());
        assert!(k_lambda(0.0).is_err());
    }

    #[test]
    fn k_lambda_is_smallest_by_brute_force() {
        for i in 1..100 {
            let l = i as f64 / 100.0;
            let holds =
                |k: usize| l * (2.0 * l.powf(2f64.powi(k as i32) - 1.0) + 1.0) <= l.sqrt();
            let brute = (1..64).find(|&k| holds(k)).unwrap();
            let k = k_lambda(l).unwrap();
            assert!(holds(k));
            // the closed form may overshoot the smallest admissible level by one
            assert!(k == brute || k == brute + 1, "lambda {l}: {k} vs {brute}");
        }
    }

    #[test]
    fn k_tilde_examples() {
        assert_eq!(k_tilde(0.5).unwrap(), 2);
        assert_eq!(k_tilde(0.9).unwrap(), 5);
        assert_eq!(k_tilde(0.1).unwrap(), 1);
    }

    #[test]
    fn base_weight_examples() {
        let c = base_weights(0.25, 10).unwrap();
        assert_eq!(c.threshold, 1);
        assert_eq!(c.weights[0], 0.0);
        assert_eq!(c.weights[1], 1.0);
        assert!((c.weights[2] - 1.1).abs() < 1e-15);
        assert!((c.rate - 0.0125).abs() < 1e-15);
        assert!(c.regime.certified);
        assert!(base_weights(0.9, 5).is_err());
    }

    #[test]
    fn base_weights_partial_sums() {
        // λ = 0.5: k_λ = 2, ratio 2, w_2 = 1 + (1 + 1/2)/2
        let c = base_weights(0.5, 10).unwrap();
        assert!((c.weights[2] - 1.75).abs() < 1e-15);
        assert!((c.weights[10] - 1.75 * 1.8).abs() < 1e-14);
    }

    #[test]
    fn tilde_examples() {
        let c = tilde_weights(0.5, 10).unwrap();
        assert_eq!(c.threshold, 2);
        assert!((c.rate - 0.01875).abs() < 1e-15);
        let t = tilde_weights(0.25, 10).unwrap().t_tilde.unwrap();
        assert!((t - 320f64.ln() / 0.0125).abs() < 1e-9);
        assert!((t - 461.5).abs() < 0.1);
    }

    #[test]
    fn regime_flags_heavy_traffic_small_n() {
        let c = base_weights(0.9, 40).unwrap();
        assert!(!c.regime.certified);
        assert!(!c.regime.failures.is_empty());
        assert!(matches!(
            certified_base_weights(0.9, 40),
            Err(Error::Uncertified { .. })
        ));
        assert!(certified_base_weights(0.5, 10).is_ok());
        assert!(certified_tilde_weights(0.5, 10).is_ok());
    }

    #[test]
    fn zero_curve_passes() {
        struct Zero;
        impl DenseCurve for Zero {
            fn dim(&self) -> usize {
                4
            }
            fn t_start(&self) -> f64 {
                0.0
            }
            fn t_end(&self) -> f64 {
                10.0
            }
            fn eval_into(&self, _t: f64, out: &mut [f64]) {
                out.fill(0.0);
            }
        }
        let c = base_weights(0.5, 4).unwrap();
        let r = verify_decay(&Zero, &c, 0.0).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_ratio, 0.0);
        assert!(r.empirical_rate.is_none());
    }

    #[test]
    fn exponential_curve_rates() {
        struct Exp(f64);
        impl DenseCurve for Exp {
            fn dim(&self) -> usize {
                3
            }
            fn t_start(&self) -> f64 {
                0.0
            }
            fn t_end(&self) -> f64 {
                20.0
            }
            fn eval_into(&self, t: f64, out: &mut [f64]) {
                out.fill((-self.0 * t).exp());
            }
        }
        let c = base_weights(0.5, 3).unwrap();
        let fast = verify_decay(&Exp(0.5), &c, 0.0).unwrap();
        assert!(fast.passed);
        assert!((fast.empirical_rate.unwrap() - 0.5).abs() < 1e-9);
        let slow = verify_decay(&Exp(c.rate / 2.0), &c, 0.0).unwrap();
        assert!(!slow.passed);
    }

    proptest! {
        #[test]
        fn k_lambda_satisfies_definition(lambda in 0.01f64..0.99) {
            let k = k_lambda(lambda).unwrap();
            prop_assert!(lambda * (2.0 * equilibrium_level(lambda, k) + 1.0) <= lambda.sqrt());
        }

        #[test]
        fn weights_monotone_and_bounded(lambda in 0.01f64..0.99, extra in 0usize..60) {
            for cert in [
                base_weights(lambda, k_lambda(lambda).unwrap() + extra).unwrap(),
                tilde_weights(lambda, k_tilde(lambda).unwrap() + extra).unwrap(),
            ] {
                let w = &cert.weights;
                prop_assert_eq!(w[0], 0.0);
                prop_assert_eq!(w[1], 1.0);
                prop_assert!(w.windows(2).all(|p| p[1] >= p[0]));
                prop_assert!(w[1..].iter().all(|&v| (1.0..=4.0).contains(&v)));
                prop_assert!(w[cert.n] <= 2.0 * w[cert.threshold] + 1e-12);
                prop_assert!(cert.rate > 0.0);
            }
        }
    }
}
