//! Model parameters, state representations and the mean-field equilibrium.
//!
//! Three views of the same system state are used throughout the crate:
//!
//! * [`OccupancyState`]: integer server counts per queue length, the exact
//!   state of the `M`-server chain.
//! * [`TailState`]: `s_k`, the fraction of servers holding at least `k` jobs,
//!   for `k = 1..=n`. `s_0 = 1` is implicit and never stored.
//! * [`ShiftedState`]: deviations `x_k = s_k - s*_k` from the equilibrium.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when validating monotonicity and box constraints of
/// floating-point states.
pub const STATE_TOL: f64 = 1e-12;

/// Arrival rate, server count and number of sampled servers per arrival.
/// Service rate is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lambda: f64,
    pub servers: usize,
    pub choices: usize,
}

impl ModelParams {
    /// Power-of-two-choices parameters.
    pub fn new(lambda: f64, servers: usize) -> Result<Self> {
        Self::with_choices(lambda, servers, 2)
    }

    pub fn with_choices(lambda: f64, servers: usize, choices: usize) -> Result<Self> {
        let params = Self {
            lambda,
            servers,
            choices,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.servers == 0 {
            return Err(Error::domain("server count M must be at least 1"));
        }
        if self.choices == 0 {
            return Err(Error::domain("choice count d must be at least 1"));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        1.0
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("lambda must lie in (0, 1), got {lambda}")))
    }
}

/// `s*_k = λ^(2^k - 1)` for a single level, with `s*_0 = 1`.
///
/// Values below the smallest normal `f64` are flushed to exactly zero.
pub fn equilibrium_level(lambda: f64, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let value = if k <= 30 {
        lambda.powi((1i32 << k) - 1)
    } else {
        // log-space: 2^k - 1 no longer fits an integer exponent
        ((2f64.powi(k.min(1023) as i32) - 1.0) * lambda.ln()).exp()
    };
    if value < f64::MIN_POSITIVE {
        0.0
    } else {
        value
    }
}

/// Mean-field equilibrium `[s*_1, ..., s*_n]`.
pub fn equilibrium(lambda: f64, n: usize) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if n == 0 {
        return Err(Error::domain("truncation level n must be at least 1"));
    }
    Ok((1..=n).map(|k| equilibrium_level(lambda, k)).collect())
}

/// Equilibrium with the boundary levels included: index `k` holds `s*_k` for
/// `k = 0..=n+1`.
pub(crate) fn equilibrium_padded(lambda: f64, n: usize) -> Vec<f64> {
    (0..=n + 1).map(|k| equilibrium_level(lambda, k)).collect()
}

/// Tail fractions `s_1..s_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TailState(Vec<f64>);

impl TailState {
    /// Checks `1 >= s_1 >= ... >= s_n >= 0` up to [`STATE_TOL`].
    pub fn new(s: Vec<f64>) -> Result<Self> {
        validate_tail(&s)?;
        Ok(Self(s))
    }

    /// Wraps a vector without checking monotonicity.
    pub fn new_unchecked(s: Vec<f64>) -> Self {
        Self(s)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `s_k` with `s_0 = 1` and zero past the stored levels.
    pub fn level(&self, k: usize) -> f64 {
        match k {
            0 => 1.0,
            k => self.0.get(k - 1).copied().unwrap_or(0.0),
        }
    }

    pub fn is_monotone(&self) -> bool {
        validate_tail(&self.0).is_ok()
    }
}

fn validate_tail(s: &[f64]) -> Result<()> {
    let mut prev = 1.0;
    for (i, &v) in s.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidState(format!("s_{} is not finite", i + 1)));
        }
        if v < -STATE_TOL || v > prev + STATE_TOL {
            return Err(Error::InvalidState(format!(
                "tail is not monotone in [0, 1]: s_{} = {v} after {prev}",
                i + 1
            )));
        }
        prev = v;
    }
    Ok(())
}

/// Deviations `x_k = s_k - s*_k`, `k = 1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShiftedState(Vec<f64>);

impl ShiftedState {
    pub fn new(x: Vec<f64>) -> Self {
        Self(x)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    /// Box `-s*_k <= x_k <= 1 - s*_k` for every level, with slack `tol`.
    pub fn in_box(&self, lambda: f64, tol: f64) -> bool {
        self.0.iter().enumerate().all(|(i, &x)| {
            let star = equilibrium_level(lambda, i + 1);
            x >= -star - tol && x <= 1.0 - star + tol
        })
    }
}

/// `x = s - s*`.
pub fn shift(s: &TailState, lambda: f64) -> Result<ShiftedState> {
    let star = equilibrium(lambda, s.len().max(1))?;
    if s.is_empty() {
        return Ok(ShiftedState(Vec::new()));
    }
    Ok(ShiftedState(
        s.0.iter().zip(&star).map(|(v, st)| v - st).collect(),
    ))
}

/// `s = x + s*`. The result is not re-validated; a box-valid `x` from a
/// monotone tail maps back to that tail.
pub fn unshift(x: &ShiftedState, lambda: f64) -> Result<TailState> {
    let star = equilibrium(lambda, x.len().max(1))?;
    if x.is_empty() {
        return Ok(TailState(Vec::new()));
    }
    Ok(TailState(
        x.0.iter().zip(&star).map(|(v, st)| v + st).collect(),
    ))
}

/// Checked shift for callers that pass an explicit `n`.
pub fn shift_checked(s: &TailState, lambda: f64, n: usize) -> Result<ShiftedState> {
    if s.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: s.len(),
        });
    }
    shift(s, lambda)
}

/// Server counts per queue length: `counts[k]` servers hold exactly `k` jobs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OccupancyState {
    counts: Vec<u64>,
}

impl OccupancyState {
    /// All `servers` queues empty.
    pub fn empty(servers: usize) -> Self {
        Self {
            counts: vec![servers as u64],
        }
    }

    pub fn from_counts(mut counts: Vec<u64>) -> Result<Self> {
        while counts.len() > 1 && counts.last() == Some(&0) {
            counts.pop();
        }
        if counts.is_empty() || counts.iter().sum::<u64>() == 0 {
            return Err(Error::InvalidState(
                "occupancy must contain at least one server".into(),
            ));
        }
        Ok(Self { counts })
    }

    /// Inverse of [`OccupancyState::tail_counts`]: `tails[k]` servers hold at
    /// least `k` jobs, `tails[0] = M`.
    pub fn from_tail_counts(tails: &[u64]) -> Result<Self> {
        if tails.is_empty() {
            return Err(Error::InvalidState("empty tail-count vector".into()));
        }
        let mut counts = Vec::with_capacity(tails.len());
        for k in 0..tails.len() {
            let next = tails.get(k + 1).copied().unwrap_or(0);
            if next > tails[k] {
                return Err(Error::InvalidState(format!(
                    "tail counts increase at level {}",
                    k + 1
                )));
            }
            counts.push(tails[k] - next);
        }
        Self::from_counts(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, level: usize) -> u64 {
        self.counts.get(level).copied().unwrap_or(0)
    }

    pub fn servers(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Largest queue length with at least one server.
    pub fn max_level(&self) -> usize {
        self.counts.iter().rposition(|&c| c > 0).unwrap_or(0)
    }

    pub fn busy(&self) -> u64 {
        self.servers() - self.count(0)
    }

    /// `tails[k]` = number of servers with at least `k` jobs, for
    /// `k = 0..=max_level + 1` (the last entry is always zero).
    pub fn tail_counts(&self) -> Vec<u64> {
        let top = self.max_level();
        let mut tails = vec![0u64; top + 2];
        let mut acc = 0u64;
        for k in (0..=top).rev() {
            acc += self.counts[k];
            tails[k] = acc;
        }
        tails
    }

    /// Moves one server from queue length `from` to `to`.
    pub(crate) fn move_server(&mut self, from: usize, to: usize) -> Result<()> {
        if self.count(from) == 0 {
            return Err(Error::InvalidState(format!(
                "no server at queue length {from}"
            )));
        }
        if to >= self.counts.len() {
            self.counts.resize(to + 1, 0);
        }
        self.counts[from] -= 1;
        self.counts[to] += 1;
        while self.counts.len() > 1 && self.counts.last() == Some(&0) {
            self.counts.pop();
        }
        Ok(())
    }

    pub fn to_tail(&self, servers: usize, n: usize) -> Result<TailState> {
        to_tail(self, servers, n)
    }
}

/// `s_k = (Σ_{j>=k} counts[j]) / M` for `k = 1..=n`.
pub fn to_tail(occ: &OccupancyState, servers: usize, n: usize) -> Result<TailState> {
    if occ.servers() != servers as u64 {
        return Err(Error::InvalidState(format!(
            "occupancy holds {} servers, expected {servers}",
            occ.servers()
        )));
    }
    let tails = occ.tail_counts();
    let m = servers as f64;
    Ok(TailState(
        (1..=n)
            .map(|k| tails.get(k).copied().unwrap_or(0) as f64 / m)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equilibrium_half() {
        let s = equilibrium(0.5, 3).unwrap();
        assert_eq!(s, vec![0.5, 0.125, 0.0078125]);
    }

    #[test]
    fn equilibrium_first_level_is_lambda() {
        for &l in &[0.01, 0.3, 0.77, 0.999] {
            assert_eq!(equilibrium(l, 1).unwrap(), vec![l]);
        }
    }

    #[test]
    fn equilibrium_point_nine_against_integer_powers() {
        // 0.9^(2^k - 1) = 9^(2^k - 1) / 10^(2^k - 1), exact in u128 up to k = 4.
        let got = equilibrium(0.9, 4).unwrap();
        for (i, g) in got.iter().enumerate() {
            let e = (1u32 << (i + 1)) - 1;
            let num = 9u128.pow(e);
            let den = 10u128.pow(e);
            let exact = num as f64 / den as f64;
            assert!((g - exact).abs() <= 4.0 * f64::EPSILON * exact, "{g} vs {exact}");
        }
        assert!((got[3] - 0.205891132094649).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_deep_levels_flush_to_zero() {
        let s = equilibrium(0.5, 64).unwrap();
        assert!(s.iter().all(|v| *v == 0.0 || *v >= f64::MIN_POSITIVE));
        assert_eq!(s[63], 0.0);
        assert_eq!(equilibrium_level(0.999, 200), 0.0);
    }

    #[test]
    fn equilibrium_rejects_bad_input() {
        assert!(equilibrium(0.0, 3).is_err());
        assert!(equilibrium(1.0, 3).is_err());
        assert!(equilibrium(0.5, 0).is_err());
        assert!(equilibrium(f64::NAN, 2).is_err());
    }

    #[test]
    fn equilibrium_is_mean_field_fixed_point() {
        for &l in &[0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let s = equilibrium_padded(l, 40);
            for k in 1..=40 {
                if s[k] == 0.0 {
                    break;
                }
                let r = l * (s[k - 1] * s[k - 1] - s[k] * s[k]) - (s[k] - s[k + 1]);
                assert!(r.abs() < 1e-12, "lambda {l} k {k}: {r}");
            }
        }
    }

    #[test]
    fn to_tail_examples() {
        let occ = OccupancyState::from_counts(vec![1, 2, 1]).unwrap();
        assert_eq!(occ.to_tail(4, 3).unwrap().as_slice(), &[0.75, 0.25, 0.0]);

        let empty = OccupancyState::empty(7);
        assert_eq!(empty.to_tail(7, 4).unwrap().as_slice(), &[0.0; 4]);

        let full = OccupancyState::from_counts(vec![0, 0, 0, 0, 0, 9]).unwrap();
        assert_eq!(full.to_tail(9, 3).unwrap().as_slice(), &[1.0; 3]);

        assert!(occ.to_tail(5, 3).is_err());
    }

    #[test]
    fn shift_examples() {
        let star = TailState::new(equilibrium(0.3, 5).unwrap()).unwrap();
        assert!(shift(&star, 0.3).unwrap().as_slice().iter().all(|v| *v == 0.0));

        let s = TailState::new(vec![0.6, 0.2]).unwrap();
        let x = shift(&s, 0.5).unwrap();
        assert!((x.as_slice()[0] - 0.1).abs() < 1e-15);
        assert!((x.as_slice()[1] - 0.075).abs() < 1e-15);
        assert!(shift_checked(&s, 0.5, 3).is_err());
    }

    #[test]
    fn tail_validation() {
        assert!(TailState::new(vec![0.5, 0.6]).is_err());
        assert!(TailState::new(vec![1.2]).is_err());
        assert!(TailState::new(vec![0.5, -0.1]).is_err());
        assert!(TailState::new(vec![1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn tail_counts_round_trip() {
        let occ = OccupancyState::from_counts(vec![3, 0, 4, 1]).unwrap();
        let tails = occ.tail_counts();
        assert_eq!(tails, vec![8, 5, 5, 1, 0]);
        assert_eq!(OccupancyState::from_tail_counts(&tails).unwrap(), occ);
    }

    fn monotone_tail(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..=1.0, n).prop_map(|mut v| {
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        })
    }

    proptest! {
        #[test]
        fn shift_unshift_round_trip(lambda in 0.01f64..0.99, s in monotone_tail(12)) {
            let tail = TailState::new(s).unwrap();
            let back = unshift(&shift(&tail, lambda).unwrap(), lambda).unwrap();
            for (a, b) in back.as_slice().iter().zip(tail.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            prop_assert!(shift(&tail, lambda).unwrap().in_box(lambda, 1e-15));
        }

        #[test]
        fn to_tail_is_monotone_and_quantized(counts in proptest::collection::vec(0u64..20, 1..10)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let occ = OccupancyState::from_counts(counts).unwrap();
            let m = occ.servers() as usize;
            let tail = occ.to_tail(m, 12).unwrap();
            prop_assert!(tail.is_monotone());
            for v in tail.as_slice() {
                let scaled = v * m as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            }
        }

        #[test]
        fn equilibrium_strictly_decreasing(lambda in 0.01f64..0.99, n in 1usize..8) {
            let s = equilibrium(lambda, n).unwrap();
            prop_assert!(s[0] <= lambda && s[0] > 0.0);
            for w in s.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
        }
    }
}
