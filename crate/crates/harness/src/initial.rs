//! Initial-condition specs for mean-field solves.
//!
//! Grammar (case-insensitive keywords, surrounding whitespace ignored):
//!
//! ```text
//! random            random valid state from the run seed
//! random:SEED       random valid state from SEED
//! equilibrium       x = 0 (alias: zero)
//! empty             s_k = 0 for all k
//! full              s_k = 1 for all k
//! tail:v1,v2,...    tail fractions s_1, s_2, ...; missing levels are 0
//! shifted:v1,...    shifted coordinates x_1, x_2, ...; missing levels are 0
//! ```

use std::fmt;
use std::str::FromStr;

use supermarket::meanfield::{random_initial, validate_initial};
use supermarket::model::{shift, unshift};
use supermarket::simulator::make_rng;
use supermarket::{ShiftedState, TailState};

use crate::error::{HarnessError, Result};

/// Upper bound on explicit component lists; longer specs are rejected.
pub const MAX_COMPONENTS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Random(Option<u64>),
    Equilibrium,
    Empty,
    Full,
    Tail(Vec<f64>),
    Shifted(Vec<f64>),
}

fn parse_list(body: &str) -> std::result::Result<Vec<f64>, String> {
    let body = body.trim();
    if body.is_empty() {
        return Err("empty component list".into());
    }
    let mut out = Vec::new();
    for (i, item) in body.split(',').enumerate() {
        if i >= MAX_COMPONENTS {
            return Err(format!("more than {MAX_COMPONENTS} components"));
        }
        let v: f64 = item
            .trim()
            .parse()
            .map_err(|_| format!("component {} is not a number: {:?}", i + 1, item.trim()))?;
        if !v.is_finite() {
            return Err(format!("component {} is not finite", i + 1));
        }
        out.push(v);
    }
    Ok(out)
}

impl FromStr for InitialCondition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (head, body) = match s.split_once(':') {
            Some((h, b)) => (h.trim(), Some(b)),
            None => (s, None),
        };
        let head = head.to_ascii_lowercase();
        match (head.as_str(), body) {
            ("random", None) => Ok(Self::Random(None)),
            ("random", Some(b)) => b
                .trim()
                .parse()
                .map(|seed| Self::Random(Some(seed)))
                .map_err(|_| format!("bad seed in {s:?}")),
            ("equilibrium" | "zero", None) => Ok(Self::Equilibrium),
            ("empty", None) => Ok(Self::Empty),
            ("full", None) => Ok(Self::Full),
            ("tail", Some(b)) => parse_list(b).map(Self::Tail),
            ("shifted", Some(b)) => parse_list(b).map(Self::Shifted),
            _ => Err(format!(
                "unknown initial condition {s:?}; expected random[:SEED], equilibrium, empty, full, \
                 tail:v1,v2,... or shifted:v1,v2,..."
            )),
        }
    }
}

impl fmt::Display for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Self::Random(None) => f.write_str("random"),
            Self::Random(Some(s)) => write!(f, "random:{s}"),
            Self::Equilibrium => f.write_str("equilibrium"),
            Self::Empty => f.write_str("empty"),
            Self::Full => f.write_str("full"),
            Self::Tail(v) => write!(f, "tail:{}", list(v)),
            Self::Shifted(v) => write!(f, "shifted:{}", list(v)),
        }
    }
}

fn padded(v: &[f64], n: usize) -> Result<Vec<f64>> {
    if v.len() > n {
        return Err(HarnessError::config(format!(
            "initial condition has {} components but n = {n}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    out.resize(n, 0.0);
    Ok(out)
}

impl InitialCondition {
    /// Shifted starting point for `(λ, n)`. `seed` is used by `random`
    /// without an explicit seed. The result is checked to be a valid tail.
    pub fn resolve(&self, lambda: f64, n: usize, seed: u64) -> Result<ShiftedState> {
        let x = match self {
            Self::Random(s) => {
                let mut rng = make_rng(s.unwrap_or(seed), 0);
                random_initial(lambda, n, &mut rng)
            }
            Self::Equilibrium => ShiftedState::zeros(n),
            Self::Empty => shift(&TailState::new(vec![0.0; n])?, lambda)?,
            Self::Full => shift(&TailState::new(vec![1.0; n])?, lambda)?,
            Self::Tail(v) => shift(&TailState::new(padded(v, n)?)?, lambda)?,
            Self::Shifted(v) => {
                let x = ShiftedState::new(padded(v, n)?);
                unshift(&x, lambda)?;
                x
            }
        };
        validate_initial(&x, lambda, n)?;
        Ok(x)
    }
}
