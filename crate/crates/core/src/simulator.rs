//! Event-driven simulation of the `M`-server supermarket CTMC.
//!
//! The chain lives on tail counts `T_k = M s_k`. An arrival samples `d`
//! servers uniformly with replacement and joins the shortest sampled queue;
//! a departure happens at a uniformly random busy server. Only one tail count
//! changes per event, so time averages are accumulated incrementally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{equilibrium_level, ModelParams, OccupancyState};
use crate::stats::MeanCi;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Arrival,
    Departure,
}

/// A single transition. `level` is the tail index that changes: an arrival
/// at level `k` joins a queue of length `k - 1`, a departure at level `k`
/// leaves a queue of length `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub level: usize,
}

impl Event {
    pub fn arrival(level: usize) -> Self {
        Self {
            kind: EventKind::Arrival,
            level,
        }
    }

    pub fn departure(level: usize) -> Self {
        Self {
            kind: EventKind::Departure,
            level,
        }
    }
}

/// Simulation run settings. `None` fields resolve to defaults depending on
/// the model (see [`SimConfig::resolve`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Independent stream of the generator, typically the replication index.
    pub stream: u64,
    pub warmup_time: Option<f64>,
    pub horizon_time: Option<f64>,
    pub batches: usize,
    pub n_report: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            stream: 0,
            warmup_time: None,
            horizon_time: None,
            batches: 20,
            n_report: 10,
        }
    }
}

/// A [`SimConfig`] with the time window fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub stream: u64,
    pub warmup_time: f64,
    pub horizon_time: f64,
    pub batches: usize,
    pub n_report: usize,
}

/// `max(100, 10 ln M / (1 - λ))`.
pub fn default_warmup(params: &ModelParams) -> f64 {
    (10.0 * (params.servers as f64).ln() / (1.0 - params.lambda)).max(100.0)
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn resolve(&self, params: &ModelParams) -> Result<ResolvedConfig> {
        params.validate()?;
        let warmup = self.warmup_time.unwrap_or_else(|| default_warmup(params));
        let horizon = self.horizon_time.unwrap_or(100.0 * warmup.max(1.0));
        if !(warmup.is_finite() && warmup >= 0.0) {
            return Err(Error::Config(format!("warmup_time must be >= 0, got {warmup}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon_time must be > 0, got {horizon}")));
        }
        if horizon <= warmup {
            return Err(Error::Config(format!(
                "horizon_time {horizon} must exceed warmup_time {warmup}"
            )));
        }
        if self.batches < 2 {
            return Err(Error::Config("batches must be at least 2".into()));
        }
        if self.n_report == 0 {
            return Err(Error::Config("n_report must be at least 1".into()));
        }
        Ok(ResolvedConfig {
            seed: self.seed,
            stream: self.stream,
            warmup_time: warmup,
            horizon_time: horizon,
            batches: self.batches,
            n_report: self.n_report,
        })
    }
}

/// Generator seeded from `(seed, stream)`.
pub fn make_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Batch-means estimate of stationary tail moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryEstimate {
    /// Time-averaged `s_k`, `k = 1..=n_report`.
    pub mean_tail: Vec<f64>,
    /// Time average of `Σ_{k<=n_report} (s_k - s*_k)^2`.
    pub mean_square_error: f64,
    /// Time average of the full series `Σ_{k>=1} (s_k - s*_k)^2`.
    pub full_square_error: f64,
    pub ci_halfwidth: EstimateCi,
    pub total_events: u64,
    pub seed_used: u64,
    pub stream_used: u64,
    pub warmup_time: f64,
    pub horizon_time: f64,
    pub batches: usize,
}

/// 95% half-widths matching the fields of [`StationaryEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateCi {
    pub mean_tail: Vec<f64>,
    pub mean_square_error: f64,
    pub full_square_error: f64,
}

/// Queue length of the `r`-th server in decreasing-length order, read off
/// tail counts (`tails[0] = M`).
fn length_of_rank(tails: &[u64], r: u64) -> usize {
    let mut k = 1;
    while k < tails.len() && tails[k] > r {
        k += 1;
    }
    k - 1
}

fn sample_event<R: Rng + ?Sized>(
    tails: &[u64],
    lambda: f64,
    choices: usize,
    rng: &mut R,
) -> (f64, Event) {
    let m = tails[0];
    let busy = tails.get(1).copied().unwrap_or(0);
    let arrival_rate = lambda * m as f64;
    let total = arrival_rate + busy as f64;
    let e: f64 = rng.sample(Exp1);
    let dt = e / total;
    if rng.random::<f64>() * total < arrival_rate {
        let shortest = (0..choices)
            .map(|_| length_of_rank(tails, rng.random_range(0..m)))
            .min()
            .expect("at least one choice");
        (dt, Event::arrival(shortest + 1))
    } else {
        let r = rng.random_range(0..busy);
        (dt, Event::departure(length_of_rank(tails, r)))
    }
}

/// Samples the holding time and the next transition out of `state`.
pub fn next_event<R: Rng + ?Sized>(
    state: &OccupancyState,
    params: &ModelParams,
    rng: &mut R,
) -> (f64, Event) {
    sample_event(&state.tail_counts(), params.lambda, params.choices, rng)
}

/// Applies `e`, returning the new state.
pub fn apply_event(state: &OccupancyState, e: Event) -> Result<OccupancyState> {
    let mut next = state.clone();
    apply_event_in_place(&mut next, e)?;
    Ok(next)
}

pub fn apply_event_in_place(state: &mut OccupancyState, e: Event) -> Result<()> {
    if e.level == 0 {
        return Err(Error::InvalidState("event level must be at least 1".into()));
    }
    match e.kind {
        EventKind::Arrival => state.move_server(e.level - 1, e.level),
        EventKind::Departure => state.move_server(e.level, e.level - 1),
    }
}

/// Every transition with positive rate out of `state` and its rate:
/// arrivals at level `k` with `λM(s_{k-1}^d - s_k^d)`, departures at level
/// `k` with `M(s_k - s_{k+1})`.
pub fn transition_rates(state: &OccupancyState, params: &ModelParams) -> Vec<(Event, f64)> {
    let tails = state.tail_counts();
    let m = tails[0] as f64;
    let d = params.choices as i32;
    let frac = |k: usize| tails.get(k).copied().unwrap_or(0) as f64 / m;
    let mut out = Vec::new();
    for k in 1..tails.len() {
        if tails[k - 1] > tails[k] {
            let rate = params.lambda * m * (frac(k - 1).powi(d) - frac(k).powi(d));
            out.push((Event::arrival(k), rate));
        }
        if tails[k] > tails.get(k + 1).copied().unwrap_or(0) {
            out.push((Event::departure(k), m * (frac(k) - frac(k + 1))));
        }
    }
    out
}

/// Tail-count chain state with running squared distances to equilibrium.
struct Engine {
    lambda: f64,
    choices: usize,
    m: f64,
    tails: Vec<u64>,
    star: Vec<f64>,
    n_report: usize,
    sq_report: f64,
    sq_full: f64,
}

impl Engine {
    fn new(params: &ModelParams, n_report: usize) -> Self {
        let mut star = vec![1.0];
        loop {
            let k = star.len();
            let v = equilibrium_level(params.lambda, k);
            star.push(v);
            if v == 0.0 && k > n_report {
                break;
            }
        }
        let mut engine = Self {
            lambda: params.lambda,
            choices: params.choices,
            m: params.servers as f64,
            tails: vec![params.servers as u64, 0],
            star,
            n_report,
            sq_report: 0.0,
            sq_full: 0.0,
        };
        engine.recompute();
        engine
    }

    fn star(&self, k: usize) -> f64 {
        self.star.get(k).copied().unwrap_or(0.0)
    }

    fn frac(&self, k: usize) -> f64 {
        self.tails.get(k).copied().unwrap_or(0) as f64 / self.m
    }

    fn recompute(&mut self) {
        let top = self.tails.len().max(self.star.len());
        let (mut rep, mut full) = (0.0, 0.0);
        for k in 1..top {
            let x = self.frac(k) - self.star(k);
            full += x * x;
            if k <= self.n_report {
                rep += x * x;
            }
        }
        self.sq_report = rep;
        self.sq_full = full;
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, Event) {
        sample_event(&self.tails, self.lambda, self.choices, rng)
    }

    /// Applies `e` and returns the tail level that changed.
    fn apply(&mut self, e: Event) -> usize {
        let k = e.level;
        if k + 1 >= self.tails.len() {
            self.tails.resize(k + 2, 0);
        }
        let before = self.frac(k) - self.star(k);
        match e.kind {
            EventKind::Arrival => self.tails[k] += 1,
            EventKind::Departure => self.tails[k] -= 1,
        }
        let after = self.frac(k) - self.star(k);
        let delta = after * after - before * before;
        self.sq_full += delta;
        if k <= self.n_report {
            self.sq_report += delta;
        }
        k
    }

    fn occupancy(&self) -> OccupancyState {
        OccupancyState::from_tail_counts(&self.tails).expect("tail counts stay monotone")
    }
}

/// Warmup followed by time-weighted batch means over
/// `(warmup_time, horizon_time]`, starting from the empty system.
pub fn simulate(params: &ModelParams, config: &SimConfig) -> Result<StationaryEstimate> {
    let cfg = config.resolve(params)?;
    let mut rng = make_rng(cfg.seed, cfg.stream);
    let mut engine = Engine::new(params, cfg.n_report);

    let (warm, end, nb, nr) = (cfg.warmup_time, cfg.horizon_time, cfg.batches, cfg.n_report);
    let blen = (end - warm) / nb as f64;
    let batch_edge = |b: usize| if b + 1 >= nb { end } else { warm + (b + 1) as f64 * blen };

    let mut tail_area = vec![vec![0.0; nr]; nb];
    let mut sq_area = vec![[0.0f64; 2]; nb];
    let mut last = vec![warm; nr + 1];
    let mut cur = 0usize;
    let mut cur_end = batch_edge(0);
    let mut t = 0.0;
    let mut events = 0u64;

    loop {
        let (dt, ev) = engine.sample(&mut rng);
        let t_next = t + dt;
        let mut a = t.max(warm);
        let b = t_next.min(end);
        while a < b && cur < nb {
            let seg = b.min(cur_end);
            sq_area[cur][0] += engine.sq_report * (seg - a);
            sq_area[cur][1] += engine.sq_full * (seg - a);
            a = seg;
            if seg >= cur_end {
                for k in 1..=nr {
                    tail_area[cur][k - 1] += engine.frac(k) * (cur_end - last[k]);
                    last[k] = cur_end;
                }
                engine.recompute();
                cur += 1;
                if cur < nb {
                    cur_end = batch_edge(cur);
                }
            }
        }
        if t_next >= end {
            break;
        }
        let k = ev.level;
        if k <= nr && t_next > warm {
            tail_area[cur][k - 1] += engine.frac(k) * (t_next - last[k]);
            last[k] = t_next;
        }
        engine.apply(ev);
        t = t_next;
        events += 1;
    }

    let lens: Vec<f64> = (0..nb)
        .map(|b| batch_edge(b) - if b == 0 { warm } else { batch_edge(b - 1) })
        .collect();
    let tails_ci: Vec<MeanCi> = (0..nr)
        .map(|k| {
            let v: Vec<f64> = (0..nb).map(|b| tail_area[b][k] / lens[b]).collect();
            MeanCi::from_samples(&v)
        })
        .collect();
    let sq_ci = |q: usize| {
        let v: Vec<f64> = (0..nb).map(|b| sq_area[b][q] / lens[b]).collect();
        MeanCi::from_samples(&v)
    };
    let (rep, full) = (sq_ci(0), sq_ci(1));
    Ok(StationaryEstimate {
        mean_tail: tails_ci.iter().map(|c| c.mean).collect(),
        mean_square_error: rep.mean,
        full_square_error: full.mean,
        ci_halfwidth: EstimateCi {
            mean_tail: tails_ci.iter().map(|c| c.ci).collect(),
            mean_square_error: rep.ci,
            full_square_error: full.ci,
        },
        total_events: events,
        seed_used: cfg.seed,
        stream_used: cfg.stream,
        warmup_time: warm,
        horizon_time: end,
        batches: nb,
    })
}

/// Stationary mean-square distance to the mean-field equilibrium over all
/// levels (the levels beyond the deepest occupied one contribute
/// `Σ (s*_k)^2` exactly). Returns `(mse, ci)`.
pub fn estimate_mse(params: &ModelParams, config: &SimConfig, n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    let cfg = SimConfig {
        n_report: n,
        ..config.clone()
    };
    let est = simulate(params, &cfg)?;
    Ok((est.full_square_error, est.ci_halfwidth.full_square_error))
}

/// States observed at Poisson inspection times inside the averaging window.
#[derive(Debug, Clone)]
pub struct StateSample {
    pub times: Vec<f64>,
    pub states: Vec<OccupancyState>,
    pub window: (f64, f64),
    /// True when the sample hit its size cap before the end of the window.
    pub partial: bool,
}

/// Runs the chain like [`simulate`] and records the state at independent
/// exponential inspection times with mean spacing `window / target`
/// (time-stationary by PASTA). At most `cap` states are kept.
pub fn sample_states(
    params: &ModelParams,
    config: &SimConfig,
    target: usize,
    cap: usize,
) -> Result<StateSample> {
    let cfg = config.resolve(params)?;
    if target == 0 || cap == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    let mut rng = make_rng(cfg.seed, cfg.stream);
    let mut inspect = make_rng(cfg.seed, cfg.stream ^ (1 << 63));
    let (warm, end) = (cfg.warmup_time, cfg.horizon_time);
    let rate = target as f64 / (end - warm);
    let mut next_look = warm + inspect.sample::<f64, _>(Exp1) / rate;
    let mut engine = Engine::new(params, cfg.n_report);
    let mut out = StateSample {
        times: Vec::new(),
        states: Vec::new(),
        window: (warm, end),
        partial: false,
    };
    let mut t = 0.0;
    loop {
        let (dt, ev) = engine.sample(&mut rng);
        let t_next = t + dt;
        while next_look < t_next && next_look < end {
            if out.states.len() == cap {
                out.partial = true;
                return Ok(out);
            }
            out.times.push(next_look);
            out.states.push(engine.occupancy());
            next_look += inspect.sample::<f64, _>(Exp1) / rate;
        }
        if t_next >= end {
            return Ok(out);
        }
        engine.apply(ev);
        t = t_next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example_state() -> OccupancyState {
        OccupancyState::from_counts(vec![1, 2, 1]).unwrap()
    }

    #[test]
    fn rank_to_length() {
        // lengths by rank: 2, 1, 1, 0
        let tails = example_state().tail_counts();
        let lengths: Vec<_> = (0..4).map(|r| length_of_rank(&tails, r)).collect();
        assert_eq!(lengths, vec![2, 1, 1, 0]);
    }

    #[test]
    fn example_rates() {
        let p = ModelParams::new(0.6, 4).unwrap();
        let rates = transition_rates(&example_state(), &p);
        let get = |e: Event| rates.iter().find(|(x, _)| *x == e).map(|r| r.1);
        assert!((get(Event::departure(2)).unwrap() - 1.0).abs() < 1e-15);
        assert!((get(Event::arrival(2)).unwrap() - 2.0 * 0.6).abs() < 1e-15);
        assert!((get(Event::departure(1)).unwrap() - 2.0).abs() < 1e-15);
        let total: f64 = rates.iter().map(|r| r.1).sum();
        assert!((total - (0.6 * 4.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn empirical_event_frequencies_match_rates() {
        let p = ModelParams::new(0.6, 4).unwrap();
        let s = example_state();
        let rates = transition_rates(&s, &p);
        let total: f64 = rates.iter().map(|r| r.1).sum();
        let mut rng = make_rng(3, 0);
        let draws = 200_000;
        let mut hits = std::collections::HashMap::new();
        let mut mean_dt = 0.0;
        for _ in 0..draws {
            let (dt, e) = next_event(&s, &p, &mut rng);
            mean_dt += dt;
            *hits.entry(e).or_insert(0usize) += 1;
        }
        assert!((mean_dt / draws as f64 * total - 1.0).abs() < 0.01);
        for (e, r) in &rates {
            let p_hat = hits.get(e).copied().unwrap_or(0) as f64 / draws as f64;
            let p = r / total;
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((p_hat - p).abs() < 5.0 * sd, "{e:?}: {p_hat} vs {p}");
        }
        assert_eq!(hits.len(), rates.len());
    }

    #[test]
    fn empty_system_only_arrivals() {
        let p = ModelParams::new(0.5, 10).unwrap();
        let mut rng = make_rng(1, 0);
        for _ in 0..100 {
            let (_, e) = next_event(&OccupancyState::empty(10), &p, &mut rng);
            assert_eq!(e, Event::arrival(1));
        }
    }

    #[test]
    fn apply_examples() {
        let s = example_state();
        let d = apply_event(&s, Event::departure(2)).unwrap();
        assert_eq!(d.counts(), &[1, 3]);
        let a = apply_event(&s, Event::arrival(1)).unwrap();
        assert_eq!(a.counts(), &[0, 3, 1]);
        assert_eq!(apply_event(&a, Event::departure(1)).unwrap(), s);
        assert!(apply_event(&s, Event::departure(3)).is_err());
        assert!(apply_event(&s, Event::arrival(5)).is_err());
    }

    #[test]
    fn config_validation() {
        let p = ModelParams::new(0.5, 10).unwrap();
        let bad = SimConfig {
            warmup_time: Some(10.0),
            horizon_time: Some(5.0),
            ..SimConfig::default()
        };
        assert!(matches!(simulate(&p, &bad), Err(Error::Config(_))));
        let one_batch = SimConfig {
            batches: 1,
            ..SimConfig::default()
        };
        assert!(simulate(&p, &one_batch).is_err());
        let r = SimConfig::default().resolve(&p).unwrap();
        assert_eq!(r.warmup_time, 100.0);
        assert_eq!(r.horizon_time, 10_000.0);
    }

    fn short(seed: u64) -> SimConfig {
        SimConfig {
            seed,
            warmup_time: Some(50.0),
            horizon_time: Some(2050.0),
            batches: 20,
            n_report: 6,
            ..SimConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let p = ModelParams::new(0.7, 50).unwrap();
        let a = simulate(&p, &short(9)).unwrap();
        let b = simulate(&p, &short(9)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&p, &short(10)).unwrap();
        assert_ne!(a.mean_square_error, c.mean_square_error);
    }

    #[test]
    fn incremental_square_error_matches_recompute() {
        let p = ModelParams::new(0.8, 7).unwrap();
        let mut engine = Engine::new(&p, 3);
        let mut rng = make_rng(4, 0);
        for _ in 0..5000 {
            let (_, e) = engine.sample(&mut rng);
            engine.apply(e);
        }
        let (rep, full) = (engine.sq_report, engine.sq_full);
        engine.recompute();
        assert!((rep - engine.sq_report).abs() < 1e-12);
        assert!((full - engine.sq_full).abs() < 1e-12);
    }

    #[test]
    fn near_empty_system_is_close_to_equilibrium() {
        let p = ModelParams::new(0.01, 100).unwrap();
        let (mse, _) = estimate_mse(&p, &short(2), 4).unwrap();
        assert!(mse < 1e-3, "{mse}");
    }

    #[test]
    fn utilization_matches_lambda() {
        let p = ModelParams::new(0.7, 200).unwrap();
        let est = simulate(&p, &short(5)).unwrap();
        let ci = est.ci_halfwidth.mean_tail[0];
        assert!((est.mean_tail[0] - 0.7).abs() <= 3.0 * ci, "{} ± {ci}", est.mean_tail[0]);
        assert!(est.mean_tail.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sample_states_window_and_cap() {
        let p = ModelParams::new(0.5, 20).unwrap();
        let s = sample_states(&p, &short(1), 100, 1000).unwrap();
        assert!(!s.partial);
        assert!(s.times.iter().all(|&t| t > 50.0 && t < 2050.0));
        assert!(s.times.windows(2).all(|w| w[0] < w[1]));
        assert!((s.states.len() as f64 - 100.0).abs() < 50.0);
        let c = sample_states(&p, &short(1), 100, 10).unwrap();
        assert!(c.partial);
        assert_eq!(c.states.len(), 10);
        assert_eq!(c.states[..], s.states[..10]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn events_conserve_servers_and_monotone_tails(
            seed in 0u64..10_000,
            lambda in 0.05f64..0.95,
            servers in 1usize..30,
            d in 1usize..4,
        ) {
            let p = ModelParams::with_choices(lambda, servers, d).unwrap();
            let mut rng = make_rng(seed, 0);
            let mut s = OccupancyState::empty(servers);
            for _ in 0..300 {
                let (dt, e) = next_event(&s, &p, &mut rng);
                prop_assert!(dt > 0.0);
                prop_assert!(e.level >= 1);
                s = apply_event(&s, e).unwrap();
                prop_assert_eq!(s.servers(), servers as u64);
                let tail = s.to_tail(servers, s.max_level() + 1).unwrap();
                prop_assert!(tail.is_monotone());
            }
        }
    }
}
