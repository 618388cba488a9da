//! Cross-module checks: simulator against mean-field, generator through two
//! independent routes, certificate regimes, remainder scaling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supermarket::lyapunov::{base_weights, tilde_weights, verify_decay};
use supermarket::meanfield::{integrate, random_initial, solve_to_equilibrium, IntegratorConfig};
use supermarket::model::{equilibrium_level, shift, unshift};
use supermarket::perturbation::{remainder, SensitivitySetup};
use supermarket::simulator::{simulate, transition_rates, SimConfig};
use supermarket::stein::{generator_apply_g, generator_neighbors, g_value};
use supermarket::{equilibrium, ModelParams, OccupancyState, ShiftedState, TailState};

fn tight() -> IntegratorConfig {
    IntegratorConfig {
        rel_tol: 1e-11,
        abs_tol: 1e-13,
        settle_tol: 1e-12,
        ..IntegratorConfig::default()
    }
}

#[test]
fn large_system_tails_sit_near_equilibrium() {
    let lambda = 0.6;
    let params = ModelParams::new(lambda, 2000).unwrap();
    let cfg = SimConfig {
        seed: 5,
        warmup_time: Some(50.0),
        horizon_time: Some(550.0),
        n_report: 4,
        ..SimConfig::default()
    };
    let est = simulate(&params, &cfg).unwrap();
    let star = equilibrium(lambda, 4).unwrap();
    for k in 0..4 {
        // O(1/M) bias on top of the sampling error
        let gap = (est.mean_tail[k] - star[k]).abs();
        assert!(gap <= 3.0 * est.ci_halfwidth.mean_tail[k] + 5e-3, "level {}: {gap}", k + 1);
    }
}

#[test]
fn generator_by_neighbors_matches_direct_differences() {
    let lambda = 0.5;
    let params = ModelParams::new(lambda, 10).unwrap();
    let n = 4;
    let s = TailState::new(vec![0.7, 0.4, 0.1, 0.0]).unwrap();
    let gx = g_value(&shift(&s, lambda).unwrap(), lambda, n, &tight()).unwrap().value;
    let mut by_hand = 0.0;
    for (rate, y) in generator_neighbors(&s, &params).unwrap() {
        let y = TailState::new(y.as_slice()[..n].to_vec()).unwrap();
        let gy = g_value(&shift(&y, lambda).unwrap(), lambda, n, &tight()).unwrap().value;
        by_hand += rate * (gy - gx);
    }
    let gen = generator_apply_g(&s, &params, n, &tight()).unwrap();
    assert!((gen - by_hand).abs() < 1e-7 * by_hand.abs().max(1.0), "{gen} vs {by_hand}");
}

#[test]
fn neighbor_rates_match_simulator_rates() {
    let params = ModelParams::new(0.7, 8).unwrap();
    let occ = OccupancyState::from_counts(vec![2, 3, 2, 1]).unwrap();
    let s = occ.to_tail(8, 3).unwrap();
    let from_sim: f64 = transition_rates(&occ, &params).iter().map(|(_, r)| r).sum();
    let from_nb: f64 = generator_neighbors(&s, &params).unwrap().iter().map(|(r, _)| r).sum();
    // total outflow λM + M s_1
    let expect = 0.7 * 8.0 + 6.0;
    assert!((from_sim - expect).abs() < 1e-12);
    assert!((from_nb - expect).abs() < 1e-12);
}

#[test]
fn certificate_regimes() {
    let certified = |l: f64, n: usize| {
        base_weights(l, n).unwrap().regime.certified && tilde_weights(l, n).unwrap().regime.certified
    };
    assert!(certified(0.5, 10));
    assert!(certified(0.7, 40));
    assert!(!certified(0.7, 10));
    assert!(!certified(0.7, 20));
    for n in [10, 20, 40] {
        assert!(!certified(0.9, n));
    }
}

#[test]
fn decay_holds_outside_the_certified_regime_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (lambda, n) in [(0.9, 12), (0.7, 10)] {
        let cert = base_weights(lambda, n).unwrap();
        for _ in 0..5 {
            let x0 = random_initial(lambda, n, &mut rng);
            let (traj, _) = solve_to_equilibrium(&x0, lambda, n, &IntegratorConfig::default()).unwrap();
            assert!(verify_decay(&traj, &cert, 0.0).unwrap().passed);
        }
    }
}

#[test]
fn remainder_is_quadratic_in_epsilon() {
    let lambda = 0.5;
    let n = 6;
    let x0 = shift(&TailState::new(vec![0.9, 0.5, 0.2, 0.05, 0.0, 0.0]).unwrap(), lambda).unwrap();
    let z = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let cfg = IntegratorConfig::default();
    let a = remainder(&SensitivitySetup::new(x0.clone(), z.clone(), 2e-3), lambda, n, &cfg).unwrap();
    let b = remainder(&SensitivitySetup::new(x0, z, 1e-3), lambda, n, &cfg).unwrap();
    let ratio = a.l1_integral / b.l1_integral;
    assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
}

#[test]
fn trajectories_stay_valid_tails() {
    let lambda = 0.8;
    let n = 15;
    let cfg = IntegratorConfig {
        t_max: Some(40.0),
        ..IntegratorConfig::default()
    };
    let x0 = shift(&TailState::new(vec![1.0; n]).unwrap(), lambda).unwrap();
    let traj = integrate(&x0, lambda, n, &cfg).unwrap();
    for i in 0..traj.len() {
        let s = unshift(&traj.state(i), lambda).unwrap();
        assert!(s.as_slice().iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
    }
    // the deepest level relaxes toward its tiny equilibrium value
    let end = unshift(&traj.at(40.0), lambda).unwrap();
    assert!(end.as_slice()[n - 1] < 0.5);
    assert!(equilibrium_level(lambda, n) < 1e-300);
    assert_eq!(ShiftedState::zeros(n).l1_norm(), 0.0);
}
