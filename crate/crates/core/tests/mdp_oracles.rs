mod common;

use common::{max_abs_diff, random_deterministic, random_policy, rng};
use nalgebra::DVector;
use sapp_core::envs::{build_chain_mdp, garnet};
use sapp_core::mdp::{
    exact_policy_values, expected_return, iterative_policy_values, monte_carlo_return,
    optimal_policy, truncation_horizon,
};
use sapp_core::{PolicyTable, TabularMdp};

#[test]
fn linear_solve_agrees_with_iteration() {
    let mut r = rng(11);
    for seed in 0..10 {
        let mdp = garnet(12, 3, 4, 0.9, seed).unwrap();
        let pi = random_policy(12, 3, 0.0, &mut r);
        let exact = exact_policy_values(&mdp, &pi).unwrap();
        // 0.9^500 is far below 1e-8.
        let iter = iterative_policy_values(&mdp, &pi, 500).unwrap();
        assert!(max_abs_diff(&exact.v, &iter) < 1e-8, "seed {seed}");
    }
}

#[test]
fn value_solution_invariants() {
    let mut r = rng(12);
    for seed in 0..20 {
        let g = [0.5, 0.9, 0.99][seed as usize % 3];
        let mdp = garnet(10, 4, 3, g, seed).unwrap();
        let pi = random_policy(10, 4, 0.0, &mut r);
        let sol = exact_policy_values(&mdp, &pi).unwrap();
        let k = mdp.num_actions();
        for s in 0..mdp.num_states() {
            let contracted: f64 = (0..k).map(|a| pi.prob(s, a) * sol.q[s * k + a]).sum();
            assert!((contracted - sol.v[s]).abs() < 1e-9);
        }
        assert!((sol.occupancy_raw.sum() - 1.0 / (1.0 - g)).abs() < 1e-9);
        assert!(sol.occupancy_raw.iter().all(|&x| x >= 0.0));
        assert!((sol.occupancy_norm.sum() - 1.0).abs() < 1e-12);
        assert!(sol.q.amax() <= 1.0 / (1.0 - g) + 1e-9);

        // Return through values and through occupancy.
        let ret = mdp.initial_dist().dot(&sol.v);
        let via_occ = (&sol.occupancy_norm / (1.0 - g)).dot(&mdp.contract(&pi, mdp.reward()));
        assert!((ret - via_occ).abs() < 1e-9, "seed {seed}: {ret} vs {via_occ}");

        // Bellman residual.
        let backup = mdp.reward() + mdp.transition() * &sol.v * g;
        assert!(max_abs_diff(&backup, &sol.q) < 1e-9);
    }
}

#[test]
fn optimal_policy_beats_every_deterministic_policy() {
    let mut r = rng(13);
    for seed in 0..5 {
        let mdp = garnet(5, 3, 2, 0.9, 100 + seed).unwrap();
        let (pi_star, sol) = optimal_policy(&mdp, 1e-10).unwrap();
        let best = mdp.initial_dist().dot(&sol.v);
        assert!((best - expected_return(&mdp, &pi_star).unwrap()).abs() < 1e-12);
        for _ in 0..50 {
            let other = random_deterministic(5, 3, &mut r);
            assert!(expected_return(&mdp, &other).unwrap() <= best + 1e-9);
        }
        // v* is a fixed point of one more optimality backup.
        let q = mdp.backup(&sol.v);
        let again = DVector::from_fn(5, |s, _| (0..3).map(|a| q[s * 3 + a]).fold(f64::MIN, f64::max));
        assert!(max_abs_diff(&again, &sol.v) < 1e-8);
        assert_eq!(pi_star.mode_actions().len(), 5);
    }
}

#[test]
fn optimal_policy_heads_for_the_rewarding_terminal() {
    let mdp = build_chain_mdp(2, 2, 0.0, 1.0, 0.9).unwrap();
    let (pi, sol) = optimal_policy(&mdp, 1e-10).unwrap();
    // s0 takes the right action.
    assert_eq!(pi.prob(0, 1), 1.0);
    assert!((mdp.initial_dist().dot(&sol.v) - 0.9f64.powi(2)).abs() < 1e-9);
}

#[test]
fn monte_carlo_agrees_on_small_garnets() {
    let mut r = rng(14);
    for seed in 0..3 {
        let mdp = garnet(6, 2, 3, 0.8, 200 + seed).unwrap();
        let pi = random_policy(6, 2, 0.0, &mut r);
        let h = truncation_horizon(0.8, 1e-6);
        let (mean, se) = monte_carlo_return(&mdp, &pi, 40_000, h, seed).unwrap();
        let exact = expected_return(&mdp, &pi).unwrap();
        assert!((mean - exact).abs() < 4.0 * se + 1e-6, "{mean} vs {exact} (se {se})");
        let again = monte_carlo_return(&mdp, &pi, 40_000, h, seed).unwrap();
        assert_eq!(again, (mean, se));
    }
}

#[test]
fn garnet_seeds_give_distinct_mdps() {
    let mdps: Vec<TabularMdp> = (0..15).map(|s| garnet(6, 2, 3, 0.9, s).unwrap()).collect();
    for i in 0..mdps.len() {
        for j in i + 1..mdps.len() {
            assert_ne!(mdps[i].transition(), mdps[j].transition(), "seeds {i} and {j}");
        }
    }
}

#[test]
fn json_round_trip_preserves_values() {
    let mdp = garnet(7, 3, 3, 0.95, 9).unwrap();
    let back: TabularMdp = serde_json::from_str(&serde_json::to_string(&mdp).unwrap()).unwrap();
    assert_eq!(mdp, back);
    let pi = PolicyTable::uniform(7, 3);
    assert_eq!(expected_return(&mdp, &pi).unwrap(), expected_return(&back, &pi).unwrap());
}

#[test]
fn start_distribution_override_reweights_returns() {
    let mdp = garnet(4, 2, 2, 0.9, 5).unwrap();
    let pi = PolicyTable::uniform(4, 2);
    let v = exact_policy_values(&mdp, &pi).unwrap().v;
    let mut rho = DVector::zeros(4);
    rho[2] = 1.0;
    let moved = mdp.with_initial_dist(rho).unwrap();
    assert!((expected_return(&moved, &pi).unwrap() - v[2]).abs() < 1e-12);
}
