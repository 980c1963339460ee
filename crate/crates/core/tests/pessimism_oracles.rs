mod common;

use common::{instance, max_abs_diff, random_policy, rng};
use nalgebra::DVector;
use proptest::prelude::*;
use sapp_core::mdp::exact_policy_values;
use sapp_core::pessimism::{
    evaluate, proximal_eval, sa_proximal_eval, sa_proximal_eval_with_weights, DisKind, DisSpec,
    FTransform, PessimismSpec,
};
use sapp_core::search::{optimize_policy, PolicyClass};

fn simplex(raw: &[f64]) -> Vec<f64> {
    let t: f64 = raw.iter().sum();
    raw.iter().map(|x| x / t).collect()
}

proptest! {
    #[test]
    fn dis_is_nonnegative_and_zero_at_beta(
        pi in prop::collection::vec(0.0f64..1.0, 4),
        beta in prop::collection::vec(0.01f64..1.0, 4),
        mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        prop_assume!(pi.iter().sum::<f64>() > 1e-3);
        prop_assume!(mask.iter().any(|&m| m));
        let pi = simplex(&pi);
        // beta lives on the supported actions only.
        let masked: Vec<f64> = beta.iter().zip(&mask).map(|(b, &m)| if m { *b } else { 0.0 }).collect();
        let beta = simplex(&masked);
        for kind in [DisKind::Cql, DisKind::Kl, DisKind::Tv] {
            let spec = DisSpec::new(kind);
            prop_assert!(spec.at_state(&pi, &beta, &mask) >= -1e-12);
            prop_assert!(spec.at_state(&beta, &beta, &mask).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_log_is_monotone_and_bounded(
        xs in prop::collection::vec(1e-6f64..1e6, 2..12),
        b0 in 0.0f64..2.0,
        width in 0.0f64..5.0,
    ) {
        let f = FTransform::normalized_log(b0, b0 + width);
        let x = DVector::from_vec(xs);
        let y = f.apply(&x);
        for i in 0..x.len() {
            prop_assert!(y[i] >= b0 - 1e-12 && y[i] <= b0 + width + 1e-12);
            for j in 0..x.len() {
                if x[i] < x[j] {
                    prop_assert!(y[i] <= y[j] + 1e-12);
                }
            }
        }
        // Rescaling every ratio leaves the weights in place.
        let z = f.apply(&(&x * 3.7));
        prop_assert!(max_abs_diff(&y, &z) <= 1e-12);
    }
}

#[test]
fn zero_alpha_is_plain_evaluation_in_the_empirical_mdp() {
    let mut r = rng(21);
    for seed in 0..10 {
        let inst = instance(8, 3, 3, 0.9, 20, 10, seed);
        let pi = random_policy(8, 3, 0.0, &mut r);
        let spec = PessimismSpec::plain(DisSpec::new(DisKind::Cql), 0.0);
        let v = proximal_eval(&inst.ctx, &pi, &spec).unwrap();
        let exact = exact_policy_values(&inst.ctx.mdp_d, &pi).unwrap().v;
        assert!(max_abs_diff(&v, &exact) < 1e-12);
    }
}

#[test]
fn unit_weights_reduce_to_the_plain_evaluator() {
    let mut r = rng(22);
    for seed in 0..10 {
        let inst = instance(8, 3, 3, 0.9, 20, 10, seed);
        let pi = random_policy(8, 3, 0.0, &mut r);
        for kind in [DisKind::Cql, DisKind::Kl, DisKind::Tv] {
            let dis = DisSpec::new(kind);
            let plain = proximal_eval(&inst.ctx, &pi, &PessimismSpec::plain(dis, 0.7)).unwrap();
            let ones = DVector::from_element(8, 1.0);
            let spec = PessimismSpec::state_aware(dis, 0.7, FTransform::normalized_log(1.0, 1.0));
            let via_ones = sa_proximal_eval_with_weights(&inst.ctx, &pi, &spec, &ones).unwrap();
            let via_f = sa_proximal_eval(&inst.ctx, &pi, &spec).unwrap();
            assert!(max_abs_diff(&plain, &via_ones) < 1e-12);
            assert!(max_abs_diff(&plain, &via_f) < 1e-12);
        }
    }
}

#[test]
fn evaluation_is_nonincreasing_in_alpha() {
    let mut r = rng(23);
    for seed in 0..10 {
        let inst = instance(8, 3, 3, 0.9, 20, 10, seed);
        let pi = random_policy(8, 3, 0.0, &mut r);
        let f = FTransform::normalized_log(0.5, 5.0);
        let mut last: Option<DVector<f64>> = None;
        for alpha in [0.0, 0.1, 0.5, 1.0, 4.0] {
            let spec = PessimismSpec::state_aware(DisSpec::new(DisKind::Cql), alpha, f);
            let v = evaluate(&inst.ctx, &pi, &spec).unwrap();
            if let Some(prev) = &last {
                assert!(v.iter().zip(prev.iter()).all(|(a, b)| *a <= b + 1e-12));
            }
            last = Some(v);
        }
    }
}

#[test]
fn softmax_search_matches_enumeration() {
    let mut compared = 0;
    for seed in 0..6 {
        let inst = instance(5, 2, 2, 0.9, 30, 10, 300 + seed);
        let model = &inst.ctx.model;
        let on_support = |pi: &sapp_core::PolicyTable| {
            (0..5).all(|s| !model.visited(s) || (0..2).all(|a| pi.prob(s, a) == 0.0 || model.supported(s, a)))
        };

        // Without pessimism the optimum is deterministic, so both agree.
        let spec = PessimismSpec::plain(DisSpec::new(DisKind::Tv), 0.0);
        let (pi, best) = optimize_policy(&inst.ctx, &spec, &PolicyClass::DeterministicEnumeration).unwrap();
        let (_, soft) = optimize_policy(&inst.ctx, &spec, &PolicyClass::softmax(seed)).unwrap();
        if on_support(&pi) {
            assert!((best - soft).abs() < 1e-3, "seed {seed}: {best} vs {soft}");
            compared += 1;
        }

        // With a penalty the optimum can be stochastic; softmax reaches at
        // least every supported deterministic policy.
        for spec in [
            PessimismSpec::plain(DisSpec::new(DisKind::Tv), 0.5),
            PessimismSpec::state_aware(DisSpec::new(DisKind::Cql), 0.5, FTransform::normalized_log(0.5, 2.0)),
        ] {
            let (pi, best) = optimize_policy(&inst.ctx, &spec, &PolicyClass::DeterministicEnumeration).unwrap();
            let (_, soft) = optimize_policy(&inst.ctx, &spec, &PolicyClass::softmax(seed)).unwrap();
            if on_support(&pi) {
                assert!(soft >= best - 1e-3, "seed {seed}: {best} vs {soft}");
                compared += 1;
            }
        }
    }
    assert!(compared >= 9, "only {compared} comparisons");
}
