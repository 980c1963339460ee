mod common;

use common::instance;
use sapp_core::data::generate_dataset;
use sapp_core::dice::{exact_pair_ratios, ratio_policy_value, solve_dualdice_model, DiceSolver};
use sapp_core::envs::{build_chain_mdp, garnet, ChainLayout};
use sapp_core::mdp::expected_return;
use sapp_core::pessimism::FTransform;
use sapp_core::sacql::{train, TrainConfig, WeightMode};
use sapp_core::PolicyTable;

#[test]
fn gradient_play_converges_to_the_closed_form() {
    for seed in 0..3 {
        let inst = instance(6, 2, 3, 0.8, 200, 20, 40 + seed);
        let target = PolicyTable::uniform(6, 2);
        let rho = inst.ctx.model.initial_hat().clone();
        let closed = solve_dualdice_model(&inst.ctx.model, &target, 0.8, &rho, &DiceSolver::ClosedForm).unwrap();
        let sgd = DiceSolver::AlternatingSgd {
            steps: 100_000,
            lr_zeta: 0.5,
            lr_nu: None,
            batch_size: None,
            seed,
        };
        let iter = solve_dualdice_model(&inst.ctx.model, &target, 0.8, &rho, &sgd).unwrap();
        let gap = (&closed.zeta - &iter.zeta).amax();
        assert!(gap < 1e-3, "seed {seed}: gap {gap}");
    }
}

#[test]
fn closed_form_matches_exact_ratios_in_the_empirical_mdp() {
    for seed in 0..5 {
        // Every pair is covered, so the restricted system is the whole one.
        let inst = instance(8, 2, 3, 0.9, 300, 15, 60 + seed);
        assert!(inst.ctx.model.support().iter().all(|&x| x));
        let target = PolicyTable::uniform(8, 2);
        let rho = inst.ctx.model.initial_hat().clone();
        let ctx = sapp_core::pessimism::OfflineContext::new(inst.ctx.model.clone(), 0.9, &rho).unwrap();
        let zeta = solve_dualdice_model(&ctx.model, &target, 0.9, &rho, &DiceSolver::ClosedForm).unwrap().zeta;
        let exact = exact_pair_ratios(&ctx, &target).unwrap();
        let gap = (&zeta - &exact).amax();
        assert!(gap < 1e-6 * (1.0 + exact.amax()), "seed {seed}: gap {gap}");

        // The reweighted data mean is (1 - gamma) times the return in M_D.
        let est = ratio_policy_value(&zeta, &inst.dataset, 2);
        let ret = expected_return(&ctx.mdp_d, &target).unwrap();
        assert!((est - 0.1 * ret).abs() < 1e-6, "{est} vs {}", 0.1 * ret);
        let mean_zeta: f64 = inst.dataset.transitions().iter().map(|t| zeta[t.s * 2 + t.a]).sum::<f64>()
            / inst.dataset.size() as f64;
        assert!((mean_zeta - 1.0).abs() < 1e-9);
    }
}

#[test]
fn rare_branch_gets_the_larger_ratio() {
    let layout = ChainLayout { num_left: 1, num_right: 1 };
    let mdp = build_chain_mdp(1, 1, 0.0, 1.0, 0.9).unwrap();
    let data = generate_dataset(&mdp, &layout.split_policy(0.1).unwrap(), 200, 2, 3).unwrap();
    let model = sapp_core::data::build_empirical_model(&data, layout.num_states(), 2).unwrap();
    let uniform = PolicyTable::uniform(layout.num_states(), 2);
    let zeta = solve_dualdice_model(&model, &uniform, 0.9, model.initial_hat(), &DiceSolver::ClosedForm)
        .unwrap()
        .zeta;
    let (l, r) = (layout.left(1), layout.right(1));
    let rare = zeta[2 * l] + zeta[2 * l + 1];
    let common = zeta[2 * r] + zeta[2 * r + 1];
    assert!(rare > common, "{rare} vs {common}");
}

#[test]
fn ratio_estimates_order_policies_like_their_returns() {
    let inst = instance(6, 2, 3, 0.9, 400, 30, 88);
    let rho = inst.ctx.model.initial_hat().clone();
    let (good, _) = sapp_core::mdp::optimal_policy(&inst.ctx.mdp_d, 1e-10).unwrap();
    let bad = PolicyTable::deterministic(
        &good.mode_actions().iter().map(|a| 1 - a).collect::<Vec<_>>(),
        2,
    )
    .unwrap();
    let est = |pi: &PolicyTable| {
        let z = solve_dualdice_model(&inst.ctx.model, pi, 0.9, &rho, &DiceSolver::ClosedForm).unwrap().zeta;
        ratio_policy_value(&z, &inst.dataset, 2)
    };
    let (rg, rb) = (expected_return(&inst.mdp, &good).unwrap(), expected_return(&inst.mdp, &bad).unwrap());
    assert!(rg > rb);
    assert!(est(&good) > est(&bad));
}

fn sixteen_state_setup() -> (sapp_core::TabularMdp, sapp_core::data::OfflineDataset) {
    let mdp = garnet(16, 4, 4, 0.9, 5).unwrap();
    let data = generate_dataset(&mdp, &PolicyTable::uniform(16, 4), 500, 20, 6).unwrap();
    assert_eq!(data.size(), 10_000);
    (mdp, data)
}

#[test]
fn training_with_dualdice_weights_tracks_exact_weights() {
    let (mdp, data) = sixteen_state_setup();
    let base = TrainConfig {
        alpha: 1.0,
        steps: 60,
        ..TrainConfig::default()
    };
    let exact = train(&mdp, &data, &base).unwrap().final_return();
    let dice = train(
        &mdp,
        &data,
        &TrainConfig {
            weight_mode: WeightMode::Dualdice,
            ..base.clone()
        },
    )
    .unwrap()
    .final_return();
    assert!((exact - dice).abs() <= 0.1 * exact.abs(), "{exact} vs {dice}");
}

#[test]
fn training_is_deterministic() {
    let (mdp, data) = sixteen_state_setup();
    let config = TrainConfig {
        weight_mode: WeightMode::RandomUniform,
        steps: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&mdp, &data, &config).unwrap();
    let b = train(&mdp, &data, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checkpoints.len(), 10);
}

#[test]
fn unit_weights_coincide_with_plain_cql() {
    let (mdp, data) = sixteen_state_setup();
    let cql = TrainConfig {
        weight_mode: WeightMode::ConstantOne,
        steps: 20,
        ..TrainConfig::default()
    };
    let sa = TrainConfig {
        weight_mode: WeightMode::ExactRatio,
        f: FTransform::normalized_log(1.0, 1.0),
        ..cql.clone()
    };
    let a = train(&mdp, &data, &cql).unwrap();
    let b = train(&mdp, &data, &sa).unwrap();
    let hashes = |t: &sapp_core::sacql::TrainTrace| t.checkpoints.iter().map(|c| c.q_hash.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&a), hashes(&b));
    assert_eq!(a.final_q, b.final_q);
}

#[test]
fn zero_alpha_training_approaches_the_empirical_optimum() {
    let (mdp, data) = sixteen_state_setup();
    let config = TrainConfig {
        alpha: 0.0,
        temperature: 1e-3,
        steps: 200,
        ..TrainConfig::default()
    };
    let trace = train(&mdp, &data, &config).unwrap();
    let model = sapp_core::data::build_empirical_model(&data, 16, 4).unwrap();
    let mdp_d = model.empirical_mdp(0.9, mdp.initial_dist()).unwrap();
    let (_, best) = sapp_core::mdp::optimal_policy(&mdp_d, 1e-10).unwrap();
    let target = mdp.initial_dist().dot(&best.v);
    let got = expected_return(&mdp_d, &trace.final_policy).unwrap();
    assert!((target - got).abs() < 1e-3 * (1.0 + target.abs()), "{got} vs {target}");
}
