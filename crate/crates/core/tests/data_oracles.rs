mod common;

use common::{instance, random_policy, rng};
use nalgebra::DVector;
use sapp_core::data::{
    build_empirical_model, generate_dataset, generate_dataset_with, uncertainty_vector,
    OfflineDataset, SamplingSpec, Termination,
};
use sapp_core::envs::{build_chain_mdp, garnet, ChainLayout};
use sapp_core::PolicyTable;

/// One trajectory down the left branch and nine down the right one.
fn skewed_chain() -> (ChainLayout, OfflineDataset) {
    let layout = ChainLayout {
        num_left: 1,
        num_right: 1,
    };
    let mdp = build_chain_mdp(1, 1, 0.0, 1.0, 0.9).unwrap();
    let left = generate_dataset(&mdp, &layout.branch_policy(true).unwrap(), 1, 2, 1).unwrap();
    let right = generate_dataset(&mdp, &layout.branch_policy(false).unwrap(), 9, 2, 2).unwrap();
    (layout, OfflineDataset::concat(&[left, right]).unwrap())
}

#[test]
fn skewed_chain_counts_and_behavior() {
    let (layout, data) = skewed_chain();
    let model = build_empirical_model(&data, layout.num_states(), 2).unwrap();
    let (l, r) = (layout.left(1), layout.right(1));
    assert_eq!(model.count_s()[l], 1);
    assert_eq!(model.count_s()[r], 9);
    let beta = model.beta_hat();
    assert_eq!((beta.prob(l, 0), beta.prob(l, 1)), (1.0, 0.0));
    assert_eq!((beta.prob(r, 0), beta.prob(r, 1)), (0.0, 1.0));

    // With pi = beta_hat the uncertainty ratio is the root count ratio.
    let u = uncertainty_vector(&model, beta, 1.0).unwrap();
    assert!((u[l] / u[r] - 3.0).abs() < 1e-12);
}

#[test]
fn count_identities_hold() {
    for seed in 0..10 {
        let inst = instance(9, 3, 3, 0.9, 30, 12, seed);
        let m = &inst.ctx.model;
        let (n, k) = (9, 3);
        assert_eq!(m.count_s().iter().sum::<usize>(), inst.dataset.size());
        for s in 0..n {
            let row: usize = (0..k).map(|a| m.count_sa()[s * k + a]).sum();
            assert_eq!(row, m.count_s()[s]);
            for a in 0..k {
                let next: usize = (0..n).map(|t| m.count_sas(s, a, t)).sum();
                assert_eq!(next, m.count_sa()[s * k + a]);
                if m.supported(s, a) {
                    assert!((m.p_hat().row(s * k + a).sum() - 1.0).abs() < 1e-12);
                    let b = m.count_sa()[s * k + a] as f64 / m.count_s()[s] as f64;
                    assert_eq!(m.beta_hat().prob(s, a), b);
                }
            }
            assert_eq!(m.d_data()[s], m.count_s()[s] as f64 / inst.dataset.size() as f64);
        }
        assert!((m.d_data().sum() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn empirical_transitions_concentrate() {
    let mdp = garnet(5, 2, 3, 0.9, 77).unwrap();
    let behavior = PolicyTable::uniform(5, 2);
    let data = generate_dataset(&mdp, &behavior, 2000, 50, 3).unwrap();
    let model = build_empirical_model(&data, 5, 2).unwrap();
    let mut checked = 0;
    for i in 0..10 {
        let n = model.count_sa()[i] as f64;
        if n < 100.0 {
            continue;
        }
        for t in 0..5 {
            let p = mdp.transition()[(i, t)];
            let band = 4.0 * (p * (1.0 - p) / n).sqrt() + 1e-12;
            assert!((model.p_hat()[(i, t)] - p).abs() <= band, "pair {i} -> {t}");
        }
        assert!((model.r_hat()[i] - mdp.reward()[i]).abs() < 1e-12);
        checked += 1;
    }
    assert!(checked >= 8);
}

#[test]
fn csv_and_json_files_round_trip() {
    let inst = instance(6, 2, 2, 0.9, 5, 7, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    inst.dataset.save_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("s,a,r,s_next,is_initial"));
    let back = OfflineDataset::load_csv(&path, inst.dataset.source_seed()).unwrap();
    assert_eq!(back, inst.dataset);
    let json = OfflineDataset::from_json(&inst.dataset.to_json().unwrap()).unwrap();
    assert_eq!(json, inst.dataset);
}

#[test]
fn episodes_have_the_requested_shape() {
    let mdp = garnet(6, 2, 2, 0.9, 8).unwrap();
    let mut r = rng(3);
    let behavior = random_policy(6, 2, 0.1, &mut r);
    let fixed = generate_dataset(&mdp, &behavior, 13, 9, 5).unwrap();
    assert_eq!(fixed.size(), 13 * 9);
    assert_eq!(fixed.transitions().iter().filter(|t| t.is_initial).count(), 13);
    for w in fixed.transitions().windows(2) {
        if !w[1].is_initial {
            assert_eq!(w[0].s_next, w[1].s);
        }
    }

    let mut rho = DVector::zeros(6);
    rho[4] = 1.0;
    let spec = SamplingSpec {
        termination: Termination::Geometric,
        start_dist: Some(rho),
        ..SamplingSpec::fixed(400, 50, 6)
    };
    let geo = generate_dataset_with(&mdp, &behavior, &spec).unwrap();
    assert!(geo.size() < 400 * 50);
    assert!(geo.transitions().iter().filter(|t| t.is_initial).all(|t| t.s == 4));
    // Expected length is about 1 / (1 - gamma) = 10.
    let mean_len = geo.size() as f64 / 400.0;
    assert!((mean_len - 10.0).abs() < 1.5, "{mean_len}");
}

#[test]
fn zero_behavior_rows_are_rejected() {
    let mdp = garnet(3, 2, 2, 0.9, 1).unwrap();
    let bad = PolicyTable::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
    assert!(generate_dataset(&mdp, &bad, 1, 1, 0).is_ok());
    assert!(generate_dataset(&mdp, &bad, 0, 1, 0).is_err());
    assert!(generate_dataset(&mdp, &bad, 1, 0, 0).is_err());
}
