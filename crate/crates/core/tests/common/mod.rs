#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use sapp_core::data::{build_empirical_model, generate_dataset, OfflineDataset};
use sapp_core::envs::garnet;
use sapp_core::pessimism::OfflineContext;
use sapp_core::{PolicyTable, TabularMdp};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows drawn from Dirichlet(1), bounded away from 0 by `floor`.
pub fn random_policy(n: usize, k: usize, floor: f64, rng: &mut impl Rng) -> PolicyTable {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| { let e: f64 = Exp1.sample(&mut *rng); floor + e }).collect();
            let t: f64 = w.iter().sum();
            w.iter().map(|x| x / t).collect()
        })
        .collect();
    PolicyTable::from_rows(&rows).unwrap()
}

pub fn random_deterministic(n: usize, k: usize, rng: &mut impl Rng) -> PolicyTable {
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    PolicyTable::deterministic(&actions, k).unwrap()
}

pub struct Instance {
    pub mdp: TabularMdp,
    pub dataset: OfflineDataset,
    pub ctx: OfflineContext,
}

/// Garnet, a random behavior policy and a fixed-horizon dataset. The
/// context uses the true start distribution.
pub fn instance(
    n: usize,
    k: usize,
    branching: usize,
    discount: f64,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Instance {
    let mdp = garnet(n, k, branching, discount, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let behavior = random_policy(n, k, 0.05, &mut r);
    let dataset = generate_dataset(&mdp, &behavior, episodes, horizon, seed.wrapping_add(1)).unwrap();
    let model = build_empirical_model(&dataset, n, k).unwrap();
    let ctx = OfflineContext::new(model, discount, mdp.initial_dist()).unwrap();
    Instance { mdp, dataset, ctx }
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
