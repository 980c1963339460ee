//! Offline datasets, the empirical model built from their counts, and the
//! count-based uncertainty vector.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{row_samplers, PolicyTable, TabularMdp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub is_initial: bool,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
    is_initial: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    transitions: Vec<Transition>,
    source_seed: u64,
}

/// How episodes end while sampling a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Every episode runs exactly `horizon` steps.
    #[default]
    Fixed,
    /// After each step the episode continues with probability `gamma`, capped
    /// at `horizon` steps. Visit counts then follow the discounted occupancy.
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSpec {
    pub num_episodes: usize,
    pub horizon: usize,
    pub termination: Termination,
    /// Start-state distribution override; `None` uses the MDP's own.
    pub start_dist: Option<DVector<f64>>,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn fixed(num_episodes: usize, horizon: usize, seed: u64) -> Self {
        Self {
            num_episodes,
            horizon,
            termination: Termination::Fixed,
            start_dist: None,
            seed,
        }
    }
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, source_seed: u64) -> Result<Self> {
        if transitions.is_empty() {
            return invalid("dataset must contain at least one transition");
        }
        Ok(Self {
            transitions,
            source_seed,
        })
    }

    /// Appends datasets in order; the seed of the first one is kept.
    pub fn concat(parts: &[OfflineDataset]) -> Result<Self> {
        let seed = parts.first().map_or(0, |d| d.source_seed);
        let transitions = parts
            .iter()
            .flat_map(|d| d.transitions.iter().copied())
            .collect();
        Self::new(transitions, seed)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn size(&self) -> usize {
        self.transitions.len()
    }

    pub fn check_dims(&self, num_states: usize, num_actions: usize) -> Result<()> {
        for (i, t) in self.transitions.iter().enumerate() {
            if t.s >= num_states || t.s_next >= num_states || t.a >= num_actions {
                return invalid(format!(
                    "transition {i} ({}, {}, {}) out of range for {num_states} states, {num_actions} actions",
                    t.s, t.a, t.s_next
                ));
            }
            if !t.r.is_finite() {
                return invalid(format!("transition {i} has non-finite reward"));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for t in &self.transitions {
            w.serialize(CsvRow {
                s: t.s,
                a: t.a,
                r: t.r,
                s_next: t.s_next,
                is_initial: u8::from(t.is_initial),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source_seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut transitions = Vec::new();
        for row in r.deserialize() {
            let row: CsvRow = row?;
            if row.is_initial > 1 {
                return invalid(format!("is_initial must be 0 or 1, got {}", row.is_initial));
            }
            transitions.push(Transition {
                s: row.s,
                a: row.a,
                r: row.r,
                s_next: row.s_next,
                is_initial: row.is_initial == 1,
            });
        }
        Self::new(transitions, source_seed)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>, source_seed: u64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, source_seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        Self::new(d.transitions, d.source_seed)
    }
}

/// Fixed-horizon episodes from `rho` under `behavior`.
pub fn generate_dataset(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    num_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    generate_dataset_with(mdp, behavior, &SamplingSpec::fixed(num_episodes, horizon, seed))
}

pub fn generate_dataset_with(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    spec: &SamplingSpec,
) -> Result<OfflineDataset> {
    if spec.num_episodes == 0 || spec.horizon == 0 {
        return invalid("num_episodes and horizon must both be at least 1");
    }
    mdp.check_policy(behavior)?;
    let start_dist = spec.start_dist.as_ref().unwrap_or(mdp.initial_dist());
    if start_dist.len() != mdp.num_states() {
        return invalid("start distribution has the wrong length");
    }
    let start = WeightedIndex::new(start_dist.iter().copied())
        .map_err(|e| Error::InvalidArgument(format!("start distribution: {e}")))?;
    let actions = row_samplers(behavior.probs())?;
    let next = row_samplers(mdp.transition())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut transitions = Vec::with_capacity(spec.num_episodes * spec.horizon);
    for _ in 0..spec.num_episodes {
        let mut s = start.sample(&mut rng);
        for t in 0..spec.horizon {
            let a = actions[s].sample(&mut rng);
            let i = mdp.index(s, a);
            let s_next = next[i].sample(&mut rng);
            transitions.push(Transition {
                s,
                a,
                r: mdp.reward()[i],
                s_next,
                is_initial: t == 0,
            });
            s = s_next;
            if spec.termination == Termination::Geometric && !rng.random_bool(mdp.discount()) {
                break;
            }
        }
    }
    OfflineDataset::new(transitions, spec.seed)
}

/// Counts and the completed empirical MDP.
///
/// Unsupported pairs (never taken in the data) become a self-loop with
/// reward −1. States never seen as a source state have every action
/// unsupported; their `beta_hat` row is uniform as a placeholder and never
/// read through the support mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalModel {
    num_states: usize,
    num_actions: usize,
    size: usize,
    count_s: Vec<usize>,
    count_sa: Vec<usize>,
    count_sas: Vec<usize>,
    beta_hat: PolicyTable,
    d_data: DVector<f64>,
    p_hat: DMatrix<f64>,
    r_hat: DVector<f64>,
    support: Vec<bool>,
    initial_hat: DVector<f64>,
}

pub fn build_empirical_model(
    dataset: &OfflineDataset,
    num_states: usize,
    num_actions: usize,
) -> Result<EmpiricalModel> {
    if num_states == 0 || num_actions == 0 {
        return invalid("model needs at least one state and one action");
    }
    dataset.check_dims(num_states, num_actions)?;
    let pairs = num_states * num_actions;
    let mut count_s = vec![0usize; num_states];
    let mut count_sa = vec![0usize; pairs];
    let mut count_sas = vec![0usize; pairs * num_states];
    let mut reward_sum = vec![0.0; pairs];
    let mut initial = vec![0usize; num_states];
    for t in dataset.transitions() {
        let i = t.s * num_actions + t.a;
        count_s[t.s] += 1;
        count_sa[i] += 1;
        count_sas[i * num_states + t.s_next] += 1;
        reward_sum[i] += t.r;
        if t.is_initial {
            initial[t.s] += 1;
        }
    }
    let size = dataset.size();

    let mut beta = DMatrix::zeros(num_states, num_actions);
    for s in 0..num_states {
        for a in 0..num_actions {
            beta[(s, a)] = if count_s[s] > 0 {
                count_sa[s * num_actions + a] as f64 / count_s[s] as f64
            } else {
                1.0 / num_actions as f64
            };
        }
    }
    let d_data = DVector::from_fn(num_states, |s, _| count_s[s] as f64 / size as f64);

    let mut p_hat = DMatrix::zeros(pairs, num_states);
    let mut r_hat = DVector::zeros(pairs);
    let support: Vec<bool> = count_sa.iter().map(|&n| n > 0).collect();
    for i in 0..pairs {
        let n = count_sa[i];
        if n > 0 {
            for t in 0..num_states {
                p_hat[(i, t)] = count_sas[i * num_states + t] as f64 / n as f64;
            }
            r_hat[i] = reward_sum[i] / n as f64;
        } else {
            p_hat[(i, i / num_actions)] = 1.0;
            r_hat[i] = -1.0;
        }
    }

    let total_initial: usize = initial.iter().sum();
    let initial_hat = if total_initial > 0 {
        DVector::from_fn(num_states, |s, _| initial[s] as f64 / total_initial as f64)
    } else {
        d_data.clone()
    };

    Ok(EmpiricalModel {
        num_states,
        num_actions,
        size,
        count_s,
        count_sa,
        count_sas,
        beta_hat: PolicyTable::new(beta)?,
        d_data,
        p_hat,
        r_hat,
        support,
        initial_hat,
    })
}

impl EmpiricalModel {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// |D|.
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn count_s(&self) -> &[usize] {
        &self.count_s
    }

    pub fn count_sa(&self) -> &[usize] {
        &self.count_sa
    }

    pub fn count_sas(&self, s: usize, a: usize, s_next: usize) -> usize {
        self.count_sas[self.index(s, a) * self.num_states + s_next]
    }

    pub fn beta_hat(&self) -> &PolicyTable {
        &self.beta_hat
    }

    /// d^D(s) = n(s) / |D|.
    pub fn d_data(&self) -> &DVector<f64> {
        &self.d_data
    }

    /// d^D(s, a) = n(s, a) / |D|.
    pub fn d_data_sa(&self) -> DVector<f64> {
        DVector::from_fn(self.count_sa.len(), |i, _| {
            self.count_sa[i] as f64 / self.size as f64
        })
    }

    pub fn p_hat(&self) -> &DMatrix<f64> {
        &self.p_hat
    }

    pub fn r_hat(&self) -> &DVector<f64> {
        &self.r_hat
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    #[inline]
    pub fn supported(&self, s: usize, a: usize) -> bool {
        self.support[self.index(s, a)]
    }

    pub fn visited(&self, s: usize) -> bool {
        self.count_s[s] > 0
    }

    /// Start-state frequencies of transitions flagged `is_initial`; falls
    /// back to `d_data` when no flag is set.
    pub fn initial_hat(&self) -> &DVector<f64> {
        &self.initial_hat
    }

    /// The completed empirical MDP with the given start distribution.
    pub fn empirical_mdp(&self, discount: f64, initial_dist: &DVector<f64>) -> Result<TabularMdp> {
        TabularMdp::new(
            self.num_states,
            self.num_actions,
            self.p_hat.clone(),
            self.r_hat.clone(),
            discount,
            initial_dist.clone(),
        )
    }

    /// Smallest `beta_hat` over supported pairs (ε_β).
    pub fn min_supported_beta(&self) -> f64 {
        let mut best = f64::INFINITY;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                if self.supported(s, a) {
                    best = best.min(self.beta_hat.prob(s, a));
                }
            }
        }
        best
    }
}

/// `u(s) = sum_a pi(a|s) min(n(s,a)^{-1/2}, cap)`, with unseen pairs
/// contributing `cap`.
pub fn uncertainty_vector(model: &EmpiricalModel, policy: &PolicyTable, cap: f64) -> Result<DVector<f64>> {
    if !(cap > 0.0) {
        return invalid(format!("cap must be positive, got {cap}"));
    }
    if policy.num_states() != model.num_states() || policy.num_actions() != model.num_actions() {
        return invalid("policy dimensions do not match the model");
    }
    Ok(DVector::from_fn(model.num_states(), |s, _| {
        (0..model.num_actions())
            .map(|a| {
                let n = model.count_sa()[model.index(s, a)];
                let u = if n == 0 {
                    cap
                } else {
                    (1.0 / (n as f64).sqrt()).min(cap)
                };
                policy.prob(s, a) * u
            })
            .sum()
    }))
}

/// Per-pair `min(n(s,a)^{-1/2}, cap)`; `uncertainty_vector` is its
/// contraction by the policy.
pub fn pair_uncertainty(model: &EmpiricalModel, cap: f64) -> DVector<f64> {
    DVector::from_fn(model.count_sa().len(), |i, _| {
        let n = model.count_sa()[i];
        if n == 0 {
            cap
        } else {
            (1.0 / (n as f64).sqrt()).min(cap)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state() -> TabularMdp {
        TabularMdp::new(
            1,
            1,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            0.5,
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_single_state_dataset() {
        let mdp = one_state();
        let d = generate_dataset(&mdp, &PolicyTable::uniform(1, 1), 3, 2, 7).unwrap();
        assert_eq!(d.size(), 6);
        for t in d.transitions() {
            assert_eq!((t.s, t.a, t.r, t.s_next), (0, 0, 1.0, 0));
        }
        let m = build_empirical_model(&d, 1, 1).unwrap();
        assert_eq!(m.d_data()[0], 1.0);
        assert_eq!(m.r_hat()[0], 1.0);
        assert_eq!(m.p_hat()[(0, 0)], 1.0);
        assert_eq!(m.initial_hat()[0], 1.0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let mdp = one_state();
        let pi = PolicyTable::uniform(1, 1);
        let a = generate_dataset(&mdp, &pi, 4, 3, 11).unwrap();
        let b = generate_dataset(&mdp, &pi, 4, 3, 11).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with("s,a,r,s_next,is_initial\n"));
    }

    #[test]
    fn rejects_empty_inputs() {
        let mdp = one_state();
        let pi = PolicyTable::uniform(1, 1);
        assert!(generate_dataset(&mdp, &pi, 0, 3, 1).is_err());
        assert!(generate_dataset(&mdp, &pi, 3, 0, 1).is_err());
        assert!(OfflineDataset::new(Vec::new(), 0).is_err());
    }

    #[test]
    fn uncertainty_cases() {
        let t = |s, a| Transition {
            s,
            a,
            r: 0.0,
            s_next: 0,
            is_initial: false,
        };
        let rows: Vec<Transition> = (0..2)
            .flat_map(|s| (0..2).flat_map(move |a| std::iter::repeat_n(t(s, a), 4)))
            .collect();
        let d = OfflineDataset::new(rows, 0).unwrap();
        let m = build_empirical_model(&d, 3, 2).unwrap();
        let pi = PolicyTable::from_rows(&[vec![0.3, 0.7], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let u = uncertainty_vector(&m, &pi, 1.0).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-15);
        assert!((u[1] - 0.5).abs() < 1e-15);
        assert_eq!(u[2], 1.0);
        assert_eq!(uncertainty_vector(&m, &pi, 2.5).unwrap()[2], 2.5);
        assert!(uncertainty_vector(&m, &pi, 0.0).is_err());
        // unvisited state 2: every action unsupported, self-loop at -1
        assert!(!m.visited(2));
        assert_eq!(m.p_hat()[(m.index(2, 1), 2)], 1.0);
        assert_eq!(m.r_hat()[m.index(2, 1)], -1.0);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let d = OfflineDataset::new(
            vec![
                Transition {
                    s: 1,
                    a: 0,
                    r: -0.123456789012345,
                    s_next: 2,
                    is_initial: true,
                },
                Transition {
                    s: 2,
                    a: 1,
                    r: 0.1 + 0.2,
                    s_next: 0,
                    is_initial: false,
                },
            ],
            5,
        )
        .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(OfflineDataset::read_csv(&buf[..], 5).unwrap(), d);
        assert_eq!(OfflineDataset::from_json(&d.to_json().unwrap()).unwrap(), d);
    }
}
