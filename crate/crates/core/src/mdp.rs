//! Exact finite MDPs, stochastic policy tables and the dense solvers built on
//! them.
//!
//! State-action pairs are flattened row-major: pair `(s, a)` lives at index
//! `s * num_actions + a`. The transition matrix therefore has one row per
//! pair and one column per next state.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: DMatrix<f64>,
    reward: DVector<f64>,
    discount: f64,
    initial_dist: DVector<f64>,
}

/// On-disk JSON layout. `transition` is row-major over
/// `(num_states * num_actions) x num_states`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct MdpDocument {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let rows = doc.num_states * doc.num_actions;
        if doc.transition.len() != rows * doc.num_states {
            return invalid(format!(
                "transition has {} entries, expected {}",
                doc.transition.len(),
                rows * doc.num_states
            ));
        }
        let transition = DMatrix::from_row_slice(rows, doc.num_states, &doc.transition);
        TabularMdp::new(
            doc.num_states,
            doc.num_actions,
            transition,
            DVector::from_vec(doc.reward),
            doc.discount,
            DVector::from_vec(doc.initial_dist),
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let rows = mdp.num_states * mdp.num_actions;
        let mut transition = Vec::with_capacity(rows * mdp.num_states);
        for i in 0..rows {
            transition.extend(mdp.transition.row(i).iter().copied());
        }
        MdpDocument {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            transition,
            reward: mdp.reward.iter().copied().collect(),
            discount: mdp.discount,
            initial_dist: mdp.initial_dist.iter().copied().collect(),
        }
    }
}

fn check_distribution(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for x in values {
        if !x.is_finite() || x < 0.0 {
            return invalid(format!("{what} has a negative or non-finite entry {x}"));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return invalid(format!("{what} sums to {sum}, expected 1"));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: DMatrix<f64>,
        reward: DVector<f64>,
        discount: f64,
        initial_dist: DVector<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return invalid("an MDP needs at least one state and one action");
        }
        let rows = num_states * num_actions;
        if transition.nrows() != rows || transition.ncols() != num_states {
            return invalid(format!(
                "transition is {}x{}, expected {rows}x{num_states}",
                transition.nrows(),
                transition.ncols()
            ));
        }
        if reward.len() != rows {
            return invalid(format!("reward has length {}, expected {rows}", reward.len()));
        }
        if initial_dist.len() != num_states {
            return invalid(format!(
                "initial_dist has length {}, expected {num_states}",
                initial_dist.len()
            ));
        }
        if !(0.0..1.0).contains(&discount) {
            return invalid(format!("discount {discount} outside [0, 1)"));
        }
        for i in 0..rows {
            check_distribution(transition.row(i).iter().copied(), &format!("transition row {i}"))?;
        }
        if let Some((i, r)) = reward
            .iter()
            .enumerate()
            .find(|(_, r)| !r.is_finite() || r.abs() > 1.0)
        {
            return invalid(format!("reward[{i}] = {r} outside [-1, 1]"));
        }
        check_distribution(initial_dist.iter().copied(), "initial_dist")?;
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    /// Same dynamics and rewards, different start distribution.
    pub fn with_initial_dist(&self, initial_dist: DVector<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.discount,
            initial_dist,
        )
    }

    pub fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return invalid(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            ));
        }
        Ok(())
    }

    /// State-to-state kernel `A^pi P`.
    pub fn state_kernel(&self, policy: &PolicyTable) -> DMatrix<f64> {
        let n = self.num_states;
        let mut kernel = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let row = self.transition.row(self.index(s, a));
                for (t, &x) in row.iter().enumerate() {
                    kernel[(s, t)] += p * x;
                }
            }
        }
        kernel
    }

    /// `A^pi v` for any pair-indexed vector.
    pub fn contract(&self, policy: &PolicyTable, pair_values: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.num_states, |s, _| {
            (0..self.num_actions)
                .map(|a| policy.prob(s, a) * pair_values[self.index(s, a)])
                .sum()
        })
    }

    /// `I - gamma A^pi P`.
    pub fn resolvent_system(&self, policy: &PolicyTable) -> DMatrix<f64> {
        let n = self.num_states;
        DMatrix::identity(n, n) - self.state_kernel(policy) * self.discount
    }

    /// One-step lookahead `r + gamma P v`.
    pub fn backup(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.reward + (&self.transition * v) * self.discount
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PolicyTable {
    probs: DMatrix<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for PolicyTable {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<PolicyTable> for Vec<Vec<f64>> {
    fn from(policy: PolicyTable) -> Self {
        (0..policy.num_states())
            .map(|s| policy.probs.row(s).iter().copied().collect())
            .collect()
    }
}

impl PolicyTable {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return invalid("policy table must be non-empty");
        }
        for s in 0..probs.nrows() {
            check_distribution(probs.row(s).iter().copied(), &format!("policy row {s}"))?;
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return invalid("policy rows have unequal lengths");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), num_actions, &flat))
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        if let Some(&a) = actions.iter().find(|&&a| a >= num_actions) {
            return invalid(format!("action {a} out of range for {num_actions} actions"));
        }
        let mut probs = DMatrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            probs[(s, a)] = 1.0;
        }
        Self::new(probs)
    }

    /// Row-wise softmax of `logits / temperature`.
    pub fn softmax(logits: &DMatrix<f64>, temperature: f64) -> Self {
        let mut probs = logits.clone();
        for s in 0..probs.nrows() {
            let max = probs.row(s).max();
            let mut sum = 0.0;
            for a in 0..probs.ncols() {
                let e = ((probs[(s, a)] - max) / temperature).exp();
                probs[(s, a)] = e;
                sum += e;
            }
            for a in 0..probs.ncols() {
                probs[(s, a)] /= sum;
            }
        }
        Self { probs }
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        self.probs.row(s).iter().copied().collect()
    }

    /// Action of largest probability per state, lowest index on ties.
    pub fn mode_actions(&self) -> Vec<usize> {
        (0..self.num_states())
            .map(|s| {
                let mut best = 0;
                for a in 1..self.num_actions() {
                    if self.probs[(s, a)] > self.probs[(s, best)] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }
}

/// Activity matrix `A^pi`: `num_states x (num_states * num_actions)` with
/// `A(s, <s, a>) = pi(a|s)` and zeros off the diagonal blocks.
pub fn activity_matrix(
    policy: &PolicyTable,
    num_states: usize,
    num_actions: usize,
) -> Result<DMatrix<f64>> {
    if policy.num_states() != num_states || policy.num_actions() != num_actions {
        return invalid(format!(
            "policy is {}x{}, expected {num_states}x{num_actions}",
            policy.num_states(),
            policy.num_actions()
        ));
    }
    let mut m = DMatrix::zeros(num_states, num_states * num_actions);
    for s in 0..num_states {
        for a in 0..num_actions {
            m[(s, s * num_actions + a)] = policy.prob(s, a);
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    /// `rho^T (I - gamma A^pi P)^{-1}`; sums to `1 / (1 - gamma)`.
    pub occupancy_raw: DVector<f64>,
    /// `(1 - gamma) * occupancy_raw`; a probability vector.
    pub occupancy_norm: DVector<f64>,
}

pub(crate) fn solve(matrix: DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let n = matrix.nrows();
    matrix.lu().solve(rhs).ok_or_else(|| {
        Error::Numerical(format!("{what}: singular {n}x{n} system"))
    })
}

/// Discounted state occupancy `rho^T (I - gamma A^pi P)^{-1}` of `policy`.
pub fn occupancy_raw(mdp: &TabularMdp, policy: &PolicyTable) -> Result<DVector<f64>> {
    mdp.check_policy(policy)?;
    solve(
        mdp.resolvent_system(policy).transpose(),
        mdp.initial_dist(),
        "occupancy",
    )
}

/// Solves `Q = r + gamma P A^pi Q` directly, together with the discounted
/// state occupancy from `rho`.
pub fn exact_policy_values(mdp: &TabularMdp, policy: &PolicyTable) -> Result<ValueSolution> {
    mdp.check_policy(policy)?;
    let system = mdp.resolvent_system(policy);
    let v = solve(system.clone(), &mdp.contract(policy, mdp.reward()), "policy values")?;
    let q = mdp.backup(&v);
    let occupancy_raw = solve(system.transpose(), mdp.initial_dist(), "occupancy")?;

    let residual = (&q - mdp.backup(&mdp.contract(policy, &q))).amax();
    let scale = 1.0 + q.amax();
    if !residual.is_finite() || residual > 1e-9 * scale {
        return Err(Error::Numerical(format!(
            "Bellman residual {residual:e} after direct solve (|Q|max = {:.3e}, gamma = {})",
            q.amax(),
            mdp.discount()
        )));
    }
    let occupancy_norm = &occupancy_raw * (1.0 - mdp.discount());
    Ok(ValueSolution {
        q,
        v,
        occupancy_raw,
        occupancy_norm,
    })
}

/// Repeated application of `B^pi V = A^pi r + gamma A^pi P V` from zero.
pub fn iterative_policy_values(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    iterations: usize,
) -> Result<DVector<f64>> {
    mdp.check_policy(policy)?;
    let kernel = mdp.state_kernel(policy) * mdp.discount();
    let reward = mdp.contract(policy, mdp.reward());
    let mut v = DVector::zeros(mdp.num_states());
    for _ in 0..iterations {
        v = &reward + &kernel * &v;
    }
    Ok(v)
}

fn greedy(mdp: &TabularMdp, q: &DVector<f64>, current: Option<&[usize]>) -> Vec<usize> {
    (0..mdp.num_states())
        .map(|s| {
            let row = (0..mdp.num_actions()).map(|a| q[mdp.index(s, a)]);
            let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
            let tie = 1e-12 * (1.0 + max.abs());
            if let Some(cur) = current {
                if q[mdp.index(s, cur[s])] >= max - tie {
                    return cur[s];
                }
            }
            row.enumerate()
                .find(|&(_, x)| x >= max - tie)
                .map(|(a, _)| a)
                .unwrap_or(0)
        })
        .collect()
}

/// Value iteration to `tol`, then greedy policy polishing until the greedy
/// policy is stable. Returns the deterministic policy and its exact values.
pub fn optimal_policy(mdp: &TabularMdp, tol: f64) -> Result<(PolicyTable, ValueSolution)> {
    if !(tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {tol}"));
    }
    let gamma = mdp.discount();
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / (2.0 * gamma)
    } else {
        f64::INFINITY
    };
    let mut v = DVector::zeros(mdp.num_states());
    for _ in 0..10_000_000 {
        let q = mdp.backup(&v);
        let next = DVector::from_fn(mdp.num_states(), |s, _| {
            (0..mdp.num_actions())
                .map(|a| q[mdp.index(s, a)])
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let change = (&next - &v).amax();
        v = next;
        if change <= threshold {
            break;
        }
    }
    let mut actions = greedy(mdp, &mdp.backup(&v), None);
    loop {
        let policy = PolicyTable::deterministic(&actions, mdp.num_actions())?;
        let solution = exact_policy_values(mdp, &policy)?;
        let improved = greedy(mdp, &solution.q, Some(&actions));
        if improved == actions {
            return Ok((policy, solution));
        }
        actions = improved;
    }
}

/// `<rho, V^pi>`.
pub fn expected_return(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    let solution = exact_policy_values(mdp, policy)?;
    Ok(mdp.initial_dist().dot(&solution.v))
}

/// Horizon `H` with `gamma^H / (1 - gamma) <= eps`.
pub fn truncation_horizon(discount: f64, eps: f64) -> usize {
    if discount <= 0.0 {
        return 1;
    }
    ((eps * (1.0 - discount)).ln() / discount.ln()).ceil().max(1.0) as usize
}

/// Inverse-CDF sampler over the positive entries of a probability row. A
/// linear count over the few nonzeros beats a binary search at these sizes.
#[derive(Clone, Debug)]
pub(crate) struct Categorical {
    outcomes: Vec<usize>,
    cumulative: Vec<f64>,
}

impl Categorical {
    fn new(weights: impl Iterator<Item = f64>) -> std::result::Result<Self, String> {
        let mut total = 0.0;
        let mut outcomes = Vec::new();
        let mut cumulative = Vec::new();
        for (i, w) in weights.enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(format!("invalid weight {w}"));
            }
            if w > 0.0 {
                total += w;
                outcomes.push(i);
                cumulative.push(total);
            }
        }
        if outcomes.is_empty() {
            return Err("all weights are zero".into());
        }
        cumulative.iter_mut().for_each(|c| *c /= total);
        Ok(Self { outcomes, cumulative })
    }
}

impl Distribution<usize> for Categorical {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        // Branch-free count of the cells below `u`; draws are unpredictable.
        let j: usize = self.cumulative.iter().map(|&c| usize::from(c <= u)).sum();
        self.outcomes[j.min(self.outcomes.len() - 1)]
    }
}

pub(crate) fn row_samplers(matrix: &DMatrix<f64>) -> Result<Vec<Categorical>> {
    (0..matrix.nrows())
        .map(|i| {
            Categorical::new(matrix.row(i).iter().copied())
                .map_err(|e| Error::InvalidArgument(format!("row {i} is not a distribution: {e}")))
        })
        .collect()
}

const LANES: usize = 8;

/// Mean and standard error of truncated discounted returns from `rho`.
///
/// Rollouts use xoshiro256++, roughly three times cheaper per draw than
/// ChaCha and still reproducible across platforms.
pub fn monte_carlo_return(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    num_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if num_rollouts == 0 {
        return invalid("num_rollouts must be at least 1");
    }
    mdp.check_policy(policy)?;
    let start = WeightedIndex::new(mdp.initial_dist().iter().copied())
        .map_err(|e| Error::InvalidArgument(format!("initial_dist: {e}")))?;
    let actions = row_samplers(policy.probs())?;
    let next = row_samplers(mdp.transition())?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let gamma = mdp.discount();

    let reward = mdp.reward().as_slice();
    let k = mdp.num_actions();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    // Independent rollouts advance in lockstep so their dependent loads overlap.
    let mut done = 0;
    while done < num_rollouts {
        let lanes = LANES.min(num_rollouts - done);
        let mut s = [0usize; LANES];
        let mut ret = [0.0f64; LANES];
        for l in 0..lanes {
            s[l] = start.sample(&mut rng);
        }
        let mut scale = 1.0;
        for _ in 0..horizon {
            for l in 0..lanes {
                let i = s[l] * k + actions[s[l]].sample(&mut rng);
                ret[l] += scale * reward[i];
                s[l] = next[i].sample(&mut rng);
            }
            scale *= gamma;
        }
        for &x in &ret[..lanes] {
            sum += x;
            sum_sq += x * x;
        }
        done += lanes;
    }
    let n = num_rollouts as f64;
    let mean = sum / n;
    let var = if num_rollouts > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}
