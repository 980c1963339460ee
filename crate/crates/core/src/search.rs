//! Policy objectives of the form
//! `J(pi) = const + sum_t <d_t^pi, A^pi l_t + kappa_t p(pi)>`
//! and the two searches over policy classes: exhaustive enumeration of
//! deterministic policies and Adam on softmax logits with adjoint gradients.
//!
//! `d_t^pi` is the raw discounted occupancy of `pi` in the term's MDP and
//! `p(pi)` is the (optionally state-aware) Dis penalty on the empirical MDP.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{solve, PolicyTable, TabularMdp};
use crate::pessimism::{DisSpec, FTransform, OfflineContext, PessimismSpec};
use crate::seeding::derive_seed;

pub const MAX_ENUMERATION: usize = 1_000_000;
const LOGIT_CLAMP: f64 = 20.0;

#[derive(Clone, Debug)]
pub struct ObjectiveTerm {
    pub mdp: TabularMdp,
    pub loss: DVector<f64>,
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Clone, Debug)]
pub struct PolicyObjective<'a> {
    ctx: &'a OfflineContext,
    dis: DisSpec,
    weighting: Option<FTransform>,
    terms: Vec<ObjectiveTerm>,
    constant: f64,
}

struct Penalty {
    dis: DVector<f64>,
    weights: DVector<f64>,
    ratios: DVector<f64>,
}

impl<'a> PolicyObjective<'a> {
    pub fn new(
        ctx: &'a OfflineContext,
        spec: &PessimismSpec,
        terms: Vec<ObjectiveTerm>,
        constant: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let (n, k) = (ctx.model.num_states(), ctx.model.num_actions());
        for t in &terms {
            if t.mdp.num_states() != n || t.mdp.num_actions() != k || t.loss.len() != n * k {
                return invalid("objective term dimensions do not match the empirical model");
            }
        }
        Ok(Self {
            ctx,
            dis: spec.dis,
            weighting: spec.state_aware.then_some(spec.f),
            terms,
            constant,
        })
    }

    /// `<rho, v>` of the pessimistic evaluation in `M_D`.
    pub fn evaluation(ctx: &'a OfflineContext, spec: &PessimismSpec) -> Result<Self> {
        let term = ObjectiveTerm {
            mdp: ctx.mdp_d.clone(),
            loss: ctx.mdp_d.reward().clone(),
            kappa: -spec.alpha,
        };
        Self::new(ctx, spec, vec![term], 0.0)
    }

    pub fn context(&self) -> &OfflineContext {
        self.ctx
    }

    fn penalty(&self, policy: &PolicyTable) -> Result<Penalty> {
        let dis = self.ctx.dis(&self.dis, policy)?;
        let (weights, ratios) = match &self.weighting {
            Some(f) => {
                let ratios = self.ctx.occupancy_ratios(policy)?;
                (f.apply(&ratios), ratios)
            }
            None => {
                let ones = DVector::from_element(dis.len(), 1.0);
                (ones.clone(), ones)
            }
        };
        Ok(Penalty {
            dis,
            weights,
            ratios,
        })
    }

    fn needs_penalty(&self) -> bool {
        self.terms.iter().any(|t| t.kappa != 0.0)
    }

    pub fn value(&self, policy: &PolicyTable) -> Result<f64> {
        let p = if self.needs_penalty() {
            let pen = self.penalty(policy)?;
            Some(pen.weights.component_mul(&pen.dis))
        } else {
            None
        };
        let mut total = self.constant;
        for term in &self.terms {
            let occ = solve(
                term.mdp.resolvent_system(policy).transpose(),
                term.mdp.initial_dist(),
                "objective occupancy",
            )?;
            let mut b = term.mdp.contract(policy, &term.loss);
            if let (Some(p), true) = (&p, term.kappa != 0.0) {
                b += p * term.kappa;
            }
            total += occ.dot(&b);
        }
        Ok(total)
    }

    /// Value and gradient with respect to every `pi(a|s)` (state x action).
    pub fn value_and_grad(&self, policy: &PolicyTable) -> Result<(f64, DMatrix<f64>)> {
        let (n, k) = (policy.num_states(), policy.num_actions());
        let pen = if self.needs_penalty() {
            Some(self.penalty(policy)?)
        } else {
            None
        };
        let p = pen.as_ref().map(|x| x.weights.component_mul(&x.dis));
        let mut grad = DMatrix::zeros(n, k);
        let mut total = self.constant;
        let mut weight_upstream = DVector::zeros(n);

        for term in &self.terms {
            let system = term.mdp.resolvent_system(policy);
            let occ = solve(system.transpose(), term.mdp.initial_dist(), "objective occupancy")?;
            let mut b = term.mdp.contract(policy, &term.loss);
            if let (Some(p), true) = (&p, term.kappa != 0.0) {
                b += p * term.kappa;
            }
            total += occ.dot(&b);
            let v = solve(system, &b, "objective values")?;
            let pv = term.mdp.transition() * &v;
            let gamma = term.mdp.discount();
            for s in 0..n {
                for a in 0..k {
                    let i = s * k + a;
                    grad[(s, a)] += occ[s] * (term.loss[i] + gamma * pv[i]);
                }
            }
            if let (Some(pen), true) = (&pen, term.kappa != 0.0) {
                let model = &self.ctx.model;
                for s in 0..n {
                    let g = self.dis.grad_at_state(
                        &policy.row(s),
                        &model.beta_hat().row(s),
                        &model.support()[s * k..(s + 1) * k],
                    );
                    let scale = term.kappa * occ[s] * pen.weights[s];
                    for a in 0..k {
                        grad[(s, a)] += scale * g[a];
                    }
                }
                weight_upstream += occ.component_mul(&pen.dis) * term.kappa;
            }
        }

        if let (Some(f), Some(pen)) = (&self.weighting, &pen) {
            // Weights depend on pi through the occupancy of M_D.
            let mdp_d = &self.ctx.mdp_d;
            let gamma = mdp_d.discount();
            let g_ratio = f.vjp(&pen.ratios, &weight_upstream);
            let c = g_ratio.component_div(self.ctx.data_floor()) * (1.0 - gamma);
            let system = mdp_d.resolvent_system(policy);
            let occ = solve(system.transpose(), mdp_d.initial_dist(), "weight occupancy")?;
            let u = solve(system, &c, "weight adjoint")?;
            let pu = mdp_d.transition() * &u;
            for s in 0..n {
                for a in 0..k {
                    grad[(s, a)] += occ[s] * gamma * pu[s * k + a];
                }
            }
        }
        Ok((total, grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyClass {
    DeterministicEnumeration,
    /// Softmax over each visited state's supported actions (every action at
    /// unvisited states), searched by Adam with restarts.
    SupportedSoftmax {
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
        #[serde(default = "default_restarts")]
        restarts: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_steps() -> usize {
    2000
}

fn default_lr() -> f64 {
    0.05
}

fn default_restarts() -> usize {
    8
}

impl PolicyClass {
    pub fn softmax(seed: u64) -> Self {
        Self::SupportedSoftmax {
            steps: default_steps(),
            learning_rate: default_lr(),
            restarts: default_restarts(),
            seed,
        }
    }

    /// |Pi| as used by the confidence constant; infinite for softmax.
    pub fn size(&self, num_states: usize, num_actions: usize) -> f64 {
        match self {
            Self::DeterministicEnumeration => (num_actions as f64).powi(num_states as i32),
            Self::SupportedSoftmax { .. } => f64::INFINITY,
        }
    }
}

pub fn enumeration_size(num_states: usize, num_actions: usize) -> Option<usize> {
    let mut total: usize = 1;
    for _ in 0..num_states {
        total = total.checked_mul(num_actions)?;
        if total > MAX_ENUMERATION {
            return None;
        }
    }
    Some(total)
}

/// The `index`-th deterministic policy; state 0 is the fastest digit.
pub fn deterministic_policy(index: usize, num_states: usize, num_actions: usize) -> Result<PolicyTable> {
    let mut rest = index;
    let actions: Vec<usize> = (0..num_states)
        .map(|_| {
            let a = rest % num_actions;
            rest /= num_actions;
            a
        })
        .collect();
    PolicyTable::deterministic(&actions, num_actions)
}

fn signed(direction: Direction, x: f64) -> f64 {
    match direction {
        Direction::Maximize => x,
        Direction::Minimize => -x,
    }
}

/// Exact optimum over all deterministic policies; ties go to the lowest
/// enumeration index.
pub fn enumerate(objective: &PolicyObjective, direction: Direction) -> Result<(PolicyTable, f64)> {
    let (n, k) = (objective.ctx.model.num_states(), objective.ctx.model.num_actions());
    let count = enumeration_size(n, k).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{k}^{n} deterministic policies exceed the enumeration limit {MAX_ENUMERATION}; use the softmax class"
        ))
    })?;
    let (best, _) = (0..count)
        .into_par_iter()
        .map(|i| {
            let pi = deterministic_policy(i, n, k)?;
            Ok::<_, Error>((i, signed(direction, objective.value(&pi)?)))
        })
        .try_reduce(
            || (usize::MAX, f64::NEG_INFINITY),
            |x, y| {
                let keep_x = x.1 > y.1 || (x.1 == y.1 && x.0 < y.0);
                Ok(if keep_x { x } else { y })
            },
        )?;
    let pi = deterministic_policy(best, n, k)?;
    let value = objective.value(&pi)?;
    Ok((pi, value))
}

fn action_mask(ctx: &OfflineContext) -> Vec<bool> {
    let model = &ctx.model;
    let k = model.num_actions();
    (0..model.num_states())
        .flat_map(|s| {
            let visited = model.visited(s);
            (0..k).map(move |a| !visited || model.supported(s, a))
        })
        .collect()
}

pub fn softmax_policy(logits: &DMatrix<f64>, mask: &[bool]) -> PolicyTable {
    let k = logits.ncols();
    let mut masked = logits.clone();
    for s in 0..logits.nrows() {
        for a in 0..k {
            if !mask[s * k + a] {
                masked[(s, a)] = f64::NEG_INFINITY;
            }
        }
    }
    PolicyTable::softmax(&masked, 1.0)
}

fn softmax_run(
    objective: &PolicyObjective,
    direction: Direction,
    mask: &[bool],
    steps: usize,
    learning_rate: f64,
    init: DMatrix<f64>,
) -> Result<(PolicyTable, f64)> {
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let (n, k) = (init.nrows(), init.ncols());
    let mut theta = init;
    let mut m = DMatrix::<f64>::zeros(n, k);
    let mut v = DMatrix::<f64>::zeros(n, k);
    let mut best: Option<(PolicyTable, f64)> = None;
    for t in 1..=steps + 1 {
        let pi = softmax_policy(&theta, mask);
        let (value, grad_pi) = objective.value_and_grad(&pi)?;
        if best.as_ref().is_none_or(|b| signed(direction, value) > signed(direction, b.1)) {
            best = Some((pi.clone(), value));
        }
        if t > steps {
            break;
        }
        for s in 0..n {
            let mean: f64 = (0..k).map(|a| pi.prob(s, a) * grad_pi[(s, a)]).sum();
            for a in 0..k {
                let g = signed(direction, pi.prob(s, a) * (grad_pi[(s, a)] - mean));
                m[(s, a)] = beta1 * m[(s, a)] + (1.0 - beta1) * g;
                v[(s, a)] = beta2 * v[(s, a)] + (1.0 - beta2) * g * g;
                let m_hat = m[(s, a)] / (1.0 - beta1.powi(t as i32));
                let v_hat = v[(s, a)] / (1.0 - beta2.powi(t as i32));
                theta[(s, a)] = (theta[(s, a)] + learning_rate * m_hat / (v_hat.sqrt() + eps))
                    .clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            }
        }
    }
    let (pi, _) = best.expect("at least one step evaluated");
    let value = objective.value(&pi)?;
    Ok((pi, value))
}

/// Adam ascent (or descent) on masked softmax logits. Restart 0 starts from
/// zero logits, the rest from standard normal draws. Returns the best policy
/// seen along every trajectory.
pub fn softmax_search(
    objective: &PolicyObjective,
    direction: Direction,
    steps: usize,
    learning_rate: f64,
    restarts: usize,
    seed: u64,
) -> Result<(PolicyTable, f64)> {
    if restarts == 0 || steps == 0 {
        return invalid("softmax search needs at least one restart and one step");
    }
    let (n, k) = (objective.ctx.model.num_states(), objective.ctx.model.num_actions());
    let mask = action_mask(objective.ctx);
    let runs: Vec<(PolicyTable, f64)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let init = if r == 0 {
                DMatrix::zeros(n, k)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
                DMatrix::from_fn(n, k, |_, _| -> f64 { StandardNormal.sample(&mut rng) })
            };
            softmax_run(objective, direction, &mask, steps, learning_rate, init)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if signed(direction, run.1) > signed(direction, runs[best].1) {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("non-empty"))
}

pub fn search(
    objective: &PolicyObjective,
    direction: Direction,
    class: &PolicyClass,
) -> Result<(PolicyTable, f64)> {
    match *class {
        PolicyClass::DeterministicEnumeration => enumerate(objective, direction),
        PolicyClass::SupportedSoftmax {
            steps,
            learning_rate,
            restarts,
            seed,
        } => softmax_search(objective, direction, steps, learning_rate, restarts, seed),
    }
}

/// `argmax_pi <rho, v^pi>` of the pessimistic evaluation in `M_D`.
pub fn optimize_policy(
    ctx: &OfflineContext,
    spec: &PessimismSpec,
    class: &PolicyClass,
) -> Result<(PolicyTable, f64)> {
    search(&PolicyObjective::evaluation(ctx, spec)?, Direction::Maximize, class)
}
