//! Tabular SA-CQL: the state-aware CQL Q-iteration, the logsumexp training
//! loss, entropy-regularized policy improvement and the training loop with
//! its CQL and random-weight ablations.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_empirical_model, EmpiricalModel, OfflineDataset};
use crate::dice::{omega_state_weights, solve_dualdice_model, DiceSolver};
use crate::error::{invalid, Result};
use crate::mdp::{expected_return, PolicyTable, TabularMdp};
use crate::pessimism::{state_aware_weights, DisSpec, FTransform, OfflineContext};

/// Per-pair coefficients `c` with `A^pi c = Dis_CQL(pi)`: `(pi - beta) / beta`
/// on supported pairs and `penalty + supported mass` elsewhere.
pub fn cql_coefficients(model: &EmpiricalModel, policy: &PolicyTable, penalty: f64) -> DVector<f64> {
    let (n, k) = (model.num_states(), model.num_actions());
    let beta = model.beta_hat();
    let mut c = DVector::zeros(n * k);
    for s in 0..n {
        let mass: f64 = (0..k)
            .filter(|&a| model.supported(s, a))
            .map(|a| policy.prob(s, a))
            .sum();
        for a in 0..k {
            c[s * k + a] = if model.supported(s, a) {
                (policy.prob(s, a) - beta.prob(s, a)) / beta.prob(s, a)
            } else {
                penalty + mass
            };
        }
    }
    c
}

/// `Q' = r_D + gamma P_D A^pi Q - alpha w(s) c(s, a)`.
pub fn sacql_q_step(
    q: &DVector<f64>,
    policy: &PolicyTable,
    ctx: &OfflineContext,
    weights: &DVector<f64>,
    alpha: f64,
    dis: &DisSpec,
) -> DVector<f64> {
    let mdp_d = &ctx.mdp_d;
    let k = mdp_d.num_actions();
    let c = cql_coefficients(&ctx.model, policy, dis.out_of_support_penalty);
    let mut next = mdp_d.backup(&mdp_d.contract(policy, q));
    for i in 0..next.len() {
        next[i] -= alpha * weights[i / k] * c[i];
    }
    next
}

/// `r_D + gamma P_D A^pi Q`, the regression target of the loss.
pub fn bellman_target(ctx: &OfflineContext, policy: &PolicyTable, q: &DVector<f64>) -> DVector<f64> {
    ctx.mdp_d.backup(&ctx.mdp_d.contract(policy, q))
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `alpha sum_s d^D(s) omega(s) [lse Q(s,.) - E_beta Q(s,.)]
///  + 1/2 sum_{s,a} d^D(s,a) (Q - target)^2` and its gradient in `Q`.
///
/// The TD part uses the expected target, which differs from the
/// per-transition squared error only by a constant in `Q`.
pub fn sacql_h_loss(
    q: &DVector<f64>,
    target: &DVector<f64>,
    model: &EmpiricalModel,
    omega: &DVector<f64>,
    alpha: f64,
) -> (f64, DVector<f64>) {
    let (n, k) = (model.num_states(), model.num_actions());
    let d_s = model.d_data();
    let d_sa = model.d_data_sa();
    let beta = model.beta_hat();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(n * k);
    for s in 0..n {
        if !model.visited(s) {
            continue;
        }
        let row = (0..k).map(|a| q[s * k + a]);
        let lse = logsumexp(row);
        let expected: f64 = (0..k).map(|a| beta.prob(s, a) * q[s * k + a]).sum();
        let scale = alpha * d_s[s] * omega[s];
        loss += scale * (lse - expected);
        for a in 0..k {
            let soft = (q[s * k + a] - lse).exp();
            grad[s * k + a] += scale * (soft - beta.prob(s, a));
        }
    }
    for i in 0..n * k {
        let diff = q[i] - target[i];
        loss += 0.5 * d_sa[i] * diff * diff;
        grad[i] += d_sa[i] * diff;
    }
    (loss, grad)
}

/// Full improvement (`eta = None`) returns `softmax(Q / temperature)`.
/// Otherwise one mirror step: `logits = ln pi + eta (Q - temperature (ln pi + 1))`.
pub fn policy_improvement_step(
    q: &DVector<f64>,
    policy: &PolicyTable,
    temperature: f64,
    eta: Option<f64>,
) -> Result<PolicyTable> {
    if !(temperature > 0.0) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    let (n, k) = (policy.num_states(), policy.num_actions());
    if q.len() != n * k {
        return invalid("Q table does not match the policy shape");
    }
    let q_mat = DMatrix::from_fn(n, k, |s, a| q[s * k + a]);
    match eta {
        None => Ok(PolicyTable::softmax(&q_mat, temperature)),
        Some(eta) => {
            let logits = DMatrix::from_fn(n, k, |s, a| {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let lp = p.ln();
                    lp + eta * (q_mat[(s, a)] - temperature * (lp + 1.0))
                }
            });
            Ok(PolicyTable::softmax(&logits, 1.0))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `f` of the exact occupancy ratio in the empirical MDP.
    #[default]
    ExactRatio,
    /// `f` of the DualDICE state weights.
    Dualdice,
    /// Plain CQL.
    ConstantOne,
    /// Fresh `U(b0, b1)` draw per state and iteration.
    RandomUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_f")]
    pub f: FTransform,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Gradient steps for the initial ratio fit when the DualDICE solver is
    /// iterative; ignored by the closed form.
    #[serde(default)]
    pub pretrain_steps: usize,
    /// Ratio updates per iteration for an iterative solver.
    #[serde(default = "one")]
    pub zeta_steps: usize,
    #[serde(default = "default_q_steps")]
    pub q_steps: usize,
    #[serde(default = "one")]
    pub policy_steps: usize,
    /// Step size of the preconditioned Q update (1 solves the TD part
    /// exactly in one step).
    #[serde(default = "default_lr_q")]
    pub lr_q: f64,
    /// `None` selects full improvement.
    #[serde(default)]
    pub lr_pi: Option<f64>,
    #[serde(default)]
    pub dice: DiceSolver,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    5.0
}

fn default_f() -> FTransform {
    FTransform::normalized_log(0.5, 5.0)
}

fn default_temperature() -> f64 {
    0.1
}

fn default_steps() -> usize {
    100
}

fn default_q_steps() -> usize {
    10
}

fn default_lr_q() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            f: default_f(),
            weight_mode: WeightMode::default(),
            temperature: default_temperature(),
            steps: default_steps(),
            pretrain_steps: 0,
            zeta_steps: 1,
            q_steps: default_q_steps(),
            policy_steps: 1,
            lr_q: default_lr_q(),
            lr_pi: None,
            dice: DiceSolver::ClosedForm,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("steps must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return invalid(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lr_q > 0.0) {
            return invalid("lr_q must be positive");
        }
        self.f.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iter: usize,
    pub q_hash: String,
    pub true_return: f64,
    pub est_return: f64,
    pub omega_min: f64,
    pub omega_mean: f64,
    pub omega_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub checkpoints: Vec<Checkpoint>,
    pub final_policy: PolicyTable,
    pub final_q: DVector<f64>,
}

impl TrainTrace {
    pub fn final_return(&self) -> f64 {
        self.checkpoints.last().map_or(f64::NAN, |c| c.true_return)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "true_return", "est_return", "omega_min", "omega_mean", "omega_max"])?;
        for c in &self.checkpoints {
            w.write_record([
                c.iter.to_string(),
                c.true_return.to_string(),
                c.est_return.to_string(),
                c.omega_min.to_string(),
                c.omega_mean.to_string(),
                c.omega_max.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn q_hash(q: &DVector<f64>) -> String {
    let mut h = Sha256::new();
    for x in q.iter() {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Preconditioner for Q steps: `d^D(s, a)` on supported pairs, `d^D(s)`
/// on the other actions of visited states, 0 (frozen) elsewhere.
fn step_scale(model: &EmpiricalModel) -> DVector<f64> {
    let k = model.num_actions();
    let d_sa = model.d_data_sa();
    DVector::from_fn(d_sa.len(), |i, _| {
        let s = i / k;
        if model.support()[i] {
            1.0 / d_sa[i]
        } else if model.visited(s) {
            1.0 / model.d_data()[s]
        } else {
            0.0
        }
    })
}

struct WeightSource<'a> {
    mode: WeightMode,
    f: FTransform,
    ctx: &'a OfflineContext,
    dice: DiceSolver,
    rng: ChaCha8Rng,
}

impl WeightSource<'_> {
    fn weights(&mut self, policy: &PolicyTable, dice_steps: usize) -> Result<DVector<f64>> {
        let n = self.ctx.model.num_states();
        match self.mode {
            WeightMode::ConstantOne => Ok(DVector::from_element(n, 1.0)),
            WeightMode::RandomUniform => {
                let (b0, b1) = (self.f.b0, self.f.b1);
                Ok(DVector::from_fn(n, |_, _| {
                    if b1 > b0 {
                        self.rng.random_range(b0..b1)
                    } else {
                        b0
                    }
                }))
            }
            WeightMode::ExactRatio => state_aware_weights(self.ctx, policy, &self.f),
            WeightMode::Dualdice => {
                let solver = match &self.dice {
                    DiceSolver::AlternatingSgd {
                        lr_zeta,
                        lr_nu,
                        seed,
                        ..
                    } => DiceSolver::AlternatingSgd {
                        steps: dice_steps,
                        lr_zeta: *lr_zeta,
                        lr_nu: *lr_nu,
                        batch_size: None,
                        seed: *seed,
                    },
                    DiceSolver::ClosedForm => DiceSolver::ClosedForm,
                };
                let state = solve_dualdice_model(
                    &self.ctx.model,
                    policy,
                    self.ctx.discount(),
                    self.ctx.mdp_d.initial_dist(),
                    &solver,
                )?;
                let omega = omega_state_weights(&state.zeta, &self.ctx.model, policy)?;
                Ok(self.f.apply(&omega))
            }
        }
    }
}

fn omega_stats(model: &EmpiricalModel, w: &DVector<f64>) -> (f64, f64, f64) {
    let visited: Vec<f64> = (0..model.num_states())
        .filter(|&s| model.visited(s))
        .map(|s| w[s])
        .collect();
    let min = visited.iter().copied().fold(f64::INFINITY, f64::min);
    let max = visited.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = visited.iter().sum::<f64>() / visited.len() as f64;
    (min, mean, max)
}

/// Runs the training loop on `dataset`. `mdp_for_eval` supplies the discount
/// and the checkpoint returns; the learner never reads its dynamics.
///
/// Iterative DualDICE runs its `pretrain_steps` once and `zeta_steps` per
/// iteration from scratch on the current policy; gradient play in the
/// tabular case has no state worth warm-starting beyond that budget.
pub fn train(mdp_for_eval: &TabularMdp, dataset: &OfflineDataset, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    let (n, k) = (mdp_for_eval.num_states(), mdp_for_eval.num_actions());
    let model = build_empirical_model(dataset, n, k)?;
    if !(0..n).any(|s| model.visited(s)) {
        return invalid("dataset visits no state");
    }
    let rho_hat = model.initial_hat().clone();
    let ctx = OfflineContext::new(model, mdp_for_eval.discount(), &rho_hat)?;
    let model = &ctx.model;
    let scale = step_scale(model);

    let mut source = WeightSource {
        mode: config.weight_mode,
        f: config.f,
        ctx: &ctx,
        dice: config.dice.clone(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut policy = model.beta_hat().clone();
    let mut q = DVector::zeros(n * k);
    let every = (config.steps / 10).max(1);
    let mut checkpoints = Vec::new();
    let mut dice_steps = config.pretrain_steps + config.zeta_steps;

    for iter in 1..=config.steps {
        let w = source.weights(&policy, dice_steps)?;
        dice_steps = config.zeta_steps;
        let target = bellman_target(&ctx, &policy, &q);
        for _ in 0..config.q_steps {
            let (_, grad) = sacql_h_loss(&q, &target, model, &w, config.alpha);
            q -= grad.component_mul(&scale) * config.lr_q;
        }
        for _ in 0..config.policy_steps.max(1) {
            policy = policy_improvement_step(&q, &policy, config.temperature, config.lr_pi)?;
            if config.lr_pi.is_none() {
                break;
            }
        }
        if iter % every == 0 || iter == config.steps {
            let (omega_min, omega_mean, omega_max) = omega_stats(model, &w);
            checkpoints.push(Checkpoint {
                iter,
                q_hash: q_hash(&q),
                true_return: expected_return(mdp_for_eval, &policy)?,
                est_return: rho_hat.dot(&ctx.mdp_d.contract(&policy, &q)),
                omega_min,
                omega_mean,
                omega_max,
            });
        }
    }
    checkpoints.dedup_by_key(|c| c.iter);
    Ok(TrainTrace {
        checkpoints,
        final_policy: policy,
        final_q: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Transition;

    fn two_action_context() -> OfflineContext {
        let rows: Vec<Transition> = (0..2)
            .map(|a| Transition {
                s: 0,
                a,
                r: 0.5,
                s_next: 0,
                is_initial: true,
            })
            .collect();
        let d = OfflineDataset::new(rows, 0).unwrap();
        let model = build_empirical_model(&d, 1, 2).unwrap();
        OfflineContext::new(model, 0.9, &DVector::from_element(1, 1.0)).unwrap()
    }

    #[test]
    fn penalty_redistributes_value() {
        let ctx = two_action_context();
        let pi = PolicyTable::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = DVector::zeros(2);
        let plain = sacql_q_step(&q, &pi, &ctx, &DVector::from_element(1, 1.0), 0.0, &DisSpec::default());
        let pen = sacql_q_step(&q, &pi, &ctx, &DVector::from_element(1, 1.0), 0.5, &DisSpec::default());
        assert!((plain[0] - pen[0] - 0.5).abs() < 1e-15);
        assert!((plain[1] - pen[1] + 0.5).abs() < 1e-15);
        let beta = ctx.model.beta_hat().clone();
        let same = sacql_q_step(&q, &beta, &ctx, &DVector::from_element(1, 1.0), 0.5, &DisSpec::default());
        assert_eq!(same, bellman_target(&ctx, &beta, &q));
    }

    #[test]
    fn lse_gradient_for_constant_q() {
        let ctx = two_action_context();
        let q = DVector::from_element(2, 3.0);
        let omega = DVector::from_element(1, 2.0);
        let (_, g) = sacql_h_loss(&q, &q, &ctx.model, &omega, 0.7);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let (loss, g) = sacql_h_loss(&q, &DVector::zeros(2), &ctx.model, &DVector::zeros(1), 0.7);
        assert!((loss - 0.5 * 9.0).abs() < 1e-12);
        assert!((g[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn improvement_cases() {
        let pi = PolicyTable::uniform(1, 3);
        let q = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let sharp = policy_improvement_step(&q, &pi, 1e-3, None).unwrap();
        assert!(sharp.prob(0, 0) > 1.0 - 1e-12);
        let flat = policy_improvement_step(&DVector::from_element(3, 2.0), &pi, 0.1, None).unwrap();
        assert!(flat.row(0).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let step = policy_improvement_step(&q, &pi, 0.1, Some(0.5)).unwrap();
        assert!(step.prob(0, 0) > pi.prob(0, 0));
        assert!(policy_improvement_step(&q, &pi, 0.0, None).is_err());
    }
}
