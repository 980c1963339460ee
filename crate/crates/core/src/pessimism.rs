//! Divergences between a policy and the empirical behavior policy, the
//! f-transform for state-aware weights, and the (state-aware) proximal
//! pessimistic evaluators.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::EmpiricalModel;
use crate::error::{invalid, Result};
use crate::mdp::{self, PolicyTable, TabularMdp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisKind {
    #[default]
    Cql,
    Tv,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisSpec {
    #[serde(default)]
    pub kind: DisKind,
    #[serde(default = "default_penalty")]
    pub out_of_support_penalty: f64,
}

fn default_penalty() -> f64 {
    1e6
}

impl Default for DisSpec {
    fn default() -> Self {
        Self {
            kind: DisKind::Cql,
            out_of_support_penalty: default_penalty(),
        }
    }
}

impl DisSpec {
    pub fn new(kind: DisKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.out_of_support_penalty > 0.0) || !self.out_of_support_penalty.is_finite() {
            return invalid(format!(
                "out_of_support_penalty must be positive and finite, got {}",
                self.out_of_support_penalty
            ));
        }
        Ok(())
    }

    /// Dis at one state. `beta` and `support` are that state's row.
    ///
    /// With all mass on supported actions CQL is `sum pi^2 / beta - 1` and KL
    /// is `sum pi ln(pi / beta)`. Mass `u` off support adds `penalty * u`; the
    /// supported part is then measured on the renormalized policy scaled by
    /// its mass, so the result never drops below `penalty * u`. A state with
    /// no supported action scores the full penalty (TV: 1).
    pub fn at_state(&self, pi: &[f64], beta: &[f64], support: &[bool]) -> f64 {
        let pen = self.out_of_support_penalty;
        if !support.iter().any(|&x| x) {
            return match self.kind {
                DisKind::Tv => 1.0,
                _ => pen,
            };
        }
        let unsupported: f64 = pi
            .iter()
            .zip(support)
            .filter(|(_, &ok)| !ok)
            .map(|(p, _)| p)
            .sum();
        let value = match self.kind {
            DisKind::Cql => {
                let mut sum = 0.0;
                let mut mass = 0.0;
                for ((&p, &b), &ok) in pi.iter().zip(beta).zip(support) {
                    if ok {
                        sum += p * p / b;
                        mass += p;
                    }
                }
                // -mass^2 rather than -1 keeps the supported part >= 0 when
                // some mass sits off support (Cauchy-Schwarz).
                sum - mass * mass + pen * unsupported
            }
            DisKind::Tv => 0.5 * pi.iter().zip(beta).map(|(p, b)| (p - b).abs()).sum::<f64>(),
            DisKind::Kl => {
                let mut sum = 0.0;
                let mut mass = 0.0;
                for ((&p, &b), &ok) in pi.iter().zip(beta).zip(support) {
                    if ok && p > 0.0 {
                        sum += p * (p / b).ln();
                        mass += p;
                    }
                }
                let correction = if mass > 0.0 { mass * mass.ln() } else { 0.0 };
                sum - correction + pen * unsupported
            }
        };
        value.max(0.0)
    }

    /// Partial derivatives of `at_state` with respect to each `pi[a]`.
    pub fn grad_at_state(&self, pi: &[f64], beta: &[f64], support: &[bool]) -> Vec<f64> {
        let pen = self.out_of_support_penalty;
        if !support.iter().any(|&x| x) {
            return vec![0.0; pi.len()];
        }
        let mass: f64 = pi
            .iter()
            .zip(support)
            .filter(|(_, &ok)| ok)
            .map(|(p, _)| p)
            .sum();
        pi.iter()
            .zip(beta)
            .zip(support)
            .map(|((&p, &b), &ok)| match (self.kind, ok) {
                (DisKind::Cql, true) => 2.0 * p / b - 2.0 * mass,
                (DisKind::Kl, true) => {
                    (p.max(f64::MIN_POSITIVE) / b).ln() - mass.max(f64::MIN_POSITIVE).ln()
                }
                (DisKind::Cql | DisKind::Kl, false) => pen,
                (DisKind::Tv, _) if p == b => 0.0,
                (DisKind::Tv, _) => 0.5 * (p - b).signum(),
            })
            .collect()
    }
}

/// State-wise divergence `Dis(pi, beta_hat)(s)` for every state.
pub fn dis_vector(
    spec: &DisSpec,
    policy: &PolicyTable,
    beta_hat: &PolicyTable,
    support: &[bool],
) -> Result<DVector<f64>> {
    spec.validate()?;
    let (n, k) = (policy.num_states(), policy.num_actions());
    if beta_hat.num_states() != n || beta_hat.num_actions() != k || support.len() != n * k {
        return invalid("policy, beta_hat and support mask disagree in shape");
    }
    Ok(DVector::from_fn(n, |s, _| {
        spec.at_state(
            &policy.row(s),
            &beta_hat.row(s),
            &support[s * k..(s + 1) * k],
        )
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    #[default]
    Identity,
    NormalizedLog,
    Clip,
}

/// Monotone map applied to raw occupancy ratios before they weight Dis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FTransform {
    #[serde(default)]
    pub kind: FKind,
    #[serde(default = "default_b0")]
    pub b0: f64,
    #[serde(default = "default_b1")]
    pub b1: f64,
    #[serde(default = "default_clip")]
    pub clip_max: f64,
}

fn default_b0() -> f64 {
    0.5
}

fn default_b1() -> f64 {
    5.0
}

fn default_clip() -> f64 {
    1.0
}

impl Default for FTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl FTransform {
    pub fn identity() -> Self {
        Self {
            kind: FKind::Identity,
            b0: default_b0(),
            b1: default_b1(),
            clip_max: default_clip(),
        }
    }

    pub fn normalized_log(b0: f64, b1: f64) -> Self {
        Self {
            kind: FKind::NormalizedLog,
            b0,
            b1,
            clip_max: default_clip(),
        }
    }

    pub fn clip(clip_max: f64) -> Self {
        Self {
            kind: FKind::Clip,
            clip_max,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b0.is_finite() && self.b1.is_finite() && self.b1 >= self.b0) {
            return invalid(format!("need finite b0 <= b1, got ({}, {})", self.b0, self.b1));
        }
        if !(self.clip_max > 0.0) {
            return invalid(format!("clip_max must be positive, got {}", self.clip_max));
        }
        Ok(())
    }

    /// Indices of the smallest and largest positive ratio.
    fn log_range(x: &DVector<f64>) -> Option<(usize, usize)> {
        let mut lo: Option<usize> = None;
        let mut hi: Option<usize> = None;
        for (i, &v) in x.iter().enumerate() {
            if v > 0.0 {
                if lo.is_none_or(|j| v < x[j]) {
                    lo = Some(i);
                }
                if hi.is_none_or(|j| v > x[j]) {
                    hi = Some(i);
                }
            }
        }
        lo.zip(hi)
    }

    pub fn apply(&self, ratios: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            FKind::Identity => ratios.clone(),
            FKind::Clip => ratios.map(|x| x.min(self.clip_max)),
            FKind::NormalizedLog => {
                let Some((lo, hi)) = Self::log_range(ratios) else {
                    return DVector::from_element(ratios.len(), self.b0);
                };
                let (x_lo, x_hi) = (ratios[lo], ratios[hi]);
                if x_hi == x_lo {
                    let mid = 0.5 * (self.b0 + self.b1);
                    return ratios.map(|x| if x > 0.0 { mid } else { self.b0 });
                }
                // Differences of logs are taken as logs of quotients so a
                // power-of-two rescaling of every ratio is exactly invisible.
                let span = (x_hi / x_lo).ln();
                ratios.map(|x| {
                    if x <= 0.0 {
                        self.b0
                    } else if x == x_hi {
                        self.b1
                    } else {
                        self.b0 + (self.b1 - self.b0) * ((x / x_lo).ln() / span)
                    }
                })
            }
        }
    }

    /// Vector-Jacobian product: gradient of `<upstream, apply(ratios)>` with
    /// respect to `ratios`. Ties at the extremes use the first index.
    pub fn vjp(&self, ratios: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            FKind::Identity => upstream.clone(),
            FKind::Clip => DVector::from_fn(ratios.len(), |i, _| {
                if ratios[i] < self.clip_max {
                    upstream[i]
                } else {
                    0.0
                }
            }),
            FKind::NormalizedLog => {
                let mut grad = DVector::zeros(ratios.len());
                let Some((lo, hi)) = Self::log_range(ratios) else {
                    return grad;
                };
                let (x_lo, x_hi) = (ratios[lo], ratios[hi]);
                if x_hi == x_lo {
                    return grad;
                }
                let span = (x_hi / x_lo).ln();
                let scale = (self.b1 - self.b0) / span;
                let mut total = 0.0;
                let mut weighted = 0.0;
                for (i, &x) in ratios.iter().enumerate() {
                    if x > 0.0 {
                        let t = (x / x_lo).ln() / span;
                        total += upstream[i];
                        weighted += upstream[i] * t;
                        grad[i] = scale * upstream[i];
                    }
                }
                grad[lo] -= scale * (total - weighted);
                grad[hi] -= scale * weighted;
                for (i, &x) in ratios.iter().enumerate() {
                    if x > 0.0 {
                        grad[i] /= x;
                    }
                }
                grad
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PessimismSpec {
    #[serde(default)]
    pub dis: DisSpec,
    pub alpha: f64,
    #[serde(default)]
    pub state_aware: bool,
    #[serde(default)]
    pub f: FTransform,
}

impl PessimismSpec {
    pub fn plain(dis: DisSpec, alpha: f64) -> Self {
        Self {
            dis,
            alpha,
            state_aware: false,
            f: FTransform::identity(),
        }
    }

    pub fn state_aware(dis: DisSpec, alpha: f64, f: FTransform) -> Self {
        Self {
            dis,
            alpha,
            state_aware: true,
            f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return invalid(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        self.dis.validate()?;
        self.f.validate()
    }
}

/// An empirical model together with the completed empirical MDP `M_D`
/// (discount and start distribution fixed).
#[derive(Clone, Debug)]
pub struct OfflineContext {
    pub model: EmpiricalModel,
    pub mdp_d: TabularMdp,
    data_floor: DVector<f64>,
}

impl OfflineContext {
    pub fn new(model: EmpiricalModel, discount: f64, initial_dist: &DVector<f64>) -> Result<Self> {
        let mdp_d = model.empirical_mdp(discount, initial_dist)?;
        let half_count = 0.5 / model.size() as f64;
        let data_floor = model
            .d_data()
            .map(|d| if d > 0.0 { d } else { half_count });
        Ok(Self {
            model,
            mdp_d,
            data_floor,
        })
    }

    pub fn discount(&self) -> f64 {
        self.mdp_d.discount()
    }

    /// `d^D(s)` with unvisited states raised to a half count `1 / (2|D|)`.
    pub fn data_floor(&self) -> &DVector<f64> {
        &self.data_floor
    }

    pub fn dis(&self, spec: &DisSpec, policy: &PolicyTable) -> Result<DVector<f64>> {
        dis_vector(spec, policy, self.model.beta_hat(), self.model.support())
    }

    /// Raw ratios `d_norm^pi_{M_D}(s) / d^D(s)` before any transform.
    pub fn occupancy_ratios(&self, policy: &PolicyTable) -> Result<DVector<f64>> {
        let occ = mdp::occupancy_raw(&self.mdp_d, policy)? * (1.0 - self.discount());
        Ok(occ.component_div(&self.data_floor))
    }
}

/// `w(s) = f(d_norm^pi_{M_D}(s) / d^D(s))`.
pub fn state_aware_weights(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    f: &FTransform,
) -> Result<DVector<f64>> {
    f.validate()?;
    Ok(f.apply(&ctx.occupancy_ratios(policy)?))
}

/// The penalty vector `p` of `spec`: `Dis` or `w * Dis`.
pub fn penalty_vector(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    spec: &PessimismSpec,
) -> Result<DVector<f64>> {
    spec.validate()?;
    let dis = ctx.dis(&spec.dis, policy)?;
    if spec.state_aware {
        Ok(state_aware_weights(ctx, policy, &spec.f)?.component_mul(&dis))
    } else {
        Ok(dis)
    }
}

/// `v = (I - gamma A^pi P_D)^{-1} (A^pi r_D - alpha * penalty)`.
pub fn penalized_eval(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    alpha: f64,
    penalty: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mdp_d = &ctx.mdp_d;
    mdp_d.check_policy(policy)?;
    if penalty.len() != mdp_d.num_states() {
        return invalid("penalty vector has the wrong length");
    }
    let rhs = mdp_d.contract(policy, mdp_d.reward()) - penalty * alpha;
    mdp::solve(mdp_d.resolvent_system(policy), &rhs, "penalized evaluation")
}

/// Proximal pessimistic evaluation with the plain `Dis` penalty.
pub fn proximal_eval(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    spec: &PessimismSpec,
) -> Result<DVector<f64>> {
    let plain = PessimismSpec {
        state_aware: false,
        ..*spec
    };
    penalized_eval(ctx, policy, spec.alpha, &penalty_vector(ctx, policy, &plain)?)
}

/// State-aware proximal evaluation; the penalty is `w * Dis`.
pub fn sa_proximal_eval(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    spec: &PessimismSpec,
) -> Result<DVector<f64>> {
    let sa = PessimismSpec {
        state_aware: true,
        ..*spec
    };
    penalized_eval(ctx, policy, spec.alpha, &penalty_vector(ctx, policy, &sa)?)
}

/// Same computation as `sa_proximal_eval` with the weights given directly.
pub fn sa_proximal_eval_with_weights(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    spec: &PessimismSpec,
    weights: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dis = ctx.dis(&spec.dis, policy)?;
    penalized_eval(ctx, policy, spec.alpha, &weights.component_mul(&dis))
}

/// Dispatches on `spec.state_aware`.
pub fn evaluate(ctx: &OfflineContext, policy: &PolicyTable, spec: &PessimismSpec) -> Result<DVector<f64>> {
    penalized_eval(ctx, policy, spec.alpha, &penalty_vector(ctx, policy, spec)?)
}
