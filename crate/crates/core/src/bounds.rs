//! Suboptimality upper bounds and executable checks of the comparison
//! theorems between plain and state-aware proximal pessimism.
//!
//! Occupancies inside bounds are raw (they sum to `1 / (1 - gamma)`);
//! ratios that feed the state-aware weights use the normalized form.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{pair_uncertainty, uncertainty_vector};
use crate::error::{invalid, Result};
use crate::mdp::{self, optimal_policy, PolicyTable, TabularMdp};
use crate::pessimism::{
    evaluate, penalty_vector, state_aware_weights, DisSpec, FKind, FTransform, OfflineContext,
    PessimismSpec,
};
use crate::search::{self, enumeration_size, Direction, ObjectiveTerm, PolicyClass, PolicyObjective};

const VI_TOL: f64 = 1e-12;
/// Relative slack for comparisons that are exact in real arithmetic.
pub const REL_TOL: f64 = 1e-9;
/// Factor by which the large-alpha checks exceed their threshold.
pub const LARGE_ALPHA_FACTOR: f64 = 1.1;

/// `C0 = 1/(1-gamma) min(sqrt(ln(2 S A / delta) / 2), sqrt(ln(2 S |Pi| / delta) / 2))`.
pub fn c0_constant(
    delta: f64,
    num_states: usize,
    num_actions: usize,
    policy_class_size: f64,
    discount: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("delta must lie in (0, 1), got {delta}"));
    }
    if !(0.0..1.0).contains(&discount) {
        return invalid(format!("discount {discount} outside [0, 1)"));
    }
    let branch = |count: f64| (0.5 * (2.0 * num_states as f64 * count / delta).ln()).max(0.0).sqrt();
    let first = branch(num_actions as f64);
    let second = branch(policy_class_size);
    Ok(first.min(second) / (1.0 - discount))
}

/// `<rho, V* - V^pi>`.
pub fn true_suboptimality(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    let (_, best) = optimal_policy(mdp, VI_TOL)?;
    let v = mdp::exact_policy_values(mdp, policy)?;
    Ok(mdp.initial_dist().dot(&(best.v - v.v)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Dis,
    SaDis,
    FSaDis,
}

impl PenaltyKind {
    pub fn of(spec: &PessimismSpec) -> Self {
        match (spec.state_aware, spec.f.kind) {
            (false, _) => Self::Dis,
            (true, FKind::Identity) => Self::SaDis,
            (true, _) => Self::FSaDis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub c0: f64,
    pub inf_term: f64,
    pub pi_bar_2: PolicyTable,
    pub sup_term: f64,
    pub pi_bar_1: PolicyTable,
    pub total_ub: f64,
    /// Maximizer of the pessimistic evaluation under the same penalty.
    pub learned_policy: PolicyTable,
    pub true_subopt: f64,
    pub penalty_kind: PenaltyKind,
}

/// INF and SUP terms with their arg-policies.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTerms {
    pub inf_term: f64,
    pub pi_bar_2: PolicyTable,
    pub sup_term: f64,
    pub pi_bar_1: PolicyTable,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.inf_term + self.sup_term
    }
}

/// Everything a bound computation needs besides the penalty.
#[derive(Clone, Debug)]
pub struct BoundSetup<'a> {
    pub mdp: &'a TabularMdp,
    pub ctx: &'a OfflineContext,
    pub class: PolicyClass,
    pub c0: f64,
    pub cap: f64,
    v_star: f64,
}

impl<'a> BoundSetup<'a> {
    /// `ctx` must be built with the true start distribution.
    pub fn new(
        mdp: &'a TabularMdp,
        ctx: &'a OfflineContext,
        class: PolicyClass,
        delta: f64,
    ) -> Result<Self> {
        let (n, k) = (mdp.num_states(), mdp.num_actions());
        if ctx.model.num_states() != n || ctx.model.num_actions() != k {
            return invalid("empirical model does not match the MDP");
        }
        let c0 = c0_constant(delta, n, k, class.size(n, k), mdp.discount())?;
        let (_, best) = optimal_policy(mdp, VI_TOL)?;
        Ok(Self {
            mdp,
            ctx,
            class,
            c0,
            cap: 1.0,
            v_star: mdp.initial_dist().dot(&best.v),
        })
    }

    fn uncertainty_loss(&self) -> DVector<f64> {
        pair_uncertainty(&self.ctx.model, self.cap) * self.c0
    }

    /// `min_pi <rho, V* - V^pi> + <d_D^pi, C0 u + alpha p>` and
    /// `max_pi <d_D^pi, C0 u - alpha p>`.
    pub fn terms(&self, spec: &PessimismSpec) -> Result<BoundTerms> {
        let u = self.uncertainty_loss();
        let inf_obj = PolicyObjective::new(
            self.ctx,
            spec,
            vec![
                ObjectiveTerm {
                    mdp: self.mdp.clone(),
                    loss: -self.mdp.reward(),
                    kappa: 0.0,
                },
                ObjectiveTerm {
                    mdp: self.ctx.mdp_d.clone(),
                    loss: u.clone(),
                    kappa: spec.alpha,
                },
            ],
            self.v_star,
        )?;
        let sup_obj = PolicyObjective::new(
            self.ctx,
            spec,
            vec![ObjectiveTerm {
                mdp: self.ctx.mdp_d.clone(),
                loss: u,
                kappa: -spec.alpha,
            }],
            0.0,
        )?;
        let (pi_bar_2, inf_term) = search::search(&inf_obj, Direction::Minimize, &self.class)?;
        let (pi_bar_1, sup_term) = search::search(&sup_obj, Direction::Maximize, &self.class)?;
        Ok(BoundTerms {
            inf_term,
            pi_bar_2,
            sup_term,
            pi_bar_1,
        })
    }

    pub fn report(&self, spec: &PessimismSpec) -> Result<BoundReport> {
        let terms = self.terms(spec)?;
        let (learned, _) = search::optimize_policy(self.ctx, spec, &self.class)?;
        let v = mdp::exact_policy_values(self.mdp, &learned)?;
        let true_subopt = self.v_star - self.mdp.initial_dist().dot(&v.v);
        Ok(BoundReport {
            c0: self.c0,
            total_ub: terms.total(),
            inf_term: terms.inf_term,
            pi_bar_2: terms.pi_bar_2,
            sup_term: terms.sup_term,
            pi_bar_1: terms.pi_bar_1,
            learned_policy: learned,
            true_subopt,
            penalty_kind: PenaltyKind::of(spec),
        })
    }
}

pub fn subopt_upper_bound(
    mdp: &TabularMdp,
    ctx: &OfflineContext,
    class: &PolicyClass,
    spec: &PessimismSpec,
    delta: f64,
) -> Result<BoundReport> {
    if let PolicyClass::SupportedSoftmax { steps: 0, .. } | PolicyClass::SupportedSoftmax { restarts: 0, .. } = class {
        return invalid("optimizer budget is zero");
    }
    BoundSetup::new(mdp, ctx, *class, delta)?.report(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Outcome {
    pub lhs: f64,
    pub rhs: f64,
    pub condition_holds: bool,
    pub conclusion_holds: bool,
}

/// `<d^pi_D, (w^pi - 1) Dis(pi)>` with raw occupancy in `M_D`.
pub fn excess_penalty(ctx: &OfflineContext, policy: &PolicyTable, spec: &PessimismSpec) -> Result<f64> {
    let occ = mdp::occupancy_raw(&ctx.mdp_d, policy)?;
    let w = state_aware_weights(ctx, policy, &spec.f)?;
    let dis = ctx.dis(&spec.dis, policy)?;
    Ok(occ.dot(&(w.add_scalar(-1.0)).component_mul(&dis)))
}

/// `lhs` uses the SA report's `pi_bar_1`, `rhs` the plain report's
/// `pi_bar_2`; `spec` supplies Dis and the weight transform.
pub fn theorem2_check(
    report_dis: &BoundReport,
    report_sa: &BoundReport,
    ctx: &OfflineContext,
    spec: &PessimismSpec,
) -> Result<Theorem2Outcome> {
    let lhs = excess_penalty(ctx, &report_sa.pi_bar_1, spec)?;
    let rhs = excess_penalty(ctx, &report_dis.pi_bar_2, spec)?;
    let scale = 1.0
        + report_dis.inf_term.abs()
        + report_dis.sup_term.abs()
        + report_sa.inf_term.abs()
        + report_sa.sup_term.abs();
    Ok(Theorem2Outcome {
        lhs,
        rhs,
        condition_holds: lhs >= rhs,
        conclusion_holds: report_sa.total_ub <= report_dis.total_ub + REL_TOL * scale,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub delta: f64,
    pub c0: f64,
    pub eps_beta: f64,
    pub eps_d: f64,
    pub delta_beta: f64,
    pub c_slack: f64,
    pub alpha_prime: f64,
    pub policy_class_size: f64,
}

/// Deterministic policy that heads for `target` along supported actions:
/// backward BFS over the support graph of `P_D`, then at each visited state
/// the supported action with the smallest expected distance. At `target`
/// itself the action most likely to stay close is taken.
pub fn path_policy(ctx: &OfflineContext, target: usize) -> Result<PolicyTable> {
    let model = &ctx.model;
    let (n, k) = (model.num_states(), model.num_actions());
    if target >= n {
        return invalid(format!("state {target} out of range"));
    }
    let mut dist = vec![usize::MAX; n];
    dist[target] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(t) = queue.pop_front() {
        for s in 0..n {
            if dist[s] != usize::MAX {
                continue;
            }
            let reaches = (0..k).any(|a| model.supported(s, a) && model.p_hat()[(model.index(s, a), t)] > 0.0);
            if reaches {
                dist[s] = dist[t] + 1;
                queue.push_back(s);
            }
        }
    }
    let far = (n + 1) as f64;
    let actions: Vec<usize> = (0..n)
        .map(|s| {
            let expected = |a: usize| -> f64 {
                (0..n)
                    .map(|t| {
                        let d = if dist[t] == usize::MAX { far } else { dist[t] as f64 };
                        model.p_hat()[(model.index(s, a), t)] * d
                    })
                    .sum()
            };
            let mut best: Option<(usize, f64)> = None;
            for a in (0..k).filter(|&a| model.supported(s, a)) {
                let e = expected(a);
                if best.is_none_or(|(_, b)| e < b) {
                    best = Some((a, e));
                }
            }
            best.map_or(0, |(a, _)| a)
        })
        .collect();
    PolicyTable::deterministic(&actions, k)
}

/// Visited state of smallest `d^D`, lowest index on ties.
pub fn rarest_state(ctx: &OfflineContext) -> Result<usize> {
    let model = &ctx.model;
    (0..model.num_states())
        .filter(|&s| model.visited(s))
        .min_by(|&a, &b| model.d_data()[a].total_cmp(&model.d_data()[b]))
        .ok_or_else(|| crate::Error::InvalidArgument("no visited state".into()))
}

/// Measures `eps_beta`, `eps_d`, `Delta_beta` and `c` on the instance.
///
/// `eps_d` is the normalized occupancy of `s1` under the path policy,
/// `Delta_beta` its largest Dis over visited states and `c` the largest
/// weight of `pi_bar_2` minus one.
pub fn measure_constants(
    ctx: &OfflineContext,
    spec: &PessimismSpec,
    pi_bar_2: &PolicyTable,
    s1: usize,
    c0: f64,
    delta: f64,
    alpha_prime: f64,
    policy_class_size: f64,
) -> Result<TheoremConstants> {
    let pi0 = path_policy(ctx, s1)?;
    let occ = mdp::occupancy_raw(&ctx.mdp_d, &pi0)? * (1.0 - ctx.discount());
    let dis0 = ctx.dis(&spec.dis, &pi0)?;
    let delta_beta = (0..ctx.model.num_states())
        .filter(|&s| ctx.model.visited(s))
        .map(|s| dis0[s])
        .fold(0.0, f64::max);
    let w2 = state_aware_weights(ctx, pi_bar_2, &spec.f)?;
    Ok(TheoremConstants {
        delta,
        c0,
        eps_beta: ctx.model.min_supported_beta(),
        eps_d: occ[s1],
        delta_beta,
        c_slack: w2.max() - 1.0,
        alpha_prime,
        policy_class_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Outcome {
    pub applicable: bool,
    pub c_m: f64,
    pub c_m_prime: f64,
    pub lhs: f64,
    pub threshold: f64,
    pub condition_holds: bool,
}

/// `C'_M (eps_beta / d^D(s1) - sqrt(eps_beta)) Dis(pi_bar_1)(s1) > 1 + c`
/// with `C_M = C0 eps_d - alpha' Delta_beta`, `C'_M = C_M^2 / Delta_beta`.
pub fn theorem3_check(
    ctx: &OfflineContext,
    constants: &TheoremConstants,
    pi_bar_1: &PolicyTable,
    s1: usize,
    dis: &DisSpec,
) -> Result<Theorem3Outcome> {
    let c_m = constants.c0 * constants.eps_d - constants.alpha_prime * constants.delta_beta;
    let threshold = 1.0 + constants.c_slack;
    if !(c_m > 0.0) || !(constants.delta_beta > 0.0) {
        return Ok(Theorem3Outcome {
            applicable: false,
            c_m,
            c_m_prime: f64::NAN,
            lhs: f64::NAN,
            threshold,
            condition_holds: false,
        });
    }
    let c_m_prime = c_m * c_m / constants.delta_beta;
    let d1 = ctx.model.d_data()[s1];
    let dis1 = ctx.dis(dis, pi_bar_1)?[s1];
    let lhs = c_m_prime * (constants.eps_beta / d1 - constants.eps_beta.sqrt()) * dis1;
    Ok(Theorem3Outcome {
        applicable: true,
        c_m,
        c_m_prime,
        lhs,
        threshold,
        condition_holds: lhs > threshold,
    })
}

/// One full `theorem3_check` evaluation on an instance, constants included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Run {
    pub s1: usize,
    pub constants: TheoremConstants,
    pub alpha: f64,
    pub outcome: Theorem3Outcome,
    pub ub_dis: f64,
    pub ub_sa: f64,
    pub true_subopt: f64,
}

/// Measures the constants, sets `alpha' = fraction * C0 eps_d / Delta_beta`
/// and `alpha = alpha' / |D|`, computes both bounds and evaluates the
/// condition with the SA bound's `pi_bar_1` and the plain bound's `pi_bar_2`.
/// `fraction` must lie in (0, 1) for `alpha'` to be admissible.
pub fn theorem3_run(
    setup: &BoundSetup,
    dis: &DisSpec,
    f: &FTransform,
    delta: f64,
    alpha_fraction: f64,
) -> Result<Theorem3Run> {
    if !(alpha_fraction > 0.0 && alpha_fraction < 1.0) {
        return invalid(format!("alpha fraction must lie in (0, 1), got {alpha_fraction}"));
    }
    let ctx = setup.ctx;
    let (n, k) = (ctx.model.num_states(), ctx.model.num_actions());
    let size = setup.class.size(n, k);
    let s1 = rarest_state(ctx)?;
    let probe = PessimismSpec::state_aware(*dis, 0.0, *f);
    let probe = measure_constants(ctx, &probe, ctx.model.beta_hat(), s1, setup.c0, delta, 0.0, size)?;
    let alpha_prime = if probe.delta_beta > 0.0 {
        alpha_fraction * setup.c0 * probe.eps_d / probe.delta_beta
    } else {
        0.0
    };
    let alpha = alpha_prime / ctx.model.size() as f64;
    let plain = PessimismSpec::plain(*dis, alpha);
    let sa = PessimismSpec::state_aware(*dis, alpha, *f);
    let rd = setup.report(&plain)?;
    let rs = setup.report(&sa)?;
    let constants = measure_constants(ctx, &sa, &rd.pi_bar_2, s1, setup.c0, delta, alpha_prime, size)?;
    let outcome = theorem3_check(ctx, &constants, &rs.pi_bar_1, s1, dis)?;
    Ok(Theorem3Run {
        s1,
        constants,
        alpha,
        outcome,
        ub_dis: rd.total_ub,
        ub_sa: rs.total_ub,
        true_subopt: rs.true_subopt,
    })
}

/// Deterministic policies that take supported actions at every visited
/// state (action 0 elsewhere), in enumeration order.
pub fn supported_deterministic_policies(ctx: &OfflineContext) -> Result<Vec<PolicyTable>> {
    let model = &ctx.model;
    let (n, k) = (model.num_states(), model.num_actions());
    let choices: Vec<Vec<usize>> = (0..n)
        .map(|s| {
            let c: Vec<usize> = (0..k).filter(|&a| model.supported(s, a)).collect();
            if c.is_empty() {
                vec![0]
            } else {
                c
            }
        })
        .collect();
    let total = choices.iter().try_fold(1usize, |acc, c| acc.checked_mul(c.len()));
    if total.is_none_or(|t| t > search::MAX_ENUMERATION) {
        return invalid("too many supported deterministic policies to enumerate");
    }
    let mut out = Vec::with_capacity(total.unwrap_or(0));
    let mut digits = vec![0usize; n];
    loop {
        let actions: Vec<usize> = (0..n).map(|s| choices[s][digits[s]]).collect();
        out.push(PolicyTable::deterministic(&actions, k)?);
        let mut s = 0;
        loop {
            if s == n {
                return Ok(out);
            }
            digits[s] += 1;
            if digits[s] < choices[s].len() {
                break;
            }
            digits[s] = 0;
            s += 1;
        }
    }
}

/// `C0 max_s w(s) Dis(s) n_D(s)^{-1/2}` over visited states.
pub fn large_alpha_threshold(
    ctx: &OfflineContext,
    policy: &PolicyTable,
    dis: &DisSpec,
    f: &FTransform,
    c0: f64,
) -> Result<f64> {
    let w = state_aware_weights(ctx, policy, f)?;
    let d = ctx.dis(dis, policy)?;
    let model = &ctx.model;
    Ok((0..model.num_states())
        .filter(|&s| model.visited(s))
        .map(|s| c0 * w[s] * d[s] / (model.count_s()[s] as f64).sqrt())
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Outcome {
    pub applicable: bool,
    pub threshold: f64,
    pub alpha: f64,
    /// Largest clip level found with `UB_clipped_SA <= UB_Dis`.
    pub clip_c: Option<f64>,
    pub ub_clipped_sa: f64,
    pub ub_dis: f64,
}

const CLIP_GRID: usize = 64;
const CLIP_BISECTIONS: usize = 30;

/// Scans clip levels `C` in `[1, max ratio]` on a geometric grid, then
/// bisects above the largest admissible grid point. The clipped bound is
/// not monotone in `C` in general, hence the scan.
pub fn theorem4_clip_search(
    mdp: &TabularMdp,
    ctx: &OfflineContext,
    class: &PolicyClass,
    spec: &PessimismSpec,
    delta: f64,
) -> Result<Theorem4Outcome> {
    let setup = BoundSetup::new(mdp, ctx, *class, delta)?;
    let threshold = supported_deterministic_policies(ctx)?
        .iter()
        .map(|pi| large_alpha_threshold(ctx, pi, &spec.dis, &FTransform::identity(), setup.c0))
        .try_fold(0.0, |acc: f64, x| x.map(|x| acc.max(x)))?;
    let alpha = spec.alpha;
    if !(alpha > threshold) {
        return Ok(Theorem4Outcome {
            applicable: false,
            threshold,
            alpha,
            clip_c: None,
            ub_clipped_sa: f64::NAN,
            ub_dis: f64::NAN,
        });
    }
    let plain = PessimismSpec::plain(spec.dis, alpha);
    let ub_dis = setup.terms(&plain)?.total();
    let clipped = |c: f64| -> Result<f64> {
        setup
            .terms(&PessimismSpec::state_aware(spec.dis, alpha, FTransform::clip(c)))
            .map(|t| t.total())
    };
    let tol = REL_TOL * (1.0 + ub_dis.abs());
    let hi = 1.0 / ctx.data_floor().min();
    let grid: Vec<f64> = (0..CLIP_GRID)
        .map(|i| hi.powf(i as f64 / (CLIP_GRID - 1) as f64))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &c) in grid.iter().enumerate() {
        let ub = clipped(c)?;
        if ub <= ub_dis + tol {
            best = Some((i, ub));
        }
    }
    let Some((i, mut ub_best)) = best else {
        return Ok(Theorem4Outcome {
            applicable: true,
            threshold,
            alpha,
            clip_c: None,
            ub_clipped_sa: clipped(1.0)?,
            ub_dis,
        });
    };
    let mut lo = grid[i];
    if i + 1 < grid.len() {
        let mut up = grid[i + 1];
        for _ in 0..CLIP_BISECTIONS {
            let mid = 0.5 * (lo + up);
            let ub = clipped(mid)?;
            if ub <= ub_dis + tol {
                lo = mid;
                ub_best = ub;
            } else {
                up = mid;
            }
        }
    }
    Ok(Theorem4Outcome {
        applicable: true,
        threshold,
        alpha,
        clip_c: Some(lo),
        ub_clipped_sa: ub_best,
        ub_dis,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem5Outcome {
    pub pointwise_bound_holds: bool,
    pub threshold: f64,
    pub large_alpha: f64,
    pub large_alpha_underestimates: bool,
}

/// `V_hat(s) <= V(s) - alpha w(s) Dis(s) + C0 u(s)` on visited states, and
/// `V_hat <= V` there once alpha exceeds the policy's threshold.
pub fn underestimation_check(
    mdp: &TabularMdp,
    ctx: &OfflineContext,
    policy: &PolicyTable,
    spec: &PessimismSpec,
    c0: f64,
) -> Result<Theorem5Outcome> {
    let sa = PessimismSpec {
        state_aware: true,
        ..*spec
    };
    let truth = mdp::exact_policy_values(mdp, policy)?.v;
    let model = &ctx.model;
    let visited: Vec<usize> = (0..model.num_states()).filter(|&s| model.visited(s)).collect();
    let tol = |x: f64| REL_TOL * (1.0 + x.abs());

    let v_hat = evaluate(ctx, policy, &sa)?;
    let p = penalty_vector(ctx, policy, &sa)?;
    let u = uncertainty_vector(model, policy, 1.0)?;
    let pointwise = visited.iter().all(|&s| {
        let bound = truth[s] - sa.alpha * p[s] + c0 * u[s];
        v_hat[s] <= bound + tol(bound)
    });

    let threshold = large_alpha_threshold(ctx, policy, &sa.dis, &sa.f, c0)?;
    let large_alpha = LARGE_ALPHA_FACTOR * threshold;
    let v_large = evaluate(ctx, policy, &PessimismSpec { alpha: large_alpha, ..sa })?;
    let under = visited.iter().all(|&s| v_large[s] <= truth[s] + tol(truth[s]));
    Ok(Theorem5Outcome {
        pointwise_bound_holds: pointwise,
        threshold,
        large_alpha,
        large_alpha_underestimates: under,
    })
}

/// Whether deterministic enumeration is feasible for the instance.
pub fn enumerable(mdp: &TabularMdp) -> bool {
    enumeration_size(mdp.num_states(), mdp.num_actions()).is_some()
}
