//! Tabular DualDICE: occupancy ratios `zeta = d^pi / d^D` from the saddle
//! point of
//! `J(nu, zeta) = E_D[(nu(s,a) - gamma E_pi nu(s',.)) zeta(s,a) - zeta^2/2]
//!               - (1 - gamma) E_{rho, pi}[nu]`.
//!
//! Only supported pairs carry `nu` and `zeta`; elsewhere both are zero. For a
//! target policy that stays on the data's support the solution equals the
//! ratio of the normalized occupancy in the empirical MDP to `d^D(s, a)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_empirical_model, EmpiricalModel, OfflineDataset, Transition};
use crate::error::{invalid, Error, Result};
use crate::mdp::{self, PolicyTable};
use crate::pessimism::OfflineContext;

const POLICY_FLOOR: f64 = 1e-8;
const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiceSolver {
    ClosedForm,
    /// Gradient descent on `nu`, ascent on `zeta`. Full batch unless
    /// `batch_size` is set, in which case transitions are resampled each step.
    AlternatingSgd {
        steps: usize,
        #[serde(default = "default_lr_zeta")]
        lr_zeta: f64,
        /// `None` picks `0.5 / ((1 + gamma)^2 max d^D(s, a))`.
        #[serde(default)]
        lr_nu: Option<f64>,
        #[serde(default)]
        batch_size: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_lr_zeta() -> f64 {
    0.5
}

impl Default for DiceSolver {
    fn default() -> Self {
        Self::ClosedForm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualDiceState {
    pub nu: DVector<f64>,
    pub zeta: DVector<f64>,
    pub solver: DiceSolver,
    pub steps_taken: usize,
    pub ridge_used: bool,
}

impl DualDiceState {
    pub fn write_zeta_csv<W: Write>(&self, writer: W, num_actions: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "a", "zeta"])?;
        for (i, z) in self.zeta.iter().enumerate() {
            w.write_record([
                (i / num_actions).to_string(),
                (i % num_actions).to_string(),
                z.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_omega_csv<W: Write>(writer: W, omega: &DVector<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["s", "omega"])?;
    for (s, x) in omega.iter().enumerate() {
        w.write_record([s.to_string(), x.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Dense pieces of the saddle problem restricted to supported pairs.
struct Restricted {
    index: Vec<usize>,
    /// `I - gamma (P_D Pi)` on supported rows and columns.
    b: DMatrix<f64>,
    d: DVector<f64>,
    /// `(1 - gamma) mu_0` on supported pairs.
    mu0: DVector<f64>,
}

fn restricted(
    model: &EmpiricalModel,
    target: &PolicyTable,
    discount: f64,
    initial_dist: &DVector<f64>,
) -> Result<Restricted> {
    let (n, k) = (model.num_states(), model.num_actions());
    if target.num_states() != n || target.num_actions() != k || initial_dist.len() != n {
        return invalid("target policy or initial distribution does not match the model");
    }
    let index: Vec<usize> = (0..n * k).filter(|&i| model.support()[i]).collect();
    let m = index.len();
    let mut b = DMatrix::identity(m, m);
    for (r, &i) in index.iter().enumerate() {
        for (c, &j) in index.iter().enumerate() {
            let (s_next, a_next) = (j / k, j % k);
            b[(r, c)] -= discount * model.p_hat()[(i, s_next)] * target.prob(s_next, a_next);
        }
    }
    let d_sa = model.d_data_sa();
    let d = DVector::from_iterator(m, index.iter().map(|&i| d_sa[i]));
    let mu0 = DVector::from_iterator(
        m,
        index
            .iter()
            .map(|&i| (1.0 - discount) * initial_dist[i / k] * target.prob(i / k, i % k)),
    );
    Ok(Restricted { index, b, d, mu0 })
}

fn scatter(values: &DVector<f64>, index: &[usize], len: usize) -> DVector<f64> {
    let mut out = DVector::zeros(len);
    for (r, &i) in index.iter().enumerate() {
        out[i] = values[r];
    }
    out
}

/// Builds the empirical model of `dataset` and solves there.
pub fn solve_dualdice(
    dataset: &OfflineDataset,
    target: &PolicyTable,
    discount: f64,
    initial_dist: &DVector<f64>,
    solver: &DiceSolver,
) -> Result<DualDiceState> {
    let model = build_empirical_model(dataset, target.num_states(), target.num_actions())?;
    match solver {
        DiceSolver::AlternatingSgd {
            batch_size: Some(_),
            ..
        } => solve_minibatch(&model, dataset.transitions(), target, discount, initial_dist, solver),
        _ => solve_dualdice_model(&model, target, discount, initial_dist, solver),
    }
}

/// Closed form or full-batch gradient play on the counts of `model`.
pub fn solve_dualdice_model(
    model: &EmpiricalModel,
    target: &PolicyTable,
    discount: f64,
    initial_dist: &DVector<f64>,
    solver: &DiceSolver,
) -> Result<DualDiceState> {
    if !(0.0..1.0).contains(&discount) {
        return invalid(format!("discount {discount} outside [0, 1)"));
    }
    let len = model.num_states() * model.num_actions();
    let sys = restricted(model, target, discount, initial_dist)?;
    match *solver {
        DiceSolver::ClosedForm => {
            let bt = sys.b.transpose();
            let normal = &bt * DMatrix::from_diagonal(&sys.d) * &sys.b;
            let (nu, ridge_used) = match normal.clone().lu().solve(&sys.mu0) {
                Some(nu) if nu.iter().all(|x| x.is_finite()) => (nu, false),
                _ => {
                    let m = normal.nrows();
                    let ridged = normal + DMatrix::identity(m, m) * RIDGE;
                    let nu = ridged.lu().solve(&sys.mu0).ok_or_else(|| {
                        Error::Numerical("DualDICE normal equations singular even with ridge".into())
                    })?;
                    (nu, true)
                }
            };
            let zeta = (&sys.b * &nu).map(|x| x.max(0.0));
            Ok(DualDiceState {
                nu: scatter(&nu, &sys.index, len),
                zeta: scatter(&zeta, &sys.index, len),
                solver: solver.clone(),
                steps_taken: 0,
                ridge_used,
            })
        }
        DiceSolver::AlternatingSgd {
            steps,
            lr_zeta,
            lr_nu,
            ..
        } => {
            let m = sys.index.len();
            let max_d = sys.d.max();
            let lr_nu = lr_nu.unwrap_or(0.5 / ((1.0 + discount).powi(2) * max_d));
            let bt = sys.b.transpose();
            let mut nu = DVector::<f64>::zeros(m);
            let mut zeta = DVector::from_element(m, 1.0);
            for _ in 0..steps {
                let residual = &sys.b * &nu - &zeta;
                // zeta ascent preconditioned by d^D(s, a)^{-1}.
                zeta = (&zeta + residual * lr_zeta).map(|x| x.max(0.0));
                let grad_nu = &bt * zeta.component_mul(&sys.d) - &sys.mu0;
                nu -= grad_nu * lr_nu;
            }
            Ok(DualDiceState {
                nu: scatter(&nu, &sys.index, len),
                zeta: scatter(&zeta, &sys.index, len),
                solver: solver.clone(),
                steps_taken: steps,
                ridge_used: false,
            })
        }
    }
}

fn solve_minibatch(
    model: &EmpiricalModel,
    transitions: &[Transition],
    target: &PolicyTable,
    discount: f64,
    initial_dist: &DVector<f64>,
    solver: &DiceSolver,
) -> Result<DualDiceState> {
    let DiceSolver::AlternatingSgd {
        steps,
        lr_zeta,
        lr_nu,
        batch_size: Some(batch),
        seed,
    } = *solver
    else {
        return invalid("minibatch solve needs a batch size");
    };
    if batch == 0 {
        return invalid("batch_size must be at least 1");
    }
    let (n, k) = (model.num_states(), model.num_actions());
    let len = n * k;
    let sys = restricted(model, target, discount, initial_dist)?;
    let mut slot = vec![usize::MAX; len];
    for (r, &i) in sys.index.iter().enumerate() {
        slot[i] = r;
    }
    let lr_nu = lr_nu.unwrap_or(0.5 / ((1.0 + discount).powi(2) * sys.d.max()));
    let m = sys.index.len();
    let mut nu = DVector::<f64>::zeros(m);
    let mut zeta = DVector::from_element(m, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let next_value = |nu: &DVector<f64>, s_next: usize| -> f64 {
        (0..k)
            .filter(|&a| slot[s_next * k + a] != usize::MAX)
            .map(|a| target.prob(s_next, a) * nu[slot[s_next * k + a]])
            .sum()
    };
    for _ in 0..steps {
        let mut g_zeta = DVector::<f64>::zeros(m);
        let mut g_nu = -&sys.mu0;
        let mut seen = DVector::<f64>::zeros(m);
        for _ in 0..batch {
            let t = &transitions[rng.random_range(0..transitions.len())];
            let r = slot[t.s * k + t.a];
            let bellman = nu[r] - discount * next_value(&nu, t.s_next);
            g_zeta[r] += bellman - zeta[r];
            seen[r] += 1.0;
            let w = zeta[r] / batch as f64;
            g_nu[r] += w;
            for a in 0..k {
                let c = slot[t.s_next * k + a];
                if c != usize::MAX {
                    g_nu[c] -= w * discount * target.prob(t.s_next, a);
                }
            }
        }
        for r in 0..m {
            if seen[r] > 0.0 {
                zeta[r] = (zeta[r] + lr_zeta * g_zeta[r] / seen[r]).max(0.0);
            }
        }
        nu -= g_nu * lr_nu;
    }
    Ok(DualDiceState {
        nu: scatter(&nu, &sys.index, len),
        zeta: scatter(&zeta, &sys.index, len),
        solver: solver.clone(),
        steps_taken: steps,
        ridge_used: false,
    })
}

/// `d_norm^pi_{M_D}(s) pi(a|s) / d^D(s, a)` on supported pairs, 0 elsewhere.
pub fn exact_pair_ratios(ctx: &OfflineContext, policy: &PolicyTable) -> Result<DVector<f64>> {
    let occ = mdp::occupancy_raw(&ctx.mdp_d, policy)? * (1.0 - ctx.discount());
    let model = &ctx.model;
    let k = model.num_actions();
    let d_sa = model.d_data_sa();
    Ok(DVector::from_fn(d_sa.len(), |i, _| {
        if model.support()[i] {
            occ[i / k] * policy.prob(i / k, i % k) / d_sa[i]
        } else {
            0.0
        }
    }))
}

/// `omega(s) = sum_a beta(a|s) [zeta(s,a) beta(a|s) / max(pi(a|s), 1e-8)]`
/// over supported actions. Unvisited states get 0 and should be skipped.
pub fn omega_state_weights(
    zeta: &DVector<f64>,
    model: &EmpiricalModel,
    target: &PolicyTable,
) -> Result<DVector<f64>> {
    let (n, k) = (model.num_states(), model.num_actions());
    if zeta.len() != n * k || target.num_states() != n || target.num_actions() != k {
        return invalid("zeta or target policy does not match the model");
    }
    let beta = model.beta_hat();
    Ok(DVector::from_fn(n, |s, _| {
        (0..k)
            .filter(|&a| model.supported(s, a))
            .map(|a| {
                let b = beta.prob(s, a);
                b * zeta[s * k + a] * b / target.prob(s, a).max(POLICY_FLOOR)
            })
            .sum()
    }))
}

/// `(1 / |D|) sum zeta(s, a) r` over the dataset.
pub fn ratio_policy_value(zeta: &DVector<f64>, dataset: &OfflineDataset, num_actions: usize) -> f64 {
    let total: f64 = dataset
        .transitions()
        .iter()
        .map(|t| zeta[t.s * num_actions + t.a] * t.r)
        .sum();
    total / dataset.size() as f64
}
