//! Experiment configuration, seed sweeps and the artifacts they write.
//!
//! A run writes, under `output_dir`:
//! `traces/{algorithm}_seed{seed}.csv`, `final_returns.csv`,
//! `validation_{kind}.csv` and `summary.json`. Every file is written to a
//! temporary name first and renamed into place.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    theorem2_check, theorem3_run, theorem4_clip_search, true_suboptimality, underestimation_check, BoundReport,
    BoundSetup,
};
use crate::data::{build_empirical_model, generate_dataset_with, OfflineDataset, SamplingSpec, Termination};
use crate::dice::{exact_pair_ratios, omega_state_weights, solve_dualdice, DiceSolver};
use crate::envs::{build_chain_mdp, build_gridworld, garnet, ChainLayout, GridSpec};
use crate::error::{invalid, Error, Result};
use crate::mdp::{optimal_policy, PolicyTable, TabularMdp};
use crate::pessimism::{state_aware_weights, DisSpec, FTransform, OfflineContext, PessimismSpec};
use crate::sacql::{train, TrainConfig, TrainTrace};
use crate::search::{optimize_policy, PolicyClass};
use crate::seeding::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    Chain {
        num_left: usize,
        num_right: usize,
        reward_left: f64,
        reward_right: f64,
        discount: f64,
    },
    /// Validation sweeps draw a fresh garnet per seed from `seed`.
    Garnet {
        num_states: usize,
        num_actions: usize,
        branching: usize,
        #[serde(default = "default_discount")]
        discount: f64,
        #[serde(default)]
        seed: u64,
    },
    Gridworld {
        width: usize,
        height: usize,
        slip: f64,
        discount: f64,
    },
}

fn default_discount() -> f64 {
    0.9
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<TabularMdp> {
        match *self {
            Self::Chain {
                num_left,
                num_right,
                reward_left,
                reward_right,
                discount,
            } => build_chain_mdp(num_left, num_right, reward_left, reward_right, discount),
            Self::Garnet {
                num_states,
                num_actions,
                branching,
                discount,
                seed,
            } => garnet(num_states, num_actions, branching, discount, seed),
            Self::Gridworld {
                width,
                height,
                slip,
                discount,
            } => build_gridworld(&GridSpec {
                width,
                height,
                slip,
                discount,
            }),
        }
    }

    /// The environment of validation seed `index`: a new garnet per seed,
    /// the same MDP otherwise.
    pub fn for_validation_seed(&self, index: u64) -> Self {
        match self {
            Self::Garnet {
                num_states,
                num_actions,
                branching,
                discount,
                seed,
            } => Self::Garnet {
                num_states: *num_states,
                num_actions: *num_actions,
                branching: *branching,
                discount: *discount,
                seed: derive_seed(*seed, index),
            },
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorSpec {
    Uniform,
    /// Chain only: left branch at the start with probability `p_left`.
    Split { p_left: f64 },
    /// Optimal policy mixed with uniform noise.
    EpsilonOptimal { epsilon: f64 },
    /// Dirichlet(1) rows; the seed is mixed with the dataset seed.
    Random {
        #[serde(default)]
        floor: f64,
    },
}

impl BehaviorSpec {
    pub fn build(&self, env: &EnvironmentSpec, mdp: &TabularMdp, seed: u64) -> Result<PolicyTable> {
        let (n, k) = (mdp.num_states(), mdp.num_actions());
        match *self {
            Self::Uniform => Ok(PolicyTable::uniform(n, k)),
            Self::Split { p_left } => match env {
                EnvironmentSpec::Chain {
                    num_left, num_right, ..
                } => ChainLayout {
                    num_left: *num_left,
                    num_right: *num_right,
                }
                .split_policy(p_left),
                _ => invalid("behavior `split` needs a chain environment"),
            },
            Self::EpsilonOptimal { epsilon } => {
                if !(0.0..=1.0).contains(&epsilon) {
                    return invalid(format!("epsilon must lie in [0, 1], got {epsilon}"));
                }
                let (best, _) = optimal_policy(mdp, 1e-10)?;
                let mixed = best.probs() * (1.0 - epsilon) + PolicyTable::uniform(n, k).probs() * epsilon;
                PolicyTable::new(mixed)
            }
            Self::Random { floor } => {
                if !(floor >= 0.0) {
                    return invalid(format!("floor must be nonnegative, got {floor}"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let w: Vec<f64> = (0..k)
                            .map(|_| {
                                let e: f64 = Exp1.sample(&mut rng);
                                floor + e
                            })
                            .collect();
                        let t: f64 = w.iter().sum();
                        w.iter().map(|x| x / t).collect()
                    })
                    .collect();
                PolicyTable::from_rows(&rows)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub behavior: BehaviorSpec,
    pub episodes: usize,
    pub horizon: usize,
    #[serde(default)]
    pub termination: Termination,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: String,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    Lemma1,
    Theorem2,
    Theorem3,
    Theorem4,
    Theorem5,
}

impl ValidationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lemma1 => "lemma1",
            Self::Theorem2 => "theorem2",
            Self::Theorem3 => "theorem3",
            Self::Theorem4 => "theorem4",
            Self::Theorem5 => "theorem5",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    pub kind: ValidationKind,
    #[serde(default = "default_validation_seeds")]
    pub seeds: usize,
    /// Penalty weight for `lemma1`, `theorem2` and `theorem5`; `theorem3` derives
    /// its own from the instance; `theorem4` uses 1.1 times its threshold.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub dis: DisSpec,
    #[serde(default)]
    pub f: FTransform,
}

fn default_validation_seeds() -> usize {
    200
}

fn default_alpha() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.1
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default)]
    pub validations: Vec<ValidationSpec>,
    pub output_dir: PathBuf,
    /// Seed sweep for the algorithms.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Parses and validates. Syntax errors carry serde's line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Canonical form: every default filled in, fixed key order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() && self.validations.is_empty() {
            return invalid("config needs at least one algorithm or validation");
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return invalid(format!("seeds: duplicate seed {dup}"));
        }
        if self.seeds.is_empty() && !self.algorithms.is_empty() {
            return invalid("seeds: empty sweep");
        }
        let mut names = HashSet::new();
        for (i, alg) in self.algorithms.iter().enumerate() {
            if alg.name.is_empty() || !alg.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
                return invalid(format!(
                    "algorithms[{i}].name: use letters, digits, '-' or '_', got {:?}",
                    alg.name
                ));
            }
            if !names.insert(alg.name.as_str()) {
                return invalid(format!("algorithms[{i}].name: duplicate {:?}", alg.name));
            }
            alg.train
                .validate()
                .map_err(|e| Error::InvalidArgument(format!("algorithms[{i}].train: {e}")))?;
        }
        for (i, v) in self.validations.iter().enumerate() {
            let fail = |msg: String| Error::InvalidArgument(format!("validations[{i}]: {msg}"));
            if v.seeds == 0 {
                return Err(fail("seeds must be at least 1".into()));
            }
            if !(v.delta > 0.0 && v.delta < 1.0) {
                return Err(fail(format!("delta must lie in (0, 1), got {}", v.delta)));
            }
            PessimismSpec::state_aware(v.dis, v.alpha, v.f)
                .validate()
                .map_err(|e| fail(e.to_string()))?;
        }
        if self.dataset.episodes == 0 || self.dataset.horizon == 0 {
            return invalid("dataset: episodes and horizon must be at least 1");
        }
        let mdp = self
            .environment
            .build()
            .map_err(|e| Error::InvalidArgument(format!("environment: {e}")))?;
        self.dataset
            .behavior
            .build(&self.environment, &mdp, 0)
            .map_err(|e| Error::InvalidArgument(format!("dataset.behavior: {e}")))?;
        Ok(())
    }
}

/// Dataset for sweep seed `seed` on `mdp`.
pub fn dataset_for_seed(
    config: &ExperimentConfig,
    env: &EnvironmentSpec,
    mdp: &TabularMdp,
    seed: u64,
) -> Result<OfflineDataset> {
    let spec = &config.dataset;
    let data_seed = derive_seed(spec.seed, seed);
    let behavior = spec.behavior.build(env, mdp, derive_seed(data_seed, 1))?;
    let sampling = SamplingSpec {
        num_episodes: spec.episodes,
        horizon: spec.horizon,
        termination: spec.termination,
        start_dist: None,
        seed: data_seed,
    };
    generate_dataset_with(mdp, &behavior, &sampling)
}

/// One row of `validation_{kind}.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub seed: u64,
    pub condition: bool,
    pub conclusion: bool,
    pub ub_dis: f64,
    pub ub_sa: f64,
    pub subopt: f64,
}

/// One row of `final_returns.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReturnRow {
    pub algorithm: String,
    pub seed: u64,
    pub final_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub runs: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub stats: Option<ReturnStats>,
    pub failures: Vec<SeedFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub seeds: usize,
    pub completed: usize,
    pub condition_count: usize,
    pub conclusion_count: usize,
    /// Seeds where the condition held and the conclusion did not.
    pub implication_failures: usize,
    /// lemma1 only: the larger of the two bounds' violation rates.
    pub violation_rate: Option<f64>,
    pub delta: f64,
    pub failures: Vec<SeedFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithms: BTreeMap<String, AlgorithmSummary>,
    pub validations: BTreeMap<String, ValidationSummary>,
    /// Whether the statistics recomputed from the written CSVs match.
    pub self_check: bool,
}

impl Summary {
    pub fn partial_failures(&self) -> usize {
        self.algorithms.values().map(|a| a.failures.len()).sum::<usize>()
            + self.validations.values().map(|v| v.failures.len()).sum::<usize>()
    }
}

/// Quartiles by linear interpolation between order statistics.
pub fn return_stats(values: &[f64]) -> Option<ReturnStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
    };
    let (q1, median, q3) = (at(0.25), at(0.5), at(0.75));
    Some(ReturnStats {
        runs: v.len(),
        median,
        q1,
        q3,
        iqr: q3 - q1,
    })
}

fn summarize_validation(kind: ValidationKind, spec: &ValidationSpec, rows: &[ValidationRow]) -> ValidationSummary {
    let count = |f: &dyn Fn(&ValidationRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let violation_rate = (kind == ValidationKind::Lemma1 && !rows.is_empty()).then(|| {
        let n = rows.len() as f64;
        let dis = count(&|r| !r.condition) as f64 / n;
        let sa = count(&|r| !r.conclusion) as f64 / n;
        dis.max(sa)
    });
    ValidationSummary {
        seeds: spec.seeds,
        completed: rows.len(),
        condition_count: count(&|r| r.condition),
        conclusion_count: count(&|r| r.conclusion),
        implication_failures: count(&|r| r.condition && !r.conclusion),
        violation_rate,
        delta: spec.delta,
        failures: Vec::new(),
    }
}

fn policy_class(mdp: &TabularMdp, seed: u64) -> PolicyClass {
    if crate::bounds::enumerable(mdp) {
        PolicyClass::DeterministicEnumeration
    } else {
        PolicyClass::softmax(seed)
    }
}

/// Runs one validation seed.
///
/// Columns per kind: `lemma1` reports whether the plain bound covers the
/// true suboptimality as `condition` and the same for the SA bound as
/// `conclusion`; `theorem2` and `theorem3` report the theorem's condition
/// and `UB_SA <= UB_Dis`; `theorem4` reports the largeness condition and
/// `clip_C > 1` (with the clipped bound as `ub_sa`); `theorem5` reports the
/// pointwise bound and large-alpha underestimation.
pub fn validation_row(config: &ExperimentConfig, spec: &ValidationSpec, index: u64) -> Result<ValidationRow> {
    let env = config.environment.for_validation_seed(index);
    let mdp = env.build()?;
    let dataset = dataset_for_seed(config, &env, &mdp, index)?;
    let model = build_empirical_model(&dataset, mdp.num_states(), mdp.num_actions())?;
    let ctx = OfflineContext::new(model, mdp.discount(), mdp.initial_dist())?;
    let class = policy_class(&mdp, index);
    if spec.kind == ValidationKind::Lemma1 && class != PolicyClass::DeterministicEnumeration {
        return invalid("lemma1 validation needs an enumerable policy class");
    }
    let setup = BoundSetup::new(&mdp, &ctx, class, spec.delta)?;
    let plain = PessimismSpec::plain(spec.dis, spec.alpha);
    let sa = PessimismSpec::state_aware(spec.dis, spec.alpha, spec.f);
    let reports = || -> Result<(BoundReport, BoundReport)> { Ok((setup.report(&plain)?, setup.report(&sa)?)) };
    let row = |condition, conclusion, ub_dis, ub_sa, subopt| ValidationRow {
        seed: index,
        condition,
        conclusion,
        ub_dis,
        ub_sa,
        subopt,
    };
    match spec.kind {
        ValidationKind::Lemma1 => {
            let (rd, rs) = reports()?;
            Ok(row(
                rd.true_subopt <= rd.total_ub,
                rs.true_subopt <= rs.total_ub,
                rd.total_ub,
                rs.total_ub,
                rs.true_subopt,
            ))
        }
        ValidationKind::Theorem2 => {
            let (rd, rs) = reports()?;
            let out = theorem2_check(&rd, &rs, &ctx, &sa)?;
            Ok(row(out.condition_holds, out.conclusion_holds, rd.total_ub, rs.total_ub, rs.true_subopt))
        }
        ValidationKind::Theorem3 => {
            let run = theorem3_run(&setup, &spec.dis, &spec.f, spec.delta, 0.5)?;
            let scale = 1.0 + run.ub_dis.abs() + run.ub_sa.abs();
            Ok(row(
                run.outcome.applicable && run.outcome.condition_holds,
                run.ub_sa <= run.ub_dis + crate::bounds::REL_TOL * scale,
                run.ub_dis,
                run.ub_sa,
                run.true_subopt,
            ))
        }
        ValidationKind::Theorem4 => {
            let probe = theorem4_clip_search(&mdp, &ctx, &class, &PessimismSpec::plain(spec.dis, 0.0), spec.delta)?;
            let alpha = crate::bounds::LARGE_ALPHA_FACTOR * probe.threshold;
            let out = theorem4_clip_search(&mdp, &ctx, &class, &PessimismSpec::plain(spec.dis, alpha), spec.delta)?;
            let (learned, _) = optimize_policy(&ctx, &PessimismSpec::plain(spec.dis, alpha), &class)?;
            Ok(row(
                out.applicable,
                out.clip_c.is_some_and(|c| c > 1.0),
                out.ub_dis,
                out.ub_clipped_sa,
                true_suboptimality(&mdp, &learned)?,
            ))
        }
        ValidationKind::Theorem5 => {
            let (rd, rs) = reports()?;
            let out = underestimation_check(&mdp, &ctx, &rs.learned_policy, &sa, setup.c0)?;
            Ok(row(
                out.pointwise_bound_holds,
                out.large_alpha_underestimates,
                rd.total_ub,
                rs.total_ub,
                rs.true_subopt,
            ))
        }
    }
}

/// Runs one validation sweep over seeds `0..spec.seeds`.
pub fn run_validation(config: &ExperimentConfig, spec: &ValidationSpec) -> (Vec<ValidationRow>, Vec<SeedFailure>) {
    let results: Vec<(u64, Result<ValidationRow>)> = (0..spec.seeds as u64)
        .into_par_iter()
        .map(|i| (i, validation_row(config, spec, i)))
        .collect();
    split_results(results)
}

fn split_results<T>(results: Vec<(u64, Result<T>)>) -> (Vec<T>, Vec<SeedFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(x) => ok.push(x),
            Err(e) => failed.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

/// Trains `alg` on the dataset of sweep seed `seed`.
pub fn run_algorithm(config: &ExperimentConfig, mdp: &TabularMdp, alg: &AlgorithmSpec, seed: u64) -> Result<TrainTrace> {
    let dataset = dataset_for_seed(config, &config.environment, mdp, seed)?;
    let mut train_config = alg.train.clone();
    train_config.seed = derive_seed(alg.train.seed, seed);
    train(mdp, &dataset, &train_config)
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Which parts of the config to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunScope {
    Everything,
    ValidationsOnly,
}

/// Runs the config and writes every artifact. Per-seed errors are recorded
/// in the summary rather than aborting the run.
pub fn run_experiment(config: &ExperimentConfig, scope: RunScope) -> Result<Summary> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out.join("traces"))?;
    let mdp = config.environment.build()?;

    let mut summary = Summary {
        algorithms: BTreeMap::new(),
        validations: BTreeMap::new(),
        self_check: true,
    };
    let mut finals: Vec<FinalReturnRow> = Vec::new();
    if scope == RunScope::Everything {
        let jobs: Vec<(usize, u64)> = (0..config.algorithms.len())
            .flat_map(|a| config.seeds.iter().map(move |&s| (a, s)))
            .collect();
        let results: Vec<(usize, u64, Result<f64>)> = jobs
            .into_par_iter()
            .map(|(a, seed)| {
                let alg = &config.algorithms[a];
                let result = run_algorithm(config, &mdp, alg, seed).and_then(|trace| {
                    let mut buf = Vec::new();
                    trace.write_csv(&mut buf)?;
                    write_atomic(&out.join("traces").join(format!("{}_seed{seed}.csv", alg.name)), &buf)?;
                    Ok(trace.final_return())
                });
                (a, seed, result)
            })
            .collect();
        for alg in &config.algorithms {
            summary.algorithms.insert(
                alg.name.clone(),
                AlgorithmSummary {
                    stats: None,
                    failures: Vec::new(),
                },
            );
        }
        for (a, seed, result) in results {
            let name = &config.algorithms[a].name;
            match result {
                Ok(final_return) => finals.push(FinalReturnRow {
                    algorithm: name.clone(),
                    seed,
                    final_return,
                }),
                Err(e) => summary.algorithms.get_mut(name).unwrap().failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                }),
            }
        }
        for (name, entry) in summary.algorithms.iter_mut() {
            let values: Vec<f64> = finals
                .iter()
                .filter(|r| &r.algorithm == name)
                .map(|r| r.final_return)
                .collect();
            entry.stats = return_stats(&values);
        }
        write_atomic(&out.join("final_returns.csv"), &csv_bytes(&finals)?)?;
    }

    for spec in &config.validations {
        let (rows, failures) = run_validation(config, spec);
        write_atomic(
            &out.join(format!("validation_{}.csv", spec.kind.name())),
            &csv_bytes(&rows)?,
        )?;
        let mut s = summarize_validation(spec.kind, spec, &rows);
        s.failures = failures;
        summary.validations.insert(spec.kind.name().to_string(), s);
    }

    summary.self_check = recompute_matches(config, scope, &summary)?;
    write_atomic(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

/// Re-reads the CSVs just written and recomputes every statistic.
fn recompute_matches(config: &ExperimentConfig, scope: RunScope, summary: &Summary) -> Result<bool> {
    let out = &config.output_dir;
    if scope == RunScope::Everything {
        let finals: Vec<FinalReturnRow> = read_csv(&out.join("final_returns.csv"))?;
        for (name, entry) in &summary.algorithms {
            let values: Vec<f64> = finals
                .iter()
                .filter(|r| &r.algorithm == name)
                .map(|r| r.final_return)
                .collect();
            if return_stats(&values) != entry.stats {
                return Ok(false);
            }
        }
    }
    for spec in &config.validations {
        let rows: Vec<ValidationRow> = read_csv(&out.join(format!("validation_{}.csv", spec.kind.name())))?;
        let again = summarize_validation(spec.kind, spec, &rows);
        let Some(entry) = summary.validations.get(spec.kind.name()) else {
            return Ok(false);
        };
        let same = again.completed == entry.completed
            && again.condition_count == entry.condition_count
            && again.conclusion_count == entry.conclusion_count
            && again.implication_failures == entry.implication_failures
            && again.violation_rate == entry.violation_rate;
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Everything `inspect` prints for one instance.
#[derive(Clone, Debug, Serialize)]
pub struct InspectReport {
    pub seed: u64,
    pub dataset_size: usize,
    pub visited_states: usize,
    pub target: PolicyTable,
    pub zeta: DVector<f64>,
    pub exact_ratios: DVector<f64>,
    pub omega: DVector<f64>,
    pub exact_weights: DVector<f64>,
    pub bound_dis: BoundReport,
    pub bound_sa: BoundReport,
}

/// Ratio estimates and both bounds for sweep seed `seed`. The target is the
/// plain-pessimism optimum; the penalty comes from the first validation, or
/// the defaults when there is none.
pub fn inspect(config: &ExperimentConfig, seed: u64) -> Result<InspectReport> {
    let mdp = config.environment.build()?;
    let dataset = dataset_for_seed(config, &config.environment, &mdp, seed)?;
    let model = build_empirical_model(&dataset, mdp.num_states(), mdp.num_actions())?;
    let visited_states = (0..model.num_states()).filter(|&s| model.visited(s)).count();
    let ctx = OfflineContext::new(model, mdp.discount(), mdp.initial_dist())?;
    let (dis, alpha, delta, f) = config
        .validations
        .first()
        .map(|v| (v.dis, v.alpha, v.delta, v.f))
        .unwrap_or((DisSpec::default(), default_alpha(), default_delta(), FTransform::identity()));
    let class = policy_class(&mdp, seed);
    let setup = BoundSetup::new(&mdp, &ctx, class, delta)?;
    let bound_dis = setup.report(&PessimismSpec::plain(dis, alpha))?;
    let bound_sa = setup.report(&PessimismSpec::state_aware(dis, alpha, f))?;
    let target = bound_dis.learned_policy.clone();
    let state = solve_dualdice(&dataset, &target, mdp.discount(), mdp.initial_dist(), &DiceSolver::ClosedForm)?;
    Ok(InspectReport {
        seed,
        dataset_size: dataset.size(),
        visited_states,
        omega: omega_state_weights(&state.zeta, &ctx.model, &target)?,
        exact_ratios: exact_pair_ratios(&ctx, &target)?,
        exact_weights: state_aware_weights(&ctx, &target, &FTransform::identity())?,
        zeta: state.zeta,
        target,
        bound_dis,
        bound_sa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_text() -> String {
        r#"{
            "environment": {"kind": "garnet", "num_states": 3, "num_actions": 2, "branching": 2, "seed": 4},
            "dataset": {"behavior": {"kind": "uniform"}, "episodes": 5, "horizon": 6, "seed": 1},
            "algorithms": [{"name": "cql", "train": {"weight_mode": "constant_one", "steps": 5}}],
            "validations": [{"kind": "theorem2", "seeds": 3}],
            "output_dir": "unused"
        }"#
        .to_string()
    }

    #[test]
    fn round_trip_is_canonical() {
        let c = ExperimentConfig::from_json(&config_text()).unwrap();
        let text = c.to_json().unwrap();
        let again = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c, again);
        assert_eq!(text, again.to_json().unwrap());
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn schema_errors() {
        let mut c = ExperimentConfig::from_json(&config_text()).unwrap();
        c.algorithms.clear();
        c.validations.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::from_json(&config_text()).unwrap();
        c.seeds = vec![1, 2, 1];
        assert!(c.validate().unwrap_err().to_string().contains("duplicate seed"));
        let bad = config_text().replace("\"horizon\": 6", "\"horizon\": 6, \"hoizon\": 1");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let split = config_text().replace(r#"{"kind": "uniform"}"#, r#"{"kind": "split", "p_left": 0.1}"#);
        assert!(ExperimentConfig::from_json(&split).is_err());
    }

    #[test]
    fn quartiles() {
        let s = return_stats(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.iqr), (2.0, 3.0, 4.0, 2.0));
        assert!(return_stats(&[]).is_none());
    }
}
