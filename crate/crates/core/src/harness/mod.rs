//! Experiment orchestration: targets, method runners, grid-oracle bounds and
//! normalized result rows.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pendulum::{EnvParams, ObsMode, RewardModel, TaskConfig};
use crate::pipeline::{adapt, model_from_checkpoint, AdaptSettings, Checkpoint};
use crate::simdist::{ParamSpace, SimParamDist};
use crate::sysid::{sysid_adapt, SysIdConfig, SysIdKind};
use crate::taskpolicy::{synthesize, udr_policy};

pub use report::{read_results, summarize, write_manifest, write_results, Manifest, Summary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("normalization bounds are degenerate: upper {upper} is not above lower {lower}")]
    DegenerateBounds { lower: f64, upper: f64 },
    #[error("no checkpoint for {what}; create it with `{command}`")]
    MissingCheckpoint { what: String, command: String },
    #[error("experiment is invalid: {0}")]
    Invalid(String),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] crate::pipeline::CheckpointError),
    #[error("config: {0}")]
    Config(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// `clamp((raw − lower)/(upper − lower), 0, 1)`.
pub fn normalize_report(raw: f64, lower: f64, upper: f64) -> Result<f64, HarnessError> {
    if !(upper > lower) {
        return Err(HarnessError::DegenerateBounds { lower, upper });
    }
    Ok(((raw - lower) / (upper - lower)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTarget {
    pub name: String,
    pub params: [f64; 4],
}

impl NamedTarget {
    pub fn new(name: &str, params: [f64; 4]) -> Self {
        NamedTarget {
            name: name.to_string(),
            params,
        }
    }

    pub fn env(&self) -> EnvParams {
        EnvParams::from_slice(&self.params)
    }
}

/// Within-domain and out-of-domain evaluation targets.
pub fn standard_targets() -> Vec<NamedTarget> {
    vec![
        NamedTarget::new("WD", [1.8, 1.2, 1.5, 1.5]),
        NamedTarget::new("OOD-1", [1.8, 0.3, 1.5, 1.5]),
        NamedTarget::new("OOD-2", [0.5, 1.8, 1.5, 1.5]),
        NamedTarget::new("OOD-3", [1.2, 1.8, 10.0, 10.0]),
        NamedTarget::new("OOD-4", [0.4, 2.6, 1.0, 2.0]),
    ]
}

pub fn target_by_name(name: &str) -> Option<NamedTarget> {
    standard_targets()
        .into_iter()
        .find(|t| t.name.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "UDR")]
    Udr,
    AdaptSim,
    #[serde(rename = "SysID-Bayes")]
    SysIdBayes,
    #[serde(rename = "SysID-Point")]
    SysIdPoint,
    #[serde(rename = "SysID-Bayes-State")]
    SysIdBayesState,
    #[serde(rename = "SysID-Point-State")]
    SysIdPointState,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Udr,
        Method::AdaptSim,
        Method::SysIdBayes,
        Method::SysIdPoint,
        Method::SysIdBayesState,
        Method::SysIdPointState,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Udr => "UDR",
            Method::AdaptSim => "AdaptSim",
            Method::SysIdBayes => "SysID-Bayes",
            Method::SysIdPoint => "SysID-Point",
            Method::SysIdBayesState => "SysID-Bayes-State",
            Method::SysIdPointState => "SysID-Point-State",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }

    fn sysid(self) -> Option<(SysIdKind, ObsMode)> {
        match self {
            Method::SysIdBayes => Some((SysIdKind::Bayes, ObsMode::Full)),
            Method::SysIdPoint => Some((SysIdKind::Point, ObsMode::Full)),
            Method::SysIdBayesState => Some((SysIdKind::Bayes, ObsMode::LastWindow)),
            Method::SysIdPointState => Some((SysIdKind::Point, ObsMode::LastWindow)),
            _ => None,
        }
    }
}

/// Row iteration label: an adaptation iteration or the best over all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Iteration {
    At(usize),
    Best,
}

impl std::fmt::Display for Iteration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Iteration::At(i) => write!(f, "{i}"),
            Iteration::Best => f.write_str("best"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    pub target: String,
    pub seed: u64,
    pub iteration: Iteration,
    pub raw_reward: f64,
    pub norm_reward: f64,
}

/// Per-iteration raw rewards (best across chains at each iteration) and the
/// best overall.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub per_iteration: Vec<f64>,
    pub best: f64,
    /// Target trajectories that informed adaptation decisions.
    pub target_rollouts: usize,
}

impl MethodRun {
    pub fn final_reward(&self) -> f64 {
        *self.per_iteration.last().expect("at least one iteration")
    }
}

/// Synthesized LQR gains for every point of a lattice over a box.
#[derive(Debug, Clone)]
pub struct GridGains {
    pub space: ParamSpace,
    pub resolution: usize,
    pub gains: Vec<crate::numerics::Matrix>,
}

impl GridGains {
    pub fn new(space: &ParamSpace, resolution: usize, task: &TaskConfig) -> Self {
        use rayon::prelude::*;
        let gains = space
            .grid(resolution)
            .into_par_iter()
            .map(|p| {
                synthesize(
                    &SimParamDist::dirac(space, p).expect("grid lies in the box"),
                    &task.rollout,
                )
                .gain
            })
            .collect();
        GridGains {
            space: space.clone(),
            resolution,
            gains,
        }
    }

    /// Best reward over the lattice on `target`.
    pub fn best_reward(&self, model: &RewardModel, target: &EnvParams) -> f64 {
        use rayon::prelude::*;
        let t = model.target(*target);
        self.gains
            .par_iter()
            .map(|g| model.reward(&t, g).clamp(0.0, 1.0))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Cache key for a disk-cached oracle value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OracleKey {
    target: [f64; 4],
    resolution: usize,
    space: ParamSpace,
    task: TaskConfig,
    reward_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OracleEntry {
    key: OracleKey,
    value: f64,
}

/// Grid oracle with in-memory lattice gains and an optional disk cache of
/// per-target values.
#[derive(Debug, Default)]
pub struct Oracle {
    cache_dir: Option<PathBuf>,
    grids: Vec<GridGains>,
}

impl Oracle {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Oracle {
            cache_dir,
            grids: Vec::new(),
        }
    }

    fn grid(&mut self, space: &ParamSpace, resolution: usize, task: &TaskConfig) -> &GridGains {
        if let Some(i) = self
            .grids
            .iter()
            .position(|g| &g.space == space && g.resolution == resolution)
        {
            return &self.grids[i];
        }
        self.grids.push(GridGains::new(space, resolution, task));
        self.grids.last().unwrap()
    }

    /// Max over the `resolution⁴` lattice of the reward of that point's LQR.
    pub fn best(
        &mut self,
        model: &RewardModel,
        space: &ParamSpace,
        target: &EnvParams,
        resolution: usize,
    ) -> f64 {
        assert!(resolution >= 2, "oracle resolution must be at least 2");
        let key = OracleKey {
            target: target.to_array(),
            resolution,
            space: space.clone(),
            task: model.config.clone(),
            reward_constant: model.map.constant(),
        };
        let path = self.cache_dir.as_ref().map(|dir| {
            let json = serde_json::to_string(&key).expect("key serializes");
            dir.join(format!(
                "oracle-{:08x}.json",
                crc32fast::hash(json.as_bytes())
            ))
        });
        if let Some(p) = &path {
            if let Ok(text) = std::fs::read_to_string(p) {
                if let Ok(entry) = serde_json::from_str::<OracleEntry>(&text) {
                    if entry.key == key {
                        return entry.value;
                    }
                }
            }
        }
        let value = self
            .grid(space, resolution, &model.config)
            .best_reward(model, target);
        if let Some(p) = &path {
            // the cache is an optimization; a failed write only costs a recompute
            let _ = p.parent().map(std::fs::create_dir_all);
            let _ = std::fs::write(
                p,
                serde_json::to_string_pretty(&OracleEntry { key, value }).unwrap(),
            );
        }
        value
    }
}

/// Normalization bounds for one target in one box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

pub fn udr_reward(model: &RewardModel, space: &ParamSpace, target: &EnvParams) -> f64 {
    let p = udr_policy(space, &model.config.rollout);
    model
        .reward(&model.target(*target), &p.gain)
        .clamp(0.0, 1.0)
}

pub fn bounds(
    oracle: &mut Oracle,
    model: &RewardModel,
    space: &ParamSpace,
    target: &EnvParams,
    resolution: usize,
) -> Bounds {
    Bounds {
        lower: udr_reward(model, space, target),
        upper: oracle.best(model, space, target, resolution),
    }
}

/// Adaptation budget shared by every adaptive method in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub n_chains: usize,
    pub horizon: usize,
}

impl Budget {
    /// Target trajectories that inform decisions: one per chain per step.
    pub fn target_rollouts(&self) -> usize {
        self.n_chains * self.horizon
    }
}

pub fn run_adaptsim(
    model: &RewardModel,
    ck: &Checkpoint,
    target: &EnvParams,
    budget: Budget,
    seed: u64,
) -> MethodRun {
    let mut settings = AdaptSettings::from_config(&ck.config, seed);
    settings.n_chains = budget.n_chains;
    settings.horizon = budget.horizon;
    let out = adapt(model, *target, &ck.online, &ck.library, &settings);
    MethodRun {
        per_iteration: out
            .best_by_iteration()
            .iter()
            .enumerate()
            .map(|(i, _)| {
                out.trace
                    .iter()
                    .filter(|r| r.iteration == i)
                    .map(|r| r.raw_reward)
                    .fold(0.0, f64::max)
            })
            .collect(),
        best: out.best_reward,
        target_rollouts: out.trace.iter().filter(|r| r.action.is_some()).count(),
    }
}

pub fn run_sysid(
    method: Method,
    model: &RewardModel,
    space: &ParamSpace,
    target: &EnvParams,
    budget: Budget,
    cfg: &SysIdConfig,
) -> MethodRun {
    let (kind, mode) = method.sysid().expect("a system-identification method");
    let out = sysid_adapt(
        kind,
        model,
        space,
        *target,
        budget.target_rollouts(),
        mode,
        cfg,
    );
    MethodRun {
        per_iteration: out.trace.iter().map(|r| r.raw_reward).collect(),
        best: out.best_reward,
        target_rollouts: out.target_rollouts,
    }
}

/// Everything one experiment needs besides checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub name: String,
    pub targets: Vec<NamedTarget>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub oracle_resolution: usize,
    pub budget: Budget,
    pub sysid: SysIdConfig,
    pub task: TaskConfig,
    pub space: ParamSpace,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            name: "table".into(),
            targets: standard_targets(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            output: PathBuf::from("results/table.csv"),
            oracle_resolution: 9,
            budget: Budget {
                n_chains: 2,
                horizon: 10,
            },
            sysid: SysIdConfig::default(),
            task: TaskConfig::default(),
            space: ParamSpace::pendulum(),
        }
    }
}

impl Experiment {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.targets.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::Invalid(
                "targets, methods and seeds must be nonempty".into(),
            ));
        }
        if self.oracle_resolution < 2 {
            return Err(HarnessError::Invalid(
                "oracle_resolution must be at least 2".into(),
            ));
        }
        if self.budget.n_chains == 0 {
            return Err(HarnessError::Invalid(
                "budget.n_chains must be positive".into(),
            ));
        }
        self.space
            .validate()
            .map_err(|e| HarnessError::Invalid(e.to_string()))
    }
}

/// Output of a run: rows in deterministic order plus the manifest data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub bounds: BTreeMap<String, Bounds>,
}

fn method_rows(
    experiment: &str,
    method: &str,
    target: &str,
    seed: u64,
    run: &MethodRun,
    b: Bounds,
) -> Result<Vec<ResultRow>, HarnessError> {
    let row = |iteration, raw: f64| -> Result<ResultRow, HarnessError> {
        Ok(ResultRow {
            experiment: experiment.to_string(),
            method: method.to_string(),
            target: target.to_string(),
            seed,
            iteration,
            raw_reward: raw,
            norm_reward: normalize_report(raw, b.lower, b.upper)?,
        })
    };
    let mut rows = run
        .per_iteration
        .iter()
        .enumerate()
        .map(|(i, r)| row(Iteration::At(i), *r))
        .collect::<Result<Vec<_>, _>>()?;
    rows.push(row(Iteration::Best, run.best)?);
    Ok(rows)
}

/// Runs every (method, target, seed) combination. `checkpoints` maps seed to
/// the meta-trained policy used by AdaptSim rows.
pub fn run_table(
    exp: &Experiment,
    checkpoints: &BTreeMap<u64, Checkpoint>,
    oracle: &mut Oracle,
) -> Result<RunOutput, HarnessError> {
    exp.validate()?;
    if exp.methods.contains(&Method::AdaptSim) {
        for s in &exp.seeds {
            if !checkpoints.contains_key(s) {
                return Err(HarnessError::MissingCheckpoint {
                    what: format!("seed {s}"),
                    command: format!("adaptsim meta-train --seed {s}"),
                });
            }
        }
    }
    let model = RewardModel::calibrate(exp.task.clone());
    let mut rows = Vec::new();
    let mut all_bounds = BTreeMap::new();
    let mut methods = exp.methods.clone();
    methods.sort();
    methods.dedup();
    for target in &exp.targets {
        let env = target.env();
        let b = bounds(oracle, &model, &exp.space, &env, exp.oracle_resolution);
        all_bounds.insert(target.name.clone(), b);
        for &method in &methods {
            // deterministic methods are run once and reported for every seed
            let shared = match method {
                Method::Udr | Method::AdaptSim => None,
                m => Some(run_sysid(
                    m, &model, &exp.space, &env, exp.budget, &exp.sysid,
                )),
            };
            for &seed in &exp.seeds {
                match method {
                    Method::Udr => rows.push(ResultRow {
                        experiment: exp.name.clone(),
                        method: method.name().into(),
                        target: target.name.clone(),
                        seed,
                        iteration: Iteration::At(0),
                        raw_reward: b.lower,
                        norm_reward: normalize_report(b.lower, b.lower, b.upper)?,
                    }),
                    Method::AdaptSim => {
                        let ck = &checkpoints[&seed];
                        let run = run_adaptsim(&model, ck, &env, exp.budget, seed);
                        rows.extend(method_rows(
                            &exp.name,
                            method.name(),
                            &target.name,
                            seed,
                            &run,
                            b,
                        )?);
                    }
                    _ => {
                        let run = shared.as_ref().unwrap();
                        rows.extend(method_rows(
                            &exp.name,
                            method.name(),
                            &target.name,
                            seed,
                            run,
                            b,
                        )?);
                    }
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(RunOutput {
        rows,
        bounds: all_bounds,
    })
}

/// Sorted by (experiment, method, target, seed, iteration) so output order
/// never depends on evaluation order.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (&a.experiment, &a.method, &a.target, a.seed, a.iteration).cmp(&(
            &b.experiment,
            &b.method,
            &b.target,
            b.seed,
            b.iteration,
        ))
    });
}

/// Method label for a step-size sweep curve.
pub fn stepsize_label(delta: f64) -> String {
    format!("AdaptSim-delta{delta:.2}")
}

/// Per-δ AdaptSim curves on one target. `checkpoints` maps `(δ label, seed)`
/// to a policy meta-trained with that step size.
pub fn run_stepsize_sweep(
    deltas: &[f64],
    seeds: &[u64],
    target: &NamedTarget,
    budget: Budget,
    task: &TaskConfig,
    resolution: usize,
    checkpoints: &BTreeMap<(String, u64), Checkpoint>,
    oracle: &mut Oracle,
) -> Result<RunOutput, HarnessError> {
    let model = RewardModel::calibrate(task.clone());
    let space = ParamSpace::pendulum();
    let env = target.env();
    let b = bounds(oracle, &model, &space, &env, resolution);
    let mut rows = Vec::new();
    for &delta in deltas {
        let label = stepsize_label(delta);
        for &seed in seeds {
            let ck = checkpoints.get(&(label.clone(), seed)).ok_or_else(|| {
                HarnessError::MissingCheckpoint {
                    what: format!("step size {delta:.2}, seed {seed}"),
                    command: format!("adaptsim meta-train --delta {delta} --seed {seed}"),
                }
            })?;
            let run = run_adaptsim(&model, ck, &env, budget, seed);
            rows.extend(method_rows(
                "stepsize",
                &label,
                &target.name,
                seed,
                &run,
                b,
            )?);
        }
    }
    sort_rows(&mut rows);
    Ok(RunOutput {
        rows,
        bounds: BTreeMap::from([(target.name.clone(), b)]),
    })
}

/// Box with the second mass range replaced.
pub fn shifted_space(m2: (f64, f64)) -> ParamSpace {
    ParamSpace::pendulum_with_ranges([(1.0, 2.0), m2, (1.0, 2.0), (1.0, 2.0)])
}

pub fn shift_label(m2: (f64, f64)) -> String {
    format!("m2[{:.1},{:.1}]", m2.0, m2.1)
}

/// AdaptSim and both full-trajectory system-identification baselines on one
/// target for each shifted box. `checkpoints` maps `(shift label, seed)` to a
/// policy meta-trained in that box.
#[allow(clippy::too_many_arguments)]
pub fn run_rangeshift_sweep(
    shifts: &[(f64, f64)],
    seeds: &[u64],
    target: &NamedTarget,
    budget: Budget,
    task: &TaskConfig,
    sysid: &SysIdConfig,
    resolution: usize,
    checkpoints: &BTreeMap<(String, u64), Checkpoint>,
    oracle: &mut Oracle,
) -> Result<RunOutput, HarnessError> {
    let model = RewardModel::calibrate(task.clone());
    let env = target.env();
    let mut rows = Vec::new();
    let mut all_bounds = BTreeMap::new();
    for &shift in shifts {
        let space = shifted_space(shift);
        let label = shift_label(shift);
        let tname = format!("{}@{}", target.name, label);
        let b = bounds(oracle, &model, &space, &env, resolution);
        all_bounds.insert(tname.clone(), b);
        let bayes = run_sysid(Method::SysIdBayes, &model, &space, &env, budget, sysid);
        let point = run_sysid(Method::SysIdPoint, &model, &space, &env, budget, sysid);
        for &seed in seeds {
            let ck = checkpoints.get(&(label.clone(), seed)).ok_or_else(|| {
                HarnessError::MissingCheckpoint {
                    what: format!("range {label}, seed {seed}"),
                    command: format!(
                        "adaptsim meta-train --m2-range {},{} --seed {seed}",
                        shift.0, shift.1
                    ),
                }
            })?;
            let run = run_adaptsim(&model, ck, &env, budget, seed);
            rows.extend(method_rows(
                "rangeshift",
                "AdaptSim",
                &tname,
                seed,
                &run,
                b,
            )?);
            rows.extend(method_rows(
                "rangeshift",
                "SysID-Bayes",
                &tname,
                seed,
                &bayes,
                b,
            )?);
            rows.extend(method_rows(
                "rangeshift",
                "SysID-Point",
                &tname,
                seed,
                &point,
                b,
            )?);
        }
    }
    sort_rows(&mut rows);
    Ok(RunOutput {
        rows,
        bounds: all_bounds,
    })
}

/// Reward model rebuilt from a checkpoint, for callers that only have one.
pub fn checkpoint_model(ck: &Checkpoint) -> RewardModel {
    model_from_checkpoint(ck)
}
