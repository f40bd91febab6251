//! Seeded experiment runner, CSV/JSON output and the `borda` command line.
//!
//! A run is identified by `(agent id, repetition k)`. Its recorded seed is
//! `base_seed + k`; the agent and duel streams are derived from that seed and a
//! hash of the agent id, so runs are independent of scheduling and thread count.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    run_agent, split_streams, BetcConfig, BetcGlm, Bexp3, Bexp3Config, DuelingAgent, EtcBorda,
    EtcBordaConfig, Regime, UcbBorda, UcbBordaConfig,
};
use crate::design::{frank_wolfe_design, g_value};
use crate::error::{Error, Result};
use crate::instances::{
    default_delta, fit_env_from_counts, lambda0, make_hard_instance, make_random_glm,
    EmpiricalCounts, FitConfig, HardInstanceSpec,
};
use crate::model::{Environment, LinkKind, RegretReference, RegretTrace};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BORDA_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    /// Two-block instance; `delta` defaults to `1/(4 d_core)`. Signs come from
    /// `theta_signs`, else are drawn from `theta_seed`, else are all `+1`.
    HardInstance {
        d_core: usize,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        theta_signs: Option<Vec<i8>>,
        #[serde(default)]
        theta_seed: Option<u64>,
    },
    RandomGlm {
        k: usize,
        d: usize,
        #[serde(default = "default_link")]
        link: LinkKind,
        #[serde(default)]
        seed: u64,
    },
    /// Logistic model fitted to a `i,j,wins` CSV; relative paths resolve against the config file.
    FromCounts {
        path: PathBuf,
        d_ctx: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_link() -> LinkKind {
    LinkKind::Linear
}

/// Facts about a built environment, reported in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub kind: String,
    pub num_items: usize,
    pub dim: usize,
    pub d_eff: usize,
    pub lambda0: f64,
    pub best_item: usize,
    pub borda_scores: Vec<f64>,
}

impl EnvSpec {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<Environment> {
        let env = match self {
            EnvSpec::HardInstance {
                d_core,
                delta,
                theta_signs,
                theta_seed,
            } => {
                let delta = delta.unwrap_or_else(|| default_delta(*d_core));
                let spec = match (theta_signs, theta_seed) {
                    (Some(signs), _) => HardInstanceSpec::new(*d_core, delta, signs.clone())?,
                    (None, Some(seed)) => HardInstanceSpec::random(
                        *d_core,
                        delta,
                        &mut ChaCha8Rng::seed_from_u64(*seed),
                    )?,
                    (None, None) => HardInstanceSpec::new(*d_core, delta, vec![1; *d_core])?,
                };
                make_hard_instance(&spec)?
            }
            EnvSpec::RandomGlm { k, d, link, seed } => {
                make_random_glm(*k, *d, *link, &mut ChaCha8Rng::seed_from_u64(*seed))?
            }
            EnvSpec::FromCounts { path, d_ctx, seed } => {
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                let counts = EmpiricalCounts::from_csv_path(&path)?;
                let (env, report) = fit_env_from_counts(
                    &counts,
                    *d_ctx,
                    &mut ChaCha8Rng::seed_from_u64(*seed),
                    &FitConfig::default(),
                )?;
                log::info!(
                    "fitted {} items from {}: max |p̂ − p̃| = {:.4}",
                    report.num_items,
                    path.display(),
                    report.max_abs_error
                );
                env
            }
        };
        Ok(env.into())
    }

    fn kind(&self) -> &'static str {
        match self {
            EnvSpec::HardInstance { .. } => "hard_instance",
            EnvSpec::RandomGlm { .. } => "random_glm",
            EnvSpec::FromCounts { .. } => "from_counts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentKind {
    /// Unset `tau`/`epsilon` come from the regime formulas with `δ = 1/T` unless given.
    BetcGlm {
        #[serde(default = "default_regime")]
        regime: Regime,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        tau: Option<usize>,
        #[serde(default)]
        epsilon: Option<f64>,
        #[serde(default)]
        fw_iterations: Option<usize>,
    },
    Bexp3 {
        #[serde(default)]
        eta: Option<f64>,
        #[serde(default)]
        gamma: Option<f64>,
    },
    UcbBorda {
        #[serde(default)]
        alpha: Option<f64>,
    },
    EtcBorda {
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        n: Option<usize>,
    },
}

fn default_regime() -> Regime {
    Regime::Matching
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Label in outputs; defaults to the algorithm name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(flatten)]
    pub kind: AgentKind,
}

impl AgentSpec {
    pub fn new(kind: AgentKind) -> Self {
        Self { id: None, kind }
    }

    pub fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            match self.kind {
                AgentKind::BetcGlm { .. } => "BETC-GLM",
                AgentKind::Bexp3 { .. } => "BEXP3",
                AgentKind::UcbBorda { .. } => "UCB-Borda",
                AgentKind::EtcBorda { .. } => "ETC-Borda",
            }
            .to_string()
        })
    }

    pub fn build(
        &self,
        env: &Environment,
        horizon: usize,
        seed: u64,
    ) -> Result<Box<dyn DuelingAgent + Send>> {
        let features = env.features();
        let k = features.num_items();
        let id = self.label();
        Ok(match &self.kind {
            AgentKind::BetcGlm {
                regime,
                delta,
                tau,
                epsilon,
                fw_iterations,
            } => {
                let mut config = match (tau, epsilon) {
                    (Some(tau), Some(epsilon)) => BetcConfig {
                        horizon,
                        tau: *tau,
                        epsilon: *epsilon,
                        delta: delta.unwrap_or(1.0 / horizon.max(2) as f64),
                        regime: *regime,
                        fw_iterations: 100,
                        mle: Default::default(),
                    },
                    _ => {
                        let mut c = BetcConfig::for_features(features, horizon, *regime, *delta)?;
                        c.tau = tau.unwrap_or(c.tau);
                        c.epsilon = epsilon.unwrap_or(c.epsilon);
                        c
                    }
                };
                if let Some(r) = fw_iterations {
                    config.fw_iterations = *r;
                }
                Box::new(BetcGlm::new(env, config, seed)?.with_id(id))
            }
            AgentKind::Bexp3 { eta, gamma } => {
                let config = match (eta, gamma) {
                    (Some(eta), Some(gamma)) => Bexp3Config::new(*eta, *gamma)?,
                    _ => {
                        let d =
                            Bexp3Config::defaults(k, features.dim(), horizon, lambda0(features))?;
                        Bexp3Config::new(eta.unwrap_or(d.eta), gamma.unwrap_or(d.gamma))?
                    }
                };
                Box::new(Bexp3::new(env, config, seed)?.with_id(id))
            }
            AgentKind::UcbBorda { alpha } => {
                let config = UcbBordaConfig {
                    alpha: alpha.unwrap_or(UcbBordaConfig::default().alpha),
                };
                Box::new(UcbBorda::new(k, config, seed)?.with_id(id))
            }
            AgentKind::EtcBorda { delta, n } => {
                let mut config = EtcBordaConfig::new(k, horizon, *delta)?;
                if let Some(n) = n {
                    config.n = *n;
                }
                Box::new(EtcBorda::new(k, horizon, config, seed)?.with_id(id))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Repetition `k` uses seed `base_seed + k`.
    #[default]
    PerRepetition,
    /// Every repetition uses `base_seed`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub agents: Vec<AgentSpec>,
    pub horizon: usize,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Output directory for `traces.csv`, `aggregate.csv` and `summary.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Defaults to `max(1, T / 1000)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    /// Worker threads; further capped by `BORDA_THREADS`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let mut ids = HashSet::new();
        for agent in &self.agents {
            if !ids.insert(agent.label()) {
                return Err(Error::Config(format!(
                    "duplicate agent id {:?}",
                    agent.label()
                )));
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.horizon / 1000).max(1))
    }

    pub fn run_seed(&self, repetition: usize) -> u64 {
        match self.seed_policy {
            SeedPolicy::PerRepetition => self.base_seed.wrapping_add(repetition as u64),
            SeedPolicy::Fixed => self.base_seed,
        }
    }
}

/// Rounds kept in outputs: multiples of `stride` and the final round.
pub fn recorded_rounds(horizon: usize, stride: usize) -> Vec<usize> {
    let mut rounds: Vec<usize> = (1..=horizon / stride).map(|m| m * stride).collect();
    if rounds.last() != Some(&horizon) {
        rounds.push(horizon);
    }
    rounds
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Stream seed for one run of one agent.
pub fn derive_seed(run_seed: u64, agent_id: &str) -> u64 {
    splitmix64(splitmix64(run_seed) ^ fnv1a(agent_id))
}

/// Cumulative regret of one run at the recorded rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinnedTrace {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: Vec<usize>,
    pub cum_regret: Vec<f64>,
}

impl ThinnedTrace {
    pub fn from_trace(trace: &RegretTrace, rounds: &[usize]) -> Self {
        Self {
            algorithm: trace.algorithm_id.clone(),
            seed: trace.seed,
            rounds: rounds.to_vec(),
            cum_regret: rounds.iter().map(|&t| trace.cumulative[t - 1]).collect(),
        }
    }

    pub fn final_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAggregate {
    pub algorithm: String,
    pub runs: usize,
    pub rounds: Vec<usize>,
    pub mean: Vec<f64>,
    /// Sample standard deviation (`n − 1` denominator); zero for a single run.
    pub std: Vec<f64>,
    pub final_mean: f64,
    pub final_std: f64,
    pub final_min: f64,
    pub final_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateResult {
    pub agents: Vec<AgentAggregate>,
}

impl AggregateResult {
    pub fn agent(&self, algorithm: &str) -> Option<&AgentAggregate> {
        self.agents.iter().find(|a| a.algorithm == algorithm)
    }
}

/// Pointwise mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups traces by algorithm in first-seen order and aggregates them round by round.
pub fn aggregate(traces: &[ThinnedTrace]) -> AggregateResult {
    let mut order: Vec<&str> = Vec::new();
    for t in traces {
        if !order.contains(&t.algorithm.as_str()) {
            order.push(&t.algorithm);
        }
    }
    let agents = order
        .into_iter()
        .map(|name| {
            let runs: Vec<&ThinnedTrace> = traces.iter().filter(|t| t.algorithm == name).collect();
            let rounds = runs[0].rounds.clone();
            let (mean, std): (Vec<f64>, Vec<f64>) = (0..rounds.len())
                .map(|r| {
                    let column: Vec<f64> = runs.iter().map(|t| t.cum_regret[r]).collect();
                    mean_std(&column)
                })
                .unzip();
            let finals: Vec<f64> = runs.iter().map(|t| t.final_regret()).collect();
            let (final_mean, final_std) = mean_std(&finals);
            AgentAggregate {
                algorithm: name.to_string(),
                runs: runs.len(),
                rounds,
                mean,
                std,
                final_mean,
                final_std,
                final_min: finals.iter().copied().fold(f64::INFINITY, f64::min),
                final_max: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    AggregateResult { agents }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub env: EnvInfo,
    pub traces: Vec<ThinnedTrace>,
    pub aggregate: AggregateResult,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    env: &'a EnvInfo,
    agents: Vec<AgentSummary<'a>>,
}

#[derive(Debug, Serialize)]
struct AgentSummary<'a> {
    algorithm: &'a str,
    runs: usize,
    final_mean: f64,
    final_std: f64,
    final_min: f64,
    final_max: f64,
}

fn env_info(spec: &EnvSpec, env: &Environment, reference: &RegretReference) -> EnvInfo {
    let fs = env.features();
    EnvInfo {
        kind: spec.kind().into(),
        num_items: fs.num_items(),
        dim: fs.dim(),
        d_eff: fs.effective_dim(),
        lambda0: lambda0(fs),
        best_item: reference.best_item(),
        borda_scores: reference.scores_at(1).to_vec(),
    }
}

/// Worker count: `requested` (or all cores), capped by `BORDA_THREADS`.
pub fn worker_threads(requested: Option<usize>) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = requested.unwrap_or(available);
    cap.map_or(n, |c| n.min(c)).max(1)
}

/// Runs every agent for every repetition and aggregates the regret curves.
///
/// `base_dir` resolves relative paths inside the environment spec.
pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    config.validate()?;
    let env = config.env.build(base_dir)?;
    let horizon = config.horizon;
    let reference = RegretReference::new(&env, horizon)?;
    let rounds = recorded_rounds(horizon, config.stride());

    let jobs: Vec<(usize, usize)> = (0..config.agents.len())
        .flat_map(|a| (0..config.repetitions).map(move |k| (a, k)))
        .collect();
    let run_one = |&(a, k): &(usize, usize)| -> Result<ThinnedTrace> {
        let spec = &config.agents[a];
        let seed = config.run_seed(k);
        let (agent_seed, mut env_rng) = split_streams(derive_seed(seed, &spec.label()));
        let mut agent = spec.build(&env, horizon, agent_seed)?;
        let trace = run_agent(
            &env,
            &reference,
            agent.as_mut(),
            horizon,
            seed,
            &mut env_rng,
        );
        Ok(ThinnedTrace::from_trace(&trace, &rounds))
    };
    let threads = worker_threads(config.threads);
    let results: Vec<Result<ThinnedTrace>> = if threads == 1 {
        jobs.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect())
    };
    let traces = results.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&traces);
    Ok(ExperimentResult {
        env: env_info(&config.env, &env, &reference),
        traces,
        aggregate,
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `algorithm,seed,round,cum_regret`, one row per recorded round of each run.
pub fn write_traces_csv(traces: &[ThinnedTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algorithm", "seed", "round", "cum_regret"])?;
    for t in traces {
        for (round, value) in t.rounds.iter().zip(&t.cum_regret) {
            w.write_record([
                t.algorithm.clone(),
                t.seed.to_string(),
                round.to_string(),
                fmt_f64(*value),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `algorithm,round,mean,std`.
pub fn write_aggregate_csv(result: &AggregateResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algorithm", "round", "mean", "std"])?;
    for a in &result.agents {
        for ((round, mean), std) in a.rounds.iter().zip(&a.mean).zip(&a.std) {
            w.write_record([
                a.algorithm.clone(),
                round.to_string(),
                fmt_f64(*mean),
                fmt_f64(*std),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    algorithm: String,
    seed: u64,
    round: usize,
    cum_regret: f64,
}

/// Reads a file written by [`write_traces_csv`].
pub fn read_traces_csv(path: impl AsRef<Path>) -> Result<Vec<ThinnedTrace>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut traces: Vec<ThinnedTrace> = Vec::new();
    for row in rdr.deserialize() {
        let row: TraceRow = row?;
        match traces.last_mut() {
            Some(t)
                if t.algorithm == row.algorithm
                    && t.seed == row.seed
                    && t.rounds.last() < Some(&row.round) =>
            {
                t.rounds.push(row.round);
                t.cum_regret.push(row.cum_regret);
            }
            _ => traces.push(ThinnedTrace {
                algorithm: row.algorithm,
                seed: row.seed,
                rounds: vec![row.round],
                cum_regret: vec![row.cum_regret],
            }),
        }
    }
    Ok(traces)
}

/// Writes `traces.csv`, `aggregate.csv` and `summary.json` into `dir`.
pub fn write_outputs(
    config: &ExperimentConfig,
    result: &ExperimentResult,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_traces_csv(&result.traces, dir.join("traces.csv"))?;
    write_aggregate_csv(&result.aggregate, dir.join("aggregate.csv"))?;
    let summary = Summary {
        config,
        env: &result.env,
        agents: result
            .aggregate
            .agents
            .iter()
            .map(|a| AgentSummary {
                algorithm: &a.algorithm,
                runs: a.runs,
                final_mean: a.final_mean,
                final_std: a.final_std,
                final_min: a.final_min,
                final_max: a.final_max,
            })
            .collect(),
    };
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Serialized hard instance: the full feature table and the embedded parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDump {
    pub d_core: usize,
    pub ambient_dim: usize,
    pub num_items: usize,
    pub delta: f64,
    pub theta_signs: Vec<i8>,
    pub best_item: usize,
    /// `θ̃` in the ambient dimension.
    pub theta: Vec<f64>,
    /// `features[i][j]` is `φ̃_ij`.
    pub features: Vec<Vec<Vec<f64>>>,
}

impl InstanceDump {
    pub fn new(spec: &HardInstanceSpec) -> Result<Self> {
        let env = make_hard_instance(spec)?;
        let fs = env.features();
        let k = fs.num_items();
        Ok(Self {
            d_core: spec.d_core,
            ambient_dim: spec.ambient_dim(),
            num_items: k,
            delta: spec.delta,
            theta_signs: spec.theta_signs.clone(),
            best_item: spec.best_item(),
            theta: env.theta_star().to_vec(),
            features: (0..k)
                .map(|i| (0..k).map(|j| fs.phi(i, j).to_vec()).collect())
                .collect(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "borda",
    version,
    about = "Dueling-bandit experiments under Borda regret"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    Run(RunArgs),
    /// Print a Frank-Wolfe G-optimal design as CSV `i,j,weight`.
    Design(DesignArgs),
    /// Fit a logistic model to a `i,j,wins` counts file and print the fit report as JSON.
    Fit(FitArgs),
    /// Write a hard instance (features and parameter) as JSON.
    MakeInstance(MakeInstanceArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct DesignArgs {
    /// Environment spec as inline JSON or a path to a JSON file.
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    attempts: Option<usize>,
}

#[derive(Debug, Args)]
struct MakeInstanceArgs {
    /// Core dimension; the instance has `2^(d+1)` items in dimension `d + 1`.
    #[arg(long)]
    d: usize,
    /// Defaults to `1/(4d)`.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Draw the parameter signs from this seed instead of using all `+1`.
    #[arg(long)]
    seed: Option<u64>,
}

/// Entry point of the `borda` binary. Returns the process exit code: 0 on
/// success, 1 on a usage error and 2 when the command itself fails.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // help and version go to stdout, usage errors to stderr
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let mut config = ExperimentConfig::from_path(&args.config)?;
            if let Some(v) = args.horizon {
                config.horizon = v;
            }
            if let Some(v) = args.repetitions {
                config.repetitions = v;
            }
            if let Some(v) = args.base_seed {
                config.base_seed = v;
            }
            if let Some(v) = args.output {
                config.output = Some(v);
            }
            if let Some(v) = args.stride {
                config.stride = Some(v);
            }
            if let Some(v) = args.threads {
                config.threads = Some(v);
            }
            let base_dir = args.config.parent().map(Path::to_path_buf);
            let result = run_experiment(&config, base_dir.as_deref())?;
            let out = config
                .output
                .clone()
                .unwrap_or_else(|| PathBuf::from("results"));
            write_outputs(&config, &result, &out)?;
            let mut stdout = std::io::stdout().lock();
            for a in &result.aggregate.agents {
                let _ = writeln!(
                    stdout,
                    "{:<12} final regret {:.2} ± {:.2} over {} runs",
                    a.algorithm, a.final_mean, a.final_std, a.runs
                );
            }
            let _ = writeln!(stdout, "wrote {}", out.display());
            Ok(())
        }
        Command::Design(args) => {
            let text = if args.env.trim_start().starts_with('{') {
                args.env.clone()
            } else {
                fs::read_to_string(&args.env).map_err(|e| Error::io(&args.env, e))?
            };
            let spec: EnvSpec = serde_json::from_str(&text)?;
            let base_dir = Path::new(&args.env).parent().map(Path::to_path_buf);
            let env = spec.build(base_dir.as_deref())?;
            let design = frank_wolfe_design(env.features(), args.iters)?;
            log::info!(
                "design g = {:.6}, d_eff = {}",
                g_value(&design, env.features())?,
                env.features().effective_dim()
            );
            let sink: Box<dyn Write> = match &args.out {
                Some(path) => Box::new(fs::File::create(path).map_err(|e| Error::io(path, e))?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["i", "j", "weight"])?;
            for ((i, j), weight) in design.support() {
                w.write_record([i.to_string(), j.to_string(), fmt_f64(weight)])?;
            }
            w.flush()
                .map_err(|e| Error::io(args.out.unwrap_or_default(), e))
        }
        Command::Fit(args) => {
            let counts = EmpiricalCounts::from_csv_path(&args.counts)?;
            let mut config = FitConfig::default();
            if let Some(n) = args.attempts {
                config.max_attempts = n;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let (_, report) = fit_env_from_counts(&counts, args.dim, &mut rng, &config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::MakeInstance(args) => {
            let delta = args.delta.unwrap_or_else(|| default_delta(args.d));
            let spec = match args.seed {
                Some(seed) => {
                    HardInstanceSpec::random(args.d, delta, &mut ChaCha8Rng::seed_from_u64(seed))?
                }
                None => HardInstanceSpec::new(args.d, delta, vec![1; args.d])?,
            };
            let dump = InstanceDump::new(&spec)?;
            let mut text = serde_json::to_string_pretty(&dump)?;
            text.push('\n');
            fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))
        }
    }
}
