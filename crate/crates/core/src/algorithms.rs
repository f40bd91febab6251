//! Dueling-bandit agents under Borda regret.
//!
//! Every agent owns its random stream and is driven by [`run_agent`], which asks
//! for a pair, samples the duel from the environment's own stream, records regret
//! and reports the outcome back, once per round.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{allocation, frank_wolfe_design, Pair};
use crate::error::{Error, Result};
use crate::estimation::{estimate_borda, fit_theta, MleConfig, SampleLog};
use crate::instances::lambda0;
use crate::linalg::{dot, Cholesky, SymMatrix};
use crate::model::{
    argmax, sample_duel, Environment, FeatureSet, LinkFunction, RegretReference, RegretTrace,
};

/// Universal constant in the matching-regime exploration length.
pub const C4: f64 = 1.0;

/// Exploration coefficient used by UCB-Borda unless configured otherwise.
pub const UCB_DEFAULT_ALPHA: f64 = 0.3;

pub trait DuelingAgent {
    fn id(&self) -> &str;

    /// Pair to duel at round `t` (1-based).
    fn select_pair(&mut self, t: usize) -> (usize, usize);

    /// Outcome of round `t`: `won` is true when `i` beat `j`.
    fn observe(&mut self, t: usize, i: usize, j: usize, won: bool);
}

/// Plays `agent` for `horizon` rounds and returns its regret trace.
pub fn run_agent<R: Rng + ?Sized>(
    env: &Environment,
    reference: &RegretReference,
    agent: &mut dyn DuelingAgent,
    horizon: usize,
    seed: u64,
    env_rng: &mut R,
) -> RegretTrace {
    let k = env.num_items();
    let mut trace = RegretTrace::with_capacity(agent.id(), seed, horizon);
    for t in 1..=horizon {
        let (i, j) = agent.select_pair(t);
        assert!(
            i < k && j < k,
            "agent {} chose ({i}, {j}) with K = {k}",
            agent.id()
        );
        let won = sample_duel(env, i, j, t, env_rng);
        trace.record_step(reference, t, i, j);
        agent.observe(t, i, j, won);
    }
    trace
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Exploration length driven by `λ0`; regret `Õ(d^{2/3} T^{2/3})`.
    Matching,
    /// Exploration length driven by `log K`; preferable when `K` is small.
    FewerArms,
}

/// Pure-exploration rounds `τ` and design accuracy `ε` for BETC-GLM.
pub fn betc_params(
    regime: Regime,
    horizon: usize,
    num_items: usize,
    d_eff: usize,
    delta: f64,
    lambda0: f64,
) -> Result<(usize, f64)> {
    if horizon < 1 || num_items < 1 || d_eff < 1 {
        return Err(Error::InvalidArgument(format!(
            "betc_params needs T, K, d >= 1 (got T={horizon}, K={num_items}, d={d_eff})"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta = {delta} not in (0, 1)"
        )));
    }
    let t = horizon as f64;
    let d = d_eff as f64;
    let k = num_items as f64;
    Ok(match regime {
        Regime::Matching => {
            if !(lambda0 > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "matching regime needs lambda0 > 0, got {lambda0}"
                )));
            }
            let tau = (C4 * (d + (1.0 / delta).ln()) / (lambda0 * lambda0)).ceil();
            (tau as usize, d.powf(1.0 / 6.0) * t.powf(-1.0 / 3.0))
        }
        Regime::FewerArms => {
            let tau = ((d * (k / delta).ln()).cbrt() * t.powf(2.0 / 3.0)).ceil();
            let eps = d.cbrt() * t.powf(-1.0 / 3.0) * (3.0 * k * k / delta).ln().powf(-1.0 / 6.0);
            (tau as usize, eps)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetcConfig {
    pub horizon: usize,
    pub tau: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub regime: Regime,
    pub fw_iterations: usize,
    pub mle: MleConfig,
}

impl BetcConfig {
    /// Parameters from [`betc_params`] for this feature set, with `δ = 1/T` by default.
    pub fn for_features(
        features: &FeatureSet,
        horizon: usize,
        regime: Regime,
        delta: Option<f64>,
    ) -> Result<Self> {
        let delta = delta.unwrap_or(1.0 / horizon.max(2) as f64);
        let d_eff = features.effective_dim().max(1);
        let (tau, epsilon) = betc_params(
            regime,
            horizon,
            features.num_items(),
            d_eff,
            delta,
            lambda0(features),
        )?;
        Ok(Self {
            horizon,
            tau,
            epsilon,
            delta,
            regime,
            fw_iterations: 100,
            mle: MleConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon = {} must be positive",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta = {} not in (0, 1)",
                self.delta
            )));
        }
        if self.fw_iterations < 1 {
            return Err(Error::InvalidArgument(
                "fw_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// What BETC-GLM committed to after exploring.
#[derive(Debug, Clone, PartialEq)]
pub struct BetcFit {
    pub theta_hat: Vec<f64>,
    pub borda_hat: Vec<f64>,
    pub chosen: usize,
    pub converged: bool,
}

/// Explore-then-commit with a G-optimal designed exploration phase.
///
/// Rounds `1..=τ` duel uniformly random pairs; the next `N` rounds follow the
/// Frank-Wolfe design rounded by [`allocation`], pair by pair in lexicographic
/// order. All `τ + N` outcomes feed the MLE, and every later round plays `(î, î)`
/// with `î` the estimated Borda winner. When `τ + N > T` the run ends while still
/// exploring and [`Self::truncated`] is set.
pub struct BetcGlm {
    id: String,
    features: Arc<FeatureSet>,
    link: LinkFunction,
    config: BetcConfig,
    rng: ChaCha8Rng,
    schedule: Vec<Pair>,
    schedule_ends: Vec<usize>,
    counts: BTreeMap<Pair, (f64, f64)>,
    fit: Option<BetcFit>,
}

impl BetcGlm {
    pub fn new(env: &Environment, config: BetcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let features = env.shared_features();
        let (schedule, schedule_ends) = match frank_wolfe_design(&features, config.fw_iterations) {
            Ok(design) => {
                let alloc = allocation(&design, features.effective_dim(), config.epsilon);
                let mut ends = Vec::with_capacity(alloc.len());
                let mut total = 0usize;
                for &n in alloc.values() {
                    total += n as usize;
                    ends.push(total);
                }
                (alloc.into_keys().collect(), ends)
            }
            Err(Error::DegenerateFeatures) => (Vec::new(), Vec::new()),
            Err(e) => return Err(e),
        };
        let agent = Self {
            id: "BETC-GLM".into(),
            features,
            link: env.link(),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            schedule,
            schedule_ends,
            counts: BTreeMap::new(),
            fit: None,
        };
        if agent.truncated() {
            log::warn!(
                "BETC-GLM exploration τ + N = {} exceeds T = {}; no commit phase",
                agent.exploration_rounds(),
                agent.config.horizon
            );
        }
        Ok(agent)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn tau(&self) -> usize {
        self.config.tau
    }

    /// Rounds of designed exploration, `N = Σ N(i,j)`.
    pub fn design_rounds(&self) -> usize {
        self.schedule_ends.last().copied().unwrap_or(0)
    }

    pub fn exploration_rounds(&self) -> usize {
        self.config.tau + self.design_rounds()
    }

    pub fn truncated(&self) -> bool {
        self.exploration_rounds() > self.config.horizon
    }

    pub fn fit(&self) -> Option<&BetcFit> {
        self.fit.as_ref()
    }

    fn commit(&mut self) -> usize {
        if let Some(fit) = &self.fit {
            return fit.chosen;
        }
        let dim = self.features.dim();
        let mut samples = SampleLog::new(dim);
        for (&(i, j), &(s, n)) in &self.counts {
            let phi = self.features.phi(i, j);
            if phi.iter().any(|&x| x != 0.0) {
                samples
                    .push_aggregated(phi, s, n)
                    .expect("features satisfy the sample-log bounds");
            }
        }
        let (theta_hat, converged) = if samples.is_empty() {
            (vec![0.0; dim], true)
        } else {
            fit_theta(&samples, &self.link, &self.config.mle).unwrap_or_else(|e| {
                log::warn!("BETC-GLM estimate failed ({e}); using theta = 0");
                (vec![0.0; dim], false)
            })
        };
        let borda_hat = estimate_borda(&theta_hat, &self.features, &self.link);
        let chosen = argmax(&borda_hat);
        self.fit = Some(BetcFit {
            theta_hat,
            borda_hat,
            chosen,
            converged,
        });
        chosen
    }
}

impl DuelingAgent for BetcGlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn select_pair(&mut self, t: usize) -> (usize, usize) {
        let k = self.features.num_items();
        if t <= self.config.tau {
            (self.rng.random_range(0..k), self.rng.random_range(0..k))
        } else if t <= self.exploration_rounds() {
            let offset = t - self.config.tau - 1;
            self.schedule[self.schedule_ends.partition_point(|&end| end <= offset)]
        } else {
            let c = self.commit();
            (c, c)
        }
    }

    fn observe(&mut self, t: usize, i: usize, j: usize, won: bool) {
        if t > self.exploration_rounds() || i == j {
            return;
        }
        let (key, s) = if i < j { ((i, j), won) } else { ((j, i), !won) };
        let entry = self.counts.entry(key).or_insert((0.0, 0.0));
        entry.0 += f64::from(u8::from(s));
        entry.1 += 1.0;
    }
}

/// Result of a standalone BETC-GLM run.
#[derive(Debug, Clone)]
pub struct BetcRun {
    pub trace: RegretTrace,
    pub tau: usize,
    pub design_rounds: usize,
    pub truncated: bool,
    pub fit: Option<BetcFit>,
}

/// Runs BETC-GLM for `config.horizon` rounds; `seed` drives both the agent and the duels.
pub fn betc_glm_run(env: &Environment, config: BetcConfig, seed: u64) -> Result<BetcRun> {
    if !matches!(env, Environment::Stochastic(_)) {
        return Err(Error::InvalidEnvironment(
            "BETC-GLM needs a stochastic environment".into(),
        ));
    }
    let horizon = config.horizon;
    let reference = RegretReference::new(env, horizon)?;
    let (agent_rng, mut env_rng) = split_streams(seed);
    let mut agent = BetcGlm::new(env, config, agent_rng)?;
    let trace = run_agent(env, &reference, &mut agent, horizon, seed, &mut env_rng);
    Ok(BetcRun {
        trace,
        tau: agent.tau(),
        design_rounds: agent.design_rounds(),
        truncated: agent.truncated(),
        fit: agent.fit.clone(),
    })
}

/// Agent seed and environment stream derived from one run seed.
pub fn split_streams(seed: u64) -> (u64, ChaCha8Rng) {
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    env_rng.set_stream(1);
    (seed, env_rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bexp3Config {
    pub eta: f64,
    pub gamma: f64,
}

impl Bexp3Config {
    pub fn new(eta: f64, gamma: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta = {eta} must be positive"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma = {gamma} not in (0, 1]"
            )));
        }
        Ok(Self { eta, gamma })
    }

    /// `η = (ln K)^{2/3} d^{-1/3} T^{-2/3}` and `γ = √(η d / λ0)`, with `γ` capped at 1.
    pub fn defaults(num_items: usize, dim: usize, horizon: usize, lambda0: f64) -> Result<Self> {
        if !(lambda0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "BEXP3 needs lambda0 > 0, got {lambda0}"
            )));
        }
        let k = num_items.max(2) as f64;
        let d = dim as f64;
        let eta = k.ln().powf(2.0 / 3.0) * d.powf(-1.0 / 3.0) * (horizon as f64).powf(-2.0 / 3.0);
        let gamma = (eta * d / lambda0).sqrt();
        if gamma > 1.0 {
            log::warn!("BEXP3 default gamma {gamma:.3} capped at 1");
        }
        Self::new(eta, gamma.min(1.0))
    }
}

/// Importance-weighted Borda estimator shared by BEXP3 and its tests.
///
/// `Q(q) = Σ_i Σ_j q_i q_j φ_ij φ_ijᵀ` and, after a win of `i` over `j`,
/// `B̂(k) = ⟨m_k, Q⁻¹ φ_ij⟩` with `m_k = (1/K) Σ_j φ_kj`. A loss gives `B̂ = 0`.
#[derive(Debug, Clone)]
pub struct Bexp3Estimator {
    features: Arc<FeatureSet>,
    pairs: Vec<Pair>,
    means: Vec<Vec<f64>>,
}

impl Bexp3Estimator {
    pub fn new(features: Arc<FeatureSet>) -> Self {
        let pairs = features
            .upper_pairs()
            .filter(|&(i, j)| features.phi(i, j).iter().any(|&x| x != 0.0))
            .collect();
        let means = (0..features.num_items())
            .map(|i| features.mean_feature(i))
            .collect();
        Self {
            features,
            pairs,
            means,
        }
    }

    pub fn info_matrix(&self, q: &[f64]) -> SymMatrix {
        let d = self.features.dim();
        let mut m = SymMatrix::zeros(d);
        for &(i, j) in &self.pairs {
            // (i, j) and (j, i) contribute the same outer product
            let w = 2.0 * q[i] * q[j];
            let phi = self.features.phi(i, j);
            for a in 0..d {
                let wa = w * phi[a];
                for b in a..d {
                    m.upper_add(a, b, wa * phi[b]);
                }
            }
        }
        m.mirror_upper();
        m
    }

    /// Estimated shifted Borda scores for every item after observing `(i, j, won)` under `q`.
    pub fn estimate(&self, q: &[f64], i: usize, j: usize, won: bool) -> Result<Vec<f64>> {
        let k = self.features.num_items();
        if !won {
            return Ok(vec![0.0; k]);
        }
        let q_mat = self.info_matrix(q);
        let chol = Cholesky::factor(&q_mat)?;
        let theta = chol.solve(&q_mat, self.features.phi(i, j));
        Ok(self.means.iter().map(|m| dot(m, &theta)).collect())
    }
}

/// Exponential weights over items with a `γ/K` uniform mix and both duel arms drawn from `q_t`.
pub struct Bexp3 {
    id: String,
    config: Bexp3Config,
    estimator: Bexp3Estimator,
    rng: ChaCha8Rng,
    q: Vec<f64>,
    sampler: WeightedIndex<f64>,
    cumulative: Vec<f64>,
    last_estimate: Vec<f64>,
}

impl Bexp3 {
    /// Rejects feature sets with `λ0 = 0`, for which `Q` can be singular.
    pub fn new(env: &Environment, config: Bexp3Config, seed: u64) -> Result<Self> {
        let config = Bexp3Config::new(config.eta, config.gamma)?;
        let features = env.shared_features();
        let l0 = lambda0(&features);
        if !(l0 > 0.0) {
            return Err(Error::InvalidArgument(
                "BEXP3 needs features with lambda0 > 0".into(),
            ));
        }
        if config.eta > l0 * config.gamma * config.gamma {
            log::warn!(
                "BEXP3 eta {} exceeds lambda0·gamma² = {}",
                config.eta,
                l0 * config.gamma * config.gamma
            );
        }
        let k = features.num_items();
        let q = vec![1.0 / k as f64; k];
        Ok(Self {
            id: "BEXP3".into(),
            config,
            estimator: Bexp3Estimator::new(features),
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampler: WeightedIndex::new(&q).expect("uniform weights"),
            q,
            cumulative: vec![0.0; k],
            last_estimate: vec![0.0; k],
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn distribution(&self) -> &[f64] {
        &self.q
    }

    pub fn last_estimate(&self) -> &[f64] {
        &self.last_estimate
    }

    pub fn config(&self) -> Bexp3Config {
        self.config
    }
}

impl DuelingAgent for Bexp3 {
    fn id(&self) -> &str {
        &self.id
    }

    fn select_pair(&mut self, _t: usize) -> (usize, usize) {
        let i = self.sampler.sample(&mut self.rng);
        let j = self.sampler.sample(&mut self.rng);
        (i, j)
    }

    fn observe(&mut self, _t: usize, i: usize, j: usize, won: bool) {
        if !won {
            // the estimate is identically zero and q is unchanged
            self.last_estimate.iter_mut().for_each(|b| *b = 0.0);
            return;
        }
        let estimate = self
            .estimator
            .estimate(&self.q, i, j, won)
            .expect("Q is positive definite when lambda0 > 0 and q >= gamma/K");
        self.cumulative
            .iter_mut()
            .zip(&estimate)
            .for_each(|(s, b)| *s += b);
        self.last_estimate = estimate;

        let k = self.q.len() as f64;
        let eta = self.config.eta;
        let gamma = self.config.gamma;
        let shift = self
            .cumulative
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (q, s) in self.q.iter_mut().zip(&self.cumulative) {
            *q = (eta * (s - shift)).exp();
            total += *q;
        }
        for q in &mut self.q {
            *q = (1.0 - gamma) * *q / total + gamma / k;
        }
        self.sampler = WeightedIndex::new(&self.q).expect("q is a valid distribution");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbBordaConfig {
    pub alpha: f64,
}

impl Default for UcbBordaConfig {
    fn default() -> Self {
        Self {
            alpha: UCB_DEFAULT_ALPHA,
        }
    }
}

/// Optimistic index on the first arm, uniformly random second arm.
///
/// Arms never pulled as `i_t` have index `+∞`; ties go to the lowest index.
pub struct UcbBorda {
    id: String,
    alpha: f64,
    rng: ChaCha8Rng,
    pulls: Vec<u64>,
    wins: Vec<u64>,
    borda_hat: Vec<f64>,
}

impl UcbBorda {
    pub fn new(num_items: usize, config: UcbBordaConfig, seed: u64) -> Result<Self> {
        if !(config.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha = {} must be positive",
                config.alpha
            )));
        }
        Ok(Self {
            id: "UCB-Borda".into(),
            alpha: config.alpha,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pulls: vec![0; num_items],
            wins: vec![0; num_items],
            borda_hat: vec![0.5; num_items],
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn borda_hat(&self) -> &[f64] {
        &self.borda_hat
    }

    pub fn pulls(&self) -> &[u64] {
        &self.pulls
    }
}

impl DuelingAgent for UcbBorda {
    fn id(&self) -> &str {
        &self.id
    }

    fn select_pair(&mut self, t: usize) -> (usize, usize) {
        let k = self.pulls.len();
        let i = match self.pulls.iter().position(|&n| n == 0) {
            Some(fresh) => fresh,
            None => {
                let log_t = (t as f64).ln();
                let index: Vec<f64> = self
                    .borda_hat
                    .iter()
                    .zip(&self.pulls)
                    .map(|(b, &n)| b + (self.alpha * log_t / n as f64).sqrt())
                    .collect();
                argmax(&index)
            }
        };
        (i, self.rng.random_range(0..k))
    }

    fn observe(&mut self, _t: usize, i: usize, _j: usize, won: bool) {
        self.pulls[i] += 1;
        self.wins[i] += u64::from(won);
        self.borda_hat[i] = self.wins[i] as f64 / self.pulls[i] as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtcBordaConfig {
    pub delta: f64,
    /// Exploration pulls per arm.
    pub n: usize,
}

impl EtcBordaConfig {
    /// `N = ⌈K^{-2/3} T^{2/3} ln(K/δ)^{1/3}⌉`, with `δ = 1/T` by default.
    pub fn new(num_items: usize, horizon: usize, delta: Option<f64>) -> Result<Self> {
        let delta = delta.unwrap_or(1.0 / horizon.max(2) as f64);
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta = {delta} not in (0, 1)"
            )));
        }
        if num_items < 1 || horizon < 1 {
            return Err(Error::InvalidArgument("ETC-Borda needs K, T >= 1".into()));
        }
        let k = num_items as f64;
        let n = (k.powf(-2.0 / 3.0)
            * (horizon as f64).powf(2.0 / 3.0)
            * (k / delta).ln().max(0.0).cbrt())
        .ceil();
        Ok(Self {
            delta,
            n: (n as usize).max(1),
        })
    }
}

/// Round-robin exploration of the first arm for `K·N` rounds against uniform
/// opponents, then `(î, î)` with `î` the best empirical Borda score.
pub struct EtcBorda {
    id: String,
    budget: usize,
    rng: ChaCha8Rng,
    pulls: Vec<u64>,
    wins: Vec<u64>,
    committed: Option<usize>,
    truncated: bool,
}

impl EtcBorda {
    pub fn new(
        num_items: usize,
        horizon: usize,
        config: EtcBordaConfig,
        seed: u64,
    ) -> Result<Self> {
        if num_items < 1 || config.n < 1 {
            return Err(Error::InvalidArgument(
                "ETC-Borda needs K >= 1 and N >= 1".into(),
            ));
        }
        let budget = num_items.saturating_mul(config.n);
        let truncated = budget > horizon;
        if truncated {
            log::warn!(
                "ETC-Borda exploration K·N = {budget} exceeds T = {horizon}; no commit phase"
            );
        }
        Ok(Self {
            id: "ETC-Borda".into(),
            budget,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pulls: vec![0; num_items],
            wins: vec![0; num_items],
            committed: None,
            truncated,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn pulls(&self) -> &[u64] {
        &self.pulls
    }

    pub fn committed(&self) -> Option<usize> {
        self.committed
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }
}

impl DuelingAgent for EtcBorda {
    fn id(&self) -> &str {
        &self.id
    }

    fn select_pair(&mut self, t: usize) -> (usize, usize) {
        let k = self.pulls.len();
        if t <= self.budget {
            return ((t - 1) % k, self.rng.random_range(0..k));
        }
        let best = *self.committed.get_or_insert_with(|| {
            let scores: Vec<f64> = self
                .wins
                .iter()
                .zip(&self.pulls)
                .map(|(&w, &n)| if n == 0 { 0.5 } else { w as f64 / n as f64 })
                .collect();
            argmax(&scores)
        });
        (best, best)
    }

    fn observe(&mut self, t: usize, i: usize, _j: usize, won: bool) {
        if t <= self.budget {
            self.pulls[i] += 1;
            self.wins[i] += u64::from(won);
        }
    }
}

/// Runs ETC-Borda for `horizon` rounds; `seed` drives both the agent and the duels.
pub fn etc_borda_run(
    env: &Environment,
    horizon: usize,
    config: EtcBordaConfig,
    seed: u64,
) -> Result<(RegretTrace, Option<usize>)> {
    let reference = RegretReference::new(env, horizon)?;
    let (agent_seed, mut env_rng) = split_streams(seed);
    let mut agent = EtcBorda::new(env.num_items(), horizon, config, agent_seed)?;
    let trace = run_agent(env, &reference, &mut agent, horizon, seed, &mut env_rng);
    Ok((trace, agent.committed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{make_hard_instance, make_random_glm, HardInstanceSpec};
    use crate::model::{LinkKind, StochasticEnv};
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    fn identical_pair_env() -> Environment {
        let fs = FeatureSet::from_upper(2, 1, |_, _| vec![0.0]).unwrap();
        StochasticEnv::new(fs, LinkFunction::linear(), vec![0.3])
            .unwrap()
            .into()
    }

    fn hard_env(d: usize, delta: f64, signs: Vec<i8>) -> Environment {
        make_hard_instance(&HardInstanceSpec::new(d, delta, signs).unwrap())
            .unwrap()
            .into()
    }

    fn drive(
        env: &Environment,
        agent: &mut dyn DuelingAgent,
        horizon: usize,
        seed: u64,
    ) -> RegretTrace {
        let reference = RegretReference::new(env, horizon).unwrap();
        let (_, mut env_rng) = split_streams(seed);
        run_agent(env, &reference, agent, horizon, seed, &mut env_rng)
    }

    #[test]
    fn betc_params_examples() {
        let (tau, _) = betc_params(Regime::Matching, 1_000_000, 128, 7, 1e-6, 0.1).unwrap();
        assert_eq!(tau, 2082);
        let (_, eps) = betc_params(Regime::Matching, 1_000_000, 128, 7, 1e-6, 0.1).unwrap();
        assert!((eps - 0.013831).abs() < 1e-6);
        let (tau, eps) = betc_params(Regime::FewerArms, 1_000_000, 128, 7, 1e-6, 0.1).unwrap();
        let oracle = ((7.0 * (1.28e8f64).ln()).cbrt() * 1e4).ceil() as usize;
        assert_eq!(tau, oracle);
        let eps_oracle = 7f64.cbrt() * 1e-2 / (3.0 * 128.0 * 128.0 / 1e-6f64).ln().powf(1.0 / 6.0);
        assert!((eps - eps_oracle).abs() < 1e-15);
        assert!(betc_params(Regime::Matching, 100, 4, 2, 0.1, 0.0).is_err());
        assert!(betc_params(Regime::Matching, 100, 4, 2, 1.5, 0.1).is_err());
    }

    #[test]
    fn etc_budget_example() {
        let c = EtcBordaConfig::new(100, 1_000_000, Some(1e-6)).unwrap();
        assert_eq!(c.n, 1226);
    }

    #[test]
    fn zero_features_give_zero_regret() {
        let env = identical_pair_env();
        let config = BetcConfig {
            horizon: 500,
            tau: 50,
            epsilon: 0.2,
            delta: 0.01,
            regime: Regime::Matching,
            fw_iterations: 10,
            mle: MleConfig::default(),
        };
        let run = betc_glm_run(&env, config, 3).unwrap();
        assert_eq!(run.trace.len(), 500);
        assert!(run.trace.per_round_regret.iter().all(|&r| r == 0.0));
        assert_eq!(run.design_rounds, 0);

        let mut ucb = UcbBorda::new(2, UcbBordaConfig::default(), 1).unwrap();
        assert_eq!(drive(&env, &mut ucb, 200, 1).final_regret(), 0.0);
        let mut etc = EtcBorda::new(2, 200, EtcBordaConfig::new(2, 200, None).unwrap(), 1).unwrap();
        assert_eq!(drive(&env, &mut etc, 200, 1).final_regret(), 0.0);
        // BEXP3 refuses lambda0 = 0
        assert!(Bexp3::new(&env, Bexp3Config::new(0.1, 0.5).unwrap(), 1).is_err());
    }

    #[test]
    fn betc_phase_discipline() {
        let env = hard_env(2, 1.0 / 16.0, vec![1, -1]);
        let config =
            BetcConfig::for_features(env.features(), 20_000, Regime::Matching, None).unwrap();
        let mut agent = BetcGlm::new(&env, config, 5).unwrap();
        let explore = agent.exploration_rounds();
        assert!(explore < 20_000);
        let reference = RegretReference::new(&env, 20_000).unwrap();
        let (_, mut env_rng) = split_streams(5);
        let mut pairs = Vec::new();
        let mut trace = RegretTrace::new("BETC-GLM", 5);
        for t in 1..=20_000 {
            let (i, j) = agent.select_pair(t);
            let won = sample_duel(&env, i, j, t, &mut env_rng);
            trace.record_step(&reference, t, i, j);
            agent.observe(t, i, j, won);
            pairs.push((i, j));
        }
        let chosen = agent.fit().unwrap().chosen;
        assert!(pairs[explore..].iter().all(|&p| p == (chosen, chosen)));
        if chosen == reference.best_item() {
            assert!(trace.per_round_regret[explore..].iter().all(|&r| r == 0.0));
        }
        // designed rounds only use pairs with nonzero feature
        for &(i, j) in &pairs[agent.tau()..explore] {
            assert!(env.features().phi(i, j).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn betc_truncation_is_flagged() {
        let env = hard_env(2, 1.0 / 16.0, vec![1, 1]);
        let config = BetcConfig::for_features(env.features(), 300, Regime::Matching, None).unwrap();
        let run = betc_glm_run(&env, config, 1).unwrap();
        assert!(run.truncated);
        assert_eq!(run.trace.len(), 300);
        assert!(run.fit.is_none());
    }

    #[test]
    fn betc_commits_to_winner() {
        let env = hard_env(2, 1.0 / 16.0, vec![1, 1]);
        let best = RegretReference::new(&env, 1).unwrap().best_item();
        let mut hits = 0;
        for seed in 0..50 {
            let config =
                BetcConfig::for_features(env.features(), 100_000, Regime::Matching, None).unwrap();
            let run = betc_glm_run(&env, config, seed).unwrap();
            hits += usize::from(run.fit.unwrap().chosen == best);
        }
        assert!(hits >= 45, "{hits}/50");
    }

    #[test]
    fn bexp3_scalar_example() {
        let fs = FeatureSet::from_upper(2, 1, |_, _| vec![1.0]).unwrap();
        let est = Bexp3Estimator::new(Arc::new(fs));
        let q = [0.5, 0.5];
        assert!((est.info_matrix(&q).get(0, 0) - 0.5).abs() < 1e-15);
        let b = est.estimate(&q, 0, 1, true).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-9 && (b[1] + 1.0).abs() < 1e-9);
        assert_eq!(est.estimate(&q, 0, 1, false).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bexp3_starts_uniform_and_keeps_floor_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let env: Environment = make_random_glm(6, 3, LinkKind::Linear, &mut rng)
            .unwrap()
            .into();
        let l0 = lambda0(env.features());
        let config = Bexp3Config::defaults(6, 3, 5_000, l0).unwrap();
        let mut agent = Bexp3::new(&env, config, 4).unwrap();
        assert!(agent.distribution().iter().all(|&q| q == 1.0 / 6.0));
        let floor = config.gamma / 6.0 - 1e-12;
        let bound = 1.0 / (l0 * config.gamma * config.gamma) + 1e-9;
        let (_, mut env_rng) = split_streams(4);
        for t in 1..=5_000 {
            let (i, j) = agent.select_pair(t);
            let won = sample_duel(&env, i, j, t, &mut env_rng);
            agent.observe(t, i, j, won);
            assert!(agent.distribution().iter().all(|&q| q >= floor));
            assert!((agent.distribution().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(agent.last_estimate().iter().all(|b| b.abs() <= bound));
        }
    }

    #[test]
    fn bexp3_estimator_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let env = make_random_glm(5, 2, LinkKind::Linear, &mut rng).unwrap();
        let truth = env.borda_scores();
        let env: Environment = env.into();
        let est = Bexp3Estimator::new(env.shared_features());
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let sampler = WeightedIndex::new(&q).unwrap();
        let n = 40_000;
        let mut sum = vec![0.0; 5];
        let mut sq = vec![0.0; 5];
        for _ in 0..n {
            let i = sampler.sample(&mut rng);
            let j = sampler.sample(&mut rng);
            let won = sample_duel(&env, i, j, 1, &mut rng);
            for (k, b) in est.estimate(&q, i, j, won).unwrap().iter().enumerate() {
                sum[k] += b;
                sq[k] += b * b;
            }
        }
        for k in 0..5 {
            let mean = sum[k] / n as f64;
            let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (mean - (truth[k] - 0.5)).abs() <= 3.0 * se,
                "item {k}: {mean} vs {}",
                truth[k] - 0.5
            );
        }
    }

    #[test]
    fn ucb_examples() {
        let mut ucb = UcbBorda::new(4, UcbBordaConfig::default(), 0).unwrap();
        assert_eq!(ucb.select_pair(1).0, 0);
        for (t, won) in [true, true, false, true].into_iter().enumerate() {
            ucb.observe(t + 1, 2, 0, won);
        }
        assert_eq!(ucb.borda_hat()[2], 0.75);
        assert_eq!(ucb.pulls(), &[0, 0, 4, 0]);
        assert_eq!(ucb.borda_hat()[1], 0.5);
        // fresh arms first, lowest index
        assert_eq!(ucb.select_pair(5).0, 0);
    }

    #[test]
    fn ucb_second_arm_is_uniform() {
        let k = 8;
        let mut ucb = UcbBorda::new(k, UcbBordaConfig::default(), 11).unwrap();
        let mut counts = vec![0u64; k];
        let n = 100_000;
        for t in 1..=n {
            let (i, j) = ucb.select_pair(t);
            counts[j] += 1;
            ucb.observe(t, i, j, (t % 3) == 0);
        }
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of chi-square with 7 degrees of freedom
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn etc_round_robin_and_counts() {
        let env = hard_env(2, 1.0 / 16.0, vec![-1, 1]);
        let config = EtcBordaConfig { delta: 0.01, n: 25 };
        let mut etc = EtcBorda::new(8, 1_000, config, 2).unwrap();
        let reference = RegretReference::new(&env, 1_000).unwrap();
        let (_, mut env_rng) = split_streams(2);
        for t in 1..=1_000 {
            let (i, j) = etc.select_pair(t);
            if t <= 200 {
                assert_eq!(i, (t - 1) % 8);
            } else {
                assert_eq!(i, j);
                assert_eq!(Some(i), etc.committed());
            }
            let won = sample_duel(&env, i, j, t, &mut env_rng);
            etc.observe(t, i, j, won);
            if t == 200 {
                assert!(etc.pulls().iter().all(|&n| n == 25));
            }
        }
        assert!(etc.pulls().iter().all(|&n| n == 25));
        assert_eq!(reference.best_item(), 2);
        let mut wrap = EtcBorda::new(8, 1_000, config, 2).unwrap();
        assert_eq!(wrap.select_pair(9).0, 0);
    }

    #[test]
    fn etc_commits_to_winner() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let spec = HardInstanceSpec::random(2, 1.0 / 8.0, &mut rng).unwrap();
        let env: Environment = make_hard_instance(&spec).unwrap().into();
        let config = EtcBordaConfig {
            delta: 1e-3,
            n: 4_000,
        };
        let mut hits = 0;
        for seed in 0..50 {
            let (_, chosen) = etc_borda_run(&env, 40_000, config, seed).unwrap();
            hits += usize::from(chosen == Some(spec.best_item()));
        }
        assert!(hits >= 45, "{hits}/50");
    }

    #[test]
    fn etc_truncation_flag() {
        let etc = EtcBorda::new(8, 100, EtcBordaConfig { delta: 0.1, n: 20 }, 0).unwrap();
        assert!(etc.truncated());
    }

    fn all_agents(env: &Environment, horizon: usize, seed: u64) -> Vec<Box<dyn DuelingAgent>> {
        let fs = env.features();
        let k = fs.num_items();
        vec![
            Box::new(
                BetcGlm::new(
                    env,
                    BetcConfig::for_features(fs, horizon, Regime::FewerArms, None).unwrap(),
                    seed,
                )
                .unwrap(),
            ),
            Box::new(
                Bexp3::new(
                    env,
                    Bexp3Config::defaults(k, fs.dim(), horizon, lambda0(fs)).unwrap(),
                    seed,
                )
                .unwrap(),
            ),
            Box::new(UcbBorda::new(k, UcbBordaConfig::default(), seed).unwrap()),
            Box::new(
                EtcBorda::new(
                    k,
                    horizon,
                    EtcBordaConfig::new(k, horizon, None).unwrap(),
                    seed,
                )
                .unwrap(),
            ),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn agents_are_deterministic_and_in_range(seed in any::<u64>(), k in 3usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let env: Environment = make_random_glm(k, 2, LinkKind::Logistic, &mut rng).unwrap().into();
            let horizon = 400;
            let first: Vec<RegretTrace> = all_agents(&env, horizon, seed)
                .iter_mut()
                .map(|a| drive(&env, a.as_mut(), horizon, seed))
                .collect();
            let second: Vec<RegretTrace> = all_agents(&env, horizon, seed)
                .iter_mut()
                .map(|a| drive(&env, a.as_mut(), horizon, seed))
                .collect();
            for (a, b) in first.iter().zip(&second) {
                prop_assert_eq!(a.len(), horizon);
                let bits_a: Vec<u64> = a.cumulative.iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u64> = b.cumulative.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
