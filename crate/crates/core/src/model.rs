//! Preference models over `K` items with pairwise feature vectors.
//!
//! Item indices are 0-based; rounds are 1-based (`t = 1..=T`).
//!
//! Pair probabilities are always evaluated for `i < j` and mirrored as
//! `p[j][i] = 1 - p[i][j]`, which makes `p[i][j] + p[j][i] == 1.0` hold exactly
//! in floating point rather than to rounding error.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Slack allowed on `‖phi‖ ≤ 1` and on `p ∈ [0, 1]` before a model is rejected.
pub const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// `mu(x) = 1/2 + x`
    Linear,
    /// `mu(x) = 1 / (1 + e^{-x})`
    Logistic,
}

/// A link function `mu` with `mu(x) + mu(-x) = 1`, plus its curvature constant `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFunction {
    pub kind: LinkKind,
    /// Lower bound on `mu'` near the true parameter. Reported, not used by the agents.
    pub kappa: f64,
}

impl LinkFunction {
    pub fn linear() -> Self {
        Self {
            kind: LinkKind::Linear,
            kappa: 1.0,
        }
    }

    /// Logistic link with `kappa` left at `mu'(0) = 1/4`; see [`Self::with_instance_kappa`].
    pub fn logistic() -> Self {
        Self {
            kind: LinkKind::Logistic,
            kappa: 0.25,
        }
    }

    pub fn new(kind: LinkKind) -> Self {
        match kind {
            LinkKind::Linear => Self::linear(),
            LinkKind::Logistic => Self::logistic(),
        }
    }

    /// Sets `kappa = mu'(S)` with `S = max_{i,j} |<phi_ij, theta>| + ‖phi_ij‖`, the largest
    /// index reachable from a parameter within unit distance of `theta`.
    pub fn with_instance_kappa(mut self, features: &FeatureSet, theta: &[f64]) -> Self {
        let mut reach: f64 = 0.0;
        for (i, j) in features.upper_pairs() {
            let phi = features.phi(i, j);
            reach = reach.max(dot(phi, theta).abs() + norm(phi));
        }
        self.kappa = match self.kind {
            LinkKind::Linear => 1.0,
            LinkKind::Logistic => self.mu_dot(reach),
        };
        self
    }

    #[inline]
    pub fn mu(&self, x: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => 0.5 + x,
            LinkKind::Logistic => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    #[inline]
    pub fn mu_dot(&self, x: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => 1.0,
            LinkKind::Logistic => {
                let m = self.mu(x);
                m * (1.0 - m)
            }
        }
    }

    /// Antiderivative `m` with `m' = mu`, the log-partition term of the likelihood.
    #[inline]
    pub fn log_partition(&self, x: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => 0.5 * x + 0.5 * x * x,
            LinkKind::Logistic => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// `mu(x)` clamped to `[0, 1]`. The clamp is symmetric about 1/2, so `mu(x) + mu(-x) = 1` is kept.
    #[inline]
    pub fn prob(&self, x: f64) -> f64 {
        self.mu(x).clamp(0.0, 1.0)
    }

    /// Upper bound on `|mu'|`.
    pub fn l_mu(&self) -> f64 {
        match self.kind {
            LinkKind::Linear => 1.0,
            LinkKind::Logistic => 0.25,
        }
    }

    /// Upper bound on `|mu''|`. For the logistic link the true supremum is `1/(6√3)`;
    /// the looser `1/4` is the customary constant.
    pub fn m_mu(&self) -> f64 {
        match self.kind {
            LinkKind::Linear => 0.0,
            LinkKind::Logistic => 0.25,
        }
    }
}

/// Antisymmetric table of pairwise features `phi[i][j] = -phi[j][i]`, each of norm at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    num_items: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    /// Builds the table from the strict upper triangle; `(j, i)` is filled with the negation.
    pub fn from_upper<F>(num_items: usize, dim: usize, mut upper: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        if num_items < 1 || dim < 1 {
            return Err(Error::InvalidArgument(format!(
                "feature set needs K >= 1 and d >= 1 (got K={num_items}, d={dim})"
            )));
        }
        let mut data = vec![0.0; num_items * num_items * dim];
        for i in 0..num_items {
            for j in (i + 1)..num_items {
                let v = upper(i, j);
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.len(),
                    });
                }
                let a = (i * num_items + j) * dim;
                let b = (j * num_items + i) * dim;
                for k in 0..dim {
                    data[a + k] = v[k];
                    data[b + k] = -v[k];
                }
            }
        }
        let fs = Self {
            num_items,
            dim,
            data,
        };
        fs.check_norms()?;
        Ok(fs)
    }

    /// Builds from a full `K x K` table, checking exact antisymmetry.
    pub fn from_table(table: &[Vec<Vec<f64>>]) -> Result<Self> {
        let num_items = table.len();
        let dim = table
            .first()
            .and_then(|r| r.first())
            .map(|v| v.len())
            .unwrap_or(0);
        for (i, row) in table.iter().enumerate() {
            if row.len() != num_items {
                return Err(Error::DimensionMismatch {
                    expected: num_items,
                    actual: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.len(),
                    });
                }
                let mirror = &table[j][i];
                if v.iter().zip(mirror).any(|(a, b)| *a != -*b) {
                    return Err(Error::InvalidEnvironment(format!(
                        "features not antisymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Self::from_upper(num_items, dim, |i, j| table[i][j].clone())
    }

    fn check_norms(&self) -> Result<()> {
        for (i, j) in self.upper_pairs() {
            let n = norm(self.phi(i, j));
            if !(n <= 1.0 + NORM_SLACK) {
                return Err(Error::InvalidEnvironment(format!(
                    "‖phi({i},{j})‖ = {n} exceeds 1"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn num_items(&self) -> usize {
        self.num_items
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn phi(&self, i: usize, j: usize) -> &[f64] {
        let a = (i * self.num_items + j) * self.dim;
        &self.data[a..a + self.dim]
    }

    /// All `(i, j)` with `i < j`, in lexicographic order.
    pub fn upper_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.num_items;
        (0..k).flat_map(move |i| ((i + 1)..k).map(move |j| (i, j)))
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Mean feature of item `i` against a uniformly random opponent: `(1/K) Σ_j phi[i][j]`.
    pub fn mean_feature(&self, i: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for j in 0..self.num_items {
            for (acc, v) in m.iter_mut().zip(self.phi(i, j)) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.num_items as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    /// Rank of the stacked feature vectors (singular values above `1e-9 * sigma_max`).
    pub fn effective_dim(&self) -> usize {
        let rows: Vec<&[f64]> = self
            .upper_pairs()
            .map(|(i, j)| self.phi(i, j))
            .filter(|v| v.iter().any(|&x| x != 0.0))
            .collect();
        crate::linalg::numerical_rank(rows, self.dim, 1e-9)
    }
}

/// Full `K x K` probability table for `p_ij = mu(<phi_ij, theta>)`, clamped to `[0, 1]`.
///
/// Values of the unclamped link outside `[-NORM_SLACK, 1 + NORM_SLACK]` are an error.
pub fn pair_probabilities(
    features: &FeatureSet,
    link: &LinkFunction,
    theta: &[f64],
) -> Result<Vec<f64>> {
    if theta.len() != features.dim() {
        return Err(Error::DimensionMismatch {
            expected: features.dim(),
            actual: theta.len(),
        });
    }
    let k = features.num_items();
    let mut p = vec![0.5; k * k];
    for (i, j) in features.upper_pairs() {
        let raw = link.mu(dot(features.phi(i, j), theta));
        if !(-NORM_SLACK..=1.0 + NORM_SLACK).contains(&raw) {
            return Err(Error::InvalidEnvironment(format!(
                "p({i},{j}) = {raw} outside [0, 1]"
            )));
        }
        let pij = raw.clamp(0.0, 1.0);
        p[i * k + j] = pij;
        p[j * k + i] = 1.0 - pij;
    }
    Ok(p)
}

/// Row means of a `K x K` probability table.
pub fn borda_from_table(probs: &[f64], num_items: usize) -> Vec<f64> {
    probs
        .chunks_exact(num_items)
        .map(|row| row.iter().sum::<f64>() / num_items as f64)
        .collect()
}

/// Stationary GLM preference model.
#[derive(Debug, Clone)]
pub struct StochasticEnv {
    features: Arc<FeatureSet>,
    link: LinkFunction,
    theta_star: Vec<f64>,
    probs: Vec<f64>,
}

impl StochasticEnv {
    pub fn new(features: FeatureSet, link: LinkFunction, theta_star: Vec<f64>) -> Result<Self> {
        let probs = pair_probabilities(&features, &link, &theta_star)?;
        Ok(Self {
            features: Arc::new(features),
            link,
            theta_star,
            probs,
        })
    }

    pub fn features(&self) -> &FeatureSet {
        &self.features
    }

    pub fn shared_features(&self) -> Arc<FeatureSet> {
        Arc::clone(&self.features)
    }

    pub fn link(&self) -> LinkFunction {
        self.link
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    /// The `K x K` probability table, row-major.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn borda_scores(&self) -> Vec<f64> {
        borda_from_table(&self.probs, self.features.num_items())
    }
}

/// One piece of a piecewise-constant parameter schedule, active from round `start` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSegment {
    pub start: usize,
    pub theta: Vec<f64>,
}

/// Adversarial linear preference model: `p^t_ij = 1/2 + <phi_ij, theta_t>`, with
/// `theta_t` piecewise constant over rounds.
#[derive(Debug, Clone)]
pub struct AdversarialEnv {
    features: Arc<FeatureSet>,
    horizon: usize,
    segments: Vec<ThetaSegment>,
}

impl AdversarialEnv {
    /// `segments` must start at round 1 and have strictly increasing starts `≤ horizon`.
    pub fn new(features: FeatureSet, horizon: usize, segments: Vec<ThetaSegment>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        match segments.first() {
            Some(s) if s.start == 1 => {}
            _ => {
                return Err(Error::InvalidEnvironment(
                    "schedule must begin at round 1".into(),
                ))
            }
        }
        for w in segments.windows(2) {
            if w[1].start <= w[0].start {
                return Err(Error::InvalidEnvironment(
                    "schedule starts must increase".into(),
                ));
            }
        }
        if segments.last().map(|s| s.start > horizon).unwrap_or(false) {
            return Err(Error::InvalidEnvironment(
                "schedule segment starts after the horizon".into(),
            ));
        }
        let link = LinkFunction::linear();
        for seg in &segments {
            pair_probabilities(&features, &link, &seg.theta)?;
        }
        Ok(Self {
            features: Arc::new(features),
            horizon,
            segments,
        })
    }

    pub fn features(&self) -> &FeatureSet {
        &self.features
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn segments(&self) -> &[ThetaSegment] {
        &self.segments
    }

    fn segment_index(&self, t: usize) -> usize {
        self.segments.partition_point(|s| s.start <= t) - 1
    }

    pub fn theta_at(&self, t: usize) -> &[f64] {
        &self.segments[self.segment_index(t)].theta
    }
}

/// Either kind of preference model, as consumed by agents and the simulator.
#[derive(Debug, Clone)]
pub enum Environment {
    Stochastic(StochasticEnv),
    Adversarial(AdversarialEnv),
}

impl From<StochasticEnv> for Environment {
    fn from(e: StochasticEnv) -> Self {
        Environment::Stochastic(e)
    }
}

impl From<AdversarialEnv> for Environment {
    fn from(e: AdversarialEnv) -> Self {
        Environment::Adversarial(e)
    }
}

impl Environment {
    pub fn features(&self) -> &FeatureSet {
        match self {
            Environment::Stochastic(e) => e.features(),
            Environment::Adversarial(e) => e.features(),
        }
    }

    pub fn shared_features(&self) -> Arc<FeatureSet> {
        match self {
            Environment::Stochastic(e) => Arc::clone(&e.features),
            Environment::Adversarial(e) => Arc::clone(&e.features),
        }
    }

    pub fn num_items(&self) -> usize {
        self.features().num_items()
    }

    /// The link an agent should assume (adversarial models are linear).
    pub fn link(&self) -> LinkFunction {
        match self {
            Environment::Stochastic(e) => e.link(),
            Environment::Adversarial(_) => LinkFunction::linear(),
        }
    }

    pub fn horizon(&self) -> Option<usize> {
        match self {
            Environment::Stochastic(_) => None,
            Environment::Adversarial(e) => Some(e.horizon()),
        }
    }

    /// Probability that `i` beats `j` at round `t`.
    pub fn preference_prob(&self, i: usize, j: usize, t: usize) -> Result<f64> {
        let k = self.num_items();
        for idx in [i, j] {
            if idx >= k {
                return Err(Error::ItemOutOfRange {
                    index: idx,
                    num_items: k,
                });
            }
        }
        if let Environment::Adversarial(e) = self {
            if t == 0 || t > e.horizon() {
                return Err(Error::RoundOutOfRange {
                    round: t,
                    horizon: e.horizon(),
                });
            }
        }
        Ok(self.prob(i, j, t))
    }

    /// Unchecked variant of [`Self::preference_prob`]; panics on bad indices.
    #[inline]
    pub(crate) fn prob(&self, i: usize, j: usize, t: usize) -> f64 {
        match self {
            Environment::Stochastic(e) => e.probs[i * e.features.num_items() + j],
            Environment::Adversarial(e) => {
                if i == j {
                    return 0.5;
                }
                let theta = e.theta_at(t);
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                let p = (0.5 + dot(e.features.phi(a, b), theta)).clamp(0.0, 1.0);
                if i < j {
                    p
                } else {
                    1.0 - p
                }
            }
        }
    }

    pub fn borda_scores(&self, t: usize) -> Result<Vec<f64>> {
        match self {
            Environment::Stochastic(e) => Ok(e.borda_scores()),
            Environment::Adversarial(e) => {
                if t == 0 || t > e.horizon() {
                    return Err(Error::RoundOutOfRange {
                        round: t,
                        horizon: e.horizon(),
                    });
                }
                let probs =
                    pair_probabilities(e.features(), &LinkFunction::linear(), e.theta_at(t))?;
                Ok(borda_from_table(&probs, e.features.num_items()))
            }
        }
    }
}

/// Draws one duel outcome: `true` when `i` beats `j`. Uses exactly one uniform draw.
pub fn sample_duel<R: Rng + ?Sized>(
    env: &Environment,
    i: usize,
    j: usize,
    t: usize,
    rng: &mut R,
) -> bool {
    let p = env.prob(i, j, t);
    rng.random::<f64>() < p
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Borda scores of an environment precomputed once for regret accounting over a horizon.
#[derive(Debug, Clone)]
pub struct RegretReference {
    starts: Vec<usize>,
    scores: Vec<Vec<f64>>,
    best: usize,
}

impl RegretReference {
    /// For adversarial models the winner maximizes the Borda score summed over `1..=horizon`.
    pub fn new(env: &Environment, horizon: usize) -> Result<Self> {
        match env {
            Environment::Stochastic(e) => {
                let scores = e.borda_scores();
                let best = argmax(&scores);
                Ok(Self {
                    starts: vec![1],
                    scores: vec![scores],
                    best,
                })
            }
            Environment::Adversarial(e) => {
                if horizon > e.horizon() {
                    return Err(Error::RoundOutOfRange {
                        round: horizon,
                        horizon: e.horizon(),
                    });
                }
                let k = e.features.num_items();
                let mut starts = Vec::new();
                let mut scores = Vec::new();
                let mut total = vec![0.0; k];
                for (idx, seg) in e.segments.iter().enumerate() {
                    if seg.start > horizon {
                        break;
                    }
                    let end = e
                        .segments
                        .get(idx + 1)
                        .map(|s| s.start - 1)
                        .unwrap_or(horizon)
                        .min(horizon);
                    let probs =
                        pair_probabilities(e.features(), &LinkFunction::linear(), &seg.theta)?;
                    let b = borda_from_table(&probs, k);
                    let len = (end + 1 - seg.start) as f64;
                    total
                        .iter_mut()
                        .zip(&b)
                        .for_each(|(acc, v)| *acc += len * v);
                    starts.push(seg.start);
                    scores.push(b);
                }
                Ok(Self {
                    starts,
                    scores,
                    best: argmax(&total),
                })
            }
        }
    }

    pub fn best_item(&self) -> usize {
        self.best
    }

    pub fn scores_at(&self, t: usize) -> &[f64] {
        let idx = self.starts.partition_point(|&s| s <= t).max(1) - 1;
        &self.scores[idx]
    }

    /// `2 B_t(i*) - B_t(i) - B_t(j)`.
    #[inline]
    pub fn regret(&self, t: usize, i: usize, j: usize) -> f64 {
        let b = self.scores_at(t);
        2.0 * b[self.best] - b[i] - b[j]
    }
}

/// Per-round and cumulative Borda regret of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub algorithm_id: String,
    pub seed: u64,
    pub per_round_regret: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RegretTrace {
    pub fn new(algorithm_id: impl Into<String>, seed: u64) -> Self {
        Self {
            algorithm_id: algorithm_id.into(),
            seed,
            per_round_regret: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn with_capacity(algorithm_id: impl Into<String>, seed: u64, horizon: usize) -> Self {
        Self {
            algorithm_id: algorithm_id.into(),
            seed,
            per_round_regret: Vec::with_capacity(horizon),
            cumulative: Vec::with_capacity(horizon),
        }
    }

    pub fn len(&self) -> usize {
        self.per_round_regret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_round_regret.is_empty()
    }

    /// Appends round `t`'s regret for the pulled pair. Rounds must be recorded in order.
    pub fn record_step(&mut self, reference: &RegretReference, t: usize, i: usize, j: usize) {
        debug_assert_eq!(t, self.len() + 1, "rounds must be recorded in order");
        let r = reference.regret(t, i, j);
        let prev = self.cumulative.last().copied().unwrap_or(0.0);
        self.per_round_regret.push(r);
        self.cumulative.push(prev + r);
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}
