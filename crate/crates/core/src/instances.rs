//! Environment constructors: the two-block hard instance, random GLM fixtures,
//! and models fitted to observed pairwise win counts.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use num_integer::Integer;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_theta, MleConfig, SampleLog};
use crate::linalg::{dot, min_eigenvalue, norm, numerical_rank, SymMatrix};
use crate::model::{FeatureSet, LinkFunction, LinkKind, StochasticEnv};

/// `bit(x)_k = 2 b_k − 1` where `b_k` is bit `k` of `x` (least significant first).
pub fn bit_vector(x: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d >= usize::BITS as usize || x >= 1usize << d {
        return Err(Error::InvalidArgument(format!(
            "bit_vector: {x} does not fit in {d} bits"
        )));
    }
    Ok((0..d)
        .map(|k| if (x >> k) & 1 == 1 { 1.0 } else { -1.0 })
        .collect())
}

/// Parameters of the two-block instance with `K = 2^(d_core+1)` items and
/// `θ = Δ · theta_signs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardInstanceSpec {
    pub d_core: usize,
    pub delta: f64,
    pub theta_signs: Vec<i8>,
}

impl HardInstanceSpec {
    pub fn new(d_core: usize, delta: f64, theta_signs: Vec<i8>) -> Result<Self> {
        let spec = Self {
            d_core,
            delta,
            theta_signs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uses `Δ = 1 / (4 d_core)`.
    pub fn with_default_delta(d_core: usize, theta_signs: Vec<i8>) -> Result<Self> {
        Self::new(d_core, default_delta(d_core), theta_signs)
    }

    /// Signs drawn uniformly at random.
    pub fn random<R: Rng + ?Sized>(d_core: usize, delta: f64, rng: &mut R) -> Result<Self> {
        let signs = (0..d_core)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Self::new(d_core, delta, signs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_core == 0 || self.d_core > 20 {
            return Err(Error::InvalidArgument(format!(
                "d_core must be in 1..=20, got {}",
                self.d_core
            )));
        }
        if self.theta_signs.len() != self.d_core {
            return Err(Error::DimensionMismatch {
                expected: self.d_core,
                actual: self.theta_signs.len(),
            });
        }
        if self.theta_signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("theta_signs must be ±1".into()));
        }
        let load = self.d_core as f64 * self.delta;
        if !(self.delta > 0.0) || load > 0.25 {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_core·Δ ≤ 1/4 for valid probabilities, got {load}"
            )));
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        1 << (self.d_core + 1)
    }

    /// Dimension of the embedded model, `d_core + 1`.
    pub fn ambient_dim(&self) -> usize {
        self.d_core + 1
    }

    pub fn theta(&self) -> Vec<f64> {
        self.theta_signs
            .iter()
            .map(|&s| f64::from(s) * self.delta)
            .collect()
    }

    /// The unique item with `bit(x) = sign(θ)`.
    pub fn best_item(&self) -> usize {
        self.theta_signs
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0)
            .map(|(k, _)| 1 << k)
            .sum()
    }
}

pub fn default_delta(d_core: usize) -> f64 {
    1.0 / (4.0 * d_core as f64)
}

/// Builds the hard instance with a linear link in dimension `d_core + 1`.
///
/// Good items are `0..2^d_core`. The core feature is `bit(i)` for good `i` against
/// bad `j`, `−bit(j)` for bad `i` against good `j`, and zero within a block; the
/// extra coordinate `c_ij ∈ {0, ±1}` carries the `±1/4` block offset. Features are
/// scaled by `(d+1)^(−1/2)` and `θ̃ = (d+1)^(1/2) (θ, 1/4)`, so `‖φ̃‖ ≤ 1`.
pub fn make_hard_instance(spec: &HardInstanceSpec) -> Result<StochasticEnv> {
    spec.validate()?;
    let d = spec.d_core;
    let load = d as f64 * spec.delta;
    if load > 0.125 {
        log::warn!(
            "hard instance with d_core·Δ = {load} > 1/8: probabilities reach {}",
            0.75 + load
        );
    }
    let half = 1usize << d;
    let k = spec.num_items();
    let scale = ((d + 1) as f64).sqrt();
    let bits: Vec<Vec<f64>> = (0..half).map(|x| bit_vector(x, d)).collect::<Result<_>>()?;
    let features = FeatureSet::from_upper(k, d + 1, |i, j| {
        let mut v = vec![0.0; d + 1];
        // i < j, so the only cross-block case is good i against bad j
        if i < half && j >= half {
            v[..d].copy_from_slice(&bits[i]);
            v[d] = 1.0;
        }
        v.iter_mut().for_each(|x| *x /= scale);
        v
    })?;
    let mut theta = spec.theta();
    theta.push(0.25);
    theta.iter_mut().for_each(|x| *x *= scale);
    StochasticEnv::new(features, LinkFunction::linear(), theta)
}

/// `λ_min((1/K²) Σ_i Σ_j φ_ij φ_ijᵀ)`, clamped at zero.
pub fn lambda0(features: &FeatureSet) -> f64 {
    let k = features.num_items() as f64;
    let mut m = SymMatrix::zeros(features.dim());
    for (i, j) in features.upper_pairs() {
        // (i, j) and (j, i) carry the same outer product
        m.add_outer(2.0 / (k * k), features.phi(i, j));
    }
    min_eigenvalue(&m).max(0.0)
}

/// Random GLM test fixture over `K` items in dimension `d`.
///
/// Upper-triangle features have a uniformly random direction and norm in
/// `[1/2, 1]`. `θ*` has a random direction and is scaled so the most extreme
/// pair probability lies in `[0.6, 0.9]`. When `d ≤ K(K−1)/2` draws are repeated
/// until `λ0 > 0`.
pub fn make_random_glm<R: Rng + ?Sized>(
    num_items: usize,
    dim: usize,
    link: LinkKind,
    rng: &mut R,
) -> Result<StochasticEnv> {
    if num_items < 2 || dim < 1 {
        return Err(Error::InvalidArgument(format!(
            "random GLM needs K >= 2 and d >= 1 (got K={num_items}, d={dim})"
        )));
    }
    let spanning = dim <= num_items * (num_items - 1) / 2;
    const MAX_DRAWS: usize = 100;
    for _ in 0..MAX_DRAWS {
        let features = FeatureSet::from_upper(num_items, dim, |_, _| {
            let mut v = gaussian_vector(dim, rng);
            let radius = rng.random_range(0.5..=1.0) / norm(&v).max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x *= radius);
            v
        })?;
        if spanning && lambda0(&features) <= 1e-12 {
            continue;
        }
        let direction = gaussian_vector(dim, rng);
        let extreme = features
            .upper_pairs()
            .map(|(i, j)| dot(features.phi(i, j), &direction).abs())
            .fold(0.0, f64::max);
        if !(extreme > 0.0) {
            continue;
        }
        let p_max: f64 = rng.random_range(0.6..=0.9);
        let x_max = match link {
            LinkKind::Linear => p_max - 0.5,
            LinkKind::Logistic => (p_max / (1.0 - p_max)).ln(),
        };
        let theta: Vec<f64> = direction.iter().map(|x| x * x_max / extreme).collect();
        return StochasticEnv::new(features, LinkFunction::new(link), theta);
    }
    Err(Error::InvalidEnvironment(format!(
        "no full-rank random GLM with K={num_items}, d={dim} after {MAX_DRAWS} draws"
    )))
}

fn gaussian_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Observed pairwise win counts, `wins(i, j)` = number of times `i` beat `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalCounts {
    num_items: usize,
    wins: Vec<u64>,
}

#[derive(Debug, Deserialize)]
struct CountRow {
    i: usize,
    j: usize,
    wins: u64,
}

impl EmpiricalCounts {
    pub fn new(num_items: usize) -> Self {
        Self {
            num_items,
            wins: vec![0; num_items * num_items],
        }
    }

    pub fn from_table(table: &[Vec<u64>]) -> Result<Self> {
        let k = table.len();
        let mut counts = Self::new(k);
        for (i, row) in table.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    actual: row.len(),
                });
            }
            for (j, &w) in row.iter().enumerate() {
                if w > 0 {
                    counts.add(i, j, w)?;
                }
            }
        }
        Ok(counts)
    }

    /// Parses CSV with header `i,j,wins`; duplicate rows are summed and `K` is the
    /// largest index plus one.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let rows: Vec<CountRow> = rdr.deserialize().collect::<Result<_, _>>()?;
        let k = rows.iter().map(|r| r.i.max(r.j) + 1).max().unwrap_or(0);
        let mut counts = Self::new(k);
        for r in rows {
            counts.add(r.i, r.j, r.wins)?;
        }
        Ok(counts)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    /// Writes one row per ordered pair with nonzero wins.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "wins"])?;
        for i in 0..self.num_items {
            for j in 0..self.num_items {
                let n = self.wins(i, j);
                if n > 0 {
                    w.write_record([i.to_string(), j.to_string(), n.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn add(&mut self, i: usize, j: usize, wins: u64) -> Result<()> {
        for index in [i, j] {
            if index >= self.num_items {
                return Err(Error::ItemOutOfRange {
                    index,
                    num_items: self.num_items,
                });
            }
        }
        if i == j && wins > 0 {
            return Err(Error::InvalidArgument(format!(
                "item {i} cannot be compared with itself"
            )));
        }
        self.wins[i * self.num_items + j] += wins;
        Ok(())
    }

    pub fn wins(&self, i: usize, j: usize) -> u64 {
        self.wins[i * self.num_items + j]
    }

    pub fn total(&self, i: usize, j: usize) -> u64 {
        self.wins(i, j) + self.wins(j, i)
    }

    /// `p̃_ij = wins(i,j) / total(i,j)`, or `None` when the pair was never compared.
    pub fn empirical_prob(&self, i: usize, j: usize) -> Option<f64> {
        let n = self.total(i, j);
        (n > 0).then(|| self.wins(i, j) as f64 / n as f64)
    }
}

/// Options for [`fit_env_from_counts`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub mle: MleConfig,
    /// Feature draws tried before giving up on reaching `target_max_error`.
    pub max_attempts: usize,
    pub target_max_error: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mle: MleConfig::default(),
            max_attempts: 20,
            target_max_error: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub num_items: usize,
    pub d_ctx: usize,
    pub pairs_with_data: usize,
    /// Unordered pairs `(i, j)`, `i < j`, with no comparisons; their model probability is unconstrained.
    pub empty_pairs: Vec<(usize, usize)>,
    /// Distinct values of `p̃` up to the `p ↔ 1 − p` mirror, excluding `1/2`.
    pub num_groups: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub converged: bool,
    pub attempts: usize,
    pub theta_hat: Vec<f64>,
}

/// Pairs sharing a feature vector. `sign` is `+1` when the pair's `p̃` equals the
/// key and `−1` when it equals `1 − key`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGroup {
    /// Reduced fraction `(numerator, denominator)` with value above `1/2`.
    pub key: (u64, u64),
    pub members: Vec<(usize, usize, i8)>,
}

/// Groups compared pairs `i < j` by exact rational `p̃`.
///
/// `p̃` and `1 − p̃` share a group with opposite signs, which keeps
/// `φ_ji = −φ_ij` consistent with equal features for equal probabilities. Pairs
/// with `p̃ = 1/2` are returned separately since antisymmetry forces them to zero.
pub fn group_pairs(counts: &EmpiricalCounts) -> (Vec<PairGroup>, Vec<(usize, usize)>) {
    let mut groups: BTreeMap<(u64, u64), Vec<(usize, usize, i8)>> = BTreeMap::new();
    let mut halves = Vec::new();
    let k = counts.num_items();
    for i in 0..k {
        for j in (i + 1)..k {
            let n = counts.total(i, j);
            if n == 0 {
                continue;
            }
            let w = counts.wins(i, j);
            let (num, sign) = match (2 * w).cmp(&n) {
                std::cmp::Ordering::Greater => (w, 1),
                std::cmp::Ordering::Less => (n - w, -1),
                std::cmp::Ordering::Equal => {
                    halves.push((i, j));
                    continue;
                }
            };
            let g = num.gcd(&n);
            groups
                .entry((num / g, n / g))
                .or_default()
                .push((i, j, sign));
        }
    }
    let groups = groups
        .into_iter()
        .map(|(key, members)| PairGroup { key, members })
        .collect();
    (groups, halves)
}

/// Fits a logistic model to observed win counts.
///
/// Every group of pairs with equal `p̃` gets one random feature in
/// `{−1, +1}^d_ctx / √d_ctx`, redrawn until the group features have full rank;
/// pairs never compared get an independent random
/// feature. `θ̂` maximizes the logistic likelihood of the targets `p̃`, one
/// sample per compared pair. Feature draws are repeated up to
/// `config.max_attempts` times until the largest `|p̂ − p̃|` is within
/// `config.target_max_error`; the best draw is kept.
pub fn fit_env_from_counts<R: Rng + ?Sized>(
    counts: &EmpiricalCounts,
    d_ctx: usize,
    rng: &mut R,
    config: &FitConfig,
) -> Result<(StochasticEnv, FitReport)> {
    if d_ctx == 0 {
        return Err(Error::InvalidArgument("d_ctx must be at least 1".into()));
    }
    let k = counts.num_items();
    if k < 2 {
        return Err(Error::EmptyCounts);
    }
    let (groups, halves) = group_pairs(counts);
    let empty_pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .filter(|&(i, j)| counts.total(i, j) == 0)
        .collect();
    let pairs_with_data = k * (k - 1) / 2 - empty_pairs.len();
    if pairs_with_data == 0 {
        return Err(Error::EmptyCounts);
    }
    let link = LinkFunction::logistic();
    let scale = 1.0 / (d_ctx as f64).sqrt();
    let sign_vector = |rng: &mut R| -> Vec<f64> {
        (0..d_ctx)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect()
    };

    let mut best: Option<(StochasticEnv, FitReport)> = None;
    for attempt in 1..=config.max_attempts.max(1) {
        // independent group directions make an exact fit possible when groups ≤ d_ctx
        let full_rank = groups.len().min(d_ctx);
        let mut directions: Vec<Vec<f64>> = Vec::new();
        for _ in 0..100 {
            directions = groups.iter().map(|_| sign_vector(rng)).collect();
            if numerical_rank(directions.iter().map(Vec::as_slice), d_ctx, 1e-9) == full_rank {
                break;
            }
        }
        let mut upper: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (group, v) in groups.iter().zip(&directions) {
            for &(i, j, s) in &group.members {
                upper.insert((i, j), v.iter().map(|x| f64::from(s) * x).collect());
            }
        }
        for &(i, j) in &halves {
            upper.insert((i, j), vec![0.0; d_ctx]);
        }
        for &(i, j) in &empty_pairs {
            upper.insert((i, j), sign_vector(rng));
        }
        let features = FeatureSet::from_upper(k, d_ctx, |i, j| upper[&(i, j)].clone())?;

        let mut samples = SampleLog::new(d_ctx);
        for (i, j) in features.upper_pairs() {
            if let Some(p) = counts.empirical_prob(i, j) {
                samples.push_aggregated(features.phi(i, j), p, 1.0)?;
            }
        }
        let (theta, converged) = fit_theta(&samples, &link, &config.mle)?;
        let env = StochasticEnv::new(features, link, theta.clone())?;

        let probs = env.probabilities();
        let errors: Vec<f64> = env
            .features()
            .upper_pairs()
            .filter_map(|(i, j)| {
                counts
                    .empirical_prob(i, j)
                    .map(|p| (probs[i * k + j] - p).abs())
            })
            .collect();
        let max_abs_error = errors.iter().copied().fold(0.0, f64::max);
        let mean_abs_error = errors.iter().sum::<f64>() / errors.len() as f64;
        let report = FitReport {
            num_items: k,
            d_ctx,
            pairs_with_data,
            empty_pairs: empty_pairs.clone(),
            num_groups: groups.len(),
            max_abs_error,
            mean_abs_error,
            converged,
            attempts: attempt,
            theta_hat: theta,
        };
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| report.max_abs_error < b.max_abs_error);
        if better {
            best = Some((env, report));
        }
        if max_abs_error <= config.target_max_error {
            break;
        }
    }
    let (env, mut report) = best.expect("at least one attempt");
    report.attempts = report.attempts.max(1);
    if report.max_abs_error > config.target_max_error {
        log::warn!(
            "fit reached max |p̂ − p̃| = {:.4} after {} attempts ({} groups, d_ctx = {d_ctx})",
            report.max_abs_error,
            config.max_attempts,
            report.num_groups
        );
    }
    Ok((env, report))
}
