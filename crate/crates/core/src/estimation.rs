//! Maximum-likelihood estimation of the preference parameter.
//!
//! Samples are stored aggregated: each entry is a feature vector with a number of
//! trials and the (possibly fractional) number of successes. A single Bernoulli
//! observation is one trial. Aggregation leaves the likelihood unchanged and keeps
//! fits cheap when an exploration phase repeats the same pair thousands of times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Cholesky, SymMatrix};
use crate::model::{FeatureSet, LinkFunction, LinkKind, NORM_SLACK};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleLog {
    dim: usize,
    phis: Vec<f64>,
    successes: Vec<f64>,
    trials: Vec<f64>,
}

impl SampleLog {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of entries (not trials).
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Total number of trials `n`.
    pub fn total_trials(&self) -> f64 {
        self.trials.iter().sum()
    }

    /// One observation with outcome `r ∈ [0, 1]`.
    pub fn push(&mut self, phi: &[f64], r: f64) -> Result<()> {
        self.push_aggregated(phi, r, 1.0)
    }

    /// `trials` observations of the same feature with `successes` wins in total.
    pub fn push_aggregated(&mut self, phi: &[f64], successes: f64, trials: f64) -> Result<()> {
        if phi.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: phi.len(),
            });
        }
        if !(norm(phi) <= 1.0 + NORM_SLACK) {
            return Err(Error::InvalidArgument("sample feature has norm > 1".into()));
        }
        if !(trials > 0.0) || !(0.0..=trials).contains(&successes) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= successes <= trials and trials > 0 (got {successes}/{trials})"
            )));
        }
        self.phis.extend_from_slice(phi);
        self.successes.push(successes);
        self.trials.push(trials);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64, f64)> + '_ {
        self.phis
            .chunks_exact(self.dim.max(1))
            .zip(self.successes.iter().zip(&self.trials))
            .map(|(phi, (&s, &n))| (phi, s, n))
    }

    /// `V = Σ n φ φᵀ`.
    pub fn design_matrix(&self) -> SymMatrix {
        let mut v = SymMatrix::zeros(self.dim);
        for (phi, _, n) in self.iter() {
            v.add_outer(n, phi);
        }
        v
    }
}

/// Log-likelihood `Σ [s φᵀθ − n m(φᵀθ)]`.
pub fn log_likelihood(samples: &SampleLog, link: &LinkFunction, theta: &[f64]) -> f64 {
    samples
        .iter()
        .map(|(phi, s, n)| {
            let x = dot(phi, theta);
            s * x - n * link.log_partition(x)
        })
        .sum()
}

/// Gradient of [`log_likelihood`]: `Σ (s − n μ(φᵀθ)) φ`. Its norm is the score residual.
pub fn score(samples: &SampleLog, link: &LinkFunction, theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; samples.dim()];
    for (phi, s, n) in samples.iter() {
        let w = s - n * link.mu(dot(phi, theta));
        g.iter_mut().zip(phi).for_each(|(gk, pk)| *gk += w * pk);
    }
    g
}

/// Closed-form estimate for the linear link: `θ = V⁻¹ Σ (s − n/2) φ`.
pub fn mle_linear(samples: &SampleLog) -> Result<Vec<f64>> {
    let v = samples.design_matrix();
    let mut b = vec![0.0; samples.dim()];
    for (phi, s, n) in samples.iter() {
        let w = s - 0.5 * n;
        b.iter_mut().zip(phi).for_each(|(bk, pk)| *bk += w * pk);
    }
    crate::linalg::solve_spd(&v, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Start at `1 / L_mu` and halve until the Armijo condition holds.
    Backtracking,
    /// Constant step along the preconditioned gradient.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub iterations: usize,
    pub step_rule: StepRule,
    /// Converged once `‖score‖ ≤ tolerance · n`.
    pub tolerance: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_rule: StepRule::Backtracking,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub theta: Vec<f64>,
    /// `‖Σ (n μ(φᵀθ) − s) φ‖` at the returned `theta`.
    pub residual: f64,
    pub iterations: usize,
    /// Log-likelihood after each accepted step, starting with the initial point.
    pub log_likelihoods: Vec<f64>,
}

/// Gradient ascent on the log-likelihood, preconditioned by the design matrix `V`
/// and started from `θ = 0`.
///
/// With the linear link the first unit step lands on the closed-form solution. On
/// failure to meet the residual tolerance the best iterate is returned inside
/// [`Error::NonConvergence`].
pub fn mle_glm(samples: &SampleLog, link: &LinkFunction, config: &MleConfig) -> Result<MleFit> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "MLE needs at least one sample".into(),
        ));
    }
    let dim = samples.dim();
    let n = samples.total_trials();
    let target = config.tolerance * n;
    let v = samples.design_matrix();

    let mut theta = vec![0.0; dim];
    let mut ll = log_likelihood(samples, link, &theta);
    let mut log_likelihoods = vec![ll];
    let mut grad = score(samples, link, &theta);
    let mut residual = norm(&grad);
    if v.trace() == 0.0 {
        // every feature is zero: the score vanishes identically
        return Ok(MleFit {
            theta,
            residual,
            iterations: 0,
            log_likelihoods,
        });
    }
    let chol = Cholesky::factor(&v)?;
    let mut iterations = 0;
    while residual > target && iterations < config.iterations {
        iterations += 1;
        let direction = chol.solve_ridged(&grad);
        let slope = dot(&grad, &direction);
        let (next, next_ll) = match config.step_rule {
            StepRule::Fixed(step) => {
                let cand = axpy(&theta, step, &direction);
                let cand_ll = log_likelihood(samples, link, &cand);
                (cand, cand_ll)
            }
            StepRule::Backtracking => {
                let mut step = 1.0 / link.l_mu();
                let mut accepted = None;
                for _ in 0..60 {
                    let cand = axpy(&theta, step, &direction);
                    let cand_ll = log_likelihood(samples, link, &cand);
                    if cand_ll >= ll + 1e-4 * step * slope {
                        accepted = Some((cand, cand_ll));
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some(a) => a,
                    // no ascent possible at working precision
                    None => break,
                }
            }
        };
        theta = next;
        ll = next_ll;
        log_likelihoods.push(ll);
        grad = score(samples, link, &theta);
        residual = norm(&grad);
    }
    let fit = MleFit {
        theta,
        residual,
        iterations,
        log_likelihoods,
    };
    if fit.residual <= target {
        Ok(fit)
    } else {
        Err(Error::NonConvergence {
            theta: fit.theta,
            residual: fit.residual,
            iterations: fit.iterations,
        })
    }
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

/// Best-effort estimate for a link: closed form for linear, [`mle_glm`] otherwise.
///
/// Returns the estimate and whether the solver met its tolerance.
pub fn fit_theta(
    samples: &SampleLog,
    link: &LinkFunction,
    config: &MleConfig,
) -> Result<(Vec<f64>, bool)> {
    match link.kind {
        LinkKind::Linear => mle_linear(samples).map(|t| (t, true)),
        LinkKind::Logistic => match mle_glm(samples, link, config) {
            Ok(fit) => Ok((fit.theta, true)),
            Err(Error::NonConvergence { theta, .. }) => Ok((theta, false)),
            Err(e) => Err(e),
        },
    }
}

/// `B̂(i) = (1/K) Σ_j μ(φ_ijᵀ θ̂)`, with probabilities clamped to `[0, 1]`.
pub fn estimate_borda(theta_hat: &[f64], features: &FeatureSet, link: &LinkFunction) -> Vec<f64> {
    assert_eq!(theta_hat.len(), features.dim(), "theta dimension mismatch");
    let k = features.num_items();
    let mut rows = vec![0.0; k];
    for i in 0..k {
        rows[i] += 0.5;
    }
    for (i, j) in features.upper_pairs() {
        let p = link.prob(dot(features.phi(i, j), theta_hat));
        rows[i] += p;
        rows[j] += 1.0 - p;
    }
    rows.iter_mut().for_each(|r| *r /= k as f64);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_log(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> SampleLog {
        let mut log = SampleLog::new(dim);
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = norm(&v).max(1.0);
            let phi: Vec<f64> = v.iter().map(|x| x / s).collect();
            let r = if rng.random::<f64>() < 0.5 + 0.3 * phi[0] {
                1.0
            } else {
                0.0
            };
            log.push(&phi, r).unwrap();
        }
        log
    }

    #[test]
    fn linear_scalar_example() {
        let mut log = SampleLog::new(1);
        for r in [1.0, 1.0, 0.0, 1.0] {
            log.push(&[0.5], r).unwrap();
        }
        let theta = mle_linear(&log).unwrap();
        assert!((theta[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn balanced_outcomes_give_zero() {
        let mut log = SampleLog::new(2);
        for phi in [[0.6, 0.0], [-0.6, 0.0], [0.0, 0.8], [0.0, -0.8]] {
            log.push(&phi, 1.0).unwrap();
            log.push(&phi, 0.0).unwrap();
        }
        let lin = mle_linear(&log).unwrap();
        assert!(norm(&lin) < 1e-12);
        let glm = mle_glm(&log, &LinkFunction::logistic(), &MleConfig::default()).unwrap();
        assert!(norm(&glm.theta) < 1e-6);
    }

    #[test]
    fn logistic_scalar_logit_oracle() {
        // r̄ = 0.731059 on φ = 1: the score equation gives θ̂ = logit(r̄)
        let rbar = 0.731059;
        let mut log = SampleLog::new(1);
        log.push_aggregated(&[1.0], rbar * 1000.0, 1000.0).unwrap();
        let config = MleConfig {
            tolerance: 1e-9,
            ..MleConfig::default()
        };
        let fit = mle_glm(&log, &LinkFunction::logistic(), &config).unwrap();
        let oracle = (rbar / (1.0 - rbar)).ln();
        assert!((fit.theta[0] - oracle).abs() < 1e-6);
        assert!((fit.theta[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn glm_matches_linear_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let log = random_log(&mut rng, 3, 200);
            let closed = mle_linear(&log).unwrap();
            let fit = mle_glm(&log, &LinkFunction::linear(), &MleConfig::default()).unwrap();
            let diff: Vec<f64> = closed.iter().zip(&fit.theta).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) <= 1e-6);
            assert!(fit.residual <= 1e-6 * log.total_trials());
        }
    }

    #[test]
    fn linear_consistency_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let theta_star = [0.1, -0.15, 0.05];
        let design = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.57735, 0.57735, 0.57735],
        ];
        let mut log = SampleLog::new(3);
        for k in 0..100_000 {
            let phi = &design[k % design.len()];
            let p = 0.5 + dot(phi, &theta_star);
            let r = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            log.push(phi, r).unwrap();
        }
        let est = mle_linear(&log).unwrap();
        let err: Vec<f64> = est.iter().zip(&theta_star).map(|(a, b)| a - b).collect();
        assert!(norm(&err) <= 0.05, "error {}", norm(&err));
    }

    #[test]
    fn backtracking_log_likelihood_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let log = random_log(&mut rng, 4, 500);
        let fit = mle_glm(&log, &LinkFunction::logistic(), &MleConfig::default()).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(fit.residual <= 1e-6 * log.total_trials());
    }

    #[test]
    fn separable_data_reports_nonconvergence() {
        let mut log = SampleLog::new(1);
        log.push(&[1.0], 1.0).unwrap();
        log.push(&[-1.0], 0.0).unwrap();
        let cfg = MleConfig {
            iterations: 10,
            ..MleConfig::default()
        };
        match mle_glm(&log, &LinkFunction::logistic(), &cfg) {
            Err(Error::NonConvergence {
                theta, iterations, ..
            }) => {
                assert_eq!(iterations, 10);
                assert!(theta[0] > 0.0);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn sample_log_validation() {
        let mut log = SampleLog::new(2);
        assert!(log.push(&[1.0], 1.0).is_err());
        assert!(log.push(&[1.0, 1.0], 1.0).is_err());
        assert!(log.push_aggregated(&[0.5, 0.0], 3.0, 2.0).is_err());
        assert!(mle_glm(&log, &LinkFunction::logistic(), &MleConfig::default()).is_err());
    }

    #[test]
    fn estimate_borda_at_zero() {
        let fs = FeatureSet::from_upper(4, 2, |i, j| vec![0.1 * i as f64, 0.2 * j as f64]).unwrap();
        for link in [LinkFunction::linear(), LinkFunction::logistic()] {
            let b = estimate_borda(&[0.0, 0.0], &fs, &link);
            assert!(b.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn estimate_borda_matches_row_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let fs = FeatureSet::from_upper(6, 3, |_, _| {
            (0..3).map(|_| rng.random_range(-0.5..0.5)).collect()
        })
        .unwrap();
        let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let link = LinkFunction::logistic();
        let b = estimate_borda(&theta, &fs, &link);
        for i in 0..6 {
            let oracle: f64 = (0..6)
                .map(|j| link.mu(dot(fs.phi(i, j), &theta)))
                .sum::<f64>()
                / 6.0;
            assert!((b[i] - oracle).abs() < 1e-12);
        }
        assert!((b.iter().sum::<f64>() / 6.0 - 0.5).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest};

        proptest! {
            #[test]
            fn gradient_matches_finite_differences(seed in any::<u64>(), logistic in any::<bool>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let log = random_log(&mut rng, 3, 40);
                let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let link = if logistic { LinkFunction::logistic() } else { LinkFunction::linear() };
                let g = score(&log, &link, &theta);
                let h = 1e-5;
                for k in 0..3 {
                    let mut plus = theta.clone();
                    let mut minus = theta.clone();
                    plus[k] += h;
                    minus[k] -= h;
                    let fd = (log_likelihood(&log, &link, &plus) - log_likelihood(&log, &link, &minus)) / (2.0 * h);
                    prop_assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0));
                }
            }

            #[test]
            fn estimate_borda_mean_half(seed in any::<u64>(), k in 2usize..10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let fs = FeatureSet::from_upper(k, 2, |_, _| {
                    (0..2).map(|_| rng.random_range(-0.7..0.7)).collect()
                }).unwrap();
                let theta: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                for link in [LinkFunction::linear(), LinkFunction::logistic()] {
                    let b = estimate_borda(&theta, &fs, &link);
                    prop_assert!((b.iter().sum::<f64>() / k as f64 - 0.5).abs() <= 1e-12);
                    prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
