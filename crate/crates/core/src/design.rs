//! G-optimal experimental design over the pairwise feature set.
//!
//! The design is searched over ordered pairs `(i, j)` with `i < j` and nonzero
//! feature: `(j, i)` carries the same outer product, and zero features carry no
//! information, so neither changes `V(π)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, SymMatrix};
use crate::model::FeatureSet;

/// Weights below this are dropped from a Frank-Wolfe design before renormalizing.
pub const PRUNE_THRESHOLD: f64 = 1e-7;

pub type Pair = (usize, usize);

/// A probability distribution over item pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    weights: BTreeMap<Pair, f64>,
}

impl Design {
    /// Validates nonnegativity and that weights sum to 1 within `1e-9`. Zero weights are dropped.
    pub fn from_weights(weights: impl IntoIterator<Item = (Pair, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (pair, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "design weight {w} for {pair:?} is not a nonnegative number"
                )));
            }
            if w > 0.0 {
                *map.entry(pair).or_insert(0.0) += w;
            }
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "design weights sum to {total}, not 1"
            )));
        }
        Ok(Self { weights: map })
    }

    pub fn point_mass(pair: Pair) -> Self {
        Self {
            weights: BTreeMap::from([(pair, 1.0)]),
        }
    }

    pub fn uniform(pairs: &[Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "uniform design over no pairs".into(),
            ));
        }
        let w = 1.0 / pairs.len() as f64;
        Self::from_weights(pairs.iter().map(|&p| (p, w)))
    }

    pub fn weight(&self, pair: Pair) -> f64 {
        self.weights.get(&pair).copied().unwrap_or(0.0)
    }

    /// Pairs with positive weight, lexicographic.
    pub fn support(&self) -> impl Iterator<Item = (Pair, f64)> + '_ {
        self.weights.iter().map(|(&p, &w)| (p, w))
    }

    pub fn support_size(&self) -> usize {
        self.weights.len()
    }
}

/// `V(π) = Σ π(i,j) φ_ij φ_ijᵀ`.
pub fn info_matrix(design: &Design, features: &FeatureSet) -> SymMatrix {
    let mut v = SymMatrix::zeros(features.dim());
    for ((i, j), w) in design.support() {
        v.add_outer(w, features.phi(i, j));
    }
    v
}

fn nonzero_pairs(features: &FeatureSet) -> Vec<Pair> {
    features
        .upper_pairs()
        .filter(|&(i, j)| features.phi(i, j).iter().any(|&x| x != 0.0))
        .collect()
}

fn max_weighted_norm(
    v: &SymMatrix,
    features: &FeatureSet,
    candidates: &[Pair],
) -> Result<(usize, f64)> {
    let chol = Cholesky::factor(v)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (idx, &(i, j)) in candidates.iter().enumerate() {
        let phi = features.phi(i, j);
        let g = dot(phi, &chol.solve(v, phi));
        if g > best.1 {
            best = (idx, g);
        }
    }
    Ok(best)
}

/// `g(π) = max_{i,j} ‖φ_ij‖²_{V(π)⁻¹}` over pairs with nonzero feature.
pub fn g_value(design: &Design, features: &FeatureSet) -> Result<f64> {
    let candidates = nonzero_pairs(features);
    if candidates.is_empty() {
        return Err(Error::DegenerateFeatures);
    }
    let v = info_matrix(design, features);
    max_weighted_norm(&v, features, &candidates).map(|(_, g)| g)
}

/// Frank-Wolfe for the G-optimal design, started from the uniform design over
/// nonzero pairs and run for `iterations` steps.
///
/// Each step moves mass toward the pair with the largest squared weighted norm
/// `g_r` using `γ_r = (g_r/d − 1)/(g_r − 1)`, where `d` is the rank of the feature
/// span. This is the exact line-search step for `log det V(π)`; it is zero at the
/// optimum `g_r = d`, where the iteration stops early. (The variant
/// `(g_r − 1/d)/(g_r − 1)` on unsquared norms exceeds 1 near the optimum and is
/// not used.)
///
/// The line search increases `log det V(π)` at every step but `g` itself can rise
/// after a step, so the iterate with the smallest `g` is returned (latest on ties).
pub fn frank_wolfe_design(features: &FeatureSet, iterations: usize) -> Result<Design> {
    frank_wolfe_with_history(features, iterations).map(|(d, _)| d)
}

/// Like [`frank_wolfe_design`] but also returns `g(π_r)` for every iterate
/// `π_1, …, π_{R+1}` (fewer on early stop).
pub fn frank_wolfe_with_history(
    features: &FeatureSet,
    iterations: usize,
) -> Result<(Design, Vec<f64>)> {
    let candidates = nonzero_pairs(features);
    if candidates.is_empty() {
        return Err(Error::DegenerateFeatures);
    }
    let d_eff = features.effective_dim() as f64;
    let mut weights = vec![1.0 / candidates.len() as f64; candidates.len()];
    let mut history = Vec::with_capacity(iterations + 1);

    let build_v = |weights: &[f64]| {
        let mut v = SymMatrix::zeros(features.dim());
        for (&(i, j), &w) in candidates.iter().zip(weights) {
            if w > 0.0 {
                v.add_outer(w, features.phi(i, j));
            }
        }
        v
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..=iterations {
        let v = build_v(&weights);
        let (star, g) = max_weighted_norm(&v, features, &candidates)?;
        history.push(g);
        if best.as_ref().is_none_or(|(b, _)| g <= *b) {
            best = Some((g, weights.clone()));
        }
        let step = if g > 1.0 {
            (g / d_eff - 1.0) / (g - 1.0)
        } else {
            0.0
        };
        if r == iterations || !(step > 0.0) {
            break;
        }
        let step = step.min(1.0);
        weights.iter_mut().for_each(|w| *w *= 1.0 - step);
        weights[star] += step;
    }
    let (_, weights) = best.expect("at least one iterate");

    let kept: Vec<(Pair, f64)> = candidates
        .iter()
        .zip(&weights)
        .filter(|(_, &w)| w >= PRUNE_THRESHOLD)
        .map(|(&p, &w)| (p, w))
        .collect();
    let total: f64 = kept.iter().map(|(_, w)| w).sum();
    let design = Design {
        weights: kept.into_iter().map(|(p, w)| (p, w / total)).collect(),
    };
    Ok((design, history))
}

/// Sample counts `N(i,j) = ⌈d π(i,j) / ε²⌉` for every support pair.
pub fn allocation(design: &Design, d_eff: usize, epsilon: f64) -> BTreeMap<Pair, u64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let scale = d_eff as f64 / (epsilon * epsilon);
    design
        .support()
        .map(|(p, w)| (p, (scale * w).ceil().max(1.0) as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, SymMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// K = d + 1 items where pair (0, k) has feature e_k and all other pairs are zero.
    fn basis_features(d: usize) -> FeatureSet {
        FeatureSet::from_upper(d + 1, d, |i, j| {
            let mut v = vec![0.0; d];
            if i == 0 {
                v[j - 1] = 1.0;
            }
            v
        })
        .unwrap()
    }

    fn random_features(k: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
        FeatureSet::from_upper(k, d, |_, _| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = crate::linalg::norm(&v).max(1.0);
            v.into_iter().map(|x| x / n).collect()
        })
        .unwrap()
    }

    fn explicit_inverse_g(design: &Design, fs: &FeatureSet) -> f64 {
        // Gauss-Jordan inverse, used as an oracle independent of the Cholesky path
        let v = info_matrix(design, fs);
        let n = v.dim();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row: Vec<f64> = (0..n).map(|c| v.get(r, c)).collect();
                row.extend((0..n).map(|c| if c == r { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            a[col].iter_mut().for_each(|x| *x /= p);
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    let src = a[col].clone();
                    a[r].iter_mut().zip(&src).for_each(|(x, s)| *x -= f * s);
                }
            }
        }
        let mut best: f64 = 0.0;
        for (i, j) in fs.upper_pairs() {
            let phi = fs.phi(i, j);
            let mut q = 0.0;
            for r in 0..n {
                for c in 0..n {
                    q += phi[r] * a[r][n + c] * phi[c];
                }
            }
            best = best.max(q);
        }
        best
    }

    #[test]
    fn info_matrix_examples() {
        let fs = basis_features(2);
        let v = info_matrix(&Design::point_mass((0, 1)), &fs);
        assert_eq!(
            v,
            SymMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()
        );
        let fs = basis_features(3);
        let v = info_matrix(&Design::uniform(&[(0, 1), (0, 2), (0, 3)]).unwrap(), &fs);
        for a in 0..3 {
            for b in 0..3 {
                let expected = if a == b { 1.0 / 3.0 } else { 0.0 };
                assert!((v.get(a, b) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn info_matrix_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = random_features(6, 3, &mut rng);
        let pairs: Vec<Pair> = fs.upper_pairs().collect();
        let raw: Vec<f64> = pairs.iter().map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let design =
            Design::from_weights(pairs.iter().zip(&raw).map(|(&p, &w)| (p, w / total))).unwrap();
        let v = info_matrix(&design, &fs);
        let oracle: f64 = design
            .support()
            .map(|((i, j), w)| w * dot(fs.phi(i, j), fs.phi(i, j)))
            .sum();
        assert!((v.trace() - oracle).abs() < 1e-12);
    }

    #[test]
    fn g_value_examples() {
        let fs = basis_features(4);
        let uniform = Design::uniform(&[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        assert!((g_value(&uniform, &fs).unwrap() - 4.0).abs() < 1e-9);

        let fs = FeatureSet::from_upper(2, 2, |_, _| vec![1.0, 0.0]).unwrap();
        let g = g_value(&Design::point_mass((0, 1)), &fs).unwrap();
        assert!((g - 1.0).abs() < 1e-6);
    }

    #[test]
    fn g_value_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in 1..=4 {
            let fs = random_features(5, d, &mut rng);
            let pairs: Vec<Pair> = fs.upper_pairs().collect();
            let raw: Vec<f64> = pairs.iter().map(|_| rng.random::<f64>() + 0.1).collect();
            let total: f64 = raw.iter().sum();
            let design =
                Design::from_weights(pairs.iter().zip(&raw).map(|(&p, &w)| (p, w / total)))
                    .unwrap();
            let got = g_value(&design, &fs).unwrap();
            let oracle = explicit_inverse_g(&design, &fs);
            assert!((got - oracle).abs() <= 1e-8 * oracle, "{got} vs {oracle}");
        }
    }

    #[test]
    fn degenerate_features_rejected() {
        let fs = FeatureSet::from_upper(3, 2, |_, _| vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            frank_wolfe_design(&fs, 5),
            Err(Error::DegenerateFeatures)
        ));
        assert!(matches!(
            g_value(&Design::point_mass((0, 1)), &fs),
            Err(Error::DegenerateFeatures)
        ));
    }

    #[test]
    fn fw_one_dimensional_span() {
        // only ±e1 features in an ambient 2-d space
        let fs = FeatureSet::from_upper(3, 2, |i, _| {
            if i == 0 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 0.0]
            }
        })
        .unwrap();
        assert_eq!(fs.effective_dim(), 1);
        let design = frank_wolfe_design(&fs, 20).unwrap();
        assert!((g_value(&design, &fs).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn fw_basis_reaches_dimension() {
        let fs = basis_features(3);
        let design = frank_wolfe_design(&fs, 50).unwrap();
        assert!(g_value(&design, &fs).unwrap() <= 3.0 * 1.01);
        let total: f64 = design.support().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fw_hard_instance_twenty_iterations() {
        let spec = crate::instances::HardInstanceSpec::new(3, 1.0 / 32.0, vec![1, -1, 1]).unwrap();
        let env = crate::instances::make_hard_instance(&spec).unwrap();
        let fs = env.features();
        let rows: Vec<&[f64]> = fs.upper_pairs().map(|(i, j)| fs.phi(i, j)).collect();
        let d_eff = numerical_rank(rows, fs.dim(), 1e-9);
        assert_eq!(d_eff, 4);
        let design = frank_wolfe_design(fs, 20).unwrap();
        assert!(g_value(&design, fs).unwrap() <= 1.05 * d_eff as f64);
    }

    #[test]
    fn fw_returns_best_iterate_and_is_monotone_in_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sets = vec![basis_features(3), basis_features(5)];
        for _ in 0..10 {
            let k = rng.random_range(4..15);
            let d = rng.random_range(2..6);
            sets.push(random_features(k, d, &mut rng));
        }
        for fs in &sets {
            let (design, history) = frank_wolfe_with_history(fs, 80).unwrap();
            let best = history.iter().copied().fold(f64::INFINITY, f64::min);
            let got = g_value(&design, fs).unwrap();
            assert!((got - best).abs() <= 1e-6 * best, "{got} vs {best}");
            assert!(best >= fs.effective_dim() as f64 - 1e-9);
            let g: Vec<f64> = [5, 20, 80]
                .iter()
                .map(|&r| g_value(&frank_wolfe_design(fs, r).unwrap(), fs).unwrap())
                .collect();
            assert!(g[1] <= g[0] + 1e-9 && g[2] <= g[1] + 1e-9, "{g:?}");
        }
    }

    #[test]
    fn fw_log_det_increases_every_step() {
        // rebuild the iterates from the step rule and check the objective it line-searches
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fs = random_features(4, 2, &mut rng);
        let pairs: Vec<Pair> = fs.upper_pairs().collect();
        let mut w = vec![1.0 / pairs.len() as f64; pairs.len()];
        let log_det = |w: &[f64]| {
            let design =
                Design::from_weights(pairs.iter().copied().zip(w.iter().copied())).unwrap();
            crate::linalg::symmetric_eigenvalues(&info_matrix(&design, &fs))
                .iter()
                .map(|x| x.ln())
                .sum::<f64>()
        };
        let mut prev = log_det(&w);
        for _ in 0..30 {
            let design =
                Design::from_weights(pairs.iter().copied().zip(w.iter().copied())).unwrap();
            let v = info_matrix(&design, &fs);
            let (star, g) = max_weighted_norm(&v, &fs, &pairs).unwrap();
            let step = (g / 2.0 - 1.0) / (g - 1.0);
            if step <= 0.0 {
                break;
            }
            w.iter_mut().for_each(|x| *x *= 1.0 - step);
            w[star] += step;
            let next = log_det(&w);
            assert!(next >= prev - 1e-12, "{prev} -> {next}");
            prev = next;
        }
    }

    #[test]
    fn allocation_examples() {
        let design = Design::from_weights([((0, 1), 0.2), ((0, 2), 0.8)]).unwrap();
        let n = allocation(&design, 5, 0.1);
        assert_eq!(n[&(0, 1)], 100);
        assert!(!n.contains_key(&(1, 2)));

        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let raw = [0.3, 0.25, 0.2, 0.1, 0.1, 0.05];
        let design = Design::from_weights(pairs.iter().copied().zip(raw)).unwrap();
        let n = allocation(&design, 3, 0.5);
        let total: u64 = n.values().sum();
        assert!(total <= 3 * 4 / 2 + 12, "total {total}");
        assert!(n.values().all(|&c| c >= 1));
    }

    #[test]
    fn design_validation() {
        assert!(Design::from_weights([((0, 1), 0.5)]).is_err());
        assert!(Design::from_weights([((0, 1), 1.5), ((0, 2), -0.5)]).is_err());
        let d = Design::from_weights([((0, 1), 0.5), ((0, 2), 0.5), ((1, 2), 0.0)]).unwrap();
        assert_eq!(d.support_size(), 2);
    }
}
