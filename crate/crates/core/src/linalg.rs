//! Small dense symmetric linear algebra.
//!
//! Everything here works on row-major `Vec<f64>` storage and targets the
//! dimensions that show up in pairwise-feature models (a handful up to a few
//! dozen). Solves go through a ridge-stabilised Cholesky factorization and
//! eigenvalues through cyclic Jacobi rotations, so results are deterministic
//! bit-for-bit across runs.

use crate::error::{Error, Result};

/// Relative ridge added to the diagonal before factorizing: `rho = RIDGE_SCALE * trace(A) / dim`.
pub const RIDGE_SCALE: f64 = 1e-10;

/// A dense symmetric matrix stored in full (both triangles kept equal).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix needs dim >= 1");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for a in 0..dim {
            m.data[a * dim + a] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (a, &v) in diag.iter().enumerate() {
            m.data[a * m.dim + a] = v;
        }
        m
    }

    /// Builds a matrix from rows; the rows must form an exactly symmetric square matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("empty matrix".into()));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        for a in 0..dim {
            for b in (a + 1)..dim {
                if data[a * dim + b] != data[b * dim + a] {
                    return Err(Error::InvalidArgument(format!(
                        "matrix not symmetric at ({a},{b})"
                    )));
                }
            }
        }
        Ok(Self { dim, data })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.dim + b]
    }

    /// Sets both `(a, b)` and `(b, a)`.
    pub fn set(&mut self, a: usize, b: usize, value: f64) {
        self.data[a * self.dim + b] = value;
        self.data[b * self.dim + a] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|a| self.get(a, a)).sum()
    }

    /// `self += weight * x xᵀ`.
    pub fn add_outer(&mut self, weight: f64, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let n = self.dim;
        for a in 0..n {
            let wa = weight * x[a];
            if wa == 0.0 {
                continue;
            }
            for b in a..n {
                self.data[a * n + b] += wa * x[b];
            }
        }
        self.mirror_upper();
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.dim)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// Accumulates into the upper triangle only; call [`Self::mirror_upper`] afterwards.
    pub(crate) fn upper_add(&mut self, a: usize, b: usize, value: f64) {
        self.data[a * self.dim + b] += value;
    }

    pub(crate) fn mirror_upper(&mut self) {
        let n = self.dim;
        for a in 0..n {
            for b in (a + 1)..n {
                self.data[b * n + a] = self.data[a * n + b];
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cholesky factor `L` of `A + rho I`, with `rho = RIDGE_SCALE * trace(A) / dim`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
    ridge: f64,
}

impl Cholesky {
    pub fn factor(a: &SymMatrix) -> Result<Self> {
        let n = a.dim;
        let ridge = (RIDGE_SCALE * a.trace() / n as f64).max(0.0);
        let mut lower = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..=row {
                let mut sum = a.get(row, col);
                if row == col {
                    sum += ridge;
                }
                for k in 0..col {
                    sum -= lower[row * n + k] * lower[col * n + k];
                }
                if row == col {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::SingularMatrix { row, pivot: sum });
                    }
                    lower[row * n + row] = sum.sqrt();
                } else {
                    lower[row * n + col] = sum / lower[col * n + col];
                }
            }
        }
        Ok(Self {
            dim: n,
            lower,
            ridge,
        })
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Solves `(A + rho I) x = b`.
    pub fn solve_ridged(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let l = &self.lower;
        let mut y = b.to_vec();
        for row in 0..n {
            let mut s = y[row];
            for k in 0..row {
                s -= l[row * n + k] * y[k];
            }
            y[row] = s / l[row * n + row];
        }
        for row in (0..n).rev() {
            let mut s = y[row];
            for k in (row + 1)..n {
                s -= l[k * n + row] * y[k];
            }
            y[row] = s / l[row * n + row];
        }
        y
    }

    /// Solves `A x = b` using the ridged factor plus one step of iterative refinement
    /// against the unregularized `a` (which must be the matrix this factor came from).
    pub fn solve(&self, a: &SymMatrix, b: &[f64]) -> Vec<f64> {
        let mut x = self.solve_ridged(b);
        if self.ridge > 0.0 {
            let ax = a.mul_vec(&x);
            let residual: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let correction = self.solve_ridged(&residual);
            x.iter_mut().zip(&correction).for_each(|(xi, ci)| *xi += ci);
        }
        x
    }
}

/// Solves `A x = b` for symmetric positive (semi)definite `A`.
pub fn solve_spd(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            actual: b.len(),
        });
    }
    let chol = Cholesky::factor(a)?;
    Ok(chol.solve(a, b))
}

/// `xᵀ A⁻¹ x`.
pub fn weighted_norm_sq(x: &[f64], a: &SymMatrix) -> Result<f64> {
    let y = solve_spd(a, x)?;
    Ok(dot(x, &y).max(0.0))
}

/// All eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(a: &SymMatrix) -> Vec<f64> {
    let n = a.dim;
    let mut m = a.data.clone();
    let frob: f64 = m.iter().map(|v| v * v).sum();
    if frob == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q] * m[p * n + q])
            .sum();
        if off <= 1e-32 * frob {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|a| m[a * n + a]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

pub fn min_eigenvalue(a: &SymMatrix) -> f64 {
    symmetric_eigenvalues(a)[0]
}

/// Singular values (descending) of the matrix whose rows are `rows`, each of length `ncols`.
///
/// One-sided Jacobi on the columns; accurate for small singular values, unlike
/// eigenvalues of the Gram matrix.
pub fn singular_values<'a, I>(rows: I, ncols: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); ncols];
    for row in rows {
        debug_assert_eq!(row.len(), ncols);
        for (c, &v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..ncols {
            for q in (p + 1)..ncols {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank: number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank<'a, I>(rows: I, ncols: usize, rel_tol: f64) -> usize
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let sv = singular_values(rows, ncols);
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}
