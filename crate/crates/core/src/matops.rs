//! Dense linear-algebra kernels: the symmetric-definite generalized
//! eigensolver, positive-definite square roots, orthogonal complements and
//! the Kronecker / vec / commutation operators.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used for positive-definiteness checks, scaled by the
/// largest diagonal entry.
pub const DEFAULT_PD_TOL: f64 = 1e-12;

/// Solution of `M g = λ N g` with `Gᵀ N G = I`.
///
/// `values` are sorted in descending order; column `i` of `vectors` belongs
/// to `values[i]`. Eigenvectors are only defined up to sign; each column is
/// flipped so its first entry of largest magnitude is positive. Tied
/// eigenvalues keep the solver's internal order, so callers should only rely
/// on projector sums over a tied block.
#[derive(Debug, Clone, PartialEq)]
pub struct GenEig {
    pub values: Vector,
    pub vectors: Mat,
}

impl GenEig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `G^{:k} (G^{:k})ᵀ`.
    pub fn leading_projector(&self, k: usize) -> Mat {
        let g = self.vectors.columns(0, k);
        g * g.transpose()
    }

    /// `Σ_i w_i g_i g_iᵀ`.
    pub fn weighted_projector(&self, weights: &[f64]) -> Mat {
        let p = self.vectors.nrows();
        let mut out = Mat::zeros(p, p);
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                let g = self.vectors.column(i);
                out.ger(w, &g, &g, 1.0);
            }
        }
        out
    }
}

fn check_square(a: &Mat, name: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dims(format!("{name} must be square, got {}x{}", a.nrows(), a.ncols())));
    }
    Ok(())
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

fn max_abs_diag(a: &Mat) -> f64 {
    a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Cholesky factor of a symmetric positive definite matrix, rejecting
/// matrices whose pivots fall below `DEFAULT_PD_TOL × max diag`.
pub fn cholesky(a: &Mat) -> Result<Cholesky<f64, Dyn>> {
    check_square(a, "cholesky input")?;
    let scale = max_abs_diag(a);
    if a.nrows() > 0 && !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let chol = Cholesky::new(symmetrize(a)).ok_or(Error::NotPositiveDefinite)?;
    let tol = DEFAULT_PD_TOL * scale;
    if chol.l_dirty().diagonal().iter().any(|&d| d * d <= tol) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(chol)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &Mat) -> Result<Mat> {
    Ok(symmetrize(&cholesky(a)?.inverse()))
}

/// Inverse of a general square matrix via LU.
pub fn inverse(a: &Mat) -> Result<Mat> {
    check_square(a, "inverse input")?;
    if a.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    a.clone().lu().try_inverse().ok_or(Error::RankDeficient)
}

fn fix_sign(v: &mut Mat) {
    for mut col in v.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs: f64 = -1.0;
        for (i, x) in col.iter().enumerate() {
            // near-ties keep the first entry so the choice is stable
            if x.abs() > best_abs * (1.0 + 1e-12) {
                best = i;
                best_abs = x.abs();
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue, with the
/// sign convention of [`GenEig`].
pub fn sym_eig(a: &Mat) -> Result<GenEig> {
    check_square(a, "sym_eig input")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(GenEig { values: Vector::zeros(0), vectors: Mat::zeros(0, 0) });
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    // stable: tied values keep the solver order
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = eig.eigenvectors.select_columns(order.iter());
    fix_sign(&mut vectors);
    Ok(GenEig { values, vectors })
}

/// Generalized symmetric-definite eigenproblem `M G = N G Λ`, `Gᵀ N G = I`.
///
/// Solved by whitening: with `N = L Lᵀ` the symmetric matrix
/// `L⁻¹ M L⁻ᵀ` is diagonalized and its eigenvectors mapped back by `L⁻ᵀ`.
pub fn gsym_eig(m: &Mat, n: &Mat) -> Result<GenEig> {
    check_square(m, "M")?;
    check_square(n, "N")?;
    if m.nrows() != n.nrows() {
        return Err(Error::dims(format!("M is {}x{}, N is {}x{}", m.nrows(), m.ncols(), n.nrows(), n.ncols())));
    }
    let p = m.nrows();
    if p == 0 {
        return Ok(GenEig { values: Vector::zeros(0), vectors: Mat::zeros(0, 0) });
    }
    let chol = cholesky(n)?;
    let l = chol.l();
    let ms = symmetrize(m);
    let linv_m = l.solve_lower_triangular(&ms).ok_or(Error::NotPositiveDefinite)?;
    let whitened = l.solve_lower_triangular(&linv_m.transpose()).ok_or(Error::NotPositiveDefinite)?;
    let inner = sym_eig(&whitened)?;
    let mut vectors = l.transpose().solve_upper_triangular(&inner.vectors).ok_or(Error::NotPositiveDefinite)?;
    fix_sign(&mut vectors);
    Ok(GenEig { values: inner.values, vectors })
}

/// The unique symmetric positive definite `S` with `S S = A`.
pub fn pd_sqrt(a: &Mat) -> Result<Mat> {
    let eig = sym_eig(a)?;
    let n = a.nrows();
    let scale = max_abs_diag(a);
    if n > 0 && eig.values.iter().any(|&v| !(v > DEFAULT_PD_TOL * scale)) {
        return Err(Error::NotPositiveDefinite);
    }
    let root = eig.values.map(f64::sqrt);
    let scaled = &eig.vectors * Mat::from_diagonal(&root);
    Ok(symmetrize(&(scaled * eig.vectors.transpose())))
}

/// Orthonormal basis of `span(A)^⊥` for an `n × m` matrix of full column
/// rank.
///
/// Built by pivoted Gram–Schmidt on the standard basis after projecting out
/// `span(A)`, so coordinate subspaces yield coordinate complements.
pub fn orth_complement(a: &Mat) -> Result<Mat> {
    let (n, m) = a.shape();
    if m > n {
        return Err(Error::RankDeficient);
    }
    if m == 0 {
        return Ok(Mat::identity(n, n));
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smin <= 1e-10 * smax {
        return Err(Error::RankDeficient);
    }
    // orthonormal basis of span(A)
    let qa = a.clone().qr().q();
    let mut basis: Vec<Vector> = qa.column_iter().map(|c| c.into_owned()).collect();
    let project_out = |v: &mut Vector, basis: &[Vector]| {
        for _ in 0..2 {
            for b in basis {
                let c = b.dot(v);
                v.axpy(-c, b, 1.0);
            }
        }
    };
    let mut candidates: Vec<Vector> = (0..n)
        .map(|j| {
            let mut e = Vector::zeros(n);
            e[j] = 1.0;
            project_out(&mut e, &basis);
            e
        })
        .collect();
    let mut out = Vec::with_capacity(n - m);
    for _ in 0..(n - m) {
        let mut best = 0;
        let mut best_norm = -1.0;
        for (j, c) in candidates.iter().enumerate() {
            let nrm = c.norm();
            if nrm > best_norm * (1.0 + 1e-12) {
                best = j;
                best_norm = nrm;
            }
        }
        let v = candidates[best].clone() / best_norm;
        basis.push(v.clone());
        out.push(v);
        for c in candidates.iter_mut() {
            project_out(c, &basis[basis.len() - 1..]);
        }
        candidates[best].fill(0.0);
    }
    if out.is_empty() {
        return Ok(Mat::zeros(n, 0));
    }
    Ok(Mat::from_columns(&out))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec(a: &Mat) -> Vector {
    Vector::from_column_slice(a.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::dims(format!("vector of length {} cannot be {rows}x{cols}", v.len())));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

/// Index permutation of the commutation matrix: `vec(Aᵀ)[perm[i]] = vec(A)[i]`
/// for `A` of shape `k × l`.
pub fn commutation_perm(k: usize, l: usize) -> Vec<usize> {
    let mut perm = vec![0; k * l];
    for i in 0..k {
        for j in 0..l {
            perm[i + j * k] = j + i * l;
        }
    }
    perm
}

/// `kl × kl` commutation matrix `K` with `K vec(A) = vec(Aᵀ)` for `k × l` `A`.
pub fn commutation_matrix(k: usize, l: usize) -> Result<Mat> {
    if k == 0 || l == 0 {
        return Err(Error::dims("commutation matrix needs positive dimensions"));
    }
    let mut out = Mat::zeros(k * l, k * l);
    for (src, dst) in commutation_perm(k, l).into_iter().enumerate() {
        out[(dst, src)] = 1.0;
    }
    Ok(out)
}

/// `K_{(k,k)} A` without forming `K`.
pub fn commute_rows(a: &Mat, k: usize) -> Mat {
    let perm = commutation_perm(k, k);
    let mut out = Mat::zeros(a.nrows(), a.ncols());
    for (src, &dst) in perm.iter().enumerate() {
        out.row_mut(dst).copy_from(&a.row(src));
    }
    out
}

/// Eigenvalues of a real square matrix as `(re, im)` pairs.
///
/// The QR iteration is capped. When it stalls, the transpose and a
/// reflected similarity transform are tried before giving up.
pub fn complex_eigenvalues(a: &Mat) -> Result<Vec<(f64, f64)>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NoConvergence("eigenvalues of a non-finite matrix"));
    }
    let max_iter = 1000 * n;
    let v = Vector::from_element(n, 1.0 / (n as f64).sqrt());
    let h = Mat::identity(n, n) - &v * v.transpose() * 2.0;
    for m in [a.clone(), a.transpose(), &h * a * &h] {
        if let Some(s) = Schur::try_new(m, f64::EPSILON, max_iter) {
            return Ok(s.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect());
        }
    }
    Err(Error::NoConvergence("real Schur decomposition"))
}

pub fn spectral_radius(a: &Mat) -> Result<f64> {
    Ok(complex_eigenvalues(a)?.into_iter().map(|(re, im)| re.hypot(im)).fold(0.0, f64::max))
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
