//! Closed-form asymptotic covariances for the reduced rank estimators.
//!
//! Everything is in Q-coordinates with `X̃_t = (ΔX_tᵀ, X_{1,t−1}ᵀ)ᵀ`, a
//! stationary linear process in `p + r` dimensions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::WeightVector;
use crate::matops::{self, Mat, Vector};
use crate::model::{self, PopulationEig, PopulationMoments, VecmParams};

/// Truncation tolerance used when none is given.
pub const DEFAULT_TRUNC_TOL: f64 = 1e-12;
/// Minimum gap between population eigenvalues, relative to `λ₁`.
pub const DEFAULT_GAP_TOL: f64 = 1e-8;
const MAX_HORIZON: usize = 100_000;

/// `X̃_t = Σ_s Ψ_s U_{t−s}`, truncated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaCoefficients {
    /// `Ψ_0, …, Ψ_S`, each `(p + r) × p`.
    #[serde(with = "crate::serde_mat::list")]
    pub psi: Vec<Mat>,
    /// Estimate of `Σ_{s>S} ‖Ψ_s‖_F`.
    pub trunc_error: f64,
}

/// Pieces of the state-space form `X̃_t = H X_{1,t−1} + Ψ_0 U_t`,
/// `X_{1,t} = A X_{1,t−1} + E₁U_t`.
struct StateSpace {
    /// `I + βᵀα`.
    a: Mat,
    /// `(βᵀα; 0; I_r)`.
    h: Mat,
    psi0: Mat,
    mom: PopulationMoments,
}

impl StateSpace {
    fn new(params: &VecmParams) -> Result<Self> {
        let mom = model::population_moments(params)?;
        let (p, r) = (mom.p(), mom.r());
        let a = Mat::identity(r, r) + &mom.c;
        let mut h = Mat::zeros(p + r, r);
        h.rows_mut(0, r).copy_from(&mom.c);
        h.rows_mut(p, r).copy_from(&Mat::identity(r, r));
        let psi0 = Mat::identity(p + r, p);
        Ok(StateSpace { a, h, psi0, mom })
    }

    fn p(&self) -> usize {
        self.mom.p()
    }

    fn r(&self) -> usize {
        self.mom.r()
    }

    fn rho(&self) -> Result<f64> {
        matops::spectral_radius(&self.a)
    }

    /// `Ψ_s = H A^{s−1} E₁` for `s ≥ 1`, given `A^{s−1}`.
    fn psi_from_power(&self, a_pow: &Mat) -> Mat {
        let mut out = Mat::zeros(self.p() + self.r(), self.p());
        out.columns_mut(0, self.r()).copy_from(&(&self.h * a_pow));
        out
    }

    /// `L = H Σ_X^{11} Aᵀ + Ψ_0 Σ_U E₁ᵀ`, so that `γ_k = L (Aᵀ)^{k−1} Hᵀ`
    /// for `k ≥ 1`.
    fn lag_factor(&self) -> Mat {
        let r = self.r();
        &self.h * &self.mom.sigma_x11 * self.a.transpose() + &self.psi0 * self.mom.sigma_u.columns(0, r)
    }
}

fn horizon(rho: f64, tol: f64) -> usize {
    if rho <= 0.0 {
        return 1;
    }
    ((tol.ln() / rho.ln()).ceil().max(1.0) as usize).min(MAX_HORIZON)
}

/// Geometric tail estimate from the last term and a decay rate.
fn geometric_tail(last: f64, rate: f64) -> f64 {
    let rate = rate.min(1.0 - 1e-12);
    last * rate / (1.0 - rate)
}

pub fn ma_coefficients(params: &VecmParams, trunc_tol: f64) -> Result<MaCoefficients> {
    let ss = StateSpace::new(params)?;
    let rho = ss.rho()?;
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let mut psi = vec![ss.psi0.clone()];
    let scale = ss.psi0.norm();
    let min_s = horizon(rho, trunc_tol);
    let mut a_pow = Mat::identity(ss.r(), ss.r());
    let mut last = f64::INFINITY;
    for s in 1..=MAX_HORIZON {
        let ps = ss.psi_from_power(&a_pow);
        last = ps.norm();
        psi.push(ps);
        if s >= min_s && last <= trunc_tol * scale {
            break;
        }
        a_pow = &ss.a * a_pow;
    }
    Ok(MaCoefficients { psi, trunc_error: geometric_tail(last, rho) })
}

/// `γ_k = E(X̃_0 X̃_kᵀ)`, with `γ_{−k} = γ_kᵀ`.
pub fn acov_xtilde(params: &VecmParams, k: i64) -> Result<Mat> {
    let ss = StateSpace::new(params)?;
    let g = acov_from(&ss, k.unsigned_abs() as usize);
    Ok(if k < 0 { g.transpose() } else { g })
}

fn acov_from(ss: &StateSpace, k: usize) -> Mat {
    if k == 0 {
        return ss.mom.sigma_xtilde();
    }
    let at = ss.a.transpose();
    let mut pow = Mat::identity(ss.r(), ss.r());
    for _ in 1..k {
        pow = &pow * &at;
    }
    ss.lag_factor() * pow * ss.h.transpose()
}

/// `out += a ⊗ b`.
fn kron_add(out: &mut Mat, a: &Mat, b: &Mat) {
    let (br, bc) = b.shape();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            let mut view = out.view_mut((i * br, j * bc), (br, bc));
            view.zip_apply(b, |o, x| *o += s * x);
        }
    }
}

/// `Ξ` with the autocovariances that went into it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BigXi {
    #[serde(with = "crate::serde_mat")]
    pub xi: Mat,
    /// `γ_0, …, γ_K`.
    #[serde(with = "crate::serde_mat::list")]
    pub gamma: Vec<Mat>,
    pub horizon: usize,
    /// Estimate of the Frobenius norm of the discarded terms.
    pub trunc_error: f64,
    /// `Ξ` assumes vanishing fourth cumulants of `U_t`, true for Gaussian
    /// noise and not checked otherwise.
    pub gaussian_cumulants_assumed: bool,
}

/// `Ξ = Σ_k γ_k⊗γ_k + K_{(p+r,p+r)} Σ_k γ_k⊗γ_k`, summed over `|k| ≤ K`
/// where `‖γ_K‖_F ≤ trunc_tol·‖γ_0‖_F`.
pub fn big_xi(params: &VecmParams, trunc_tol: f64) -> Result<BigXi> {
    let ss = StateSpace::new(params)?;
    big_xi_from(&ss, trunc_tol)
}

fn big_xi_from(ss: &StateSpace, trunc_tol: f64) -> Result<BigXi> {
    if !(trunc_tol > 0.0 && trunc_tol < 1.0) {
        return Err(Error::Config(format!("trunc_tol must lie in (0, 1), got {trunc_tol}")));
    }
    let rho = ss.rho()?;
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let d = ss.p() + ss.r();
    let g0 = ss.mom.sigma_xtilde();
    let scale = g0.norm();
    let mut sum = Mat::zeros(d * d, d * d);
    kron_add(&mut sum, &g0, &g0);
    let lf = ss.lag_factor();
    let ht = ss.h.transpose();
    let at = ss.a.transpose();
    let min_k = horizon(rho, trunc_tol);
    let mut gamma = vec![g0];
    let mut pow = Mat::identity(ss.r(), ss.r());
    let mut last = 0.0;
    for k in 1..=MAX_HORIZON {
        let g = &lf * &pow * &ht;
        kron_add(&mut sum, &g, &g);
        let gt = g.transpose();
        kron_add(&mut sum, &gt, &gt);
        last = g.norm();
        gamma.push(g);
        if k >= min_k && last <= trunc_tol * scale {
            break;
        }
        pow = &pow * &at;
    }
    let horizon = gamma.len() - 1;
    let total = &sum + matops::commute_rows(&sum, d);
    // each dropped lag contributes 2‖γ_k‖² to each of the two sums
    let trunc_error = 4.0 * geometric_tail(last * last, rho * rho);
    Ok(BigXi { xi: matops::symmetrize(&total), gamma, horizon, trunc_error, gaussian_cumulants_assumed: true })
}

/// Derivatives of the eigen-projectors `P_i` and of `h` at `Σ_X̃`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiJacobian {
    pub m: usize,
    /// `ξ`, `pr × (p+r)²`.
    #[serde(with = "crate::serde_mat")]
    pub xi: Mat,
    /// `ξ_i = D vec(P_i)`, each `r² × (p+r)²`.
    #[serde(with = "crate::serde_mat::list")]
    pub xi_i: Vec<Mat>,
    /// `F_i`, each `r² × (p+r)²`.
    #[serde(with = "crate::serde_mat::list")]
    pub f_i: Vec<Mat>,
    /// `P_i = G₁₁e_i(G₁₁e_i)ᵀ`.
    #[serde(with = "crate::serde_mat::list")]
    pub p_i: Vec<Mat>,
    #[serde(with = "crate::serde_mat::vector")]
    pub lambda: Vector,
}

/// Population quantities shared by the Jacobian, covariance and weight
/// computations.
pub struct Asymptotics {
    ss: StateSpace,
    pub eig: PopulationEig,
    pub gap_tol: f64,
}

impl Asymptotics {
    pub fn new(params: &VecmParams) -> Result<Self> {
        Self::with_gap_tol(params, DEFAULT_GAP_TOL)
    }

    pub fn with_gap_tol(params: &VecmParams, gap_tol: f64) -> Result<Self> {
        let ss = StateSpace::new(params)?;
        let eig = model::population_eigs_from(&ss.mom)?;
        Ok(Asymptotics { ss, eig, gap_tol })
    }

    pub fn moments(&self) -> &PopulationMoments {
        &self.ss.mom
    }

    pub fn big_xi(&self, trunc_tol: f64) -> Result<BigXi> {
        big_xi_from(&self.ss, trunc_tol)
    }

    fn check_gaps(&self) -> Result<()> {
        let l = &self.eig.lambda11;
        let tol = self.gap_tol * l[0].abs().max(f64::MIN_POSITIVE);
        for i in 1..l.len() {
            let gap = l[i - 1] - l[i];
            if gap < tol {
                return Err(Error::DegenerateSpectrum { gap, tol });
            }
        }
        Ok(())
    }

    /// `ξ_i` and `F_i` for every `i = 1..r`, and `ξ` for the first `m`.
    pub fn jacobian(&self, m: usize) -> Result<XiJacobian> {
        let (p, r) = (self.ss.p(), self.ss.r());
        if m == 0 || m > r {
            return Err(Error::InvalidRank { rank: m, max: r });
        }
        self.check_gaps()?;
        let mom = &self.ss.mom;
        let lambda = self.eig.lambda11.clone();
        let p_i: Vec<Mat> = (0..r)
            .map(|i| {
                let g = self.eig.g11.column(i);
                g * g.transpose()
            })
            .collect();
        let sdxx = mom.sigma_dxx();
        // S = Σ_XΔX Σ_ΔX⁻¹
        let s = matops::cholesky(&mom.sigma_dx)?.solve(&sdxx).transpose();
        let mut neg_s_i = Mat::zeros(r, p + r);
        neg_s_i.columns_mut(0, p).copy_from(&(-&s));
        neg_s_i.columns_mut(p, r).copy_from(&Mat::identity(r, r));
        let left = matops::kron(&s, &neg_s_i);
        let zero_p = |blk: &Mat| {
            let mut out = Mat::zeros(blk.nrows(), p + r);
            out.columns_mut(p, blk.ncols()).copy_from(blk);
            out
        };
        let mut f_i = Vec::with_capacity(r);
        let mut xi_i = Vec::with_capacity(r);
        for i in 0..r {
            let mut s_lam = Mat::zeros(r, p + r);
            s_lam.columns_mut(0, p).copy_from(&s);
            s_lam.columns_mut(p, r).copy_from(&(Mat::identity(r, r) * -lambda[i]));
            let right = matops::kron(&Mat::identity(r, r), &s_lam);
            let mut f = Mat::zeros(r * r, (p + r) * (p + r));
            f.columns_mut(0, p * (p + r)).copy_from(&left);
            f.columns_mut(p * (p + r), r * (p + r)).copy_from(&right);
            let mut coef = Mat::zeros(r * r, r * r);
            for j in (0..r).filter(|&j| j != i) {
                let c = 1.0 / (lambda[i] - lambda[j]);
                coef += (matops::kron(&p_i[i], &p_i[j]) + matops::kron(&p_i[j], &p_i[i])) * c;
            }
            let zp = zero_p(&p_i[i]);
            let x = coef * &f - matops::kron(&zp, &zp);
            f_i.push(f);
            xi_i.push(x);
        }
        let w: Vec<f64> = (0..r).map(|i| if i < m { 1.0 } else { 0.0 }).collect();
        let xi = self.weighted_xi(&p_i, &xi_i, &w);
        Ok(XiJacobian { m, xi, xi_i, f_i, p_i, lambda })
    }

    /// `Σ_{i≤r} w_i ((0, P_i)⊗(I_p, 0) + (I_r⊗Σ_ΔXX)ξ_i)`.
    fn weighted_xi(&self, p_i: &[Mat], xi_i: &[Mat], w: &[f64]) -> Mat {
        let (p, r) = (self.ss.p(), self.ss.r());
        let mut ip0 = Mat::zeros(p, p + r);
        ip0.columns_mut(0, p).copy_from(&Mat::identity(p, p));
        let lift = matops::kron(&Mat::identity(r, r), &self.ss.mom.sigma_dxx());
        let mut out = Mat::zeros(p * r, (p + r) * (p + r));
        for i in 0..r {
            if w[i] == 0.0 {
                continue;
            }
            let mut zp = Mat::zeros(r, p + r);
            zp.columns_mut(p, r).copy_from(&p_i[i]);
            out += (matops::kron(&zp, &ip0) + &lift * &xi_i[i]) * w[i];
        }
        out
    }
}

pub fn xi_jacobian(params: &VecmParams, m: usize) -> Result<XiJacobian> {
    Asymptotics::new(params)?.jacobian(m)
}

/// Row indices of the lower `n × r` block within `vec` of a `p × r` matrix.
pub fn block21_indices(p: usize, r: usize) -> Vec<usize> {
    (0..r).flat_map(|j| (r..p).map(move |i| i + j * p)).collect()
}

fn sub_square(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Covariance of the `√T`-scaled first `r` columns of `Γ̂_m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnderRankCov {
    pub m: usize,
    /// `ξΞξᵀ`, `pr × pr`, for `vec` of the `p × r` block.
    #[serde(with = "crate::serde_mat")]
    pub cov: Mat,
    /// Rows and columns of `cov` belonging to the lower `n × r` block.
    #[serde(with = "crate::serde_mat")]
    pub cov21: Mat,
    /// `G^{:m}G^{:m}ᵀΣ_X^{11}G^{:m}G^{:m}ᵀ ⊗ Σ_U^{22}`.
    #[serde(with = "crate::serde_mat")]
    pub cov21_closed_form: Mat,
    pub trunc_error: f64,
}

pub fn under_rank_cov(params: &VecmParams, m: usize) -> Result<UnderRankCov> {
    let asy = Asymptotics::new(params)?;
    let jac = asy.jacobian(m)?;
    let bx = asy.big_xi(DEFAULT_TRUNC_TOL)?;
    let cov = matops::symmetrize(&(&jac.xi * &bx.xi * jac.xi.transpose()));
    let (p, r) = (asy.ss.p(), asy.ss.r());
    let cov21 = sub_square(&cov, &block21_indices(p, r));
    let pm = asy.eig.projector(m);
    let mom = asy.moments();
    let su22 = mom.sigma_u.view((r, r), (p - r, p - r)).into_owned();
    let cov21_closed_form = matops::kron(&(&pm * &mom.sigma_x11 * &pm), &su22);
    Ok(UnderRankCov { m, cov, cov21, cov21_closed_form, trunc_error: bx.trunc_error })
}

/// Maps a covariance of `vec` of the `p × r` left block in Q-coordinates to
/// the covariance of `vec(Π̂ − Π)` in the original coordinates, through
/// `Π̂ − Π ≈ Q⁻¹ L βᵀ`.
pub fn original_coords_cov(params: &VecmParams, cov: &Mat) -> Result<Mat> {
    let qt = model::q_transform(params)?;
    let map = matops::kron(&params.beta, &qt.q_inv);
    if map.ncols() != cov.nrows() {
        return Err(Error::dims(format!("covariance is {:?}, expected side {}", cov.shape(), map.ncols())));
    }
    Ok(matops::symmetrize(&(&map * cov * map.transpose())))
}

/// Limit quantities of the weighted estimator with fixed weights `w`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightAsymptotics {
    /// Limit of `Γ̂_w^{11} − Γ₁₁`, `βᵀαΣ_X^{11}G₁₁(D₁ − I_r)G₁₁ᵀ`.
    #[serde(with = "crate::serde_mat")]
    pub b_w: Mat,
    /// `βᵀαΣ_X^{11}G₁₁D₁G₁₁ᵀ(βᵀα)⁻¹`.
    #[serde(with = "crate::serde_mat")]
    pub c1w: Mat,
    /// Diagonal of `D₂`. `C₂w = G₂₂D₂G₂₂ᵀ` depends on the Brownian path and
    /// is evaluated inside the limit-law sampler.
    pub d2: Vec<f64>,
    #[serde(with = "crate::serde_mat")]
    pub xi_w: Mat,
    /// `ξ_wΞξ_wᵀ`.
    #[serde(with = "crate::serde_mat")]
    pub cov: Mat,
    pub trunc_error: f64,
}

pub fn weight_asymptotics(params: &VecmParams, w: &[f64]) -> Result<WeightAsymptotics> {
    let w = WeightVector::new(w.to_vec())?;
    let asy = Asymptotics::new(params)?;
    let (p, r) = (asy.ss.p(), asy.ss.r());
    if w.len() != p {
        return Err(Error::InvalidWeights(format!("expected {p} weights, got {}", w.len())));
    }
    if r == 0 {
        return Err(Error::InvalidRank { rank: 0, max: p });
    }
    let w1 = &w.as_slice()[..r];
    let mom = asy.moments();
    let g = &asy.eig.g11;
    let d1 = Mat::from_diagonal(&Vector::from_column_slice(w1));
    let shrink = &d1 - Mat::identity(r, r);
    let csx = &mom.c * &mom.sigma_x11;
    let b_w = &csx * g * shrink * g.transpose();
    let c1w = &csx * g * d1 * g.transpose() * matops::inverse(&mom.c)?;
    let jac = asy.jacobian(r)?;
    let xi_w = asy.weighted_xi(&jac.p_i, &jac.xi_i, w1);
    let bx = asy.big_xi(DEFAULT_TRUNC_TOL)?;
    let cov = matops::symmetrize(&(&xi_w * &bx.xi * xi_w.transpose()));
    Ok(WeightAsymptotics { b_w, c1w, d2: w.as_slice()[r..].to_vec(), xi_w, cov, trunc_error: bx.trunc_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + b.norm())
    }

    fn random_model(seed: u64, p: usize, r: usize) -> VecmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generators::random_admissible(p, r, &mut rng).unwrap()
    }

    /// `h(M) = M₁₂ Σ_{k≤m} v_kv_kᵀ` evaluated directly.
    fn h(m_full: &Mat, p: usize, r: usize, m: usize) -> Mat {
        let m11 = m_full.view((0, 0), (p, p)).into_owned();
        let m12 = m_full.view((0, p), (p, r)).into_owned();
        let m21 = m_full.view((p, 0), (r, p)).into_owned();
        let m22 = m_full.view((p, p), (r, r)).into_owned();
        let lhs = &m21 * matops::spd_inverse(&m11).unwrap() * &m12;
        let eig = matops::gsym_eig(&matops::symmetrize(&lhs), &m22).unwrap();
        m12 * eig.leading_projector(m)
    }

    #[test]
    fn gamma0_is_sigma_xtilde() {
        let params = generators::appc2(0).unwrap();
        let mom = model::population_moments(&params).unwrap();
        let g0 = acov_xtilde(&params, 0).unwrap();
        assert!(close(&g0, &mom.sigma_xtilde(), 1e-10));
    }

    #[test]
    fn acov_matches_ma_sum() {
        let params = random_model(11, 4, 2);
        let ma = ma_coefficients(&params, 1e-14).unwrap();
        let su = model::population_moments(&params).unwrap().sigma_u;
        for k in 0..6usize {
            let mut sum = Mat::zeros(6, 6);
            for s in 0..ma.psi.len() - k {
                sum += &ma.psi[s] * &su * ma.psi[s + k].transpose();
            }
            let g = acov_xtilde(&params, k as i64).unwrap();
            assert!(close(&g, &sum, 1e-10), "k = {k}");
            let gneg = acov_xtilde(&params, -(k as i64)).unwrap();
            assert_eq!(gneg, g.transpose());
        }
    }

    #[test]
    fn ma_coefficients_closed_form() {
        let params = generators::appc2(0).unwrap();
        let ma = ma_coefficients(&params, 1e-12).unwrap();
        let c = params.beta_alpha();
        let a = Mat::identity(2, 2) + &c;
        let mut a_pow = Mat::identity(2, 2);
        for s in 1..5 {
            let ps = &ma.psi[s];
            assert!(close(&ps.view((0, 0), (2, 2)).into_owned(), &(&c * &a_pow), 1e-14));
            assert!(close(&ps.view((4, 0), (2, 2)).into_owned(), &a_pow, 1e-14));
            assert_eq!(ps.view((0, 2), (6, 2)).norm(), 0.0);
            assert_eq!(ps.view((2, 0), (2, 4)).norm(), 0.0);
            a_pow = &a * a_pow;
        }
        assert!(ma.trunc_error < 1e-10);
    }

    #[test]
    fn finite_ma_when_c_is_minus_identity() {
        let alpha = -Mat::identity(3, 2);
        let params = VecmParams::new(alpha, Mat::identity(3, 2), Mat::identity(3, 3), vec![]).unwrap();
        assert_eq!(params.beta_alpha(), -Mat::identity(2, 2));
        let ma = ma_coefficients(&params, 1e-12).unwrap();
        assert!(ma.psi.iter().skip(2).all(|m| m.norm() == 0.0));
        for k in [2i64, 3, -2, -5] {
            assert_eq!(acov_xtilde(&params, k).unwrap().norm(), 0.0);
        }
        assert!(acov_xtilde(&params, 1).unwrap().norm() > 0.0);
        // only γ_{−1}, γ_0, γ_1 survive
        let bx = big_xi(&params, 1e-12).unwrap();
        let g0 = &bx.gamma[0];
        let g1 = acov_xtilde(&params, 1).unwrap();
        let mut s = matops::kron(g0, g0) + matops::kron(&g1, &g1) + matops::kron(&g1.transpose(), &g1.transpose());
        s += matops::commutation_matrix(5, 5).unwrap() * s.clone();
        assert!(close(&bx.xi, &s, 1e-12));
    }

    #[test]
    fn big_xi_structure() {
        let params = random_model(3, 3, 1);
        let bx = big_xi(&params, 1e-12).unwrap();
        let d = 4;
        assert_eq!(bx.xi.shape(), (d * d, d * d));
        assert!((&bx.xi - bx.xi.transpose()).norm() < 1e-10);
        let eig = matops::sym_eig(&bx.xi).unwrap();
        assert!(eig.values[eig.values.len() - 1] > -1e-8 * eig.values[0]);
        // K Ξ = Ξ
        let k = matops::commutation_matrix(d, d).unwrap();
        assert!(close(&(&k * &bx.xi), &bx.xi, 1e-10));
        assert!(bx.gaussian_cumulants_assumed);
    }

    #[test]
    fn truncation_convergence() {
        let params = generators::appc2(0).unwrap();
        let coarse = big_xi(&params, 1e-6).unwrap();
        let fine = big_xi(&params, 0.5e-6).unwrap();
        let exact = big_xi(&params, 1e-15).unwrap();
        assert!((&coarse.xi - &fine.xi).norm() <= coarse.trunc_error.max(1e-14));
        assert!((&coarse.xi - &exact.xi).norm() <= coarse.trunc_error * 1.5);
        assert!(fine.horizon >= coarse.horizon);
    }

    #[test]
    fn unstable_rejected() {
        assert!(matches!(horizon(0.5, 1e-12), 40));
        let bad = Mat::identity(2, 2) * 0.5;
        let params = VecmParams::new(bad, Mat::identity(2, 2), Mat::identity(2, 2), vec![]).unwrap();
        assert!(big_xi(&params, 1e-12).is_err());
    }

    #[test]
    fn xi_matches_finite_differences() {
        for (seed, p, r) in [(1u64, 4usize, 2usize), (2, 3, 2), (5, 5, 3)] {
            let params = random_model(seed, p, r);
            let asy = Asymptotics::new(&params).unwrap();
            let sigma = asy.moments().sigma_xtilde();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for m in 1..=r {
                let jac = asy.jacobian(m).unwrap();
                assert_eq!(jac.xi.shape(), (p * r, (p + r) * (p + r)));
                for _ in 0..3 {
                    let e = Mat::from_fn(p + r, p + r, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let e = &e + e.transpose();
                    let step = 1e-5;
                    let fd = (h(&(&sigma + &e * step), p, r, m) - h(&(&sigma - &e * step), p, r, m)) / (2.0 * step);
                    let lin = matops::unvec(&(&jac.xi * matops::vec(&e)), p, r).unwrap();
                    assert!(matops::rel_err(&lin, &fd) < 1e-5, "p={p} r={r} m={m}: {}", matops::rel_err(&lin, &fd));
                }
            }
        }
    }

    #[test]
    fn xi_i_matches_projector_differential() {
        // apply the eigen-projector differential directly to a perturbation
        let params = random_model(9, 4, 3);
        let asy = Asymptotics::new(&params).unwrap();
        let jac = asy.jacobian(3).unwrap();
        let mom = asy.moments();
        let (p, r) = (4, 3);
        let sigma = mom.sigma_xtilde();
        let m11_inv = matops::spd_inverse(&mom.sigma_dx).unwrap();
        let m12 = sigma.view((0, p), (p, r)).into_owned();
        let m21 = m12.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dm = Mat::from_fn(p + r, p + r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d11 = dm.view((0, 0), (p, p)).into_owned();
        let d12 = dm.view((0, p), (p, r)).into_owned();
        let d21 = dm.view((p, 0), (r, p)).into_owned();
        let d22 = dm.view((p, p), (r, r)).into_owned();
        let d_eig = &d21 * &m11_inv * &m12 - &m21 * &m11_inv * &d11 * &m11_inv * &m12 + &m21 * &m11_inv * &d12;
        for i in 0..r {
            let li = jac.lambda[i];
            let mut pinv = Mat::zeros(r, r);
            for j in (0..r).filter(|&j| j != i) {
                pinv += &jac.p_i[j] / (jac.lambda[j] - li);
            }
            let x = &d_eig - &d22 * li;
            let pi = &jac.p_i[i];
            let dp = -(pi * &d22 * pi) - &pinv * &x * pi - pi * &x * &pinv;
            let via_xi = matops::unvec(&(&jac.xi_i[i] * matops::vec(&dm)), r, r).unwrap();
            assert!(close(&via_xi, &dp, 1e-10), "i = {i}");
        }
    }

    #[test]
    fn sum_of_xi_i_identity() {
        let params = random_model(21, 5, 3);
        let asy = Asymptotics::new(&params).unwrap();
        let jac = asy.jacobian(3).unwrap();
        let (p, r) = (5, 3);
        let sx_inv = matops::spd_inverse(&asy.moments().sigma_x11).unwrap();
        let mut pad = Mat::zeros(r, p + r);
        pad.columns_mut(p, r).copy_from(&sx_inv);
        let expect = -matops::kron(&pad, &pad);
        let sum = jac.xi_i.iter().fold(Mat::zeros(r * r, (p + r) * (p + r)), |acc, x| acc + x);
        assert!(close(&sum, &expect, 1e-9));
    }

    #[test]
    fn xi_at_true_rank_simplifies() {
        let params = generators::appc2(0).unwrap();
        let asy = Asymptotics::new(&params).unwrap();
        let (p, r) = (4, 2);
        let mom = asy.moments();
        let sx_inv = matops::spd_inverse(&mom.sigma_x11).unwrap();
        let mut a = Mat::zeros(r, p + r);
        a.columns_mut(p, r).copy_from(&sx_inv);
        let mut b = Mat::zeros(p, p + r);
        b.columns_mut(0, p).copy_from(&Mat::identity(p, p));
        b.columns_mut(p, r).copy_from(&(-mom.sigma_dxx() * &sx_inv));
        let expect = matops::kron(&a, &b);
        let jac = asy.jacobian(r).unwrap();
        assert!(close(&jac.xi, &expect, 1e-9));
        let cov = under_rank_cov(&params, r).unwrap().cov;
        let target = matops::kron(&sx_inv, &mom.sigma_u);
        assert!(close(&cov, &target, 1e-6), "{}", matops::rel_err(&cov, &target));
    }

    #[test]
    fn scalar_stationary_hand_computation() {
        // p = r = 1 with ΔY = cY + Z: σ_X = 1/(1 − (1+c)²), Σ_ΔXX = cσ_X and
        // h(M) = M₁₂/M₂₂, so ξ = (0, 0, 1/σ_X, −c/σ_X)
        let c = -0.6;
        let params =
            VecmParams::new(Mat::from_element(1, 1, c), Mat::from_element(1, 1, 1.0), Mat::identity(1, 1), vec![])
                .unwrap();
        let sx = 1.0 / (1.0 - (1.0 + c) * (1.0 + c));
        let jac = xi_jacobian(&params, 1).unwrap();
        let expect = Mat::from_row_slice(1, 4, &[0.0, 0.0, 1.0 / sx, -c / sx]);
        assert!(close(&jac.xi, &expect, 1e-12), "{}", jac.xi);
    }

    #[test]
    fn block21_closed_form() {
        for (seed, p, r) in [(31u64, 4usize, 2usize), (32, 5, 3)] {
            let params = random_model(seed, p, r);
            for m in 1..=r {
                let u = under_rank_cov(&params, m).unwrap();
                assert!(close(&u.cov21, &u.cov21_closed_form, 1e-8), "m = {m}");
                let eig = matops::sym_eig(&u.cov).unwrap();
                assert!(eig.values[eig.values.len() - 1] > -1e-8 * eig.values[0].max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_spectrum_rejected() {
        // two identical decoupled blocks give a repeated eigenvalue
        let alpha = Mat::from_row_slice(3, 2, &[-0.5, 0.0, 0.0, -0.5, 0.0, 0.0]);
        let params = VecmParams::new(alpha, Mat::identity(3, 2), Mat::identity(3, 3), vec![]).unwrap();
        assert!(matches!(xi_jacobian(&params, 1), Err(Error::DegenerateSpectrum { .. })));
        assert!(matches!(xi_jacobian(&generators::appc2(0).unwrap(), 3), Err(Error::InvalidRank { .. })));
    }

    #[test]
    fn hard_weights_reproduce_fixed_rank_quantities() {
        let params = random_model(41, 5, 3);
        let asy = Asymptotics::new(&params).unwrap();
        for m in 1..=3 {
            let mut w = vec![0.0; 5];
            w[..m].fill(1.0);
            let wa = weight_asymptotics(&params, &w).unwrap();
            let bias = model::asymptotic_bias(&params, m).unwrap();
            assert!(close(&wa.b_w, &bias.b_m, 1e-12));
            assert!(close(&wa.c1w, &bias.c_m, 1e-10));
            // independent assembly of ξ from its pieces
            let jac = asy.jacobian(m).unwrap();
            let mom = asy.moments();
            let lift = matops::kron(&Mat::identity(3, 3), &mom.sigma_dxx());
            let mut ip0 = Mat::zeros(5, 8);
            ip0.view_mut((0, 0), (5, 5)).fill_with_identity();
            let mut xi = Mat::zeros(15, 64);
            for i in 0..m {
                let mut zp = Mat::zeros(3, 8);
                zp.view_mut((0, 5), (3, 3)).copy_from(&jac.p_i[i]);
                xi += matops::kron(&zp, &ip0) + &lift * &jac.xi_i[i];
            }
            assert!(close(&wa.xi_w, &xi, 1e-12));
            assert!(close(&jac.xi, &xi, 1e-12));
            let u = under_rank_cov(&params, m).unwrap();
            assert!(close(&wa.cov, &u.cov, 1e-12));
        }
    }

    #[test]
    fn all_one_weights() {
        let params = generators::appc2(0).unwrap();
        let wa = weight_asymptotics(&params, &[1.0; 4]).unwrap();
        assert!(wa.b_w.norm() < 1e-12);
        assert!(close(&wa.c1w, &Mat::identity(2, 2), 1e-12));
        assert!(weight_asymptotics(&params, &[1.0, 1.0, 1.0]).is_err());
        assert!(weight_asymptotics(&params, &[0.2, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn original_coordinates() {
        let params = generators::appc2(0).unwrap();
        let u = under_rank_cov(&params, 2).unwrap();
        let c = original_coords_cov(&params, &u.cov).unwrap();
        assert_eq!(c.shape(), (16, 16));
        // Π̂ − Π = Q⁻¹[L, 0]Q, checked entrywise on a random L
        let qt = model::q_transform(&params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Mat::from_fn(4, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut full = Mat::zeros(4, 4);
        full.columns_mut(0, 2).copy_from(&l);
        let direct = qt.from_q(&full);
        let mapped = matops::kron(&params.beta, &qt.q_inv) * matops::vec(&l);
        assert!((matops::vec(&direct) - mapped).norm() < 1e-12);
    }

    #[test]
    fn json_export() {
        let params = generators::appc2(0).unwrap();
        let jac = xi_jacobian(&params, 1).unwrap();
        let v = serde_json::to_value(&jac).unwrap();
        assert_eq!(v["xi"]["rows"], 8);
        assert_eq!(v["xi"]["cols"], 36);
        assert_eq!(v["xi_i"].as_array().unwrap().len(), 2);
    }
}
