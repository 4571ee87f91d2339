//! Model parameters, assumption checks, the Q-transform and exact
//! population quantities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{self, GenEig, Mat, Vector};

/// `ΔY_t = αβᵀ Y_{t−1} + Σ_i Ψ_i ΔY_{t−i} + Z_t`, `Cov(Z_t) = Σ_Z`.
///
/// Rank zero is encoded by `p × 0` matrices for `alpha` and `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VecmParams {
    #[serde(with = "crate::serde_mat")]
    pub alpha: Mat,
    #[serde(with = "crate::serde_mat")]
    pub beta: Mat,
    #[serde(with = "crate::serde_mat")]
    pub sigma_z: Mat,
    #[serde(default, with = "crate::serde_mat::list")]
    pub lags: Vec<Mat>,
}

impl VecmParams {
    pub fn new(alpha: Mat, beta: Mat, sigma_z: Mat, lags: Vec<Mat>) -> Result<Self> {
        let params = VecmParams { alpha, beta, sigma_z, lags };
        params.validate()?;
        Ok(params)
    }

    /// Shape and rank checks shared by the constructor and deserialization.
    pub fn validate(&self) -> Result<()> {
        let p = self.sigma_z.nrows();
        if p == 0 || self.sigma_z.ncols() != p {
            return Err(Error::dims(format!("sigma_z must be p x p with p > 0, got {:?}", self.sigma_z.shape())));
        }
        if self.alpha.nrows() != p || self.beta.nrows() != p || self.alpha.ncols() != self.beta.ncols() {
            return Err(Error::dims(format!(
                "alpha {:?} and beta {:?} must both be {p} x r",
                self.alpha.shape(),
                self.beta.shape()
            )));
        }
        for (i, l) in self.lags.iter().enumerate() {
            if l.shape() != (p, p) {
                return Err(Error::dims(format!("lag matrix {} is {:?}, expected {p} x {p}", i + 1, l.shape())));
            }
        }
        let r = self.alpha.ncols();
        if r > p {
            return Err(Error::InvalidRank { rank: r, max: p });
        }
        if r > 0 {
            for m in [&self.alpha, &self.beta] {
                let sv = m.clone().svd(false, false).singular_values;
                let smax = sv.max();
                if !(sv.min() > 1e-10 * smax) {
                    return Err(Error::RankDeficient);
                }
            }
        }
        matops::cholesky(&self.sigma_z)?;
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.sigma_z.nrows()
    }

    pub fn r(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn n(&self) -> usize {
        self.p() - self.r()
    }

    pub fn pi(&self) -> Mat {
        &self.alpha * self.beta.transpose()
    }

    /// `βᵀα`, the stationary block of `Γ`.
    pub fn beta_alpha(&self) -> Mat {
        self.beta.transpose() * &self.alpha
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: VecmParams = serde_json::from_str(s)?;
        params.validate().map_err(|e| Error::Config(format!("invalid model: {e}")))?;
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// `|μ − 1|` below this counts as a unit root.
    pub unit_root: f64,
    /// Non-unit roots must satisfy `|μ| < 1 − stability`.
    pub stability: f64,
    /// Smallest singular value of `α_⊥ᵀβ_⊥` must exceed this.
    pub singular: f64,
    /// Eigenvalue gap relative to `λ₁`.
    pub gap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { unit_root: 1e-8, stability: 1e-8, singular: 1e-10, gap: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub n_unit_roots: usize,
    pub stable: bool,
    pub a2_ok: bool,
    /// Simplicity of the first `r` population eigenvalues. `None` when the
    /// model has lagged differences, where that eigenproblem is not defined
    /// here.
    pub a3_ok: Option<bool>,
    /// Largest modulus among the non-unit roots of the companion matrix.
    pub max_stationary_modulus: f64,
}

impl CheckReport {
    /// Unit-root count matches `n`, all other roots stable and `α_⊥ᵀβ_⊥`
    /// invertible.
    pub fn is_i1(&self, n: usize) -> bool {
        self.n_unit_roots == n && self.stable && self.a2_ok
    }
}

/// Companion matrix of the levels representation
/// `Y_t = Σ_{j=1}^{d} A_j Y_{t−j} + Z_t`.
pub fn companion(params: &VecmParams) -> Mat {
    let p = params.p();
    let lags = &params.lags;
    let d = lags.len() + 1;
    let mut a: Vec<Mat> = Vec::with_capacity(d);
    let first = Mat::identity(p, p) + params.pi() + lags.first().cloned().unwrap_or_else(|| Mat::zeros(p, p));
    a.push(first);
    for j in 2..=d {
        let cur = if j <= lags.len() { lags[j - 1].clone() } else { Mat::zeros(p, p) };
        a.push(cur - &lags[j - 2]);
    }
    let mut comp = Mat::zeros(p * d, p * d);
    for (j, aj) in a.iter().enumerate() {
        comp.view_mut((0, j * p), (p, p)).copy_from(aj);
    }
    for j in 1..d {
        comp.view_mut((j * p, (j - 1) * p), (p, p)).copy_from(&Mat::identity(p, p));
    }
    comp
}

pub fn check_i1_conditions(params: &VecmParams) -> CheckReport {
    check_i1_conditions_with(params, &Tolerances::default())
}

pub fn check_i1_conditions_with(params: &VecmParams, tol: &Tolerances) -> CheckReport {
    // a stalled eigenvalue solve reports the model as unstable
    let roots = matops::complex_eigenvalues(&companion(params));
    let mut n_unit_roots = 0;
    let mut max_mod: f64 = if roots.is_ok() { 0.0 } else { f64::INFINITY };
    for (re, im) in roots.unwrap_or_default() {
        if (re - 1.0).hypot(im) < tol.unit_root {
            n_unit_roots += 1;
        } else {
            max_mod = max_mod.max(re.hypot(im));
        }
    }
    let stable = max_mod < 1.0 - tol.stability;
    let a2_ok = a2_min_singular_value(params).map(|s| s > tol.singular).unwrap_or(false);
    let a3_ok = if !params.lags.is_empty() {
        None
    } else if params.r() == 0 {
        Some(true)
    } else if !(stable && a2_ok) {
        Some(false)
    } else {
        Some(match population_eigs(params) {
            Ok(e) => min_gap(&e.lambda11) > tol.gap * e.lambda11[0].abs().max(f64::MIN_POSITIVE),
            Err(_) => false,
        })
    };
    CheckReport { n_unit_roots, stable, a2_ok, a3_ok, max_stationary_modulus: max_mod }
}

fn min_gap(v: &Vector) -> f64 {
    (1..v.len()).map(|i| (v[i - 1] - v[i]).abs()).fold(f64::INFINITY, f64::min)
}

/// Smallest singular value of `α_⊥ᵀ (I − Σ Ψ_i) β_⊥`; `+∞` when `r = p`.
fn a2_min_singular_value(params: &VecmParams) -> Result<f64> {
    let p = params.p();
    if params.r() == p {
        return Ok(f64::INFINITY);
    }
    let a_perp = matops::orth_complement(&params.alpha)?;
    let b_perp = matops::orth_complement(&params.beta)?;
    let mut mid = Mat::identity(p, p);
    for l in &params.lags {
        mid -= l;
    }
    let m = a_perp.transpose() * mid * b_perp;
    Ok(m.svd(false, false).singular_values.min())
}

/// `Q = (β, α_⊥)ᵀ`, its inverse and `Γ = QΠQ⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTransform {
    pub q: Mat,
    pub q_inv: Mat,
    pub gamma: Mat,
}

impl QTransform {
    /// `Q M Q⁻¹`.
    pub fn to_q(&self, m: &Mat) -> Mat {
        &self.q * m * &self.q_inv
    }

    /// `Q⁻¹ M Q`.
    pub fn from_q(&self, m: &Mat) -> Mat {
        &self.q_inv * m * &self.q
    }
}

/// Builds the Q-transform. `Q⁻¹` uses the closed form
/// `(α(βᵀα)⁻¹, β_⊥(α_⊥ᵀβ_⊥)⁻¹)`. For `r = p` this reduces to `Q = βᵀ` and for
/// `r = 0` to `Q = I`.
pub fn q_transform(params: &VecmParams) -> Result<QTransform> {
    let (p, r) = (params.p(), params.r());
    let a_perp = matops::orth_complement(&params.alpha).map_err(|_| Error::SingularQ)?;
    let b_perp = matops::orth_complement(&params.beta).map_err(|_| Error::SingularQ)?;
    let mut q = Mat::zeros(p, p);
    q.rows_mut(0, r).copy_from(&params.beta.transpose());
    q.rows_mut(r, p - r).copy_from(&a_perp.transpose());
    let ba = params.beta_alpha();
    let ba_inv = matops::inverse(&ba).map_err(|_| Error::SingularQ)?;
    let ab = a_perp.transpose() * &b_perp;
    if p > r && ab.clone().svd(false, false).singular_values.min() <= Tolerances::default().singular {
        return Err(Error::SingularQ);
    }
    let ab_inv = matops::inverse(&ab).map_err(|_| Error::SingularQ)?;
    let mut q_inv = Mat::zeros(p, p);
    q_inv.columns_mut(0, r).copy_from(&(&params.alpha * ba_inv));
    q_inv.columns_mut(r, p - r).copy_from(&(b_perp * ab_inv));
    let gamma = &q * params.pi() * &q_inv;
    Ok(QTransform { q, q_inv, gamma })
}

/// Exact second moments of the stationary parts in Q-coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    /// `βᵀα`.
    pub c: Mat,
    pub sigma_x11: Mat,
    pub sigma_dx: Mat,
    pub sigma_u: Mat,
    pub qt: QTransform,
}

impl PopulationMoments {
    pub fn r(&self) -> usize {
        self.c.nrows()
    }

    pub fn p(&self) -> usize {
        self.sigma_u.nrows()
    }

    /// `Σ_ΔXX = (Σ_X^{11}αᵀβ, 0)ᵀ`, the `p × r` limit of the first `r`
    /// columns of `S_ΔXX`.
    pub fn sigma_dxx(&self) -> Mat {
        let mut out = Mat::zeros(self.p(), self.r());
        out.rows_mut(0, self.r()).copy_from(&(&self.c * &self.sigma_x11));
        out
    }

    /// Limit of the sample covariance of `(ΔX_tᵀ, X_{1,t−1}ᵀ)ᵀ`.
    pub fn sigma_xtilde(&self) -> Mat {
        let (p, r) = (self.p(), self.r());
        let mut out = Mat::zeros(p + r, p + r);
        out.view_mut((0, 0), (p, p)).copy_from(&self.sigma_dx);
        let sdxx = self.sigma_dxx();
        out.view_mut((0, p), (p, r)).copy_from(&sdxx);
        out.view_mut((p, 0), (r, p)).copy_from(&sdxx.transpose());
        out.view_mut((p, p), (r, r)).copy_from(&self.sigma_x11);
        out
    }
}

/// Solves `Σ = AΣAᵀ + S` through `(I − A⊗A) vec Σ = vec S`.
pub fn discrete_lyapunov(a: &Mat, s: &Mat) -> Result<Mat> {
    let k = a.nrows();
    if k == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let rho = matops::spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let lhs = Mat::identity(k * k, k * k) - matops::kron(a, a);
    let sol = lhs.lu().solve(&matops::vec(s)).ok_or(Error::Unstable(rho))?;
    Ok(matops::symmetrize(&matops::unvec(&sol, k, k)?))
}

pub fn population_moments(params: &VecmParams) -> Result<PopulationMoments> {
    let qt = q_transform(params)?;
    let r = params.r();
    let p = params.p();
    let sigma_u = matops::symmetrize(&(&qt.q * &params.sigma_z * qt.q.transpose()));
    let c = params.beta_alpha();
    let a = Mat::identity(r, r) + &c;
    let su11 = sigma_u.view((0, 0), (r, r)).into_owned();
    let sigma_x11 = discrete_lyapunov(&a, &su11)?;
    let mut sigma_dx = sigma_u.clone();
    let top = su11 + &c * &sigma_x11 * c.transpose();
    sigma_dx.view_mut((0, 0), (r, r)).copy_from(&matops::symmetrize(&top));
    debug_assert_eq!(sigma_dx.nrows(), p);
    Ok(PopulationMoments { c, sigma_x11, sigma_dx, sigma_u, qt })
}

/// Population eigenvalues `λ₁ ≥ … ≥ λ_r` and `G₁₁` with
/// `G₁₁ᵀΣ_X^{11}G₁₁ = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationEig {
    pub lambda11: Vector,
    pub g11: Mat,
}

impl PopulationEig {
    /// `G₁₁^{:m}(G₁₁^{:m})ᵀ`.
    pub fn projector(&self, m: usize) -> Mat {
        let g = self.g11.columns(0, m);
        g * g.transpose()
    }

    /// `G₁₁ D G₁₁ᵀ` for `D = diag(w)`.
    pub fn weighted_projector(&self, w: &[f64]) -> Mat {
        GenEig { values: self.lambda11.clone(), vectors: self.g11.clone() }.weighted_projector(w)
    }
}

pub fn population_eigs(params: &VecmParams) -> Result<PopulationEig> {
    population_eigs_from(&population_moments(params)?)
}

pub fn population_eigs_from(mom: &PopulationMoments) -> Result<PopulationEig> {
    let r = mom.r();
    if r == 0 {
        return Ok(PopulationEig { lambda11: Vector::zeros(0), g11: Mat::zeros(0, 0) });
    }
    let sdx_inv = matops::spd_inverse(&mom.sigma_dx)?;
    let inv11 = sdx_inv.view((0, 0), (r, r)).into_owned();
    let sc = &mom.sigma_x11 * mom.c.transpose();
    let m = &sc * inv11 * sc.transpose();
    let eig = matops::gsym_eig(&m, &mom.sigma_x11)?;
    for &v in eig.values.iter() {
        if !(-1e-12..1.0).contains(&v) {
            return Err(Error::EigenvalueOutOfRange(v));
        }
    }
    Ok(PopulationEig { lambda11: eig.values.map(|v| v.max(0.0)), g11: eig.vectors })
}

/// Asymptotic bias of the rank-`m` estimator.
///
/// `b_m` is the probability limit of `Γ̂_m^{11} − Γ₁₁`, that is
/// `βᵀαΣ_X^{11}(G^{:m}G^{:m}ᵀ − G₁₁G₁₁ᵀ)`, and `b_tilde` the corresponding
/// limit of `Π̂_m − Π`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticBias {
    pub b_m: Mat,
    pub b_tilde: Mat,
    pub c_m: Mat,
}

pub fn asymptotic_bias(params: &VecmParams, m: usize) -> Result<AsymptoticBias> {
    let mom = population_moments(params)?;
    let eig = population_eigs_from(&mom)?;
    asymptotic_bias_from(params, &mom, &eig, m)
}

pub fn asymptotic_bias_from(
    params: &VecmParams,
    mom: &PopulationMoments,
    eig: &PopulationEig,
    m: usize,
) -> Result<AsymptoticBias> {
    let r = mom.r();
    if m > r {
        return Err(Error::InvalidRank { rank: m, max: r });
    }
    let full = eig.projector(r);
    let diff = eig.projector(m) - full;
    let b_m = &mom.c * &mom.sigma_x11 * &diff;
    let b_tilde = &params.alpha * &mom.sigma_x11 * &diff * params.beta.transpose();
    let c_inv = matops::inverse(&mom.c)?;
    let c_m = &mom.c * &mom.sigma_x11 * eig.projector(m) * c_inv;
    Ok(AsymptoticBias { b_m, b_tilde, c_m })
}
