//! Sample cross-covariances, the sample eigenproblem and the fixed-rank,
//! weighted and least squares estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{self, GenEig, Mat, Vector};
use crate::simulate::{Coordinates, Trajectory};

/// Deterministic terms in the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    #[default]
    None,
    Constant,
}

/// Pooled moment matrices of `(ΔX_t, X_{t−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariances {
    pub s_xx: Mat,
    /// `S_ΔXX = (1/T) Σ ΔX_t X_{t−1}ᵀ`.
    pub s_dxx: Mat,
    /// `S_XΔX = S_ΔXXᵀ`.
    pub s_xdx: Mat,
    pub s_dxdx: Mat,
    pub t_effective: usize,
    pub n_trials: usize,
    pub drift: Drift,
    /// Pooled means of `ΔX_t` and `X_{t−1}`; zero unless `drift` is constant.
    pub mean_dx: Vector,
    pub mean_x: Vector,
    pub coords: Coordinates,
}

/// Rows of `(ΔY_t, Y_{t−1})` for `t = 1..T`.
fn diffs_and_levels(tr: &Trajectory) -> (Mat, Mat) {
    let t = tr.t();
    let p = tr.p();
    let x = tr.data.rows(0, t).into_owned();
    let dx = tr.data.rows(1, t) - &x;
    debug_assert_eq!(dx.ncols(), p);
    (dx, x)
}

impl CrossCovariances {
    /// Builds the moments from paired rows `d_t` (responses) and `x_t`
    /// (regressors). With `demean`, pooled column means are removed first.
    pub fn from_rows(d: &[Mat], x: &[Mat], drift: Drift, coords: Coordinates) -> Result<CrossCovariances> {
        if d.is_empty() || d.len() != x.len() {
            return Err(Error::TooShort("no trials".into()));
        }
        let p = d[0].ncols();
        let mut total = 0usize;
        for (a, b) in d.iter().zip(x) {
            if a.ncols() != p || b.ncols() != p || a.nrows() != b.nrows() {
                return Err(Error::dims(format!(
                    "trial blocks {:?} and {:?} do not match dimension {p}",
                    a.shape(),
                    b.shape()
                )));
            }
            total += a.nrows();
        }
        if total < p + 1 {
            return Err(Error::TooShort(format!("{total} effective observations for dimension {p}")));
        }
        let tf = total as f64;
        let (mean_dx, mean_x) = match drift {
            Drift::None => (Vector::zeros(p), Vector::zeros(p)),
            Drift::Constant => {
                let mut md = Vector::zeros(p);
                let mut mx = Vector::zeros(p);
                for (a, b) in d.iter().zip(x) {
                    md += a.row_sum().transpose();
                    mx += b.row_sum().transpose();
                }
                (md / tf, mx / tf)
            }
        };
        let mut s_xx = Mat::zeros(p, p);
        let mut s_dxx = Mat::zeros(p, p);
        let mut s_dxdx = Mat::zeros(p, p);
        for (a, b) in d.iter().zip(x) {
            let (a, b) = match drift {
                Drift::None => (a.clone(), b.clone()),
                Drift::Constant => {
                    let mut a = a.clone();
                    let mut b = b.clone();
                    for mut row in a.row_iter_mut() {
                        row -= mean_dx.transpose();
                    }
                    for mut row in b.row_iter_mut() {
                        row -= mean_x.transpose();
                    }
                    (a, b)
                }
            };
            s_xx.gemm_tr(1.0, &b, &b, 1.0);
            s_dxx.gemm_tr(1.0, &a, &b, 1.0);
            s_dxdx.gemm_tr(1.0, &a, &a, 1.0);
        }
        s_xx = matops::symmetrize(&s_xx) / tf;
        s_dxx /= tf;
        s_dxdx = matops::symmetrize(&s_dxdx) / tf;
        Ok(CrossCovariances {
            s_xdx: s_dxx.transpose(),
            s_xx,
            s_dxx,
            s_dxdx,
            t_effective: total,
            n_trials: d.len(),
            drift,
            mean_dx,
            mean_x,
            coords,
        })
    }

    /// Moments under the change of coordinates `X_t ↦ M X_t`.
    pub fn transform(&self, m: &Mat, coords: Coordinates) -> CrossCovariances {
        let s_dxx = m * &self.s_dxx * m.transpose();
        CrossCovariances {
            s_xx: matops::symmetrize(&(m * &self.s_xx * m.transpose())),
            s_xdx: s_dxx.transpose(),
            s_dxx,
            s_dxdx: matops::symmetrize(&(m * &self.s_dxdx * m.transpose())),
            t_effective: self.t_effective,
            n_trials: self.n_trials,
            drift: self.drift,
            mean_dx: m * &self.mean_dx,
            mean_x: m * &self.mean_x,
            coords,
        }
    }

    pub fn p(&self) -> usize {
        self.s_xx.nrows()
    }

    /// Intercept `μ̂ = mean(ΔX) − Π̂ mean(X_{−1})` implied by an estimate.
    pub fn intercept(&self, pi_hat: &Mat) -> Vector {
        &self.mean_dx - pi_hat * &self.mean_x
    }
}

pub fn cross_covariances(trials: &[Trajectory], drift: Drift) -> Result<CrossCovariances> {
    if trials.is_empty() {
        return Err(Error::TooShort("no trials".into()));
    }
    let coords = trials[0].coords;
    let (d, x): (Vec<Mat>, Vec<Mat>) = trials.iter().map(diffs_and_levels).unzip();
    CrossCovariances::from_rows(&d, &x, drift, coords)
}

/// Solves `S_XΔX S_ΔXΔX⁻¹ S_ΔXX G = S_XX G Λ`, `GᵀS_XXG = I`, with the
/// eigenvalues clamped to `[0, 1]`.
pub fn coint_eig(s: &CrossCovariances) -> Result<GenEig> {
    let chol = matops::cholesky(&s.s_dxdx)?;
    let a = chol.solve(&s.s_dxx);
    let m = &s.s_xdx * a;
    let mut eig = matops::gsym_eig(&m, &s.s_xx)?;
    eig.values.apply(|v| *v = v.clamp(0.0, 1.0));
    Ok(eig)
}

/// A weight vector with `1 ≥ w_1 ≥ … ≥ w_p ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(w: Vec<f64>) -> Result<Self> {
        WeightVector::new(w)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(x) = w.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidWeights(format!("weight {x} outside [0, 1]")));
        }
        if let Some(i) = (1..w.len()).find(|&i| w[i] > w[i - 1]) {
            return Err(Error::InvalidWeights(format!(
                "weights must be nonincreasing, w[{}] = {} > w[{}] = {}",
                i + 1,
                w[i],
                i,
                w[i - 1]
            )));
        }
        Ok(WeightVector(w))
    }

    /// Indicator of the first `k` of `p` indices.
    pub fn hard(k: usize, p: usize) -> Self {
        WeightVector((0..p).map(|i| if i < k { 1.0 } else { 0.0 }).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mixture weights `W_k = w_k − w_{k+1}`, `k = 0..p`, with `w_0 = 1` and
    /// `w_{p+1} = 0`. They are nonnegative and sum to one.
    pub fn mixture(&self) -> Vec<f64> {
        let p = self.0.len();
        let at = |k: usize| -> f64 {
            if k == 0 {
                1.0
            } else if k > p {
                0.0
            } else {
                self.0[k - 1]
            }
        };
        (0..=p).map(|k| at(k) - at(k + 1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum RankSpec {
    Fixed(usize),
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub pi_hat: Mat,
    pub rank_spec: RankSpec,
    pub eig: GenEig,
    pub coords: Coordinates,
    pub drift: Drift,
}

#[derive(Serialize)]
struct EstimatorJson<'a> {
    #[serde(with = "crate::serde_mat")]
    pi_hat: &'a Mat,
    eigenvalues: &'a [f64],
    weights: Vec<f64>,
    rank_spec: &'a RankSpec,
    drift: Drift,
    coords: Coordinates,
}

impl EstimatorResult {
    pub fn weights(&self) -> Vec<f64> {
        match &self.rank_spec {
            RankSpec::Fixed(k) => WeightVector::hard(*k, self.pi_hat.nrows()).0,
            RankSpec::Weights(w) => w.clone(),
        }
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(EstimatorJson {
            pi_hat: &self.pi_hat,
            eigenvalues: self.eig.values.as_slice(),
            weights: self.weights(),
            rank_spec: &self.rank_spec,
            drift: self.drift,
            coords: self.coords,
        })?)
    }
}

/// The sample eigenproblem solved once, from which any fixed-rank or
/// weighted estimate is a cheap projection.
#[derive(Debug, Clone)]
pub struct ReducedRank {
    pub s: CrossCovariances,
    pub eig: GenEig,
}

impl ReducedRank {
    pub fn new(s: CrossCovariances) -> Result<Self> {
        let eig = coint_eig(&s)?;
        Ok(ReducedRank { s, eig })
    }

    pub fn p(&self) -> usize {
        self.s.p()
    }

    /// `S_ΔXX Ĝ^{:k}(Ĝ^{:k})ᵀ`.
    pub fn pi_rank(&self, k: usize) -> Result<Mat> {
        let p = self.p();
        if k > p {
            return Err(Error::InvalidRank { rank: k, max: p });
        }
        Ok(&self.s.s_dxx * self.eig.leading_projector(k))
    }

    /// `S_ΔXX Σ w_i ĝ_iĝ_iᵀ`.
    pub fn pi_weighted(&self, w: &WeightVector) -> Result<Mat> {
        if w.len() != self.p() {
            return Err(Error::InvalidWeights(format!("expected {} weights, got {}", self.p(), w.len())));
        }
        Ok(&self.s.s_dxx * self.eig.weighted_projector(w.as_slice()))
    }

    pub fn rank(&self, k: usize) -> Result<EstimatorResult> {
        Ok(self.result(self.pi_rank(k)?, RankSpec::Fixed(k)))
    }

    pub fn weighted(&self, w: &WeightVector) -> Result<EstimatorResult> {
        Ok(self.result(self.pi_weighted(w)?, RankSpec::Weights(w.as_slice().to_vec())))
    }

    fn result(&self, pi_hat: Mat, rank_spec: RankSpec) -> EstimatorResult {
        EstimatorResult { pi_hat, rank_spec, eig: self.eig.clone(), coords: self.s.coords, drift: self.s.drift }
    }
}

pub fn rrr_estimate(s: &CrossCovariances, k: usize) -> Result<EstimatorResult> {
    let p = s.p();
    if k > p {
        return Err(Error::InvalidRank { rank: k, max: p });
    }
    ReducedRank::new(s.clone())?.rank(k)
}

pub fn weighted_estimate(s: &CrossCovariances, w: &WeightVector) -> Result<EstimatorResult> {
    ReducedRank::new(s.clone())?.weighted(w)
}

/// `S_ΔXX S_XX⁻¹`, computed by a Cholesky solve without the eigenproblem.
pub fn ls_estimate(s: &CrossCovariances) -> Result<EstimatorResult> {
    let chol = matops::cholesky(&s.s_xx)?;
    let pi_hat = chol.solve(&s.s_xdx).transpose();
    let eig = coint_eig(s)?;
    Ok(EstimatorResult { pi_hat, rank_spec: RankSpec::Fixed(s.p()), eig, coords: s.coords, drift: s.drift })
}

/// Residual series after partialling out lagged differences.
#[derive(Debug, Clone)]
pub struct Concentrated {
    /// Residuals of `ΔY_t`, one block per trial.
    pub r0: Vec<Mat>,
    /// Residuals of `Y_{t−1}`.
    pub r1: Vec<Mat>,
    /// Regressors `(ΔY_{t−1}, …, ΔY_{t−d+1})`, one block per trial.
    pub z: Vec<Mat>,
    pub drift: Drift,
}

impl Concentrated {
    /// Cross-covariances of `(R₀, R₁)`; any intercept is already partialled
    /// out.
    pub fn cross_covariances(&self) -> Result<CrossCovariances> {
        let mut s = CrossCovariances::from_rows(&self.r0, &self.r1, Drift::None, Coordinates::Original)?;
        s.drift = self.drift;
        Ok(s)
    }
}

/// Stacks `ΔY_t`, `Y_{t−1}` and the lagged differences for `t = d..T` of
/// every trial, adding a column of ones when `drift` is constant.
fn lagged_blocks(trials: &[Trajectory], d: usize, drift: Drift) -> Result<(Vec<Mat>, Vec<Mat>, Vec<Mat>)> {
    if d == 0 {
        return Err(Error::Config("lag order must be at least 1".into()));
    }
    let mut dys = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    for tr in trials {
        let (dx, x) = diffs_and_levels(tr);
        let p = tr.p();
        let t = tr.t();
        if t < d {
            return Err(Error::TooShort(format!("trial with T = {t} is too short for lag order {d}")));
        }
        let rows = t - (d - 1);
        let extra = usize::from(drift == Drift::Constant);
        let mut z = Mat::zeros(rows, p * (d - 1) + extra);
        for lag in 1..d {
            // row k corresponds to t = k + d, i.e. index k + d − 1 in dx
            z.columns_mut((lag - 1) * p, p).copy_from(&dx.rows(d - 1 - lag, rows));
        }
        if extra == 1 {
            z.column_mut(p * (d - 1)).fill(1.0);
        }
        dys.push(dx.rows(d - 1, rows).into_owned());
        ys.push(x.rows(d - 1, rows).into_owned());
        zs.push(z);
    }
    Ok((dys, ys, zs))
}

fn stack(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// OLS coefficients `B` of `Y ≈ Z Bᵀ` from per-trial blocks.
fn ols(y: &[Mat], z: &[Mat]) -> Result<Mat> {
    let zz = stack(z);
    let yy = stack(y);
    if zz.ncols() == 0 {
        return Ok(Mat::zeros(yy.ncols(), 0));
    }
    if zz.nrows() <= zz.ncols() {
        return Err(Error::TooShort(format!("{} observations for {} regressors", zz.nrows(), zz.ncols())));
    }
    let chol =
        matops::cholesky(&(zz.transpose() * &zz)).map_err(|_| Error::TooShort("singular lag regressors".into()))?;
    Ok(chol.solve(&(zz.transpose() * yy)).transpose())
}

/// Residuals of `ΔY_t` and `Y_{t−1}` on `(ΔY_{t−1}, …, ΔY_{t−d+1})` and
/// an intercept when `drift` is constant. For `d = 1` without drift the
/// series pass through unchanged.
pub fn concentrate_lags(trials: &[Trajectory], d: usize, drift: Drift) -> Result<Concentrated> {
    let (dys, ys, zs) = lagged_blocks(trials, d, drift)?;
    if zs[0].ncols() == 0 {
        return Ok(Concentrated { r0: dys, r1: ys, z: zs, drift });
    }
    let b0 = ols(&dys, &zs)?;
    let b1 = ols(&ys, &zs)?;
    let r0 = dys.iter().zip(&zs).map(|(y, z)| y - z * b0.transpose()).collect();
    let r1 = ys.iter().zip(&zs).map(|(y, z)| y - z * b1.transpose()).collect();
    Ok(Concentrated { r0, r1, z: zs, drift })
}

/// `Ψ̂_1..Ψ̂_{d−1}` by OLS of `ΔY_t − Π̂Y_{t−1}` on the lagged differences
/// (and an intercept when `drift` is constant, which is dropped from the
/// output).
pub fn psi_estimate(trials: &[Trajectory], pi_hat: &Mat, d: usize, drift: Drift) -> Result<Vec<Mat>> {
    let (dys, ys, zs) = lagged_blocks(trials, d, drift)?;
    if d == 1 {
        return Ok(Vec::new());
    }
    let resp: Vec<Mat> = dys.iter().zip(&ys).map(|(dy, y)| dy - y * pi_hat.transpose()).collect();
    let b = ols(&resp, &zs)?;
    let p = pi_hat.nrows();
    Ok((0..d - 1).map(|i| b.columns(i * p, p).into_owned()).collect())
}
