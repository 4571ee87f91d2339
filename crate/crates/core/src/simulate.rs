//! Trajectory simulation, reproducible random streams and samplers for the
//! Brownian functionals and limit laws of the reduced rank estimators.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::asymcov;
use crate::error::{Error, Result};
use crate::matops::{self, Mat, Vector};
use crate::model::{self, VecmParams};

/// Default number of Euler steps for Brownian functionals.
pub const DEFAULT_N_STEPS: usize = 1000;

/// A `(seed, stream_id)` pair naming an independent ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// SplitMix64 finalizer, used to spread replicate indices over seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Stream `stream_id + i` under the same seed.
    pub fn offset(&self, i: u64) -> Self {
        RngStream { seed: self.seed, stream_id: self.stream_id.wrapping_add(i) }
    }

    /// An independent stream family for replicate `index`, with stream id 0.
    ///
    /// Different `(self, index)` pairs map to different seeds, so callers can
    /// use `offset` inside a replicate without collisions.
    pub fn replicate(&self, index: u64) -> Self {
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream { seed: splitmix64(mixed.wrapping_add(index)), stream_id: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    Original,
    QTransformed,
}

/// Observations `Y_0..Y_T` as the rows of a `(T+1) × p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub data: Mat,
    pub coords: Coordinates,
}

impl Trajectory {
    pub fn new(data: Mat, coords: Coordinates) -> Result<Self> {
        if data.nrows() < 2 || data.ncols() == 0 {
            return Err(Error::TooShort(format!("trajectory needs at least 2 rows, got {}", data.nrows())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Unstable(f64::INFINITY));
        }
        Ok(Trajectory { data, coords })
    }

    /// Number of transitions `T`.
    pub fn t(&self) -> usize {
        self.data.nrows() - 1
    }

    pub fn p(&self) -> usize {
        self.data.ncols()
    }

    /// Rows mapped by `Q`: `X_t = Q Y_t`.
    pub fn to_q(&self, q: &Mat) -> Trajectory {
        Trajectory { data: &self.data * q.transpose(), coords: Coordinates::QTransformed }
    }

    /// Rows mapped by an arbitrary matrix `M`: `Y_t ↦ M Y_t`.
    pub fn map(&self, m: &Mat) -> Trajectory {
        Trajectory { data: &self.data * m.transpose(), coords: self.coords }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let prefix = match self.coords {
            Coordinates::Original => "y",
            Coordinates::QTransformed => "x",
        };
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record((1..=self.p()).map(|i| format!("{prefix}{i}")))?;
        for row in self.data.row_iter() {
            wr.write_record(row.iter().map(|x| format!("{x:?}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parses a CSV with a header row and one numeric row per time index.
    pub fn read_csv<R: Read>(r: R) -> Result<Trajectory> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let header_len = match rd.headers() {
            Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.len(),
            Ok(_) => return Err(Error::Parse { row: 1, col: 1, msg: "missing header row".into() }),
            Err(e) => return Err(Error::Parse { row: 1, col: 1, msg: e.to_string() }),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, rec) in rd.records().enumerate() {
            // header is line 1, records start at line 2
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { row: line, col: 1, msg: e.to_string() })?;
            if rec.len() != header_len {
                return Err(Error::Parse {
                    row: line,
                    col: rec.len().min(header_len) + 1,
                    msg: format!("expected {header_len} fields, found {}", rec.len()),
                });
            }
            for (j, field) in rec.iter().enumerate() {
                let x: f64 = field.parse().map_err(|_| Error::Parse {
                    row: line,
                    col: j + 1,
                    msg: format!("not a number: {field:?}"),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse { row: line, col: j + 1, msg: "non-finite value".into() });
                }
                data.push(x);
            }
            rows += 1;
        }
        if rows < 2 {
            return Err(Error::Parse {
                row: rows + 2,
                col: 1,
                msg: format!("need at least 2 data rows, found {rows}"),
            });
        }
        Trajectory::new(Mat::from_row_slice(rows, header_len, &data), Coordinates::Original)
    }
}

/// Innovation distribution for [`simulate_vecm`].
#[derive(Clone, Copy)]
pub enum Noise<'a> {
    /// `N(0, Σ_Z)`.
    Gaussian,
    /// Uniform draws (with replacement) from the rows of the given matrix.
    Resample(&'a Mat),
    /// Fills the slice with one innovation vector.
    Custom(&'a (dyn Fn(&mut ChaCha8Rng, &mut [f64]) + Sync)),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOptions {
    /// Initial value `Y_0`; zero when absent.
    pub y0: Option<Vector>,
    /// Constant added to every `ΔY_t`.
    pub drift: Option<Vector>,
    /// Draw the stationary block of `X_0` from its stationary law instead of
    /// starting at zero.
    pub stationary_init: bool,
}

/// Runs the recursion
/// `Y_t = Y_{t−1} + ΠY_{t−1} + Σ_i Ψ_i ΔY_{t−i} + μ + Z_t` for `t = 1..T`
/// without any model checks. `ΔY_s` for `s ≤ 0` is taken as zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_core(
    pi: &Mat,
    lags: &[Mat],
    chol_l: &Mat,
    t: usize,
    rng: &mut ChaCha8Rng,
    noise: Noise<'_>,
    y0: &[f64],
    drift: Option<&[f64]>,
) -> Vec<f64> {
    let p = pi.nrows();
    // row-major copies for the inner loop
    let row_major =
        |m: &Mat| -> Vec<f64> { (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect() };
    let pi_rm = row_major(pi);
    let lags_rm: Vec<Vec<f64>> = lags.iter().map(row_major).collect();
    let l_rm = row_major(chol_l);
    let mut y = vec![0.0; (t + 1) * p];
    y[..p].copy_from_slice(y0);
    let mut e = vec![0.0; p];
    let mut z = vec![0.0; p];
    for s in 1..=t {
        match noise {
            Noise::Gaussian => {
                for v in e.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for i in 0..p {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += l_rm[i * p + j] * e[j];
                    }
                    z[i] = acc;
                }
            }
            Noise::Resample(res) => {
                let k = rng.random_range(0..res.nrows());
                for i in 0..p {
                    z[i] = res[(k, i)];
                }
            }
            Noise::Custom(f) => f(rng, &mut z),
        }
        let (prev, rest) = y.split_at_mut(s * p);
        let cur = &mut rest[..p];
        let yl = &prev[(s - 1) * p..s * p];
        for i in 0..p {
            let mut acc = yl[i] + z[i];
            for j in 0..p {
                acc += pi_rm[i * p + j] * yl[j];
            }
            if let Some(mu) = drift {
                acc += mu[i];
            }
            cur[i] = acc;
        }
        for (k, psi) in lags_rm.iter().enumerate() {
            let lag = k + 1;
            if s <= lag {
                break;
            }
            let a = &prev[(s - lag) * p..(s - lag + 1) * p];
            let b = &prev[(s - lag - 1) * p..(s - lag) * p];
            for i in 0..p {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += psi[i * p + j] * (a[j] - b[j]);
                }
                cur[i] += acc;
            }
        }
    }
    y
}

pub fn simulate_vecm(params: &VecmParams, t: usize, stream: RngStream, noise: Noise<'_>) -> Result<Trajectory> {
    simulate_vecm_with(params, t, stream, noise, &SimOptions::default())
}

pub fn simulate_vecm_with(
    params: &VecmParams,
    t: usize,
    stream: RngStream,
    noise: Noise<'_>,
    opts: &SimOptions,
) -> Result<Trajectory> {
    Simulator::new(params)?.run(t, stream, noise, opts)
}

/// Precomputed state for repeated simulation from one model.
pub struct Simulator<'a> {
    params: &'a VecmParams,
    chol_l: Mat,
}

impl<'a> Simulator<'a> {
    pub fn new(params: &'a VecmParams) -> Result<Self> {
        params.validate()?;
        let report = model::check_i1_conditions(params);
        if report.max_stationary_modulus > 1.0 {
            return Err(Error::Unstable(report.max_stationary_modulus));
        }
        if !report.is_i1(params.n()) {
            log::warn!(
                "model does not satisfy the I(1) conditions: {} unit roots for n = {}, stable = {}, a2 = {}",
                report.n_unit_roots,
                params.n(),
                report.stable,
                report.a2_ok
            );
        }
        let chol_l = matops::cholesky(&params.sigma_z)?.l();
        Ok(Simulator { params, chol_l })
    }

    pub fn run(&self, t: usize, stream: RngStream, noise: Noise<'_>, opts: &SimOptions) -> Result<Trajectory> {
        if t == 0 {
            return Err(Error::TooShort("T must be at least 1".into()));
        }
        let p = self.params.p();
        let mut rng = stream.rng();
        let mut y0 = match &opts.y0 {
            Some(v) if v.len() != p => return Err(Error::dims(format!("y0 has length {}, expected {p}", v.len()))),
            Some(v) => v.clone(),
            None => Vector::zeros(p),
        };
        if opts.stationary_init {
            if !self.params.lags.is_empty() {
                return Err(Error::Config("stationary initialization requires a model without lags".into()));
            }
            let mom = model::population_moments(self.params)?;
            let r = self.params.r();
            if r > 0 {
                let lx = matops::cholesky(&mom.sigma_x11)?.l();
                let e = Vector::from_fn(r, |_, _| rng.sample(StandardNormal));
                let x1 = lx * e;
                y0 += mom.qt.q_inv.columns(0, r) * x1;
            }
        }
        if let Some(mu) = &opts.drift {
            if mu.len() != p {
                return Err(Error::dims(format!("drift has length {}, expected {p}", mu.len())));
            }
        }
        if let Noise::Resample(res) = noise {
            if res.ncols() != p || res.nrows() == 0 {
                return Err(Error::dims(format!("residual pool is {:?}, expected m x {p}", res.shape())));
            }
        }
        let data = simulate_core(
            &self.params.pi(),
            &self.params.lags,
            &self.chol_l,
            t,
            &mut rng,
            noise,
            y0.as_slice(),
            opts.drift.as_ref().map(|v| v.as_slice()),
        );
        Trajectory::new(Mat::from_row_slice(t + 1, p, &data), Coordinates::Original)
    }
}

/// `n_trials` independent trajectories; trial `i` uses stream
/// `stream.offset(i)`, so trial 0 reproduces [`simulate_vecm`] on `stream`.
pub fn simulate_trials(params: &VecmParams, t: usize, n_trials: usize, stream: RngStream) -> Result<Vec<Trajectory>> {
    let sim = Simulator::new(params)?;
    (0..n_trials as u64).map(|i| sim.run(t, stream.offset(i), Noise::Gaussian, &SimOptions::default())).collect()
}

/// Discretized Brownian functionals from one path, together with an
/// independent Gaussian `V` when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianFunctionals {
    /// `n × n`.
    pub b: Mat,
    /// `r × n`.
    pub j12: Mat,
    /// `n × n`.
    pub j22: Mat,
    /// `p × r` with `vec V ~ N(0, Σ_X^{11} ⊗ Σ_U)`.
    pub v: Option<Mat>,
    /// `W_1` of the standard path.
    pub w1: Vector,
    /// `∫ W Wᵀ ds` (left-point sum).
    pub int_ww: Mat,
    /// `∫ W dWᵀ` (Itô, left-point sum).
    pub int_wdw: Mat,
}

/// Builds the functionals from standard normal increments `e` (one row per
/// step), with `ΔW_k = e_k / √N`. `sigma_u_sqrt` is `Σ_U^{1/2}`.
pub fn functionals_from_increments(sigma_u_sqrt: &Mat, r: usize, e: &Mat) -> Result<BrownianFunctionals> {
    let (n_steps, p) = e.shape();
    if sigma_u_sqrt.shape() != (p, p) {
        return Err(Error::dims(format!("Σ^(1/2) is {:?}, increments have {p} columns", sigma_u_sqrt.shape())));
    }
    if r >= p {
        return Err(Error::InvalidRank { rank: r, max: p.saturating_sub(1) });
    }
    if n_steps == 0 {
        return Err(Error::InvalidSteps(0));
    }
    let h = 1.0 / (n_steps as f64).sqrt();
    let mut w = vec![0.0; p];
    let mut ww = vec![0.0; p * p];
    let mut wdw = vec![0.0; p * p];
    let mut dw = vec![0.0; p];
    for k in 0..n_steps {
        for i in 0..p {
            dw[i] = e[(k, i)] * h;
        }
        for i in 0..p {
            let wi = w[i];
            if wi != 0.0 {
                for j in 0..p {
                    ww[i * p + j] += wi * w[j];
                    wdw[i * p + j] += wi * dw[j];
                }
            }
        }
        for i in 0..p {
            w[i] += dw[i];
        }
    }
    let inv_n = 1.0 / n_steps as f64;
    let int_ww = Mat::from_row_slice(p, p, &ww) * inv_n;
    let int_wdw = Mat::from_row_slice(p, p, &wdw);
    let n = p - r;
    let s = sigma_u_sqrt;
    let s_dt = s.columns(r, n).into_owned(); // Σ^{1/2} Dᵀ
    let b = matops::symmetrize(&(s_dt.transpose() * &int_ww * &s_dt));
    let j = s * int_wdw.transpose() * &s_dt;
    Ok(BrownianFunctionals {
        b,
        j12: j.rows(0, r).into_owned(),
        j22: j.rows(r, n).into_owned(),
        v: None,
        w1: Vector::from_vec(w),
        int_ww,
        int_wdw,
    })
}

/// Standard normal increments for one path.
pub fn draw_increments(p: usize, n_steps: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(n_steps, p, |_, _| rng.sample(StandardNormal))
}

/// One joint draw of `(B, J₁₂, J₂₂)` and, when `sigma_x11` is supplied, of
/// `V = Σ_U^{1/2}-style factor · Z · factorᵀ` with covariance
/// `Σ_X^{11} ⊗ Σ_U`, independent of the path.
pub fn sample_brownian_functionals(
    sigma_u: &Mat,
    r: usize,
    n_steps: usize,
    sigma_x11: Option<&Mat>,
    rng: &mut impl Rng,
) -> Result<BrownianFunctionals> {
    if n_steps < 100 {
        return Err(Error::InvalidSteps(n_steps));
    }
    let s = matops::pd_sqrt(sigma_u)?;
    let e = draw_increments(sigma_u.nrows(), n_steps, rng);
    let mut f = functionals_from_increments(&s, r, &e)?;
    if let Some(sx) = sigma_x11 {
        f.v = Some(draw_v(&matops::cholesky(sigma_u)?.l(), &matops::cholesky(sx)?.l(), rng));
    }
    Ok(f)
}

/// `L_U Z L_Xᵀ` with `Z` standard normal, so `vec V ~ N(0, Σ_X ⊗ Σ_U)`.
fn draw_v(l_u: &Mat, l_x: &Mat, rng: &mut impl Rng) -> Mat {
    let z = Mat::from_fn(l_u.nrows(), l_x.nrows(), |_, _| rng.sample(StandardNormal));
    l_u * z * l_x.transpose()
}

/// Which estimator's limit law to sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LimitSpec {
    /// Fixed-rank estimator `Γ̂_k`.
    Rank(usize),
    /// Weighted estimator with fixed weights.
    Weights(Vec<f64>),
}

impl LimitSpec {
    fn weights(&self, p: usize) -> Result<Vec<f64>> {
        match self {
            LimitSpec::Rank(k) if *k > p => Err(Error::InvalidRank { rank: *k, max: p }),
            LimitSpec::Rank(k) => Ok((0..p).map(|i| if i < *k { 1.0 } else { 0.0 }).collect()),
            LimitSpec::Weights(w) if w.len() != p => {
                Err(Error::InvalidWeights(format!("expected {p} weights, got {}", w.len())))
            }
            LimitSpec::Weights(w) => Ok(w.clone()),
        }
    }
}

/// Precomputed pieces of the limit law of a weighted (or fixed-rank)
/// estimator in Q-coordinates, scaled by `√T` on the first `r` columns and
/// by `T` on the last `n`.
pub struct LimitLaw {
    r: usize,
    p: usize,
    w: Vec<f64>,
    sigma_u_sqrt: Mat,
    l_u: Mat,
    l_x: Mat,
    sigma_x11_inv: Mat,
    su22_inv: Mat,
    /// `Σ_U^{12}(Σ_U^{22})⁻¹`.
    k12: Mat,
    c1w: Mat,
    /// Factor `F` with `F Fᵀ = ξ_wΞξ_wᵀ`, present unless `w_1 = … = w_r = 1`.
    gauss_factor: Option<Mat>,
    n_steps: usize,
}

impl LimitLaw {
    pub fn new(params: &VecmParams, spec: &LimitSpec, n_steps: usize) -> Result<Self> {
        if n_steps < 100 {
            return Err(Error::InvalidSteps(n_steps));
        }
        let (p, r) = (params.p(), params.r());
        if r == 0 || r == p {
            return Err(Error::InvalidRank { rank: r, max: p - 1 });
        }
        let w = spec.weights(p)?;
        let n = p - r;
        let mom = model::population_moments(params)?;
        let all_one = w[..r].iter().all(|&x| x == 1.0);
        let (c1w, gauss_factor) = if all_one {
            (Mat::identity(r, r), None)
        } else {
            let wa = asymcov::weight_asymptotics(params, &w)?;
            (wa.c1w, Some(psd_factor(&wa.cov)?))
        };
        let su = &mom.sigma_u;
        let su22 = su.view((r, r), (n, n)).into_owned();
        let su22_inv = matops::spd_inverse(&su22)?;
        let k12 = su.view((0, r), (r, n)) * &su22_inv;
        Ok(LimitLaw {
            r,
            p,
            w,
            sigma_u_sqrt: matops::pd_sqrt(su)?,
            l_u: matops::cholesky(su)?.l(),
            l_x: matops::cholesky(&mom.sigma_x11)?.l(),
            sigma_x11_inv: matops::spd_inverse(&mom.sigma_x11)?,
            su22_inv,
            k12,
            c1w,
            gauss_factor,
            n_steps,
        })
    }

    /// One draw of the `p × p` limit matrix.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Mat> {
        let (p, r) = (self.p, self.r);
        let n = p - r;
        let e = draw_increments(p, self.n_steps, rng);
        let f = functionals_from_increments(&self.sigma_u_sqrt, r, &e)?;
        let mut out = Mat::zeros(p, p);
        let left = match &self.gauss_factor {
            None => draw_v(&self.l_u, &self.l_x, rng) * &self.sigma_x11_inv,
            Some(fac) => {
                let z = Vector::from_fn(fac.ncols(), |_, _| rng.sample(StandardNormal));
                matops::unvec(&(fac * z), p, r)?
            }
        };
        out.columns_mut(0, r).copy_from(&left);
        let b_inv = matops::spd_inverse(&f.b)?;
        let jt12 = &f.j12 - &self.k12 * &f.j22;
        let jt22 = &self.k12 * &f.j22;
        let d2 = &self.w[r..];
        let c2w = if d2.iter().all(|&x| x == 0.0) {
            Mat::zeros(n, n)
        } else {
            let lower = f.j22.transpose() * &self.su22_inv * &f.j22;
            matops::gsym_eig(&lower, &f.b)?.weighted_projector(d2)
        };
        let top = &self.c1w * jt12 * b_inv + jt22 * &c2w;
        let bottom = &f.j22 * &c2w;
        out.view_mut((0, r), (r, n)).copy_from(&top);
        out.view_mut((r, r), (n, n)).copy_from(&bottom);
        Ok(out)
    }
}

/// Symmetric factor of a PSD matrix, clamping tiny negative eigenvalues.
fn psd_factor(cov: &Mat) -> Result<Mat> {
    let eig = matops::sym_eig(cov)?;
    let scale = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if eig.values.iter().any(|&v| v < -1e-8 * scale.max(1.0)) {
        return Err(Error::NotPositiveDefinite);
    }
    let root = eig.values.map(|v| v.max(0.0).sqrt());
    Ok(&eig.vectors * Mat::from_diagonal(&root))
}

/// `n_samples` independent draws of the limit law; draw `i` uses stream
/// `stream.offset(i)`.
pub fn sample_limit_law(
    params: &VecmParams,
    spec: &LimitSpec,
    n_samples: usize,
    n_steps: usize,
    stream: RngStream,
) -> Result<Vec<Mat>> {
    use rayon::prelude::*;
    let law = LimitLaw::new(params, spec, n_steps)?;
    (0..n_samples as u64).into_par_iter().map(|i| law.sample(&mut stream.offset(i).rng())).collect()
}
