//! Likelihood-ratio statistics, sequential rank selection, bootstrap and
//! asymptotic critical values, and data-driven weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{self, Drift, ReducedRank, WeightVector};
use crate::matops::{self, Mat};
use crate::simulate::{self, Noise, RngStream, Trajectory};

pub const DEFAULT_BOOTSTRAP_B: usize = 299;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    /// `H(k)` against `H(p)`.
    #[default]
    Trace,
    /// `H(k)` against `H(k+1)`.
    MaxEig,
}

/// `lr_0, …, lr_{p−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSequence {
    pub kind: LrKind,
    pub values: Vec<f64>,
    pub t_effective: usize,
}

impl LrSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CvSource {
    Bootstrap { b: usize, alpha: f64 },
    Asymptotic { alpha: f64, n_sims: usize, n_steps: usize },
    User,
}

/// `c_0, …, c_{p−1}`, one per hypothesis `H(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    pub values: Vec<f64>,
    pub source: CvSource,
}

impl CriticalValues {
    pub fn user(values: Vec<f64>) -> Result<Self> {
        if let Some(c) = values.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::Config(format!("critical values must be finite and nonnegative, got {c}")));
        }
        Ok(CriticalValues { values, source: CvSource::User })
    }
}

/// Trace: `lr_k = −T Σ_{i>k} log(1 − λ̂_i)`. Max-eig:
/// `lr_k = −T log(1 − λ̂_{k+1})`.
pub fn lr_statistics(eigenvalues: &[f64], t_effective: usize, kind: LrKind) -> Result<LrSequence> {
    if let Some(&l) = eigenvalues.iter().find(|l| !(**l < 1.0 && **l >= 0.0)) {
        return Err(Error::EigenvalueOutOfRange(l));
    }
    let t = t_effective as f64;
    let terms: Vec<f64> = eigenvalues.iter().map(|l| -t * (-l).ln_1p()).collect();
    let values = match kind {
        LrKind::MaxEig => terms,
        LrKind::Trace => {
            let mut out = vec![0.0; terms.len()];
            let mut acc = 0.0;
            for k in (0..terms.len()).rev() {
                acc += terms[k];
                out[k] = acc;
            }
            out
        }
    };
    Ok(LrSequence { kind, values, t_effective })
}

/// `min(inf{k : lr_k ≤ c_k}, p)`.
pub fn select_rank(lr: &LrSequence, c: &CriticalValues) -> Result<usize> {
    if lr.len() != c.values.len() {
        return Err(Error::dims(format!("{} statistics but {} critical values", lr.len(), c.values.len())));
    }
    Ok(lr.values.iter().zip(&c.values).position(|(l, c)| l <= c).unwrap_or(lr.len()))
}

fn running_min(mut w: Vec<f64>) -> Vec<f64> {
    for i in 1..w.len() {
        w[i] = w[i].min(w[i - 1]);
    }
    w
}

/// `w_i = 1` iff `i ≤ r̂`.
pub fn weights_hard(lr: &LrSequence, c: &CriticalValues) -> Result<WeightVector> {
    let r = select_rank(lr, c)?;
    Ok(WeightVector::hard(r, lr.len()))
}

/// `w_i = 1 − exp(−a1 T^{−a2} lr_{i−1})`.
pub fn weights_exp(lr: &LrSequence, a1: f64, a2: f64) -> Result<WeightVector> {
    if !(a1 > 0.0 && a1.is_finite() && a2 >= 0.0 && a2.is_finite()) {
        return Err(Error::Config(format!("exp weights need a1 > 0 and a2 >= 0, got a1 = {a1}, a2 = {a2}")));
    }
    let scale = a1 * (lr.t_effective as f64).powf(-a2);
    let w = lr.values.iter().map(|l| -(-scale * l).exp_m1()).collect();
    WeightVector::new(running_min(w))
}

/// `τ(x) = (erf(x) + 1)/2`.
pub fn sigmoid(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * (libm::erf(x) + 1.0)
}

/// `w_i = τ(a(lr_{i−1} − c_{i−1}))`, followed by a running minimum so the
/// weights are nonincreasing.
pub fn weights_sigmoid(lr: &LrSequence, c: &CriticalValues, a: f64) -> Result<WeightVector> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::Config(format!("sigmoid weights need a > 0, got {a}")));
    }
    if lr.len() != c.values.len() {
        return Err(Error::dims(format!("{} statistics but {} critical values", lr.len(), c.values.len())));
    }
    let w = lr.values.iter().zip(&c.values).map(|(l, c)| sigmoid(a * (l - c))).collect();
    WeightVector::new(running_min(w))
}

/// Empirical `(1 − α)` quantile `x_(⌈(B+1)(1−α)⌉)` of unsorted draws.
pub fn upper_quantile(draws: &mut [f64], alpha: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Config("no draws for quantile".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    draws.sort_by(f64::total_cmp);
    let b = draws.len();
    let idx = (((b + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    Ok(draws[idx.clamp(1, b) - 1])
}

/// Trace statistic `tr((∫WdWᵀ)ᵀ(∫WWᵀ)⁻¹∫WdWᵀ)` of one discretized standard
/// Brownian path of dimension `d`.
fn trace_functional(d: usize, n_steps: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    let e = simulate::draw_increments(d, n_steps, rng);
    let f = simulate::functionals_from_increments(&Mat::identity(d, d), 0, &e)?;
    let chol = matops::cholesky(&f.int_ww)?;
    let x = chol.solve(&f.int_wdw);
    Ok((f.int_wdw.transpose() * x).trace())
}

/// Draws of the asymptotic trace statistic under each `H(k)`, `k = 0..p−1`,
/// in the model without deterministic terms. Entry `k` holds `n_sims` draws
/// for dimension `p − k`, taken from `stream.replicate(p − k)`.
pub fn asymptotic_trace_draws(p: usize, n_sims: usize, n_steps: usize, stream: RngStream) -> Result<Vec<Vec<f64>>> {
    if n_steps < 100 {
        return Err(Error::InvalidSteps(n_steps));
    }
    if n_sims == 0 {
        return Err(Error::Config("n_sims must be positive".into()));
    }
    (0..p)
        .map(|k| {
            let d = p - k;
            let sub = stream.replicate(d as u64);
            (0..n_sims as u64)
                .into_par_iter()
                .map(|i| trace_functional(d, n_steps, &mut sub.offset(i).rng()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// `(1 − α)` quantiles of draws from [`asymptotic_trace_draws`].
pub fn critical_values_from_draws(draws: &[Vec<f64>], alpha: f64, n_steps: usize) -> Result<CriticalValues> {
    let n_sims = draws.first().map_or(0, |d| d.len());
    let values = draws.iter().map(|d| upper_quantile(&mut d.clone(), alpha)).collect::<Result<Vec<f64>>>()?;
    Ok(CriticalValues { values, source: CvSource::Asymptotic { alpha, n_sims, n_steps } })
}

/// Simulated `(1 − α)` quantiles of the asymptotic trace statistic under
/// each `H(k)`, `k = 0..p−1`, in the model without deterministic terms.
pub fn asymptotic_trace_critical_values(
    p: usize,
    alpha: f64,
    n_sims: usize,
    n_steps: usize,
    stream: RngStream,
) -> Result<CriticalValues> {
    let draws = asymptotic_trace_draws(p, n_sims, n_steps, stream)?;
    critical_values_from_draws(&draws, alpha, n_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub b: usize,
    pub alpha: f64,
    pub kind: LrKind,
    pub drift: Drift,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions { b: DEFAULT_BOOTSTRAP_B, alpha: DEFAULT_ALPHA, kind: LrKind::Trace, drift: Drift::None }
    }
}

/// Statistics of observed data, reused across hypotheses.
pub struct BootstrapData<'a> {
    trials: &'a [Trajectory],
    rr: ReducedRank,
    pub lr: LrSequence,
    opts: BootstrapOptions,
}

impl<'a> BootstrapData<'a> {
    pub fn new(trials: &'a [Trajectory], opts: BootstrapOptions) -> Result<Self> {
        if opts.b == 0 {
            return Err(Error::Config("bootstrap needs B >= 1".into()));
        }
        if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
        }
        let s = estimate::cross_covariances(trials, opts.drift)?;
        let t = s.t_effective;
        let rr = ReducedRank::new(s)?;
        let lr = lr_statistics(rr.eig.values.as_slice(), t, opts.kind)?;
        Ok(BootstrapData { trials, rr, lr, opts })
    }

    /// Bootstrap `(1 − α)` quantile of `lr_k` under the fitted `H(k)`.
    ///
    /// Residuals of the rank-`k` fit are pooled across trials, recentered and
    /// resampled i.i.d.; each bootstrap trial restarts from the observed
    /// `Y_0` and runs the fitted recursion. Draws whose statistic cannot be
    /// computed are skipped.
    pub fn critical_value(&self, k: usize, stream: RngStream) -> Result<f64> {
        let p = self.rr.p();
        if k >= p {
            return Err(Error::InvalidRank { rank: k, max: p - 1 });
        }
        let pi_k = self.rr.pi_rank(k)?;
        let mu = match self.opts.drift {
            Drift::None => None,
            Drift::Constant => Some(self.rr.s.intercept(&pi_k)),
        };
        let mut rows = Vec::new();
        for tr in self.trials {
            for t in 1..=tr.t() {
                let y = tr.data.row(t - 1).transpose();
                let mut e = tr.data.row(t).transpose() - &y - &pi_k * &y;
                if let Some(m) = &mu {
                    e -= m;
                }
                rows.push(e);
            }
        }
        let n = rows.len();
        let mut res = Mat::zeros(n, p);
        for (i, e) in rows.iter().enumerate() {
            res.row_mut(i).copy_from(&e.transpose());
        }
        let mean = res.row_mean();
        for mut row in res.row_iter_mut() {
            row -= &mean;
        }
        let unused_l = Mat::identity(p, p);
        let drift = mu.as_ref().map(|m| m.as_slice().to_vec());
        let draws: Vec<Option<f64>> = (0..self.opts.b as u64)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream.offset(j).rng();
                let boot: Vec<Trajectory> = self
                    .trials
                    .iter()
                    .map(|tr| {
                        let y0: Vec<f64> = tr.data.row(0).iter().copied().collect();
                        let data = simulate::simulate_core(
                            &pi_k,
                            &[],
                            &unused_l,
                            tr.t(),
                            &mut rng,
                            Noise::Resample(&res),
                            &y0,
                            drift.as_deref(),
                        );
                        Trajectory::new(Mat::from_row_slice(tr.t() + 1, p, &data), tr.coords)
                    })
                    .collect::<Result<_>>()
                    .ok()?;
                if boot.iter().any(|b| b.data.iter().any(|x| !x.is_finite())) {
                    return None;
                }
                let s = estimate::cross_covariances(&boot, self.opts.drift).ok()?;
                let t = s.t_effective;
                let eig = estimate::coint_eig(&s).ok()?;
                let lr = lr_statistics(eig.values.as_slice(), t, self.opts.kind).ok()?;
                Some(lr.values[k]).filter(|v| v.is_finite())
            })
            .collect();
        let mut ok: Vec<f64> = draws.into_iter().flatten().collect();
        let skipped = self.opts.b - ok.len();
        if skipped > 0 {
            log::warn!("bootstrap for H({k}): skipped {skipped} of {} draws", self.opts.b);
        }
        if 2 * ok.len() < self.opts.b {
            return Err(Error::BootstrapFailed { ok: ok.len(), requested: self.opts.b });
        }
        upper_quantile(&mut ok, self.opts.alpha)
    }

    fn stream_for(stream: RngStream, k: usize) -> RngStream {
        stream.replicate(k as u64)
    }

    /// Critical values for every hypothesis `H(0)..H(p−1)`.
    pub fn critical_values(&self, stream: RngStream) -> Result<CriticalValues> {
        let values = (0..self.rr.p())
            .map(|k| self.critical_value(k, Self::stream_for(stream, k)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(CriticalValues { values, source: CvSource::Bootstrap { b: self.opts.b, alpha: self.opts.alpha } })
    }

    /// Sequential testing that bootstraps `c_k` only for the hypotheses it
    /// reaches. Returns `r̂` and the critical values computed on the way;
    /// the result equals `select_rank` with the full set.
    pub fn select_rank_sequential(&self, stream: RngStream) -> Result<(usize, Vec<f64>)> {
        let p = self.rr.p();
        let mut cs = Vec::new();
        for k in 0..p {
            let c = self.critical_value(k, Self::stream_for(stream, k))?;
            cs.push(c);
            if self.lr.values[k] <= c {
                return Ok((k, cs));
            }
        }
        Ok((p, cs))
    }
}

pub fn bootstrap_critical_values(
    trials: &[Trajectory],
    opts: BootstrapOptions,
    stream: RngStream,
) -> Result<CriticalValues> {
    BootstrapData::new(trials, opts)?.critical_values(stream)
}
