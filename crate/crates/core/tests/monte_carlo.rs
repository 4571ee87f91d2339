//! Monte Carlo checks of the closed-form asymptotics against simulation.

use coint_rrr::asymcov;
use coint_rrr::estimate::{self, Drift, ReducedRank, WeightVector};
use coint_rrr::generators;
use coint_rrr::matops::{self, Mat, Vector};
use coint_rrr::model;
use coint_rrr::rank::{self, BootstrapData, BootstrapOptions, LrKind};
use coint_rrr::simulate::{Noise, RngStream, SimOptions, Simulator};
use coint_rrr::stats;
use rayon::prelude::*;

fn covariance(samples: &[Vector]) -> Mat {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean = samples.iter().fold(Vector::zeros(d), |acc, s| acc + s) / n;
    let mut cov = Mat::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    cov / (n - 1.0)
}

#[test]
fn xi_matches_covariance_of_sample_moments() {
    let params = generators::appc2(0).unwrap();
    let (p, r) = (params.p(), params.r());
    let d = p + r;
    let qt = model::q_transform(&params).unwrap();
    let sigma = model::population_moments(&params).unwrap().sigma_xtilde();
    let xi = asymcov::big_xi(&params, 1e-12).unwrap().xi;
    let sim = Simulator::new(&params).unwrap();
    let opts = SimOptions { stationary_init: true, ..Default::default() };
    let t = 2000;
    let base = RngStream::new(7, 0);
    let samples: Vec<Vector> = (0..600u64)
        .into_par_iter()
        .map(|j| {
            let x = sim.run(t, base.offset(j), Noise::Gaussian, &opts).unwrap().to_q(&qt.q).data;
            let mut s = Mat::zeros(d, d);
            for i in 1..=t {
                let mut v = Vector::zeros(d);
                for a in 0..p {
                    v[a] = x[(i, a)] - x[(i - 1, a)];
                }
                for a in 0..r {
                    v[p + a] = x[(i - 1, a)];
                }
                s += &v * v.transpose();
            }
            matops::vec(&((s / t as f64 - &sigma) * (t as f64).sqrt()))
        })
        .collect();
    let emp = covariance(&samples);
    let mut worst: f64 = 0.0;
    let mut mean_rel = 0.0;
    for i in 0..d * d {
        let rel = (emp[(i, i)] - xi[(i, i)]).abs() / xi[(i, i)];
        worst = worst.max(rel);
        mean_rel += rel / (d * d) as f64;
    }
    // variance estimates from 600 draws carry about 6% relative noise
    assert!(mean_rel < 0.08, "mean relative error {mean_rel}");
    assert!(worst < 0.3, "worst relative error {worst}");
    assert!((&emp - &xi).norm() / xi.norm() < 0.15);
}

#[test]
fn sample_autocovariances_converge_to_closed_form() {
    let params = generators::appc2(3).unwrap();
    let (p, r) = (params.p(), params.r());
    let d = p + r;
    let qt = model::q_transform(&params).unwrap();
    let sim = Simulator::new(&params).unwrap();
    let opts = SimOptions { stationary_init: true, ..Default::default() };
    let t = 100_000;
    let x = sim.run(t, RngStream::new(11, 0), Noise::Gaussian, &opts).unwrap().to_q(&qt.q).data;
    let xt = |i: usize| -> Vector {
        let mut v = Vector::zeros(d);
        for a in 0..p {
            v[a] = x[(i, a)] - x[(i - 1, a)];
        }
        for a in 0..r {
            v[p + a] = x[(i - 1, a)];
        }
        v
    };
    for k in 0..3usize {
        let mut g = Mat::zeros(d, d);
        for i in 1 + k..=t {
            // γ_k = E(X̃_0 X̃_kᵀ)
            g += xt(i - k) * xt(i).transpose();
        }
        g /= (t - k) as f64;
        let exact = asymcov::acov_xtilde(&params, k as i64).unwrap();
        let scale = asymcov::acov_xtilde(&params, 0).unwrap().norm();
        assert!((&g - &exact).norm() / scale < 0.03, "lag {k}: {}", (&g - &exact).norm() / scale);
    }
}

#[test]
fn weighted_bias_matches_closed_form() {
    let params = generators::appc2(0).unwrap();
    let (p, r) = (params.p(), params.r());
    let qt = model::q_transform(&params).unwrap();
    let w = vec![1.0, 0.5, 0.25, 0.0];
    let asy = asymcov::weight_asymptotics(&params, &w).unwrap();
    let hard = model::asymptotic_bias(&params, 1).unwrap();
    let sim = Simulator::new(&params).unwrap();
    let t = 20_000;
    let n = 40;
    let base = RngStream::new(5, 0);
    let (devs_w, devs_1): (Vec<Mat>, Vec<Mat>) = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let y = sim.run(t, base.offset(j), Noise::Gaussian, &SimOptions::default()).unwrap();
            let s = estimate::cross_covariances(&[y.to_q(&qt.q)], Drift::None).unwrap();
            let rr = ReducedRank::new(s).unwrap();
            let gw = rr.pi_weighted(&WeightVector::new(w.clone()).unwrap()).unwrap() - &qt.gamma;
            let g1 = rr.pi_rank(1).unwrap() - &qt.gamma;
            (gw.view((0, 0), (r, r)).into_owned(), g1.view((0, 0), (r, r)).into_owned())
        })
        .unzip();
    let mean = |v: &[Mat]| v.iter().fold(Mat::zeros(r, r), |a, m| a + m) / v.len() as f64;
    let (mw, m1) = (mean(&devs_w), mean(&devs_1));
    // sampling error of the mean is O(1/√(nT)) ≈ 0.001
    assert!((&mw - &asy.b_w).norm() < 0.02 + 0.05 * asy.b_w.norm(), "{mw} vs {}", asy.b_w);
    assert!((&m1 - &hard.b_m).norm() < 0.02 + 0.05 * hard.b_m.norm(), "{m1} vs {}", hard.b_m);
    assert!(asy.b_w.norm() > 0.1, "bias should be visible");
    assert_eq!(p, w.len());
}

#[test]
fn random_walk_trace_statistic_matches_asymptotic_law() {
    // p = 3, r = 1: lr_1 at T = 500 against the two-dimensional
    // Brownian functional
    let params = generators::gamma_c(3, 0.0, 1).unwrap();
    let sim = Simulator::new(&params).unwrap();
    let base = RngStream::new(21, 0);
    let n = 1500;
    let sample: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let y = sim.run(500, base.offset(j), Noise::Gaussian, &SimOptions::default()).unwrap();
            let s = estimate::cross_covariances(&[y], Drift::None).unwrap();
            let t = s.t_effective;
            let rr = ReducedRank::new(s).unwrap();
            let lr = rank::lr_statistics(rr.eig.values.as_slice(), t, LrKind::Trace).unwrap();
            lr.values[1]
        })
        .collect();
    let draws = rank::asymptotic_trace_draws(2, n, 1000, RngStream::new(22, 0)).unwrap();
    // entry k holds dimension p − k, so entry 0 is the two-dimensional law
    let ks = stats::ks_two_sample(&sample, &draws[0]);
    assert!(ks.p_value > 0.001, "{ks:?}");
}

#[test]
fn bootstrap_test_has_roughly_nominal_size() {
    let params = generators::gamma_c(3, 0.0, 1).unwrap();
    let sim = Simulator::new(&params).unwrap();
    let base = RngStream::new(31, 0);
    let opts = BootstrapOptions { b: 99, alpha: 0.1, kind: LrKind::Trace, drift: Drift::None };
    let n = 200;
    // true rank is 1; count rejections of H(1)
    let rejections: usize = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let y = sim.run(100, base.replicate(0).offset(j), Noise::Gaussian, &SimOptions::default()).unwrap();
            let trials = [y];
            let data = BootstrapData::new(&trials, opts).unwrap();
            let cv = data.critical_value(1, base.replicate(1).offset(j)).unwrap();
            usize::from(data.lr.values[1] > cv)
        })
        .sum();
    let rate = rejections as f64 / n as f64;
    // Binomial(200, 0.1) has sd 0.021
    assert!((0.03..=0.2).contains(&rate), "rejection rate {rate}");
}
