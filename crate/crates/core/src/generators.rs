//! Parameter generators for the simulation studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::matops::{self, Mat};
use crate::model::{self, VecmParams};

/// Diagonal `Γ_c` with a third of the entries at `−1.5`, a third at `−c/T`
/// and a third at zero. `Σ_Z = I_p`.
///
/// For `c = 0` the middle third is a unit-root block and the rank drops to
/// `p/3`.
pub fn gamma_c(p: usize, c: f64, t: usize) -> Result<VecmParams> {
    if p == 0 || !p.is_multiple_of(3) {
        return Err(Error::Config(format!("gamma_c needs p divisible by 3, got {p}")));
    }
    if !(c >= 0.0 && c.is_finite()) || t == 0 {
        return Err(Error::Config(format!("gamma_c needs c >= 0 and T >= 1, got c = {c}, T = {t}")));
    }
    let third = p / 3;
    let diag: Vec<f64> = (0..p)
        .map(|i| {
            if i < third {
                -1.5
            } else if i < 2 * third {
                -c / t as f64
            } else {
                0.0
            }
        })
        .collect();
    let active: Vec<usize> = (0..p).filter(|&i| diag[i] != 0.0).collect();
    let r = active.len();
    let mut alpha = Mat::zeros(p, r);
    let mut beta = Mat::zeros(p, r);
    for (j, &i) in active.iter().enumerate() {
        alpha[(i, j)] = diag[i];
        beta[(i, j)] = 1.0;
    }
    VecmParams::new(alpha, beta, Mat::identity(p, p), vec![])
}

/// The `p = 4`, `r = 2` model of the distribution study with
/// `Σ_Z = I + ½UUᵀ`, `U_{ij} ~ Unif[0, 1]` drawn from `seed`.
pub fn appc2(seed: u64) -> Result<VecmParams> {
    let alpha = Mat::from_row_slice(4, 2, &[-0.7, 0.0, 0.0, -0.7, 0.0, 0.0, 0.0, 0.0]);
    let beta = Mat::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new(0.0, 1.0).expect("valid range");
    let u = Mat::from_fn(4, 4, |_, _| rng.sample(unif));
    let sigma_z = Mat::identity(4, 4) + &u * u.transpose() * 0.5;
    VecmParams::new(alpha, beta, matops::symmetrize(&sigma_z), vec![])
}

/// Squared-eigenvalue grid `λ_k = λ_min + (λ_max − λ_min)(k − 1)/(r − 1)`
/// with `λ_max = 0.81 − λ_min`, ascending.
pub fn appc3_grid(lambda_min: f64, r: usize) -> Vec<f64> {
    let lambda_max = 0.81 - lambda_min;
    if r == 1 {
        return vec![lambda_min];
    }
    (0..r).map(|k| lambda_min + (lambda_max - lambda_min) * k as f64 / (r - 1) as f64).collect()
}

/// `β = (I_r; 0)`, `α = (−2D; 0)` with `D = diag(√λ_k)` and `Σ_Z = I_p`.
pub fn appc3(lambda_min: f64, p: usize, r: usize) -> Result<VecmParams> {
    if r == 0 || r > p {
        return Err(Error::Config(format!("appc3 needs 1 <= r <= p, got p = {p}, r = {r}")));
    }
    if !(lambda_min > 0.0 && lambda_min < 0.405) {
        return Err(Error::Config(format!("appc3 needs 0 < lambda_min < 0.405, got {lambda_min}")));
    }
    let grid = appc3_grid(lambda_min, r);
    let beta = Mat::identity(p, r);
    let mut alpha = Mat::zeros(p, r);
    for (k, l) in grid.iter().enumerate() {
        alpha[(k, k)] = -2.0 * l.sqrt();
    }
    VecmParams::new(alpha, beta, Mat::identity(p, p), vec![])
}

/// `‖Π‖_F²` of [`appc3`] in closed form: `4 Σ_k λ_k = 2r(λ_min + λ_max)`.
pub fn appc3_pi_norm_sq(r: usize) -> f64 {
    2.0 * r as f64 * 0.81
}

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// A random model satisfying the I(1) assumptions with simple population
/// eigenvalues, a well-conditioned `Σ_Z` and stationary dynamics whose
/// spectral radius is at most 0.8.
pub fn random_admissible(p: usize, r: usize, rng: &mut impl Rng) -> Result<VecmParams> {
    if r > p || p == 0 {
        return Err(Error::InvalidRank { rank: r, max: p });
    }
    for _ in 0..1000 {
        let beta = randn(rng, p, r);
        let a = randn(rng, r, r);
        let rho = match matops::spectral_radius(&a) {
            Ok(rho) => rho.max(1e-3),
            Err(_) => continue,
        };
        let scale = rng.random_range(0.1..0.8) / rho;
        let c = a * scale - Mat::identity(r, r);
        let btb_inv = match matops::spd_inverse(&(beta.transpose() * &beta)) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let mut alpha = &beta * btb_inv * &c;
        if r < p {
            let bp = matops::orth_complement(&beta)?;
            alpha += bp * randn(rng, p - r, r) * 0.5;
        }
        let l = randn(rng, p, p);
        let sigma_z = matops::symmetrize(&(Mat::identity(p, p) + &l * l.transpose() * (0.5 / p as f64)));
        let params = match VecmParams::new(alpha, beta, sigma_z, vec![]) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let rep = model::check_i1_conditions(&params);
        if !rep.is_i1(p - r) || rep.a3_ok != Some(true) {
            continue;
        }
        if r > 0 {
            let eig = model::population_eigs(&params)?;
            let gap = (1..r).map(|i| eig.lambda11[i - 1] - eig.lambda11[i]).fold(f64::INFINITY, f64::min);
            if gap < 0.02 || eig.lambda11[r - 1] < 0.02 {
                continue;
            }
        }
        return Ok(params);
    }
    Err(Error::Config("could not draw an admissible model".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_c_shapes() {
        let m = gamma_c(3, 10.0, 100).unwrap();
        assert_eq!(m.r(), 2);
        let pi = m.pi();
        assert_eq!(pi[(0, 0)], -1.5);
        assert!((pi[(1, 1)] + 0.1).abs() < 1e-15);
        assert_eq!(pi[(2, 2)], 0.0);
        assert_eq!(gamma_c(9, 0.0, 100).unwrap().r(), 3);
        assert!(gamma_c(4, 1.0, 100).is_err());
    }

    #[test]
    fn appc3_norm_identity() {
        for lmin in [0.01, 0.03, 0.1, 0.3] {
            for (p, r) in [(8, 4), (40, 20)] {
                let m = appc3(lmin, p, r).unwrap();
                let nsq = m.pi().norm_squared();
                assert!((nsq - appc3_pi_norm_sq(r)).abs() < 1e-12);
                let sum: f64 = appc3_grid(lmin, r).iter().sum();
                assert!((sum - r as f64 * 0.405).abs() < 1e-12);
            }
            // at the printed scale the grid sum is 10(λ_min + λ_max) = 8.1
            let s: f64 = appc3_grid(lmin, 20).iter().sum();
            assert!((s - 8.1).abs() < 1e-12);
        }
    }

    #[test]
    fn appc2_sigma_is_seeded() {
        assert_eq!(appc2(1).unwrap(), appc2(1).unwrap());
        assert_ne!(appc2(1).unwrap().sigma_z, appc2(2).unwrap().sigma_z);
    }
}
