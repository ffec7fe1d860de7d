//! Brute-force reference computations used to validate the fast paths.
//!
//! Nothing here calls into the denoisers or the state-evolution code; the
//! only shared pieces are the channel densities and the seed streams.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{AmpError, Result};
use crate::linalg::{Mat, Vector};
use crate::model::Channel;
use crate::seed;

/// Grid half-width in standard deviations of the integrating Gaussian.
pub const GRID_HALF_WIDTH: f64 = 6.0;
/// Largest relative change tolerated when the grid spacing is halved.
pub const GRID_REFINEMENT_TOLERANCE: f64 = 1e-3;
/// Largest number of non-degenerate directions integrated on a grid.
pub const GRID_MAX_RANK: usize = 3;

/// Central-difference Jacobian, row i holding the gradient of output i.
pub fn fd_jacobian<F>(f: F, x: &Vector, h: f64) -> Mat
where
    F: Fn(&Vector) -> Vector,
{
    assert!(h > 0.0, "step must be positive");
    let m = f(x).len();
    let mut jac = Mat::zeros(m, x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += h;
        minus[j] -= h;
        jac.set_column(j, &((f(&plus) - f(&minus)) / (2.0 * h)));
    }
    jac
}

#[derive(Debug, Clone)]
pub struct GridEstimate {
    pub mean: Vector,
    /// Relative change against the grid with twice the spacing.
    pub refinement_change: f64,
}

/// E[Z | data] for Z ~ N(mean, cov) reweighted by exp(log_lik(z)), by the
/// trapezoid rule on a grid in the eigenbasis of `cov`, checked against the
/// same rule at half the resolution.
pub fn grid_gaussian_posterior<F>(
    mean: &Vector,
    cov: &Mat,
    log_lik: F,
    nodes: usize,
) -> Result<GridEstimate>
where
    F: Fn(&Vector) -> f64 + Sync,
{
    if nodes < 3 {
        return Err(AmpError::Oracle("grid needs at least 3 nodes".into()));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.amax();
    let directions: Vec<(Vector, f64)> = (0..cov.nrows())
        .filter(|&i| eig.eigenvalues[i] > 1e-14 * top.max(f64::MIN_POSITIVE))
        .map(|i| (eig.eigenvectors.column(i).into_owned(), eig.eigenvalues[i].sqrt()))
        .collect();
    if directions.is_empty() {
        return Ok(GridEstimate {
            mean: mean.clone(),
            refinement_change: 0.0,
        });
    }
    if directions.len() > GRID_MAX_RANK {
        return Err(AmpError::Oracle(format!(
            "grid integration supports at most {GRID_MAX_RANK} directions, got {}",
            directions.len()
        )));
    }
    let coarse_nodes = nodes.div_ceil(2).max(3);
    let fine_nodes = 2 * coarse_nodes - 1;
    let coarse = trapezoid(mean, &directions, &log_lik, coarse_nodes)?;
    let fine = trapezoid(mean, &directions, &log_lik, fine_nodes.max(nodes))?;
    let scale = fine.norm().max(cov.trace().sqrt());
    let change = (&fine - &coarse).norm() / scale;
    if !(change <= GRID_REFINEMENT_TOLERANCE) {
        return Err(AmpError::Oracle(format!(
            "grid refinement changed the estimate by {change:.2e}"
        )));
    }
    Ok(GridEstimate {
        mean: fine,
        refinement_change: change,
    })
}

fn trapezoid<F>(mean: &Vector, directions: &[(Vector, f64)], log_lik: &F, nodes: usize) -> Result<Vector>
where
    F: Fn(&Vector) -> f64 + Sync,
{
    let r = directions.len();
    let step = 2.0 * GRID_HALF_WIDTH / (nodes - 1) as f64;
    let total = nodes.pow(r as u32);
    let point = |index: usize| -> (Vector, f64) {
        let mut z = mean.clone();
        let mut log_w = 0.0;
        let mut rest = index;
        for (v, sd) in directions {
            let i = rest % nodes;
            rest /= nodes;
            let t = -GRID_HALF_WIDTH + step * i as f64;
            z.axpy(t * sd, v, 1.0);
            log_w -= 0.5 * t * t;
            if i == 0 || i == nodes - 1 {
                log_w += 0.5f64.ln();
            }
        }
        let ll = log_lik(&z);
        (z, log_w + ll)
    };
    let logs: Vec<f64> = (0..total).into_par_iter().map(|i| point(i).1).collect();
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(AmpError::Oracle("likelihood vanishes on the whole grid".into()));
    }
    let (num, den) = (0..total)
        .into_par_iter()
        .map(|i| {
            let (z, lw) = point(i);
            let w = (lw - shift).exp();
            (z * w, w)
        })
        .reduce(
            || (Vector::zeros(mean.len()), 0.0),
            |(a, wa), (b, wb)| (a + b, wa + wb),
        );
    Ok(num / den)
}

fn conditional_law(sigma: &Mat, u: &Vector) -> Result<(Vector, Mat)> {
    let l = sigma.nrows() / 2;
    if sigma.shape() != (2 * l, 2 * l) || u.len() != l {
        return Err(AmpError::shape("Σ must be 2L×2L and u of length L"));
    }
    let s11 = sigma.view((0, 0), (l, l)).into_owned();
    let s12 = sigma.view((0, l), (l, l)).into_owned();
    let s22 = sigma.view((l, l), (l, l)).into_owned();
    let s22_inv = s22
        .pseudo_inverse(1e-12 * sigma.amax().max(f64::MIN_POSITIVE))
        .map_err(|e| AmpError::Oracle(e.to_string()))?;
    let a = &s12 * s22_inv;
    let cov = &s11 - &a * s12.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((a * u, cov))
}

/// E[Z | Z^k = u, Ȳ = y] for (Z, Z^k) ~ N(0, Σ) by grid integration.
pub fn grid_posterior_mean(
    channel: &Channel,
    sigma: &Mat,
    u: &Vector,
    y: f64,
    nodes: usize,
) -> Result<GridEstimate> {
    let (mean, cov) = conditional_law(sigma, u)?;
    grid_gaussian_posterior(&mean, &cov, |z| channel.log_likelihood(y, z.as_slice()), nodes)
}

/// E[Z | Ȳ = y] for Z ~ N(0, Σ₁₁) by grid integration.
pub fn grid_posterior_mean_given_y(
    channel: &Channel,
    sigma11: &Mat,
    y: f64,
    nodes: usize,
) -> Result<GridEstimate> {
    let mean = Vector::zeros(sigma11.nrows());
    grid_gaussian_posterior(&mean, sigma11, |z| channel.log_likelihood(y, z.as_slice()), nodes)
}

/// E[B̄ | Μ B̄ + G = s] for B̄ ~ N(mean, cov), G ~ N(0, Τ) by grid integration.
pub fn grid_signal_posterior_mean(
    mean: &Vector,
    cov: &Mat,
    mu: &Mat,
    tau: &Mat,
    s: &Vector,
    nodes: usize,
) -> Result<GridEstimate> {
    let precision = tau
        .clone()
        .try_inverse()
        .ok_or_else(|| AmpError::Oracle("Τ must be invertible".into()))?;
    grid_gaussian_posterior(
        mean,
        cov,
        |b| {
            let r = s - mu * b;
            -0.5 * r.dot(&(&precision * &r))
        },
        nodes,
    )
}

#[derive(Debug, Clone)]
pub struct SteinCheck {
    /// E[∇h(X)] − (Σ⁻¹E[X h(X)ᵀ])ᵀ
    pub residual: Mat,
    /// Entrywise Monte-Carlo standard errors of `residual`.
    pub std_error: Mat,
}

impl SteinCheck {
    /// Largest |residual| measured in standard errors.
    pub fn max_z_score(&self) -> f64 {
        self.residual
            .iter()
            .zip(self.std_error.iter())
            .map(|(r, s)| if *s > 0.0 { r.abs() / s } else if *r == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

/// Monte-Carlo check of the multivariate Stein identity
/// `E[X h(X)ᵀ] = Σ E[∇h(X)]ᵀ` for X ~ N(0, Σ). `h` returns its value and
/// its Jacobian (row i = gradient of output i).
pub fn stein_check<H>(sigma: &Mat, h: H, samples: usize, seed: u64) -> Result<SteinCheck>
where
    H: Fn(&Vector) -> (Vector, Mat) + Sync,
{
    let d = sigma.nrows();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| AmpError::Oracle("Σ must be positive definite".into()))?;
    let precision = chol.inverse();
    let lower = chol.l();
    const BATCH: usize = 4096;
    let batches = samples.div_ceil(BATCH);
    let (m, _) = h(&Vector::zeros(d)).1.shape();
    let zero = || (Mat::zeros(m, d), Mat::zeros(m, d));
    let (sum, sum_sq) = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(seed, seed::stream::TASK, b as u64);
            let count = BATCH.min(samples - b * BATCH);
            let (mut s, mut s2) = zero();
            for _ in 0..count {
                let xi = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &lower * xi;
                let (value, jac) = h(&x);
                let r = jac - (&precision * &x * value.transpose()).transpose();
                s2 += r.component_mul(&r);
                s += r;
            }
            (s, s2)
        })
        .reduce(zero, |(a, a2), (b, b2)| (a + b, a2 + b2));
    let n = samples as f64;
    let residual = &sum / n;
    let var = (sum_sq / n - residual.component_mul(&residual)).map(|v| v.max(0.0));
    Ok(SteinCheck {
        residual,
        std_error: var.map(|v| (v / n).sqrt()),
    })
}

/// Discrepancies between the empirical law of the AMP residual rows
/// W_j = B^k_j − Μ_B B_j and the predicted law N(0, Τ_B), all as max-abs
/// entries. `*_se` are plug-in standard errors under the predicted law.
#[derive(Debug, Clone)]
pub struct SeDiscrepancy {
    pub mean: f64,
    pub mean_se: f64,
    pub covariance: f64,
    pub covariance_se: f64,
    /// Σ_l |W_l| against Σ_l √(2Τ_ll/π).
    pub absolute: f64,
    pub absolute_se: f64,
    /// Σ_l B_l W_l against 0.
    pub product: f64,
    pub product_se: f64,
}

impl SeDiscrepancy {
    pub fn max(&self) -> f64 {
        self.mean.max(self.covariance).max(self.absolute).max(self.product)
    }

    /// Largest discrepancy in units of its standard error.
    pub fn max_z_score(&self) -> f64 {
        [
            (self.mean, self.mean_se),
            (self.covariance, self.covariance_se),
            (self.absolute, self.absolute_se),
            (self.product, self.product_se),
        ]
        .iter()
        .map(|(d, s)| if *s > 0.0 { d / s } else if *d == 0.0 { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max)
    }
}

pub fn empirical_vs_se(bk: &Mat, b: &Mat, mu: &Mat, tau: &Mat) -> Result<SeDiscrepancy> {
    let (p, l) = b.shape();
    if bk.shape() != (p, l) || mu.shape() != (l, l) || tau.shape() != (l, l) {
        return Err(AmpError::shape("inconsistent shapes in empirical_vs_se"));
    }
    let pf = p as f64;
    let w = bk - b * mu.transpose();
    let mean = w.row_sum() / pf;
    let second = w.tr_mul(&w) / pf;
    let abs_pred: f64 = (0..l).map(|i| (2.0 * tau[(i, i)] / std::f64::consts::PI).sqrt()).sum();
    let abs_emp = w.iter().map(|v| v.abs()).sum::<f64>() / pf;
    let product_rows: Vec<f64> = (0..p).map(|j| b.row(j).dot(&w.row(j))).collect();
    let product = product_rows.iter().sum::<f64>() / pf;

    let tau_max = (0..l).map(|i| tau[(i, i)]).fold(0.0, f64::max);
    let cov_var = (0..l)
        .flat_map(|i| (0..l).map(move |j| (i, j)))
        .map(|(i, j)| tau[(i, i)] * tau[(j, j)] + tau[(i, j)] * tau[(i, j)])
        .fold(0.0, f64::max);
    let abs_var = tau.trace() * (1.0 - 2.0 / std::f64::consts::PI) * l as f64;
    let b_second = b.tr_mul(b) / pf;
    let product_var = (&b_second * tau).trace();
    Ok(SeDiscrepancy {
        mean: mean.amax(),
        mean_se: (tau_max / pf).sqrt(),
        covariance: (second - tau).amax(),
        covariance_se: (cov_var / pf).sqrt(),
        absolute: (abs_emp - abs_pred).abs(),
        absolute_se: (abs_var / pf).sqrt(),
        product: product.abs(),
        product_se: (product_var.max(0.0) / pf).sqrt(),
    })
}

/// Predicted metrics of Bayes-optimal AMP for scalar linear regression
/// y = ⟨x, β⟩ + ε with β_j ~ N(0, v), started from an independent prior draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarPrediction {
    pub corr2: f64,
    pub mse: f64,
    /// Effective noise variance of the signal-side observation.
    pub noise: f64,
}

/// Iterates τ²_{t+1} = σ² + mse_t / δ with mse_t = vτ²_t/(v + τ²_t), returning
/// entries for t = 0 (the random initialization) through `iterations`.
///
/// The prior draw reported at t = 0 has mse 2v, but it carries no
/// information about β, so a Bayes-optimal first step sees the same effective
/// noise as a start from the prior mean: τ²_1 = σ² + v/δ.
pub fn linear_regression_se(prior_var: f64, delta: f64, sigma: f64, iterations: usize) -> Vec<ScalarPrediction> {
    let v = prior_var;
    let mut out = vec![ScalarPrediction {
        corr2: 0.0,
        mse: 2.0 * v,
        noise: f64::INFINITY,
    }];
    let mut mse = v;
    for _ in 0..iterations {
        let noise = sigma * sigma + mse / delta;
        mse = v * noise / (v + noise);
        out.push(ScalarPrediction {
            corr2: v / (v + noise),
            mse,
            noise,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fd_identity_and_constant() {
        let x = Vector::from_vec(vec![0.3, -1.2, 2.0]);
        assert_relative_eq!(fd_jacobian(|v| v.clone(), &x, 1e-5), Mat::identity(3, 3), epsilon = 1e-10);
        assert_eq!(fd_jacobian(|_| Vector::from_vec(vec![1.0, 2.0]), &x, 1e-5), Mat::zeros(2, 3));
    }

    #[test]
    fn flat_likelihood_returns_conditional_mean() {
        let sigma = Mat::from_row_slice(
            4,
            4,
            &[
                1.0, 0.2, 0.5, 0.1, //
                0.2, 1.0, 0.1, 0.4, //
                0.5, 0.1, 0.8, 0.0, //
                0.1, 0.4, 0.0, 0.6,
            ],
        );
        let u = Vector::from_vec(vec![0.7, -0.3]);
        let (mean, cov) = conditional_law(&sigma, &u).unwrap();
        let est = grid_gaussian_posterior(&mean, &cov, |_| 0.0, 101).unwrap();
        assert_relative_eq!(est.mean, mean, epsilon = 1e-9);
    }

    #[test]
    fn single_branch_mlr_matches_conjugate_gaussian() {
        let sigma = Mat::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.6, 0.0, //
                0.0, 1.0, 0.0, 0.6, //
                0.6, 0.0, 0.6, 0.0, //
                0.0, 0.6, 0.0, 0.6,
            ],
        );
        let channel = Channel::mlr2(1.0, 0.5);
        let u = Vector::from_vec(vec![0.4, -0.1]);
        let y = 0.9;
        let est = grid_posterior_mean(&channel, &sigma, &u, y, 401).unwrap();
        // Z | u ~ N(u, 0.4 I); observing y = Z₁ + N(0, 0.25)
        let z1 = 0.4 + 0.4 / (0.4 + 0.25) * (y - 0.4);
        assert_relative_eq!(est.mean[0], z1, epsilon = 1e-6);
        assert_relative_eq!(est.mean[1], -0.1, epsilon = 1e-6);
    }

    #[test]
    fn too_coarse_grid_is_reported() {
        let mean = Vector::zeros(1);
        let cov = Mat::identity(1, 1);
        let err = grid_gaussian_posterior(&mean, &cov, |z| -0.5 * ((z[0] - 3.0) / 0.01).powi(2), 5);
        assert!(matches!(err, Err(AmpError::Oracle(_))));
    }

    #[test]
    fn stein_linear_and_constant_maps() {
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let a = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let lin = stein_check(&sigma, |x| (&a * x, a.clone()), 20_000, 1).unwrap();
        assert!(lin.max_z_score() < 5.0);
        let constant = stein_check(&sigma, |_| (Vector::from_vec(vec![1.0, 2.0]), Mat::zeros(2, 2)), 20_000, 1).unwrap();
        assert!(constant.max_z_score() < 5.0);
    }

    #[test]
    fn exact_debiasing_reports_tau_as_covariance_gap() {
        let b = Mat::from_fn(50, 2, |i, j| (i as f64 * 0.37 + j as f64).sin());
        let mu = Mat::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.9]);
        let tau = Mat::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
        let d = empirical_vs_se(&(&b * mu.transpose()), &b, &mu, &tau).unwrap();
        assert_relative_eq!(d.covariance, tau.amax(), epsilon = 1e-14);
    }

    #[test]
    fn scalar_se_examples() {
        let noiseless = linear_regression_se(1.0, 4.0, 0.0, 30);
        assert!(noiseless.last().unwrap().corr2 > 1.0 - 1e-12);
        let noisy = linear_regression_se(1.0, 0.5, 1.0, 200);
        let last = noisy.last().unwrap();
        // fixed point of τ² = 1 + 2τ²/(1 + τ²): τ² = 1 + √2
        assert_relative_eq!(last.noise, 1.0 + 2f64.sqrt(), epsilon = 1e-9);
        // first step from an uninformative start: τ² = v/δ = 1/4, corr² = 0.8
        assert_relative_eq!(noiseless[1].corr2, 0.8, epsilon = 1e-12);
        assert_eq!(noiseless[0].mse, 2.0);
    }
}
