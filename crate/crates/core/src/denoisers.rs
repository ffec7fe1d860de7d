//! Row-wise denoisers.
//!
//! Signal-side denoisers f act on rows of B^{k+1}, which behave like
//! `Μ_B B̄ + G` with `G ~ N(0, Τ_B)`. Channel-side denoisers g act on rows of
//! (Θ^k, Y), where Θ^k behaves like `Z^k` jointly Gaussian with `Z` under the
//! 2L×2L covariance Σ^k.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{AmpError, Result};
use crate::linalg::{self, GaussianLogDensity, Mat, Vector};
use crate::model::{self, Channel, SignalPrior};
use crate::seed::{self, stream};

/// Soft-threshold tuning constant (minimax over priors with mass ≥ 0.9 at 0).
pub const DEFAULT_ZETA: f64 = 1.1402;

/// Largest signal dimension handled by the Monte-Carlo denoisers.
pub const MAX_L: usize = 8;

/// log(1e-300): smallest admissible average likelihood in the Monte-Carlo ratio.
const LOG_DENOM_FLOOR: f64 = -690.775_527_898_213_7;

/// Relative size below which conditional-covariance eigenvalues are zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Standard deviation multiplier of the widened retry proposal.
const WIDEN: f64 = 3.0;

// ---------------------------------------------------------------------------
// Signal side
// ---------------------------------------------------------------------------

/// Posterior mean under a Gaussian prior: the affine map
/// `f(s) = m + CΜᵀ(ΜCΜᵀ + Τ)⁻¹(s − Μm)`.
#[derive(Debug, Clone)]
pub struct GaussianBayes {
    offset: Vector,
    gain: Mat,
    printed: Mat,
    pub ridged: bool,
}

impl GaussianBayes {
    pub fn new(mean: &Vector, cov: &Mat, mu: &Mat, tau: &Mat) -> Self {
        let s = linalg::symmetrize(&(mu * cov * mu.transpose() + tau));
        let inv = linalg::truncated_inverse(&s);
        let gain = cov * mu.transpose() * &inv.inverse;
        let offset = mean - &gain * (mu * mean);
        let printed = &inv.inverse * mu * cov;
        GaussianBayes {
            offset,
            gain,
            printed,
            ridged: inv.ridged,
        }
    }

    /// `(ΜCΜᵀ + Τ)⁻¹ΜC`, the transpose of the true Jacobian. The two agree
    /// whenever Μ = Τ is symmetric, which holds under a Bayes-optimal g.
    pub fn transposed_jacobian(&self) -> &Mat {
        &self.printed
    }
}

/// Posterior mean under the sparse three-point prior, summed over all 3^L
/// support points in log space.
#[derive(Debug, Clone)]
pub struct SparseBayes {
    points: Vec<Vector>,
    log_prior: Vec<f64>,
    mu_points: Vec<Vector>,
    tau_inv: Mat,
    pub ridged: bool,
}

impl SparseBayes {
    pub fn new(eps: f64, dim: usize, mu: &Mat, tau: &Mat) -> Self {
        let support = SignalPrior::sparse(eps, dim)
            .support()
            .expect("sparse prior has a support");
        let inv = linalg::regularized_inverse(&linalg::symmetrize(tau));
        let mut points = Vec::new();
        let mut log_prior = Vec::new();
        let mut mu_points = Vec::new();
        for (b, w) in support {
            if w > 0.0 {
                mu_points.push(mu * &b);
                points.push(b);
                log_prior.push(w.ln());
            }
        }
        SparseBayes {
            points,
            log_prior,
            mu_points,
            tau_inv: linalg::symmetrize(&inv.inverse),
            ridged: inv.ridged,
        }
    }

    fn weights(&self, s: &Vector) -> Vec<f64> {
        let logs: Vec<f64> = self
            .mu_points
            .iter()
            .zip(&self.log_prior)
            .map(|(mb, lp)| {
                let r = s - mb;
                lp - 0.5 * r.dot(&(&self.tau_inv * &r))
            })
            .collect();
        let norm = linalg::log_sum_exp(&logs);
        logs.iter().map(|v| (v - norm).exp()).collect()
    }

    fn apply(&self, s: &Vector) -> Vector {
        let w = self.weights(s);
        let mut out = Vector::zeros(s.len());
        for (wb, b) in w.iter().zip(&self.points) {
            out.axpy(*wb, b, 1.0);
        }
        out
    }

    fn jacobian(&self, s: &Vector) -> Mat {
        let l = s.len();
        let w = self.weights(s);
        let mut f = Vector::zeros(l);
        let mut grad_mean = Vector::zeros(l);
        let mut first = Mat::zeros(l, l);
        for ((wb, b), mb) in w.iter().zip(&self.points).zip(&self.mu_points) {
            let grad = &self.tau_inv * (mb - s);
            f.axpy(*wb, b, 1.0);
            grad_mean.axpy(*wb, &grad, 1.0);
            first += b * grad.transpose() * *wb;
        }
        first - f * grad_mean.transpose()
    }
}

/// Coordinate-wise soft thresholding of Μ⁻¹s at `ζ√(N_B)_ll`, with
/// `N_B = Μ⁻¹ΤΜ⁻ᵀ`.
#[derive(Debug, Clone)]
pub struct SoftThreshold {
    pub mu_inv: Mat,
    pub thresholds: Vector,
    pub pseudo_inverse: bool,
}

impl SoftThreshold {
    pub fn new(mu: &Mat, tau: &Mat, zeta: f64) -> Self {
        let (mu_inv, pseudo_inverse) = linalg::inverse_or_pinv(mu);
        let noise = &mu_inv * tau * mu_inv.transpose();
        let thresholds = noise.diagonal().map(|v| zeta * v.max(0.0).sqrt());
        SoftThreshold {
            mu_inv,
            thresholds,
            pseudo_inverse,
        }
    }

    /// Μ⁻¹s and, per coordinate, whether it lies outside the dead zone.
    pub fn exceedances(&self, s: &Vector) -> (Vector, Vec<bool>) {
        let x = &self.mu_inv * s;
        let active = x
            .iter()
            .zip(self.thresholds.iter())
            .map(|(v, t)| v.abs() > *t)
            .collect();
        (x, active)
    }
}

pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Signal-side denoiser built for one iteration.
#[derive(Debug, Clone)]
pub enum SignalDenoiser {
    GaussianBayes(GaussianBayes),
    SparseBayes(SparseBayes),
    SoftThreshold(SoftThreshold),
    /// `f(s) = offset + gain·s`
    Affine { offset: Vector, gain: Mat },
}

impl SignalDenoiser {
    pub fn apply(&self, s: &Vector) -> Vector {
        match self {
            SignalDenoiser::GaussianBayes(d) => &d.offset + &d.gain * s,
            SignalDenoiser::SparseBayes(d) => d.apply(s),
            SignalDenoiser::SoftThreshold(d) => {
                let x = &d.mu_inv * s;
                Vector::from_fn(x.len(), |l, _| soft_threshold(x[l], d.thresholds[l]))
            }
            SignalDenoiser::Affine { offset, gain } => offset + gain * s,
        }
    }

    /// Jacobian ∂f/∂s, row l holding the gradient of output l.
    pub fn jacobian(&self, s: &Vector) -> Mat {
        match self {
            SignalDenoiser::GaussianBayes(d) => d.gain.clone(),
            SignalDenoiser::SparseBayes(d) => d.jacobian(s),
            SignalDenoiser::SoftThreshold(d) => {
                let (_, active) = d.exceedances(s);
                let mut j = d.mu_inv.clone();
                for (l, on) in active.iter().enumerate() {
                    if !on {
                        j.row_mut(l).fill(0.0);
                    }
                }
                j
            }
            SignalDenoiser::Affine { gain, .. } => gain.clone(),
        }
    }

    /// `(a, K)` with `f(s) = a + Ks` when the denoiser is affine.
    pub fn affine(&self) -> Option<(Vector, Mat)> {
        match self {
            SignalDenoiser::GaussianBayes(d) => Some((d.offset.clone(), d.gain.clone())),
            SignalDenoiser::Affine { offset, gain } => Some((offset.clone(), gain.clone())),
            _ => None,
        }
    }

    pub fn ridged(&self) -> bool {
        match self {
            SignalDenoiser::GaussianBayes(d) => d.ridged,
            SignalDenoiser::SparseBayes(d) => d.ridged,
            SignalDenoiser::SoftThreshold(d) => d.pseudo_inverse,
            SignalDenoiser::Affine { .. } => false,
        }
    }
}

/// Recipe for building f from the current (Μ_B, Τ_B).
#[derive(Debug, Clone, PartialEq)]
pub enum SignalFamily {
    /// Posterior mean under the true prior.
    Bayes,
    SoftThreshold { zeta: f64 },
    /// Posterior mean under an assumed prior that may differ from the truth.
    Assumed(SignalPrior),
    /// A fixed affine map, independent of the iteration.
    Fixed { offset: Vector, gain: Mat },
}

impl SignalFamily {
    pub fn zero(l: usize) -> Self {
        SignalFamily::Fixed {
            offset: Vector::zeros(l),
            gain: Mat::zeros(l, l),
        }
    }

    pub fn identity(l: usize) -> Self {
        SignalFamily::Fixed {
            offset: Vector::zeros(l),
            gain: Mat::identity(l, l),
        }
    }

    pub fn is_bayes(&self) -> bool {
        matches!(self, SignalFamily::Bayes)
    }

    pub fn build(&self, prior: &SignalPrior, mu: &Mat, tau: &Mat) -> SignalDenoiser {
        match self {
            SignalFamily::Bayes => bayes_signal(prior, mu, tau),
            SignalFamily::Assumed(assumed) => bayes_signal(assumed, mu, tau),
            SignalFamily::SoftThreshold { zeta } => {
                SignalDenoiser::SoftThreshold(SoftThreshold::new(mu, tau, *zeta))
            }
            SignalFamily::Fixed { offset, gain } => SignalDenoiser::Affine {
                offset: offset.clone(),
                gain: gain.clone(),
            },
        }
    }
}

fn bayes_signal(prior: &SignalPrior, mu: &Mat, tau: &Mat) -> SignalDenoiser {
    match prior {
        SignalPrior::Gaussian { mean, cov } => {
            SignalDenoiser::GaussianBayes(GaussianBayes::new(mean, cov, mu, tau))
        }
        SignalPrior::SparseDiscrete { eps, dim } => {
            SignalDenoiser::SparseBayes(SparseBayes::new(*eps, *dim, mu, tau))
        }
    }
}

// ---------------------------------------------------------------------------
// Channel side
// ---------------------------------------------------------------------------

/// Law of Z given Z^k = u when (Z, Z^k) ~ N(0, Σ).
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    /// Σ₁₂Σ₂₂⁻¹, so that E[Z | Z^k = u] = A u.
    pub a: Mat,
    /// Σ₁₁ − Σ₁₂Σ₂₂⁻¹Σ₂₁ with negative eigenvalues clipped.
    pub cov: Mat,
    pub cov_inv: Mat,
    /// F with F Fᵀ = cov.
    pub factor: Mat,
    pub ridged: bool,
    /// Most negative eigenvalue removed from `cov` (0 when none).
    pub clipped: f64,
}

impl ConditionalGaussian {
    pub fn new(sigma: &Mat) -> Result<Self> {
        let l = sigma.nrows() / 2;
        if sigma.nrows() != 2 * l || sigma.ncols() != 2 * l || l == 0 {
            return Err(AmpError::shape(format!(
                "Σ must be 2L×2L, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !linalg::is_finite(sigma) {
            return Err(AmpError::numerical("non-finite Σ"));
        }
        let sigma = linalg::symmetrize(sigma);
        let s11 = linalg::block(&sigma, l, 0, 0);
        let s12 = linalg::block(&sigma, l, 0, 1);
        let s22 = linalg::block(&sigma, l, 1, 1);
        let inv22 = linalg::truncated_inverse(&s22);
        let a = &s12 * &inv22.inverse;
        let raw = linalg::symmetrize(&(&s11 - &a * s12.transpose()));
        let eig = nalgebra::SymmetricEigen::new(raw);
        let clipped = eig.eigenvalues.min().min(0.0);
        // eigenvalues at rounding level of Σ₁₁ are treated as exact zeros
        let floor = RANK_TOLERANCE * s11.diagonal().amax();
        let values = eig.eigenvalues.map(|v| if v > floor { v } else { 0.0 });
        let cov = linalg::symmetrize(
            &(&eig.eigenvectors * Mat::from_diagonal(&values) * eig.eigenvectors.transpose()),
        );
        let factor = &eig.eigenvectors * Mat::from_diagonal(&values.map(f64::sqrt));
        let inv = linalg::regularized_inverse(&cov);
        // keep the inverse on the range of Cov so rounding noise in its null
        // space is not amplified by the ridge
        let range_mask = values.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let projector =
            &eig.eigenvectors * Mat::from_diagonal(&range_mask) * eig.eigenvectors.transpose();
        let cov_inv = if range_mask.iter().all(|m| *m == 1.0) {
            linalg::symmetrize(&inv.inverse)
        } else {
            linalg::symmetrize(&(&projector * &inv.inverse * &projector))
        };
        Ok(ConditionalGaussian {
            a,
            cov,
            cov_inv,
            factor,
            ridged: inv22.ridged || inv.ridged,
            clipped,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn mean(&self, u: &Vector) -> Vector {
        &self.a * u
    }

    /// g = Cov⁻¹(E[Z | u, y] − E[Z | u]).
    pub fn score(&self, posterior_mean: &Vector, u: &Vector) -> Vector {
        &self.cov_inv * (posterior_mean - self.mean(u))
    }
}

/// Effective noise variance, relative to E[B̄_l²], given to a coordinate
/// whose iterate already determines the signal.
pub const EXACT_NOISE: f64 = 1e-14;

/// Coordinates l with Var[Z_l | Z^k] at rounding level and Σ₁₁,ll > 0: the iterate
/// recovers signal l exactly and g carries no information about it.
pub fn exact_coordinates(sigma: &Mat) -> Vec<usize> {
    let Ok(cond) = ConditionalGaussian::new(sigma) else {
        return Vec::new();
    };
    let l = cond.dim();
    let floor = RANK_TOLERANCE * sigma.view((0, 0), (l, l)).diagonal().amax();
    (0..l)
        .filter(|&i| sigma[(i, i)] > 0.0 && cond.cov[(i, i)] <= floor)
        .collect()
}

/// Replaces row and column l of Μ and Τ, for each exact coordinate, by a
/// near-noiseless observation with Μ_ll = Τ_ll = 1/(EXACT_NOISE·second[l]).
/// Without this the 0/0 limit of g would erase the recovered signal.
pub fn pin_exact(mu: &mut Mat, tau: &mut Mat, coords: &[usize], second: &[f64]) {
    for &l in coords {
        let precision = 1.0 / (EXACT_NOISE * second[l]);
        for m in [&mut *mu, &mut *tau] {
            m.row_mut(l).fill(0.0);
            m.column_mut(l).fill(0.0);
            m[(l, l)] = precision;
        }
    }
}

/// Closed-form E[Z | Z^k, Ȳ] for mixed linear regression, one Gaussian
/// regression per label branch.
#[derive(Debug, Clone)]
pub struct MlrBayes {
    pub cond: ConditionalGaussian,
    branches: Vec<MlrBranch>,
}

#[derive(Debug, Clone)]
struct MlrBranch {
    log_alpha: f64,
    density: GaussianLogDensity,
    /// A_l S_l⁻¹ where A_l = Cov(Z, [Z^k; Y]) and S_l = Cov([Z^k; Y]).
    regression: Mat,
}

impl MlrBayes {
    /// `alphas` are the proportions assumed by the denoiser, `sigma_eff`
    /// the noise level used in the densities.
    pub fn new(sigma: &Mat, alphas: &[f64], sigma_eff: f64) -> Result<Self> {
        let cond = ConditionalGaussian::new(sigma)?;
        let l = cond.dim();
        if alphas.len() != l {
            return Err(AmpError::shape(format!(
                "{} proportions for {} signals",
                alphas.len(),
                l
            )));
        }
        let sigma = linalg::symmetrize(sigma);
        let s11 = linalg::block(&sigma, l, 0, 0);
        let s12 = linalg::block(&sigma, l, 0, 1);
        let s22 = linalg::block(&sigma, l, 1, 1);
        let mut branches = Vec::new();
        for (c, alpha) in alphas.iter().enumerate() {
            if !(*alpha > 0.0) {
                continue;
            }
            let mut s = Mat::zeros(l + 1, l + 1);
            s.view_mut((0, 0), (l, l)).copy_from(&s22);
            for i in 0..l {
                s[(i, l)] = s12[(c, i)];
                s[(l, i)] = s12[(c, i)];
            }
            s[(l, l)] = s11[(c, c)] + sigma_eff * sigma_eff;
            let mut cross = Mat::zeros(l, l + 1);
            cross.view_mut((0, 0), (l, l)).copy_from(&s12);
            cross.view_mut((0, l), (l, 1)).copy_from(&s11.column(c));
            let density = GaussianLogDensity::new(&s);
            let regression = cross * density.precision();
            branches.push(MlrBranch {
                log_alpha: alpha.ln(),
                density,
                regression,
            });
        }
        if branches.is_empty() {
            return Err(AmpError::config("all mixture proportions are zero"));
        }
        Ok(MlrBayes { cond, branches })
    }

    fn stacked(u: &Vector, y: f64) -> Vector {
        let l = u.len();
        Vector::from_fn(l + 1, |i, _| if i < l { u[i] } else { y })
    }

    /// Posterior label probabilities for the branches with positive prior weight.
    pub fn weights(&self, u: &Vector, y: f64) -> Vec<f64> {
        let v = Self::stacked(u, y);
        let logs: Vec<f64> = self
            .branches
            .iter()
            .map(|b| b.log_alpha + b.density.log_pdf(&v))
            .collect();
        let norm = linalg::log_sum_exp(&logs);
        logs.iter().map(|x| (x - norm).exp()).collect()
    }

    pub fn posterior_mean(&self, u: &Vector, y: f64) -> Vector {
        let v = Self::stacked(u, y);
        let w = self.weights(u, y);
        let mut m = Vector::zeros(u.len());
        for (wb, b) in w.iter().zip(&self.branches) {
            m.axpy(*wb, &(&b.regression * &v), 1.0);
        }
        m
    }

    pub fn apply(&self, u: &Vector, y: f64) -> Vector {
        self.cond.score(&self.posterior_mean(u, y), u)
    }

    /// ∂g/∂u.
    pub fn jacobian(&self, u: &Vector, y: f64) -> Mat {
        let l = u.len();
        let v = Self::stacked(u, y);
        let w = self.weights(u, y);
        let grads: Vec<Vector> = self
            .branches
            .iter()
            .map(|b| -(b.density.precision() * &v).rows(0, l).into_owned())
            .collect();
        let mut mean_grad = Vector::zeros(l);
        for (wb, gb) in w.iter().zip(&grads) {
            mean_grad.axpy(*wb, gb, 1.0);
        }
        let mut dm = Mat::zeros(l, l);
        for ((wb, b), gb) in w.iter().zip(&self.branches).zip(&grads) {
            dm += b.regression.columns(0, l) * *wb;
            let dw = (gb - &mean_grad) * *wb;
            dm += (&b.regression * &v) * dw.transpose();
        }
        &self.cond.cov_inv * (dm - &self.cond.a)
    }
}

/// Monte-Carlo estimate of a posterior mean with its standard error.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Vector,
    pub std_error: Vector,
    /// The average likelihood underflowed even after the widened retry.
    pub flagged: bool,
}

/// Self-normalized importance estimate of E[Z | y] from log-weights.
fn weighted_mean(samples: &[[f64; MAX_L]], l: usize, log_w: &[f64]) -> (Vector, Vector, f64) {
    let norm = linalg::log_sum_exp(log_w);
    let mut mean = Vector::zeros(l);
    let weights: Vec<f64> = log_w.iter().map(|v| (v - norm).exp()).collect();
    for (w, z) in weights.iter().zip(samples) {
        for i in 0..l {
            mean[i] += w * z[i];
        }
    }
    let mut var = Vector::zeros(l);
    for (w, z) in weights.iter().zip(samples) {
        for i in 0..l {
            var[i] += w * w * (z[i] - mean[i]).powi(2);
        }
    }
    (mean, var.map(f64::sqrt), norm)
}

/// Monte-Carlo E[Z | Z^k = u, Ȳ = y] for channels without a closed form.
#[derive(Debug, Clone)]
pub struct McBayes {
    pub cond: ConditionalGaussian,
    pub channel: Channel,
    pub samples: usize,
    stream_seed: u64,
    rank: usize,
}

impl McBayes {
    pub fn new(
        sigma: &Mat,
        channel: &Channel,
        samples: usize,
        seed: u64,
        iteration: usize,
    ) -> Result<Self> {
        let cond = ConditionalGaussian::new(sigma)?;
        if cond.dim() > MAX_L {
            return Err(AmpError::config(format!(
                "Monte-Carlo denoiser supports at most {MAX_L} signals"
            )));
        }
        if cond.dim() != channel.signal_dim() {
            return Err(AmpError::shape("Σ does not match the channel dimension"));
        }
        if samples == 0 {
            return Err(AmpError::config("Monte-Carlo sample count must be positive"));
        }
        let rank = cond
            .factor
            .column_iter()
            .filter(|c| c.norm() > 0.0)
            .count();
        Ok(McBayes {
            cond,
            channel: channel.clone(),
            samples,
            stream_seed: seed::derive(seed, stream::CHANNEL_MC, iteration as u64),
            rank,
        })
    }

    fn draw(&self, u: &Vector, row: usize, scale: f64) -> (Vec<[f64; MAX_L]>, Vec<f64>) {
        let l = self.cond.dim();
        let centre = self.cond.mean(u);
        let mut rng = seed::rng(self.stream_seed, 0, row as u64);
        let mut samples = Vec::with_capacity(self.samples);
        let mut sq_norms = Vec::with_capacity(self.samples);
        let mut xi = [0.0f64; MAX_L];
        let mut sq = 0.0;
        for s in 0..self.samples {
            let mut z = [0.0f64; MAX_L];
            // antithetic pairs keep the proposal mean exact
            if s % 2 == 0 {
                sq = 0.0;
                for x in xi.iter_mut().take(l) {
                    *x = StandardNormal.sample(&mut rng);
                    sq += *x * *x;
                }
            } else {
                xi.iter_mut().take(l).for_each(|x| *x = -*x);
            }
            for i in 0..l {
                let mut acc = centre[i];
                for j in 0..l {
                    acc += scale * self.cond.factor[(i, j)] * xi[j];
                }
                z[i] = acc;
            }
            samples.push(z);
            sq_norms.push(sq);
        }
        (samples, sq_norms)
    }

    pub fn posterior(&self, u: &Vector, y: f64, row: usize) -> McEstimate {
        let l = self.cond.dim();
        let (samples, _) = self.draw(u, row, 1.0);
        let log_w: Vec<f64> = samples
            .iter()
            .map(|z| self.channel.log_likelihood(y, &z[..l]))
            .collect();
        let (mean, se, norm) = weighted_mean(&samples, l, &log_w);
        if norm - (self.samples as f64).ln() >= LOG_DENOM_FLOOR {
            return McEstimate {
                mean,
                std_error: se,
                flagged: false,
            };
        }
        // Widened proposal N(Au, WIDEN²·Cov) with importance weights back to N(Au, Cov).
        let (samples, sq) = self.draw(u, row, WIDEN);
        let log_ratio_const = self.rank as f64 * WIDEN.ln();
        let log_w: Vec<f64> = samples
            .iter()
            .zip(&sq)
            .map(|(z, s)| {
                self.channel.log_likelihood(y, &z[..l]) - 0.5 * (WIDEN * WIDEN - 1.0) * s
                    + log_ratio_const
            })
            .collect();
        let (mean, se, norm) = weighted_mean(&samples, l, &log_w);
        if norm.is_finite() && norm - (self.samples as f64).ln() >= LOG_DENOM_FLOOR {
            McEstimate {
                mean,
                std_error: se,
                flagged: false,
            }
        } else {
            McEstimate {
                mean: self.cond.mean(u),
                std_error: Vector::zeros(l),
                flagged: true,
            }
        }
    }
}

/// One evaluation of g on a row.
#[derive(Debug, Clone)]
pub struct RowOutput {
    pub value: Vector,
    pub flagged: bool,
}

/// Channel-side denoiser built for one iteration.
#[derive(Debug, Clone)]
pub enum ChannelDenoiser {
    Mlr(MlrBayes),
    MonteCarlo(McBayes),
}

impl ChannelDenoiser {
    pub fn cond(&self) -> &ConditionalGaussian {
        match self {
            ChannelDenoiser::Mlr(d) => &d.cond,
            ChannelDenoiser::MonteCarlo(d) => &d.cond,
        }
    }

    pub fn eval(&self, u: &Vector, y: f64, row: usize) -> RowOutput {
        match self {
            ChannelDenoiser::Mlr(d) => RowOutput {
                value: d.apply(u, y),
                flagged: false,
            },
            ChannelDenoiser::MonteCarlo(d) => {
                let est = d.posterior(u, y, row);
                let value = if est.flagged {
                    Vector::zeros(u.len())
                } else {
                    d.cond.score(&est.mean, u)
                };
                RowOutput {
                    value,
                    flagged: est.flagged,
                }
            }
        }
    }

    pub fn posterior_mean(&self, u: &Vector, y: f64, row: usize) -> Vector {
        match self {
            ChannelDenoiser::Mlr(d) => d.posterior_mean(u, y),
            ChannelDenoiser::MonteCarlo(d) => d.posterior(u, y, row).mean,
        }
    }

    /// ∂g/∂u when available in closed form.
    pub fn jacobian(&self, u: &Vector, y: f64) -> Option<Mat> {
        match self {
            ChannelDenoiser::Mlr(d) => Some(d.jacobian(u, y)),
            ChannelDenoiser::MonteCarlo(_) => None,
        }
    }

    pub fn ridged(&self) -> bool {
        self.cond().ridged
    }

    /// Applies g to every row of (Θ, Y) in parallel.
    pub fn apply_rows(&self, theta: &Mat, y: &Vector) -> (Mat, usize) {
        let (n, l) = theta.shape();
        let outputs: Vec<RowOutput> = (0..n)
            .into_par_iter()
            .map(|i| {
                let u = theta.row(i).transpose();
                self.eval(&u, y[i], i)
            })
            .collect();
        let mut out = Mat::zeros(n, l);
        let mut flagged = 0;
        for (i, o) in outputs.into_iter().enumerate() {
            out.row_mut(i).copy_from(&o.value.transpose());
            flagged += o.flagged as usize;
        }
        (out, flagged)
    }
}

/// Monte-Carlo settings shared by the channel denoisers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings {
            samples: 1000,
            seed: 0,
        }
    }
}

/// Recipe for building g from the current Σ^k.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelFamily {
    /// Bayes-optimal g: closed form for MLR, Monte Carlo otherwise.
    Bayes,
    /// MLR posterior mean computed with assumed proportions.
    MismatchedMlr { alphas: Vec<f64> },
    /// Monte-Carlo posterior mean, for any channel.
    MonteCarlo,
}

impl ChannelFamily {
    pub fn is_bayes(&self) -> bool {
        !matches!(self, ChannelFamily::MismatchedMlr { .. })
    }

    pub fn build(
        &self,
        channel: &Channel,
        sigma: &Mat,
        iteration: usize,
        mc: &McSettings,
    ) -> Result<ChannelDenoiser> {
        match (self, channel) {
            (ChannelFamily::Bayes, Channel::Mlr { alphas, .. }) => Ok(ChannelDenoiser::Mlr(
                MlrBayes::new(sigma, alphas, channel.sigma_eff())?,
            )),
            (ChannelFamily::MismatchedMlr { alphas }, Channel::Mlr { .. }) => Ok(
                ChannelDenoiser::Mlr(MlrBayes::new(sigma, alphas, channel.sigma_eff())?),
            ),
            (ChannelFamily::MismatchedMlr { .. }, _) => Err(AmpError::config(
                "mismatched proportions only apply to mixed linear regression",
            )),
            _ => Ok(ChannelDenoiser::MonteCarlo(McBayes::new(
                sigma,
                channel,
                mc.samples,
                mc.seed,
                iteration,
            )?)),
        }
    }
}

/// Posterior of Z ~ N(0, Σ₁₁) given Ȳ = y, from one shared sample set.
#[derive(Debug, Clone)]
pub struct PosteriorGivenY {
    channel: Channel,
    samples: Vec<[f64; MAX_L]>,
    l: usize,
}

impl PosteriorGivenY {
    pub fn new(sigma11: &Mat, channel: &Channel, samples: usize, seed: u64) -> Result<Self> {
        let l = sigma11.nrows();
        if l > MAX_L || l != channel.signal_dim() {
            return Err(AmpError::shape("Σ₁₁ does not match the channel dimension"));
        }
        if samples == 0 {
            return Err(AmpError::config("Monte-Carlo sample count must be positive"));
        }
        let factor = linalg::psd_factor(sigma11)?;
        let mut rng = seed::rng(seed, stream::POSTERIOR_Y, 0);
        let mut out = Vec::with_capacity(samples);
        let mut xi = [0.0f64; MAX_L];
        for s in 0..samples {
            if s % 2 == 0 {
                for x in xi.iter_mut().take(l) {
                    *x = StandardNormal.sample(&mut rng);
                }
            } else {
                xi.iter_mut().take(l).for_each(|x| *x = -*x);
            }
            let mut z = [0.0f64; MAX_L];
            for i in 0..l {
                z[i] = (0..l).map(|j| factor[(i, j)] * xi[j]).sum();
            }
            out.push(z);
        }
        Ok(PosteriorGivenY {
            channel: channel.clone(),
            samples: out,
            l,
        })
    }

    /// Ê[Z | Ȳ = y].
    pub fn mean(&self, y: f64) -> McEstimate {
        let log_w: Vec<f64> = self
            .samples
            .iter()
            .map(|z| self.channel.log_likelihood(y, &z[..self.l]))
            .collect();
        let (mean, se, norm) = weighted_mean(&self.samples, self.l, &log_w);
        let flagged = !(norm - (self.samples.len() as f64).ln() >= LOG_DENOM_FLOOR);
        McEstimate {
            mean: if flagged { Vector::zeros(self.l) } else { mean },
            std_error: se,
            flagged,
        }
    }

    /// E[Z_l | branch l is the active max-affine piece], per branch.
    ///
    /// None for a branch that is never active in the sample set.
    pub fn branch_means(&self) -> Result<Vec<Option<f64>>> {
        let Channel::Mar { intercepts, .. } = &self.channel else {
            return Err(AmpError::config("branch means are defined for max-affine channels"));
        };
        let mut sums = vec![0.0; self.l];
        let mut counts = vec![0usize; self.l];
        for z in &self.samples {
            let c = model::mar_branch(&z[..self.l], intercepts);
            sums[c] += z[c];
            counts[c] += 1;
        }
        Ok(sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| if *c > 0 { Some(s / *c as f64) } else { None })
            .collect())
    }
}

/// Ê[Z | Ȳ = y] with Z ~ N(0, Σ₁₁).
pub fn e_z_given_y(
    y: f64,
    sigma11: &Mat,
    channel: &Channel,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(PosteriorGivenY::new(sigma11, channel, samples, seed)?.mean(y))
}
