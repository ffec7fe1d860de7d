//! Signal priors, output channels and synthetic instances of the matrix GLM
//! `Y_i = q(Bᵀ X_i, Ψ_i)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AmpError, Result};
use crate::linalg::{self, Mat, Vector};
use crate::seed::{self, stream};

/// Smallest noise level used inside channel densities. Data generation is not
/// affected, so σ = 0 instances stay exactly noiseless.
pub const SIGMA_FLOOR: f64 = 1e-4;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Law of one row of the signal matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalPrior {
    Gaussian { mean: Vector, cov: Mat },
    /// Independent coordinates with law (ε/2)δ₊₁ + (1−ε)δ₀ + (ε/2)δ₋₁.
    SparseDiscrete { eps: f64, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMoments {
    pub mean: Vector,
    pub cov: Mat,
    /// E[B̄B̄ᵀ]
    pub second: Mat,
}

impl SignalPrior {
    /// Two unit-variance zero-mean signals with correlation ρ.
    pub fn gaussian_corr(rho: f64) -> Self {
        SignalPrior::Gaussian {
            mean: Vector::zeros(2),
            cov: Mat::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        }
    }

    /// Independent unit-variance signals with the given means.
    pub fn gaussian_iid(mean: &[f64]) -> Self {
        SignalPrior::Gaussian {
            mean: Vector::from_column_slice(mean),
            cov: Mat::identity(mean.len(), mean.len()),
        }
    }

    pub fn sparse(eps: f64, dim: usize) -> Self {
        SignalPrior::SparseDiscrete { eps, dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            SignalPrior::Gaussian { mean, .. } => mean.len(),
            SignalPrior::SparseDiscrete { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SignalPrior::Gaussian { mean, cov } => {
                if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
                    return Err(AmpError::config(format!(
                        "prior covariance is {}x{} but the mean has length {}",
                        cov.nrows(),
                        cov.ncols(),
                        mean.len()
                    )));
                }
                if mean.is_empty() {
                    return Err(AmpError::config("prior dimension must be at least 1"));
                }
                if !linalg::is_finite(cov) || mean.iter().any(|v| !v.is_finite()) {
                    return Err(AmpError::config("prior parameters must be finite"));
                }
                if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
                    return Err(AmpError::config("prior covariance is not symmetric"));
                }
                linalg::repair_psd(cov).map_err(|_| {
                    AmpError::config("prior covariance is not positive semidefinite")
                })?;
                Ok(())
            }
            SignalPrior::SparseDiscrete { eps, dim } => {
                if !(0.0..=1.0).contains(eps) {
                    return Err(AmpError::config(format!("sparsity ε = {eps} is outside [0, 1]")));
                }
                if *dim == 0 {
                    return Err(AmpError::config("prior dimension must be at least 1"));
                }
                Ok(())
            }
        }
    }

    pub fn moments(&self) -> PriorMoments {
        match self {
            SignalPrior::Gaussian { mean, cov } => PriorMoments {
                mean: mean.clone(),
                cov: cov.clone(),
                second: cov + mean * mean.transpose(),
            },
            SignalPrior::SparseDiscrete { eps, dim } => {
                let cov = Mat::identity(*dim, *dim) * *eps;
                PriorMoments {
                    mean: Vector::zeros(*dim),
                    second: cov.clone(),
                    cov,
                }
            }
        }
    }

    /// Support points and probabilities of the sparse-discrete prior.
    pub fn support(&self) -> Option<Vec<(Vector, f64)>> {
        let SignalPrior::SparseDiscrete { eps, dim } = self else {
            return None;
        };
        let values = [(-1.0, eps / 2.0), (0.0, 1.0 - eps), (1.0, eps / 2.0)];
        let count = 3usize.pow(*dim as u32);
        let mut points = Vec::with_capacity(count);
        for code in 0..count {
            let mut rest = code;
            let mut point = Vector::zeros(*dim);
            let mut prob = 1.0;
            for l in 0..*dim {
                let (v, w) = values[rest % 3];
                point[l] = v;
                prob *= w;
                rest /= 3;
            }
            points.push((point, prob));
        }
        Some(points)
    }

    /// Draws one row.
    pub fn draw<R: Rng + ?Sized>(&self, factor: Option<&Mat>, rng: &mut R) -> Vector {
        match self {
            SignalPrior::Gaussian { mean, .. } => {
                let factor = factor.expect("gaussian draws need the covariance factor");
                let xi = Vector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                mean + factor * xi
            }
            SignalPrior::SparseDiscrete { eps, dim } => Vector::from_fn(*dim, |_, _| {
                let u: f64 = rng.random();
                if u < eps / 2.0 {
                    1.0
                } else if u < *eps {
                    -1.0
                } else {
                    0.0
                }
            }),
        }
    }

    /// Covariance square root used by `draw` (None for discrete priors).
    pub fn factor(&self) -> Result<Option<Mat>> {
        match self {
            SignalPrior::Gaussian { cov, .. } => linalg::psd_factor(cov)
                .map(Some)
                .map_err(|_| AmpError::config("prior covariance is not positive semidefinite")),
            SignalPrior::SparseDiscrete { .. } => Ok(None),
        }
    }

    /// p i.i.d. rows drawn from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, p: usize, rng: &mut R) -> Result<Mat> {
        self.validate()?;
        if p == 0 {
            return Err(AmpError::config("row count must be at least 1"));
        }
        let factor = self.factor()?;
        let mut out = Mat::zeros(p, self.dim());
        for j in 0..p {
            let row = self.draw(factor.as_ref(), rng);
            out.row_mut(j).copy_from(&row.transpose());
        }
        Ok(out)
    }
}

/// Seeded convenience wrapper around [`SignalPrior::sample`].
pub fn sample_prior(prior: &SignalPrior, p: usize, seed: u64) -> Result<Mat> {
    prior.sample(p, &mut seed::rng(seed, stream::SIGNAL, 0))
}

/// Output map q together with the law of the auxiliary variables.
#[derive(Debug, Clone, PartialEq)]
pub enum Channel {
    /// Mixed linear regression; branch l is active with probability `alphas[l]`.
    Mlr { alphas: Vec<f64>, sigma: f64 },
    /// Max-affine regression `max_l(z_l + b_l) + ε`.
    Mar { intercepts: Vec<f64>, sigma: f64 },
    /// Two experts with a softmax gate driven by z₃, z₄.
    Moe { sigma: f64 },
}

impl Channel {
    pub fn mlr2(alpha: f64, sigma: f64) -> Self {
        Channel::Mlr {
            alphas: vec![alpha, 1.0 - alpha],
            sigma,
        }
    }

    pub fn mlr3(alphas: [f64; 3], sigma: f64) -> Self {
        Channel::Mlr {
            alphas: alphas.to_vec(),
            sigma,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Channel::Mlr { alphas, .. } if alphas.len() == 2 => "mlr2",
            Channel::Mlr { alphas, .. } if alphas.len() == 3 => "mlr3",
            Channel::Mlr { .. } => "mlr",
            Channel::Mar { .. } => "mar",
            Channel::Moe { .. } => "moe",
        }
    }

    /// Number of signal columns L.
    pub fn signal_dim(&self) -> usize {
        match self {
            Channel::Mlr { alphas, .. } => alphas.len(),
            Channel::Mar { intercepts, .. } => intercepts.len(),
            Channel::Moe { .. } => 4,
        }
    }

    /// Width of one auxiliary row Ψ_i.
    ///
    /// MLR stores the one-hot label followed by ε, MAR stores ε and MOE
    /// stores (ψ, ε).
    pub fn aux_dim(&self) -> usize {
        match self {
            Channel::Mlr { alphas, .. } => alphas.len() + 1,
            Channel::Mar { .. } => 1,
            Channel::Moe { .. } => 2,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            Channel::Mlr { sigma, .. } | Channel::Mar { sigma, .. } | Channel::Moe { sigma } => {
                *sigma
            }
        }
    }

    /// Noise level used inside densities.
    pub fn sigma_eff(&self) -> f64 {
        self.sigma().max(SIGMA_FLOOR)
    }

    pub fn validate(&self) -> Result<()> {
        let sigma = self.sigma();
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(AmpError::config(format!("noise level σ = {sigma} must be finite and ≥ 0")));
        }
        match self {
            Channel::Mlr { alphas, .. } => {
                if alphas.len() < 2 {
                    return Err(AmpError::config("mixed regression needs at least two signals"));
                }
                if alphas.iter().any(|a| !(*a >= 0.0) || *a > 1.0) {
                    return Err(AmpError::config("mixture proportions must lie in [0, 1]"));
                }
                let total: f64 = alphas.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(AmpError::config(format!(
                        "mixture proportions sum to {total}, expected 1"
                    )));
                }
            }
            Channel::Mar { intercepts, .. } => {
                if intercepts.is_empty() || intercepts.iter().any(|b| !b.is_finite()) {
                    return Err(AmpError::config("intercepts must be finite and non-empty"));
                }
            }
            Channel::Moe { .. } => {}
        }
        Ok(())
    }

    /// Draws one auxiliary row, with the noise coordinate taken from `noise_rng`.
    pub fn sample_aux<R: Rng + ?Sized, S: Rng + ?Sized>(
        &self,
        aux_rng: &mut R,
        noise_rng: &mut S,
    ) -> Vector {
        let mut psi = Vector::zeros(self.aux_dim());
        let eps: f64 = StandardNormal.sample(noise_rng);
        let eps = eps * self.sigma();
        match self {
            Channel::Mlr { alphas, .. } => {
                let u: f64 = aux_rng.random();
                psi[categorical(alphas, u)] = 1.0;
                psi[alphas.len()] = eps;
            }
            Channel::Mar { .. } => psi[0] = eps,
            Channel::Moe { .. } => {
                psi[0] = aux_rng.random();
                psi[1] = eps;
            }
        }
        psi
    }

    /// q(z, ψ).
    pub fn eval(&self, z: &[f64], psi: &[f64]) -> f64 {
        match self {
            Channel::Mlr { alphas, .. } => {
                let l = alphas.len();
                (0..l).map(|i| z[i] * psi[i]).sum::<f64>() + psi[l]
            }
            Channel::Mar { intercepts, .. } => {
                let branch = mar_branch(z, intercepts);
                z[branch] + intercepts[branch] + psi[0]
            }
            Channel::Moe { .. } => {
                let expert = moe_expert(z, psi[0]);
                z[expert] + psi[1]
            }
        }
    }

    /// Index of the latent branch that produced the output.
    pub fn branch(&self, z: &[f64], psi: &[f64]) -> usize {
        match self {
            Channel::Mlr { alphas, .. } => (0..alphas.len())
                .find(|&i| psi[i] == 1.0)
                .unwrap_or(0),
            Channel::Mar { intercepts, .. } => mar_branch(z, intercepts),
            Channel::Moe { .. } => moe_expert(z, psi[0]),
        }
    }

    /// log p(y | z) with the non-noise auxiliaries integrated out.
    pub fn log_likelihood(&self, y: f64, z: &[f64]) -> f64 {
        let s = self.sigma_eff();
        let log_phi = |r: f64| -0.5 * (r / s) * (r / s) - LN_SQRT_2PI - s.ln();
        match self {
            Channel::Mlr { alphas, .. } => {
                let terms: Vec<f64> = alphas
                    .iter()
                    .enumerate()
                    .map(|(l, a)| a.ln() + log_phi(y - z[l]))
                    .collect();
                linalg::log_sum_exp(&terms)
            }
            Channel::Mar { intercepts, .. } => {
                let branch = mar_branch(z, intercepts);
                log_phi(y - z[branch] - intercepts[branch])
            }
            Channel::Moe { .. } => {
                let gate = moe_gate(z[2], z[3]);
                linalg::log_sum_exp(&[
                    gate.ln() + log_phi(y - z[0]),
                    (1.0 - gate).ln() + log_phi(y - z[1]),
                ])
            }
        }
    }

    /// The same channel with replaced MAR intercepts.
    pub fn with_intercepts(&self, b: &[f64]) -> Self {
        match self {
            Channel::Mar { sigma, .. } => Channel::Mar {
                intercepts: b.to_vec(),
                sigma: *sigma,
            },
            other => other.clone(),
        }
    }
}

fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Active MAR branch. Ties go to the later branch.
pub fn mar_branch(z: &[f64], intercepts: &[f64]) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (l, b) in intercepts.iter().enumerate() {
        let v = z[l] + b;
        if v >= best_value {
            best = l;
            best_value = v;
        }
    }
    best
}

/// exp(a) / (exp(a) + exp(b)) without overflow.
pub fn moe_gate(a: f64, b: f64) -> f64 {
    1.0 / (1.0 + (b - a).exp())
}

/// Expert 1 (index 0) is used iff ψ ≤ gate.
pub fn moe_expert(z: &[f64], psi: f64) -> usize {
    if psi <= moe_gate(z[2], z[3]) {
        0
    } else {
        1
    }
}

/// One synthetic problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub channel: Channel,
    /// n×p design with N(0, 1/n) entries.
    pub x: Mat,
    /// p×L signal matrix.
    pub b: Mat,
    /// n×L_Ψ auxiliary matrix.
    pub psi: Mat,
    pub y: Vector,
    /// Noise-free linear predictors XB (n×L).
    pub theta: Mat,
    /// Latent branch per row (mixture label, active affine piece or expert).
    pub labels: Vec<usize>,
    pub delta: f64,
}

impl Instance {
    /// Assembles an instance from explicit parts, evaluating Y row by row.
    pub fn from_parts(channel: Channel, x: Mat, b: Mat, psi: Mat) -> Result<Self> {
        channel.validate()?;
        let (n, p) = x.shape();
        if b.nrows() != p || b.ncols() != channel.signal_dim() {
            return Err(AmpError::shape(format!(
                "signal matrix is {}x{}, expected {}x{}",
                b.nrows(),
                b.ncols(),
                p,
                channel.signal_dim()
            )));
        }
        if psi.nrows() != n || psi.ncols() != channel.aux_dim() {
            return Err(AmpError::shape(format!(
                "auxiliary matrix is {}x{}, expected {}x{}",
                psi.nrows(),
                psi.ncols(),
                n,
                channel.aux_dim()
            )));
        }
        let theta = &x * &b;
        let mut y = Vector::zeros(n);
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; b.ncols()];
        let mut aux = vec![0.0; psi.ncols()];
        for i in 0..n {
            z.iter_mut().enumerate().for_each(|(l, v)| *v = theta[(i, l)]);
            aux.iter_mut().enumerate().for_each(|(l, v)| *v = psi[(i, l)]);
            y[i] = channel.eval(&z, &aux);
            labels.push(channel.branch(&z, &aux));
        }
        Ok(Instance {
            channel,
            delta: n as f64 / p as f64,
            x,
            b,
            psi,
            y,
            theta,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn l(&self) -> usize {
        self.b.ncols()
    }
}

/// n×p matrix of i.i.d. N(0, 1/n) entries.
pub fn gaussian_design<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Mat {
    let scale = 1.0 / (n as f64).sqrt();
    let data: Vec<f64> = (0..n * p)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect();
    Mat::from_vec(n, p, data)
}

/// Generates X, B, Ψ and Y from independent substreams of `seed`.
pub fn generate_instance(
    channel: &Channel,
    prior: &SignalPrior,
    n: usize,
    p: usize,
    seed: u64,
) -> Result<Instance> {
    if n == 0 || p == 0 {
        return Err(AmpError::config("n and p must be at least 1"));
    }
    channel.validate()?;
    prior.validate()?;
    if prior.dim() != channel.signal_dim() {
        return Err(AmpError::config(format!(
            "prior has dimension {} but the {} channel needs {}",
            prior.dim(),
            channel.name(),
            channel.signal_dim()
        )));
    }
    let x = gaussian_design(n, p, &mut seed::rng(seed, stream::DESIGN, 0));
    let b = sample_prior(prior, p, seed)?;
    let mut aux_rng = seed::rng(seed, stream::AUX, 0);
    let mut noise_rng = seed::rng(seed, stream::NOISE, 0);
    let mut psi = Mat::zeros(n, channel.aux_dim());
    for i in 0..n {
        let row = channel.sample_aux(&mut aux_rng, &mut noise_rng);
        psi.row_mut(i).copy_from(&row.transpose());
    }
    Instance::from_parts(channel.clone(), x, b, psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn gaussian_sampling_is_deterministic() {
        let prior = SignalPrior::gaussian_corr(0.0);
        let a = sample_prior(&prior, 4, 7).unwrap();
        let b = sample_prior(&prior, 4, 7).unwrap();
        assert_eq!(a.shape(), (4, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_eps_zero_is_all_zero() {
        let b = sample_prior(&SignalPrior::sparse(0.0, 2), 50, 1).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fully_correlated_columns_coincide() {
        let b = sample_prior(&SignalPrior::gaussian_corr(1.0), 100, 3).unwrap();
        for j in 0..100 {
            assert_relative_eq!(b[(j, 0)], b[(j, 1)], epsilon = 1e-12);
        }
    }

    #[test]
    fn indefinite_covariance_is_a_config_error() {
        let prior = SignalPrior::gaussian_corr(1.5);
        assert!(matches!(sample_prior(&prior, 3, 0), Err(AmpError::Config(_))));
    }

    #[test]
    fn moments_match_closed_forms() {
        assert_eq!(SignalPrior::gaussian_corr(0.0).moments().second, Mat::identity(2, 2));
        let m = SignalPrior::sparse(0.1, 2).moments();
        assert_eq!(m.second, Mat::identity(2, 2) * 0.1);
        assert_eq!(m.mean, Vector::zeros(2));
        let g = SignalPrior::gaussian_iid(&[0.0, 0.5, 1.0]).moments();
        let mean = Vector::from_vec(vec![0.0, 0.5, 1.0]);
        assert_relative_eq!(g.second, Mat::identity(3, 3) + &mean * mean.transpose());
    }

    #[test]
    fn sparse_support_sums_to_one() {
        let support = SignalPrior::sparse(0.3, 2).support().unwrap();
        assert_eq!(support.len(), 9);
        assert_relative_eq!(support.iter().map(|(_, w)| w).sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn channel_eval_examples() {
        let mar = Channel::Mar {
            intercepts: vec![0.0, 0.0],
            sigma: 0.0,
        };
        assert_eq!(mar.eval(&[1.0, 3.0], &[0.0]), 3.0);
        assert_eq!(mar.eval(&[2.0, 2.0], &[0.0]), 2.0);
        assert_eq!(mar_branch(&[2.0, 2.0], &[0.0, 0.0]), 1);
        let moe = Channel::Moe { sigma: 0.0 };
        assert_eq!(moe.eval(&[5.0, -5.0, 10.0, -10.0], &[0.5, 0.0]), 5.0);
    }

    #[test]
    fn moe_gate_boundary_belongs_to_expert_one() {
        // gate = 1/2 exactly when z₃ = z₄
        assert_eq!(moe_expert(&[0.0, 0.0, 1.0, 1.0], 0.5), 0);
        assert_eq!(moe_expert(&[0.0, 0.0, 1.0, 1.0], 0.5 + 1e-12), 1);
    }

    #[test]
    fn single_coordinate_noiseless_mlr() {
        let x = Mat::from_element(1, 1, 0.8);
        let b = Mat::from_row_slice(1, 2, &[2.0, -3.0]);
        let psi = Mat::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let inst = Instance::from_parts(Channel::mlr2(0.5, 0.0), x, b, psi).unwrap();
        assert_eq!(inst.y[0], 0.8 * 2.0);
        assert_eq!(inst.labels, vec![0]);
    }

    #[test]
    fn alpha_one_labels_everything_first() {
        let inst = generate_instance(
            &Channel::mlr2(1.0, 0.1),
            &SignalPrior::gaussian_corr(0.0),
            200,
            50,
            4,
        )
        .unwrap();
        assert!(inst.labels.iter().all(|c| *c == 0));
        for i in 0..inst.n() {
            assert_relative_eq!(inst.y[i], inst.theta[(i, 0)] + inst.psi[(i, 2)], epsilon = 1e-12);
        }
    }

    #[test]
    fn label_frequency_concentrates() {
        let n = 100_000;
        let inst = generate_instance(
            &Channel::mlr2(0.7, 0.0),
            &SignalPrior::gaussian_corr(0.0),
            n,
            1,
            11,
        )
        .unwrap();
        let frac = inst.labels.iter().filter(|c| **c == 0).count() as f64 / n as f64;
        assert!((frac - 0.7).abs() <= 3.0 * (0.21f64 / n as f64).sqrt());
    }

    #[test]
    fn column_norms_match_second_moments() {
        let p = 20_000;
        let prior = SignalPrior::gaussian_iid(&[0.0, 1.0]);
        let b = sample_prior(&prior, p, 5).unwrap();
        let second = prior.moments().second;
        for l in 0..2 {
            let col = b.column(l);
            let sq: Vec<f64> = col.iter().map(|v| v * v).collect();
            let mean = sq.iter().sum::<f64>() / p as f64;
            let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p - 1) as f64;
            assert!((mean - second[(l, l)]).abs() <= 5.0 * (var / p as f64).sqrt());
        }
    }

    #[test]
    fn design_variance_is_one_over_n() {
        let x = gaussian_design(400, 100, &mut seed::rng(1, 1, 0));
        let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / (400.0 * 100.0);
        assert!((mean_sq * 400.0 - 1.0).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn regeneration_is_bit_identical(seed in any::<u64>(), alpha in 0.05f64..0.95) {
            let ch = Channel::mlr2(alpha, 0.2);
            let prior = SignalPrior::gaussian_corr(0.3);
            let a = generate_instance(&ch, &prior, 30, 10, seed).unwrap();
            let b = generate_instance(&ch, &prior, 30, 10, seed).unwrap();
            prop_assert_eq!(&a.x, &b.x);
            prop_assert_eq!(&a.b, &b.b);
            prop_assert_eq!(&a.psi, &b.psi);
            prop_assert_eq!(&a.y, &b.y);
        }

        #[test]
        fn noiseless_mlr_outputs_one_of_the_predictors(seed in any::<u64>()) {
            let inst = generate_instance(
                &Channel::mlr2(0.6, 0.0),
                &SignalPrior::gaussian_corr(0.0),
                40,
                15,
                seed,
            ).unwrap();
            for i in 0..inst.n() {
                let y = inst.y[i];
                prop_assert!(y == inst.theta[(i, 0)] || y == inst.theta[(i, 1)]);
            }
        }

        #[test]
        fn moe_uses_expert_one_iff_psi_below_gate(
            z in prop::array::uniform4(-5.0f64..5.0),
            psi in 0.0f64..1.0,
        ) {
            let ch = Channel::Moe { sigma: 0.0 };
            let gate = moe_gate(z[2], z[3]);
            let y = ch.eval(&z, &[psi, 0.0]);
            let expected = if psi <= gate { z[0] } else { z[1] };
            prop_assert_eq!(y, expected);
        }

        #[test]
        fn mlr_likelihood_is_a_density_mixture(y in -3.0f64..3.0, z in prop::array::uniform2(-3.0f64..3.0)) {
            let ch = Channel::mlr2(0.3, 0.5);
            let direct = 0.3 * normal_pdf(y - z[0], 0.5) + 0.7 * normal_pdf(y - z[1], 0.5);
            prop_assert!((ch.log_likelihood(y, &z) - direct.ln()).abs() < 1e-12);
        }
    }

    fn normal_pdf(r: f64, s: f64) -> f64 {
        (-(r * r) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }
}
