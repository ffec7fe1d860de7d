//! The AMP iteration for the matrix GLM:
//!
//! ```text
//! Θ^k     = X B̂^k − R̂^{k−1} (F^k)ᵀ        R̂^k     = g_k(Θ^k, Y)
//! B^{k+1} = Xᵀ R̂^k − B̂^k (C^k)ᵀ            B̂^{k+1} = f_{k+1}(B^{k+1})
//! C^k     = (1/n) Σ_i g_k'(Θ^k_i, Y_i)    F^{k+1} = (1/n) Σ_j f_{k+1}'(B^{k+1}_j)
//! ```
//!
//! The denoisers are rebuilt every iteration from empirical estimates of the
//! state-evolution parameters (Μ̂_B, Τ̂_B, Σ̂).

use rayon::prelude::*;

use crate::denoisers::{exact_coordinates, pin_exact, ChannelFamily, McSettings, SignalDenoiser, SignalFamily};
use crate::error::{AmpError, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{Channel, Instance, SignalPrior};
use crate::se::{self, SignalMetrics};
use crate::seed::{self, stream};

/// Default number of AMP iterations.
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Rows of B̂⁰ drawn from the prior, independently of B.
    PriorRandom,
    /// A caller-supplied B̂⁰. Σ̂⁰ is then computed from the instance's true B,
    /// so this mode is meant for oracle experiments.
    Provided(Mat),
}

/// Iterates after `k` completed steps.
///
/// At k = 0 only `bhat` (B̂⁰), `rhat` (R̂^{-1} = 0), `f_mat` (F⁰ = I) and
/// `sigma_hat` (Σ̂⁰) are meaningful. After step k − 1 the fields hold Θ^{k−1},
/// R̂^{k−1}, C^{k−1}, B^k, B̂^k, F^k, Μ̂_B^k, Τ̂_B^k and Σ̂^k.
#[derive(Debug, Clone)]
pub struct AmpState {
    pub k: usize,
    pub theta: Mat,
    pub rhat: Mat,
    pub bmat: Mat,
    pub bhat: Mat,
    pub f_mat: Mat,
    pub c_mat: Mat,
    pub mu_b_hat: Mat,
    pub tau_b_hat: Mat,
    pub sigma_hat: Mat,
}

/// Static ingredients of a run.
#[derive(Debug, Clone)]
pub struct AmpProblem {
    pub prior: SignalPrior,
    /// Channel assumed by the denoiser (for EM this carries the current intercepts).
    pub channel: Channel,
    pub signal: SignalFamily,
    pub denoiser: ChannelFamily,
    pub mc: McSettings,
    /// Replace F^k by 0 in the Θ update (ablation of the Onsager memory term).
    pub drop_memory: bool,
    pub sigma_update: SigmaUpdate,
    pub mu_estimate: MuEstimate,
}

/// How Μ̂_B is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuEstimate {
    /// Μ̂_B = Τ̂_B = (1/n)R̂ᵀR̂, valid when g is Bayes-optimal for the true Σ.
    Gram,
    /// Μ̂_B from Stein's identity on (Θ, R̂) and the analytic C^k, falling
    /// back to the Gram matrix when g has no Jacobian or Σ̂₂₁ is singular.
    Stein,
}

/// How Σ̂₁₂ and Σ̂₂₂ are re-estimated after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaUpdate {
    /// From the iterates: Σ̂₂₂ = (1/n)B̂ᵀB̂, Σ̂₁₂ per denoiser type, Σ̂₁₁ fixed.
    Empirical,
    /// As `Empirical`, but under a Bayes f the block Σ̂₁₁ is re-estimated as
    /// the empirical Σ̂₂₂ plus the model posterior covariance of the signal.
    /// Keeps the conditional covariance Σ̂₁₁ − Σ̂₂₂ positive when the realized
    /// ‖B‖²/n exceeds its prior expectation.
    Posterior,
    /// From the state-evolution signal moments evaluated at (Μ̂_B, Τ̂_B);
    /// exact for affine f, Monte Carlo with `samples` draws otherwise.
    Model { samples: usize },
}

impl AmpProblem {
    pub fn bayes(prior: &SignalPrior, channel: &Channel) -> Self {
        AmpProblem {
            prior: prior.clone(),
            channel: channel.clone(),
            signal: SignalFamily::Bayes,
            denoiser: ChannelFamily::Bayes,
            mc: McSettings::default(),
            drop_memory: false,
            sigma_update: SigmaUpdate::Posterior,
            mu_estimate: MuEstimate::Stein,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Rows where the Monte-Carlo denoiser underflowed and g was set to 0.
    pub flagged_rows: usize,
    /// Some inversion took the ridge or pseudoinverse path.
    pub ridged: bool,
    /// C^k came from the Stein rearrangement instead of analytic Jacobians.
    pub stein_c: bool,
    /// Μ̂_B came from the Stein rearrangement instead of the Gram matrix.
    pub stein_mu: bool,
    /// Coordinates that Σ̂ marked as exactly recovered (see `pin_exact`).
    pub exact: Vec<usize>,
}

pub fn amp_init(instance: &Instance, prior: &SignalPrior, init: &InitMode, seed: u64) -> Result<AmpState> {
    let (n, p, l) = (instance.n(), instance.p(), instance.l());
    if prior.dim() != l {
        return Err(AmpError::shape(format!(
            "prior dimension {} does not match L = {l}",
            prior.dim()
        )));
    }
    let (bhat, sigma_hat) = match init {
        InitMode::PriorRandom => {
            let bhat = prior.sample(p, &mut seed::rng(seed, stream::INIT, 0))?;
            (bhat, se::sigma0(&prior.moments(), instance.delta))
        }
        InitMode::Provided(b0) => {
            if b0.shape() != (p, l) {
                return Err(AmpError::shape(format!(
                    "initial estimate is {}x{}, expected {p}x{l}",
                    b0.nrows(),
                    b0.ncols()
                )));
            }
            let mut joint = Mat::zeros(p, 2 * l);
            joint.columns_mut(0, l).copy_from(&instance.b);
            joint.columns_mut(l, l).copy_from(b0);
            let sigma = linalg::symmetrize(&(joint.tr_mul(&joint) / n as f64));
            (b0.clone(), sigma)
        }
    };
    Ok(AmpState {
        k: 0,
        theta: Mat::zeros(n, l),
        rhat: Mat::zeros(n, l),
        bmat: Mat::zeros(p, l),
        bhat,
        f_mat: Mat::identity(l, l),
        c_mat: Mat::zeros(l, l),
        mu_b_hat: Mat::zeros(l, l),
        tau_b_hat: Mat::zeros(l, l),
        sigma_hat,
    })
}

/// Μ̂_B = Τ̂_B = (1/n) R̂ᵀR̂. Valid as an estimate of Μ_B when g is Bayes-optimal.
pub fn estimate_mu_tau(rhat: &Mat) -> (Mat, Mat) {
    let n = rhat.nrows().max(1) as f64;
    let gram = linalg::symmetrize(&(rhat.tr_mul(rhat) / n));
    (gram.clone(), gram)
}

/// C^k from the Stein rearrangement
/// `C = {Σ̂₂₂⁻¹((1/n)ΘᵀR̂ − Σ̂₂₁Μ̂ᵀ)}ᵀ`. Returns the estimate and whether
/// the ridge path was taken.
pub fn estimate_onsager_c(theta: &Mat, rhat: &Mat, sigma_hat: &Mat, mu_next: &Mat) -> (Mat, bool) {
    let n = theta.nrows().max(1) as f64;
    let l = theta.ncols();
    let s21 = linalg::block(sigma_hat, l, 1, 0);
    let s22 = linalg::block(sigma_hat, l, 1, 1);
    let inv = linalg::truncated_inverse(&s22);
    let inner = theta.tr_mul(rhat) / n - s21 * mu_next.transpose();
    ((&inv.inverse * inner).transpose(), inv.ridged)
}

/// Largest condition number of Σ̂₂₁ accepted by [`estimate_mu_stein`].
pub const STEIN_MU_COND_LIMIT: f64 = 1e8;
/// Singular values below this fraction of ‖Σ̂₁₁‖ count as zero.
const STEIN_RANK_TOLERANCE: f64 = 1e-8;

/// Μ̂_B = {Σ̂₂₁⁻¹((1/n)ΘᵀR̂ − Σ̂₂₂Cᵀ)}ᵀ, from Stein's identity
/// E[Z^k hᵀ] = Σ₂₁E[∂_Z h]ᵀ + Σ₂₂E[∂_{Z^k} h]ᵀ. None when Σ̂₂₁ is too
/// ill-conditioned to invert.
pub fn estimate_mu_stein(theta: &Mat, rhat: &Mat, sigma_hat: &Mat, c_mat: &Mat) -> Option<Mat> {
    let n = theta.nrows().max(1) as f64;
    let l = theta.ncols();
    let s11 = linalg::block(sigma_hat, l, 0, 0);
    let s21 = linalg::block(sigma_hat, l, 1, 0);
    let s22 = linalg::block(sigma_hat, l, 1, 1);
    let inv = if linalg::condition_number(&s21) <= STEIN_MU_COND_LIMIT {
        s21.clone().try_inverse()?
    } else {
        // a singular Σ̂₂₁ is fine when it only inherits the null space of
        // Σ̂₁₁ (identical signals): g has no component there either
        let scale = linalg::op_norm(&s11);
        let rank = |a: &Mat| {
            a.clone()
                .singular_values()
                .iter()
                .filter(|v| **v > STEIN_RANK_TOLERANCE * scale)
                .count()
        };
        let r21 = rank(&s21);
        if r21 == 0 || r21 != rank(&s11) {
            return None;
        }
        linalg::truncated_pinv(&s21, STEIN_RANK_TOLERANCE)
    };
    let inner = theta.tr_mul(rhat) / n - s22 * c_mat.transpose();
    Some((inv * inner).transpose())
}

/// How Σ̂₁₂ is estimated after the signal denoiser.
fn cross_block(
    f: &SignalDenoiser,
    signal: &SignalFamily,
    prior: &SignalPrior,
    bmat: &Mat,
    bhat: &Mat,
    mu: &Mat,
    tau: &Mat,
    f_mat: &Mat,
    delta: f64,
    s22: &Mat,
) -> Mat {
    let (p, l) = bmat.shape();
    if signal.is_bayes() {
        return s22.clone();
    }
    if let SignalDenoiser::SoftThreshold(st) = f {
        // E[B̄_l f_l] ≈ E[B̄_l²]·P(|(Μ⁻¹B)_l| > threshold_l), off-diagonals 0
        let second = prior.moments().second;
        let mut counts = vec![0usize; l];
        for j in 0..p {
            let (_, active) = st.exceedances(&bmat.row(j).transpose());
            for (c, on) in counts.iter_mut().zip(active) {
                *c += on as usize;
            }
        }
        let diag = Vector::from_fn(l, |i, _| second[(i, i)] * counts[i] as f64 / p as f64 / delta);
        return Mat::from_diagonal(&diag);
    }
    // Stein: E[s fᵀ] = Μ E[B̄fᵀ] + Τ E[∇f]ᵀ with E[∇f] = (n/p) F
    let (mu_inv, _) = linalg::inverse_or_pinv(mu);
    let sf = bmat.tr_mul(bhat) / p as f64;
    let mean_jac = f_mat * delta;
    (mu_inv * (sf - tau * mean_jac.transpose())) / delta
}

/// Σ̂^{k+1}: Σ̂₁₁ is kept, Σ̂₂₂ = (1/n)B̂ᵀB̂ and Σ̂₁₂ depends on the denoiser.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sigma_next(
    previous: &Mat,
    f: &SignalDenoiser,
    signal: &SignalFamily,
    prior: &SignalPrior,
    bmat: &Mat,
    bhat: &Mat,
    mu: &Mat,
    tau: &Mat,
    f_mat: &Mat,
    delta: f64,
) -> Mat {
    let l = bhat.ncols();
    let n = bhat.nrows() as f64 * delta;
    let s11 = linalg::block(previous, l, 0, 0);
    let s22 = linalg::symmetrize(&(bhat.tr_mul(bhat) / n));
    let s12 = cross_block(f, signal, prior, bmat, bhat, mu, tau, f_mat, delta, &s22);
    linalg::symmetrize(&linalg::from_blocks(&s11, &s12, &s12.transpose(), &s22))
}

/// Signal-moment draws behind [`SigmaUpdate::Posterior`] when f is not affine.
pub const POSTERIOR_SAMPLES: usize = 20_000;

/// Replaces Σ̂₁₁ by Σ̂₂₂ + δ⁻¹E[(B̄ − f)(B̄ − f)ᵀ], the empirical Σ̂₂₂ plus the
/// model error covariance of f at (Μ̂_B, Τ̂_B). For a Bayes f the added term
/// is δ⁻¹E[Cov(B̄|s)] = Cov[Z | Z^k].
#[allow(clippy::too_many_arguments)]
pub fn posterior_sigma11(
    sigma_hat: &Mat,
    f: &SignalDenoiser,
    prior: &SignalPrior,
    mu: &Mat,
    tau: &Mat,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<Mat> {
    let l = mu.nrows();
    let s12 = linalg::block(sigma_hat, l, 0, 1);
    let s22 = linalg::block(sigma_hat, l, 1, 1);
    let (bf, ff) = se::signal_moments(prior, f, mu, tau, samples, seed)?;
    let error = &prior.moments().second - &bf - bf.transpose() + ff;
    let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(&error));
    let values = eig.eigenvalues.map(|v| v.max(0.0) / delta);
    let post = &eig.eigenvectors * Mat::from_diagonal(&values) * eig.eigenvectors.transpose();
    let s11 = linalg::symmetrize(&(&s22 + post));
    Ok(linalg::symmetrize(&linalg::from_blocks(&s11, &s12, &s12.transpose(), &s22)))
}

/// Σ^{k+1} from the state-evolution signal moments at the estimated
/// (Μ̂_B, Τ̂_B), keeping Σ̂₁₁.
#[allow(clippy::too_many_arguments)]
pub fn model_sigma_next(
    previous: &Mat,
    f: &SignalDenoiser,
    signal: &SignalFamily,
    prior: &SignalPrior,
    mu: &Mat,
    tau: &Mat,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<Mat> {
    let l = mu.nrows();
    let s11 = linalg::block(previous, l, 0, 0);
    let (bf, ff) = se::signal_moments(prior, f, mu, tau, samples, seed)?;
    let s22 = ff / delta;
    let s12 = if signal.is_bayes() { s22.clone() } else { bf / delta };
    Ok(linalg::symmetrize(&linalg::from_blocks(&s11, &s12, &s12.transpose(), &s22)))
}

fn check_finite(k: usize, what: &str, m: &Mat) -> Result<()> {
    if linalg::is_finite(m) {
        Ok(())
    } else {
        Err(AmpError::Diverged {
            iteration: k,
            what: format!("non-finite entries in {what}"),
        })
    }
}

/// One AMP iteration.
pub fn amp_step(
    state: &AmpState,
    x: &Mat,
    y: &Vector,
    problem: &AmpProblem,
) -> Result<(AmpState, StepDiagnostics)> {
    let k = state.k;
    let (n, p) = x.shape();
    let l = state.bhat.ncols();
    if y.len() != n || state.bhat.nrows() != p || state.rhat.nrows() != n {
        return Err(AmpError::shape("state does not match the design matrix"));
    }
    let delta = n as f64 / p as f64;
    let mut diag = StepDiagnostics::default();

    let mut theta = x * &state.bhat;
    if !problem.drop_memory {
        theta -= &state.rhat * state.f_mat.transpose();
    }
    check_finite(k, "Θ", &theta)?;

    let g = problem
        .denoiser
        .build(&problem.channel, &state.sigma_hat, k, &problem.mc)?;
    diag.ridged |= g.ridged();
    let (rhat, flagged) = g.apply_rows(&theta, y);
    diag.flagged_rows = flagged;
    check_finite(k, "R̂", &rhat)?;

    let (mut mu, mut tau) = estimate_mu_tau(&rhat);
    let has_jacobian = g.jacobian(&theta.row(0).transpose(), y[0]).is_some();
    let c_mat = if has_jacobian {
        // collected then summed in row order, so the result does not depend on the thread count
        let jacobians: Vec<Mat> = (0..n)
            .into_par_iter()
            .map(|i| {
                g.jacobian(&theta.row(i).transpose(), y[i])
                    .expect("jacobian available")
            })
            .collect();
        jacobians.iter().fold(Mat::zeros(l, l), |acc, j| acc + j) / n as f64
    } else {
        diag.stein_c = true;
        let (c, ridged) = estimate_onsager_c(&theta, &rhat, &state.sigma_hat, &mu);
        diag.ridged |= ridged;
        c
    };
    check_finite(k, "C", &c_mat)?;
    if problem.mu_estimate == MuEstimate::Stein && has_jacobian {
        if let Some(m) = estimate_mu_stein(&theta, &rhat, &state.sigma_hat, &c_mat) {
            mu = m;
            diag.stein_mu = true;
        }
    }

    let mut bmat = x.tr_mul(&rhat) - &state.bhat * c_mat.transpose();
    let exact = exact_coordinates(&state.sigma_hat);
    if !exact.is_empty() {
        let second: Vec<f64> = (0..l).map(|i| state.sigma_hat[(i, i)] * delta).collect();
        pin_exact(&mut mu, &mut tau, &exact, &second);
        for &i in &exact {
            bmat.set_column(i, &(state.bhat.column(i) * mu[(i, i)]));
        }
        diag.exact = exact;
    }
    check_finite(k, "B", &bmat)?;

    let f = problem.signal.build(&problem.prior, &mu, &tau);
    diag.ridged |= f.ridged();
    let rows: Vec<(Vector, Mat)> = (0..p)
        .into_par_iter()
        .map(|j| {
            let s = bmat.row(j).transpose();
            (f.apply(&s), f.jacobian(&s))
        })
        .collect();
    let mut bhat = Mat::zeros(p, l);
    let mut jac_sum = Mat::zeros(l, l);
    for (j, (value, jac)) in rows.into_iter().enumerate() {
        bhat.row_mut(j).copy_from(&value.transpose());
        jac_sum += jac;
    }
    let f_mat = jac_sum / n as f64;
    check_finite(k, "B̂", &bhat)?;
    check_finite(k, "F", &f_mat)?;

    let sigma_hat = match problem.sigma_update {
        SigmaUpdate::Empirical | SigmaUpdate::Posterior => estimate_sigma_next(
            &state.sigma_hat,
            &f,
            &problem.signal,
            &problem.prior,
            &bmat,
            &bhat,
            &mu,
            &tau,
            &f_mat,
            delta,
        ),
        SigmaUpdate::Model { samples } => model_sigma_next(
            &state.sigma_hat,
            &f,
            &problem.signal,
            &problem.prior,
            &mu,
            &tau,
            delta,
            samples,
            seed::derive(problem.mc.seed, stream::STATE_EVOLUTION, k as u64),
        )?,
    };
    let sigma_hat = if problem.sigma_update == SigmaUpdate::Posterior && problem.signal.is_bayes() {
        posterior_sigma11(
            &sigma_hat,
            &f,
            &problem.prior,
            &mu,
            &tau,
            delta,
            POSTERIOR_SAMPLES,
            seed::derive(problem.mc.seed, stream::STATE_EVOLUTION, k as u64),
        )?
    } else {
        sigma_hat
    };
    check_finite(k, "Σ̂", &sigma_hat)?;

    Ok((
        AmpState {
            k: k + 1,
            theta,
            rhat,
            bmat,
            bhat,
            f_mat,
            c_mat,
            mu_b_hat: mu,
            tau_b_hat: tau,
            sigma_hat,
        },
        diag,
    ))
}

/// Normalized squared correlation and MSE of each column of `bhat` against `b`.
pub fn empirical_metrics(bhat: &Mat, b: &Mat) -> SignalMetrics {
    let (p, l) = b.shape();
    let mut out = SignalMetrics {
        corr2: Vec::with_capacity(l),
        mse: Vec::with_capacity(l),
        degenerate: Vec::with_capacity(l),
    };
    for i in 0..l {
        let est = bhat.column(i);
        let truth = b.column(i);
        let denom = est.norm_squared() * truth.norm_squared();
        if denom > 0.0 {
            out.corr2.push((est.dot(&truth).powi(2) / denom).min(1.0));
            out.degenerate.push(false);
        } else {
            out.corr2.push(0.0);
            out.degenerate.push(true);
        }
        out.mse.push((est - truth).norm_squared() / p as f64);
    }
    out
}

/// Per-iteration record of a run.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub metrics: SignalMetrics,
    pub mu_b_hat: Mat,
    pub tau_b_hat: Mat,
    pub sigma_hat: Mat,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone)]
pub struct AmpRun {
    pub state: AmpState,
    /// Records for k = 0 (initialization) through the last iteration.
    pub history: Vec<IterationRecord>,
}

impl AmpRun {
    pub fn final_metrics(&self) -> &SignalMetrics {
        &self.history.last().expect("history is never empty").metrics
    }
}

/// Continues `state` for `iterations` steps, recording metrics against `instance.b`.
pub fn continue_amp(
    instance: &Instance,
    state: AmpState,
    problem: &AmpProblem,
    iterations: usize,
    history: &mut Vec<IterationRecord>,
) -> Result<AmpState> {
    let mut state = state;
    for _ in 0..iterations {
        let (next, diagnostics) = amp_step(&state, &instance.x, &instance.y, problem)?;
        history.push(IterationRecord {
            k: next.k,
            metrics: empirical_metrics(&next.bhat, &instance.b),
            mu_b_hat: next.mu_b_hat.clone(),
            tau_b_hat: next.tau_b_hat.clone(),
            sigma_hat: next.sigma_hat.clone(),
            diagnostics,
        });
        state = next;
    }
    Ok(state)
}

/// Initializes and runs AMP for `iterations` steps.
pub fn run_amp(
    instance: &Instance,
    problem: &AmpProblem,
    init: &InitMode,
    iterations: usize,
    seed: u64,
) -> Result<AmpRun> {
    let state = amp_init(instance, &problem.prior, init, seed)?;
    let mut history = vec![IterationRecord {
        k: 0,
        metrics: empirical_metrics(&state.bhat, &instance.b),
        mu_b_hat: state.mu_b_hat.clone(),
        tau_b_hat: state.tau_b_hat.clone(),
        sigma_hat: state.sigma_hat.clone(),
        diagnostics: StepDiagnostics::default(),
    }];
    let state = continue_amp(instance, state, problem, iterations, &mut history)?;
    Ok(AmpRun { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_instance;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_instance(seed: u64) -> Instance {
        generate_instance(
            &Channel::mlr2(0.7, 0.1),
            &SignalPrior::gaussian_corr(0.0),
            120,
            40,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn init_sigma_zero_mean() {
        let inst = generate_instance(
            &Channel::mlr2(0.7, 0.1),
            &SignalPrior::gaussian_corr(0.0),
            80,
            40,
            1,
        )
        .unwrap();
        let s = amp_init(&inst, &SignalPrior::gaussian_corr(0.0), &InitMode::PriorRandom, 0).unwrap();
        assert_relative_eq!(s.sigma_hat, Mat::identity(4, 4) * 0.5);
        assert_eq!(s.f_mat, Mat::identity(2, 2));
        assert_eq!(s.rhat, Mat::zeros(80, 2));
    }

    #[test]
    fn init_cross_block_from_prior_mean() {
        let prior = SignalPrior::gaussian_iid(&[1.0, 1.0]);
        let inst = generate_instance(&Channel::mlr2(0.7, 0.1), &prior, 200, 100, 1).unwrap();
        let s = amp_init(&inst, &prior, &InitMode::PriorRandom, 0).unwrap();
        assert_relative_eq!(linalg::block(&s.sigma_hat, 2, 0, 1), Mat::from_element(2, 2, 0.5));
    }

    #[test]
    fn oracle_init_cross_block_equals_signal_block() {
        let inst = small_instance(2);
        let s = amp_init(
            &inst,
            &SignalPrior::gaussian_corr(0.0),
            &InitMode::Provided(inst.b.clone()),
            0,
        )
        .unwrap();
        let expected = inst.b.tr_mul(&inst.b) / inst.n() as f64;
        assert_relative_eq!(linalg::block(&s.sigma_hat, 2, 0, 1), expected, epsilon = 1e-14);
        assert_relative_eq!(linalg::block(&s.sigma_hat, 2, 0, 0), expected, epsilon = 1e-14);
    }

    #[test]
    fn provided_init_with_wrong_shape_fails() {
        let inst = small_instance(2);
        let err = amp_init(
            &inst,
            &SignalPrior::gaussian_corr(0.0),
            &InitMode::Provided(Mat::zeros(3, 2)),
            0,
        );
        assert!(matches!(err, Err(AmpError::Shape(_))));
    }

    #[test]
    fn first_step_has_no_memory_term() {
        let inst = small_instance(3);
        let problem = AmpProblem::bayes(&SignalPrior::gaussian_corr(0.0), &inst.channel);
        let s0 = amp_init(&inst, &problem.prior, &InitMode::PriorRandom, 5).unwrap();
        let (s1, _) = amp_step(&s0, &inst.x, &inst.y, &problem).unwrap();
        assert_eq!(s1.theta, &inst.x * &s0.bhat);
    }

    #[test]
    fn identity_f_with_zero_g_collapses() {
        // g ≡ 0 is what Bayes g gives for an uninformative channel; emulate it with
        // a huge noise level so R̂ ≈ 0 and C ≈ 0
        let inst = small_instance(4);
        let mut problem = AmpProblem::bayes(&SignalPrior::gaussian_corr(0.0), &Channel::mlr2(0.7, 1e9));
        problem.signal = SignalFamily::identity(2);
        let s0 = amp_init(&inst, &problem.prior, &InitMode::PriorRandom, 5).unwrap();
        let (s1, _) = amp_step(&s0, &inst.x, &inst.y, &problem).unwrap();
        assert!(s1.rhat.amax() < 1e-6);
        assert!(s1.c_mat.amax() < 1e-6);
        assert!(s1.bmat.amax() < 1e-5);
    }

    #[test]
    fn mu_tau_examples() {
        let (m, t) = estimate_mu_tau(&Mat::zeros(5, 2));
        assert_eq!(m, Mat::zeros(2, 2));
        assert_eq!(t, Mat::zeros(2, 2));
        let n = 4.0f64;
        let r = Mat::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0]) * (n.sqrt() / 2.0);
        let (m, _) = estimate_mu_tau(&r);
        assert_relative_eq!(m, Mat::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn onsager_c_examples() {
        let theta = Mat::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.5, 0.7, -0.1]);
        let zero = Mat::zeros(3, 2);
        let sigma = Mat::identity(4, 4);
        let (c, _) = estimate_onsager_c(&theta, &zero, &sigma, &Mat::zeros(2, 2));
        assert_eq!(c, Mat::zeros(2, 2));
        let rhat = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 2.0, -1.0, 1.0]);
        let s22 = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let sigma = linalg::from_blocks(&Mat::identity(2, 2), &Mat::zeros(2, 2), &Mat::zeros(2, 2), &s22);
        let (c, _) = estimate_onsager_c(&theta, &rhat, &sigma, &Mat::identity(2, 2));
        let expected = (s22.try_inverse().unwrap() * theta.tr_mul(&rhat) / 3.0).transpose();
        assert_relative_eq!(c, expected, epsilon = 1e-14);
    }

    #[test]
    fn sigma_next_bayes_and_zero() {
        let inst = small_instance(6);
        let mut problem = AmpProblem::bayes(&SignalPrior::gaussian_corr(0.0), &inst.channel);
        problem.sigma_update = SigmaUpdate::Empirical;
        let s0 = amp_init(&inst, &problem.prior, &InitMode::PriorRandom, 1).unwrap();
        let (s1, _) = amp_step(&s0, &inst.x, &inst.y, &problem).unwrap();
        assert_eq!(linalg::block(&s1.sigma_hat, 2, 0, 1), linalg::block(&s1.sigma_hat, 2, 1, 1));
        assert_eq!(linalg::block(&s1.sigma_hat, 2, 0, 0), linalg::block(&s0.sigma_hat, 2, 0, 0));

        // Σ̂₁₁ − Σ̂₂₂ equals the Gaussian posterior covariance δ⁻¹(C⁻¹ + ΜᵀΤ⁻¹Μ)⁻¹
        problem.sigma_update = SigmaUpdate::Posterior;
        let (p1, _) = amp_step(&s0, &inst.x, &inst.y, &problem).unwrap();
        let gap = linalg::block(&p1.sigma_hat, 2, 0, 0) - linalg::block(&p1.sigma_hat, 2, 1, 1);
        let (m, t) = (&p1.mu_b_hat, &p1.tau_b_hat);
        let info = Mat::identity(2, 2) + m.transpose() * t.clone().try_inverse().unwrap() * m;
        let expected = info.try_inverse().unwrap() / 3.0;
        assert_relative_eq!(gap, expected, epsilon = 1e-10);

        let mut zero = problem.clone();
        zero.signal = SignalFamily::zero(2);
        let (z1, _) = amp_step(&s0, &inst.x, &inst.y, &zero).unwrap();
        assert_eq!(linalg::block(&z1.sigma_hat, 2, 1, 1), Mat::zeros(2, 2));
        assert_eq!(linalg::block(&z1.sigma_hat, 2, 0, 1), Mat::zeros(2, 2));
    }

    #[test]
    fn zero_design_stays_finite_and_deterministic() {
        let mut inst = small_instance(7);
        inst.x.fill(0.0);
        let mut problem = AmpProblem::bayes(&SignalPrior::gaussian_corr(0.0), &inst.channel);
        problem.signal = SignalFamily::Fixed {
            offset: Vector::from_vec(vec![0.3, -0.2]),
            gain: Mat::zeros(2, 2),
        };
        let a = run_amp(&inst, &problem, &InitMode::PriorRandom, 3, 9).unwrap();
        let b = run_amp(&inst, &problem, &InitMode::PriorRandom, 3, 9).unwrap();
        assert!(linalg::is_finite(&a.state.bhat));
        assert_eq!(a.state.bhat, b.state.bhat);
        assert_eq!(a.state.theta, b.state.theta);
    }

    #[test]
    fn non_finite_iterates_report_the_iteration() {
        let inst = small_instance(8);
        let mut problem = AmpProblem::bayes(&SignalPrior::gaussian_corr(0.0), &inst.channel);
        problem.signal = SignalFamily::Fixed {
            offset: Vector::from_vec(vec![f64::NAN, 0.0]),
            gain: Mat::zeros(2, 2),
        };
        match run_amp(&inst, &problem, &InitMode::PriorRandom, 3, 1) {
            Err(AmpError::Diverged { iteration, .. }) => assert_eq!(iteration, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empirical_metrics_examples() {
        let b = Mat::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0]);
        let m = empirical_metrics(&(&b * 2.0), &b);
        assert_relative_eq!(m.corr2[0], 1.0);
        let z = empirical_metrics(&Mat::zeros(3, 2), &b);
        assert!(z.degenerate.iter().all(|d| *d));
        assert_relative_eq!(z.mse[1], 10.0 / 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mu_tau_is_symmetric_psd(entries in prop::collection::vec(-3.0f64..3.0, 2..40)) {
            let rows = entries.len() / 2;
            prop_assume!(rows >= 1);
            let r = Mat::from_row_slice(rows, 2, &entries[..rows * 2]);
            let (m, _) = estimate_mu_tau(&r);
            prop_assert_eq!(&m, &m.transpose());
            let eig = nalgebra::SymmetricEigen::new(m);
            prop_assert!(eig.eigenvalues.min() >= -1e-12);
        }
    }
}
