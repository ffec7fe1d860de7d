//! State evolution: the deterministic recursion over (Μ_B, Τ_B, Σ) that
//! predicts the row-wise joint law of the AMP iterates.
//!
//! Channel-side expectations are Monte Carlo over (Z, Z^k, Ψ̄). Signal-side
//! expectations are exact when f is affine, exact in B̄ (enumerated support)
//! for the sparse prior, and Monte Carlo otherwise.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::denoisers::{exact_coordinates, pin_exact, ChannelFamily, McSettings, SignalDenoiser, SignalFamily};
use crate::error::{AmpError, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{Channel, PriorMoments, SignalPrior};
use crate::seed::{self, stream};

const BATCH: usize = 2048;

/// Σ⁰ for B̂⁰ drawn from the prior independently of B:
/// `(1/δ)·[[E[B̄B̄ᵀ], mmᵀ], [mmᵀ, E[B̄B̄ᵀ]]]`.
pub fn sigma0(moments: &PriorMoments, delta: f64) -> Mat {
    let mm = &moments.mean * moments.mean.transpose();
    linalg::from_blocks(&moments.second, &mm, &mm, &moments.second) / delta
}

/// Per-signal performance measures.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMetrics {
    /// Normalized squared correlation.
    pub corr2: Vec<f64>,
    pub mse: Vec<f64>,
    /// The estimate (or signal) is identically zero, so corr2 is reported as 0.
    pub degenerate: Vec<bool>,
}

/// Predicted correlation² and MSE read off the blocks of Σ^k.
pub fn predict_metrics(sigma: &Mat, delta: f64) -> SignalMetrics {
    let l = sigma.nrows() / 2;
    let mut out = SignalMetrics {
        corr2: Vec::with_capacity(l),
        mse: Vec::with_capacity(l),
        degenerate: Vec::with_capacity(l),
    };
    for i in 0..l {
        let s11 = sigma[(i, i)];
        let s12 = sigma[(i, l + i)];
        let s22 = sigma[(l + i, l + i)];
        let denom = s11 * s22;
        if denom > 0.0 && denom.is_finite() {
            out.corr2.push((s12 * s12 / denom).min(1.0));
            out.degenerate.push(false);
        } else {
            out.corr2.push(0.0);
            out.degenerate.push(true);
        }
        out.mse.push(delta * (s11 - 2.0 * s12 + s22));
    }
    out
}

/// Μ_Θ = Σ₂₁Σ₁₁⁻¹ and Τ_Θ = Σ₂₂ − Σ₂₁Σ₁₁⁻¹Σ₁₂.
pub fn theta_params(sigma: &Mat) -> Result<(Mat, Mat)> {
    let l = sigma.nrows() / 2;
    let s11 = linalg::block(sigma, l, 0, 0);
    let s21 = linalg::block(sigma, l, 1, 0);
    let s22 = linalg::block(sigma, l, 1, 1);
    let cond = linalg::condition_number(&s11);
    let inv = match s11.clone().try_inverse() {
        Some(inv) if cond <= linalg::RIDGE_COND_LIMIT => inv,
        _ => {
            return Err(AmpError::Precondition(format!(
                "Σ₁₁ is singular (condition number {cond:e})"
            )))
        }
    };
    let mu = &s21 * &inv;
    let tau = linalg::symmetrize(&(&s22 - &mu * s21.transpose()));
    Ok((mu, tau))
}

/// N = Μ⁻¹Τ(Μ⁻¹)ᵀ, with the pseudoinverse when Μ is singular.
pub fn effective_noise(mu: &Mat, tau: &Mat) -> Mat {
    let (inv, _) = linalg::inverse_or_pinv(mu);
    linalg::symmetrize(&(&inv * tau * inv.transpose()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeConfig {
    /// Monte-Carlo samples per expectation.
    pub samples: usize,
    pub seed: u64,
    /// Settings for Monte-Carlo channel denoisers evaluated inside the recursion.
    pub mc: McSettings,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            samples: 100_000,
            seed: 0,
            mc: McSettings::default(),
        }
    }
}

/// Everything the recursion needs besides the current state.
#[derive(Debug, Clone)]
pub struct SeProblem {
    pub prior: SignalPrior,
    pub channel: Channel,
    pub signal: SignalFamily,
    pub denoiser: ChannelFamily,
    pub delta: f64,
    pub config: SeConfig,
}

#[derive(Debug, Clone)]
pub struct SeState {
    pub k: usize,
    pub sigma: Mat,
    /// Μ_B^k and Τ_B^k (absent at k = 0).
    pub mu_b: Option<Mat>,
    pub tau_b: Option<Mat>,
    /// Monte-Carlo standard errors of the entries of Τ_B^k.
    pub tau_b_std_error: Option<Mat>,
    pub n_b: Option<Mat>,
    /// Μ_Θ^k, Τ_Θ^k and N_Θ^k (absent when Σ₁₁ is singular).
    pub mu_theta: Option<Mat>,
    pub tau_theta: Option<Mat>,
    pub n_theta: Option<Mat>,
    pub metrics: SignalMetrics,
    /// A ridge-regularized inverse was used while producing this state.
    pub ridged: bool,
    /// Coordinates that Σ^{k−1} recovered exactly (see `pin_exact`).
    pub exact: Vec<usize>,
}

impl SeState {
    fn from_sigma(k: usize, sigma: Mat, delta: f64) -> Self {
        let theta = theta_params(&sigma).ok();
        let n_theta = theta.as_ref().map(|(m, t)| effective_noise(m, t));
        SeState {
            k,
            metrics: predict_metrics(&sigma, delta),
            mu_theta: theta.as_ref().map(|(m, _)| m.clone()),
            tau_theta: theta.map(|(_, t)| t),
            n_theta,
            sigma,
            mu_b: None,
            tau_b: None,
            tau_b_std_error: None,
            n_b: None,
            ridged: false,
            exact: Vec::new(),
        }
    }
}

pub fn se_init(prior: &SignalPrior, delta: f64) -> Result<SeState> {
    prior.validate()?;
    if !(delta > 0.0) {
        return Err(AmpError::config("δ must be positive"));
    }
    Ok(SeState::from_sigma(0, sigma0(&prior.moments(), delta), delta))
}

/// Channel-side moments of one step.
#[derive(Debug, Clone)]
pub struct ChannelMoments {
    /// E[g g*ᵀ]
    pub mu: Mat,
    /// E[g gᵀ]
    pub tau: Mat,
    pub tau_std_error: Mat,
    pub ridged: bool,
}

/// Μ_B^{k+1} = E[g g*ᵀ] and Τ_B^{k+1} = E[g gᵀ] by Monte Carlo over
/// (Z, Z^k) ~ N(0, Σ^k) and the channel auxiliaries.
pub fn channel_moments(
    sigma: &Mat,
    channel: &Channel,
    family: &ChannelFamily,
    iteration: usize,
    config: &SeConfig,
) -> Result<ChannelMoments> {
    let l = sigma.nrows() / 2;
    let g = family.build(channel, sigma, iteration, &config.mc)?;
    let g_star = if family.is_bayes() {
        None
    } else {
        Some(ChannelFamily::Bayes.build(channel, sigma, iteration, &config.mc)?)
    };
    let factor = linalg::psd_factor(sigma)?;
    let step_seed = seed::derive(config.seed, stream::STATE_EVOLUTION, iteration as u64);
    let n = config.samples.max(1);
    let batches = n.div_ceil(BATCH);

    struct Partial {
        gg: Mat,
        gs: Mat,
        sq: Mat,
    }
    let partials: Vec<Partial> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(step_seed, b as u64, 0);
            let mut noise_rng = seed::rng(step_seed, b as u64, 1);
            let mut acc = Partial {
                gg: Mat::zeros(l, l),
                gs: Mat::zeros(l, l),
                sq: Mat::zeros(l, l),
            };
            let start = b * BATCH;
            let end = ((b + 1) * BATCH).min(n);
            for idx in start..end {
                let xi = Vector::from_fn(2 * l, |_, _| StandardNormal.sample(&mut rng));
                let w = &factor * xi;
                let z: Vec<f64> = w.rows(0, l).iter().cloned().collect();
                let u = w.rows(l, l).into_owned();
                let psi = channel.sample_aux(&mut rng, &mut noise_rng);
                let y = channel.eval(&z, psi.as_slice());
                let gv = g.eval(&u, y, idx).value;
                let sv = match &g_star {
                    Some(gs) => gs.eval(&u, y, idx).value,
                    None => gv.clone(),
                };
                let outer = &gv * gv.transpose();
                acc.sq += outer.component_mul(&outer);
                acc.gg += outer;
                acc.gs += &gv * sv.transpose();
            }
            acc
        })
        .collect();

    let mut gg = Mat::zeros(l, l);
    let mut gs = Mat::zeros(l, l);
    let mut sq = Mat::zeros(l, l);
    for p in partials {
        gg += p.gg;
        gs += p.gs;
        sq += p.sq;
    }
    let nf = n as f64;
    let tau = linalg::symmetrize(&(gg / nf));
    let mu = gs / nf;
    let var = (sq / nf - tau.component_mul(&tau)).map(|v| v.max(0.0));
    let tau = linalg::repair_psd(&tau)?;
    Ok(ChannelMoments {
        mu: if family.is_bayes() { tau.clone() } else { mu },
        tau,
        tau_std_error: var.map(|v| (v / nf).sqrt()),
        ridged: g.ridged(),
    })
}

/// (E[B̄fᵀ], E[ffᵀ]) for f applied to `ΜB̄ + G`, `G ~ N(0, Τ)` independent of B̄.
pub fn signal_moments(
    prior: &SignalPrior,
    f: &SignalDenoiser,
    mu: &Mat,
    tau: &Mat,
    samples: usize,
    seed: u64,
) -> Result<(Mat, Mat)> {
    let moments = prior.moments();
    if let Some((a, k)) = f.affine() {
        let m = &moments.mean;
        let km = &k * mu * m;
        let bf = m * a.transpose() + &moments.second * mu.transpose() * k.transpose();
        let ss = mu * &moments.second * mu.transpose() + tau;
        let ff = &a * a.transpose() + &a * km.transpose() + &km * a.transpose() + &k * ss * k.transpose();
        return Ok((bf, linalg::symmetrize(&ff)));
    }
    let l = prior.dim();
    let noise = linalg::psd_factor(tau)?;
    let n = samples.max(1);
    let batches = n.div_ceil(BATCH);
    let support = prior.support();
    let prior_factor = prior.factor()?;
    let partials: Vec<(Mat, Mat)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(seed, b as u64, 1);
            let mut bf = Mat::zeros(l, l);
            let mut ff = Mat::zeros(l, l);
            for _ in (b * BATCH)..((b + 1) * BATCH).min(n) {
                let gvec = &noise * Vector::from_fn(l, |_, _| StandardNormal.sample(&mut rng));
                match &support {
                    // exact expectation over the discrete prior, shared noise draw
                    Some(points) => {
                        for (bar, w) in points {
                            let fv = f.apply(&(mu * bar + &gvec));
                            bf += bar * fv.transpose() * *w;
                            ff += &fv * fv.transpose() * *w;
                        }
                    }
                    None => {
                        let bar = prior.draw(prior_factor.as_ref(), &mut rng);
                        let fv = f.apply(&(mu * &bar + &gvec));
                        bf += &bar * fv.transpose();
                        ff += &fv * fv.transpose();
                    }
                }
            }
            (bf, ff)
        })
        .collect();
    let mut bf = Mat::zeros(l, l);
    let mut ff = Mat::zeros(l, l);
    for (a, b) in partials {
        bf += a;
        ff += b;
    }
    Ok((bf / n as f64, linalg::symmetrize(&(ff / n as f64))))
}

/// One step Σ^k → (Μ_B^{k+1}, Τ_B^{k+1}, Σ^{k+1}).
pub fn se_step(state: &SeState, problem: &SeProblem) -> Result<SeState> {
    let k = state.k;
    let l = problem.prior.dim();
    let mut ch = channel_moments(
        &state.sigma,
        &problem.channel,
        &problem.denoiser,
        k,
        &problem.config,
    )?;
    let exact = exact_coordinates(&state.sigma);
    let second: Vec<f64> = (0..l).map(|i| state.sigma[(i, i)] * problem.delta).collect();
    pin_exact(&mut ch.mu, &mut ch.tau, &exact, &second);
    let f = problem.signal.build(&problem.prior, &ch.mu, &ch.tau);
    let signal_seed = seed::derive(problem.config.seed, stream::STATE_EVOLUTION, 1_000_000 + k as u64);
    let (bf, ff) = signal_moments(
        &problem.prior,
        &f,
        &ch.mu,
        &ch.tau,
        problem.config.samples,
        signal_seed,
    )?;
    let d = problem.delta;
    let s11 = problem.prior.moments().second / d;
    let s22 = ff / d;
    let s12 = if problem.signal.is_bayes() {
        s22.clone()
    } else {
        bf / d
    };
    let sigma = linalg::from_blocks(&s11, &s12, &s12.transpose(), &s22);
    let sigma = linalg::repair_psd(&sigma).map_err(|e| AmpError::Numerical(format!(
        "Σ^{} is not positive semidefinite: {e}",
        k + 1
    )))?;
    debug_assert_eq!(sigma.nrows(), 2 * l);
    let mut next = SeState::from_sigma(k + 1, sigma, d);
    next.n_b = Some(effective_noise(&ch.mu, &ch.tau));
    next.mu_b = Some(ch.mu);
    next.tau_b = Some(ch.tau);
    next.tau_b_std_error = Some(ch.tau_std_error);
    next.ridged = ch.ridged || f.ridged();
    next.exact = exact;
    Ok(next)
}

/// Runs the recursion for `iterations` steps, returning Σ⁰ … Σ^iterations.
pub fn run_se(problem: &SeProblem, iterations: usize) -> Result<Vec<SeState>> {
    let mut states = vec![se_init(&problem.prior, problem.delta)?];
    for _ in 0..iterations {
        let next = se_step(states.last().expect("non-empty"), problem)?;
        states.push(next);
    }
    Ok(states)
}
