//! EM-AMP for max-affine regression: an outer loop that re-estimates the
//! intercepts b from the current AMP estimate, with inner AMP runs whose
//! channel denoiser uses the current intercepts.
//!
//! The M-step sets, for each branch l,
//!
//! ```text
//! b_l ← mean{ Y_i : branch of Θ̂_i + b is l } − E[Z_l | ·]
//! ```
//!
//! where the correction is either the branch-conditional mean
//! E[Z_l | branch l is active; b] (default) or the per-row posterior mean
//! E[Z_l | Ȳ = Y_i; b] averaged over the branch.

use rayon::prelude::*;

use crate::amp::{self, AmpProblem, AmpState, InitMode, IterationRecord, SigmaUpdate};
use crate::denoisers::{ChannelFamily, McSettings, PosteriorGivenY, SignalFamily};
use crate::error::{AmpError, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{self, Channel, Instance, SignalPrior};
use crate::se::SignalMetrics;
use crate::seed::{self, stream};

/// How E[Z | ·] is formed in the intercept update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EzCorrection {
    /// E[Z_l | branch l active] under Z ~ N(0, Σ₁₁) and the current intercepts.
    BranchMean,
    /// E[Z_l | Ȳ = Y_i] per row, averaged over the rows assigned to branch l.
    RowPosterior,
}

/// Correction terms handed to [`em_update`].
#[derive(Debug, Clone, PartialEq)]
pub enum EzTerms {
    /// One value per branch.
    Constant(Vec<f64>),
    /// An n×L matrix of per-row values.
    PerRow(Mat),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmUpdate {
    pub b: Vec<f64>,
    /// Rows assigned to each branch; sums to n.
    pub counts: Vec<usize>,
    /// Branches with no rows, whose intercept was left unchanged.
    pub empty: Vec<bool>,
}

/// One intercept update. Rows are assigned with the max-affine tie rule
/// (ties go to the later branch).
pub fn em_update(y: &Vector, theta_hat: &Mat, b_m: &[f64], ez: &EzTerms) -> Result<EmUpdate> {
    let (n, l) = theta_hat.shape();
    if y.len() != n || b_m.len() != l {
        return Err(AmpError::shape("intercepts and estimates disagree on L or n"));
    }
    match ez {
        EzTerms::Constant(v) if v.len() != l => {
            return Err(AmpError::shape("one correction per branch expected"))
        }
        EzTerms::PerRow(m) if m.shape() != (n, l) => {
            return Err(AmpError::shape("per-row corrections must be n×L"))
        }
        _ => {}
    }
    let mut sums = vec![0.0; l];
    let mut counts = vec![0usize; l];
    let mut row = vec![0.0; l];
    for i in 0..n {
        for (c, r) in row.iter_mut().enumerate() {
            *r = theta_hat[(i, c)];
        }
        let c = model::mar_branch(&row, b_m);
        let correction = match ez {
            EzTerms::Constant(_) => 0.0,
            EzTerms::PerRow(m) => m[(i, c)],
        };
        sums[c] += y[i] - correction;
        counts[c] += 1;
    }
    let mut b = b_m.to_vec();
    let mut empty = vec![false; l];
    for c in 0..l {
        if counts[c] == 0 {
            empty[c] = true;
            continue;
        }
        b[c] = sums[c] / counts[c] as f64;
        if let EzTerms::Constant(v) = ez {
            b[c] -= v[c];
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(AmpError::numerical("non-finite intercept update"));
    }
    Ok(EmUpdate { b, counts, empty })
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub m_max: usize,
    pub k_max: usize,
    pub signal: SignalFamily,
    pub mc: McSettings,
    /// Samples for the E[Z | ·] correction.
    pub ez_samples: usize,
    pub correction: EzCorrection,
    /// Carry the AMP state across outer iterations instead of restarting.
    /// Off by default: a state reached under poor intercepts (such as
    /// b⁰ = 0) can sit near a degenerate fixed point that AMP leaves slowly.
    pub warm_start: bool,
    /// Keep the intercepts fixed at their initial value (OR-AMP when that is the truth).
    pub freeze_intercepts: bool,
    pub init: InitMode,
    pub sigma_update: SigmaUpdate,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            m_max: 5,
            k_max: 5,
            signal: SignalFamily::Bayes,
            mc: McSettings::default(),
            ez_samples: 10_000,
            correction: EzCorrection::BranchMean,
            warm_start: false,
            freeze_intercepts: false,
            init: InitMode::PriorRandom,
            sigma_update: SigmaUpdate::Posterior,
        }
    }
}

/// State after outer iteration m (m = 0 is the initialization).
#[derive(Debug, Clone)]
pub struct EmRecord {
    pub m: usize,
    pub b: Vec<f64>,
    pub counts: Vec<usize>,
    pub empty: Vec<bool>,
    pub metrics: SignalMetrics,
    /// Squared correlation of (β̂_l, b̂_l) with (β_l, b_l).
    pub corr2_with_intercept: Vec<f64>,
    pub flagged_rows: usize,
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub b: Vec<f64>,
    pub bhat: Mat,
    pub theta_hat: Mat,
    pub trace: Vec<EmRecord>,
    /// Every inner AMP iteration in order.
    pub amp_history: Vec<IterationRecord>,
}

/// Squared correlation of the concatenated vectors (β̂, b̂) and (β, b), per column.
pub fn corr2_with_intercept(bhat: &Mat, b_hat: &[f64], b: &Mat, b_true: &[f64]) -> Vec<f64> {
    (0..b.ncols())
        .map(|l| {
            let (est, truth) = (bhat.column(l), b.column(l));
            let cross = est.dot(&truth) + b_hat[l] * b_true[l];
            let denom = (est.norm_squared() + b_hat[l].powi(2)) * (truth.norm_squared() + b_true[l].powi(2));
            if denom > 0.0 {
                (cross * cross / denom).min(1.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn ez_terms(
    correction: EzCorrection,
    sigma11: &Mat,
    channel: &Channel,
    y: &Vector,
    samples: usize,
    seed: u64,
) -> Result<EzTerms> {
    let posterior = PosteriorGivenY::new(sigma11, channel, samples, seed)?;
    Ok(match correction {
        EzCorrection::BranchMean => {
            EzTerms::Constant(posterior.branch_means()?.into_iter().map(|v| v.unwrap_or(0.0)).collect())
        }
        EzCorrection::RowPosterior => {
            let l = sigma11.nrows();
            let rows: Vec<Vector> = y.as_slice().par_iter().map(|&yi| posterior.mean(yi).mean).collect();
            EzTerms::PerRow(Mat::from_fn(y.len(), l, |i, c| rows[i][c]))
        }
    })
}

/// Runs `m_max` outer iterations of `k_max` AMP steps each, starting from
/// intercepts `b0`. The instance's channel must be max-affine; its own
/// intercepts are used only for the reported metrics.
pub fn em_amp_run(
    instance: &Instance,
    prior: &SignalPrior,
    b0: &[f64],
    config: &EmConfig,
    seed: u64,
) -> Result<EmRun> {
    let Channel::Mar { intercepts: b_true, .. } = &instance.channel else {
        return Err(AmpError::config("EM-AMP needs a max-affine instance"));
    };
    if b0.len() != instance.l() {
        return Err(AmpError::shape("one initial intercept per signal expected"));
    }
    if config.ez_samples == 0 || config.mc.samples == 0 {
        return Err(AmpError::config("Monte-Carlo sample counts must be positive"));
    }
    let l = instance.l();
    let fresh = || amp::amp_init(instance, prior, &config.init, seed);
    let mut state: AmpState = fresh()?;
    let mut b = b0.to_vec();
    let mut amp_history = Vec::new();
    let mut trace = vec![EmRecord {
        m: 0,
        b: b.clone(),
        counts: vec![0; l],
        empty: vec![false; l],
        metrics: amp::empirical_metrics(&state.bhat, &instance.b),
        corr2_with_intercept: corr2_with_intercept(&state.bhat, &b, &instance.b, b_true),
        flagged_rows: 0,
    }];
    let sigma11 = linalg::block(&state.sigma_hat, l, 0, 0);
    let mut theta_hat = &instance.x * &state.bhat;

    for m in 0..config.m_max {
        let channel = instance.channel.with_intercepts(&b);
        let problem = AmpProblem {
            prior: prior.clone(),
            channel: channel.clone(),
            signal: config.signal.clone(),
            denoiser: ChannelFamily::Bayes,
            mc: McSettings {
                samples: config.mc.samples,
                seed: seed::derive(config.mc.seed, stream::CHANNEL_MC, m as u64),
            },
            drop_memory: false,
            sigma_update: config.sigma_update,
            mu_estimate: amp::MuEstimate::Stein,
        };
        if !config.warm_start && m > 0 {
            state = fresh()?;
        }
        let start = amp_history.len();
        state = amp::continue_amp(instance, state, &problem, config.k_max, &mut amp_history)?;
        let flagged_rows = amp_history[start..].iter().map(|r| r.diagnostics.flagged_rows).sum();
        theta_hat = &instance.x * &state.bhat;

        let update = if config.freeze_intercepts {
            EmUpdate {
                b: b.clone(),
                counts: branch_counts(&theta_hat, &b),
                empty: vec![false; l],
            }
        } else {
            let ez = ez_terms(
                config.correction,
                &sigma11,
                &channel,
                &instance.y,
                config.ez_samples,
                seed::derive(seed, stream::POSTERIOR_Y, m as u64),
            )?;
            em_update(&instance.y, &theta_hat, &b, &ez)?
        };
        b = update.b;
        trace.push(EmRecord {
            m: m + 1,
            b: b.clone(),
            counts: update.counts,
            empty: update.empty,
            metrics: amp::empirical_metrics(&state.bhat, &instance.b),
            corr2_with_intercept: corr2_with_intercept(&state.bhat, &b, &instance.b, b_true),
            flagged_rows,
        });
    }
    Ok(EmRun {
        b,
        bhat: state.bhat,
        theta_hat,
        trace,
        amp_history,
    })
}

fn branch_counts(theta_hat: &Mat, b: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; b.len()];
    let mut row = vec![0.0; b.len()];
    for i in 0..theta_hat.nrows() {
        for (c, r) in row.iter_mut().enumerate() {
            *r = theta_hat[(i, c)];
        }
        counts[model::mar_branch(&row, b)] += 1;
    }
    counts
}
