//! JSON run configuration. Unknown keys are rejected.

use mixamp::denoisers::{ChannelFamily, SignalFamily, DEFAULT_ZETA};
use mixamp::{Channel, Mat, SignalPrior, Vector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlr2 { alpha: f64 },
    Mlr3 { alphas: [f64; 3] },
    Mar { intercepts: Vec<f64> },
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// Two unit-variance signals with correlation ρ.
    GaussianCorr { rho: f64 },
    /// Independent unit-variance signals with the given means.
    GaussianIid { means: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// Entries in {−1, 0, 1} with P(±1) = ε/2; the dimension follows the model.
    Sparse { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    #[default]
    Bayes,
    SoftThreshold {
        #[serde(default = "default_zeta")]
        zeta: f64,
    },
    /// Bayes f with the two-signal channel denoiser built for proportion α̂.
    Mismatched { alpha_hat: f64 },
}

fn default_zeta() -> f64 {
    DEFAULT_ZETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// Samples per row for Monte-Carlo channel denoisers.
    #[serde(default = "default_mc_samples")]
    pub samples: usize,
    /// Samples per state-evolution expectation; defaults depend on the model.
    #[serde(default)]
    pub se_samples: Option<usize>,
    /// Samples for E[Z | Ȳ] in EM-AMP.
    #[serde(default = "default_ez_samples")]
    pub ez_samples: usize,
}

fn default_mc_samples() -> usize {
    1000
}

fn default_ez_samples() -> usize {
    10_000
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: default_mc_samples(),
            se_samples: None,
            ez_samples: default_ez_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmOptions {
    /// Starting intercepts; zeros when absent.
    #[serde(default)]
    pub initial_intercepts: Option<Vec<f64>>,
    /// Also run AMP with the intercepts frozen at the truth.
    #[serde(default = "yes")]
    pub oracle: bool,
    /// Carry the AMP state across outer iterations (default: restart).
    #[serde(default)]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            initial_intercepts: None,
            oracle: true,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub prior: PriorSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    pub p: usize,
    /// n = round(δp) for each δ.
    pub delta: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: Vec<f64>,
    /// Overrides ρ (correlated Gaussian prior) or ε (sparse prior).
    #[serde(default)]
    pub rho_or_eps: Option<Vec<f64>>,
    /// Overrides α of a two-signal mixed regression.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    /// AMP iterations (k_max); 10 for sweeps and 5 for EM-AMP when absent.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// EM outer iterations (m_max).
    #[serde(default = "default_outer")]
    pub outer_iterations: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mc: McConfig,
    /// Run state evolution alongside the empirical runs.
    #[serde(default = "yes")]
    pub state_evolution: bool,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_sigma() -> Vec<f64> {
    vec![0.0]
}

fn default_outer() -> usize {
    5
}

fn default_repeats() -> usize {
    1
}

/// One point of the parameter grid with its concrete model objects.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub index: usize,
    pub delta: f64,
    pub sigma: f64,
    pub rho_or_eps: Option<f64>,
    pub alpha: Option<f64>,
    pub n: usize,
    pub channel: Channel,
    pub prior: SignalPrior,
    pub signal: SignalFamily,
    pub denoiser: ChannelFamily,
}

impl GridPoint {
    /// The zero signal (ε = 0) has no defined correlation.
    pub fn is_degenerate(&self) -> bool {
        matches!(self.prior, SignalPrior::SparseDiscrete { eps, .. } if eps == 0.0)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn iterations_or(&self, default: usize) -> usize {
        self.iterations.unwrap_or(default)
    }

    pub fn model_name(&self) -> &'static str {
        match self.model {
            ModelSpec::Mlr2 { .. } => "mlr2",
            ModelSpec::Mlr3 { .. } => "mlr3",
            ModelSpec::Mar { .. } => "mar",
            ModelSpec::Moe => "moe",
        }
    }

    pub fn prior_name(&self) -> &'static str {
        match self.prior {
            PriorSpec::GaussianCorr { .. } => "gaussian_corr",
            PriorSpec::GaussianIid { .. } => "gaussian_iid",
            PriorSpec::Gaussian { .. } => "gaussian",
            PriorSpec::Sparse { .. } => "sparse",
        }
    }

    pub fn denoiser_name(&self) -> &'static str {
        match self.denoiser {
            DenoiserSpec::Bayes => "bayes",
            DenoiserSpec::SoftThreshold { .. } => "soft_threshold",
            DenoiserSpec::Mismatched { .. } => "mismatched",
        }
    }

    fn signal_dim(&self) -> usize {
        match &self.model {
            ModelSpec::Mlr2 { .. } => 2,
            ModelSpec::Mlr3 { .. } => 3,
            ModelSpec::Mar { intercepts } => intercepts.len(),
            ModelSpec::Moe => 4,
        }
    }

    fn channel(&self, sigma: f64, alpha: Option<f64>) -> Channel {
        match &self.model {
            ModelSpec::Mlr2 { alpha: a } => Channel::mlr2(alpha.unwrap_or(*a), sigma),
            ModelSpec::Mlr3 { alphas } => Channel::mlr3(*alphas, sigma),
            ModelSpec::Mar { intercepts } => Channel::Mar {
                intercepts: intercepts.clone(),
                sigma,
            },
            ModelSpec::Moe => Channel::Moe { sigma },
        }
    }

    fn prior(&self, rho_or_eps: Option<f64>) -> Result<SignalPrior, String> {
        Ok(match &self.prior {
            PriorSpec::GaussianCorr { rho } => SignalPrior::gaussian_corr(rho_or_eps.unwrap_or(*rho)),
            PriorSpec::GaussianIid { means } => SignalPrior::gaussian_iid(means),
            PriorSpec::Gaussian { mean, cov } => {
                let l = mean.len();
                if cov.len() != l || cov.iter().any(|r| r.len() != l) {
                    return Err(format!("prior covariance must be {l}x{l}"));
                }
                SignalPrior::Gaussian {
                    mean: Vector::from_column_slice(mean),
                    cov: Mat::from_fn(l, l, |i, j| cov[i][j]),
                }
            }
            PriorSpec::Sparse { eps } => SignalPrior::sparse(rho_or_eps.unwrap_or(*eps), self.signal_dim()),
        })
    }

    fn families(&self) -> Result<(SignalFamily, ChannelFamily), String> {
        Ok(match &self.denoiser {
            DenoiserSpec::Bayes => (SignalFamily::Bayes, ChannelFamily::Bayes),
            DenoiserSpec::SoftThreshold { zeta } => {
                if !(*zeta > 0.0) {
                    return Err(format!("soft-threshold ζ = {zeta} must be positive"));
                }
                (SignalFamily::SoftThreshold { zeta: *zeta }, ChannelFamily::Bayes)
            }
            DenoiserSpec::Mismatched { alpha_hat } => {
                if !matches!(self.model, ModelSpec::Mlr2 { .. }) {
                    return Err("the mismatched denoiser needs the mlr2 model".into());
                }
                if !(0.0..=1.0).contains(alpha_hat) {
                    return Err(format!("α̂ = {alpha_hat} is outside [0, 1]"));
                }
                (
                    SignalFamily::Bayes,
                    ChannelFamily::MismatchedMlr {
                        alphas: vec![*alpha_hat, 1.0 - alpha_hat],
                    },
                )
            }
        })
    }

    /// Expands and validates the grid (δ outermost, then σ, ρ/ε, α).
    pub fn grid(&self) -> Result<Vec<GridPoint>, String> {
        if self.p == 0 {
            return Err("p must be at least 1".into());
        }
        if self.repeats == 0 {
            return Err("repeats must be at least 1".into());
        }
        if self.delta.is_empty() || self.sigma.is_empty() {
            return Err("delta and sigma need at least one value".into());
        }
        if self.mc.samples == 0 || self.mc.ez_samples == 0 || self.mc.se_samples == Some(0) {
            return Err("Monte-Carlo sample counts must be positive".into());
        }
        let rho_or_eps: Vec<Option<f64>> = match &self.rho_or_eps {
            None => vec![None],
            Some(v) if matches!(self.prior, PriorSpec::GaussianCorr { .. } | PriorSpec::Sparse { .. }) => {
                v.iter().copied().map(Some).collect()
            }
            Some(_) => return Err("rho_or_eps needs a gaussian_corr or sparse prior".into()),
        };
        let alphas: Vec<Option<f64>> = match &self.alpha {
            None => vec![None],
            Some(v) if matches!(self.model, ModelSpec::Mlr2 { .. }) => v.iter().copied().map(Some).collect(),
            Some(_) => return Err("alpha overrides need the mlr2 model".into()),
        };
        if rho_or_eps.is_empty() || alphas.is_empty() {
            return Err("grid lists must not be empty".into());
        }
        let (signal, denoiser) = self.families()?;
        let mut points = Vec::new();
        for &delta in &self.delta {
            if !(delta > 0.0) || !delta.is_finite() {
                return Err(format!("δ = {delta} must be positive"));
            }
            let n = (delta * self.p as f64).round() as usize;
            if n == 0 {
                return Err(format!("δ = {delta} gives n = 0 at p = {}", self.p));
            }
            for &sigma in &self.sigma {
                for &r in &rho_or_eps {
                    for &a in &alphas {
                        let channel = self.channel(sigma, a);
                        let prior = self.prior(r)?;
                        channel.validate().map_err(|e| e.to_string())?;
                        prior.validate().map_err(|e| e.to_string())?;
                        if prior.dim() != channel.signal_dim() {
                            return Err(format!(
                                "prior dimension {} does not match the {} model ({})",
                                prior.dim(),
                                channel.name(),
                                channel.signal_dim()
                            ));
                        }
                        let rho_or_eps = r.or(match self.prior {
                            PriorSpec::GaussianCorr { rho } => Some(rho),
                            PriorSpec::Sparse { eps } => Some(eps),
                            _ => None,
                        });
                        let alpha = a.or(match self.model {
                            ModelSpec::Mlr2 { alpha } => Some(alpha),
                            _ => None,
                        });
                        points.push(GridPoint {
                            index: points.len(),
                            delta,
                            sigma,
                            rho_or_eps,
                            alpha,
                            n,
                            channel,
                            prior,
                            signal: signal.clone(),
                            denoiser: denoiser.clone(),
                        });
                    }
                }
            }
        }
        Ok(points)
    }

    /// State-evolution samples: fewer for channels whose g is itself Monte Carlo.
    pub fn se_samples(&self) -> usize {
        self.mc.se_samples.unwrap_or(match self.model {
            ModelSpec::Mlr2 { .. } | ModelSpec::Mlr3 { .. } => 100_000,
            ModelSpec::Mar { .. } | ModelSpec::Moe => 5_000,
        })
    }
}
