//! Posterior sampling and maximum-likelihood estimation of deterioration
//! rates and maintenance probabilities from a state panel.
//!
//! Both estimators work on an unconstrained scale: log for rates, logit for
//! the two maintenance probabilities. The prior is uniform on each rate over
//! `(0, rate_bound]` and uniform on each probability over `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::ctmc::{deterioration_matrix, maintenance_matrix, RateParams, DEFAULT_RATE_BOUND};
use crate::error::{Error, Result};
use crate::fleet::StatePanel;
use crate::hmm::{self, StateCounts};
use crate::mcmc::{self, Model, PosteriorDraws, SamplerConfig};
use crate::optim::NelderMead;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub rate_bound: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            rate_bound: DEFAULT_RATE_BOUND,
        }
    }
}

impl PriorSpec {
    pub fn new(rate_bound: f64) -> Result<Self> {
        if !(rate_bound > 0.0 && rate_bound.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "rate bound must be positive and finite, got {rate_bound}"
            )));
        }
        Ok(PriorSpec { rate_bound })
    }

    /// One draw from the prior in the flat layout of [`RateParams::to_vec`].
    pub fn draw<R: rand::Rng + ?Sized>(&self, n_periods: usize, rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = (0..3 * n_periods)
            .map(|_| rng.random::<f64>() * self.rate_bound)
            .collect();
        v.push(rng.random());
        v.push(rng.random());
        v
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Coordinates the sampler walks in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScale {
    /// Parameters as they are, with proposals outside the prior box
    /// rejected. Under the uniform priors the target is the likelihood
    /// restricted to the box.
    #[default]
    Natural,
    /// Log rates (cap enforced by rejection) and logit probabilities, with
    /// Jacobian terms.
    LogLogit,
}

/// Posterior of the rate model for one panel.
#[derive(Debug, Clone)]
pub struct RateModel {
    counts: StateCounts,
    n_periods: usize,
    rate_bound: f64,
    scale: SamplingScale,
    /// When false the density is the pure log-likelihood (no prior or
    /// Jacobian), used by the maximum-likelihood fit.
    with_prior: bool,
}

impl RateModel {
    pub fn new(panel: &StatePanel, prior: PriorSpec, n_periods: usize) -> Result<Self> {
        if n_periods == 0 || n_periods > panel.max_age() {
            return Err(Error::InvalidParameter(format!(
                "periods must lie in 1..={}, got {n_periods}",
                panel.max_age()
            )));
        }
        Ok(RateModel {
            counts: StateCounts::from_panel(panel)?,
            n_periods,
            rate_bound: prior.rate_bound,
            scale: SamplingScale::default(),
            with_prior: true,
        })
    }

    pub fn with_scale(mut self, scale: SamplingScale) -> Self {
        self.scale = scale;
        self
    }

    fn likelihood_only(mut self) -> Self {
        self.with_prior = false;
        self.scale = SamplingScale::LogLogit;
        self
    }

    pub fn n_rates(&self) -> usize {
        3 * self.n_periods
    }

    pub fn params_from_unconstrained(&self, z: &[f64]) -> Result<RateParams> {
        let v = self.constrain(z);
        RateParams::from_slice(&v, self.counts.max_age())
    }

    /// Sampler coordinates of `params`.
    pub fn to_unconstrained(&self, params: &RateParams) -> Vec<f64> {
        let v = params.to_vec();
        if self.scale == SamplingScale::Natural {
            return v;
        }
        let n = self.n_rates();
        v.iter()
            .enumerate()
            .map(|(i, x)| if i < n { x.ln() } else { (x / (1.0 - x)).ln() })
            .collect()
    }

    pub fn log_likelihood(&self, params: &RateParams) -> Result<f64> {
        let traj = hmm::evolve(params, self.counts.max_age())?;
        Ok(self.counts.log_likelihood(&traj))
    }

    fn in_support(&self, z: &[f64]) -> bool {
        let n = self.n_rates();
        if z.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self.scale {
            SamplingScale::Natural => {
                z[..n].iter().all(|r| *r >= 0.0 && *r <= self.rate_bound)
                    && z[n..].iter().all(|p| (0.0..=1.0).contains(p))
            }
            SamplingScale::LogLogit => z[..n].iter().all(|zi| *zi <= self.rate_bound.ln()),
        }
    }
}

impl Model for RateModel {
    fn names(&self) -> Vec<String> {
        RateParams::param_names(self.n_periods)
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        if !self.in_support(z) {
            return f64::NEG_INFINITY;
        }
        let params = match self.params_from_unconstrained(z) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let ll = match self.log_likelihood(&params) {
            Ok(ll) => ll,
            Err(_) => return f64::NEG_INFINITY,
        };
        if !self.with_prior || self.scale == SamplingScale::Natural {
            return ll;
        }
        // uniform priors; Jacobians of exp and logistic maps
        let n = self.n_rates();
        let jac_rates: f64 = z[..n].iter().sum();
        let jac_probs: f64 = z[n..]
            .iter()
            .map(|&zi| log_sigmoid(zi) + log_sigmoid(-zi))
            .sum();
        ll + jac_rates + jac_probs
    }

    fn constrain(&self, z: &[f64]) -> Vec<f64> {
        if self.scale == SamplingScale::Natural {
            return z.to_vec();
        }
        let n = self.n_rates();
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                if i < n {
                    zi.exp().min(self.rate_bound)
                } else {
                    sigmoid(zi)
                }
            })
            .collect()
    }

    /// Rates uniform on `(0, min(2, bound))`, probabilities uniform on
    /// `(0, 1)`, mapped to sampler coordinates.
    fn initial(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        let n = self.n_rates();
        let hi = self.rate_bound.min(2.0);
        let natural: Vec<f64> = (0..n + 2)
            .map(|i| {
                if i < n {
                    rng.random_range(0.0..hi)
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        match self.scale {
            SamplingScale::Natural => natural,
            SamplingScale::LogLogit => natural
                .iter()
                .enumerate()
                .map(|(i, x)| if i < n { x.ln() } else { (x / (1.0 - x)).ln() })
                .collect(),
        }
    }
}

/// Adaptive random-walk Metropolis draws from the posterior of the rate
/// model on the default scale. Deterministic for a fixed seed.
pub fn sample_posterior(
    panel: &StatePanel,
    prior: PriorSpec,
    n_periods: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    sample_posterior_on(
        panel,
        prior,
        n_periods,
        SamplingScale::default(),
        config,
        seed,
    )
}

pub fn sample_posterior_on(
    panel: &StatePanel,
    prior: PriorSpec,
    n_periods: usize,
    scale: SamplingScale,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    let model = RateModel::new(panel, prior, n_periods)?.with_scale(scale);
    mcmc::sample(&model, config, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MleFit {
    pub params: RateParams,
    pub log_likelihood: f64,
    /// Restarts that reached a finite optimum.
    pub finite_restarts: usize,
}

/// Maximum-likelihood fit by bounded Nelder–Mead on the unconstrained scale,
/// best of `restarts` random starts. Start `i` depends only on `(seed, i)`,
/// so adding restarts never lowers the returned likelihood.
pub fn mle(panel: &StatePanel, n_periods: usize, restarts: usize, seed: u64) -> Result<MleFit> {
    mle_with_prior(panel, PriorSpec::default(), n_periods, restarts, seed)
}

pub fn mle_with_prior(
    panel: &StatePanel,
    prior: PriorSpec,
    n_periods: usize,
    restarts: usize,
    seed: u64,
) -> Result<MleFit> {
    let model = RateModel::new(panel, prior, n_periods)?.likelihood_only();
    let dim = model.dim();
    let n = model.n_rates();
    let bounds: Vec<(f64, f64)> = (0..dim)
        .map(|i| {
            if i < n {
                (-20.0, prior.rate_bound.ln())
            } else {
                (-30.0, 30.0)
            }
        })
        .collect();
    let objective = |z: &[f64]| -model.log_density(z);
    let coarse = NelderMead {
        max_evals: 3000,
        ftol: 1e-9,
        xtol: 1e-7,
        initial_step: 0.5,
    };
    let polish = NelderMead {
        initial_step: 0.05,
        ..coarse
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut finite = 0;
    for r in 0..restarts.max(1) {
        let mut rng = crate::seeded_rng(seed, r as u64);
        let start = model.initial(&mut rng);
        let first = coarse.minimize(objective, &start, Some(&bounds));
        let result = polish.minimize(objective, &first.x, Some(&bounds));
        if !result.value.is_finite() {
            continue;
        }
        finite += 1;
        if best.as_ref().is_none_or(|(_, v)| result.value < *v) {
            best = Some((result.x, result.value));
        }
    }
    let (z, neg_ll) = best.ok_or_else(|| {
        Error::Numerical(format!(
            "all {restarts} maximum-likelihood restarts were non-finite"
        ))
    })?;
    Ok(MleFit {
        params: model.params_from_unconstrained(&z)?,
        log_likelihood: -neg_ll,
        finite_restarts: finite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Mean, sd, 5/50/95% quantiles (linear interpolation), split-R̂ and ESS
/// per parameter over all chains.
pub fn summarize(draws: &PosteriorDraws) -> Vec<ParamSummary> {
    (0..draws.n_params())
        .map(|p| {
            let col = draws.column(p);
            let sorted = stats::sorted(&col);
            let diag = &draws.diagnostics()[p];
            ParamSummary {
                name: draws.names()[p].clone(),
                mean: stats::mean(&col),
                sd: if col.len() > 1 {
                    stats::variance(&col, 1).sqrt()
                } else {
                    0.0
                },
                q05: stats::quantile_sorted(&sorted, 0.05),
                q50: stats::quantile_sorted(&sorted, 0.50),
                q95: stats::quantile_sorted(&sorted, 0.95),
                rhat: diag.rhat,
                ess: diag.ess,
            }
        })
        .collect()
}

/// Point estimate from posterior means.
pub fn posterior_mean_params(draws: &PosteriorDraws, max_age: usize) -> Result<RateParams> {
    RateParams::from_slice(&draws.means(), max_age)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryHistogram {
    /// 1-based (row, column) in the row-stochastic layout.
    pub row: usize,
    pub col: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixSummary {
    pub mean: [[f64; 3]; 3],
    pub sd: [[f64; 3]; 3],
    /// Histograms over `[0, 1]` for entries that vary across draws.
    pub histograms: Vec<EntryHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedMatrices {
    /// One deterioration-matrix summary per rate period (unit time step).
    pub deterioration: Vec<MatrixSummary>,
    pub maintenance: MatrixSummary,
}

pub const HISTOGRAM_BINS: usize = 30;

fn summarize_matrices(samples: &[[[f64; 3]; 3]]) -> MatrixSummary {
    let mut mean = [[0.0; 3]; 3];
    let mut sd = [[0.0; 3]; 3];
    let mut histograms = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let col: Vec<f64> = samples.iter().map(|m| m[i][j]).collect();
            mean[i][j] = stats::mean(&col);
            sd[i][j] = if col.len() > 1 {
                stats::variance(&col, 1).max(0.0).sqrt()
            } else {
                0.0
            };
            if col.iter().any(|v| *v != col[0]) {
                let mut counts = vec![0usize; HISTOGRAM_BINS];
                for v in &col {
                    let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                    counts[b] += 1;
                }
                let edges = (0..=HISTOGRAM_BINS)
                    .map(|k| k as f64 / HISTOGRAM_BINS as f64)
                    .collect();
                histograms.push(EntryHistogram {
                    row: i + 1,
                    col: j + 1,
                    edges,
                    counts,
                });
            }
        }
    }
    MatrixSummary {
        mean,
        sd,
        histograms,
    }
}

/// Pushes every draw through the deterioration and maintenance matrices and
/// summarizes each entry.
pub fn derived_matrices(draws: &PosteriorDraws) -> Result<DerivedMatrices> {
    let n_params = draws.n_params();
    if n_params < 5 || !(n_params - 2).is_multiple_of(3) {
        return Err(Error::InvalidInput(format!(
            "draws with {n_params} columns do not match the rate layout"
        )));
    }
    let n_periods = (n_params - 2) / 3;
    let total = draws.total_draws();
    let mut deterioration = Vec::with_capacity(n_periods);
    for period in 0..n_periods {
        let samples = (0..total)
            .map(|i| {
                let d = draws.draw(i);
                let rates =
                    crate::ctmc::Rates::new(d[3 * period], d[3 * period + 1], d[3 * period + 2]);
                deterioration_matrix(rates, 1.0).map(|m| m.to_rows())
            })
            .collect::<Result<Vec<_>>>()?;
        deterioration.push(summarize_matrices(&samples));
    }
    let samples = (0..total)
        .map(|i| {
            let d = draws.draw(i);
            maintenance_matrix(d[n_params - 2], d[n_params - 1]).map(|m| m.to_rows())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivedMatrices {
        deterioration,
        maintenance: summarize_matrices(&samples),
    })
}
