//! Adaptive random-walk Metropolis on an unconstrained parameter space, plus
//! split-R̂ and effective-sample-size diagnostics.
//!
//! Warmup adapts a Gaussian proposal `s * L * eps` (with `L L^T` the
//! proposal covariance) in three phases: a fast phase tuning only the
//! global scale `s`, a series of doubling windows whose sample covariance
//! replaces the proposal covariance at each window end, and a final fast
//! phase. The scale follows a Robbins–Monro recursion on the Metropolis
//! acceptance probability toward the target rate. Everything is frozen
//! after warmup, so kept draws come from a fixed Markov kernel.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// A log density on the unconstrained scale, Jacobian terms included.
pub trait Model: Sync {
    fn names(&self) -> Vec<String>;

    fn dim(&self) -> usize {
        self.names().len()
    }

    /// Unnormalized log density; `-inf` outside the support.
    fn log_density(&self, z: &[f64]) -> f64;

    /// Maps an unconstrained point to the reported parameters.
    fn constrain(&self, z: &[f64]) -> Vec<f64>;

    /// Initial point; defaults to uniform(-2, 2) on every coordinate.
    fn initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    /// Disables adaptation and fixes an isotropic proposal sd. Used as a
    /// deliberately broken sampler in calibration checks.
    pub frozen_proposal_sd: Option<f64>,
    pub max_init_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            target_accept: 0.234,
            frozen_proposal_sd: None,
            max_init_attempts: 100,
        }
    }
}

/// Threshold above which split-R̂ raises the warning flag.
pub const RHAT_WARNING: f64 = 1.05;

/// Chains accepting less often than this are reported as stuck.
pub const STUCK_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Constrained kept draws, `draws[i][param]`.
    pub draws: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub warmup_acceptance_rate: f64,
    pub proposal_scale: f64,
}

struct Proposal {
    chol: DMatrix<f64>,
    log_scale: f64,
}

impl Proposal {
    fn isotropic(dim: usize, sd: f64) -> Self {
        Proposal {
            chol: DMatrix::identity(dim, dim),
            log_scale: sd.ln(),
        }
    }

    fn step(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dim = z.len();
        let eps =
            DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let delta = &self.chol * eps * self.log_scale.exp();
        z.iter().zip(delta.iter()).map(|(a, b)| a + b).collect()
    }

    /// Regularized sample covariance of the window, shrunk toward a small
    /// multiple of the identity.
    fn set_covariance(&mut self, window: &[Vec<f64>]) {
        let n = window.len();
        let dim = window[0].len();
        if n < 2 {
            return;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|j| window.iter().map(|w| w[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = DMatrix::zeros(dim, dim);
        for w in window {
            for a in 0..dim {
                for b in 0..=a {
                    cov[(a, b)] += (w[a] - mean[a]) * (w[b] - mean[b]);
                }
            }
        }
        let nf = n as f64;
        for a in 0..dim {
            for b in 0..=a {
                let v = cov[(a, b)] / (nf - 1.0) * nf / (nf + 5.0);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += 1e-3 * 5.0 / (nf + 5.0);
        }
        if let Some(ch) = cov.cholesky() {
            self.chol = ch.l();
            self.log_scale = (2.38 / (dim as f64).sqrt()).ln();
        }
    }
}

fn buffers(warmup: usize) -> (usize, usize, usize) {
    if warmup >= 150 {
        (75, 50, 25)
    } else {
        let init = warmup * 15 / 100;
        let term = warmup / 10;
        (init, term, (warmup - init - term).max(1))
    }
}

/// Warmup iterations at which a covariance window closes.
fn window_ends(warmup: usize) -> Vec<usize> {
    if warmup < 20 {
        return Vec::new();
    }
    let (init, term, base) = buffers(warmup);
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < slow_end {
        let mut end = start + size;
        // absorb a final window that would be shorter than twice this one
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

fn initialize<M: Model + ?Sized>(
    model: &M,
    rng: &mut ChaCha8Rng,
    attempts: usize,
) -> Result<(Vec<f64>, f64)> {
    for _ in 0..attempts.max(1) {
        let z = model.initial(rng);
        let lp = model.log_density(&z);
        if lp.is_finite() {
            return Ok((z, lp));
        }
    }
    Err(Error::Numerical(format!(
        "log density non-finite at {attempts} random initial points"
    )))
}

/// Runs one chain with its own RNG stream `(seed, chain)`.
pub fn run_chain<M: Model + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    seed: u64,
    chain: usize,
) -> Result<ChainOutput> {
    let dim = model.dim();
    let mut rng = crate::seeded_rng(seed, chain as u64);
    let (mut z, mut lp) = initialize(model, &mut rng, config.max_init_attempts)?;

    let frozen = config.frozen_proposal_sd;
    let mut proposal = match frozen {
        Some(sd) => Proposal::isotropic(dim, sd),
        None => Proposal::isotropic(dim, 0.1 * 2.38 / (dim as f64).sqrt()),
    };
    let ends = window_ends(config.warmup);
    let mut window_start = if ends.is_empty() {
        usize::MAX
    } else {
        buffers(config.warmup).0
    };
    let mut next_end = 0usize;
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut rm_step = 0usize;

    let mut accepted_warmup = 0usize;
    let mut accepted = 0usize;
    let mut draws = Vec::with_capacity(config.draws);

    for iter in 0..config.warmup + config.draws {
        let candidate = proposal.step(&z, &mut rng);
        let lp_new = model.log_density(&candidate);
        let log_ratio = lp_new - lp;
        let accept_prob = if log_ratio.is_nan() {
            0.0
        } else {
            log_ratio.min(0.0).exp()
        };
        let u: f64 = rng.random();
        let accept = u < accept_prob;
        if accept {
            z = candidate;
            lp = lp_new;
        }

        if iter < config.warmup {
            accepted_warmup += accept as usize;
            if frozen.is_none() {
                rm_step += 1;
                let gain = (rm_step as f64).powf(-0.6);
                proposal.log_scale += gain * (accept_prob - config.target_accept);
                if iter >= window_start {
                    window.push(z.clone());
                }
                if next_end < ends.len() && iter + 1 == ends[next_end] {
                    proposal.set_covariance(&window);
                    window.clear();
                    window_start = iter + 1;
                    next_end += 1;
                    rm_step = 0;
                }
            }
        } else {
            accepted += accept as usize;
            draws.push(model.constrain(&z));
        }
    }

    Ok(ChainOutput {
        draws,
        acceptance_rate: accepted as f64 / config.draws.max(1) as f64,
        warmup_acceptance_rate: accepted_warmup as f64 / config.warmup.max(1) as f64,
        proposal_scale: proposal.log_scale.exp(),
    })
}

/// Runs `config.chains` independent chains in parallel and assembles the
/// draws. Fails if any chain is stuck.
pub fn sample<M: Model + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    if config.draws == 0 || config.chains == 0 {
        return Err(Error::InvalidParameter(
            "need at least one chain and one draw".into(),
        ));
    }
    let chains: Vec<ChainOutput> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(model, config, seed, c))
        .collect::<Result<_>>()?;
    for (c, out) in chains.iter().enumerate() {
        let identical = out.draws.windows(2).all(|w| w[0] == w[1]);
        if config.draws > 1 && (out.acceptance_rate < STUCK_ACCEPTANCE || identical) {
            return Err(Error::Diagnostic(format!(
                "chain {c} is stuck (acceptance rate {:.4})",
                out.acceptance_rate
            )));
        }
    }
    let acceptance = chains.iter().map(|c| c.acceptance_rate).collect();
    PosteriorDraws::new(
        model.names(),
        chains.into_iter().map(|c| c.draws).collect(),
        acceptance,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
}

/// Kept draws `[chain][draw][param]` with convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    n_chains: usize,
    n_draws: usize,
    values: Vec<f64>,
    diagnostics: Vec<ParamDiagnostics>,
    acceptance: Vec<f64>,
}

impl PosteriorDraws {
    pub fn new(
        names: Vec<String>,
        chains: Vec<Vec<Vec<f64>>>,
        acceptance: Vec<f64>,
    ) -> Result<Self> {
        let n_chains = chains.len();
        let n_draws = chains.first().map_or(0, |c| c.len());
        let dim = names.len();
        if n_chains == 0 || n_draws == 0 {
            return Err(Error::InvalidInput("posterior has no draws".into()));
        }
        let mut values = Vec::with_capacity(n_chains * n_draws * dim);
        for chain in &chains {
            if chain.len() != n_draws {
                return Err(Error::InvalidInput("chains have unequal lengths".into()));
            }
            for d in chain {
                if d.len() != dim {
                    return Err(Error::InvalidInput(format!(
                        "draw has {} values for {dim} parameters",
                        d.len()
                    )));
                }
                values.extend_from_slice(d);
            }
        }
        let mut out = PosteriorDraws {
            names,
            n_chains,
            n_draws,
            values,
            diagnostics: Vec::new(),
            acceptance,
        };
        out.diagnostics = (0..dim)
            .map(|p| {
                let per_chain: Vec<Vec<f64>> =
                    (0..n_chains).map(|c| out.chain_column(c, p)).collect();
                ParamDiagnostics {
                    name: out.names[p].clone(),
                    rhat: split_rhat(&per_chain),
                    ess: effective_sample_size(&per_chain),
                }
            })
            .collect();
        Ok(out)
    }

    /// One chain holding a single point, e.g. an optimizer result.
    pub fn point(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(names, vec![vec![values]], vec![f64::NAN])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    pub fn get(&self, chain: usize, draw: usize, param: usize) -> f64 {
        self.values[(chain * self.n_draws + draw) * self.names.len() + param]
    }

    /// Draw `i` in chain-major order across all chains.
    pub fn draw(&self, i: usize) -> &[f64] {
        let dim = self.names.len();
        &self.values[i * dim..(i + 1) * dim]
    }

    pub fn chain_column(&self, chain: usize, param: usize) -> Vec<f64> {
        (0..self.n_draws)
            .map(|d| self.get(chain, d, param))
            .collect()
    }

    /// All draws of one parameter, chain-major.
    pub fn column(&self, param: usize) -> Vec<f64> {
        (0..self.total_draws())
            .map(|i| self.values[i * self.names.len() + param])
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.n_params())
            .map(|p| crate::stats::mean(&self.column(p)))
            .collect()
    }

    pub fn diagnostics(&self) -> &[ParamDiagnostics] {
        &self.diagnostics
    }

    pub fn acceptance_rates(&self) -> &[f64] {
        &self.acceptance
    }

    /// True when some parameter's split-R̂ exceeds [`RHAT_WARNING`].
    pub fn rhat_warning(&self) -> bool {
        self.diagnostics.iter().any(|d| d.rhat > RHAT_WARNING)
    }

    pub fn max_rhat(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.rhat)
            .filter(|r| !r.is_nan())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `chain,draw,<param...>` with 0-based chain and draw indices.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(wrap)?;
        for c in 0..self.n_chains {
            for d in 0..self.n_draws {
                let mut row = vec![c.to_string(), d.to_string()];
                row.extend((0..self.n_params()).map(|p| self.get(c, d, p).to_string()));
                w.write_record(&row).map_err(wrap)?;
            }
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }

    /// Reads the layout written by [`PosteriorDraws::write_csv`]. Chains are
    /// grouped by the `chain` column; acceptance rates are not stored and
    /// come back as NaN.
    pub fn read_csv<R: Read>(reader: R, source: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::schema(source, e.to_string()))?
            .clone();
        if headers.len() < 3 || &headers[0] != "chain" || &headers[1] != "draw" {
            return Err(Error::schema(
                source,
                "expected header `chain,draw,<param...>`",
            ));
        }
        let names: Vec<String> = headers.iter().skip(2).map(String::from).collect();
        let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::schema(source, e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let chain: usize = rec[0]
                .parse()
                .map_err(|_| Error::schema(source, format!("line {line}: bad chain index")))?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::schema(source, format!("line {line}: non-numeric draw")))?;
            if chain > chains.len() {
                return Err(Error::schema(
                    source,
                    format!("line {line}: chain indices must be consecutive"),
                ));
            }
            if chain == chains.len() {
                chains.push(Vec::new());
            }
            chains[chain].push(vals);
        }
        if chains.is_empty() {
            return Err(Error::schema(source, "no records"));
        }
        let acceptance = vec![f64::NAN; chains.len()];
        Self::new(names, chains, acceptance).map_err(|e| Error::schema(source, e.to_string()))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, path)
    }
}

/// Split-R̂: each chain is halved and the potential scale reduction is
/// computed over the halves. Identical constant chains give 1; fewer than
/// four draws per chain give NaN.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect();
    let means: Vec<f64> = halves.iter().map(|h| crate::stats::mean(h)).collect();
    let within = halves
        .iter()
        .map(|h| crate::stats::variance(h, 1))
        .sum::<f64>()
        / halves.len() as f64;
    let between = n as f64 * crate::stats::variance(&means, 1);
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * within + between / nf;
    (var_plus / within).sqrt()
}

/// Biased autocovariances at every lag `0..n`, by FFT with zero padding.
fn autocovariances(x: &[f64]) -> Vec<f64> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = x.len();
    let m = crate::stats::mean(x);
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (len * n) as f64).collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// positive-sequence truncation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let nf = n as f64;
    let acovs: Vec<Vec<f64>> = chains.iter().map(|c| autocovariances(c)).collect();
    let variances: Vec<f64> = acovs.iter().map(|a| a[0] * nf / (nf - 1.0)).collect();
    let within = crate::stats::mean(&variances);
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let between = if m > 1 {
        nf * crate::stats::variance(&means, 1)
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * within + between / nf;
    if var_plus == 0.0 {
        return (m * n) as f64;
    }

    let rho = |lag: usize| -> f64 {
        let acov = acovs.iter().map(|a| a[lag]).sum::<f64>() / m as f64;
        1.0 - (within - acov) / var_plus
    };

    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / ((m * n) as f64).log10().max(1.0));
    (m * n) as f64 / tau
}
