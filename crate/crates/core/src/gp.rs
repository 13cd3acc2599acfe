//! Hierarchical additive Gaussian-process model for failure counts, used to
//! impute missing panel cells.
//!
//! A count at (age `t`, ship `j`, engine `k[j]`) is normal around
//!
//! ```text
//! mu + age_t + ship_j + engine_k + gamma_j(t) + delta_k(t)
//! ```
//!
//! with i.i.d. normal age/ship/engine effects, a per-ship GP `gamma_j` and a
//! per-engine-type GP `delta_k` over age (exponentiated quadratic kernels),
//! and engine-specific observation noise. Integrating out every latent layer
//! leaves a multivariate normal with constant mean `mu` and the structured
//! covariance built by [`assemble_kernel`]; only the hyperparameters are
//! sampled or optimized.
//!
//! Length-scales carry a Weibull prior written as `l = l_s * scale` with
//! `l_s ~ Weibull(shape, 1)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Weibull};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::{FleetPanel, ShipRecord};
use crate::mcmc::{self, Model, PosteriorDraws, SamplerConfig};
use crate::optim::NelderMead;
use crate::stats;

/// Relative diagonal jitter added before every factorization.
pub const BASE_JITTER: f64 = 1e-8;
/// Number of ×10 jitter escalations tried after the first failure.
pub const JITTER_ESCALATIONS: usize = 3;

/// Exponentiated quadratic kernel `alpha^2 exp(-|x_i - x_j|^2 / (2 l^2))`.
pub fn eq_kernel(x_i: &[f64], x_j: &[f64], alpha: f64, l: f64) -> Result<f64> {
    if x_i.len() != x_j.len() {
        return Err(Error::InvalidParameter(format!(
            "kernel inputs have dimensions {} and {}",
            x_i.len(),
            x_j.len()
        )));
    }
    if !(l > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "length-scale must be positive, got {l}"
        )));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "amplitude must be nonnegative, got {alpha}"
        )));
    }
    let sq: f64 = x_i.iter().zip(x_j).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(alpha * alpha * (-sq / (2.0 * l * l)).exp())
}

fn eq_1d(dt: f64, alpha: f64, l: f64) -> f64 {
    alpha * alpha * (-dt * dt / (2.0 * l * l)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub mu: f64,
    pub sigma_age: f64,
    pub sigma_ship: f64,
    pub sigma_engine: f64,
    /// Observation noise sd per engine type, `sigma_noise[k - 1]`.
    pub sigma_noise: Vec<f64>,
    pub alpha_gamma: f64,
    pub l_gamma: f64,
    pub alpha_delta: f64,
    pub l_delta: f64,
}

impl GpHyperParams {
    pub fn validate(&self, n_engine_types: usize) -> Result<()> {
        if self.sigma_noise.len() != n_engine_types {
            return Err(Error::InvalidParameter(format!(
                "{} noise scales for {n_engine_types} engine types",
                self.sigma_noise.len()
            )));
        }
        let scales = [
            self.sigma_age,
            self.sigma_ship,
            self.sigma_engine,
            self.alpha_gamma,
            self.alpha_delta,
        ];
        if !self.mu.is_finite()
            || scales
                .iter()
                .chain(&self.sigma_noise)
                .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(Error::InvalidParameter(
                "GP scales must be finite and nonnegative".into(),
            ));
        }
        if !(self.l_gamma > 0.0 && self.l_delta > 0.0) {
            return Err(Error::InvalidParameter(
                "GP length-scales must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Labels of the flat layout used by [`GpHyperParams::to_vec`].
    pub fn names(n_engine_types: usize) -> Vec<String> {
        let mut names: Vec<String> = ["mu", "sigma_age", "sigma_ship", "sigma_engine"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((1..=n_engine_types).map(|k| format!("sigma_noise_{k}")));
        names.extend(
            ["alpha_gamma", "l_gamma", "alpha_delta", "l_delta"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.mu, self.sigma_age, self.sigma_ship, self.sigma_engine];
        v.extend(&self.sigma_noise);
        v.extend([
            self.alpha_gamma,
            self.l_gamma,
            self.alpha_delta,
            self.l_delta,
        ]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 9 {
            return Err(Error::InvalidParameter(format!(
                "GP hyperparameter vector too short ({})",
                v.len()
            )));
        }
        let k = v.len() - 8;
        Ok(GpHyperParams {
            mu: v[0],
            sigma_age: v[1],
            sigma_ship: v[2],
            sigma_engine: v[3],
            sigma_noise: v[4..4 + k].to_vec(),
            alpha_gamma: v[4 + k],
            l_gamma: v[5 + k],
            alpha_delta: v[6 + k],
            l_delta: v[7 + k],
        })
    }
}

/// A panel cell: 0-based ship index, 1-based age, 1-based engine type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub ship: usize,
    pub age: usize,
    pub engine: usize,
}

fn cells_where(panel: &FleetPanel, observed: bool) -> Vec<Cell> {
    panel
        .ships()
        .iter()
        .enumerate()
        .flat_map(|(j, s)| {
            s.counts
                .iter()
                .enumerate()
                .filter(move |(_, c)| c.is_some() == observed)
                .map(move |(t, _)| Cell {
                    ship: j,
                    age: t + 1,
                    engine: s.engine_type,
                })
        })
        .collect()
}

/// Covariance between two cells, excluding observation noise.
fn latent_cov(a: Cell, b: Cell, hp: &GpHyperParams) -> f64 {
    let same_age = a.age == b.age;
    let same_ship = a.ship == b.ship;
    let same_engine = a.engine == b.engine;
    let dt = a.age as f64 - b.age as f64;
    let mut c = 0.0;
    if same_age {
        c += hp.sigma_age * hp.sigma_age;
    }
    if same_ship {
        c += hp.sigma_ship * hp.sigma_ship + eq_1d(dt, hp.alpha_gamma, hp.l_gamma);
    }
    if same_engine {
        c += hp.sigma_engine * hp.sigma_engine + eq_1d(dt, hp.alpha_delta, hp.l_delta);
    }
    c
}

fn noise_var(c: Cell, hp: &GpHyperParams) -> f64 {
    hp.sigma_noise[c.engine - 1].powi(2)
}

fn cross_cov(rows: &[Cell], cols: &[Cell], hp: &GpHyperParams) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        latent_cov(rows[i], cols[j], hp)
    })
}

/// Covariance among a set of cells, including observation noise on the
/// diagonal.
fn gram(cells: &[Cell], hp: &GpHyperParams) -> DMatrix<f64> {
    let n = cells.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = latent_cov(cells[i], cells[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += noise_var(cells[i], hp);
    }
    k
}

/// Covariance matrix of the observed cells.
#[derive(Debug, Clone)]
pub struct StructuredKernel {
    pub cells: Vec<Cell>,
    pub gram: DMatrix<f64>,
}

pub fn assemble_kernel(panel: &FleetPanel, hp: &GpHyperParams) -> Result<StructuredKernel> {
    hp.validate(panel.n_engine_types())?;
    let cells = cells_where(panel, true);
    if cells.is_empty() {
        return Err(Error::InvalidInput("panel has no observed cells".into()));
    }
    let gram = gram(&cells, hp);
    Ok(StructuredKernel { cells, gram })
}

/// Cholesky factor with relative jitter `BASE_JITTER * tr(K) / n`,
/// escalated ×10 up to [`JITTER_ESCALATIONS`] times.
fn factor(k: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let scale = k.trace() / n as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Numerical(format!(
            "covariance has mean diagonal {scale}"
        )));
    }
    let mut jitter = BASE_JITTER * scale;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = kj.cholesky() {
            return Ok(ch);
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "covariance factorization failed after {JITTER_ESCALATIONS} jitter escalations"
    )))
}

fn observed_vector(panel: &FleetPanel, cells: &[Cell]) -> DVector<f64> {
    DVector::from_iterator(
        cells.len(),
        cells
            .iter()
            .map(|c| panel.ships()[c.ship].counts[c.age - 1].expect("observed cell")),
    )
}

/// Relative cutoff below which eigen-directions of the age/engine
/// covariance are dropped from the low-rank factor.
const LOW_RANK_CUTOFF: f64 = 1e-14;

/// `U sqrt(max(lambda, 0))` over the eigenpairs of a symmetric PSD matrix
/// above [`LOW_RANK_CUTOFF`], so that `m ~= F F^T`.
fn low_rank_root(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > LOW_RANK_CUTOFF * top && top > 0.0)
        .collect();
    DMatrix::from_fn(n, keep.len(), |t, k| {
        eig.eigenvectors[(t, keep[k])] * eig.eigenvalues[keep[k]].sqrt()
    })
}

struct ShipBlock {
    /// Positions of this ship's cells in the observed-cell order.
    rows: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
    /// Low-rank columns this ship touches.
    cols: Vec<usize>,
    /// `A_s^{-1} V_s` restricted to `cols`.
    a_inv_v: DMatrix<f64>,
}

/// Factorization of the observed-cell covariance `K = A + V V^T`, where `A`
/// is block diagonal by ship (ship effect, ship GP, noise, jitter) and
/// `V V^T` carries the age and engine terms. Solves and the log determinant
/// go through the Woodbury identity, costing `O(n w^2)` rather than `O(n^3)`.
struct KernelFactor {
    blocks: Vec<ShipBlock>,
    capacitance: Cholesky<f64, Dyn>,
    rank: usize,
    n: usize,
    log_det: f64,
}

impl KernelFactor {
    fn new(cells: &[Cell], hp: &GpHyperParams) -> Result<Self> {
        let n = cells.len();
        let scale = cells
            .iter()
            .map(|&c| latent_cov(c, c, hp) + noise_var(c, hp))
            .sum::<f64>()
            / n as f64;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Numerical(format!(
                "covariance has mean diagonal {scale}"
            )));
        }
        let max_age = cells.iter().map(|c| c.age).max().unwrap_or(0);
        let (features, rank) = engine_features(cells, hp, max_age);

        let mut by_ship: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, c) in cells.iter().enumerate() {
            by_ship.entry(c.ship).or_default().push(i);
        }
        let ship_cov: Vec<f64> = (0..max_age)
            .map(|d| hp.sigma_ship.powi(2) + eq_1d(d as f64, hp.alpha_gamma, hp.l_gamma))
            .collect();

        let mut jitter = BASE_JITTER * scale;
        for _ in 0..=JITTER_ESCALATIONS {
            let mut blocks = Vec::with_capacity(by_ship.len());
            let mut cap = DMatrix::<f64>::identity(rank, rank);
            let mut log_det = 0.0;
            let mut ok = true;
            for rows in by_ship.values() {
                let first = cells[rows[0]];
                let noise = noise_var(first, hp) + jitter;
                let a = DMatrix::from_fn(rows.len(), rows.len(), |i, j| {
                    let d = cells[rows[i]].age.abs_diff(cells[rows[j]].age);
                    ship_cov[d] + if i == j { noise } else { 0.0 }
                });
                let Some(chol) = a.cholesky() else {
                    ok = false;
                    break;
                };
                log_det += 2.0
                    * chol
                        .l_dirty()
                        .diagonal()
                        .iter()
                        .map(|v| v.ln())
                        .sum::<f64>();
                let (cols, f) = &features[first.engine - 1];
                let v = DMatrix::from_fn(rows.len(), cols.len(), |i, k| {
                    f[(cells[rows[i]].age - 1, k)]
                });
                let a_inv_v = chol.solve(&v);
                let vt_a_inv_v = v.tr_mul(&a_inv_v);
                for (p, &cp) in cols.iter().enumerate() {
                    for (q, &cq) in cols.iter().enumerate() {
                        cap[(cp, cq)] += vt_a_inv_v[(p, q)];
                    }
                }
                blocks.push(ShipBlock {
                    rows: rows.clone(),
                    chol,
                    cols: cols.clone(),
                    a_inv_v,
                });
            }
            if ok {
                let cap = (&cap + cap.transpose()) * 0.5;
                if let Some(capacitance) = cap.cholesky() {
                    log_det += 2.0
                        * capacitance
                            .l_dirty()
                            .diagonal()
                            .iter()
                            .map(|v| v.ln())
                            .sum::<f64>();
                    return Ok(KernelFactor {
                        blocks,
                        capacitance,
                        rank,
                        n,
                        log_det,
                    });
                }
            }
            jitter *= 10.0;
        }
        Err(Error::Numerical(format!(
            "covariance factorization failed after {JITTER_ESCALATIONS} jitter escalations"
        )))
    }

    /// `K^{-1} B`.
    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let m = b.ncols();
        let mut x = DMatrix::zeros(self.n, m);
        let mut proj = DMatrix::zeros(self.rank, m);
        let mut local = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let bs = b.select_rows(&blk.rows);
            let xs = blk.chol.solve(&bs);
            let vx = blk.a_inv_v.tr_mul(&bs);
            for (p, &cp) in blk.cols.iter().enumerate() {
                for j in 0..m {
                    proj[(cp, j)] += vx[(p, j)];
                }
            }
            local.push(xs);
        }
        let u = self.capacitance.solve(&proj);
        for (blk, mut xs) in self.blocks.iter().zip(local) {
            let us = u.select_rows(&blk.cols);
            xs -= &blk.a_inv_v * us;
            for (i, &r) in blk.rows.iter().enumerate() {
                for j in 0..m {
                    x[(r, j)] = xs[(i, j)];
                }
            }
        }
        x
    }

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        DVector::from_column_slice(x.as_slice())
    }
}

/// Low-rank features of the age and engine terms for each engine type:
/// the columns they occupy and a `max_age x width` matrix whose row `t - 1`
/// is the feature vector of a cell at age `t`.
fn engine_features(
    cells: &[Cell],
    hp: &GpHyperParams,
    max_age: usize,
) -> (Vec<(Vec<usize>, DMatrix<f64>)>, usize) {
    let n_types = hp.sigma_noise.len();
    let engine_cov = DMatrix::from_fn(max_age, max_age, |i, j| {
        hp.sigma_engine.powi(2) + eq_1d(i as f64 - j as f64, hp.alpha_delta, hp.l_delta)
    });
    let age_var = hp.sigma_age.powi(2);
    let mut present: Vec<usize> = cells.iter().map(|c| c.engine).collect();
    present.sort_unstable();
    present.dedup();
    let empty = (Vec::new(), DMatrix::zeros(max_age, 0));
    let mut features = vec![empty; n_types];
    if present.len() == 1 {
        // one engine type: age and engine terms merge into one T x T block
        let mut m = engine_cov;
        for t in 0..max_age {
            m[(t, t)] += age_var;
        }
        let f = low_rank_root(m);
        let rank = f.ncols();
        features[present[0] - 1] = ((0..rank).collect(), f);
        return (features, rank);
    }
    let age_cols = if age_var > 0.0 { max_age } else { 0 };
    let root = low_rank_root(engine_cov);
    let w = root.ncols();
    for (b, &e) in present.iter().enumerate() {
        let offset = age_cols + b * w;
        let cols: Vec<usize> = (0..age_cols).chain(offset..offset + w).collect();
        let f = DMatrix::from_fn(max_age, age_cols + w, |t, k| {
            if k < age_cols {
                if k == t {
                    hp.sigma_age
                } else {
                    0.0
                }
            } else {
                root[(t, k - age_cols)]
            }
        });
        features[e - 1] = (cols, f);
    }
    (features, age_cols + present.len() * w)
}

/// Multivariate-normal log density of the observed cells.
pub fn log_marginal(panel: &FleetPanel, hp: &GpHyperParams) -> Result<f64> {
    hp.validate(panel.n_engine_types())?;
    let cells = cells_where(panel, true);
    if cells.is_empty() {
        return Err(Error::InvalidInput("panel has no observed cells".into()));
    }
    let y = observed_vector(panel, &cells);
    log_marginal_from(&cells, &y, hp)
}

fn log_marginal_from(cells: &[Cell], y: &DVector<f64>, hp: &GpHyperParams) -> Result<f64> {
    let f = KernelFactor::new(cells, hp)?;
    let resid = y.add_scalar(-hp.mu);
    let quad = resid.dot(&f.solve_vec(&resid));
    let n = cells.len() as f64;
    Ok(-0.5 * (quad + f.log_det + n * (2.0 * std::f64::consts::PI).ln()))
}

/// Derivative of [`log_marginal`] with respect to `mu`: `1^T K^{-1} (y - mu)`.
pub fn log_marginal_grad_mu(panel: &FleetPanel, hp: &GpHyperParams) -> Result<f64> {
    hp.validate(panel.n_engine_types())?;
    let cells = cells_where(panel, true);
    if cells.is_empty() {
        return Err(Error::InvalidInput("panel has no observed cells".into()));
    }
    let y = observed_vector(panel, &cells);
    let f = KernelFactor::new(&cells, hp)?;
    Ok(f.solve_vec(&y.add_scalar(-hp.mu)).sum())
}

/// Hyperprior constants and prior scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub k_gamma: f64,
    pub lambda_gamma: f64,
    pub k_delta: f64,
    pub lambda_delta: f64,
    /// Half-normal scale shared by all sd and amplitude parameters.
    pub sigma_scale: f64,
    pub mu_mean: f64,
    pub mu_sd: f64,
    /// Lower bound for sd parameters during optimization.
    pub sigma_floor: f64,
}

impl GpPrior {
    /// Weibull shape 2 and scale `max_age / 4`; half-normal scale twice the
    /// sd of the observed counts; a wide normal on `mu` around their mean.
    pub fn for_panel(panel: &FleetPanel) -> Self {
        let obs = panel.observed_values();
        let (m, sd) = if obs.len() >= 2 {
            (stats::mean(&obs), stats::variance(&obs, 1).sqrt())
        } else {
            (obs.first().copied().unwrap_or(0.0), 0.0)
        };
        let scale = (2.0 * sd).max(1e-3 * m.abs().max(1.0));
        GpPrior {
            k_gamma: 2.0,
            lambda_gamma: panel.max_age() as f64 / 4.0,
            k_delta: 2.0,
            lambda_delta: panel.max_age() as f64 / 4.0,
            sigma_scale: scale,
            mu_mean: m,
            mu_sd: 5.0 * scale,
            sigma_floor: 1e-6,
        }
    }
}

/// Draws a length-scale `l_s * scale` with `l_s ~ Weibull(shape, 1)`.
pub fn sample_length_scale<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let w = Weibull::new(1.0, shape)
        .map_err(|e| Error::InvalidParameter(format!("Weibull shape {shape}: {e}")))?;
    Ok(w.sample(rng) * scale)
}

fn weibull_unit_logpdf(x: f64, k: f64) -> f64 {
    k.ln() + (k - 1.0) * x.ln() - x.powf(k)
}

/// Hyperparameter posterior on the unconstrained scale: `mu` as is, log of
/// every sd/amplitude, log of the standardized length-scales.
struct GpModel {
    cells: Vec<Cell>,
    y: DVector<f64>,
    prior: GpPrior,
    n_types: usize,
    /// Include the log-transform Jacobian (sampling) or not (MAP).
    jacobian: bool,
}

impl GpModel {
    fn new(panel: &FleetPanel, prior: GpPrior, jacobian: bool) -> Result<Self> {
        let cells = cells_where(panel, true);
        if cells.is_empty() {
            return Err(Error::InvalidInput("panel has no observed cells".into()));
        }
        let y = observed_vector(panel, &cells);
        Ok(GpModel {
            cells,
            y,
            prior,
            n_types: panel.n_engine_types(),
            jacobian,
        })
    }

    fn hyper(&self, z: &[f64]) -> GpHyperParams {
        let k = self.n_types;
        GpHyperParams {
            mu: z[0],
            sigma_age: z[1].exp(),
            sigma_ship: z[2].exp(),
            sigma_engine: z[3].exp(),
            sigma_noise: z[4..4 + k].iter().map(|v| v.exp()).collect(),
            alpha_gamma: z[4 + k].exp(),
            l_gamma: z[5 + k].exp() * self.prior.lambda_gamma,
            alpha_delta: z[6 + k].exp(),
            l_delta: z[7 + k].exp() * self.prior.lambda_delta,
        }
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let k = self.n_types;
        let p = &self.prior;
        let sig = (p.sigma_floor.ln(), (100.0 * p.sigma_scale).ln());
        let len = (1e-3f64.ln(), 100f64.ln());
        let mut b = vec![(p.mu_mean - 100.0 * p.mu_sd, p.mu_mean + 100.0 * p.mu_sd)];
        b.extend(std::iter::repeat_n(sig, 3 + k));
        b.extend([sig, len, sig, len]);
        b
    }
}

impl Model for GpModel {
    fn names(&self) -> Vec<String> {
        GpHyperParams::names(self.n_types)
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        if z.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let hp = self.hyper(z);
        let ll = match log_marginal_from(&self.cells, &self.y, &hp) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        let p = &self.prior;
        let n = self.n_types;
        let mut lp = -0.5 * ((hp.mu - p.mu_mean) / p.mu_sd).powi(2);
        // half-normal on every sd and amplitude
        let scale_idx = (1..4 + n).chain([4 + n, 6 + n]);
        for i in scale_idx {
            let s = z[i].exp();
            lp += -0.5 * (s / p.sigma_scale).powi(2);
            if self.jacobian {
                lp += z[i];
            }
        }
        for (i, shape) in [(5 + n, p.k_gamma), (7 + n, p.k_delta)] {
            let ls = z[i].exp();
            lp += weibull_unit_logpdf(ls, shape);
            if self.jacobian {
                lp += z[i];
            }
        }
        ll + lp
    }

    fn constrain(&self, z: &[f64]) -> Vec<f64> {
        self.hyper(z).to_vec()
    }

    fn initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = &self.prior;
        let n = self.n_types;
        let half = (p.sigma_scale / 4.0).ln();
        let mut z = vec![p.mu_mean + rng.random_range(-0.5..0.5) * p.sigma_scale / 2.0];
        for _ in 0..3 + n {
            z.push(half + rng.random_range(-1.0..1.0));
        }
        for _ in 0..2 {
            z.push(half + rng.random_range(-1.0..1.0));
            z.push(rng.random_range(-0.5..0.5));
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GpFitMethod {
    Mcmc(SamplerConfig),
    /// MAP by bounded Nelder–Mead, best of `restarts` starts.
    Optimize {
        restarts: usize,
    },
}

/// Posterior draws (or a single MAP draw) of the GP hyperparameters, in the
/// layout of [`GpHyperParams::names`].
pub fn fit_hyperparams(
    panel: &FleetPanel,
    prior: GpPrior,
    method: GpFitMethod,
    seed: u64,
) -> Result<PosteriorDraws> {
    match method {
        GpFitMethod::Mcmc(cfg) => {
            let model = GpModel::new(panel, prior, true)?;
            mcmc::sample(&model, &cfg, seed)
        }
        GpFitMethod::Optimize { restarts } => {
            let model = GpModel::new(panel, prior, false)?;
            let bounds = model.bounds();
            let objective = |z: &[f64]| -model.log_density(z);
            // confounded directions (engine vs global offsets with one engine
            // type) never shrink the simplex, so stop on objective spread alone
            let nm = NelderMead {
                max_evals: 3000,
                ftol: 1e-7,
                xtol: f64::INFINITY,
                initial_step: 0.5,
            };
            let run = |r: usize| -> Result<(Vec<f64>, f64)> {
                let mut rng = crate::seeded_rng(seed, r as u64);
                let mut start = model.initial(&mut rng);
                let mut tries = 1;
                while !model.log_density(&start).is_finite() {
                    if tries >= 100 {
                        return Err(Error::Numerical(
                            "GP log posterior non-finite at 100 initial points".into(),
                        ));
                    }
                    start = model.initial(&mut rng);
                    tries += 1;
                }
                let first = nm.minimize(objective, &start, Some(&bounds));
                let polished = NelderMead {
                    initial_step: 0.1,
                    max_evals: 1500,
                    ..nm
                }
                .minimize(objective, &first.x, Some(&bounds));
                Ok((polished.x, polished.value))
            };
            let results: Vec<Result<(Vec<f64>, f64)>> =
                (0..restarts.max(1)).into_par_iter().map(run).collect();
            let mut best: Option<(Vec<f64>, f64)> = None;
            for res in results {
                let (x, value) = res?;
                if value.is_finite() && best.as_ref().is_none_or(|(_, v)| value < *v) {
                    best = Some((x, value));
                }
            }
            let (z, _) = best.ok_or_else(|| {
                Error::Numerical(
                    "GP hyperparameter optimization never reached a finite value".into(),
                )
            })?;
            PosteriorDraws::point(model.names(), model.constrain(&z))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputeMode {
    /// Average of conditional means over hyperparameter draws.
    Mean,
    /// One joint conditional sample per draw; the last one is returned.
    Sample { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    /// Every cell present; observed cells unchanged.
    pub filled: FleetPanel,
    /// Posterior predictive sd per cell; zero at observed cells.
    pub sd: FleetPanel,
    pub hyper_draws: Option<PosteriorDraws>,
}

struct Conditional {
    mean: DVector<f64>,
    var: DVector<f64>,
    sample: Option<DVector<f64>>,
}

fn condition(
    panel: &FleetPanel,
    observed: &[Cell],
    y: &DVector<f64>,
    missing: &[Cell],
    hp: &GpHyperParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Conditional> {
    hp.validate(panel.n_engine_types())?;
    let f = KernelFactor::new(observed, hp)?;
    let k_om = cross_cov(observed, missing, hp);
    let alpha = f.solve_vec(&y.add_scalar(-hp.mu));
    let mean = k_om.tr_mul(&alpha).add_scalar(hp.mu);
    let k_inv_om = f.solve(&k_om);
    let var = DVector::from_fn(missing.len(), |i, _| {
        let prior = latent_cov(missing[i], missing[i], hp) + noise_var(missing[i], hp);
        (prior - k_om.column(i).dot(&k_inv_om.column(i))).max(0.0)
    });
    let sample = match rng {
        Some(rng) => {
            let mut cov = gram(missing, hp) - k_om.tr_mul(&k_inv_om);
            cov = (&cov + cov.transpose()) * 0.5;
            let chm = factor(&cov)?;
            let eps = DVector::from_fn(missing.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            Some(&mean + chm.l() * eps)
        }
        None => None,
    };
    Ok(Conditional { mean, var, sample })
}

/// Gaussian conditioning of missing cells on observed ones, for every
/// hyperparameter draw.
pub fn impute(
    panel: &FleetPanel,
    hyper: &PosteriorDraws,
    mode: ImputeMode,
) -> Result<ImputationResult> {
    if hyper.total_draws() == 0 {
        return Err(Error::InvalidInput("no hyperparameter draws".into()));
    }
    let observed = cells_where(panel, true);
    if observed.is_empty() {
        return Err(Error::InvalidInput(
            "cannot impute a panel with no observed cells".into(),
        ));
    }
    let missing = cells_where(panel, false);
    let zero_sd = panel.map_values(|_, _| 0.0);
    if missing.is_empty() {
        return Ok(ImputationResult {
            filled: panel.clone(),
            sd: zero_sd,
            hyper_draws: Some(hyper.clone()),
        });
    }
    let y = observed_vector(panel, &observed);
    let mut rng = match mode {
        ImputeMode::Sample { seed } => Some(crate::seeded_rng(seed, 0)),
        ImputeMode::Mean => None,
    };

    let n_draws = hyper.total_draws();
    let m = missing.len();
    let mut sum_mean = DVector::zeros(m);
    let mut sum_mean_sq = DVector::zeros(m);
    let mut sum_var = DVector::zeros(m);
    let mut last_sample = None;
    for i in 0..n_draws {
        let hp = GpHyperParams::from_slice(hyper.draw(i))?;
        let c = condition(panel, &observed, &y, &missing, &hp, rng.as_mut())?;
        sum_mean_sq += c.mean.component_mul(&c.mean);
        sum_mean += &c.mean;
        sum_var += &c.var;
        last_sample = c.sample;
    }
    let nd = n_draws as f64;
    let mean = &sum_mean / nd;
    // law of total variance across draws
    let total_var = DVector::from_fn(m, |i, _| {
        (sum_var[i] / nd + (sum_mean_sq[i] / nd - mean[i] * mean[i])).max(0.0)
    });
    let values = last_sample.unwrap_or_else(|| mean.clone());

    let mut ships: Vec<ShipRecord> = panel.ships().to_vec();
    let mut sd_ships: Vec<ShipRecord> = zero_sd.ships().to_vec();
    for (i, c) in missing.iter().enumerate() {
        ships[c.ship].counts[c.age - 1] = Some(values[i]);
        sd_ships[c.ship].counts[c.age - 1] = Some(total_var[i].sqrt());
    }
    Ok(ImputationResult {
        filled: FleetPanel::new(ships, panel.max_age(), panel.n_engine_types())?,
        sd: FleetPanel::new(sd_ships, panel.max_age(), panel.n_engine_types())?,
        hyper_draws: Some(hyper.clone()),
    })
}

/// Draws a complete count panel from the GP model with the given
/// hyperparameters. Engine types are assigned round-robin.
pub fn simulate_gp_panel(
    hp: &GpHyperParams,
    n_ships: usize,
    max_age: usize,
    seed: u64,
) -> Result<FleetPanel> {
    let n_types = hp.sigma_noise.len();
    if n_ships == 0 || max_age == 0 || n_types == 0 {
        return Err(Error::InvalidParameter("empty GP panel shape".into()));
    }
    let cells: Vec<Cell> = (0..n_ships)
        .flat_map(|j| {
            (1..=max_age).map(move |t| Cell {
                ship: j,
                age: t,
                engine: j % n_types + 1,
            })
        })
        .collect();
    let k = gram(&cells, hp);
    let ch = factor(&k)?;
    let mut rng = crate::seeded_rng(seed, 0);
    let eps = DVector::from_fn(cells.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = ch.l() * eps;
    let ships = (0..n_ships)
        .map(|j| ShipRecord {
            ship_id: format!("ship{:03}", j + 1),
            engine_type: j % n_types + 1,
            counts: (0..max_age)
                .map(|t| Some(hp.mu + y[j * max_age + t]))
                .collect(),
        })
        .collect();
    FleetPanel::new(ships, max_age, n_types)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn hp(n_types: usize) -> GpHyperParams {
        GpHyperParams {
            mu: 3.0,
            sigma_age: 0.3,
            sigma_ship: 0.8,
            sigma_engine: 0.4,
            sigma_noise: (0..n_types).map(|k| 0.5 + 0.1 * k as f64).collect(),
            alpha_gamma: 0.7,
            l_gamma: 2.0,
            alpha_delta: 0.6,
            l_delta: 4.0,
        }
    }

    fn zero_hp(n_types: usize) -> GpHyperParams {
        GpHyperParams {
            mu: 2.0,
            sigma_age: 0.0,
            sigma_ship: 0.0,
            sigma_engine: 0.0,
            sigma_noise: vec![0.0; n_types],
            alpha_gamma: 0.0,
            l_gamma: 1.0,
            alpha_delta: 0.0,
            l_delta: 1.0,
        }
    }

    fn ship(id: &str, engine: usize, counts: Vec<Option<f64>>) -> ShipRecord {
        ShipRecord {
            ship_id: id.into(),
            engine_type: engine,
            counts,
        }
    }

    #[test]
    fn eq_kernel_values() {
        assert_eq!(eq_kernel(&[1.5], &[1.5], 1.0, 0.3).unwrap(), 1.0);
        let v = eq_kernel(&[0.0, 0.0], &[1.0, 1.0], 1.0, 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(eq_kernel(&[0.0], &[4.0], 0.0, 2.0).unwrap(), 0.0);
        assert!(eq_kernel(&[0.0], &[1.0], 1.0, 0.0).is_err());
        assert!(eq_kernel(&[0.0], &[1.0, 2.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn kernel_entries_follow_index_sharing() {
        let h = hp(2);
        let panel = FleetPanel::new(
            vec![
                ship("a", 1, vec![Some(1.0), Some(2.0), None]),
                ship("b", 2, vec![None, None, Some(4.0)]),
            ],
            3,
            2,
        )
        .unwrap();
        let k = assemble_kernel(&panel, &h).unwrap();
        assert_eq!(k.cells.len(), 3);
        let single = h.sigma_age.powi(2)
            + h.sigma_ship.powi(2)
            + h.sigma_engine.powi(2)
            + h.alpha_gamma.powi(2)
            + h.alpha_delta.powi(2)
            + h.sigma_noise[0].powi(2);
        assert!((k.gram[(0, 0)] - single).abs() < 1e-14);
        let same_ship = h.sigma_ship.powi(2)
            + h.sigma_engine.powi(2)
            + eq_kernel(&[1.0], &[2.0], h.alpha_gamma, h.l_gamma).unwrap()
            + eq_kernel(&[1.0], &[2.0], h.alpha_delta, h.l_delta).unwrap();
        assert!((k.gram[(0, 1)] - same_ship).abs() < 1e-14);
        // different ship, engine and age
        assert_eq!(k.gram[(0, 2)], 0.0);
        assert_eq!(k.gram[(1, 2)], 0.0);
    }

    #[test]
    fn one_cell_log_marginal_is_normal_density() {
        let h = hp(1);
        let panel = FleetPanel::new(vec![ship("a", 1, vec![Some(4.2)])], 1, 1).unwrap();
        let v = h.sigma_age.powi(2)
            + h.sigma_ship.powi(2)
            + h.sigma_engine.powi(2)
            + h.alpha_gamma.powi(2)
            + h.alpha_delta.powi(2)
            + h.sigma_noise[0].powi(2);
        let vj = v * (1.0 + BASE_JITTER);
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * vj).ln() + (4.2 - h.mu).powi(2) / vj);
        let got = log_marginal(&panel, &h).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn zero_residual_and_permutation() {
        let h = hp(2);
        let panel = FleetPanel::new(
            vec![
                ship("a", 1, vec![Some(3.0), Some(3.0)]),
                ship("b", 2, vec![Some(3.0), None]),
            ],
            2,
            2,
        )
        .unwrap();
        let k = assemble_kernel(&panel, &h).unwrap();
        let mut kj = k.gram.clone();
        let jitter = BASE_JITTER * kj.trace() / 3.0;
        for i in 0..3 {
            kj[(i, i)] += jitter;
        }
        let det = kj.determinant();
        let expected = -0.5 * ((2.0 * std::f64::consts::PI).powi(3) * det).ln();
        assert!((log_marginal(&panel, &h).unwrap() - expected).abs() < 1e-10);

        let sim = simulate_gp_panel(&h, 4, 5, 2).unwrap();
        let mut ships = sim.ships().to_vec();
        ships.reverse();
        let shuffled = FleetPanel::new(ships, 5, 2).unwrap();
        let a = log_marginal(&sim, &h).unwrap();
        let b = log_marginal(&shuffled, &h).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    fn dense_log_marginal(panel: &FleetPanel, h: &GpHyperParams) -> f64 {
        let k = assemble_kernel(panel, h).unwrap();
        let y = observed_vector(panel, &k.cells);
        let ch = factor(&k.gram).unwrap();
        let resid = y.add_scalar(-h.mu);
        let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let n = k.cells.len() as f64;
        -0.5 * (resid.dot(&ch.solve(&resid)) + log_det + n * (2.0 * std::f64::consts::PI).ln())
    }

    #[test]
    fn structured_factor_matches_dense_cholesky() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for case in 0..12 {
            let n_types = [1, 2, 3][case % 3];
            let mut h = hp(n_types);
            h.sigma_age = [0.0, 0.3, 1.1][(case / 3) % 3];
            h.l_gamma = rng.random_range(0.5..8.0);
            h.l_delta = rng.random_range(0.5..30.0);
            if case % 4 == 3 {
                h.sigma_engine = 0.0;
                h.alpha_delta = 0.0;
            }
            let full = simulate_gp_panel(&hp(n_types), 7, 9, case as u64).unwrap();
            let ships = full
                .ships()
                .iter()
                .map(|s| ShipRecord {
                    counts: s
                        .counts
                        .iter()
                        .map(|c| c.filter(|_| rng.random::<f64>() > 0.3))
                        .collect(),
                    ..s.clone()
                })
                .filter(|s| s.counts.iter().any(|c| c.is_some()))
                .collect();
            let panel = FleetPanel::new(ships, 9, n_types).unwrap();
            let dense = dense_log_marginal(&panel, &h);
            let fast = log_marginal(&panel, &h).unwrap();
            assert!(
                (dense - fast).abs() < 1e-8 * dense.abs().max(1.0),
                "case {case}: {dense} vs {fast}"
            );

            let cells = cells_where(&panel, true);
            let k = gram(&cells, &h);
            let b = DMatrix::from_fn(cells.len(), 3, |_, _| rng.random_range(-1.0..1.0));
            let x = KernelFactor::new(&cells, &h).unwrap().solve(&b);
            let jitter = BASE_JITTER * k.trace() / cells.len() as f64;
            let back = (&k + DMatrix::identity(cells.len(), cells.len()) * jitter) * x;
            assert!((back - b).abs().max() < 1e-8, "case {case}");
        }
    }

    #[test]
    fn singular_kernel_falls_back_to_jitter() {
        let panel = FleetPanel::new(vec![ship("a", 1, vec![Some(1.0), Some(2.0)])], 2, 1).unwrap();
        let mut h = zero_hp(1);
        h.sigma_ship = 1.0;
        assert!(log_marginal(&panel, &h).unwrap().is_finite());
        // all-zero covariance cannot be factored
        assert!(log_marginal(&panel, &zero_hp(1)).is_err());
    }

    #[test]
    fn no_missing_cells_is_identity() {
        let h = hp(2);
        let panel = simulate_gp_panel(&h, 3, 4, 1).unwrap();
        let draws = PosteriorDraws::point(GpHyperParams::names(2), h.to_vec()).unwrap();
        let r = impute(&panel, &draws, ImputeMode::Mean).unwrap();
        assert_eq!(r.filled, panel);
        assert!(r.sd.observed_values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn perfectly_correlated_duplicate_is_interpolated() {
        let mut h = zero_hp(1);
        h.sigma_ship = 1.5;
        let panel = FleetPanel::new(vec![ship("a", 1, vec![Some(7.25), None])], 2, 1).unwrap();
        let draws = PosteriorDraws::point(GpHyperParams::names(1), h.to_vec()).unwrap();
        let r = impute(&panel, &draws, ImputeMode::Mean).unwrap();
        let v = r.filled.ships()[0].counts[1].unwrap();
        assert!((v - 7.25).abs() < 1e-4, "{v}");
        assert_eq!(r.filled.ships()[0].counts[0], Some(7.25));
        assert!(r.sd.ships()[0].counts[1].unwrap() < 1e-3);
    }

    #[test]
    fn noise_only_kernel_falls_back_to_mean() {
        let mut h = zero_hp(1);
        h.sigma_noise = vec![1.0];
        let panel = FleetPanel::new(
            vec![
                ship("a", 1, vec![Some(5.0), None]),
                ship("b", 1, vec![None, Some(1.0)]),
            ],
            2,
            1,
        )
        .unwrap();
        let draws = PosteriorDraws::point(GpHyperParams::names(1), h.to_vec()).unwrap();
        let r = impute(&panel, &draws, ImputeMode::Mean).unwrap();
        assert_eq!(r.filled.ships()[0].counts[1], Some(h.mu));
        assert_eq!(r.filled.ships()[1].counts[0], Some(h.mu));
        assert!((r.sd.ships()[0].counts[1].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impute_rejects_empty_panels() {
        let panel = FleetPanel::new(vec![ship("a", 1, vec![None, None])], 2, 1).unwrap();
        let draws = PosteriorDraws::point(GpHyperParams::names(1), hp(1).to_vec()).unwrap();
        assert!(impute(&panel, &draws, ImputeMode::Mean).is_err());
    }

    #[test]
    fn imputed_mean_ignores_ship_order() {
        let h = hp(2);
        let full = simulate_gp_panel(&h, 5, 6, 3).unwrap();
        let mut ships = full.ships().to_vec();
        ships[1].counts[2] = None;
        ships[3].counts[0] = None;
        ships[4].counts[5] = None;
        let panel = FleetPanel::new(ships.clone(), 6, 2).unwrap();
        ships.reverse();
        let reversed = FleetPanel::new(ships, 6, 2).unwrap();
        let draws = PosteriorDraws::new(
            GpHyperParams::names(2),
            vec![vec![
                h.to_vec(),
                GpHyperParams {
                    sigma_ship: 1.2,
                    ..h.clone()
                }
                .to_vec(),
            ]],
            vec![f64::NAN],
        )
        .unwrap();
        let a = impute(&panel, &draws, ImputeMode::Mean).unwrap();
        let b = impute(&reversed, &draws, ImputeMode::Mean).unwrap();
        for s in a.filled.ships() {
            let other = b
                .filled
                .ships()
                .iter()
                .find(|o| o.ship_id == s.ship_id)
                .unwrap();
            for (x, y) in s.counts.iter().zip(&other.counts) {
                assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_mode_is_seeded_and_varies() {
        let h = hp(1);
        let full = simulate_gp_panel(&h, 3, 4, 5).unwrap();
        let mut ships = full.ships().to_vec();
        ships[0].counts[1] = None;
        let panel = FleetPanel::new(ships, 4, 1).unwrap();
        let draws = PosteriorDraws::point(GpHyperParams::names(1), h.to_vec()).unwrap();
        let a = impute(&panel, &draws, ImputeMode::Sample { seed: 1 }).unwrap();
        let b = impute(&panel, &draws, ImputeMode::Sample { seed: 1 }).unwrap();
        let c = impute(&panel, &draws, ImputeMode::Sample { seed: 2 }).unwrap();
        let m = impute(&panel, &draws, ImputeMode::Mean).unwrap();
        assert_eq!(a.filled, b.filled);
        assert_ne!(a.filled, c.filled);
        assert_eq!(a.sd, m.sd);
    }

    #[test]
    fn gradient_in_mu_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for seed in 0..5 {
            let mut h = hp(2);
            h.mu = rng.random_range(-2.0..5.0);
            let panel = simulate_gp_panel(&hp(2), 3, 4, seed).unwrap();
            let g = log_marginal_grad_mu(&panel, &h).unwrap();
            let step = 1e-5;
            let up = log_marginal(
                &panel,
                &GpHyperParams {
                    mu: h.mu + step,
                    ..h.clone()
                },
            )
            .unwrap();
            let dn = log_marginal(
                &panel,
                &GpHyperParams {
                    mu: h.mu - step,
                    ..h.clone()
                },
            )
            .unwrap();
            let fd = (up - dn) / (2.0 * step);
            assert!((g - fd).abs() <= 1e-4 * g.abs().max(1e-3), "{g} vs {fd}");
        }
    }

    #[test]
    fn weibull_scale_multiplies_length_scales() {
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 50_000;
        let m1: f64 = (0..n)
            .map(|_| sample_length_scale(2.0, 1.0, &mut r1).unwrap())
            .sum::<f64>()
            / n as f64;
        let m2: f64 = (0..n)
            .map(|_| sample_length_scale(2.0, 2.0, &mut r2).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((m2 / m1 - 2.0).abs() < 0.03, "{m1} {m2}");
        // Weibull(2, 1) mean is Gamma(1.5) = sqrt(pi) / 2
        assert!((m1 - std::f64::consts::PI.sqrt() / 2.0).abs() < 0.01);
    }

    #[test]
    fn map_on_constant_data_drives_noise_to_floor() {
        let panel = FleetPanel::new(
            (0..3)
                .map(|j| ship(&format!("s{j}"), 1, vec![Some(2.0); 4]))
                .collect(),
            4,
            1,
        )
        .unwrap();
        let prior = GpPrior::for_panel(&panel);
        let draws =
            fit_hyperparams(&panel, prior, GpFitMethod::Optimize { restarts: 2 }, 1).unwrap();
        let noise = draws.get(0, 0, 4);
        assert!(noise < 1e3 * prior.sigma_floor, "{noise}");
    }

    #[test]
    fn hyper_names_match_layout() {
        let h = hp(3);
        let v = h.to_vec();
        assert_eq!(v.len(), GpHyperParams::names(3).len());
        assert_eq!(GpHyperParams::from_slice(&v).unwrap(), h);
        assert_eq!(GpHyperParams::names(1)[4], "sigma_noise_1");
    }
}
