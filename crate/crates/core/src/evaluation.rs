//! Train/test split experiments and the mean-squared state error.

use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::ctmc::RateParams;
use crate::error::{Error, Result};
use crate::fleet::{State, StatePanel};
use crate::hmm::{predict_states, PredictRule};
use crate::inference::{mle, posterior_mean_params, sample_posterior, PriorSpec};
use crate::mcmc::SamplerConfig;

/// Squared state error averaged over scored ages per ship, then over ships.
/// Missing observations are skipped and shrink that ship's normalizer;
/// ships with nothing observed drop out of the ship average. With
/// `sum_over_age` the per-ship sums are not divided by the age count.
pub fn mse(observed: &StatePanel, predicted: &[State], sum_over_age: bool) -> Result<f64> {
    if predicted.len() != observed.max_age() {
        return Err(Error::InvalidInput(format!(
            "{} predicted ages for a panel of {} ages",
            predicted.len(),
            observed.max_age()
        )));
    }
    let mut total = 0.0;
    let mut n_ships = 0usize;
    for ship in observed.ships() {
        let mut sum = 0.0;
        let mut scored = 0usize;
        for (obs, pred) in ship.states.iter().zip(predicted) {
            if let Some(obs) = obs {
                let gap = obs.label() as f64 - pred.label() as f64;
                sum += gap * gap;
                scored += 1;
            }
        }
        if scored > 0 {
            total += if sum_over_age {
                sum
            } else {
                sum / scored as f64
            };
            n_ships += 1;
        }
    }
    if n_ships == 0 {
        return Err(Error::InvalidInput("no observed cells to score".into()));
    }
    Ok(total / n_ships as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SplitMode {
    /// Test ships drawn without replacement; the rest train.
    Random,
    /// Train and test are both the full panel.
    Resubstitution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitSpec {
    pub n_test: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub mode: SplitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Fitter {
    Mle {
        restarts: usize,
        n_periods: usize,
    },
    /// Posterior mean of an MCMC fit.
    Mcmc {
        config: SamplerConfig,
        prior: PriorSpec,
        n_periods: usize,
    },
}

impl Default for Fitter {
    fn default() -> Self {
        Fitter::Mle {
            restarts: 4,
            n_periods: 1,
        }
    }
}

impl Fitter {
    pub fn fit(&self, panel: &StatePanel, seed: u64) -> Result<RateParams> {
        match *self {
            Fitter::Mle {
                restarts,
                n_periods,
            } => Ok(mle(panel, n_periods, restarts, seed)?.params),
            Fitter::Mcmc {
                config,
                prior,
                n_periods,
            } => {
                let draws = sample_posterior(panel, prior, n_periods, &config, seed)?;
                posterior_mean_params(&draws, panel.max_age())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitResult {
    pub repeat: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_ships: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseHistogram {
    pub edges: Vec<f64>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseReport {
    pub repeats: Vec<SplitResult>,
    pub failed: Vec<(usize, String)>,
    pub mean_train_mse: f64,
    pub mean_test_mse: f64,
    pub histogram: MseHistogram,
}

pub const MSE_HISTOGRAM_BINS: usize = 20;
/// Largest tolerated share of failed repeats.
pub const MAX_SPLIT_FAILURE_RATE: f64 = 0.05;

impl MseReport {
    /// `|mean train - mean test| / mean test`.
    pub fn relative_gap(&self) -> f64 {
        (self.mean_train_mse - self.mean_test_mse).abs() / self.mean_test_mse
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::Numerical(format!("writing MSE table: {e}"));
        w.write_record(["repeat", "train_mse", "test_mse", "test_ships"])
            .map_err(wrap)?;
        for r in &self.repeats {
            w.write_record([
                r.repeat.to_string(),
                r.train_mse.to_string(),
                r.test_mse.to_string(),
                r.test_ships.join(";"),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }
}

fn histogram(train: &[f64], test: &[f64]) -> MseHistogram {
    let lo = train
        .iter()
        .chain(test)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = train
        .iter()
        .chain(test)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
    let width = (hi - lo) / MSE_HISTOGRAM_BINS as f64;
    let edges = (0..=MSE_HISTOGRAM_BINS)
        .map(|i| lo + i as f64 * width)
        .collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; MSE_HISTOGRAM_BINS];
        for x in xs {
            let b = (((x - lo) / width) as usize).min(MSE_HISTOGRAM_BINS - 1);
            c[b] += 1;
        }
        c
    };
    MseHistogram {
        edges,
        train_counts: count(train),
        test_counts: count(test),
    }
}

fn one_split(
    panel: &StatePanel,
    spec: &SplitSpec,
    fitter: &Fitter,
    repeat: usize,
    sum_over_age: bool,
) -> Result<SplitResult> {
    let n = panel.n_ships();
    let (train, test) = match spec.mode {
        SplitMode::Resubstitution => (panel.clone(), panel.clone()),
        SplitMode::Random => {
            let mut rng = crate::seeded_rng(spec.seed, repeat as u64);
            let mut test_idx = index::sample(&mut rng, n, spec.n_test).into_vec();
            test_idx.sort_unstable();
            let train_idx: Vec<usize> = (0..n)
                .filter(|i| test_idx.binary_search(i).is_err())
                .collect();
            (panel.select(&train_idx), panel.select(&test_idx))
        }
    };
    let params = fitter.fit(&train, crate::derive_seed(spec.seed, repeat as u64))?;
    let predicted = predict_states(&params, panel.max_age(), PredictRule::Argmax)?;
    Ok(SplitResult {
        repeat,
        train_mse: mse(&train, &predicted, sum_over_age)?,
        test_mse: mse(&test, &predicted, sum_over_age)?,
        test_ships: test.ships().iter().map(|s| s.ship_id.clone()).collect(),
    })
}

/// Repeated train/test experiment. Repeat `r` depends only on
/// `(spec.seed, r)`.
pub fn run_splits(
    panel: &StatePanel,
    spec: &SplitSpec,
    fitter: &Fitter,
    sum_over_age: bool,
) -> Result<MseReport> {
    if spec.n_repeats == 0 {
        return Err(Error::InvalidParameter("need at least one repeat".into()));
    }
    if spec.mode == SplitMode::Random && !(spec.n_test > 0 && spec.n_test + 2 <= panel.n_ships()) {
        return Err(Error::InvalidParameter(format!(
            "test size {} needs between 1 and {} for {} ships",
            spec.n_test,
            panel.n_ships().saturating_sub(2),
            panel.n_ships()
        )));
    }
    let results: Vec<Result<SplitResult>> = (0..spec.n_repeats)
        .into_par_iter()
        .map(|r| one_split(panel, spec, fitter, r, sum_over_age))
        .collect();
    let mut repeats = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(s) => repeats.push(s),
            Err(e) => failed.push((r, e.to_string())),
        }
    }
    if failed.len() as f64 > MAX_SPLIT_FAILURE_RATE * spec.n_repeats as f64 || repeats.is_empty() {
        return Err(Error::Diagnostic(format!(
            "{} of {} split repeats failed; first: {}",
            failed.len(),
            spec.n_repeats,
            failed[0].1
        )));
    }
    let train: Vec<f64> = repeats.iter().map(|r| r.train_mse).collect();
    let test: Vec<f64> = repeats.iter().map(|r| r.test_mse).collect();
    Ok(MseReport {
        mean_train_mse: crate::stats::mean(&train),
        mean_test_mse: crate::stats::mean(&test),
        histogram: histogram(&train, &test),
        repeats,
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyRow {
    pub age: usize,
    pub n_observed: usize,
    /// Share of observed ships in each state; all zero when nothing was
    /// observed at this age.
    pub freq: [f64; 3],
}

pub fn state_occupancy(panel: &StatePanel) -> Vec<OccupancyRow> {
    panel
        .state_counts()
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let n: u64 = c.iter().sum();
            let freq = if n == 0 {
                [0.0; 3]
            } else {
                c.map(|v| v as f64 / n as f64)
            };
            OccupancyRow {
                age: t + 1,
                n_observed: n as usize,
                freq,
            }
        })
        .collect()
}

/// Writes `age,n_observed,freq1,freq2,freq3` and, when given, a
/// `predicted_state` column.
pub fn write_occupancy<W: Write>(
    rows: &[OccupancyRow],
    predicted: Option<&[State]>,
    writer: W,
) -> Result<()> {
    if let Some(p) = predicted {
        if p.len() != rows.len() {
            return Err(Error::InvalidInput(format!(
                "{} predicted states for {} ages",
                p.len(),
                rows.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Numerical(format!("writing occupancy: {e}"));
    let mut header = vec!["age", "n_observed", "freq1", "freq2", "freq3"];
    if predicted.is_some() {
        header.push("predicted_state");
    }
    w.write_record(&header).map_err(wrap)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![
            r.age.to_string(),
            r.n_observed.to_string(),
            r.freq[0].to_string(),
            r.freq[1].to_string(),
            r.freq[2].to_string(),
        ];
        if let Some(p) = predicted {
            rec.push(p[i].to_string());
        }
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}
