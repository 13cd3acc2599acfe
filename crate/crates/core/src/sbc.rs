//! Simulation-based calibration of the rate-model sampler.
//!
//! Each replication draws parameters from the prior, simulates a fully
//! observed state panel, samples the posterior, and records the rank of the
//! true value among `L` thinned posterior draws. A calibrated sampler gives
//! ranks uniform on `0..=L`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::ctmc::RateParams;
use crate::error::{Error, Result};
use crate::fleet::{simulate_panel, PanelShape};
use crate::inference::{sample_posterior_on, PriorSpec, SamplingScale};
use crate::mcmc::SamplerConfig;
use crate::stats;

pub const MIN_REPLICATIONS: usize = 20;
pub const MIN_RANK_DRAWS: usize = 10;
/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SbcConfig {
    pub prior: PriorSpec,
    pub n_ships: usize,
    pub max_age: usize,
    pub n_periods: usize,
    /// `B`.
    pub replications: usize,
    /// `L`, posterior draws kept per replication after thinning.
    pub draws_per_rank: usize,
    pub sampler: SamplerConfig,
    pub scale: SamplingScale,
}

/// Warmup per chain in the default calibration run. Shorter warmups leave
/// chains started near the origin short of large prior draws of the rates.
pub const SBC_WARMUP: usize = 4000;
/// Kept draws per chain in the default calibration run.
pub const SBC_DRAWS: usize = 8000;

impl Default for SbcConfig {
    fn default() -> Self {
        SbcConfig {
            prior: PriorSpec::default(),
            n_ships: 30,
            max_age: 15,
            n_periods: 1,
            replications: 200,
            draws_per_rank: 63,
            sampler: SamplerConfig {
                warmup: SBC_WARMUP,
                draws: SBC_DRAWS,
                ..SamplerConfig::default()
            },
            scale: SamplingScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SbcRankTable {
    pub names: Vec<String>,
    /// `ranks[p][i]`: rank of parameter `p` in the `i`-th successful
    /// replication.
    pub ranks: Vec<Vec<usize>>,
    /// Replication index of each column of `ranks`.
    pub replications: Vec<usize>,
    /// Replications whose sampler failed, with the error message.
    pub failed: Vec<(usize, String)>,
    pub draws_per_rank: usize,
    pub n_replications: usize,
}

impl SbcRankTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::Numerical(format!("writing ranks: {e}"));
        let mut header = vec!["replication".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(wrap)?;
        for (i, rep) in self.replications.iter().enumerate() {
            let mut row = vec![rep.to_string()];
            row.extend(self.ranks.iter().map(|r| r[i].to_string()));
            w.write_record(&row).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }
}

/// Number of draws strictly below the truth; invariant under any increasing
/// transform applied to both.
pub fn rank_of(truth: f64, draws: &[f64]) -> usize {
    draws.iter().filter(|d| **d < truth).count()
}

/// `l` draws taken at equal stride from `pool`.
fn thin(pool: &[Vec<f64>], l: usize) -> Result<Vec<&[f64]>> {
    if pool.len() < l {
        return Err(Error::InvalidParameter(format!(
            "{} posterior draws cannot be thinned to {l}",
            pool.len()
        )));
    }
    let stride = pool.len() / l;
    Ok((0..l).map(|i| pool[i * stride].as_slice()).collect())
}

fn replicate(cfg: &SbcConfig, seed: u64, b: usize) -> Result<Vec<usize>> {
    let rep_seed = crate::derive_seed(seed, b as u64);
    let mut rng = crate::seeded_rng(rep_seed, 0);
    let truth = cfg.prior.draw(cfg.n_periods, &mut rng);
    let params = RateParams::from_slice(&truth, cfg.max_age)?;
    let shape = PanelShape {
        n_ships: cfg.n_ships,
        max_age: cfg.max_age,
        n_engine_types: 1,
    };
    let panel = simulate_panel(&params, shape, 0.0, crate::derive_seed(rep_seed, 1))?;
    let draws = sample_posterior_on(
        &panel,
        cfg.prior,
        cfg.n_periods,
        cfg.scale,
        &cfg.sampler,
        crate::derive_seed(rep_seed, 2),
    )?;
    let pool: Vec<Vec<f64>> = (0..draws.total_draws())
        .map(|i| draws.draw(i).to_vec())
        .collect();
    let kept = thin(&pool, cfg.draws_per_rank)?;
    Ok((0..truth.len())
        .map(|p| {
            let column: Vec<f64> = kept.iter().map(|d| d[p]).collect();
            rank_of(truth[p], &column)
        })
        .collect())
}

/// Runs `B` calibration replications in parallel. Replication `b` depends
/// only on `(seed, b)`.
pub fn run_sbc(cfg: &SbcConfig, seed: u64) -> Result<SbcRankTable> {
    if cfg.replications < MIN_REPLICATIONS {
        return Err(Error::InvalidParameter(format!(
            "calibration needs at least {MIN_REPLICATIONS} replications, got {}",
            cfg.replications
        )));
    }
    if cfg.draws_per_rank < MIN_RANK_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "calibration needs at least {MIN_RANK_DRAWS} draws per rank, got {}",
            cfg.draws_per_rank
        )));
    }
    if cfg.n_periods == 0 || cfg.n_periods > cfg.max_age {
        return Err(Error::InvalidParameter(format!(
            "{} periods over {} ages",
            cfg.n_periods, cfg.max_age
        )));
    }
    let names = RateParams::param_names(cfg.n_periods);
    let results: Vec<Result<Vec<usize>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|b| replicate(cfg, seed, b))
        .collect();

    let mut ranks = vec![Vec::new(); names.len()];
    let mut replications = Vec::new();
    let mut failed = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(rs) => {
                for (p, v) in rs.into_iter().enumerate() {
                    ranks[p].push(v);
                }
                replications.push(b);
            }
            Err(e) => failed.push((b, e.to_string())),
        }
    }
    if failed.len() as f64 > MAX_FAILURE_RATE * cfg.replications as f64 {
        return Err(Error::Diagnostic(format!(
            "{} of {} calibration replications failed; first: {}",
            failed.len(),
            cfg.replications,
            failed[0].1
        )));
    }
    Ok(SbcRankTable {
        names,
        ranks,
        replications,
        failed,
        draws_per_rank: cfg.draws_per_rank,
        n_replications: cfg.replications,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamHistogram {
    pub name: String,
    pub counts: Vec<usize>,
    /// Expected count per bin under uniform ranks.
    pub expected: Vec<f64>,
    /// Simultaneous 99% band, per bin.
    pub band_lower: Vec<u64>,
    pub band_upper: Vec<u64>,
    pub bins_outside_band: usize,
    pub chi_square: f64,
    pub p_value: f64,
    /// Share of ranks in the central half minus its expected share;
    /// positive when the histogram is center-heavy.
    pub cap_statistic: f64,
    /// Sample skewness of ranks; positive when mass piles up at low ranks,
    /// i.e. the posterior sits above the truth.
    pub skewness: f64,
}

impl ParamHistogram {
    pub fn is_uniform(&self, alpha: f64) -> bool {
        self.p_value > alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankHistogram {
    pub bins: usize,
    pub draws_per_rank: usize,
    pub n_ranks: usize,
    pub params: Vec<ParamHistogram>,
}

/// Rank `r` falls in bin `floor(r * bins / (L + 1))`.
pub fn rank_bin(rank: usize, bins: usize, l: usize) -> usize {
    rank * bins / (l + 1)
}

/// Smallest `k` with `P(X <= k) >= q`.
fn binomial_quantile(dist: &Binomial, n: u64, q: f64) -> u64 {
    (0..=n).find(|&k| dist.cdf(k) >= q).unwrap_or(n)
}

const BAND_LEVEL: f64 = 0.99;

pub fn rank_histogram(table: &SbcRankTable, bins: usize) -> Result<RankHistogram> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let l = table.draws_per_rank;
    if bins > l + 1 {
        return Err(Error::InvalidParameter(format!(
            "{bins} bins exceed the {} possible ranks",
            l + 1
        )));
    }
    let n = table.ranks.first().map_or(0, |r| r.len());
    if n == 0 {
        return Err(Error::InvalidInput("rank table has no replications".into()));
    }
    // ranks per bin, for unequal bin widths
    let mut width = vec![0usize; bins];
    for r in 0..=l {
        width[rank_bin(r, bins, l)] += 1;
    }
    let expected: Vec<f64> = width
        .iter()
        .map(|w| n as f64 * *w as f64 / (l + 1) as f64)
        .collect();
    let tail = (1.0 - BAND_LEVEL) / (2.0 * bins as f64);
    let mut band_lower = Vec::with_capacity(bins);
    let mut band_upper = Vec::with_capacity(bins);
    for w in &width {
        let p = *w as f64 / (l + 1) as f64;
        let dist = Binomial::new(p, n as u64)
            .map_err(|e| Error::Numerical(format!("binomial band: {e}")))?;
        band_lower.push(binomial_quantile(&dist, n as u64, tail));
        band_upper.push(binomial_quantile(&dist, n as u64, 1.0 - tail));
    }
    let central = (0..=l).filter(|r| 4 * r >= l && 4 * r <= 3 * l).count() as f64 / (l + 1) as f64;

    let params = table
        .names
        .iter()
        .zip(&table.ranks)
        .map(|(name, ranks)| {
            let mut counts = vec![0usize; bins];
            for r in ranks {
                counts[rank_bin((*r).min(l), bins, l)] += 1;
            }
            let (chi, p) = stats::chi_square(&counts, &expected);
            let outside = counts
                .iter()
                .zip(band_lower.iter().zip(&band_upper))
                .filter(|(c, (lo, hi))| (**c as u64) < **lo || (**c as u64) > **hi)
                .count();
            let in_center = ranks
                .iter()
                .filter(|r| 4 * **r >= l && 4 * **r <= 3 * l)
                .count();
            let as_f64: Vec<f64> = ranks.iter().map(|r| *r as f64).collect();
            ParamHistogram {
                name: name.clone(),
                counts,
                expected: expected.clone(),
                band_lower: band_lower.clone(),
                band_upper: band_upper.clone(),
                bins_outside_band: outside,
                chi_square: chi,
                p_value: p,
                cap_statistic: in_center as f64 / n as f64 - central,
                skewness: stats::skewness(&as_f64),
            }
        })
        .collect();
    Ok(RankHistogram {
        bins,
        draws_per_rank: l,
        n_ranks: n,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn table(ranks: Vec<Vec<usize>>, l: usize) -> SbcRankTable {
        let n = ranks[0].len();
        SbcRankTable {
            names: (0..ranks.len()).map(|p| format!("x{p}")).collect(),
            ranks,
            replications: (0..n).collect(),
            failed: vec![],
            draws_per_rank: l,
            n_replications: n,
        }
    }

    #[test]
    fn exact_uniform_ranks_fill_every_bin_once() {
        let l = 19;
        let t = table(vec![(0..=l).collect()], l);
        let h = rank_histogram(&t, l + 1).unwrap();
        assert!(h.params[0].counts.iter().all(|c| *c == 1));
        assert!(h.params[0].chi_square.abs() < 1e-12);
    }

    #[test]
    fn all_zero_ranks_violate_band() {
        let t = table(vec![vec![0; 200]], 63);
        let h = rank_histogram(&t, 16).unwrap();
        let p = &h.params[0];
        assert_eq!(p.counts[0], 200);
        assert!(p.counts[1..].iter().all(|c| *c == 0));
        assert!(p.bins_outside_band > 0);
        assert!(p.p_value < 1e-10);
        assert!(p.skewness.is_nan() || p.skewness == 0.0);
    }

    #[test]
    fn uniform_rng_ranks_pass() {
        let mut rng = crate::seeded_rng(17, 0);
        let l = 63;
        let ranks: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..=l)).collect();
        let h = rank_histogram(&table(vec![ranks], l), 20).unwrap();
        assert!(h.params[0].p_value > 0.01, "{}", h.params[0].p_value);
        assert!(h.params[0].cap_statistic.abs() < 0.03);
    }

    #[test]
    fn center_heavy_and_skewed_shapes_are_flagged() {
        let l = 63;
        let center: Vec<usize> = (0..400).map(|i| 24 + i % 16).collect();
        let low: Vec<usize> = (0..400).map(|i| (i % 64) * (i % 64) / 64).collect();
        let h = rank_histogram(&table(vec![center, low], l), 16).unwrap();
        assert!(h.params[0].cap_statistic > 0.3);
        assert!(h.params[1].skewness > 0.3);
    }

    #[test]
    fn bins_must_be_at_least_two() {
        let t = table(vec![vec![1, 2, 3]], 10);
        assert!(rank_histogram(&t, 1).is_err());
        assert!(rank_histogram(&t, 12).is_err());
    }

    #[test]
    fn bin_widths_cover_all_ranks() {
        for (bins, l) in [(20, 63), (64, 63), (7, 10)] {
            let total: usize = (0..bins)
                .map(|b| (0..=l).filter(|r| rank_bin(*r, bins, l) == b).count())
                .sum();
            assert_eq!(total, l + 1);
            assert_eq!(rank_bin(l, bins, l), bins - 1);
        }
    }

    #[test]
    fn ranks_survive_monotone_transforms() {
        let draws = [0.1, 0.5, 2.0, 3.5, 9.0];
        let truth = 2.5;
        let logged: Vec<f64> = draws.iter().map(|d: &f64| d.ln()).collect();
        assert_eq!(rank_of(truth, &draws), rank_of(truth.ln(), &logged));
        assert_eq!(rank_of(truth, &draws), 3);
    }

    #[test]
    fn small_run_is_deterministic_and_bounded() {
        let cfg = SbcConfig {
            n_ships: 10,
            max_age: 6,
            replications: 20,
            draws_per_rank: 15,
            sampler: SamplerConfig {
                chains: 2,
                warmup: 200,
                draws: 100,
                ..SamplerConfig::default()
            },
            ..SbcConfig::default()
        };
        let a = run_sbc(&cfg, 3).unwrap();
        let b = run_sbc(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.names.len(), 5);
        assert!(a.ranks.iter().flatten().all(|r| *r <= 15));
        assert!(run_sbc(
            &SbcConfig {
                replications: 19,
                ..cfg
            },
            3
        )
        .is_err());
        assert!(run_sbc(
            &SbcConfig {
                draws_per_rank: 9,
                ..cfg
            },
            3
        )
        .is_err());
    }
}
