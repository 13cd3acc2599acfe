//! Fleet-wide latent state distribution and categorical observation model.
//!
//! Every ship shares one deterministic trajectory `d(t)`: `d(0) = (1, 0, 0)`,
//! `d(1) = d(0) D(1)` and, from the second year on, `d(t) = d(t-1) M D(t)`
//! (repair at the yearly maintenance, then one year of deterioration).
//! Observed states are independent categorical draws from `d(t)`.

use std::io::Write;

use nalgebra::RowVector3;
use rand::Rng;
use serde::Serialize;

use crate::ctmc::{deterioration_matrix, RateParams};
use crate::error::{Error, Result};
use crate::fleet::{State, StatePanel};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Probability vector over the three states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateDistribution([f64; 3]);

impl StateDistribution {
    pub const INITIAL: StateDistribution = StateDistribution([1.0, 0.0, 0.0]);

    pub fn new(probs: [f64; 3]) -> Result<Self> {
        let d = StateDistribution(probs);
        if !d.is_simplex(1e-10) {
            return Err(Error::InvalidParameter(format!(
                "{probs:?} is not a probability vector"
            )));
        }
        Ok(d)
    }

    pub fn probs(&self) -> [f64; 3] {
        self.0
    }

    pub fn prob(&self, s: State) -> f64 {
        self.0[s.index()]
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|p| *p >= 0.0 && p.is_finite())
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Most probable state; ties go to the lower index.
    pub fn argmax(&self) -> State {
        let mut best = 0;
        for i in 1..3 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        State::from_index(best).expect("index < 3")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let u: f64 = rng.random();
        if u < self.0[0] {
            State::Normal
        } else if u < self.0[0] + self.0[1] {
            State::NearFailure
        } else {
            State::Failure
        }
    }

    fn row(&self) -> RowVector3<f64> {
        RowVector3::new(self.0[0], self.0[1], self.0[2])
    }

    fn from_row(r: RowVector3<f64>) -> Self {
        StateDistribution([r[0].max(0.0), r[1].max(0.0), r[2].max(0.0)])
    }
}

/// `d(t)` for ages `1..=max_age`; `dists()[t - 1]` is age `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dists: Vec<StateDistribution>,
}

impl Trajectory {
    pub fn dists(&self) -> &[StateDistribution] {
        &self.dists
    }

    pub fn at_age(&self, age: usize) -> Option<&StateDistribution> {
        age.checked_sub(1).and_then(|i| self.dists.get(i))
    }

    pub fn max_age(&self) -> usize {
        self.dists.len()
    }
}

/// Forward evolution of the shared state distribution with unit yearly
/// steps, each year's deterioration matrix built from that age's rates.
pub fn evolve(params: &RateParams, max_age: usize) -> Result<Trajectory> {
    if max_age == 0 {
        return Err(Error::InvalidParameter("max_age must be at least 1".into()));
    }
    let m = *params.maintenance().matrix();
    let mut dists = Vec::with_capacity(max_age);
    let mut d = StateDistribution::INITIAL.row();
    for age in 1..=max_age {
        let dt = deterioration_matrix(params.rates_for_age(age)?, 1.0)?;
        d = if age == 1 {
            d * dt.matrix()
        } else {
            d * m * dt.matrix()
        };
        dists.push(StateDistribution::from_row(d));
    }
    Ok(Trajectory { dists })
}

/// Sufficient statistics of a state panel: per-age observed counts of each
/// state. The likelihood depends on the panel only through these.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCounts {
    counts: Vec<[u64; 3]>,
}

impl StateCounts {
    pub fn from_panel(panel: &StatePanel) -> Result<Self> {
        if panel.n_observed() == 0 {
            return Err(Error::InvalidInput(
                "state panel has no observed cells".into(),
            ));
        }
        Ok(StateCounts {
            counts: panel.state_counts(),
        })
    }

    pub fn max_age(&self) -> usize {
        self.counts.len()
    }

    pub fn per_age(&self) -> &[[u64; 3]] {
        &self.counts
    }

    /// `sum_t sum_s n[t][s] * ln max(d_t[s], floor)`.
    pub fn log_likelihood(&self, traj: &Trajectory) -> f64 {
        self.counts
            .iter()
            .zip(traj.dists())
            .map(|(n, d)| {
                (0..3)
                    .filter(|&s| n[s] > 0)
                    .map(|s| n[s] as f64 * d.0[s].max(PROB_FLOOR).ln())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Categorical log-likelihood of all observed cells under the shared
/// trajectory. Impossible observations contribute `ln(PROB_FLOOR)`.
pub fn log_likelihood(panel: &StatePanel, params: &RateParams) -> Result<f64> {
    let counts = StateCounts::from_panel(panel)?;
    let traj = evolve(params, panel.max_age())?;
    Ok(counts.log_likelihood(&traj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictRule {
    Argmax,
    Sample { seed: u64 },
}

/// One predicted state per age `1..=max_age`.
pub fn predict_states(
    params: &RateParams,
    max_age: usize,
    rule: PredictRule,
) -> Result<Vec<State>> {
    let traj = evolve(params, max_age)?;
    Ok(predict_from(&traj, rule))
}

pub fn predict_from(traj: &Trajectory, rule: PredictRule) -> Vec<State> {
    match rule {
        PredictRule::Argmax => traj.dists().iter().map(|d| d.argmax()).collect(),
        PredictRule::Sample { seed } => {
            let mut rng = crate::seeded_rng(seed, 0);
            traj.dists().iter().map(|d| d.sample(&mut rng)).collect()
        }
    }
}

/// Writes `age,d1,d2,d3,predicted_state`.
pub fn write_predictions<W: Write>(
    traj: &Trajectory,
    predicted: &[State],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
    w.write_record(["age", "d1", "d2", "d3", "predicted_state"])
        .map_err(wrap)?;
    for (t, (d, s)) in traj.dists().iter().zip(predicted).enumerate() {
        let p = d.probs();
        w.write_record([
            (t + 1).to_string(),
            p[0].to_string(),
            p[1].to_string(),
            p[2].to_string(),
            s.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{maintenance_matrix, Rates};
    use crate::fleet::StateRecord;

    fn reference_params(max_age: usize) -> RateParams {
        RateParams::homogeneous(Rates::new(0.679, 0.274, 0.649), 0.787, 0.794, max_age).unwrap()
    }

    fn one_ship(states: Vec<Option<State>>) -> StatePanel {
        let n = states.len();
        StatePanel::new(
            vec![StateRecord {
                ship_id: "a".into(),
                engine_type: 1,
                states,
            }],
            n,
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_rates_stay_normal() {
        let p = RateParams::homogeneous(Rates::ZERO, 0.4, 0.4, 31).unwrap();
        let traj = evolve(&p, 31).unwrap();
        assert!(traj.dists().iter().all(|d| d.probs() == [1.0, 0.0, 0.0]));
        let pred = predict_states(&p, 31, PredictRule::Argmax).unwrap();
        assert!(pred.iter().all(|s| *s == State::Normal));
    }

    #[test]
    fn first_year_at_reference_params() {
        let traj = evolve(&reference_params(31), 31).unwrap();
        let d1 = traj.dists()[0].probs();
        let expected = [0.3856, 0.3060, 0.3084];
        for i in 0..3 {
            assert!((d1[i] - expected[i]).abs() < 5e-4, "{d1:?}");
        }
        let m = maintenance_matrix(0.787, 0.794).unwrap();
        let after = RowVector3::new(d1[0], d1[1], d1[2]) * m.matrix();
        assert!((after[0] - 0.8713).abs() < 5e-4);
        assert!((after[1] - 0.1287).abs() < 5e-4);
        assert_eq!(after[2], 0.0);
        for d in traj.dists() {
            assert!(d.is_simplex(1e-10));
        }
        assert_eq!(traj.dists()[0].argmax(), State::Normal);
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = StateDistribution::new([0.5, 0.5, 0.0]).unwrap();
        assert_eq!(d.argmax(), State::Normal);
        let d = StateDistribution::new([0.2, 0.4, 0.4]).unwrap();
        assert_eq!(d.argmax(), State::NearFailure);
        assert!(StateDistribution::new([0.5, 0.6, 0.0]).is_err());
    }

    #[test]
    fn likelihood_certain_and_impossible() {
        let p = RateParams::homogeneous(Rates::ZERO, 0.4, 0.4, 1).unwrap();
        assert_eq!(
            log_likelihood(&one_ship(vec![Some(State::Normal)]), &p).unwrap(),
            0.0
        );
        let ll = log_likelihood(&one_ship(vec![Some(State::Failure)]), &p).unwrap();
        assert_eq!(ll, PROB_FLOOR.ln());
        assert!(log_likelihood(&one_ship(vec![None]), &p).is_err());
    }

    #[test]
    fn likelihood_matches_brute_force_product() {
        let p = reference_params(5);
        let traj = evolve(&p, 5).unwrap();
        let cells = vec![
            Some(State::Failure),
            None,
            Some(State::Normal),
            Some(State::NearFailure),
            None,
        ];
        let ll = log_likelihood(&one_ship(cells.clone()), &p).unwrap();
        let mut prod = 1.0;
        for (t, c) in cells.iter().enumerate() {
            if let Some(s) = c {
                prod *= traj.dists()[t].prob(*s);
            }
        }
        assert!((ll - prod.ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_rule_is_seeded() {
        let p = reference_params(31);
        let a = predict_states(&p, 31, PredictRule::Sample { seed: 4 }).unwrap();
        let b = predict_states(&p, 31, PredictRule::Sample { seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 31);
    }

    #[test]
    fn predictions_csv_layout() {
        let p = reference_params(2);
        let traj = evolve(&p, 2).unwrap();
        let pred = predict_from(&traj, PredictRule::Argmax);
        let mut buf = Vec::new();
        write_predictions(&traj, &pred, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "age,d1,d2,d3,predicted_state");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,0.38"));
    }
}
