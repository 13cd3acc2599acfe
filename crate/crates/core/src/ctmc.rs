//! Three-state continuous-time deterioration chain and yearly maintenance.
//!
//! All transition matrices are row-stochastic and act on row vectors:
//! `m[i][j] = P(next = j | current = i)`, states indexed 0..3 for
//! Normal, NearFailure and Failure.
//!
//! The generator is upper triangular with state 3 absorbing:
//!
//! ```text
//!     | -(l1 + l2)   l1    l2 |
//! Q = |     0       -l3    l3 |
//!     |     0        0     0  |
//! ```
//!
//! Its exponential has the closed form computed by [`deterioration_matrix`].
//! The leading exponent of `p11` is `l1 + l2`, the total exit rate from
//! state 1. [`expm`] evaluates `exp(Qt)` directly and is kept as an
//! independent check on the closed form.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on any deterioration rate (per year).
pub const DEFAULT_RATE_BOUND: f64 = 50.0;

/// Inside this window around `l1 + l2 = l3` the closed form switches to its
/// series expansion about the removable singularity.
pub const SINGULAR_WINDOW: f64 = 1e-6;

pub const N_STATES: usize = 3;

/// Rate triple `(l1, l2, l3)`: 1→2, 1→3 and 2→3 transition intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Rates {
    pub const ZERO: Rates = Rates {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };

    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        Rates {
            lambda1,
            lambda2,
            lambda3,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    fn validate(&self, rate_bound: f64) -> Result<()> {
        for (i, r) in self.as_array().iter().enumerate() {
            if !r.is_finite() || *r < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "lambda{} must be a finite nonnegative rate, got {r}",
                    i + 1
                )));
            }
            if *r > rate_bound {
                return Err(Error::InvalidParameter(format!(
                    "lambda{} = {r} exceeds the rate bound {rate_bound}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// A block of consecutive ages sharing one rate triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePeriod {
    pub first_age: usize,
    pub last_age: usize,
    pub rates: Rates,
}

/// Deterioration rates per age period plus the two maintenance probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    periods: Vec<RatePeriod>,
    pub p21: f64,
    pub p31: f64,
}

impl RateParams {
    /// Validates contiguity of the periods (starting at age 1), rate signs
    /// and probability ranges. The rate cap is checked separately by
    /// [`RateParams::validate`].
    pub fn new(periods: Vec<RatePeriod>, p21: f64, p31: f64) -> Result<Self> {
        let params = RateParams { periods, p21, p31 };
        params.validate(f64::INFINITY)?;
        Ok(params)
    }

    /// One period covering ages `1..=max_age`.
    pub fn homogeneous(rates: Rates, p21: f64, p31: f64, max_age: usize) -> Result<Self> {
        Self::equal_periods(max_age, vec![rates], p21, p31)
    }

    /// Splits `1..=max_age` into `rates.len()` near-equal periods; period `i`
    /// (1-based) ends at `ceil(i * max_age / n)`, so 31 ages in 4 periods
    /// break after ages 8, 16 and 24.
    pub fn equal_periods(max_age: usize, rates: Vec<Rates>, p21: f64, p31: f64) -> Result<Self> {
        let n = rates.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "at least one period required".into(),
            ));
        }
        if max_age < n {
            return Err(Error::InvalidParameter(format!(
                "cannot split {max_age} ages into {n} periods"
            )));
        }
        let mut first = 1;
        let periods = rates
            .into_iter()
            .enumerate()
            .map(|(i, rates)| {
                let last = ((i + 1) * max_age).div_ceil(n);
                let p = RatePeriod {
                    first_age: first,
                    last_age: last,
                    rates,
                };
                first = last + 1;
                p
            })
            .collect();
        Self::new(periods, p21, p31)
    }

    pub fn validate(&self, rate_bound: f64) -> Result<()> {
        if self.periods.is_empty() {
            return Err(Error::InvalidParameter("no rate periods".into()));
        }
        let mut expected_first = 1;
        for p in &self.periods {
            if p.first_age != expected_first || p.last_age < p.first_age {
                return Err(Error::InvalidParameter(format!(
                    "rate periods must be contiguous from age 1; got [{}, {}] where age {} was expected next",
                    p.first_age, p.last_age, expected_first
                )));
            }
            p.rates.validate(rate_bound)?;
            expected_first = p.last_age + 1;
        }
        check_probability("p21", self.p21)?;
        check_probability("p31", self.p31)?;
        Ok(())
    }

    pub fn periods(&self) -> &[RatePeriod] {
        &self.periods
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    /// Last age covered by the periods.
    pub fn max_age(&self) -> usize {
        self.periods.last().map_or(0, |p| p.last_age)
    }

    /// Rate triple of the period containing `age`.
    pub fn rates_for_age(&self, age: usize) -> Result<Rates> {
        self.periods
            .iter()
            .find(|p| p.first_age <= age && age <= p.last_age)
            .map(|p| p.rates)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "age {age} outside the covered range 1..={}",
                    self.max_age()
                ))
            })
    }

    pub fn maintenance(&self) -> MaintenanceMatrix {
        MaintenanceMatrix::from_validated(self.p21, self.p31)
    }

    /// Flat layout: `l1, l2, l3` for each period in order, then `p21, p31`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .periods
            .iter()
            .flat_map(|p| p.rates.as_array())
            .collect();
        v.push(self.p21);
        v.push(self.p31);
        v
    }

    /// Inverse of [`RateParams::to_vec`] with an equal age partition.
    pub fn from_slice(values: &[f64], max_age: usize) -> Result<Self> {
        if values.len() < 5 || !(values.len() - 2).is_multiple_of(3) {
            return Err(Error::InvalidParameter(format!(
                "expected 3*periods + 2 values, got {}",
                values.len()
            )));
        }
        let n_rate = values.len() - 2;
        let rates = values[..n_rate]
            .chunks(3)
            .map(|c| Rates::new(c[0], c[1], c[2]))
            .collect();
        Self::equal_periods(max_age, rates, values[n_rate], values[n_rate + 1])
    }

    /// Labels matching [`RateParams::to_vec`].
    pub fn param_names(n_periods: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(3 * n_periods + 2);
        for p in 1..=n_periods {
            for l in 1..=3 {
                if n_periods == 1 {
                    names.push(format!("lambda{l}"));
                } else {
                    names.push(format!("lambda{l}_p{p}"));
                }
            }
        }
        names.push("p21".into());
        names.push("p31".into());
        names
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "{name} must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

/// Upper-triangular generator with absorbing failure state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateMatrix(Matrix3<f64>);

impl RateMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn build_rate_matrix(rates: Rates) -> Result<RateMatrix> {
    rates.validate(f64::INFINITY)?;
    let Rates {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
    } = rates;
    Ok(RateMatrix(Matrix3::new(
        -(l1 + l2),
        l1,
        l2,
        0.0,
        -l3,
        l3,
        0.0,
        0.0,
        0.0,
    )))
}

/// `exp(q * t)` by scaling and squaring of the Taylor series.
///
/// The scaled argument has 1-norm at most 1/2, where the series is summed
/// until terms drop below 1e-20 in max-norm.
pub fn expm(q: &Matrix3<f64>, t: f64) -> Matrix3<f64> {
    let a = q * t;
    let norm = (0..3)
        .map(|j| a.column(j).abs().sum())
        .fold(0.0_f64, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);

    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..=40 {
        term = term * a / k as f64;
        sum += term;
        if term.abs().max() < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// Transition matrix of pure deterioration over an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeteriorationMatrix(Matrix3<f64>);

impl DeteriorationMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        rows(&self.0)
    }
}

impl Serialize for DeteriorationMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

/// Closed-form `exp(Q t)` for the three-state generator.
///
/// `p12 = l1 (e^{-l3 t} - e^{-(l1+l2) t}) / (l1 + l2 - l3)` is evaluated as
/// `l1 e^{-m t} (1 - e^{-|D| t}) / |D|` with `m = min(l1 + l2, l3)` and
/// `D = l1 + l2 - l3`, which stays finite for any sign of `D`. Within
/// [`SINGULAR_WINDOW`] of `D = 0` the divided difference is replaced by its
/// Taylor series, whose leading term is the limit `l1 t e^{-l3 t}`.
pub fn deterioration_matrix(rates: Rates, t: f64) -> Result<DeteriorationMatrix> {
    rates.validate(f64::INFINITY)?;
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "time must be finite and nonnegative, got {t}"
        )));
    }
    let Rates {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
    } = rates;
    let exit1 = l1 + l2;
    let p11 = (-exit1 * t).exp();
    let p22 = (-l3 * t).exp();
    let gap = (exit1 - l3).abs();
    let slow = exit1.min(l3);
    let x = gap * t;
    // (1 - e^{-x}) / gap, expressed per unit time
    let divided = if gap < SINGULAR_WINDOW {
        t * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0)
    } else {
        -(-x).exp_m1() / gap
    };
    let p12 = l1 * (-slow * t).exp() * divided;
    let p13 = (1.0 - p11 - p12).max(0.0);
    let p23 = -(-l3 * t).exp_m1();

    Ok(DeteriorationMatrix(Matrix3::new(
        p11, p12, p13, 0.0, p22, p23, 0.0, 0.0, 1.0,
    )))
}

/// Imperfect-repair matrix applied once per year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaintenanceMatrix(Matrix3<f64>);

impl MaintenanceMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        rows(&self.0)
    }

    fn from_validated(p21: f64, p31: f64) -> Self {
        MaintenanceMatrix(Matrix3::new(
            1.0,
            0.0,
            0.0,
            p21,
            1.0 - p21,
            0.0,
            p31,
            1.0 - p31,
            0.0,
        ))
    }
}

impl Serialize for MaintenanceMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

/// Rows `(1,0,0)`, `(p21, 1-p21, 0)`, `(p31, 1-p31, 0)`.
pub fn maintenance_matrix(p21: f64, p31: f64) -> Result<MaintenanceMatrix> {
    check_probability("p21", p21)?;
    check_probability("p31", p31)?;
    Ok(MaintenanceMatrix::from_validated(p21, p31))
}

/// Largest absolute deviation of any row sum from 1, or `None` if some entry
/// is negative.
pub fn stochastic_defect(m: &Matrix3<f64>) -> Option<f64> {
    if m.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return None;
    }
    Some(
        (0..3)
            .map(|i| (m.row(i).sum() - 1.0).abs())
            .fold(0.0, f64::max),
    )
}
