//! Small descriptive-statistics helpers shared by several modules.

use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance with divisor `n - ddof`.
pub fn variance(xs: &[f64], ddof: usize) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - ddof) as f64
}

/// Empirical quantile of already sorted data, linear interpolation between
/// order statistics at position `p * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Pearson chi-square statistic and upper-tail p-value against equal
/// expected counts across bins.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let expected_all: Vec<f64> = vec![expected; counts.len()];
    chi_square(counts, &expected_all)
}

/// Pearson chi-square statistic and p-value with `bins - 1` degrees of
/// freedom. Bins with zero expectation are skipped.
pub fn chi_square(counts: &[usize], expected: &[f64]) -> (f64, f64) {
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&c, &e) in counts.iter().zip(expected) {
        if e > 0.0 {
            stat += (c as f64 - e).powi(2) / e;
            bins += 1;
        }
    }
    if bins < 2 {
        return (stat, 1.0);
    }
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive dof");
    (stat, 1.0 - dist.cdf(stat))
}

/// Sample skewness (moment estimator).
pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}
