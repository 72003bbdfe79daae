//! Small numeric helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Two-sided critical value for a confidence level such as 0.95.
pub fn two_sided_critical(ci_level: f64) -> f64 {
    normal_quantile(0.5 + ci_level / 2.0)
}

/// Sum that does not depend on the order of `v` (values are sorted first).
pub fn ordered_sum(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with denominator n - 1.
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Median; the mean of the two central values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// One-sample t statistic of the mean against zero. `None` when fewer than
/// two values or zero spread.
pub fn t_statistic(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let sd = sample_variance(v).sqrt();
    if !(sd > 0.0) {
        return None;
    }
    Some(mean(v) / (sd / (v.len() as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.95) - 1.644854).abs() < 1e-6);
        assert!((two_sided_critical(0.95) - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn median_and_t() {
        assert_eq!(median(&[1.0, 10.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(t_statistic(&[1.0, 1.0]), None);
        let t = t_statistic(&[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 / (1.0 / 3f64.sqrt())).abs() < 1e-12);
    }
}
