use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    pub significant: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Paired two-sided t-test on per-fold values.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("paired t-test needs n >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sd = sample_sd(&d);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Degenerate("differences have zero variance"));
    }
    let n = d.len();
    let t = mean(&d) / (sd / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(StatTestResult {
        t,
        df,
        p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// Mean with a 95% interval half-width of 1.96 standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(
                "a confidence interval needs at least two values".into(),
            ));
        }
        let se = sample_sd(values) / (values.len() as f64).sqrt();
        Ok(MeanCi {
            mean: mean(values),
            half_width: Z_95 * se,
        })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }
}

impl fmt::Display for MeanCi {
    /// Two decimals, `0.88 ± 0.10`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.half_width)
    }
}

/// (lo, hi) = mean ∓ 1.96 · SE, SE = sample standard deviation / √n.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    MeanCi::of(values).map(|m| m.bounds())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_t_test() {
        let r = paired_t_test(&[0.8, 0.9, 1.0], &[0.7, 0.85, 0.95]).unwrap();
        assert!((r.t - 4.0).abs() < 1e-9);
        assert_eq!(r.df, 2);
        assert!((r.p - 0.0572).abs() < 1e-3);
        assert!(!r.significant);
    }

    #[test]
    fn degenerate_and_symmetric() {
        assert!(matches!(
            paired_t_test(&[0.5, 0.6], &[0.5, 0.6]),
            Err(Error::Degenerate(_))
        ));
        let r = paired_t_test(&[0.6, 0.4], &[0.5, 0.5]).unwrap();
        assert!(r.t.abs() < 1e-12);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn ci_examples() {
        let (lo, hi) = confidence_interval(&[0.8, 0.9, 1.0]).unwrap();
        assert!((lo - 0.7868).abs() < 1e-4 && (hi - 1.0132).abs() < 1e-4);
        let c = MeanCi::of(&[0.8, 0.9, 1.0]).unwrap();
        assert!((c.half_width - 0.1132).abs() < 1e-4);
        let (lo, hi) = confidence_interval(&[0.7, 0.7, 0.7]).unwrap();
        assert!((lo - 0.7).abs() < 1e-12 && (hi - 0.7).abs() < 1e-12);
        assert!(confidence_interval(&[0.7]).is_err());
        let shown = MeanCi {
            mean: 0.8812,
            half_width: 0.1004,
        };
        assert_eq!(shown.to_string(), "0.88 ± 0.10");
    }
}
