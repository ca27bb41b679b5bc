//! Density models and the generative precondition classifier.

mod gaussian;
mod generative;
mod gmm;

pub use gaussian::{fit_gaussian, sample_neighborhood, GaussianModel};
pub use generative::{GenerativeClassifier, DEFAULT_NEGATIVE_COMPONENTS, DEFAULT_PRIOR_POSITIVE};
pub use gmm::{fit_gmm, fit_gmm_traced, gmm_logpdf, gmm_sample, EmOptions, GmmModel};

/// Decision threshold used wherever a boolean precondition is needed.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_rows(samples: &[Vec<f64>]) -> crate::Result<usize> {
    let first = samples.first().ok_or(crate::Error::EmptyInput("samples"))?;
    let d = first.len();
    if d == 0 {
        return Err(crate::Error::EmptyInput("sample dimension"));
    }
    for row in samples {
        if row.len() != d {
            return Err(crate::Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFiniteInput);
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_tiny_values() {
        let v = log_sum_exp(&[-800.0, -800.0]);
        assert!((v - (-800.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
