use serde::{Deserialize, Serialize};

use super::{fit_gaussian, fit_gmm, EmOptions, GaussianModel, GmmModel};
use crate::error::{Error, Result};

pub const DEFAULT_PRIOR_POSITIVE: f64 = 0.5;
pub const DEFAULT_NEGATIVE_COMPONENTS: usize = 4;

/// `rho(s) = p f+(s) / (p f+(s) + (1 - p) f-(s))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeClassifier {
    pub positive: GaussianModel,
    pub negative: GmmModel,
    pub prior_positive: f64,
}

impl GenerativeClassifier {
    pub fn new(positive: GaussianModel, negative: GmmModel, prior_positive: f64) -> Result<Self> {
        let c = GenerativeClassifier {
            positive,
            negative,
            prior_positive,
        };
        c.validate()?;
        Ok(c)
    }

    /// Fits the positive Gaussian and a negative mixture. The component
    /// count is reduced when there are fewer negatives than components.
    pub fn fit(
        positives: &[Vec<f64>],
        negatives: &[Vec<f64>],
        negative_components: usize,
        prior_positive: f64,
        seed: u64,
    ) -> Result<Self> {
        let positive = fit_gaussian(positives)?;
        let k = negative_components.min(negatives.len()).max(1);
        let negative = fit_gmm(negatives, &EmOptions::new(k, seed))?;
        Self::new(positive, negative, prior_positive)
    }

    pub fn dim(&self) -> usize {
        self.positive.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_positive > 0.0 && self.prior_positive < 1.0) {
            return Err(Error::InvariantViolation(format!(
                "prior_positive {} outside (0, 1)",
                self.prior_positive
            )));
        }
        self.positive.validate()?;
        self.negative.validate()?;
        if self.negative.dim() != self.positive.dim() {
            return Err(Error::InvariantViolation("class model dimensions differ".into()));
        }
        Ok(())
    }

    /// Posterior probability of the positive class, computed in log space.
    pub fn classify(&self, x: &[f64]) -> Result<f64> {
        let a = self.prior_positive.ln() + self.positive.logpdf(x)?;
        let b = (1.0 - self.prior_positive).ln() + self.negative.logpdf(x)?;
        let d = b - a;
        if d.is_nan() {
            // both densities underflowed to zero
            return Ok(self.prior_positive);
        }
        Ok((1.0 / (1.0 + d.exp())).clamp(0.0, 1.0))
    }

    pub fn is_satisfied(&self, x: &[f64]) -> Result<bool> {
        Ok(self.classify(x)? >= super::DECISION_THRESHOLD)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classifier(prior: f64) -> GenerativeClassifier {
        GenerativeClassifier::new(
            GaussianModel::isotropic(vec![0.0, 0.0], 0.1).unwrap(),
            GmmModel::new(
                vec![0.5, 0.5],
                vec![
                    GaussianModel::isotropic(vec![5.0, 0.0], 0.5).unwrap(),
                    GaussianModel::isotropic(vec![-5.0, 3.0], 0.5).unwrap(),
                ],
            )
            .unwrap(),
            prior,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_densities_give_half() {
        let g = GaussianModel::isotropic(vec![1.0], 2.0).unwrap();
        let c = GenerativeClassifier::new(g.clone(), GmmModel::single(g), 0.5).unwrap();
        for x in [-3.0, 0.0, 1.0, 7.5] {
            assert!((c.classify(&[x]).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_mean_is_confident() {
        let c = classifier(0.5);
        // direct density ratio
        let lp = c.positive.logpdf(&[0.0, 0.0]).unwrap();
        let ln = c.negative.logpdf(&[0.0, 0.0]).unwrap();
        let want = 1.0 / (1.0 + (ln - lp).exp());
        let got = c.classify(&[0.0, 0.0]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(got > 0.99);
    }

    #[test]
    fn prior_limit() {
        let c = classifier(1.0 - 1e-12);
        assert!(c.classify(&[4.0, 0.0]).unwrap() > 0.99 || c.positive.logpdf(&[4.0, 0.0]).unwrap() < -30.0);
        assert!(c.classify(&[0.5, 0.5]).unwrap() > 0.999_999);
        assert!(GenerativeClassifier::new(c.positive.clone(), c.negative.clone(), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn output_in_unit_interval(x in -1e3f64..1e3, y in -1e3f64..1e3) {
            let p = classifier(0.5).classify(&[x, y]).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
