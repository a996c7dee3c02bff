//! Classical probabilistic classifiers (random forest, multinomial
//! logistic regression) used as ensemble members over raw bits or
//! embeddings.

pub mod forest;
pub mod logistic;

pub use forest::{train_forest, ForestConfig, ForestModel};
pub use logistic::{train_logistic, LinearModel, LogisticConfig};

#[derive(Debug, thiserror::Error)]
pub enum ClassicalError {
    #[error("empty training input")]
    EmptyInput,
    #[error("feature width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("probabilities invalid: {0}")]
    BadDistribution(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

/// Probability vector over the class set: nonnegative, sums to 1 ± 1e-9.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ClassicalError> {
        if probs.is_empty() {
            return Err(ClassicalError::BadDistribution("empty".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(ClassicalError::BadDistribution(format!(
                "negative or non-finite entry in {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ClassicalError::BadDistribution(format!(
                "sums to {sum}, expected 1"
            )));
        }
        Ok(ClassDistribution(probs))
    }

    /// Normalize nonnegative scores into a distribution.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self, ClassicalError> {
        let sum: f64 = scores.iter().sum();
        if !(sum > 0.0) {
            return Err(ClassicalError::BadDistribution(format!(
                "scores sum to {sum}"
            )));
        }
        Self::new(scores.into_iter().map(|s| s / sum).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 0-based argmax; ties break toward the lowest class id.
    pub fn argmax0(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassDistribution::new(vec![0.6, 0.5]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::new(vec![]).is_err());
        let d = ClassDistribution::from_scores(vec![1.0, 3.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn argmax_ties_take_lowest_class() {
        let d = ClassDistribution::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(d.argmax0(), 0);
        let d = ClassDistribution::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(d.argmax0(), 1);
    }
}
