use std::time::Duration;

use thiserror::Error;

use crate::key::{Key, KeyError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Shape(#[from] KeyError),
    #[error("oracle budget of {0} queries exhausted")]
    BudgetExhausted(usize),
    #[error("connection error: {0}")]
    Connection(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("oracle reported an error: {0}")]
    Remote(String),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
}

/// Anything that can score a candidate key with a classification accuracy.
pub trait AccuracySource: Send {
    /// `(channels, block_size)` of the keys this source accepts.
    fn shape(&self) -> (usize, usize);

    fn accuracy(&mut self, key: &Key) -> Result<f64, OracleError>;
}

/// Accuracy evaluator with query accounting.
///
/// Every call to [`Oracle::evaluate`] that reaches the source counts as one
/// query; once `budget` queries have been made, further calls are refused.
pub struct Oracle {
    source: Box<dyn AccuracySource>,
    call_count: usize,
    budget: Option<usize>,
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracle")
            .field("shape", &self.source.shape())
            .field("call_count", &self.call_count)
            .field("budget", &self.budget)
            .finish()
    }
}

impl Oracle {
    pub fn new(source: Box<dyn AccuracySource>, budget: Option<usize>) -> Result<Self, OracleError> {
        if budget == Some(0) {
            return Err(OracleError::Parameter("budget must be at least 1".into()));
        }
        Ok(Self { source, call_count: 0, budget })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.source.shape()
    }

    pub fn call_count(&self) -> usize {
        self.call_count
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn remaining(&self) -> Option<usize> {
        self.budget.map(|b| b.saturating_sub(self.call_count))
    }

    pub fn check_shape(&self, key: &Key) -> Result<(), KeyError> {
        let (channels, block_size) = self.shape();
        if key.channels() != channels || key.block_size() != block_size {
            return Err(KeyError::ShapeMismatch {
                left_channels: key.channels(),
                left_block: key.block_size(),
                right_channels: channels,
                right_block: block_size,
            });
        }
        Ok(())
    }

    pub fn evaluate(&mut self, key: &Key) -> Result<f64, OracleError> {
        self.check_shape(key)?;
        if let Some(budget) = self.budget {
            if self.call_count >= budget {
                return Err(OracleError::BudgetExhausted(budget));
            }
        }
        self.call_count += 1;
        let acc = self.source.accuracy(key)?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(OracleError::Protocol(format!("accuracy {acc} outside [0, 1]")));
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);

    impl AccuracySource for Constant {
        fn shape(&self) -> (usize, usize) {
            (1, 2)
        }

        fn accuracy(&mut self, _key: &Key) -> Result<f64, OracleError> {
            Ok(self.0)
        }
    }

    #[test]
    fn budget_and_count() {
        let mut oracle = Oracle::new(Box::new(Constant(0.5)), Some(2)).unwrap();
        let key = Key::zeros(1, 2).unwrap();
        assert_eq!(oracle.evaluate(&key).unwrap(), 0.5);
        assert_eq!(oracle.call_count(), 1);
        assert_eq!(oracle.remaining(), Some(1));
        oracle.evaluate(&key).unwrap();
        assert!(matches!(oracle.evaluate(&key), Err(OracleError::BudgetExhausted(2))));
        assert_eq!(oracle.call_count(), 2);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(matches!(Oracle::new(Box::new(Constant(0.5)), Some(0)), Err(OracleError::Parameter(_))));
    }

    #[test]
    fn wrong_shape_is_not_counted() {
        let mut oracle = Oracle::new(Box::new(Constant(0.5)), None).unwrap();
        assert!(matches!(oracle.evaluate(&Key::zeros(3, 2).unwrap()), Err(OracleError::Shape(_))));
        assert_eq!(oracle.call_count(), 0);
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let mut oracle = Oracle::new(Box::new(Constant(1.5)), None).unwrap();
        assert!(matches!(oracle.evaluate(&Key::zeros(1, 2).unwrap()), Err(OracleError::Protocol(_))));
        let mut oracle = Oracle::new(Box::new(Constant(f64::NAN)), None).unwrap();
        assert!(matches!(oracle.evaluate(&Key::zeros(1, 2).unwrap()), Err(OracleError::Protocol(_))));
    }
}
