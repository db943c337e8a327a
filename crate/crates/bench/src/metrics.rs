//! Evaluation metrics and run aggregation.

use serde::{Deserialize, Serialize};

use crate::suite::Oracle;
use crate::BenchError;

/// Absolute error between a true and an estimated value.
pub fn metric_ae(v_true: f64, v_est: f64) -> f64 {
    (v_true - v_est).abs()
}

/// Mean absolute error over the candidate policies.
pub fn metric_mae(aes: &[f64]) -> Result<f64, BenchError> {
    if aes.is_empty() {
        return Err(BenchError::Empty("mean absolute error"));
    }
    Ok(aes.iter().sum::<f64>() / aes.len() as f64)
}

/// Mean over deployed patients of `max_π V(π | s0) − V(selected | s0)`.
/// `selected` pairs each patient's initial state with its policy id.
pub fn metric_regret1(selected: &[(usize, &str)], policies: &[String], oracle: &Oracle) -> Result<f64, BenchError> {
    if selected.is_empty() {
        return Err(BenchError::Empty("regret"));
    }
    let mut total = 0.0;
    for &(s0, p) in selected {
        let best = oracle.best(policies, s0)?;
        total += best - oracle.value(p, s0)?;
    }
    Ok(total / selected.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Sample standard deviation over `√n`; 0 for a single value.
    pub se: f64,
}

pub fn mean_se(xs: &[f64]) -> Result<MeanSe, BenchError> {
    if xs.is_empty() {
        return Err(BenchError::Empty("aggregation"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    Ok(MeanSe { mean, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn absolute_error() {
        assert_eq!(metric_ae(0.5, 0.5), 0.0);
        assert!((metric_ae(0.149, 0.143) - 0.006).abs() < 1e-12);
        assert_eq!(metric_ae(0.3, -0.2), metric_ae(-0.2, 0.3));
    }

    #[test]
    fn mean_absolute_error() {
        assert_eq!(metric_mae(&[0.7]).unwrap(), 0.7);
        assert!((metric_mae(&[0.0, 0.2]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(metric_mae(&[0.1, 0.2, 0.6]).unwrap(), metric_mae(&[0.6, 0.1, 0.2]).unwrap());
        assert!(metric_mae(&[]).is_err());
    }

    fn oracle() -> Oracle {
        let mut values = BTreeMap::new();
        values.insert("a".to_string(), vec![1.0, 0.5]);
        values.insert("b".to_string(), vec![0.96, 0.9]);
        Oracle { values }
    }

    #[test]
    fn regret() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let o = oracle();
        assert_eq!(metric_regret1(&[(0, "a"), (1, "b")], &ids, &o).unwrap(), 0.0);
        let r = metric_regret1(&[(0, "a"), (0, "b")], &ids, &o).unwrap();
        assert!((r - 0.02).abs() < 1e-12);
        assert!(matches!(metric_regret1(&[(0, "c")], &ids, &o), Err(BenchError::MissingOracle { .. })));
        assert!(matches!(metric_regret1(&[(5, "a")], &ids, &o), Err(BenchError::MissingOracle { .. })));
    }

    #[test]
    fn three_run_aggregation_matches_hand_computation() {
        // mean 2, sample variance ((1)² + 0 + (1)²)/2 = 1, se = 1/√3.
        let m = mean_se(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[4.0]).unwrap().se, 0.0);
    }
}
