//! Nash–Sutcliffe efficiency, RMSE and relative improvement.

use thiserror::Error;

use crate::data::{NormStats, WindowedSample};
use crate::model::{Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("observed and simulated lengths differ ({observed} vs {simulated})")]
    LengthMismatch { observed: usize, simulated: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("observed series is constant, so NSE is undefined")]
    ConstantObserved,
    #[error("baseline NSE is zero, so relative improvement is undefined")]
    ZeroBaseline,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(observed: &[f64], simulated: &[f64], needed: usize) -> Result<(), MetricError> {
    if observed.len() != simulated.len() {
        return Err(MetricError::LengthMismatch {
            observed: observed.len(),
            simulated: simulated.len(),
        });
    }
    if observed.len() < needed {
        return Err(MetricError::TooFewPoints {
            needed,
            got: observed.len(),
        });
    }
    Ok(())
}

/// `1 − Σ(obs − sim)² / Σ(obs − mean(obs))²`.
pub fn nse(observed: &[f64], simulated: &[f64]) -> Result<f64, MetricError> {
    check(observed, simulated, 2)?;
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let variance: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    if variance == 0.0 {
        return Err(MetricError::ConstantObserved);
    }
    let residual: f64 = observed.iter().zip(simulated).map(|(o, s)| (o - s).powi(2)).sum();
    Ok(1.0 - residual / variance)
}

pub fn rmse(observed: &[f64], simulated: &[f64]) -> Result<f64, MetricError> {
    check(observed, simulated, 1)?;
    let sq: f64 = observed.iter().zip(simulated).map(|(o, s)| (o - s).powi(2)).sum();
    Ok((sq / observed.len() as f64).sqrt())
}

/// Percent change of `new` over `baseline`, relative to `|baseline|`.
pub fn relative_improvement(baseline_nse: f64, new_nse: f64) -> Result<f64, MetricError> {
    if baseline_nse == 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    Ok(100.0 * (new_nse - baseline_nse) / baseline_nse.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub nse: f64,
    /// In de-normalized discharge units.
    pub rmse: f64,
    pub n_points: usize,
}

/// Pairs of de-normalized (observed, predicted) discharge, one per sample, in sample order.
pub fn predictions(model: &Model, samples: &[WindowedSample], stats: &NormStats) -> Result<Vec<(f64, f64)>, MetricError> {
    samples
        .iter()
        .map(|s| {
            let pred = model.forward(s)?;
            Ok((stats.discharge.unscale(s.label), stats.discharge.unscale(pred)))
        })
        .collect()
}

/// Scores a model on de-normalized discharge. Each sample is predicted on its
/// own and the pairs are summed in sorted order, so sample order cannot change
/// the result.
pub fn evaluate(model: &Model, samples: &[WindowedSample], stats: &NormStats) -> Result<EvalResult, MetricError> {
    let mut pairs = predictions(model, samples, stats)?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (obs, sim): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(EvalResult {
        nse: nse(&obs, &sim)?,
        rmse: rmse(&obs, &sim)?,
        n_points: obs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nse_examples() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(nse(&obs, &obs).unwrap(), 1.0);
        assert_eq!(nse(&obs, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((nse(&obs, &[1.5, 2.0, 2.5]).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(nse(&[4.0, 4.0], &[1.0, 2.0]), Err(MetricError::ConstantObserved));
        assert!(matches!(nse(&[1.0], &[1.0]), Err(MetricError::TooFewPoints { .. })));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert!(matches!(rmse(&[0.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn relative_improvement_examples() {
        assert!((relative_improvement(0.27, 0.39).unwrap() - 44.44).abs() < 0.01);
        assert_eq!(relative_improvement(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(relative_improvement(0.0, 0.5), Err(MetricError::ZeroBaseline));
        assert!(relative_improvement(-0.5, 0.0).unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn nse_at_most_one(obs in prop::collection::vec(-10.0..10.0f64, 2..40), noise in prop::collection::vec(-1.0..1.0f64, 40)) {
            let sim: Vec<f64> = obs.iter().zip(&noise).map(|(o, n)| o + n).collect();
            if let Ok(v) = nse(&obs, &sim) {
                prop_assert!(v <= 1.0);
                if sim != obs {
                    prop_assert!(v < 1.0);
                }
            }
        }

        #[test]
        fn nse_affine_invariant(obs in prop::collection::vec(-10.0..10.0f64, 3..40), a in 0.1..5.0f64, sign in any::<bool>(), b in -50.0..50.0f64) {
            let a = if sign { a } else { -a };
            let sim: Vec<f64> = obs.iter().rev().cloned().collect();
            if let Ok(base) = nse(&obs, &sim) {
                let f = |v: &f64| a * v + b;
                let moved = nse(&obs.iter().map(f).collect::<Vec<_>>(), &sim.iter().map(f).collect::<Vec<_>>()).unwrap();
                prop_assert!((base - moved).abs() < 1e-9, "{} vs {}", base, moved);
            }
        }

        #[test]
        fn relative_improvement_of_self_is_zero(x in -2.0..2.0f64) {
            prop_assume!(x != 0.0);
            prop_assert_eq!(relative_improvement(x, x).unwrap(), 0.0);
        }
    }
}
