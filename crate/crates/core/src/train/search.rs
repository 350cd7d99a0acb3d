use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{train, TrainConfig, TrainError};
use crate::data::WindowedSample;
use crate::metrics::nse;
use crate::model::{build_model, ArchSpec, ConvSpec, Variant};
use crate::synth::stream;

pub const DEFAULT_BUDGET: usize = 20;
pub const DEFAULT_TRIAL_ITERATIONS: usize = 30;

/// Ranges sampled by [`random_search`]: log-uniform learning rate, categorical everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub conv: Vec<Vec<ConvSpec>>,
    pub lstm: Vec<Vec<usize>>,
    pub target_branch_units: Vec<usize>,
    pub head: Vec<Vec<usize>>,
    pub budget: usize,
    pub trial_iterations: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let c = |out_channels, kernel| ConvSpec { out_channels, kernel };
        Self {
            learning_rate: (1e-4, 1e-2),
            batch_sizes: vec![16, 32, 64],
            conv: vec![
                vec![c(16, 3), c(32, 3)],
                vec![c(8, 3), c(16, 3)],
                vec![c(16, 2), c(32, 2), c(32, 2)],
                vec![c(32, 5)],
            ],
            lstm: vec![vec![16], vec![32], vec![64], vec![32, 32]],
            target_branch_units: vec![4, 8, 16],
            head: vec![vec![16, 1], vec![32, 1], vec![32, 16, 1]],
            budget: DEFAULT_BUDGET,
            trial_iterations: DEFAULT_TRIAL_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub arch: ArchSpec,
    pub config: TrainConfig,
    pub model_seed: u64,
    pub validation_nse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl SearchResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<(), TrainError> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(TrainError::Search("learning rate range must satisfy 0 < lo ≤ hi".into()));
        }
        let empty = [
            ("batch_sizes", self.batch_sizes.is_empty()),
            ("conv", self.conv.is_empty()),
            ("lstm", self.lstm.is_empty()),
            ("target_branch_units", self.target_branch_units.is_empty()),
            ("head", self.head.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(TrainError::Search(format!("`{name}` has no options")));
        }
        if self.budget == 0 {
            return Err(TrainError::Search("budget must be at least 1".into()));
        }
        Ok(())
    }

    /// Draws trial `index` from its own stream of the search seed.
    fn draw(&self, index: usize, base: &TrainConfig) -> (ArchSpec, TrainConfig, u64) {
        let mut rng = stream(self.seed, index as u64);
        let (lo, hi) = self.learning_rate;
        let lr = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
        let arch = ArchSpec {
            conv: self.conv.choose(&mut rng).expect("non-empty").clone(),
            lstm: self.lstm.choose(&mut rng).expect("non-empty").clone(),
            target_branch_units: *self.target_branch_units.choose(&mut rng).expect("non-empty"),
            head: self.head.choose(&mut rng).expect("non-empty").clone(),
            variant: Variant::HydroDeep,
        };
        let config = TrainConfig {
            iterations: self.trial_iterations,
            batch_size: *self.batch_sizes.choose(&mut rng).expect("non-empty"),
            learning_rate: lr,
            seed: rng.random(),
            ..base.clone()
        };
        (arch, config, rng.random())
    }
}

/// Validation NSE on normalized discharge (equal to the de-normalized value by affine invariance).
fn score(arch: &ArchSpec, config: &TrainConfig, model_seed: u64, train_set: &[WindowedSample], validation: &[WindowedSample]) -> Result<f64, TrainError> {
    let mut model = build_model(arch, model_seed)?;
    train(&mut model, train_set, config)?;
    let obs: Vec<f64> = validation.iter().map(|s| s.label).collect();
    let sim = validation.iter().map(|s| model.forward(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(nse(&obs, &sim)?)
}

/// Trains `space.budget` seeded trials and returns the full log with the argmax by
/// validation NSE (first on ties). Trials run in parallel; their streams are
/// split from the search seed up front, so the result matches a serial run.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    train_set: &[WindowedSample],
    validation: &[WindowedSample],
) -> Result<SearchResult, TrainError> {
    space.validate()?;
    let drawn: Vec<_> = (0..space.budget).map(|i| space.draw(i, base)).collect();
    let trials = drawn
        .into_par_iter()
        .enumerate()
        .map(|(index, (arch, config, model_seed))| {
            let validation_nse = score(&arch, &config, model_seed, train_set, validation)?;
            Ok(Trial {
                index,
                arch,
                config,
                model_seed,
                validation_nse,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let best = trials
        .iter()
        .enumerate()
        .fold(0, |best, (i, t)| if t.validation_nse > trials[best].validation_nse { i } else { best });
    Ok(SearchResult { trials, best })
}
