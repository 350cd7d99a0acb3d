//! Watershed data model: grid cells, daily per-grid series, gauge discharge,
//! distance weighting of precipitation, min-max scaling and 7-day windowed samples.

mod io;

use std::ops::Range;
use std::path::PathBuf;

use chrono::{Days, NaiveDate};
use thiserror::Error;

pub use io::{load_watershed, write_watershed};

use crate::tensor::Tensor;

/// Days of history fed to the model before each prediction day.
pub const WINDOW: usize = 7;
/// Per-grid channels: distance-weighted precipitation and runoff.
pub const CHANNELS: usize = 2;
pub const DEFAULT_DISTANCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{file}: date gap between {after} and {next}")]
    DateGap {
        file: PathBuf,
        after: NaiveDate,
        next: NaiveDate,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("distance vector is empty")]
    NoGrids,
    #[error("distance at grid index {index} is negative or not finite ({value})")]
    BadDistance { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("date range {start}..{end} is not inside the dataset ({first}..={last})")]
    RangeOutOfBounds {
        start: NaiveDate,
        end: NaiveDate,
        first: NaiveDate,
        last: NaiveDate,
    },
    #[error("date range {0}..{1} is empty")]
    EmptyRange(NaiveDate, NaiveDate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub grid_id: u32,
    pub x: f64,
    pub y: f64,
    pub dist_to_river: f64,
}

/// Half-open range of calendar days `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn len_days(&self) -> usize {
        (self.end - self.start).num_days().max(0) as usize
    }
}

/// Validated daily watershed record: per-grid precipitation and runoff plus gauge discharge.
#[derive(Debug, Clone, PartialEq)]
pub struct WatershedDataset {
    name: String,
    grids: Vec<GridCell>,
    dates: Vec<NaiveDate>,
    precip: Vec<Vec<f64>>,
    runoff: Vec<Vec<f64>>,
    discharge: Vec<f64>,
}

impl WatershedDataset {
    /// `precip` and `runoff` are indexed `[grid][day]`.
    pub fn new(
        name: impl Into<String>,
        grids: Vec<GridCell>,
        dates: Vec<NaiveDate>,
        precip: Vec<Vec<f64>>,
        runoff: Vec<Vec<f64>>,
        discharge: Vec<f64>,
    ) -> Result<Self, DataError> {
        let l = grids.len();
        let t = dates.len();
        if l == 0 {
            return Err(DataError::Invalid("watershed has no grids".into()));
        }
        if t == 0 {
            return Err(DataError::Invalid("watershed has no days".into()));
        }
        let mut ids: Vec<u32> = grids.iter().map(|g| g.grid_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::Invalid(format!("duplicate grid_id {}", w[0])));
        }
        for g in &grids {
            if !(g.dist_to_river >= 0.0 && g.dist_to_river.is_finite()) {
                return Err(DataError::Invalid(format!(
                    "grid {} has invalid dist_to_river {}",
                    g.grid_id, g.dist_to_river
                )));
            }
        }
        for pair in dates.windows(2) {
            if pair[0].succ_opt() != Some(pair[1]) {
                return Err(DataError::Invalid(format!(
                    "dates are not consecutive: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        for (kind, series) in [("precip", &precip), ("runoff", &runoff)] {
            if series.len() != l {
                return Err(DataError::Invalid(format!("{kind} has {} rows for {l} grids", series.len())));
            }
            for (i, row) in series.iter().enumerate() {
                if row.len() != t {
                    return Err(DataError::Invalid(format!(
                        "{kind} for grid {} has {} days, expected {t}",
                        grids[i].grid_id,
                        row.len()
                    )));
                }
                if let Some((d, v)) = row.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                    return Err(DataError::Invalid(format!(
                        "{kind} for grid {} on {} is {v}; values must be finite and non-negative",
                        grids[i].grid_id, dates[d]
                    )));
                }
            }
        }
        if discharge.len() != t {
            return Err(DataError::Invalid(format!("discharge has {} days, expected {t}", discharge.len())));
        }
        if let Some((d, v)) = discharge.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::Invalid(format!("discharge on {} is {v}", dates[d])));
        }
        Ok(Self {
            name: name.into(),
            grids,
            dates,
            precip,
            runoff,
            discharge,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grids(&self) -> &[GridCell] {
        &self.grids
    }

    pub fn grid_count(&self) -> usize {
        self.grids.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn precip(&self) -> &[Vec<f64>] {
        &self.precip
    }

    pub fn runoff(&self) -> &[Vec<f64>] {
        &self.runoff
    }

    pub fn discharge(&self) -> &[f64] {
        &self.discharge
    }

    pub fn distances(&self) -> Vec<f64> {
        self.grids.iter().map(|g| g.dist_to_river).collect()
    }

    pub fn full_range(&self) -> DateRange {
        DateRange::new(self.dates[0], self.dates[self.days() - 1] + Days::new(1))
    }

    /// Day indices covered by `range`, which must lie inside the dataset.
    pub fn index_range(&self, range: &DateRange) -> Result<Range<usize>, DataError> {
        let first = self.dates[0];
        let last = self.dates[self.days() - 1];
        let start = (range.start - first).num_days();
        let end = (range.end - first).num_days();
        if start < 0 || end > self.days() as i64 || end < start {
            return Err(DataError::RangeOutOfBounds {
                start: range.start,
                end: range.end,
                first,
                last,
            });
        }
        Ok(start as usize..end as usize)
    }

    /// `[start, end)` by day index.
    pub fn range_of(&self, days: Range<usize>) -> DateRange {
        let first = self.dates[0];
        DateRange::new(first + Days::new(days.start as u64), first + Days::new(days.end as u64))
    }
}

/// Per-grid precipitation multipliers; positive, antitone in distance, summing to L.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceWeights {
    weights: Vec<f64>,
}

impl DistanceWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Normalized reciprocal distance weights: `raw_i = 1 / (d_i + ε)`, `w_i = L · raw_i / Σ raw`.
pub fn distance_weights(distances: &[f64], epsilon: f64) -> Result<DistanceWeights, DataError> {
    if distances.is_empty() {
        return Err(DataError::NoGrids);
    }
    if let Some((index, &value)) = distances
        .iter()
        .enumerate()
        .find(|(_, d)| !(**d >= 0.0 && d.is_finite()))
    {
        return Err(DataError::BadDistance { index, value });
    }
    let raw: Vec<f64> = distances.iter().map(|d| 1.0 / (d + epsilon)).collect();
    if let Some(index) = raw.iter().position(|r| !r.is_finite()) {
        return Err(DataError::BadDistance {
            index,
            value: distances[index],
        });
    }
    let total: f64 = raw.iter().sum();
    let l = distances.len() as f64;
    Ok(DistanceWeights {
        weights: raw.iter().map(|r| l * r / total).collect(),
    })
}

/// Elementwise `w_i · precip[i][t]`.
pub fn apply_weights(precip: &[Vec<f64>], weights: &DistanceWeights) -> Result<Vec<Vec<f64>>, DataError> {
    if precip.len() != weights.len() {
        return Err(DataError::Shape(format!(
            "{} precipitation rows for {} weights",
            precip.len(),
            weights.len()
        )));
    }
    Ok(precip
        .iter()
        .zip(weights.as_slice())
        .map(|(row, w)| row.iter().map(|p| w * p).collect())
        .collect())
}

/// Min and max of one channel kind over the training days.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
}

impl ChannelStats {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self { min, max }
    }

    /// A constant channel, mapped to 0 when scaled.
    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    pub fn scale(&self, v: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    pub fn unscale(&self, s: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            self.min + s * (self.max - self.min)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub precip: ChannelStats,
    pub runoff: ChannelStats,
    pub discharge: ChannelStats,
}

/// Fits min-max statistics on `train_range` only, pooling each channel kind across grids.
pub fn normalize_fit(
    dataset: &WatershedDataset,
    weights: &DistanceWeights,
    train_range: &DateRange,
) -> Result<NormStats, DataError> {
    let idx = dataset.index_range(train_range)?;
    if idx.is_empty() {
        return Err(DataError::EmptyRange(train_range.start, train_range.end));
    }
    let weighted = apply_weights(dataset.precip(), weights)?;
    Ok(NormStats {
        precip: ChannelStats::fit(weighted.iter().flat_map(|row| row[idx.clone()].iter().copied())),
        runoff: ChannelStats::fit(dataset.runoff().iter().flat_map(|row| row[idx.clone()].iter().copied())),
        discharge: ChannelStats::fit(dataset.discharge()[idx.clone()].iter().copied()),
    })
}

/// One prediction day: scaled 7-day history, scaled target-day inputs and scaled label.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// `[L × 2 × 7]`: channel 0 weighted precipitation, channel 1 runoff, days t_p−7 … t_p−1.
    pub history: Tensor,
    /// `[L × 2]` on day t_p.
    pub target_day: Tensor,
    /// Scaled discharge on day t_p.
    pub label: f64,
    pub t_p: NaiveDate,
}

impl WindowedSample {
    pub fn grid_count(&self) -> usize {
        self.history.dims()[0]
    }
}

/// Builds one sample for every day whose previous seven days also fall inside `range`.
pub fn window_samples(
    dataset: &WatershedDataset,
    weights: &DistanceWeights,
    stats: &NormStats,
    range: &DateRange,
) -> Result<Vec<WindowedSample>, DataError> {
    let idx = dataset.index_range(range)?;
    if idx.len() <= WINDOW {
        return Ok(Vec::new());
    }
    let l = dataset.grid_count();
    let weighted = apply_weights(dataset.precip(), weights)?;
    let scaled_p: Vec<Vec<f64>> = weighted
        .iter()
        .map(|row| row.iter().map(|v| stats.precip.scale(*v)).collect())
        .collect();
    let scaled_r: Vec<Vec<f64>> = dataset
        .runoff()
        .iter()
        .map(|row| row.iter().map(|v| stats.runoff.scale(*v)).collect())
        .collect();

    let mut samples = Vec::with_capacity(idx.len() - WINDOW);
    for tp in idx.start + WINDOW..idx.end {
        let mut history = Vec::with_capacity(l * CHANNELS * WINDOW);
        let mut target = Vec::with_capacity(l * CHANNELS);
        for g in 0..l {
            history.extend_from_slice(&scaled_p[g][tp - WINDOW..tp]);
            history.extend_from_slice(&scaled_r[g][tp - WINDOW..tp]);
            target.push(scaled_p[g][tp]);
            target.push(scaled_r[g][tp]);
        }
        samples.push(WindowedSample {
            history: Tensor::from_raw(vec![l, CHANNELS, WINDOW], history),
            target_day: Tensor::from_raw(vec![l, CHANNELS], target),
            label: stats.discharge.scale(dataset.discharge()[tp]),
            t_p: dataset.dates()[tp],
        });
    }
    Ok(samples)
}

/// Train/test date split by leading fraction, with the last share of the train
/// split held out as validation for hyperparameter search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRanges {
    pub train: DateRange,
    /// Leading part of `train` used to fit search trials.
    pub fit: DateRange,
    /// Trailing part of `train` scored by search trials.
    pub validation: DateRange,
    pub test: DateRange,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const VALIDATION_FRACTION: f64 = 0.15;

pub fn split_ranges(dataset: &WatershedDataset, train_fraction: f64) -> Result<SplitRanges, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let t = dataset.days();
    let train_end = ((t as f64) * train_fraction).floor() as usize;
    if train_end == 0 || train_end == t {
        return Err(DataError::Invalid(format!("{t} days cannot be split at fraction {train_fraction}")));
    }
    let fit_end = train_end - ((train_end as f64) * VALIDATION_FRACTION).floor() as usize;
    Ok(SplitRanges {
        train: dataset.range_of(0..train_end),
        fit: dataset.range_of(0..fit_end),
        validation: dataset.range_of(fit_end..train_end),
        test: dataset.range_of(train_end..t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const NAMES: [&'static str; 3] = ["train", "validation", "test"];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// A dataset with weights, training-split statistics and split sample lists ready for a model.
#[derive(Debug, Clone)]
pub struct PreparedWatershed {
    pub dataset: WatershedDataset,
    pub weights: DistanceWeights,
    pub stats: NormStats,
    pub ranges: SplitRanges,
    pub train: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

impl PreparedWatershed {
    pub fn new(dataset: WatershedDataset, train_fraction: f64) -> Result<Self, DataError> {
        let weights = distance_weights(&dataset.distances(), DEFAULT_DISTANCE_EPSILON)?;
        let ranges = split_ranges(&dataset, train_fraction)?;
        let stats = normalize_fit(&dataset, &weights, &ranges.train)?;
        let train = window_samples(&dataset, &weights, &stats, &ranges.train)?;
        let test = window_samples(&dataset, &weights, &stats, &ranges.test)?;
        Ok(Self {
            dataset,
            weights,
            stats,
            ranges,
            train,
            test,
        })
    }

    pub fn name(&self) -> &str {
        self.dataset.name()
    }

    pub fn grid_count(&self) -> usize {
        self.dataset.grid_count()
    }

    pub fn samples(&self, split: Split) -> Result<Vec<WindowedSample>, DataError> {
        match split {
            Split::Train => Ok(self.train.clone()),
            Split::Test => Ok(self.test.clone()),
            Split::Validation => self.samples_in(&self.ranges.validation),
        }
    }

    pub fn samples_in(&self, range: &DateRange) -> Result<Vec<WindowedSample>, DataError> {
        window_samples(&self.dataset, &self.weights, &self.stats, range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn toy(days: usize, discharge: impl Fn(usize) -> f64) -> WatershedDataset {
        let start = date("2000-01-01");
        let dates = (0..days).map(|d| start + Days::new(d as u64)).collect();
        let grids = vec![
            GridCell { grid_id: 0, x: 0.0, y: 0.0, dist_to_river: 1.0 },
            GridCell { grid_id: 1, x: 1.0, y: 0.0, dist_to_river: 2.0 },
        ];
        let precip = vec![
            (0..days).map(|d| d as f64).collect(),
            (0..days).map(|d| 2.0 * d as f64).collect(),
        ];
        let runoff = vec![
            (0..days).map(|d| 0.5 * d as f64).collect(),
            (0..days).map(|d| (d % 3) as f64).collect(),
        ];
        WatershedDataset::new("toy", grids, dates, precip, runoff, (0..days).map(discharge).collect()).unwrap()
    }

    #[test]
    fn equal_distances_give_unit_weights() {
        let w = distance_weights(&[5.0, 5.0, 5.0], DEFAULT_DISTANCE_EPSILON).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reciprocal_weights_by_hand() {
        // raw = [1, 1/2], sum 3/2, L = 2 → [4/3, 2/3]
        let w = distance_weights(&[1.0, 2.0], 0.0).unwrap();
        assert!((w.as_slice()[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((w.as_slice()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nearer_grids_weigh_more() {
        let w = distance_weights(&[1.0, 10.0], DEFAULT_DISTANCE_EPSILON).unwrap();
        assert!(w.as_slice()[0] > w.as_slice()[1]);
    }

    #[test]
    fn bad_distances_are_rejected() {
        assert!(matches!(distance_weights(&[], 1e-6), Err(DataError::NoGrids)));
        assert!(matches!(
            distance_weights(&[1.0, -0.5], 1e-6),
            Err(DataError::BadDistance { index: 1, .. })
        ));
        assert!(distance_weights(&[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn applying_weights() {
        let p = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        let ones = distance_weights(&[3.0, 3.0], 0.0).unwrap();
        assert_eq!(apply_weights(&p, &ones).unwrap(), p);
        let zeros = vec![vec![0.0; 4]; 2];
        assert_eq!(apply_weights(&zeros, &ones).unwrap(), zeros);
        let w = distance_weights(&[1.0, 2.0], 0.0).unwrap();
        let out = apply_weights(&p, &w).unwrap();
        for v in &out[0] {
            assert!((v - 8.0 / 3.0).abs() < 1e-15);
        }
        for v in &out[1] {
            assert!((v - 4.0 / 3.0).abs() < 1e-15);
        }
        assert!(apply_weights(&p[..1], &w).is_err());
    }

    #[test]
    fn stats_ignore_test_range() {
        // discharge jumps to 1000 after day 20; train covers days 0..20 only
        let ds = toy(30, |d| if d < 20 { d as f64 } else { 1000.0 });
        let w = distance_weights(&ds.distances(), 0.0).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.range_of(0..20)).unwrap();
        assert_eq!(stats.discharge.max, 19.0);
        assert_eq!(stats.discharge.min, 0.0);
        assert!(normalize_fit(&ds, &w, &ds.range_of(5..5)).is_err());
    }

    #[test]
    fn weighted_precip_range_read_directly() {
        let ds = toy(10, |d| d as f64);
        let w = distance_weights(&ds.distances(), 0.0).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.range_of(0..6)).unwrap();
        // grid 0 weight 4/3 · p ∈ [0, 20/3]; grid 1 weight 2/3 · 2p ∈ [0, 20/3]
        assert_eq!(stats.precip.min, 0.0);
        assert!((stats.precip.max - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let ds = toy(12, |_| 3.5);
        let w = distance_weights(&ds.distances(), 0.0).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.full_range()).unwrap();
        assert!(stats.discharge.is_degenerate());
        assert_eq!(stats.discharge.scale(3.5), 0.0);
        assert_eq!(stats.discharge.scale(100.0), 0.0);
    }

    #[test]
    fn window_counts_at_boundaries() {
        let ds = toy(20, |d| d as f64);
        let w = distance_weights(&ds.distances(), 0.0).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.full_range()).unwrap();
        let ten = window_samples(&ds, &w, &stats, &ds.range_of(0..10)).unwrap();
        assert_eq!(ten.len(), 3);
        let days: Vec<_> = ten.iter().map(|s| s.t_p).collect();
        assert_eq!(days, vec![ds.dates()[7], ds.dates()[8], ds.dates()[9]]);
        assert!(window_samples(&ds, &w, &stats, &ds.range_of(3..10)).unwrap().is_empty());
    }

    #[test]
    fn first_history_column_is_a_direct_lookup() {
        let ds = toy(15, |d| d as f64 * 1.5);
        let w = distance_weights(&ds.distances(), 0.0).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.full_range()).unwrap();
        let samples = window_samples(&ds, &w, &stats, &ds.range_of(2..15)).unwrap();
        let first = &samples[0];
        // t_p = day 9, history starts at day 2
        assert_eq!(first.t_p, ds.dates()[9]);
        for g in 0..2 {
            let expect_p = stats.precip.scale(w.as_slice()[g] * ds.precip()[g][2]);
            let expect_r = stats.runoff.scale(ds.runoff()[g][2]);
            assert_eq!(first.history.values()[g * 14], expect_p);
            assert_eq!(first.history.values()[g * 14 + 7], expect_r);
            assert_eq!(
                first.target_day.values()[g * 2],
                stats.precip.scale(w.as_slice()[g] * ds.precip()[g][9])
            );
        }
        assert_eq!(first.label, stats.discharge.scale(ds.discharge()[9]));
    }

    #[test]
    fn split_is_leading_seventy_percent() {
        let ds = toy(100, |d| d as f64);
        let s = split_ranges(&ds, 0.7).unwrap();
        assert_eq!(s.train.len_days(), 70);
        assert_eq!(s.test.len_days(), 30);
        assert_eq!(s.validation.len_days(), 10);
        assert_eq!(s.fit.len_days(), 60);
        assert_eq!(s.validation.end, s.train.end);
        assert!(split_ranges(&ds, 1.0).is_err());
    }

    #[test]
    fn dataset_rejects_negative_precip() {
        let err = WatershedDataset::new(
            "bad",
            vec![GridCell { grid_id: 0, x: 0.0, y: 0.0, dist_to_river: 1.0 }],
            vec![date("2000-01-01")],
            vec![vec![-1.0]],
            vec![vec![0.0]],
            vec![1.0],
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-negative"), "{err}");
    }
}
