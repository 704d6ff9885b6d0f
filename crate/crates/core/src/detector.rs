//! Sliding-window monitor over prediction-set sizes.
//!
//! The window mean is compared against the calibrated baseline size. A
//! stream whose sets grow past `ratio_threshold` times the baseline is
//! flagged as out of calibration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::aps::PredictionSet;
use crate::calibration::CalibrationModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window: usize,
    pub ratio_threshold: f64,
    /// Samples required before the alarm can fire. Defaults to `window`.
    pub min_fill: usize,
    pub track_null_rate: bool,
    /// Lower bound on the baseline used in the ratio test.
    pub size_floor: f64,
    /// Keep the alarm raised once fired.
    pub latched: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::with_window(500)
    }
}

impl DetectorConfig {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ratio_threshold: 1.5,
            min_fill: window,
            track_null_rate: true,
            size_floor: 0.5,
            latched: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if !(self.ratio_threshold > 1.0 && self.ratio_threshold.is_finite()) {
            return Err(Error::OutOfRange {
                name: "ratio_threshold",
                range: "(1, inf)",
                value: self.ratio_threshold,
            });
        }
        if self.min_fill == 0 || self.min_fill > self.window {
            return Err(Error::Config(format!(
                "min_fill {} must lie in 1..={}",
                self.min_fill, self.window
            )));
        }
        if !(self.size_floor >= 0.0 && self.size_floor.is_finite()) {
            return Err(Error::OutOfRange {
                name: "size_floor",
                range: "[0, inf)",
                value: self.size_floor,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    OutOfCalibration,
}

/// Streaming detector state. Updates must be serialized by the caller.
#[derive(Debug, Clone)]
pub struct DetectorState {
    config: DetectorConfig,
    baseline_avg_size: f64,
    window: VecDeque<usize>,
    window_sum: u64,
    window_nulls: u64,
    samples_seen: u64,
    alarm: bool,
    first_alarm_at: Option<u64>,
}

/// Snapshot of the detector for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub samples_seen: u64,
    pub window_len: usize,
    pub window_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_null_rate: Option<f64>,
    pub alarm: bool,
    pub insufficient_fill: bool,
    pub first_alarm_at: Option<u64>,
    pub baseline_avg_size: f64,
    pub ratio_threshold: f64,
    pub alarm_level: f64,
}

impl DetectorState {
    pub fn new(model: &CalibrationModel, config: DetectorConfig) -> Result<Self> {
        Self::with_baseline(model.baseline_avg_size(), config)
    }

    pub fn with_baseline(baseline_avg_size: f64, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        if !(baseline_avg_size >= 0.0 && baseline_avg_size.is_finite()) {
            return Err(Error::OutOfRange {
                name: "baseline_avg_size",
                range: "[0, inf)",
                value: baseline_avg_size,
            });
        }
        Ok(Self {
            window: VecDeque::with_capacity(config.window),
            config,
            baseline_avg_size,
            window_sum: 0,
            window_nulls: 0,
            samples_seen: 0,
            alarm: false,
            first_alarm_at: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn alarm(&self) -> bool {
        self.alarm
    }

    /// Window mean above which the alarm fires.
    pub fn alarm_level(&self) -> f64 {
        self.config.ratio_threshold * self.baseline_avg_size.max(self.config.size_floor)
    }

    /// Mean of the retained sizes; 0 before the first update.
    pub fn window_mean(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window_sum as f64 / self.window.len() as f64
        }
    }

    pub fn window(&self) -> impl Iterator<Item = usize> + '_ {
        self.window.iter().copied()
    }

    pub fn update(&mut self, set: &PredictionSet) -> Verdict {
        self.push_size(set.size())
    }

    pub fn push_size(&mut self, size: usize) -> Verdict {
        if self.window.len() == self.config.window {
            let old = self.window.pop_front().expect("window is full");
            self.window_sum -= old as u64;
            self.window_nulls -= u64::from(old == 0);
        }
        self.window.push_back(size);
        self.window_sum += size as u64;
        self.window_nulls += u64::from(size == 0);
        self.samples_seen += 1;

        let firing = self.samples_seen >= self.config.min_fill as u64
            && self.window_mean() > self.alarm_level();
        self.alarm = firing || (self.config.latched && self.alarm);
        if firing && self.first_alarm_at.is_none() {
            self.first_alarm_at = Some(self.samples_seen);
        }
        if self.alarm {
            Verdict::OutOfCalibration
        } else {
            Verdict::Ok
        }
    }

    pub fn summarize(&self) -> DetectorSummary {
        DetectorSummary {
            samples_seen: self.samples_seen,
            window_len: self.window.len(),
            window_mean: self.window_mean(),
            window_null_rate: (self.config.track_null_rate && !self.window.is_empty())
                .then(|| self.window_nulls as f64 / self.window.len() as f64),
            alarm: self.alarm,
            insufficient_fill: self.samples_seen < self.config.min_fill as u64,
            first_alarm_at: self.first_alarm_at,
            baseline_avg_size: self.baseline_avg_size,
            ratio_threshold: self.config.ratio_threshold,
            alarm_level: self.alarm_level(),
        }
    }
}
