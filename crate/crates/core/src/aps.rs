//! Adaptive prediction sets (APS).
//!
//! Classes are ranked by descending estimated probability and accumulated
//! until the cumulative mass reaches a level `gamma`. The boundary class is
//! kept or dropped at random through the uniform draw `u`, which makes the
//! conformity score continuous and the resulting sets as small as possible at
//! the requested coverage.
//!
//! Class indices are 0-based everywhere in this crate. Counts such as the
//! quantile `L` are 1-based cardinalities.
//!
//! Everything here is a pure function of its inputs; callers own the RNG.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};

/// Largest deviation of `sum(probs)` from 1 that is silently renormalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Slack applied when comparing a cumulative mass against `gamma`.
///
/// Partial sums such as `0.7 + 0.2` land one ulp below `0.9`; without the
/// slack the level `0.9` would need a third class.
pub const MASS_TOLERANCE: f64 = 1e-13;

/// Estimated class-probability vector of a classifier (typically its softmax).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and, if the total is within [`NORMALIZATION_TOLERANCE`] of
    /// one, renormalizes the vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::TooFewClasses(probs.len()));
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidEntry { index, value });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::NotNormalized { sum });
        }
        let mut probs = probs;
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self(probs))
    }

    pub fn class_count(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry (lowest index on ties).
    pub fn argmax(&self) -> usize {
        self.rank().order[0]
    }

    /// Largest entry.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn rank(&self) -> RankedView {
        rank(self)
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        ProbVector::new(raw).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Descending order statistic of a [`ProbVector`] with its partial sums.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedView {
    order: Vec<usize>,
    sorted: Vec<f64>,
    cumsum: Vec<f64>,
}

/// Sorts classes by descending probability, ties by ascending class index.
pub fn rank(probs: &ProbVector) -> RankedView {
    let p = probs.as_slice();
    let mut order: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps ascending index order among equal probabilities.
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let sorted: Vec<f64> = order.iter().map(|&c| p[c]).collect();
    let cumsum = sorted
        .iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    RankedView {
        order,
        sorted,
        cumsum,
    }
}

impl RankedView {
    pub fn class_count(&self) -> usize {
        self.order.len()
    }

    /// Class indices from most to least probable.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Probabilities in descending order.
    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// `cumsum()[k]` is the mass of the `k + 1` most probable classes.
    pub fn cumsum(&self) -> &[f64] {
        &self.cumsum
    }

    /// 0-based position of `class` in the descending order.
    pub fn position_of(&self, class: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == class)
    }

    /// Smallest number of top classes whose cumulative mass reaches `gamma`.
    ///
    /// Always in `1..=C`; `gamma = 0` gives 1.
    pub fn quantile_count(&self, gamma: f64) -> usize {
        self.cumsum
            .iter()
            .position(|&mass| mass >= gamma - MASS_TOLERANCE)
            .map_or(self.class_count(), |i| i + 1)
    }

    /// Randomization threshold `(mass of top L - gamma) / p_(L)`.
    ///
    /// Clamped to `[0, 1]`. A zero `p_(L)` yields 0 so the boundary class is
    /// never dropped.
    pub fn gamma_excess(&self, count: usize, gamma: f64) -> f64 {
        assert!(
            (1..=self.class_count()).contains(&count),
            "quantile count {count} outside 1..={}",
            self.class_count()
        );
        let boundary = self.sorted[count - 1];
        if boundary <= 0.0 {
            return 0.0;
        }
        ((self.cumsum[count - 1] - gamma) / boundary).clamp(0.0, 1.0)
    }

    /// APS set at level `gamma` for the uniform draw `u`.
    pub fn prediction_set(&self, u: f64, gamma: f64) -> PredictionSet {
        let count = self.quantile_count(gamma);
        let excess = self.gamma_excess(count, gamma);
        let size = if u <= excess { count - 1 } else { count };
        PredictionSet {
            classes: self.order[..size].to_vec(),
        }
    }

    /// Closed-form APS conformity score of `label`: the mass of every class
    /// ranked at or above it, minus `u` times its own probability.
    pub fn score(&self, label: usize, u: f64) -> Result<ConformityScore> {
        let pos = self.position_of(label).ok_or(Error::InvalidLabel {
            label,
            classes: self.class_count(),
        })?;
        let value = self.cumsum[pos] - u * self.sorted[pos];
        Ok(ConformityScore(value.clamp(0.0, 1.0)))
    }
}

/// Convenience wrapper over [`RankedView::quantile_count`].
pub fn quantile_count(ranked: &RankedView, gamma: f64) -> Result<usize> {
    check_unit("gamma", gamma)?;
    Ok(ranked.quantile_count(gamma))
}

/// Convenience wrapper over [`RankedView::gamma_excess`].
pub fn gamma_excess(ranked: &RankedView, count: usize, gamma: f64) -> f64 {
    ranked.gamma_excess(count, gamma)
}

/// Builds the APS prediction set of `probs` at level `gamma` for draw `u`.
pub fn prediction_set(probs: &ProbVector, u: f64, gamma: f64) -> Result<PredictionSet> {
    check_unit("u", u)?;
    check_unit("gamma", gamma)?;
    Ok(probs.rank().prediction_set(u, gamma))
}

/// APS conformity score: the smallest level whose set contains `label`.
pub fn conformity_score(probs: &ProbVector, label: usize, u: f64) -> Result<ConformityScore> {
    check_unit("u", u)?;
    probs.rank().score(label, u)
}

/// Possibly empty set of class indices, most probable first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    classes: Vec<usize>,
}

impl PredictionSet {
    pub fn new(classes: Vec<usize>) -> Self {
        Self { classes }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }

    /// Total probability mass of the member classes.
    pub fn mass(&self, probs: &ProbVector) -> f64 {
        self.classes.iter().map(|&c| probs.as_slice()[c]).sum()
    }
}

/// APS conformity score, always in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConformityScore(f64);

impl ConformityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}
