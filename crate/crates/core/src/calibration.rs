//! Split-conformal calibration of APS scores.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::aps::{PredictionSet, ProbVector};
use crate::error::{check_unit, Error, Result};
use crate::metrics::SetSizeStats;
use crate::rng::{streams, CounterUniform};

pub const MODEL_FORMAT: &str = "apsmon.calibration";
pub const MODEL_VERSION: u32 = 1;

/// A probability vector with its ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub probs: ProbVector,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(probs: ProbVector, label: usize) -> Result<Self> {
        if label >= probs.class_count() {
            return Err(Error::InvalidLabel {
                label,
                classes: probs.class_count(),
            });
        }
        Ok(Self { probs, label })
    }

    pub fn class_count(&self) -> usize {
        self.probs.class_count()
    }
}

/// 1-based rank `k = ceil((1 - epsilon) (n + 1))` of the calibration score
/// used as the threshold. May exceed `n`.
pub fn order_statistic_index(n: usize, epsilon: f64) -> usize {
    // The epsilon guards products like 0.95 * 20 that land a hair above 19.
    ((1.0 - epsilon) * (n as f64 + 1.0) - 1e-9).ceil().max(1.0) as usize
}

/// Which samples the baseline set-size statistics were measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    Calibration,
    HeldOut,
}

/// Optional knobs for [`calibrate_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CalibrationOptions<'a> {
    /// Measure the baseline on these samples instead of the calibration split.
    pub baseline: Option<&'a [LabeledSample]>,
}

/// Frozen result of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    format: String,
    version: u32,
    epsilon: f64,
    n_cal: usize,
    class_count: usize,
    rng_seed: u64,
    k_index: usize,
    saturated: bool,
    q_threshold: f64,
    baseline_avg_size: f64,
    baseline_null_rate: f64,
    baseline_source: BaselineSource,
    calibration_digest: String,
    /// Softmax temperature applied to logit inputs, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    scores_sorted: Vec<f64>,
}

/// Calibrates on `samples` with the baseline measured on the same split.
pub fn calibrate(samples: &[LabeledSample], epsilon: f64, seed: u64) -> Result<CalibrationModel> {
    calibrate_with(samples, epsilon, seed, CalibrationOptions::default())
}

pub fn calibrate_with(
    samples: &[LabeledSample],
    epsilon: f64,
    seed: u64,
    options: CalibrationOptions<'_>,
) -> Result<CalibrationModel> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            range: "(0, 1)",
            value: epsilon,
        });
    }
    let class_count = common_class_count(samples, "calibration set")?;

    let mut draws = CounterUniform::new(seed, streams::CALIBRATION_SCORES);
    let mut scores = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u = draws.at(i as u64);
            s.probs.rank().score(s.label, u).map(|v| v.value())
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(f64::total_cmp);

    let n = scores.len();
    let k = order_statistic_index(n, epsilon);
    let saturated = k > n;
    let q_threshold = if saturated {
        warn!("calibration set of {n} is too small for epsilon {epsilon} (k = {k}); threshold saturates at 1.0");
        1.0
    } else {
        scores[k - 1]
    };

    let (baseline_samples, baseline_source) = match options.baseline {
        Some(held_out) => {
            let c = common_class_count(held_out, "baseline set")?;
            if c != class_count {
                return Err(Error::ClassCountMismatch {
                    expected: class_count,
                    actual: c,
                });
            }
            (held_out, BaselineSource::HeldOut)
        }
        None => (samples, BaselineSource::Calibration),
    };
    let mut draws = CounterUniform::new(seed, streams::CALIBRATION_BASELINE);
    let mut stats = SetSizeStats::default();
    for (i, s) in baseline_samples.iter().enumerate() {
        stats.push(
            s.probs
                .rank()
                .prediction_set(draws.at(i as u64), q_threshold)
                .size(),
        );
    }

    Ok(CalibrationModel {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        epsilon,
        n_cal: n,
        class_count,
        rng_seed: seed,
        k_index: k,
        saturated,
        q_threshold,
        baseline_avg_size: stats.mean().unwrap_or(0.0),
        baseline_null_rate: stats.null_rate().unwrap_or(0.0),
        baseline_source,
        calibration_digest: dataset_digest(samples),
        temperature: None,
        scores_sorted: scores,
    })
}

fn common_class_count(samples: &[LabeledSample], what: &'static str) -> Result<usize> {
    let first = samples.first().ok_or(Error::Empty(what))?;
    let c = first.class_count();
    for s in samples {
        if s.class_count() != c {
            return Err(Error::ClassCountMismatch {
                expected: c,
                actual: s.class_count(),
            });
        }
        if s.label >= c {
            return Err(Error::InvalidLabel {
                label: s.label,
                classes: c,
            });
        }
    }
    Ok(c)
}

/// FNV-1a over labels and probability bit patterns, hex encoded.
pub fn dataset_digest(samples: &[LabeledSample]) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        eat(&(s.label as u64).to_le_bytes());
        eat(&(s.class_count() as u64).to_le_bytes());
        for p in s.probs.as_slice() {
            eat(&p.to_bits().to_le_bytes());
        }
    }
    format!("{h:016x}")
}

/// How [`CalibrationModel::evaluate`] treats a test set identical to the
/// calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hygiene {
    #[default]
    Strict,
    Warn,
}

/// Coverage and set-size statistics of a labeled test stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub n: usize,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub null_rate: f64,
}

impl CalibrationModel {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_cal(&self) -> usize {
        self.n_cal
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// 1-based order-statistic index behind the threshold.
    pub fn k_index(&self) -> usize {
        self.k_index
    }

    /// True when `k > n` and the threshold fell back to 1.0.
    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn q_threshold(&self) -> f64 {
        self.q_threshold
    }

    pub fn baseline_avg_size(&self) -> f64 {
        self.baseline_avg_size
    }

    pub fn baseline_null_rate(&self) -> f64 {
        self.baseline_null_rate
    }

    pub fn baseline_source(&self) -> BaselineSource {
        self.baseline_source
    }

    pub fn calibration_digest(&self) -> &str {
        &self.calibration_digest
    }

    pub fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    /// Records the temperature used to turn logits into probabilities.
    pub fn with_temperature(mut self, temperature: Option<f64>) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn scores_sorted(&self) -> &[f64] {
        &self.scores_sorted
    }

    /// Test-time APS set at the calibrated threshold.
    pub fn predict_set(&self, probs: &ProbVector, u: f64) -> Result<PredictionSet> {
        self.check_classes(probs.class_count())?;
        check_unit("u", u)?;
        Ok(probs.rank().prediction_set(u, self.q_threshold))
    }

    /// Sets for a whole stream, with the `i`-th record using draw `i` of the
    /// prediction stream for `seed`.
    pub fn predict_all<'a, I>(&self, probs: I, seed: u64) -> Result<Vec<PredictionSet>>
    where
        I: IntoIterator<Item = &'a ProbVector>,
    {
        let mut draws = CounterUniform::new(seed, streams::PREDICTION);
        probs
            .into_iter()
            .enumerate()
            .map(|(i, p)| self.predict_set(p, draws.at(i as u64)))
            .collect()
    }

    /// Fraction of `test` samples whose label lands in its prediction set.
    pub fn empirical_coverage(&self, test: &[LabeledSample], seed: u64) -> Result<f64> {
        self.evaluate(test, seed, Hygiene::Strict)
            .map(|e| e.coverage)
    }

    pub fn evaluate(
        &self,
        test: &[LabeledSample],
        seed: u64,
        hygiene: Hygiene,
    ) -> Result<Evaluation> {
        if test.is_empty() {
            return Err(Error::Empty("test set"));
        }
        if dataset_digest(test) == self.calibration_digest {
            match hygiene {
                Hygiene::Strict => return Err(Error::CalibrationReuse),
                Hygiene::Warn => warn!("evaluating on the calibration set; coverage is optimistic"),
            }
        }
        let mut draws = CounterUniform::new(seed, streams::COVERAGE);
        let mut covered = 0usize;
        let mut stats = SetSizeStats::default();
        for (i, s) in test.iter().enumerate() {
            let set = self.predict_set(&s.probs, draws.at(i as u64))?;
            covered += usize::from(set.contains(s.label));
            stats.push(set.size());
        }
        Ok(Evaluation {
            n: test.len(),
            coverage: covered as f64 / test.len() as f64,
            avg_set_size: stats.mean().unwrap_or(0.0),
            null_rate: stats.null_rate().unwrap_or(0.0),
        })
    }

    fn check_classes(&self, actual: usize) -> Result<()> {
        if actual == self.class_count {
            Ok(())
        } else {
            Err(Error::ClassCountMismatch {
                expected: self.class_count,
                actual,
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Parses a model document and re-checks its invariants.
    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.format != MODEL_FORMAT {
            return bad(format!("unexpected model format {:?}", self.format));
        }
        if self.version != MODEL_VERSION {
            return bad(format!("unsupported model version {}", self.version));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        if self.n_cal == 0 || self.scores_sorted.len() != self.n_cal {
            return bad("scores_sorted length does not match n_cal".into());
        }
        if self.class_count < 2 {
            return bad("class_count below 2".into());
        }
        if self.scores_sorted.windows(2).any(|w| w[0] > w[1]) {
            return bad("scores_sorted is not ascending".into());
        }
        let k = order_statistic_index(self.n_cal, self.epsilon);
        let expected = if k > self.n_cal {
            1.0
        } else {
            self.scores_sorted[k - 1]
        };
        if k != self.k_index || expected != self.q_threshold || (k > self.n_cal) != self.saturated {
            return bad("threshold does not match the stored scores".into());
        }
        if self
            .temperature
            .is_some_and(|t| !(t > 0.0 && t.is_finite()))
        {
            return bad("temperature must be positive".into());
        }
        if !(0.0..=self.class_count as f64).contains(&self.baseline_avg_size)
            || !(0.0..=1.0).contains(&self.baseline_null_rate)
        {
            return bad("baseline statistics out of range".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(p: &[f64], y: usize) -> LabeledSample {
        LabeledSample::new(ProbVector::new(p.to_vec()).unwrap(), y).unwrap()
    }

    fn toy_set(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| {
                let a = 0.5 + 0.45 * ((i * 37 % 101) as f64 / 101.0);
                sample(&[a, (1.0 - a) * 0.7, (1.0 - a) * 0.3], i % 3)
            })
            .collect()
    }

    #[test]
    fn order_statistic_examples() {
        assert_eq!(order_statistic_index(19, 0.05), 19);
        assert_eq!(order_statistic_index(3120, 0.1), 2809);
        assert_eq!(order_statistic_index(4, 0.05), 5);
        assert_eq!(order_statistic_index(2000, 0.1), 1801);
    }

    #[test]
    fn threshold_is_kth_smallest() {
        let data = toy_set(19);
        let m = calibrate(&data, 0.05, 3).unwrap();
        assert_eq!(m.k_index(), 19);
        assert!(!m.is_saturated());
        assert_eq!(m.q_threshold(), *m.scores_sorted().last().unwrap());

        let m = calibrate(&data, 0.5, 3).unwrap();
        assert_eq!(m.k_index(), 10);
        assert_eq!(m.q_threshold(), m.scores_sorted()[9]);
    }

    #[test]
    fn tiny_set_saturates() {
        let m = calibrate(&toy_set(4), 0.05, 1).unwrap();
        assert!(m.is_saturated());
        assert_eq!(m.k_index(), 5);
        assert_eq!(m.q_threshold(), 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(calibrate(&[], 0.1, 0), Err(Error::Empty("calibration set")));
        assert!(matches!(
            calibrate(&toy_set(5), 0.0, 0),
            Err(Error::OutOfRange {
                name: "epsilon",
                ..
            })
        ));
        assert!(calibrate(&toy_set(5), 1.0, 0).is_err());
        let mut mixed = toy_set(5);
        mixed.push(sample(&[0.5, 0.5], 0));
        assert_eq!(
            calibrate(&mixed, 0.1, 0),
            Err(Error::ClassCountMismatch {
                expected: 3,
                actual: 2
            })
        );
        assert!(LabeledSample::new(ProbVector::new(vec![0.5, 0.5]).unwrap(), 2).is_err());
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let data = toy_set(200);
        let a = calibrate(&data, 0.1, 9).unwrap();
        assert_eq!(a, calibrate(&data, 0.1, 9).unwrap());

        // Shuffle while keeping each sample's u attached.
        let mut draws = CounterUniform::new(9, streams::CALIBRATION_SCORES);
        let us = draws.take(data.len());
        let mut scores: Vec<f64> = data
            .iter()
            .zip(&us)
            .rev()
            .map(|(s, &u)| s.probs.rank().score(s.label, u).unwrap().value())
            .collect();
        scores.sort_by(f64::total_cmp);
        assert_eq!(scores[a.k_index() - 1], a.q_threshold());
    }

    #[test]
    fn threshold_monotone_in_epsilon() {
        let data = toy_set(300);
        let qs: Vec<f64> = [0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&e| calibrate(&data, e, 5).unwrap().q_threshold())
            .collect();
        assert!(qs.windows(2).all(|w| w[0] >= w[1]), "{qs:?}");
    }

    #[test]
    fn predict_set_examples() {
        let mut m = calibrate(&toy_set(50), 0.1, 0).unwrap();
        m.q_threshold = 0.9;
        m.class_count = 3;
        let p = ProbVector::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(m.predict_set(&p, 0.7).unwrap().classes(), &[1, 2]);

        m.q_threshold = 1.0;
        for u in [0.0, 0.3, 0.99, 1.0] {
            assert!(m.predict_set(&p, u).unwrap().size() >= 2);
        }

        m.q_threshold = 0.5;
        let one_hot = ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(m.predict_set(&one_hot, 0.05).unwrap().is_empty());

        let wrong = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            m.predict_set(&wrong, 0.1),
            Err(Error::ClassCountMismatch { .. })
        ));
    }

    #[test]
    fn coverage_hygiene() {
        let data = toy_set(100);
        let m = calibrate(&data, 0.1, 0).unwrap();
        assert_eq!(m.empirical_coverage(&data, 1), Err(Error::CalibrationReuse));
        assert!(m.evaluate(&data, 1, Hygiene::Warn).is_ok());
        assert_eq!(m.empirical_coverage(&[], 1), Err(Error::Empty("test set")));
    }

    #[test]
    fn held_out_baseline() {
        let cal = toy_set(100);
        let held = toy_set(37);
        let m = calibrate_with(
            &cal,
            0.1,
            0,
            CalibrationOptions {
                baseline: Some(&held),
            },
        )
        .unwrap();
        assert_eq!(m.baseline_source(), BaselineSource::HeldOut);
        assert!((0.0..=3.0).contains(&m.baseline_avg_size()));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let m = calibrate(&toy_set(123), 0.1, 42).unwrap();
        let back = CalibrationModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.scores_sorted().iter().zip(back.scores_sorted()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_tampered_model() {
        let m = calibrate(&toy_set(50), 0.1, 42).unwrap();
        let text = m.to_json().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            CalibrationModel::from_json(&text),
            Err(Error::Config(_))
        ));
        let mut m2 = m.clone();
        m2.q_threshold += 0.01;
        assert!(CalibrationModel::from_json(&m2.to_json()).is_err());
    }
}
