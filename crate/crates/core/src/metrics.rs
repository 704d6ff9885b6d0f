//! Uncertainty metrics: normalized softmax entropy, largest-softmax
//! histograms, set-size aggregates and scalar temperature scaling.

use serde::{Deserialize, Serialize};

use crate::aps::{PredictionSet, ProbVector};
use crate::error::{Error, Result};

pub const DEFAULT_BIN_COUNT: usize = 50;

/// Shannon entropy divided by `ln C`, with `0 ln 0 = 0`. Lies in `[0, 1]`.
pub fn nse(probs: &ProbVector) -> f64 {
    let p = probs.as_slice();
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Running count, total and null count of prediction-set sizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SetSizeStats {
    count: u64,
    total: u64,
    nulls: u64,
}

impl SetSizeStats {
    pub fn push(&mut self, size: usize) {
        self.count += 1;
        self.total += size as u64;
        self.nulls += u64::from(size == 0);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total as f64 / self.count as f64)
    }

    pub fn null_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.nulls as f64 / self.count as f64)
    }
}

impl<'a> FromIterator<&'a PredictionSet> for SetSizeStats {
    fn from_iter<I: IntoIterator<Item = &'a PredictionSet>>(iter: I) -> Self {
        let mut stats = Self::default();
        iter.into_iter().for_each(|s| stats.push(s.size()));
        stats
    }
}

/// Mean cardinality of the sets.
pub fn avg_set_size(sets: &[PredictionSet]) -> Result<f64> {
    sets.iter()
        .collect::<SetSizeStats>()
        .mean()
        .ok_or(Error::Empty("prediction sets"))
}

/// Fraction of empty sets.
pub fn null_rate(sets: &[PredictionSet]) -> Result<f64> {
    sets.iter()
        .collect::<SetSizeStats>()
        .null_rate()
        .ok_or(Error::Empty("prediction sets"))
}

/// Named vertical reference line on a histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub name: String,
    pub value: f64,
}

impl Marker {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Finished histogram over `[0, 1]` with reference markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_count: usize,
    pub counts: Vec<u64>,
    pub markers: Vec<Marker>,
}

impl HistogramSpec {
    pub fn observations(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(lower, upper)` edges of bin `i`.
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = 1.0 / self.bin_count as f64;
        (i as f64 * w, (i + 1) as f64 * w)
    }

    pub fn marker(&self, name: &str) -> Option<f64> {
        self.markers
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }
}

pub const MEAN_MARKER: &str = "mean_largest_softmax";

/// Accumulates largest-softmax values. Partial accumulators merge
/// associatively, so streams can be split across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct LargestSoftmaxHistogram {
    counts: Vec<u64>,
    sum: f64,
}

impl LargestSoftmaxHistogram {
    pub fn new(bin_count: usize) -> Result<Self> {
        if bin_count == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        Ok(Self {
            counts: vec![0; bin_count],
            sum: 0.0,
        })
    }

    pub fn push(&mut self, probs: &ProbVector) {
        self.push_value(probs.max());
    }

    /// Records an already extracted largest-softmax value in `[0, 1]`.
    pub fn push_value(&mut self, top: f64) {
        let top = top.clamp(0.0, 1.0);
        let bins = self.counts.len();
        let i = ((top * bins as f64) as usize).min(bins - 1);
        self.counts[i] += 1;
        self.sum += top;
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::Config(
                "cannot merge histograms with different bin counts".into(),
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        self.sum += other.sum;
        Ok(())
    }

    pub fn observations(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.observations();
        (n > 0).then(|| self.sum / n as f64)
    }

    /// Attaches `markers` plus the mean-largest-softmax marker.
    pub fn finish(self, markers: &[Marker]) -> Result<HistogramSpec> {
        let mean = self.mean().ok_or(Error::Empty("probability stream"))?;
        if let Some(m) = markers.iter().find(|m| !(0.0..=1.0).contains(&m.value)) {
            return Err(Error::OutOfRange {
                name: "histogram marker",
                range: "[0, 1]",
                value: m.value,
            });
        }
        let mut markers = markers.to_vec();
        markers.push(Marker::new(MEAN_MARKER, mean));
        Ok(HistogramSpec {
            bin_count: self.counts.len(),
            counts: self.counts,
            markers,
        })
    }
}

/// Histogram of the largest entry of every vector in `stream`.
pub fn largest_softmax_histogram<'a, I>(
    stream: I,
    bin_count: usize,
    markers: &[Marker],
) -> Result<HistogramSpec>
where
    I: IntoIterator<Item = &'a ProbVector>,
{
    let mut hist = LargestSoftmaxHistogram::new(bin_count)?;
    stream.into_iter().for_each(|p| hist.push(p));
    hist.finish(markers)
}

/// Raw classifier outputs before the softmax.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::TooFewClasses(logits.len()));
        }
        if let Some((index, &value)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
            return Err(Error::InvalidEntry { index, value });
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn class_count(&self) -> usize {
        self.0.len()
    }

    /// `ln sum exp(z / t)` together with the shifted exponentials.
    fn scaled_exp(&self, temperature: f64) -> (Vec<f64>, f64) {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self
            .0
            .iter()
            .map(|z| ((z - max) / temperature).exp())
            .collect();
        let lse = e.iter().sum::<f64>().ln() + max / temperature;
        (e, lse)
    }
}

impl<'de> Deserialize<'de> for LogitVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        LogitVector::new(Vec::<f64>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "temperature",
            range: "(0, inf)",
            value: t,
        })
    }
}

/// Softmax of `logits / temperature`.
pub fn temperature_apply(logits: &LogitVector, temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    let (e, _) = logits.scaled_exp(temperature);
    let total: f64 = e.iter().sum();
    ProbVector::new(e.into_iter().map(|x| x / total).collect())
}

/// Mean negative log-likelihood of the labels at `temperature`.
pub fn temperature_nll(data: &[(LogitVector, usize)], temperature: f64) -> f64 {
    let total: f64 = data
        .iter()
        .map(|(z, y)| {
            let (_, lse) = z.scaled_exp(temperature);
            lse - z.as_slice()[*y] / temperature
        })
        .sum();
    total / data.len() as f64
}

pub const TEMPERATURE_MIN: f64 = 0.05;
pub const TEMPERATURE_MAX: f64 = 20.0;
const FIT_TOLERANCE: f64 = 1e-4;

/// Scalar temperature minimizing the NLL, by golden-section search on
/// `ln T` over `[ln 0.05, ln 20]`.
pub fn temperature_fit(data: &[(LogitVector, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("temperature fit data"));
    }
    for (z, y) in data {
        if *y >= z.class_count() {
            return Err(Error::InvalidLabel {
                label: *y,
                classes: z.class_count(),
            });
        }
    }
    let f = |log_t: f64| temperature_nll(data, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > FIT_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn nse_examples() {
        for c in [2, 3, 10, 37] {
            assert!((nse(&pv(&vec![1.0 / c as f64; c])) - 1.0).abs() < 1e-12);
        }
        assert_eq!(nse(&pv(&[1.0, 0.0, 0.0])), 0.0);
        assert!((nse(&pv(&[0.5, 0.5, 0.0, 0.0])) - 0.5).abs() < 1e-12);
        // Permutation invariance.
        let a = nse(&pv(&[0.1, 0.6, 0.3]));
        let b = nse(&pv(&[0.3, 0.1, 0.6]));
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn set_size_aggregates() {
        let sets: Vec<PredictionSet> = [vec![0], vec![1], vec![0, 2]]
            .into_iter()
            .map(PredictionSet::new)
            .collect();
        assert!((avg_set_size(&sets).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(null_rate(&sets).unwrap(), 0.0);

        let empty = vec![PredictionSet::default(); 5];
        assert_eq!(avg_set_size(&empty).unwrap(), 0.0);
        assert_eq!(null_rate(&empty).unwrap(), 1.0);

        assert!(avg_set_size(&[]).is_err());
        assert!(null_rate(&[]).is_err());
    }

    #[test]
    fn histogram_spikes() {
        let one_hot = vec![pv(&[0.0, 1.0, 0.0]); 7];
        let h = largest_softmax_histogram(&one_hot, DEFAULT_BIN_COUNT, &[]).unwrap();
        assert_eq!(h.counts[DEFAULT_BIN_COUNT - 1], 7);
        assert_eq!(h.observations(), 7);
        assert_eq!(h.marker(MEAN_MARKER), Some(1.0));

        let uniform = vec![pv(&[0.1; 10]); 4];
        let h = largest_softmax_histogram(&uniform, 50, &[Marker::new("q", 0.9)]).unwrap();
        let (lo, hi) = h.bin_edges(5);
        assert_eq!(h.counts[5], 4);
        assert!(lo <= 0.1 && 0.1 < hi);
        assert_eq!(h.marker("q"), Some(0.9));
    }

    #[test]
    fn histogram_errors() {
        assert!(largest_softmax_histogram(std::iter::empty(), 10, &[]).is_err());
        assert!(LargestSoftmaxHistogram::new(0).is_err());
        let data = [pv(&[0.5, 0.5])];
        assert!(largest_softmax_histogram(&data, 10, &[Marker::new("bad", 1.5)]).is_err());
    }

    #[test]
    fn histogram_merge_conserves_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<ProbVector> = (0..500)
            .map(|_| {
                let a: f64 = rng.random();
                pv(&[a, 1.0 - a])
            })
            .collect();
        let mut left = LargestSoftmaxHistogram::new(20).unwrap();
        let mut right = LargestSoftmaxHistogram::new(20).unwrap();
        data[..123].iter().for_each(|p| left.push(p));
        data[123..].iter().for_each(|p| right.push(p));
        let mut lr = left.clone();
        lr.merge(&right).unwrap();
        let mut rl = right.clone();
        rl.merge(&left).unwrap();
        assert_eq!(lr.counts, rl.counts);
        assert_eq!(lr.observations(), 500);
        let whole = largest_softmax_histogram(&data, 20, &[]).unwrap();
        assert_eq!(whole.counts, lr.counts);
        assert!(lr.merge(&LargestSoftmaxHistogram::new(3).unwrap()).is_err());
    }

    #[test]
    fn temperature_basics() {
        let z = LogitVector::new(vec![1.0, 3.0, -2.0, 0.5]).unwrap();
        let p = temperature_apply(&z, 1.0).unwrap();
        let e: Vec<f64> = z.as_slice().iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.as_slice().iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-15);
        }
        for t in [0.05, 0.3, 1.0, 7.0, 1e3] {
            let q = temperature_apply(&z, t).unwrap();
            assert_eq!(q.rank().order(), p.rank().order());
        }
        assert!((nse(&temperature_apply(&z, 1e3).unwrap()) - 1.0).abs() < 1e-3);
        assert!(temperature_apply(&z, 0.0).is_err());
        assert!(temperature_apply(&z, -1.0).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn nse_non_decreasing_in_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c = rng.random_range(2..12);
            let z =
                LogitVector::new((0..c).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap();
            let mut prev = 0.0;
            for t in [0.05, 0.1, 0.3, 0.7, 1.0, 2.0, 5.0, 20.0, 100.0] {
                let h = nse(&temperature_apply(&z, t).unwrap());
                assert!(h >= prev - 1e-12);
                prev = h;
            }
        }
    }

    #[test]
    fn fit_recovers_unit_temperature_for_calibrated_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<(LogitVector, usize)> = (0..4000)
            .map(|_| {
                let raw: Vec<f64> = (0..5).map(|_| rng.random_range(-2.5..2.5)).collect();
                let z = LogitVector::new(raw).unwrap();
                let post = temperature_apply(&z, 1.0).unwrap();
                // Labels drawn from the true posterior.
                let mut u: f64 = rng.random();
                let mut y = post.class_count() - 1;
                for (c, &p) in post.as_slice().iter().enumerate() {
                    if u < p {
                        y = c;
                        break;
                    }
                    u -= p;
                }
                // Logits are the log posterior, up to a constant.
                let log_post: Vec<f64> = post.as_slice().iter().map(|p| p.ln()).collect();
                (LogitVector::new(log_post).unwrap(), y)
            })
            .collect();
        let t = temperature_fit(&data).unwrap();
        assert!((0.9..=1.1).contains(&t), "fitted T = {t}");
    }

    #[test]
    fn fit_detects_overconfidence() {
        // Logits scaled up 3x relative to the true posterior.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<(LogitVector, usize)> = (0..3000)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
                let post = temperature_apply(&LogitVector::new(raw.clone()).unwrap(), 1.0).unwrap();
                let mut u: f64 = rng.random();
                let mut y = 3;
                for (c, &p) in post.as_slice().iter().enumerate() {
                    if u < p {
                        y = c;
                        break;
                    }
                    u -= p;
                }
                (
                    LogitVector::new(raw.iter().map(|x| 3.0 * x).collect()).unwrap(),
                    y,
                )
            })
            .collect();
        let t = temperature_fit(&data).unwrap();
        assert!((2.4..=3.6).contains(&t), "fitted T = {t}");
        assert!(temperature_fit(&[]).is_err());
    }
}
