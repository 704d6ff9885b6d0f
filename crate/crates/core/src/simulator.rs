//! Synthetic classifier families.
//!
//! Each profile turns a clean/noisy severity level (0..=5) into a stream of
//! softmax-like vectors with ground-truth labels. Noise is modeled directly
//! on the output distribution:
//!
//! * `uncertain`: the predicted class draws a Dirichlet weight that shrinks
//!   with severity, so vectors flatten as noise grows.
//! * `overconfident`: the predicted class always receives a fixed large mass
//!   regardless of whether it is right.
//! * `intermediate`: Dirichlet like `uncertain`, with the predicted class
//!   never falling below a mass floor.
//!
//! All profiles lose top-1 accuracy with severity along `accuracy_curve`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::aps::ProbVector;
use crate::calibration::{calibrate, CalibrationModel, Hygiene, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::nse;
use crate::rng::derive_seed;

pub const SEVERITY_LEVELS: usize = 6;
pub const MAX_SEVERITY: u8 = 5;

pub type Curve = [f64; SEVERITY_LEVELS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Uncertain,
    Intermediate,
    Overconfident,
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertain" => Ok(Self::Uncertain),
            "intermediate" => Ok(Self::Intermediate),
            "overconfident" => Ok(Self::Overconfident),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Parameters of a synthetic model family, one entry per severity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub kind: ProfileKind,
    pub class_count: usize,
    pub accuracy_curve: Curve,
    /// Weight of the predicted class in the Dirichlet draw; the predicted
    /// class gets shape `alpha * (C - 1)`. Uncertain and intermediate only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concentration_curve: Option<Curve>,
    /// Mass on the predicted class (overconfident) or its lower bound
    /// (intermediate).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_mass_curve: Option<Curve>,
    /// Dirichlet shape of every non-predicted class.
    #[serde(default = "default_background")]
    pub background_concentration: f64,
}

fn default_background() -> f64 {
    0.5
}

const DEFAULT_ACCURACY: Curve = [0.97, 0.75, 0.55, 0.42, 0.33, 0.28];

impl ModelProfile {
    pub fn uncertain(class_count: usize) -> Self {
        Self {
            kind: ProfileKind::Uncertain,
            class_count,
            accuracy_curve: DEFAULT_ACCURACY,
            concentration_curve: Some([8.0, 2.0, 1.0, 0.7, 0.5, 0.45]),
            top_mass_curve: None,
            background_concentration: default_background(),
        }
    }

    pub fn intermediate(class_count: usize) -> Self {
        Self {
            kind: ProfileKind::Intermediate,
            class_count,
            accuracy_curve: DEFAULT_ACCURACY,
            concentration_curve: Some([8.0, 4.0, 2.0, 1.0, 0.5, 0.25]),
            top_mass_curve: Some([0.9; SEVERITY_LEVELS]),
            background_concentration: default_background(),
        }
    }

    pub fn overconfident(class_count: usize) -> Self {
        Self {
            kind: ProfileKind::Overconfident,
            class_count,
            accuracy_curve: DEFAULT_ACCURACY,
            concentration_curve: None,
            top_mass_curve: Some([0.99; SEVERITY_LEVELS]),
            background_concentration: default_background(),
        }
    }

    pub fn preset(kind: ProfileKind, class_count: usize) -> Self {
        match kind {
            ProfileKind::Uncertain => Self::uncertain(class_count),
            ProfileKind::Intermediate => Self::intermediate(class_count),
            ProfileKind::Overconfident => Self::overconfident(class_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let c = self.class_count;
        if c < 2 {
            return Err(Error::TooFewClasses(c));
        }
        let chance = 1.0 / c as f64;
        if self
            .accuracy_curve
            .iter()
            .any(|&a| !(a > chance && a <= 1.0))
        {
            return bad(format!(
                "accuracy_curve entries must lie in (1/C, 1] = ({chance}, 1]"
            ));
        }
        if self.accuracy_curve.windows(2).any(|w| w[1] > w[0]) {
            return bad("accuracy_curve must be non-increasing in severity".into());
        }
        if !(self.background_concentration > 0.0 && self.background_concentration.is_finite()) {
            return bad("background_concentration must be positive".into());
        }
        let top_mass_ok =
            |curve: &Curve, min: f64| curve.iter().all(|&m| m > chance && m < 1.0 && m >= min);
        match (self.kind, &self.concentration_curve, &self.top_mass_curve) {
            (ProfileKind::Uncertain, Some(alpha), None) => check_concentration(alpha),
            (ProfileKind::Intermediate, Some(alpha), Some(floor)) => {
                check_concentration(alpha)?;
                if top_mass_ok(floor, 0.0) {
                    Ok(())
                } else {
                    bad("top_mass_curve entries must lie in (1/C, 1)".into())
                }
            }
            (ProfileKind::Overconfident, None, Some(top)) => {
                if top_mass_ok(top, 0.95) {
                    Ok(())
                } else {
                    bad("overconfident top_mass_curve entries must lie in [0.95, 1)".into())
                }
            }
            (kind, _, _) => bad(format!("curve set does not match profile kind {kind:?}")),
        }
    }
}

fn check_concentration(alpha: &Curve) -> Result<()> {
    if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Config(
            "concentration_curve entries must be positive".into(),
        ));
    }
    if alpha.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "concentration_curve must be strictly decreasing in severity".into(),
        ));
    }
    Ok(())
}

/// One synthetic stream at a fixed severity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub profile: ModelProfile,
    pub severity: u8,
    pub count: usize,
    pub seed: u64,
}

/// IID generator of labeled vectors for one profile and severity.
pub struct SampleStream {
    profile: ModelProfile,
    accuracy: f64,
    shapes: Option<(Gamma<f64>, Gamma<f64>)>,
    top_mass: Option<f64>,
    rng: ChaCha8Rng,
}

impl SampleStream {
    pub fn new(profile: &ModelProfile, severity: u8, seed: u64) -> Result<Self> {
        profile.validate()?;
        if severity > MAX_SEVERITY {
            return Err(Error::OutOfRange {
                name: "severity",
                range: "0..=5",
                value: f64::from(severity),
            });
        }
        let s = usize::from(severity);
        let shapes = profile
            .concentration_curve
            .map(|alpha| {
                let top = alpha[s] * (profile.class_count - 1) as f64;
                let gamma =
                    |shape: f64| Gamma::new(shape, 1.0).map_err(|e| Error::Config(e.to_string()));
                Ok::<_, Error>((gamma(top)?, gamma(profile.background_concentration)?))
            })
            .transpose()?;
        Ok(Self {
            accuracy: profile.accuracy_curve[s],
            top_mass: profile.top_mass_curve.map(|m| m[s]),
            shapes,
            profile: profile.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(&mut self) -> LabeledSample {
        let c = self.profile.class_count;
        let label = self.rng.random_range(0..c);
        let predicted = if self.rng.random::<f64>() < self.accuracy {
            label
        } else {
            (label + 1 + self.rng.random_range(0..c - 1)) % c
        };

        let mut p = match self.shapes {
            Some((top, background)) => {
                let mut g: Vec<f64> = (0..c)
                    .map(|k| {
                        if k == predicted {
                            top.sample(&mut self.rng)
                        } else {
                            background.sample(&mut self.rng)
                        }
                    })
                    .collect();
                let total: f64 = g.iter().sum();
                g.iter_mut().for_each(|x| *x /= total);
                // Move the largest mass onto the predicted class.
                let argmax = (0..c)
                    .max_by(|&a, &b| g[a].total_cmp(&g[b]).then(b.cmp(&a)))
                    .unwrap_or(predicted);
                g.swap(predicted, argmax);
                if let Some(floor) = self.top_mass {
                    lift_to_floor(&mut g, predicted, floor);
                }
                g
            }
            None => {
                let m = self.top_mass.expect("validated profile has a top mass");
                let rest = (1.0 - m) / (c - 1) as f64;
                (0..c)
                    .map(|k| if k == predicted { m } else { rest })
                    .collect()
            }
        };
        // Guard against a total that drifted after the float arithmetic above.
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        let probs = ProbVector::new(p).expect("simulator emits valid vectors");
        LabeledSample { probs, label }
    }
}

fn lift_to_floor(p: &mut [f64], top: usize, floor: f64) {
    if p[top] >= floor {
        return;
    }
    let rest = 1.0 - p[top];
    let scale = if rest > 0.0 {
        (1.0 - floor) / rest
    } else {
        0.0
    };
    p.iter_mut().for_each(|x| *x *= scale);
    p[top] = floor;
}

impl Iterator for SampleStream {
    type Item = LabeledSample;

    fn next(&mut self) -> Option<LabeledSample> {
        Some(self.draw())
    }
}

/// Draws `spec.count` labeled vectors.
pub fn sample(spec: &StreamSpec) -> Result<Vec<LabeledSample>> {
    if spec.count == 0 {
        return Err(Error::Empty("stream spec count"));
    }
    Ok(SampleStream::new(&spec.profile, spec.severity, spec.seed)?
        .take(spec.count)
        .collect())
}

/// Concatenated stream of `(severity, count)` segments, each with its own
/// derived seed. Used to model a model whose inputs degrade mid-stream.
pub fn sample_segments(
    profile: &ModelProfile,
    segments: &[(u8, usize)],
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if segments.is_empty() {
        return Err(Error::Empty("segment list"));
    }
    let mut out = Vec::with_capacity(segments.iter().map(|s| s.1).sum());
    for (i, &(severity, count)) in segments.iter().enumerate() {
        let stream = SampleStream::new(profile, severity, derive_seed(seed, i as u64))?;
        out.extend(stream.take(count));
    }
    Ok(out)
}

/// One cell of a severity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub severity: u8,
    pub q_threshold: f64,
    pub avg_set_size: f64,
    pub null_rate: f64,
    pub coverage: f64,
}

const CAL_TAG: u64 = 0x0ca1;
const TEST_TAG: u64 = 0x7e57;
const U_TAG: u64 = 0x00d5;

/// Calibrates on clean data once per epsilon and evaluates the same test
/// streams at every severity. Rows are ordered by epsilon, then severity.
pub fn severity_sweep(
    profile: &ModelProfile,
    epsilons: &[f64],
    n_cal: usize,
    n_test: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if epsilons.is_empty() {
        return Err(Error::Empty("epsilon list"));
    }
    if n_cal < 100 || n_test < 100 {
        return Err(Error::Config(
            "severity sweep needs n_cal, n_test >= 100".into(),
        ));
    }
    let cal = sample(&StreamSpec {
        profile: profile.clone(),
        severity: 0,
        count: n_cal,
        seed: derive_seed(seed, CAL_TAG),
    })?;
    let tests = (0..=MAX_SEVERITY)
        .map(|severity| {
            sample(&StreamSpec {
                profile: profile.clone(),
                severity,
                count: n_test,
                seed: derive_seed(seed, TEST_TAG + u64::from(severity)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let u_seed = derive_seed(seed, U_TAG);

    let mut rows = Vec::with_capacity(epsilons.len() * SEVERITY_LEVELS);
    for &epsilon in epsilons {
        let model = calibrate(&cal, epsilon, seed)?;
        for (severity, test) in tests.iter().enumerate() {
            rows.push(sweep_row(&model, severity as u8, test, u_seed)?);
        }
    }
    Ok(rows)
}

fn sweep_row(
    model: &CalibrationModel,
    severity: u8,
    test: &[LabeledSample],
    u_seed: u64,
) -> Result<SweepRow> {
    let e = model.evaluate(test, u_seed, Hygiene::Strict)?;
    Ok(SweepRow {
        epsilon: model.epsilon(),
        severity,
        q_threshold: model.q_threshold(),
        avg_set_size: e.avg_set_size,
        null_rate: e.null_rate,
        coverage: e.coverage,
    })
}

/// Mean NSE and mean largest softmax at one severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub severity: u8,
    pub mean_nse: f64,
    pub mean_largest_softmax: f64,
}

pub const DEFAULT_ENTROPY_DRAWS: usize = 10_000;

/// Mean normalized softmax entropy per severity over `draws` vectors.
pub fn entropy_sweep(profile: &ModelProfile, seed: u64, draws: usize) -> Result<Vec<EntropyRow>> {
    if draws == 0 {
        return Err(Error::Empty("entropy sweep draws"));
    }
    (0..=MAX_SEVERITY)
        .map(|severity| {
            let stream =
                SampleStream::new(profile, severity, derive_seed(seed, u64::from(severity)))?;
            let (mut h, mut top) = (0.0, 0.0);
            for s in stream.take(draws) {
                h += nse(&s.probs);
                top += s.probs.max();
            }
            Ok(EntropyRow {
                severity,
                mean_nse: h / draws as f64,
                mean_largest_softmax: top / draws as f64,
            })
        })
        .collect()
}
