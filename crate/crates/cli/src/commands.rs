use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use apsmon::calibration::{calibrate_with, CalibrationModel, CalibrationOptions, LabeledSample};
use apsmon::detector::{DetectorConfig, DetectorState};
use apsmon::io::{self as records, MonitorRecord, PredictionRecord, SampleRecord, Scores};
use apsmon::metrics::{nse, temperature_fit, LargestSoftmaxHistogram, LogitVector, Marker};
use apsmon::simulator::{self, ModelProfile, ProfileKind};
use apsmon::{Error, ProbVector};
use log::{info, warn};
use serde::Serialize;

use crate::config::{RunConfig, TemperatureMode};
use crate::exit::{CliError, CliResult, EXIT_SATURATED};
use crate::{
    CalibrateArgs, EntryArgs, HistogramArgs, MonitorArgs, MonitorReportArgs, PredictArgs,
    ReportCommand, SimulateArgs, SweepArgs,
};

const DEFAULT_SEED: u64 = 0;

fn open_in(path: Option<&Path>) -> CliResult<Box<dyn Read>> {
    match path {
        Some(p) if p != Path::new("-") => {
            let f = File::open(p)
                .map_err(|e| CliError::parse(format!("cannot open {}: {e}", p.display())))?;
            Ok(Box::new(f))
        }
        _ => Ok(Box::new(io::stdin())),
    }
}

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => {
            let f = File::create(p)
                .map_err(|e| CliError::constraint(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

fn read_input(path: Option<&Path>) -> CliResult<Vec<SampleRecord>> {
    Ok(records::read_records(BufReader::new(open_in(path)?))?)
}

fn load_model(path: &Path) -> CliResult<CalibrationModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::parse(format!("cannot read model {}: {e}", path.display())))?;
    Ok(CalibrationModel::from_json(&text)?)
}

fn write_line<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult<()> {
    let line = serde_json::to_string(value).map_err(CliError::constraint)?;
    writeln!(out, "{line}")?;
    Ok(())
}

fn resolve_profile(name: &str, classes: usize, config: &RunConfig) -> CliResult<ModelProfile> {
    let profile = match &config.profile {
        Some(p) => p.clone(),
        None => ModelProfile::preset(name.parse::<ProfileKind>()?, classes),
    };
    profile.validate()?;
    Ok(profile)
}

fn parse_segments(text: &str) -> CliResult<Vec<(u8, usize)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|seg| {
            let (sev, count) = seg
                .split_once(':')
                .ok_or_else(|| CliError::parse(format!("segment {seg:?} is not SEVERITY:COUNT")))?;
            let sev = sev.trim().parse::<u8>();
            let count = count.trim().parse::<usize>();
            match (sev, count) {
                (Ok(s), Ok(c)) => Ok((s, c)),
                _ => Err(CliError::parse(format!(
                    "segment {seg:?} is not SEVERITY:COUNT"
                ))),
            }
        })
        .collect()
}

pub fn simulate(args: SimulateArgs, config: &RunConfig) -> CliResult<()> {
    let profile = resolve_profile(&args.profile, args.classes, config)?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let samples = match &args.segments {
        Some(text) => {
            let segments = parse_segments(text)?;
            simulator::sample_segments(&profile, &segments, seed)?
        }
        None => simulator::sample(&simulator::StreamSpec {
            profile,
            severity: args.severity,
            count: args.count.unwrap_or(0),
            seed,
        })?,
    };
    let mut out = open_out(args.out.as_deref().or(config.output.as_deref()))?;
    for s in &samples {
        writeln!(out, "{}", SampleRecord::from_sample(s, None).to_json_line())?;
    }
    out.flush()?;
    Ok(())
}

/// Converts records to probability vectors under `temperature`.
fn to_probs(recs: &[SampleRecord], temperature: Option<f64>) -> CliResult<Vec<ProbVector>> {
    Ok(recs
        .iter()
        .map(|r| r.scores()?.to_probs(temperature))
        .collect::<Result<Vec<_>, Error>>()?)
}

fn labeled(recs: &[SampleRecord], temperature: Option<f64>) -> CliResult<Vec<LabeledSample>> {
    let probs = to_probs(recs, temperature)?;
    recs.iter()
        .zip(probs)
        .enumerate()
        .map(|(i, (r, p))| {
            let label = r
                .label
                .ok_or_else(|| CliError::constraint(format!("record {} has no label", i + 1)))?;
            Ok(LabeledSample::new(p, label)?)
        })
        .collect()
}

fn fit_temperature(recs: &[SampleRecord]) -> CliResult<f64> {
    let data = recs
        .iter()
        .filter_map(|r| match (r.scores(), r.label) {
            (Ok(Scores::Logits(z)), Some(y)) => Some((z, y)),
            _ => None,
        })
        .collect::<Vec<(LogitVector, usize)>>();
    if data.is_empty() {
        return Err(CliError::constraint(
            "--temperature fit needs labeled logit records",
        ));
    }
    Ok(temperature_fit(&data)?)
}

#[derive(Serialize)]
struct CalibrationReport {
    n: usize,
    epsilon: f64,
    k_index: usize,
    saturated: bool,
    q_threshold: f64,
    baseline_avg_size: f64,
    baseline_null_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

pub fn calibrate(args: CalibrateArgs, config: &RunConfig) -> CliResult<()> {
    let epsilon = args
        .epsilon
        .or(config.epsilon)
        .ok_or_else(|| CliError::constraint("--epsilon is required"))?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let recs = read_input(args.input.as_deref().or(config.input.as_deref()))?;
    let has_logits = recs.iter().any(|r| r.logits.is_some());

    let temperature = match args
        .temperature
        .or(config.temperature)
        .unwrap_or(TemperatureMode::Off)
    {
        TemperatureMode::Off => None,
        TemperatureMode::Fixed(t) => Some(t),
        TemperatureMode::Fit => Some(fit_temperature(&recs)?),
        TemperatureMode::Model => {
            return Err(CliError::constraint(
                "calibrate accepts --temperature off, fit or a number",
            ))
        }
    };
    let samples = labeled(&recs, temperature)?;
    let baseline = match &args.baseline_input {
        Some(p) => Some(labeled(&read_input(Some(p))?, temperature)?),
        None => None,
    };
    let model = calibrate_with(
        &samples,
        epsilon,
        seed,
        CalibrationOptions {
            baseline: baseline.as_deref(),
        },
    )?
    .with_temperature(temperature.filter(|_| has_logits));

    if model.is_saturated() && args.strict {
        return Err(CliError {
            code: EXIT_SATURATED,
            error: anyhow::anyhow!(
                "threshold saturated: k = {} exceeds N = {}",
                model.k_index(),
                model.n_cal()
            ),
        });
    }

    let report = CalibrationReport {
        n: model.n_cal(),
        epsilon,
        k_index: model.k_index(),
        saturated: model.is_saturated(),
        q_threshold: model.q_threshold(),
        baseline_avg_size: model.baseline_avg_size(),
        baseline_null_rate: model.baseline_null_rate(),
        temperature: model.temperature(),
    };
    let out_path = args.out.as_deref().or(config.output.as_deref());
    let mut out = open_out(out_path)?;
    writeln!(out, "{}", model.to_json())?;
    out.flush()?;
    let line = serde_json::to_string(&report).map_err(CliError::constraint)?;
    if out_path.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

fn inference_temperature(
    mode: Option<TemperatureMode>,
    model: &CalibrationModel,
) -> CliResult<Option<f64>> {
    match mode.unwrap_or(TemperatureMode::Model) {
        TemperatureMode::Model => Ok(model.temperature()),
        TemperatureMode::Off => Ok(None),
        TemperatureMode::Fixed(t) => Ok(Some(t)),
        TemperatureMode::Fit => Err(CliError::constraint(
            "fitting needs labels; use --temperature model to reuse the calibrated value",
        )),
    }
}

pub fn predict(args: PredictArgs, config: &RunConfig) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let recs = read_input(args.input.as_deref().or(config.input.as_deref()))?;
    let temperature = inference_temperature(args.temperature.or(config.temperature), &model)?;
    let probs = to_probs(&recs, temperature)?;
    let sets = model.predict_all(&probs, seed)?;

    let mut out = open_out(args.out.as_deref().or(config.output.as_deref()))?;
    for (index, ((r, p), set)) in recs.iter().zip(&probs).zip(&sets).enumerate() {
        let rec = PredictionRecord {
            id: r.id.clone(),
            index,
            epsilon: model.epsilon(),
            set: set.classes().to_vec(),
            size: set.size(),
            set_mass: set.mass(p),
            largest_softmax: p.max(),
            nse: nse(p),
            label: r.label,
            covered: r.label.map(|y| set.contains(y)),
        };
        write_line(&mut out, &rec)?;
    }
    out.flush()?;
    info!("wrote {} prediction records", sets.len());
    Ok(())
}

pub fn monitor(args: MonitorArgs, config: &RunConfig) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let window = args.window.or(config.window).unwrap_or(500);
    let mut detector = DetectorConfig::with_window(window);
    if let Some(rho) = args.ratio_threshold.or(config.ratio_threshold) {
        detector.ratio_threshold = rho;
    }
    if let Some(fill) = args.min_fill.or(config.min_fill) {
        detector.min_fill = fill;
    }
    if let Some(floor) = args.size_floor.or(config.size_floor) {
        detector.size_floor = floor;
    }
    detector.latched = args.latched;
    detector.track_null_rate = !args.no_null_rate;
    let mut state = DetectorState::new(&model, detector)?;

    let recs = read_input(args.input.as_deref().or(config.input.as_deref()))?;
    let temperature = inference_temperature(args.temperature.or(config.temperature), &model)?;
    let probs = to_probs(&recs, temperature)?;
    let sets = model.predict_all(&probs, seed)?;

    let mut out = open_out(args.out.as_deref().or(config.output.as_deref()))?;
    let mut was_alarmed = false;
    for (index, set) in sets.iter().enumerate() {
        let verdict = state.update(set);
        if state.alarm() != was_alarmed {
            warn!(
                "sample {index}: alarm {}",
                if state.alarm() { "raised" } else { "cleared" }
            );
            was_alarmed = state.alarm();
        }
        if !args.summary_only {
            write_line(
                &mut out,
                &MonitorRecord::Verdict {
                    index: index as u64,
                    size: set.size(),
                    window_mean: state.window_mean(),
                    verdict,
                },
            )?;
        }
    }
    write_line(&mut out, &MonitorRecord::Summary(state.summarize()))?;
    out.flush()?;
    Ok(())
}

fn parse_entry(entry: &str) -> CliResult<(u8, PathBuf)> {
    let (sev, path) = entry
        .split_once('=')
        .ok_or_else(|| CliError::parse(format!("entry {entry:?} is not SEVERITY=PATH")))?;
    let sev = sev
        .trim()
        .parse::<u8>()
        .map_err(|_| CliError::parse(format!("bad severity in entry {entry:?}")))?;
    Ok((sev, PathBuf::from(path)))
}

fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRecord>> {
    Ok(records::read_json_lines(BufReader::new(open_in(Some(
        path,
    ))?))?)
}

fn load_entries(args: &EntryArgs) -> CliResult<Vec<(u8, Vec<PredictionRecord>)>> {
    if args.entries.is_empty() {
        return Err(CliError::constraint("report needs at least one --entry"));
    }
    args.entries
        .iter()
        .map(|e| {
            let (sev, path) = parse_entry(e)?;
            Ok((sev, read_predictions(&path)?))
        })
        .collect()
}

fn fmt_epsilon(eps: f64) -> String {
    format!("Q_1-{eps}")
}

pub fn report(cmd: ReportCommand, config: &RunConfig) -> CliResult<()> {
    match cmd {
        ReportCommand::Sizes(args) => {
            let mut rows = load_entries(&args)?
                .iter()
                .map(|(sev, recs)| records::size_row(*sev, recs))
                .collect::<Result<Vec<_>, Error>>()?;
            rows.sort_by(|a, b| {
                a.epsilon
                    .total_cmp(&b.epsilon)
                    .then(a.severity.cmp(&b.severity))
            });
            let mut out = open_out(args.out.as_deref())?;
            records::write_size_csv(&mut out, &rows)?;
            out.flush()?;
        }
        ReportCommand::Entropy(args) => {
            let mut rows = load_entries(&args)?
                .iter()
                .map(|(sev, recs)| records::entropy_row(*sev, recs))
                .collect::<Result<Vec<_>, Error>>()?;
            rows.sort_by_key(|r| r.severity);
            let mut out = open_out(args.out.as_deref())?;
            records::write_entropy_csv(&mut out, &rows)?;
            out.flush()?;
        }
        ReportCommand::Histogram(args) => report_histogram(args)?,
        ReportCommand::Sweep(args) => report_sweep(args, config)?,
        ReportCommand::EntropySweep(args) => {
            let profile = resolve_profile(&args.profile, args.classes, config)?;
            let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
            let rows = simulator::entropy_sweep(&profile, seed, args.draws)?;
            let mut out = open_out(args.out.as_deref())?;
            records::write_entropy_csv(&mut out, &rows)?;
            out.flush()?;
        }
        ReportCommand::Monitor(args) => report_monitor(args)?,
    }
    Ok(())
}

fn report_histogram(args: HistogramArgs) -> CliResult<()> {
    let preds = read_predictions(&args.predictions)?;
    let mut hist = LargestSoftmaxHistogram::new(args.bins)?;
    preds
        .iter()
        .for_each(|p| hist.push_value(p.largest_softmax));
    let mut markers = args
        .models
        .iter()
        .map(|path| {
            let m = load_model(path)?;
            Ok(Marker::new(fmt_epsilon(m.epsilon()), m.q_threshold()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    markers.sort_by(|a, b| a.name.cmp(&b.name));
    let spec = hist.finish(&markers)?;
    let mut out = open_out(args.out.as_deref())?;
    records::write_histogram_csv(&mut out, &spec)?;
    out.flush()?;
    Ok(())
}

fn report_sweep(args: SweepArgs, config: &RunConfig) -> CliResult<()> {
    let profile = resolve_profile(&args.profile, args.classes, config)?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let epsilons = args
        .epsilons
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::parse(format!("bad epsilon {s:?}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let rows = simulator::severity_sweep(&profile, &epsilons, args.n_cal, args.n_test, seed)?;
    let mut out = open_out(args.out.as_deref())?;
    records::write_sweep_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn report_monitor(args: MonitorReportArgs) -> CliResult<()> {
    let lines: Vec<MonitorRecord> =
        records::read_json_lines(BufReader::new(open_in(Some(&args.input))?))?;
    let summary = lines
        .iter()
        .rev()
        .find_map(|r| match r {
            MonitorRecord::Summary(s) => Some(s),
            MonitorRecord::Verdict { .. } => None,
        })
        .ok_or_else(|| CliError::constraint("monitor output has no summary record"))?;
    let mut out = open_out(args.out.as_deref())?;
    records::write_summary_csv(&mut out, summary)?;
    out.flush()?;
    Ok(())
}
