//! The four-case study grid (water / blood-like × high / physiological
//! velocity), circulation-timescale analysis, and comparison of simulated
//! arrival curves with measured time series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comm::{default_bin_width, estimate_cir, quantile_sorted, PassFilter};
use crate::error::{Error, Result, ValidationError};
use crate::fluid::FluidMedium;
use crate::io::{read_two_column_csv, render_csv, Provenance};
use crate::scenario::Scenario;
use crate::transport::{run_with, RunOptions, SimulationResult};

pub const MEASURED_CSV_HEADER: [&str; 2] = ["t", "intensity"];

/// Correlation values closer than this are treated as ties when picking a lag.
const LAG_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    /// Mean velocity of the "high" cases, m/s. Illustrative, not measured.
    pub high_velocity: f64,
    /// Mean velocity of the "physiological" cases, m/s. Illustrative.
    pub physiological_velocity: f64,
    pub water: FluidMedium,
    pub blood_like: FluidMedium,
    /// In vivo circulation period the loop period is compared against, s.
    pub reference_period: f64,
    /// Seeds used for statistical orderings over the case grid.
    pub seeds: usize,
    /// Uniform grid size used by `compare_series`.
    pub resample_points: usize,
    /// Half-width of the lag search, s; a quarter of the common span when absent.
    pub lag_window: Option<f64>,
    pub measured_path: Option<String>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            high_velocity: 0.1,
            physiological_velocity: 0.01,
            water: FluidMedium::water(),
            blood_like: FluidMedium::blood_like(),
            reference_period: 60.0,
            seeds: 10,
            resample_points: 512,
            lag_window: None,
            measured_path: None,
        }
    }
}

impl StudySettings {
    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        errs.check(
            self.high_velocity >= 0.0 && self.high_velocity.is_finite(),
            &format!("{prefix}.high_velocity"),
            format!("must be >= 0, got {}", self.high_velocity),
        );
        errs.check(
            self.physiological_velocity >= 0.0 && self.physiological_velocity.is_finite(),
            &format!("{prefix}.physiological_velocity"),
            format!("must be >= 0, got {}", self.physiological_velocity),
        );
        self.water.validate_into(&format!("{prefix}.water"), errs);
        self.blood_like.validate_into(&format!("{prefix}.blood_like"), errs);
        errs.check(
            self.reference_period > 0.0 && self.reference_period.is_finite(),
            &format!("{prefix}.reference_period"),
            format!("must be > 0, got {}", self.reference_period),
        );
        errs.check(self.seeds > 0, &format!("{prefix}.seeds"), "must be > 0");
        errs.check(
            self.resample_points >= 2,
            &format!("{prefix}.resample_points"),
            "must be >= 2",
        );
        if let Some(w) = self.lag_window {
            errs.check(
                w >= 0.0 && w.is_finite(),
                &format!("{prefix}.lag_window"),
                format!("must be >= 0, got {w}"),
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediumTag {
    Water,
    BloodLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityTag {
    High,
    Physiological,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaseId {
    pub medium: MediumTag,
    pub velocity: VelocityTag,
}

impl CaseId {
    pub const fn new(medium: MediumTag, velocity: VelocityTag) -> Self {
        Self { medium, velocity }
    }

    /// The four cases in report order.
    pub fn all() -> [CaseId; 4] {
        use MediumTag::*;
        use VelocityTag::*;
        [
            CaseId::new(Water, High),
            CaseId::new(Water, Physiological),
            CaseId::new(BloodLike, High),
            CaseId::new(BloodLike, Physiological),
        ]
    }

    pub fn label(&self) -> String {
        let m = match self.medium {
            MediumTag::Water => "water",
            MediumTag::BloodLike => "blood_like",
        };
        let v = match self.velocity {
            VelocityTag::High => "high",
            VelocityTag::Physiological => "physiological",
        };
        format!("{m}_{v}")
    }
}

/// Instantiates one case: only the medium and the mean velocity change.
pub fn build_case(case: CaseId, template: &Scenario) -> Scenario {
    let st = &template.studies;
    let mut sc = template.clone();
    sc.medium = match case.medium {
        MediumTag::Water => st.water,
        MediumTag::BloodLike => st.blood_like,
    };
    let u = match case.velocity {
        VelocityTag::High => st.high_velocity,
        VelocityTag::Physiological => st.physiological_velocity,
    };
    sc.flow = sc.flow.with_mean_velocity(u);
    sc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRecord {
    pub case: CaseId,
    pub label: String,
    pub mean_velocity: f64,
    pub medium: FluidMedium,
    /// Median arrival time inside the fullest first-pass histogram bin.
    pub peak_arrival_time: Option<f64>,
    /// Interquartile range of first-pass arrival times.
    pub transit_spread: f64,
    /// Fraction of injected bubbles seen on their first pass.
    pub arrival_fraction: f64,
    /// Peak arrival time of every recorded pass, first pass included.
    pub recirculation_echo_times: Vec<f64>,
    pub loop_period: f64,
    pub bin_width: f64,
    pub dt: f64,
    pub injected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub cases: Vec<CaseRecord>,
}

impl ComparisonReport {
    pub fn get(&self, case: CaseId) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case == case)
    }
}

/// Peak time of one pass: the median of the arrivals that fall in the
/// fullest histogram bin (earliest bin on ties).
pub fn pass_peak_time(times: &[f64], bin_width: f64) -> Option<f64> {
    if times.is_empty() {
        return None;
    }
    let mut bins: std::collections::BTreeMap<i64, Vec<f64>> = std::collections::BTreeMap::new();
    for &t in times {
        bins.entry((t / bin_width).floor() as i64).or_default().push(t);
    }
    let (_, members) = bins
        .iter()
        .fold(None::<(i64, &Vec<f64>)>, |best, (k, v)| match best {
            Some((_, b)) if b.len() >= v.len() => best,
            _ => Some((*k, v)),
        })?;
    let mut sorted = members.clone();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, 0.5))
}

/// Reduces one simulation to its case record.
pub fn summarize_case(case: CaseId, result: &SimulationResult) -> CaseRecord {
    let sc = &result.scenario;
    let bin_width = default_bin_width(result);
    let mut first = result.first_pass_times();
    first.sort_by(f64::total_cmp);
    let transit_spread = if first.len() >= 2 {
        quantile_sorted(&first, 0.75) - quantile_sorted(&first, 0.25)
    } else {
        0.0
    };
    let max_pass = result.arrivals.iter().map(|a| a.pass_index).max().unwrap_or(0);
    let recirculation_echo_times = (1..=max_pass)
        .filter_map(|p| {
            let times: Vec<f64> = result
                .arrivals
                .iter()
                .filter(|a| a.pass_index == p)
                .map(|a| a.time)
                .collect();
            pass_peak_time(&times, bin_width)
        })
        .collect();
    CaseRecord {
        case,
        label: case.label(),
        mean_velocity: sc.flow.mean_velocity,
        medium: sc.medium,
        peak_arrival_time: pass_peak_time(&first, bin_width),
        transit_spread,
        arrival_fraction: if result.injected_count == 0 {
            0.0
        } else {
            first.len() as f64 / result.injected_count as f64
        },
        recirculation_echo_times,
        loop_period: sc.loop_period(),
        bin_width,
        dt: result.dt,
        injected: result.injected_count,
    }
}

/// Runs a single case and keeps the raw result.
pub fn run_case(case: CaseId, template: &Scenario, seed: u64, options: &RunOptions) -> Result<SimulationResult> {
    run_with(&build_case(case, template), seed, options).map_err(|e| Error::Case {
        case: case.label(),
        source: Box::new(e),
    })
}

/// All four cases with the same seed.
pub fn run_comparison(template: &Scenario, seed: u64, options: &RunOptions) -> Result<ComparisonReport> {
    run_comparison_detailed(template, seed, options).map(|(report, _)| report)
}

/// Like [`run_comparison`], also returning each case's raw result.
pub fn run_comparison_detailed(
    template: &Scenario,
    seed: u64,
    options: &RunOptions,
) -> Result<(ComparisonReport, Vec<(CaseId, SimulationResult)>)> {
    template.validate()?;
    let mut cases = Vec::with_capacity(4);
    let mut results = Vec::with_capacity(4);
    for case in CaseId::all() {
        let result = run_case(case, template, seed, options)?;
        cases.push(summarize_case(case, &result));
        results.push((case, result));
    }
    Ok((ComparisonReport { seed, cases }, results))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CirculationRecord {
    pub label: String,
    pub loop_period: f64,
    /// `T_loop / reference_period`.
    pub ratio: f64,
    /// Mean spacing between successive pass peaks, when at least two passes arrived.
    pub mean_echo_spacing: Option<f64>,
    /// `mean_echo_spacing − T_loop`.
    pub echo_spacing_deviation: Option<f64>,
}

/// Relates each case's loop period to a physiological circulation period.
pub fn circulation_analysis(report: &ComparisonReport, reference_period: f64) -> Vec<CirculationRecord> {
    report
        .cases
        .iter()
        .map(|c| {
            let echoes = &c.recirculation_echo_times;
            let mean_echo_spacing = (echoes.len() >= 2)
                .then(|| (echoes[echoes.len() - 1] - echoes[0]) / (echoes.len() - 1) as f64);
            CirculationRecord {
                label: c.label.clone(),
                loop_period: c.loop_period,
                ratio: c.loop_period / reference_period,
                mean_echo_spacing,
                echo_spacing_deviation: mean_echo_spacing.map(|s| s - c.loop_period),
            }
        })
        .collect()
}

/// A measured (or simulated) time series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasuredSeries {
    pub label: String,
    /// `(t, intensity)` with strictly increasing `t`.
    pub samples: Vec<(f64, f64)>,
}

impl MeasuredSeries {
    pub fn new(label: impl Into<String>, samples: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(w) = samples.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data(format!(
                "time stamps must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        if samples.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::Data("series contains non-finite samples".into()));
        }
        Ok(Self {
            label: label.into(),
            samples,
        })
    }

    pub fn to_csv(&self) -> String {
        render_csv(
            None,
            &MEASURED_CSV_HEADER,
            self.samples.iter().map(|(t, v)| [t.to_string(), v.to_string()]),
        )
    }

    /// Linear interpolation, holding the end values outside the sampled span.
    pub fn value_at(&self, t: f64) -> f64 {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let k = s.partition_point(|p| p.0 <= t) - 1;
        let (t0, v0) = s[k];
        let (t1, v1) = s[k + 1];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

pub fn parse_measured(text: &str, label: &str) -> Result<MeasuredSeries> {
    MeasuredSeries::new(label, read_two_column_csv(text, MEASURED_CSV_HEADER)?)
}

/// Loads a `t,intensity` CSV; the file stem becomes the label.
pub fn load_measured(path: &Path) -> Result<MeasuredSeries> {
    let text = std::fs::read_to_string(path)?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_measured(&text, &label)
}

/// Simulated arrival-rate curve of an impulse run, binned like its CIR.
pub fn simulated_series(result: &SimulationResult, bin_width: f64) -> Result<MeasuredSeries> {
    let cir = estimate_cir(result, bin_width, &PassFilter::All)?;
    MeasuredSeries::new("simulated", cir.rate_series())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitMetrics {
    /// RMS difference of the min-max normalized curves.
    pub nrmse: f64,
    /// Simulated minus measured peak time, s.
    pub peak_time_error: f64,
    /// Shift that best aligns simulated onto measured, s; positive when the
    /// simulated curve lags.
    pub best_lag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResampledPair {
    pub t: Vec<f64>,
    pub measured: Vec<f64>,
    pub simulated: Vec<f64>,
}

impl ResampledPair {
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> String {
        render_csv(
            provenance,
            &["t", "measured_normalized", "simulated_normalized"],
            (0..self.t.len()).map(|i| {
                [
                    self.t[i].to_string(),
                    self.measured[i].to_string(),
                    self.simulated[i].to_string(),
                ]
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub points: usize,
    pub lag_window: Option<f64>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            points: 512,
            lag_window: None,
        }
    }
}

impl From<&StudySettings> for CompareOptions {
    fn from(s: &StudySettings) -> Self {
        Self {
            points: s.resample_points,
            lag_window: s.lag_window,
        }
    }
}

fn min_max_normalize(values: &[f64], label: &str) -> Result<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Data(format!(
            "series \"{label}\" is constant on the comparison grid; normalization undefined"
        )));
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let den = (saa * sbb).sqrt();
    (den > 0.0).then(|| sab / den)
}

/// Shape and timing comparison of a measured and a simulated curve.
///
/// Both are resampled onto a uniform grid over the union of their spans
/// (linear interpolation, end values held), min-max normalized, and compared
/// by RMS difference, peak time and the lag maximizing normalized
/// cross-correlation within the lag window.
pub fn compare_series(measured: &MeasuredSeries, simulated: &MeasuredSeries, options: &CompareOptions) -> Result<FitMetrics> {
    compare_series_detailed(measured, simulated, options).map(|(m, _)| m)
}

pub fn compare_series_detailed(
    measured: &MeasuredSeries,
    simulated: &MeasuredSeries,
    options: &CompareOptions,
) -> Result<(FitMetrics, ResampledPair)> {
    if measured.samples.is_empty() || simulated.samples.is_empty() {
        return Err(Error::Data("cannot compare an empty series".into()));
    }
    let n = options.points.max(2);
    let start = measured.samples[0].0.min(simulated.samples[0].0);
    let end = measured.samples.last().unwrap().0.max(simulated.samples.last().unwrap().0);
    if !(end > start) {
        return Err(Error::Data("series span a single instant".into()));
    }
    let step = (end - start) / (n - 1) as f64;
    let t: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
    let a = min_max_normalize(&t.iter().map(|&x| measured.value_at(x)).collect::<Vec<_>>(), &measured.label)?;
    let b = min_max_normalize(&t.iter().map(|&x| simulated.value_at(x)).collect::<Vec<_>>(), &simulated.label)?;

    let nrmse = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt();
    let peak_time_error = t[argmax(&b)] - t[argmax(&a)];

    let window = options.lag_window.unwrap_or(0.25 * (end - start));
    let max_lag = ((window / step).round() as i64).min(n as i64 - 2);
    let mut best: Option<(i64, f64)> = None;
    for k in -max_lag..=max_lag {
        // pair a[i] with b[i + k]
        let (lo, hi) = (0i64.max(-k) as usize, (n as i64).min(n as i64 - k) as usize);
        if hi <= lo + 1 {
            continue;
        }
        let Some(r) = pearson(&a[lo..hi], &b[(lo as i64 + k) as usize..(hi as i64 + k) as usize]) else {
            continue;
        };
        best = match best {
            None => Some((k, r)),
            Some((bk, br)) => {
                let better = r > br + LAG_TIE_TOLERANCE
                    || ((r - br).abs() <= LAG_TIE_TOLERANCE && k.abs() < bk.abs());
                if better { Some((k, r)) } else { Some((bk, br)) }
            }
        };
    }
    let best_lag = best.map_or(0.0, |(k, _)| k as f64 * step);
    Ok((
        FitMetrics {
            nrmse,
            peak_time_error,
            best_lag,
        },
        ResampledPair {
            t,
            measured: a,
            simulated: b,
        },
    ))
}
