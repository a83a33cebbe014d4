//! Link-layer evaluation over arrival events: channel impulse response,
//! inter-symbol interference, on-off keying and bit error rates.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::io::{render_csv, Provenance};
use crate::rng::{derive_seed, ParticleStream, Purpose};
use crate::scenario::Scenario;
use crate::transport::{run_with, InjectionEvent, InjectionSchedule, RunOptions, SimulationResult};

/// Number of bins per loop period for the default CIR bin width.
pub const BINS_PER_LOOP: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSettings {
    /// s
    pub symbol_duration: f64,
    pub bubbles_per_one: u64,
    /// Idle symbol slots simulated after the last payload bit.
    pub guard_bins: u32,
    pub n_bits: usize,
    pub training_bits: usize,
    pub trials: usize,
    /// CIR bin width override, s.
    pub bin_width: Option<f64>,
    /// Candidate detection thresholds; defaults to `1..=bubbles_per_one`.
    pub thresholds: Option<Vec<u64>>,
    /// Fixed detection window; calibrated from the impulse response when absent.
    pub window_offset: Option<f64>,
    pub window_width: Option<f64>,
    /// Symbol durations for BER sweeps, s.
    pub tsym_list: Vec<f64>,
}

impl Default for CommSettings {
    fn default() -> Self {
        Self {
            symbol_duration: 2.0,
            bubbles_per_one: 50,
            guard_bins: 2,
            n_bits: 64,
            training_bits: 32,
            trials: 20,
            bin_width: None,
            thresholds: None,
            window_offset: None,
            window_width: None,
            tsym_list: vec![0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

impl CommSettings {
    pub fn scheme(&self) -> OokScheme {
        OokScheme {
            symbol_duration: self.symbol_duration,
            bubbles_per_one: self.bubbles_per_one,
            guard_bins: self.guard_bins,
        }
    }

    pub fn fixed_window(&self) -> Option<DetectionWindow> {
        match (self.window_offset, self.window_width) {
            (Some(offset), Some(width)) => Some(DetectionWindow { offset, width }),
            _ => None,
        }
    }

    pub fn candidate_thresholds(&self) -> Vec<u64> {
        self.thresholds
            .clone()
            .unwrap_or_else(|| (1..=self.bubbles_per_one).collect())
    }

    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        errs.check(
            positive(self.symbol_duration),
            &format!("{prefix}.symbol_duration"),
            format!("must be > 0, got {}", self.symbol_duration),
        );
        errs.check(
            self.bubbles_per_one > 0,
            &format!("{prefix}.bubbles_per_one"),
            "must be > 0",
        );
        errs.check(self.n_bits > 0, &format!("{prefix}.n_bits"), "must be > 0");
        errs.check(
            self.training_bits >= 8,
            &format!("{prefix}.training_bits"),
            format!("must be >= 8, got {}", self.training_bits),
        );
        errs.check(self.trials > 0, &format!("{prefix}.trials"), "must be > 0");
        if let Some(w) = self.bin_width {
            errs.check(
                positive(w),
                &format!("{prefix}.bin_width"),
                format!("must be > 0, got {w}"),
            );
        }
        if let Some(t) = &self.thresholds {
            errs.check(
                !t.is_empty(),
                &format!("{prefix}.thresholds"),
                "must not be empty",
            );
        }
        errs.check(
            self.window_offset.is_some() == self.window_width.is_some(),
            &format!("{prefix}.window_offset"),
            "window_offset and window_width must be given together",
        );
        if let Some(w) = self.fixed_window() {
            errs.check(
                w.offset >= 0.0,
                &format!("{prefix}.window_offset"),
                format!("must be >= 0, got {}", w.offset),
            );
            errs.check(
                positive(w.width),
                &format!("{prefix}.window_width"),
                format!("must be > 0, got {}", w.width),
            );
        }
        for (i, t) in self.tsym_list.iter().enumerate() {
            errs.check(
                positive(*t),
                &format!("{prefix}.tsym_list[{i}]"),
                format!("must be > 0, got {t}"),
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OokScheme {
    pub symbol_duration: f64,
    pub bubbles_per_one: u64,
    pub guard_bins: u32,
}

/// Counting window relative to each symbol start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionWindow {
    pub offset: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRule {
    /// Minimum arrivals in the window for a 1-bit.
    pub threshold: u64,
    pub window: DetectionWindow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PassFilter {
    All,
    Only(u32),
    UpTo(u32),
}

impl PassFilter {
    pub fn accepts(&self, pass: u32) -> bool {
        match *self {
            PassFilter::All => true,
            PassFilter::Only(p) => pass == p,
            PassFilter::UpTo(p) => pass <= p,
        }
    }
}

/// Arrival-time histogram after an impulsive release, split by pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpulseResponse {
    pub bin_edges: Vec<f64>,
    pub counts_per_pass: BTreeMap<u32, Vec<u64>>,
    /// Counts summed over the selected passes, divided by the injected count.
    pub normalized: Vec<f64>,
    pub injected: u64,
}

impl ImpulseResponse {
    pub fn n_bins(&self) -> usize {
        self.bin_edges.len() - 1
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }

    pub fn total_counts(&self) -> Vec<u64> {
        let mut total = vec![0; self.n_bins()];
        for counts in self.counts_per_pass.values() {
            for (t, c) in total.iter_mut().zip(counts) {
                *t += c;
            }
        }
        total
    }

    pub fn total_mass(&self) -> u64 {
        self.counts_per_pass.values().flatten().sum()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        0.5 * (self.bin_edges[i] + self.bin_edges[i + 1])
    }

    /// Arrival-rate series `(bin centre, count / (injected · bin width))`.
    pub fn rate_series(&self) -> Vec<(f64, f64)> {
        let scale = if self.injected == 0 {
            0.0
        } else {
            1.0 / (self.injected as f64 * self.bin_width())
        };
        self.total_counts()
            .iter()
            .enumerate()
            .map(|(i, &c)| (self.bin_center(i), c as f64 * scale))
            .collect()
    }

    /// CSV rows `bin_start,bin_end,pass_index,count,normalized`, one per pass and bin.
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> String {
        let injected = self.injected.max(1) as f64;
        let rows = self.counts_per_pass.iter().flat_map(|(pass, counts)| {
            counts.iter().enumerate().map(move |(i, &c)| {
                [
                    self.bin_edges[i].to_string(),
                    self.bin_edges[i + 1].to_string(),
                    pass.to_string(),
                    c.to_string(),
                    (c as f64 / injected).to_string(),
                ]
            })
        });
        render_csv(
            provenance,
            &["bin_start", "bin_end", "pass_index", "count", "normalized"],
            rows,
        )
    }
}

/// Histogram of arrival times from an impulse injection.
///
/// Bins span `[0, duration]`; arrivals at the horizon fall into the last bin.
pub fn estimate_cir(result: &SimulationResult, bin_width: f64, passes: &PassFilter) -> Result<ImpulseResponse> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Misuse(format!("bin width must be > 0, got {bin_width}")));
    }
    if !result.scenario.injection.is_impulse() {
        return Err(Error::Misuse(
            "impulse response requires a single injection event at t = 0".into(),
        ));
    }
    let duration = result.duration();
    let n_bins = ((duration / bin_width).ceil() as usize).max(1);
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 * bin_width).collect();
    let mut counts_per_pass: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for a in &result.arrivals {
        if !passes.accepts(a.pass_index) {
            continue;
        }
        let idx = ((a.time / bin_width).floor() as usize).min(n_bins - 1);
        counts_per_pass
            .entry(a.pass_index)
            .or_insert_with(|| vec![0; n_bins])[idx] += 1;
    }
    let injected = result.injected_count;
    let mut cir = ImpulseResponse {
        bin_edges,
        counts_per_pass,
        normalized: Vec::new(),
        injected,
    };
    cir.normalized = cir
        .total_counts()
        .iter()
        .map(|&c| if injected == 0 { 0.0 } else { c as f64 / injected as f64 })
        .collect();
    Ok(cir)
}

/// Bin width used when none is configured: `T_loop / 200` with recirculation,
/// otherwise Freedman–Diaconis on the first-pass arrivals.
pub fn default_bin_width(result: &SimulationResult) -> f64 {
    let sc = &result.scenario;
    if let Some(w) = sc.comm.bin_width {
        return w;
    }
    let fallback = result.duration() / BINS_PER_LOOP;
    if sc.recirculation.enabled && sc.flow.mean_velocity > 0.0 {
        return sc.loop_period() / BINS_PER_LOOP;
    }
    let mut first = result.first_pass_times();
    if first.len() < 2 {
        return fallback;
    }
    first.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&first, 0.75) - quantile_sorted(&first, 0.25);
    let fd = 2.0 * iqr / (first.len() as f64).cbrt();
    if fd > 0.0 {
        fd
    } else {
        fallback
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fraction of the arrived mass landing at or after `t_sym`, bins that straddle
/// `t_sym` contributing proportionally.
pub fn isi_fraction(cir: &ImpulseResponse, t_sym: f64) -> f64 {
    let total = cir.total_counts();
    let mass: u64 = total.iter().sum();
    if mass == 0 {
        return 0.0;
    }
    let late: f64 = total
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (a, b) = (cir.bin_edges[i], cir.bin_edges[i + 1]);
            let share = if a >= t_sym {
                1.0
            } else if b <= t_sym {
                0.0
            } else {
                (b - t_sym) / (b - a)
            };
            share * c as f64
        })
        .sum();
    (late / mass as f64).clamp(0.0, 1.0)
}

/// On-off keying: a 1-bit releases `bubbles_per_one` bubbles at its symbol start.
pub fn modulate(bits: &[bool], scheme: &OokScheme) -> Result<InjectionSchedule> {
    if bits.is_empty() {
        return Err(Error::Misuse("cannot modulate an empty bit sequence".into()));
    }
    let events = bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(k, _)| InjectionEvent {
            time: k as f64 * scheme.symbol_duration,
            count: scheme.bubbles_per_one,
        })
        .collect();
    Ok(InjectionSchedule {
        events,
        symbol_duration: Some(scheme.symbol_duration),
        ..InjectionSchedule::default()
    })
}

fn check_window(window: &DetectionWindow, scheme: &OokScheme) -> Result<()> {
    if !(window.width > 0.0) || window.width > scheme.symbol_duration || !(window.offset >= 0.0) {
        return Err(Error::Misuse(format!(
            "detection window (offset {}, width {}) must have 0 < width <= T_sym = {} and offset >= 0",
            window.offset, window.width, scheme.symbol_duration
        )));
    }
    Ok(())
}

/// Arrivals (all passes) inside each symbol's window.
pub fn window_counts(result: &SimulationResult, n_bits: usize, scheme: &OokScheme, window: &DetectionWindow) -> Result<Vec<u64>> {
    check_window(window, scheme)?;
    let times: Vec<f64> = result.arrivals.iter().map(|a| a.time).collect();
    debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
    Ok((0..n_bits)
        .map(|k| {
            let start = k as f64 * scheme.symbol_duration + window.offset;
            let end = start + window.width;
            let lo = times.partition_point(|&t| t < start);
            let hi = times.partition_point(|&t| t < end);
            (hi - lo) as u64
        })
        .collect())
}

/// Windowed count thresholding: bit `k` is 1 iff at least `threshold`
/// arrivals fall in `[k T + offset, k T + offset + width)`.
pub fn demodulate(result: &SimulationResult, n_bits: usize, scheme: &OokScheme, rule: &DetectionRule) -> Result<Vec<bool>> {
    Ok(window_counts(result, n_bits, scheme, &rule.window)?
        .into_iter()
        .map(|c| c >= rule.threshold)
        .collect())
}

/// Hamming distance over length.
pub fn bit_error_rate(tx: &[bool], rx: &[bool]) -> Result<f64> {
    if tx.len() != rx.len() {
        return Err(Error::Misuse(format!(
            "bit streams differ in length ({} vs {})",
            tx.len(),
            rx.len()
        )));
    }
    if tx.is_empty() {
        return Ok(0.0);
    }
    let errors = tx.iter().zip(rx).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / tx.len() as f64)
}

/// Grid search for the threshold minimizing training BER; ties go to the
/// smallest threshold.
pub fn calibrate_threshold(
    training: &SimulationResult,
    training_bits: &[bool],
    scheme: &OokScheme,
    window: &DetectionWindow,
    candidates: &[u64],
) -> Result<DetectionRule> {
    if candidates.is_empty() {
        return Err(Error::Misuse("no candidate thresholds".into()));
    }
    if training_bits.len() < 8 {
        return Err(Error::Misuse(format!(
            "calibration needs at least 8 training bits, got {}",
            training_bits.len()
        )));
    }
    let counts = window_counts(training, training_bits.len(), scheme, window)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, u64)> = None;
    for &threshold in &sorted {
        let errors = counts
            .iter()
            .zip(training_bits)
            .filter(|(&c, &b)| (c >= threshold) != b)
            .count();
        if best.is_none_or(|(e, _)| errors < e) {
            best = Some((errors, threshold));
        }
    }
    Ok(DetectionRule {
        threshold: best.expect("candidates non-empty").1,
        window: *window,
    })
}

/// Window covering the central 90% of first-pass arrivals of an impulse
/// response, padded by half a bin on each side and capped at one symbol.
pub fn calibrate_window(cir: &ImpulseResponse, t_sym: f64) -> Result<DetectionWindow> {
    let first = cir
        .counts_per_pass
        .get(&1)
        .ok_or_else(|| Error::Data("impulse response has no first-pass arrivals".into()))?;
    let total: u64 = first.iter().sum();
    if total == 0 {
        return Err(Error::Data("impulse response has no first-pass arrivals".into()));
    }
    let bin_at = |q: f64| {
        let target = q * total as f64;
        let mut acc = 0u64;
        for (i, &c) in first.iter().enumerate() {
            acc += c;
            if acc as f64 >= target && c > 0 {
                return i;
            }
        }
        first.len() - 1
    };
    let (lo, hi) = (bin_at(0.05), bin_at(0.95));
    let half = 0.5 * cir.bin_width();
    let offset = (cir.bin_edges[lo] - half).max(0.0);
    let end = cir.bin_edges[hi + 1] + half;
    Ok(DetectionWindow {
        offset,
        width: (end - offset).min(t_sym),
    })
}

/// Random bit sequence from a counter-addressed stream.
pub fn random_bits(seed: u64, stream: u64, n: usize) -> Vec<bool> {
    let mut s = ParticleStream::new(seed, Purpose::Bits, stream);
    let rng = s.at(0);
    (0..n).map(|_| rng.random::<bool>()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerPoint {
    pub t_sym: f64,
    pub trials: usize,
    pub bits: usize,
    pub errors: usize,
    pub ber: f64,
    /// Standard error of the mean over per-trial BERs.
    pub std_error: f64,
    pub window: DetectionWindow,
}

/// Scenario that transmits `bits` with `scheme`, long enough to cover the
/// last symbol's window and the guard slots.
pub fn transmission_scenario(base: &Scenario, bits: &[bool], scheme: &OokScheme, window: &DetectionWindow) -> Result<Scenario> {
    let mut sc = base.clone();
    let schedule = modulate(bits, scheme)?;
    sc.injection = InjectionSchedule {
        release_radius_fraction: base.injection.release_radius_fraction,
        initial_velocity: base.injection.initial_velocity,
        ..schedule
    };
    let n = bits.len() as f64;
    let t = scheme.symbol_duration;
    sc.simulation.duration =
        ((n + f64::from(scheme.guard_bins)) * t).max((n - 1.0) * t + window.offset + window.width);
    Ok(sc)
}

/// Bit error rate against symbol duration.
///
/// Per symbol duration: an impulse run places the detection window (unless
/// one is configured); then each trial calibrates the threshold on a
/// training sequence and counts errors on an independent payload.
pub fn ber_sweep(base: &Scenario, tsym_list: &[f64], seed: u64, options: &RunOptions) -> Result<Vec<BerPoint>> {
    let comm = &base.comm;
    let candidates = comm.candidate_thresholds();
    let mut points = Vec::with_capacity(tsym_list.len());
    for &t_sym in tsym_list {
        let scheme = OokScheme {
            symbol_duration: t_sym,
            ..comm.scheme()
        };
        let window = match comm.fixed_window() {
            Some(w) => w,
            None => {
                let mut impulse = base.clone();
                impulse.injection = InjectionSchedule {
                    events: vec![InjectionEvent {
                        time: 0.0,
                        count: comm.bubbles_per_one,
                    }],
                    symbol_duration: Some(t_sym),
                    ..base.injection.clone()
                };
                let res = run_with(&impulse, derive_seed(seed, 0xC1), options)?;
                let cir = estimate_cir(&res, t_sym / 10.0, &PassFilter::All)?;
                calibrate_window(&cir, t_sym)?
            }
        };

        let mut errors = 0usize;
        let mut trial_bers = Vec::with_capacity(comm.trials);
        for trial in 0..comm.trials {
            let trial_seed = derive_seed(seed, trial as u64);
            let train_bits = random_bits(trial_seed, 0, comm.training_bits);
            let train_sc = transmission_scenario(base, &train_bits, &scheme, &window)?;
            let train = run_with(&train_sc, derive_seed(trial_seed, 1), options)?;
            let rule = calibrate_threshold(&train, &train_bits, &scheme, &window, &candidates)?;

            let tx = random_bits(trial_seed, 1, comm.n_bits);
            let test_sc = transmission_scenario(base, &tx, &scheme, &window)?;
            let test = run_with(&test_sc, derive_seed(trial_seed, 2), options)?;
            let rx = demodulate(&test, tx.len(), &scheme, &rule)?;
            let ber = bit_error_rate(&tx, &rx)?;
            errors += tx.iter().zip(&rx).filter(|(a, b)| a != b).count();
            trial_bers.push(ber);
        }
        let trials = trial_bers.len();
        let mean = trial_bers.iter().sum::<f64>() / trials as f64;
        let std_error = if trials > 1 {
            let var = trial_bers.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            (var / trials as f64).sqrt()
        } else {
            0.0
        };
        let bits = trials * comm.n_bits;
        points.push(BerPoint {
            t_sym,
            trials,
            bits,
            errors,
            ber: errors as f64 / bits as f64,
            std_error,
            window,
        });
    }
    Ok(points)
}

/// BER sweep CSV: `T_sym,trials,errors,ber`.
pub fn ber_csv(points: &[BerPoint], provenance: Option<&Provenance>) -> String {
    render_csv(
        provenance,
        &["T_sym", "trials", "errors", "ber"],
        points.iter().map(|p| {
            [
                p.t_sym.to_string(),
                p.trials.to_string(),
                p.errors.to_string(),
                p.ber.to_string(),
            ]
        }),
    )
}
