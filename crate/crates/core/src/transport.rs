//! The transport engine: injection, time stepping, wall handling, detector
//! crossings and loop recirculation.
//!
//! Particles are one-way coupled and never interact, so each particle's whole
//! history is computed independently from its own counter-addressed random
//! streams. Work is spread across a rayon pool by particle; the merged arrival
//! list is sorted by `(time, particle_id, pass_index)`, so output does not
//! depend on the number of workers.

use std::f64::consts::TAU;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bubble::{step_particle, BubbleKinetics, ParticleState, ParticleStatus};
use crate::error::{Error, Result, ValidationError};
use crate::fluid::{radial_distance, velocity_at, LoopGeometry};
use crate::io::{render_csv, Provenance};
use crate::rng::{ParticleStream, Purpose};
use crate::scenario::Scenario;

/// Fraction of the pipe radius a particle at peak speed may travel per step.
pub const CROSS_CHANNEL_CFL: f64 = 0.05;
/// Minimum number of steps per modulation symbol.
pub const STEPS_PER_SYMBOL: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    /// s
    pub time: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVelocity {
    LocalFluid,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub events: Vec<InjectionEvent>,
    /// Bubbles are released uniformly over a disk of this fraction of `R` at `x = 0`.
    pub release_radius_fraction: f64,
    pub initial_velocity: InitialVelocity,
    /// Set when the schedule encodes a modulated symbol stream.
    pub symbol_duration: Option<f64>,
}

impl Default for InjectionSchedule {
    fn default() -> Self {
        Self {
            events: Vec::new(),
            release_radius_fraction: 1.0,
            initial_velocity: InitialVelocity::LocalFluid,
            symbol_duration: None,
        }
    }
}

impl InjectionSchedule {
    pub fn impulse(count: u64) -> Self {
        Self {
            events: vec![InjectionEvent { time: 0.0, count }],
            ..Self::default()
        }
    }

    pub fn total_count(&self) -> u64 {
        self.events.iter().map(|e| e.count).sum()
    }

    /// True for a single release at `t = 0`.
    pub fn is_impulse(&self) -> bool {
        self.events.len() == 1 && self.events[0].time == 0.0
    }

    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        for (i, e) in self.events.iter().enumerate() {
            errs.check(
                e.time >= 0.0 && e.time.is_finite(),
                &format!("{prefix}.events[{i}].time"),
                format!("must be finite and >= 0, got {}", e.time),
            );
            errs.check(
                e.count > 0,
                &format!("{prefix}.events[{i}].count"),
                "must be > 0",
            );
        }
        errs.check(
            self.events.windows(2).all(|w| w[1].time >= w[0].time),
            &format!("{prefix}.events"),
            "event times must be non-decreasing",
        );
        errs.check(
            (0.0..=1.0).contains(&self.release_radius_fraction),
            &format!("{prefix}.release_radius_fraction"),
            format!("must lie in [0, 1], got {}", self.release_radius_fraction),
        );
        if let Some(t) = self.symbol_duration {
            errs.check(
                t > 0.0 && t.is_finite(),
                &format!("{prefix}.symbol_duration"),
                format!("must be > 0, got {t}"),
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Transparent,
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    /// Axial plane position, m.
    pub axial_position: f64,
    pub mode: DetectorMode,
    pub max_passes_recorded: u32,
}

impl DetectorSpec {
    pub fn validate_into(&self, prefix: &str, loop_length: f64, errs: &mut ValidationError) {
        errs.check(
            self.axial_position > 0.0 && self.axial_position < loop_length,
            &format!("{prefix}.axial_position"),
            format!(
                "must satisfy 0 < axial_position < loop_length, got {}",
                self.axial_position
            ),
        );
        errs.check(
            self.max_passes_recorded >= 1,
            &format!("{prefix}.max_passes_recorded"),
            "must be >= 1",
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecirculationSpec {
    pub enabled: bool,
    /// Time spent in the well-mixed reservoir before re-entry, s.
    pub reservoir_delay: f64,
    /// Re-sample the radial position (area-uniform) at every wrap.
    pub remix_radial: bool,
}

impl Default for RecirculationSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            reservoir_delay: 0.0,
            remix_radial: true,
        }
    }
}

impl RecirculationSpec {
    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        errs.check(
            self.reservoir_delay >= 0.0 && self.reservoir_delay.is_finite(),
            &format!("{prefix}.reservoir_delay"),
            format!("must be >= 0, got {}", self.reservoir_delay),
        );
    }
}

/// Run length and guards against runaway schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    /// Simulated time, s.
    pub duration: f64,
    pub max_particles: u64,
    pub max_duration: f64,
    /// Record every n-th step of every particle; 0 disables the dump.
    pub trajectory_stride: u64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            duration: 60.0,
            max_particles: 1_000_000,
            max_duration: 1.0e5,
            trajectory_stride: 0,
        }
    }
}

impl SimulationSettings {
    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        errs.check(
            self.duration > 0.0 && self.duration.is_finite(),
            &format!("{prefix}.duration"),
            format!("must be > 0, got {}", self.duration),
        );
        errs.check(
            self.duration <= self.max_duration,
            &format!("{prefix}.duration"),
            format!(
                "exceeds max_duration ({} > {})",
                self.duration, self.max_duration
            ),
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalEvent {
    pub particle_id: u64,
    /// s
    pub time: f64,
    /// 1 for the first pass through the detector.
    pub pass_index: u32,
    /// m
    pub radial_position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub particle_id: u64,
    pub time: f64,
    pub position: [f64; 3],
    pub pass_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WallClockStats {
    pub elapsed_seconds: f64,
    pub steps: u64,
    pub particle_steps: u64,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub arrivals: Vec<ArrivalEvent>,
    pub injected_count: u64,
    pub in_flight_count: u64,
    pub absorbed_count: u64,
    pub expired_count: u64,
    pub dt: f64,
    pub seed: u64,
    pub wall_clock: WallClockStats,
    pub trajectory: Vec<TrajectoryRow>,
    /// The scenario that produced this result.
    pub scenario: Scenario,
}

impl SimulationResult {
    pub fn is_conserved(&self) -> bool {
        self.injected_count == self.in_flight_count + self.absorbed_count + self.expired_count
    }

    pub fn duration(&self) -> f64 {
        self.scenario.simulation.duration
    }

    pub fn first_pass_times(&self) -> Vec<f64> {
        self.arrivals
            .iter()
            .filter(|a| a.pass_index == 1)
            .map(|a| a.time)
            .collect()
    }

    /// Events CSV: `particle_id,t_arrival,pass_index,r`.
    pub fn events_csv(&self, provenance: Option<&Provenance>) -> String {
        render_csv(
            provenance,
            &["particle_id", "t_arrival", "pass_index", "r"],
            self.arrivals.iter().map(|a| {
                [
                    a.particle_id.to_string(),
                    a.time.to_string(),
                    a.pass_index.to_string(),
                    a.radial_position.to_string(),
                ]
            }),
        )
    }

    /// Trajectory CSV: `particle_id,t,x,y,z,pass_count`.
    pub fn trajectory_csv(&self, provenance: Option<&Provenance>) -> String {
        render_csv(
            provenance,
            &["particle_id", "t", "x", "y", "z", "pass_count"],
            self.trajectory.iter().map(|r| {
                [
                    r.particle_id.to_string(),
                    r.time.to_string(),
                    r.position[0].to_string(),
                    r.position[1].to_string(),
                    r.position[2].to_string(),
                    r.pass_count.to_string(),
                ]
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

/// Time step used for a scenario: the configured value, or
/// `min(0.05 R / u_max, T_sym / 50)` with the symbol term only when the
/// schedule is modulated. Never exceeds the run duration.
pub fn resolve_dt(scenario: &Scenario) -> f64 {
    let duration = scenario.simulation.duration;
    if let Some(dt) = scenario.integrator.dt {
        return dt.min(duration);
    }
    let mut dt = f64::INFINITY;
    let u_max = scenario.flow.max_speed();
    if u_max > 0.0 {
        dt = dt.min(CROSS_CHANNEL_CFL * scenario.geometry.pipe_radius / u_max);
    }
    if let Some(t_sym) = scenario.injection.symbol_duration {
        dt = dt.min(t_sym / STEPS_PER_SYMBOL);
    }
    if !dt.is_finite() {
        dt = duration / 1000.0;
    }
    dt.min(duration)
}

/// Forward crossing of the detector plane between two consecutive states.
///
/// A crossing counts when `x_before < plane <= x_after`; its time is linearly
/// interpolated inside `[t_before, t_after]`. In absorbing mode `after` is
/// marked [`ParticleStatus::Absorbed`].
pub fn detect_crossings(
    before: &ParticleState,
    after: &mut ParticleState,
    t_before: f64,
    t_after: f64,
    det: &DetectorSpec,
) -> Option<ArrivalEvent> {
    let plane = det.axial_position;
    let (x0, x1) = (before.position.x, after.position.x);
    if !(x0 < plane && plane <= x1) {
        return None;
    }
    let frac = (plane - x0) / (x1 - x0);
    let time = t_before + frac * (t_after - t_before);
    let at = before.position + (after.position - before.position) * frac;
    if det.mode == DetectorMode::Absorbing {
        after.status = ParticleStatus::Absorbed;
    }
    Some(ArrivalEvent {
        particle_id: after.id,
        time,
        pass_index: after.pass_count + 1,
        radial_position: radial_distance(&at),
    })
}

/// Slide condition at the pipe wall: the particle centre is kept within
/// `R − d/2` and the radial velocity component is removed when clamped.
pub fn apply_wall(p: &ParticleState, geom: &LoopGeometry) -> ParticleState {
    let limit = geom.pipe_radius - 0.5 * p.diameter;
    let r = radial_distance(&p.position);
    if r <= limit {
        return *p;
    }
    let mut out = *p;
    let (ey, ez) = (p.position.y / r, p.position.z / r);
    out.position.y = ey * limit;
    out.position.z = ez * limit;
    let v_radial = p.velocity.y * ey + p.velocity.z * ez;
    out.velocity.y -= v_radial * ey;
    out.velocity.z -= v_radial * ez;
    out
}

/// Loop return for a particle that reached `x >= L_loop`.
///
/// Wraps the axial coordinate by one loop length and increments the pass
/// count; with `remix_radial` the radial position is re-drawn area-uniformly
/// from the two uniform variates in `draws`. Disabled recirculation marks
/// the particle expired instead. Reservoir hold-up is scheduled by the engine.
pub fn apply_recirculation(
    p: &ParticleState,
    geom: &LoopGeometry,
    spec: &RecirculationSpec,
    draws: [f64; 2],
) -> ParticleState {
    let mut out = *p;
    if p.position.x < geom.loop_length {
        return out;
    }
    if !spec.enabled {
        out.status = ParticleStatus::Expired;
        return out;
    }
    out.position.x -= geom.loop_length;
    out.pass_count += 1;
    if spec.remix_radial {
        let r = geom.pipe_radius * draws[0].sqrt();
        let theta = TAU * draws[1];
        out.position.y = r * theta.cos();
        out.position.z = r * theta.sin();
    }
    out
}

fn initial_velocity(scenario: &Scenario, position: &Vector3<f64>) -> Vector3<f64> {
    use InitialVelocity::*;
    match scenario.injection.initial_velocity {
        LocalFluid => velocity_at(&scenario.flow, &scenario.geometry, position),
        Zero => Vector3::zeros(),
    }
}

struct Engine<'a> {
    scenario: &'a Scenario,
    seed: u64,
    dt: f64,
    n_steps: u64,
    record_stride: u64,
}

struct Track {
    arrivals: Vec<ArrivalEvent>,
    trajectory: Vec<TrajectoryRow>,
    status: ParticleStatus,
    steps: u64,
}

impl Engine<'_> {
    fn time_at(&self, step: u64) -> f64 {
        (step as f64 * self.dt).min(self.scenario.simulation.duration)
    }

    fn inject(&self, id: u64) -> Result<ParticleState> {
        let sc = self.scenario;
        let mut stream = ParticleStream::new(self.seed, Purpose::Injection, id);
        let rng = stream.at(0);
        let diameter = sc.species.distribution.sample(rng)?;
        let u: [f64; 2] = [rand::Rng::random(rng), rand::Rng::random(rng)];
        let r = sc.injection.release_radius_fraction * sc.geometry.pipe_radius * u[0].sqrt();
        let theta = TAU * u[1];
        let position = Vector3::new(0.0, r * theta.cos(), r * theta.sin());
        let mut p = ParticleState::new(id, position, Vector3::zeros(), diameter);
        p = apply_wall(&p, &sc.geometry);
        p.velocity = initial_velocity(sc, &p.position);
        Ok(p)
    }

    fn record(&self, rows: &mut Vec<TrajectoryRow>, p: &ParticleState, time: f64) {
        rows.push(TrajectoryRow {
            particle_id: p.id,
            time,
            position: p.position.into(),
            pass_count: p.pass_count,
        });
    }

    fn track(&self, id: u64, inject_time: f64) -> Result<Track> {
        let sc = self.scenario;
        let geom = &sc.geometry;
        let det = &sc.detector;
        let max_pass = det.max_passes_recorded;
        let tracing = self.record_stride > 0;

        let mut cur = self.inject(id)?;
        let kinetics = BubbleKinetics::new(
            &sc.medium,
            sc.species.gas_density,
            cur.diameter,
            &geom.gravity,
            sc.integrator.added_mass_coefficient,
        )?;
        let mut brownian = ParticleStream::new(self.seed, Purpose::Brownian, id);
        let mut recirc = ParticleStream::new(self.seed, Purpose::Recirculation, id);

        let mut out = Track {
            arrivals: Vec::new(),
            trajectory: Vec::new(),
            status: ParticleStatus::InFlight,
            steps: 0,
        };
        if tracing {
            self.record(&mut out.trajectory, &cur, inject_time);
        }

        let first_step = ((inject_time / self.dt).floor() as u64).min(self.n_steps);
        let mut active_from = inject_time;
        let mut withheld_until: Option<f64> = None;
        let mut detected_this_pass = false;

        for n in first_step..self.n_steps {
            let t1 = self.time_at(n + 1);
            let mut start = self.time_at(n).max(active_from);
            if let Some(release) = withheld_until {
                if release >= t1 {
                    continue;
                }
                withheld_until = None;
                cur.position.x = 0.0;
                cur.velocity = initial_velocity(sc, &cur.position);
                start = start.max(release);
                active_from = release;
            }
            if t1 <= start {
                continue;
            }
            let h = t1 - start;
            let noise = if sc.integrator.brownian_enabled {
                brownian.normals3(n)
            } else {
                [0.0; 3]
            };
            let u = velocity_at(&sc.flow, geom, &cur.position);
            let mut next = step_particle(&cur, &u, &kinetics, &sc.integrator, h, noise).map_err(|e| match e {
                Error::Numeric {
                    particle_id,
                    message,
                    ..
                } => Error::Numeric {
                    particle_id,
                    step: Some(n),
                    message,
                },
                other => other,
            })?;
            next = apply_wall(&next, geom);
            out.steps += 1;

            if !detected_this_pass {
                if let Some(ev) = detect_crossings(&cur, &mut next, start, t1, det) {
                    detected_this_pass = true;
                    if ev.pass_index <= max_pass {
                        out.arrivals.push(ev);
                    }
                    if next.status == ParticleStatus::Absorbed {
                        out.status = ParticleStatus::Absorbed;
                        if tracing {
                            self.record(&mut out.trajectory, &next, t1);
                        }
                        return Ok(out);
                    }
                }
            }

            if next.position.x >= geom.loop_length {
                let x0 = cur.position.x;
                let frac = (geom.loop_length - x0) / (next.position.x - x0);
                let t_wrap = start + frac.clamp(0.0, 1.0) * h;
                let rng = recirc.at(n);
                let draws: [f64; 2] = [rand::Rng::random(rng), rand::Rng::random(rng)];
                next = apply_recirculation(&next, geom, &sc.recirculation, draws);
                if next.status == ParticleStatus::Expired {
                    out.status = ParticleStatus::Expired;
                    if tracing {
                        self.record(&mut out.trajectory, &next, t1);
                    }
                    return Ok(out);
                }
                next = apply_wall(&next, geom);
                detected_this_pass = false;
                if sc.recirculation.reservoir_delay > 0.0 {
                    withheld_until = Some(t_wrap + sc.recirculation.reservoir_delay);
                } else {
                    // the wrapped remainder of this step may already reach the detector
                    let mut entry = next;
                    entry.position.x = 0.0;
                    if let Some(ev) = detect_crossings(&entry, &mut next, t_wrap, t1, det) {
                        detected_this_pass = true;
                        if ev.pass_index <= max_pass {
                            out.arrivals.push(ev);
                        }
                        if next.status == ParticleStatus::Absorbed {
                            out.status = ParticleStatus::Absorbed;
                            return Ok(out);
                        }
                    }
                }
            }
            if !next.is_finite() {
                return Err(Error::Numeric {
                    particle_id: id,
                    step: Some(n),
                    message: "non-finite state after wall/recirculation handling".into(),
                });
            }
            cur = next;

            if tracing && (n + 1) % self.record_stride == 0 {
                self.record(&mut out.trajectory, &cur, t1);
            }
            // Nothing this particle does from here on can be recorded.
            let next_pass = cur.pass_count + 1;
            if !tracing && (next_pass > max_pass || (detected_this_pass && next_pass >= max_pass)) {
                break;
            }
        }
        Ok(out)
    }
}

/// Runs a scenario with the global worker pool.
pub fn run(scenario: &Scenario, seed: u64) -> Result<SimulationResult> {
    run_with(scenario, seed, &RunOptions::default())
}

pub fn run_with(scenario: &Scenario, seed: u64, options: &RunOptions) -> Result<SimulationResult> {
    scenario.validate()?;
    let started = Instant::now();
    let dt = resolve_dt(scenario);
    let duration = scenario.simulation.duration;
    let n_steps = (duration / dt).ceil() as u64;
    let engine = Engine {
        scenario,
        seed,
        dt,
        n_steps,
        record_stride: scenario.simulation.trajectory_stride,
    };

    let mut jobs: Vec<(u64, f64)> = Vec::with_capacity(scenario.injection.total_count() as usize);
    for event in &scenario.injection.events {
        for _ in 0..event.count {
            jobs.push((jobs.len() as u64, event.time));
        }
    }

    let work = || -> Vec<Result<Track>> {
        jobs.par_iter()
            .map(|&(id, t)| engine.track(id, t))
            .collect()
    };
    let (tracks, workers) = match options.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            (pool.install(work), w.max(1))
        }
        None => (work(), rayon::current_num_threads()),
    };

    let mut result = SimulationResult {
        arrivals: Vec::new(),
        injected_count: jobs.len() as u64,
        in_flight_count: 0,
        absorbed_count: 0,
        expired_count: 0,
        dt,
        seed,
        wall_clock: WallClockStats {
            workers,
            steps: n_steps,
            ..WallClockStats::default()
        },
        trajectory: Vec::new(),
        scenario: scenario.clone(),
    };
    for track in tracks {
        let track = track?;
        match track.status {
            ParticleStatus::InFlight => result.in_flight_count += 1,
            ParticleStatus::Absorbed => result.absorbed_count += 1,
            ParticleStatus::Expired => result.expired_count += 1,
        }
        result.wall_clock.particle_steps += track.steps;
        result.arrivals.extend(track.arrivals);
        result.trajectory.extend(track.trajectory);
    }
    result.arrivals.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.particle_id.cmp(&b.particle_id))
            .then(a.pass_index.cmp(&b.pass_index))
    });
    result.wall_clock.elapsed_seconds = started.elapsed().as_secs_f64();
    debug_assert!(result.is_conserved());
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bubble::{BubbleSpecies, IntegratorMode};
    use crate::fluid::FlowField;

    fn state(x: f64) -> ParticleState {
        ParticleState::new(3, Vector3::new(x, 0.0, 0.0), Vector3::new(0.2, 0.0, 0.0), 2.5e-6)
    }

    fn detector(mode: DetectorMode) -> DetectorSpec {
        DetectorSpec {
            axial_position: 0.1,
            mode,
            max_passes_recorded: 3,
        }
    }

    fn geom() -> LoopGeometry {
        LoopGeometry {
            pipe_radius: 0.002,
            detector_distance: 0.1,
            loop_length: 1.0,
            gravity: Vector3::zeros(),
        }
    }

    /// Plug flow, no gravity or Brownian motion, monodisperse bubbles.
    fn plug_scenario(u: f64, count: u64) -> Scenario {
        let mut sc = Scenario::default();
        sc.geometry = geom();
        sc.detector.axial_position = 0.1;
        sc.flow = FlowField::plug(u);
        sc.species = BubbleSpecies::monodisperse(6.6, 2.5e-6);
        sc.integrator.brownian_enabled = false;
        sc.integrator.dt = Some(1e-3);
        sc.injection = InjectionSchedule::impulse(count);
        sc.recirculation.enabled = false;
        sc.simulation.duration = 2.0;
        sc
    }

    #[test]
    fn crossing_interpolates_inside_step() {
        let before = state(0.099);
        let mut after = state(0.101);
        let ev = detect_crossings(&before, &mut after, 2.0, 2.01, &detector(DetectorMode::Transparent)).unwrap();
        assert!((ev.time - 2.005).abs() < 1e-12);
        assert_eq!(ev.pass_index, 1);
        assert_eq!(after.status, ParticleStatus::InFlight);
    }

    #[test]
    fn backward_motion_is_not_a_crossing() {
        let before = state(0.101);
        let mut after = state(0.099);
        assert!(detect_crossings(&before, &mut after, 0.0, 0.01, &detector(DetectorMode::Transparent)).is_none());
    }

    #[test]
    fn crossing_tie_break_is_half_open() {
        let det = detector(DetectorMode::Absorbing);
        // landing exactly on the plane counts
        let mut on = state(0.1);
        let ev = detect_crossings(&state(0.09), &mut on, 0.0, 1.0, &det).unwrap();
        assert_eq!(ev.time, 1.0);
        assert_eq!(on.status, ParticleStatus::Absorbed);
        // starting on the plane does not count a second time
        let mut past = state(0.11);
        assert!(detect_crossings(&state(0.1), &mut past, 1.0, 2.0, &det).is_none());
    }

    #[test]
    fn wall_clamp() {
        let g = geom();
        let inside = ParticleState::new(1, Vector3::new(0.0, 0.001, 0.0), Vector3::new(0.1, 0.01, 0.0), 2.5e-6);
        assert_eq!(apply_wall(&inside, &g), inside);

        let outside = ParticleState::new(
            1,
            Vector3::new(0.3, 0.0, 0.002 + 1e-7),
            Vector3::new(0.1, 0.02, 0.05),
            2.5e-6,
        );
        let clamped = apply_wall(&outside, &g);
        assert!((radial_distance(&clamped.position) - (0.002 - 1.25e-6)).abs() < 1e-15);
        assert_eq!(clamped.velocity.z, 0.0);
        assert_eq!(clamped.velocity.y, 0.02);
        assert_eq!(clamped.velocity.x, 0.1);
        assert_eq!(clamped.position.x, 0.3);
    }

    #[test]
    fn recirculation_wraps() {
        let g = geom();
        let spec = RecirculationSpec {
            enabled: true,
            reservoir_delay: 0.0,
            remix_radial: false,
        };
        let p = ParticleState::new(1, Vector3::new(1.01, 0.0005, -0.0003), Vector3::zeros(), 2.5e-6);
        let w = apply_recirculation(&p, &g, &spec, [0.3, 0.7]);
        assert!((w.position.x - 0.01).abs() < 1e-12);
        assert_eq!(w.pass_count, 1);
        assert_eq!((w.position.y, w.position.z), (0.0005, -0.0003));

        let remixed = apply_recirculation(&p, &g, &RecirculationSpec { remix_radial: true, ..spec }, [0.25, 0.0]);
        assert!((radial_distance(&remixed.position) - 0.001).abs() < 1e-15);

        let expired = apply_recirculation(&p, &g, &RecirculationSpec { enabled: false, ..spec }, [0.5, 0.5]);
        assert_eq!(expired.status, ParticleStatus::Expired);
        assert_eq!(expired.pass_count, 0);
    }

    #[test]
    fn plug_flow_transit_time() {
        let res = run(&plug_scenario(0.1, 100), 1).unwrap();
        assert_eq!(res.arrivals.len(), 100);
        assert!(res.arrivals.iter().all(|a| (a.time - 1.0).abs() <= res.dt));
        assert!(res.is_conserved());
    }

    #[test]
    fn empty_schedule() {
        let mut sc = plug_scenario(0.1, 1);
        sc.injection.events.clear();
        let res = run(&sc, 1).unwrap();
        assert!(res.arrivals.is_empty());
        assert_eq!(
            (res.injected_count, res.in_flight_count, res.absorbed_count, res.expired_count),
            (0, 0, 0, 0)
        );
    }

    #[test]
    fn centreline_poiseuille_transit() {
        let mut sc = plug_scenario(0.05, 5);
        sc.flow = FlowField::poiseuille(0.05);
        sc.injection.release_radius_fraction = 0.0;
        let res = run(&sc, 9).unwrap();
        assert_eq!(res.arrivals.len(), 5);
        let expected = 0.1 / (2.0 * 0.05);
        assert!(res.arrivals.iter().all(|a| (a.time - expected).abs() <= res.dt));
    }

    #[test]
    fn injection_between_steps_keeps_exact_timing() {
        let mut sc = plug_scenario(0.1, 1);
        sc.injection.events = vec![InjectionEvent { time: 0.2345, count: 3 }];
        let res = run(&sc, 1).unwrap();
        for a in &res.arrivals {
            assert!((a.time - 1.2345).abs() < 1e-9);
        }
    }

    #[test]
    fn recirculation_echo_spacing() {
        let mut sc = plug_scenario(0.1, 20);
        sc.recirculation.enabled = true;
        sc.simulation.duration = 25.0;
        let res = run(&sc, 4).unwrap();
        let first: Vec<_> = res.arrivals.iter().filter(|a| a.pass_index == 1).collect();
        let second: Vec<_> = res.arrivals.iter().filter(|a| a.pass_index == 2).collect();
        assert_eq!(first.len(), 20);
        assert_eq!(second.len(), 20);
        for a in &second {
            let f = first.iter().find(|f| f.particle_id == a.particle_id).unwrap();
            assert!((a.time - f.time - 10.0).abs() <= res.dt);
        }
        assert!(res.arrivals.iter().all(|a| a.pass_index <= 3));
    }

    #[test]
    fn reservoir_delay_shifts_echo() {
        let mut sc = plug_scenario(0.1, 4);
        sc.recirculation.enabled = true;
        sc.recirculation.reservoir_delay = 2.5;
        sc.simulation.duration = 15.0;
        let res = run(&sc, 4).unwrap();
        let second: Vec<_> = res.arrivals.iter().filter(|a| a.pass_index == 2).collect();
        assert_eq!(second.len(), 4);
        for a in second {
            assert!((a.time - 13.5).abs() <= res.dt, "{}", a.time);
        }
    }

    #[test]
    fn absorbing_detector_counts_once() {
        let mut sc = plug_scenario(0.1, 10);
        sc.detector.mode = DetectorMode::Absorbing;
        sc.recirculation.enabled = true;
        sc.simulation.duration = 25.0;
        let res = run(&sc, 2).unwrap();
        assert_eq!(res.arrivals.len(), 10);
        assert_eq!(res.absorbed_count, 10);
        assert!(res.is_conserved());
    }

    #[test]
    fn disabled_recirculation_expires() {
        let mut sc = plug_scenario(0.1, 10);
        sc.simulation.duration = 12.0;
        let res = run(&sc, 2).unwrap();
        assert_eq!(res.expired_count, 10);
        assert_eq!(res.in_flight_count, 0);
    }

    #[test]
    fn rising_bubble_slides_along_top_wall() {
        let mut sc = plug_scenario(0.05, 1);
        sc.geometry.gravity = Vector3::new(0.0, 0.0, -9.81);
        sc.geometry.pipe_radius = 2e-4;
        sc.species = BubbleSpecies::monodisperse(6.6, 40e-6);
        sc.injection.release_radius_fraction = 0.0;
        sc.integrator.mode = IntegratorMode::ExponentialDrag;
        sc.simulation.duration = 0.6;
        sc.simulation.trajectory_stride = 10;
        let res = run(&sc, 3).unwrap();
        let last = res.trajectory.last().unwrap();
        let top = 2e-4 - 20e-6;
        assert!((last.position[2] - top).abs() < 1e-12, "z = {}", last.position[2]);
        // keeps moving axially with the (plug) near-wall fluid speed
        let prev = &res.trajectory[res.trajectory.len() - 2];
        let speed = (last.position[0] - prev.position[0]) / (last.time - prev.time);
        assert!((speed - 0.05).abs() < 1e-9, "{speed}");
    }

    #[test]
    fn numeric_blow_up_names_particle_and_step() {
        let mut sc = plug_scenario(0.1, 2);
        sc.flow = FlowField::plug(f64::MAX);
        sc.integrator.dt = Some(1e300);
        sc.simulation.duration = 1e4;
        sc.simulation.max_duration = 1e5;
        match run(&sc, 1) {
            Err(Error::Numeric { step, .. }) => assert!(step.is_some()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dt_rule() {
        let mut sc = plug_scenario(0.1, 1);
        sc.integrator.dt = None;
        // 0.05 * 0.002 / 0.1
        assert!((resolve_dt(&sc) - 1e-3).abs() < 1e-15);
        sc.injection.symbol_duration = Some(0.025);
        assert!((resolve_dt(&sc) - 5e-4).abs() < 1e-15);
        sc.flow = FlowField::poiseuille(0.1);
        sc.injection.symbol_duration = None;
        assert!((resolve_dt(&sc) - 5e-4).abs() < 1e-15);
        sc.flow = FlowField::plug(0.0);
        assert!((resolve_dt(&sc) - 2.0 / 1000.0).abs() < 1e-15);
    }
}
