//! TOML configuration loading.
//!
//! Every key is optional; missing keys take the values of
//! [`Scenario::default`], which mirror `config/default.toml`. Unknown keys and
//! type mismatches are reported together with range violations, each under
//! its dotted key.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use toml::{Table, Value};

use crate::bubble::{BubbleSpecies, DiameterDistribution, IntegratorMode};
use crate::error::{Error, Result, ValidationError};
use crate::fluid::{load_profile_csv, FlowField, FluidMedium, ProfileKind};
use crate::scenario::Scenario;
use crate::transport::{DetectorMode, InitialVelocity, InjectionEvent, InjectionSchedule};

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

const SECTIONS: [&str; 11] = [
    "simulation",
    "medium",
    "geometry",
    "flow",
    "species",
    "injection",
    "detector",
    "recirculation",
    "integrator",
    "comm",
    "studies",
];

/// Typed access to one table that remembers which keys were read.
struct Section<'a> {
    prefix: String,
    table: Option<&'a Table>,
    used: BTreeSet<&'static str>,
}

impl<'a> Section<'a> {
    fn new(prefix: impl Into<String>, table: Option<&'a Table>) -> Self {
        Self {
            prefix: prefix.into(),
            table,
            used: BTreeSet::new(),
        }
    }

    fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    fn raw(&mut self, name: &'static str) -> Option<&'a Value> {
        self.used.insert(name);
        self.table.and_then(|t| t.get(name))
    }

    fn has(&self, name: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(name))
    }

    fn opt_f64(&mut self, name: &'static str, errs: &mut ValidationError) -> Option<f64> {
        match self.raw(name)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            other => {
                errs.push(self.key(name), format!("expected a number, got {}", other.type_str()));
                None
            }
        }
    }

    fn f64(&mut self, name: &'static str, default: f64, errs: &mut ValidationError) -> f64 {
        self.opt_f64(name, errs).unwrap_or(default)
    }

    fn opt_u64(&mut self, name: &'static str, errs: &mut ValidationError) -> Option<u64> {
        match self.raw(name)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            other => {
                errs.push(
                    self.key(name),
                    format!("expected a non-negative integer, got {other}"),
                );
                None
            }
        }
    }

    fn u64(&mut self, name: &'static str, default: u64, errs: &mut ValidationError) -> u64 {
        self.opt_u64(name, errs).unwrap_or(default)
    }

    fn bool(&mut self, name: &'static str, default: bool, errs: &mut ValidationError) -> bool {
        match self.raw(name) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(other) => {
                errs.push(self.key(name), format!("expected a boolean, got {}", other.type_str()));
                default
            }
        }
    }

    fn opt_str(&mut self, name: &'static str, errs: &mut ValidationError) -> Option<&'a str> {
        match self.raw(name)? {
            Value::String(s) => Some(s.as_str()),
            other => {
                errs.push(self.key(name), format!("expected a string, got {}", other.type_str()));
                None
            }
        }
    }

    /// Reads a string restricted to `choices`.
    fn choice<T: Copy>(
        &mut self,
        name: &'static str,
        choices: &[(&str, T)],
        default: T,
        errs: &mut ValidationError,
    ) -> T {
        let Some(s) = self.opt_str(name, errs) else {
            return default;
        };
        match choices.iter().find(|(k, _)| *k == s) {
            Some((_, v)) => *v,
            None => {
                let names: Vec<&str> = choices.iter().map(|(k, _)| *k).collect();
                errs.push(
                    self.key(name),
                    format!("unknown value \"{s}\", expected one of {}", names.join(", ")),
                );
                default
            }
        }
    }

    fn f64_list(&mut self, name: &'static str, errs: &mut ValidationError) -> Option<Vec<f64>> {
        let key = self.key(name);
        let Value::Array(items) = self.raw(name)? else {
            errs.push(key, "expected an array of numbers");
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            match item {
                Value::Float(f) => out.push(*f),
                Value::Integer(i) => out.push(*i as f64),
                other => {
                    errs.push(key, format!("expected numbers, found {}", other.type_str()));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn sub(&mut self, name: &'static str, errs: &mut ValidationError) -> Option<&'a Table> {
        match self.raw(name)? {
            Value::Table(t) => Some(t),
            other => {
                errs.push(self.key(name), format!("expected a table, got {}", other.type_str()));
                None
            }
        }
    }

    /// Reports keys that were never read.
    fn finish(self, errs: &mut ValidationError) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.used.contains(k.as_str()) {
                    errs.push(format!("{}.{k}", self.prefix), "unknown key");
                }
            }
        }
    }
}

fn read_medium(mut s: Section<'_>, default: FluidMedium, errs: &mut ValidationError) -> FluidMedium {
    let base = s.choice(
        "preset",
        &[("water", FluidMedium::water()), ("blood_like", FluidMedium::blood_like())],
        default,
        errs,
    );
    let m = FluidMedium {
        density: s.f64("density", base.density, errs),
        dynamic_viscosity: s.f64("dynamic_viscosity", base.dynamic_viscosity, errs),
        temperature: s.f64("temperature", base.temperature, errs),
    };
    s.finish(errs);
    m
}

/// Parses a configuration with relative paths resolved against the working directory.
pub fn parse_config(text: &str) -> Result<Scenario> {
    parse_config_with_base(text, Path::new("."))
}

pub fn parse_config_with_base(text: &str, base_dir: &Path) -> Result<Scenario> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("TOML syntax: {e}")))?;
    scenario_from_table(&table, base_dir)
}

/// Reads a configuration file; relative paths inside it resolve against its directory.
pub fn load_config(path: &Path) -> Result<Scenario> {
    load_config_with_overrides(path, &[])
}

/// Reads a configuration file after applying `key.path=value` overrides.
pub fn load_config_with_overrides(path: &Path, overrides: &[String]) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut table, overrides)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    scenario_from_table(&table, &base)
}

/// Applies `a.b.c=value` overrides. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override \"{item}\" is not of the form key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("override key \"{path}\" is malformed")));
        }
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let mut cursor = &mut *table;
        for k in &keys[..keys.len() - 1] {
            let entry = cursor
                .entry(k.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            cursor = match entry {
                Value::Table(t) => t,
                _ => return Err(Error::Config(format!("override \"{path}\": \"{k}\" is not a table"))),
            };
        }
        cursor.insert(keys[keys.len() - 1].to_string(), value);
    }
    Ok(())
}

/// Builds and validates a scenario from a parsed TOML tree.
pub fn scenario_from_table(root: &Table, base_dir: &Path) -> Result<Scenario> {
    let mut errs = ValidationError::default();
    let mut sc = Scenario::default();

    for (k, v) in root {
        if !SECTIONS.contains(&k.as_str()) {
            errs.push(k.clone(), "unknown section");
        } else if !v.is_table() {
            errs.push(k.clone(), "expected a table");
        }
    }
    let section = |name: &str| Section::new(name, root.get(name).and_then(Value::as_table));

    // simulation
    let mut s = section("simulation");
    let d = sc.simulation;
    sc.simulation.duration = s.f64("duration", d.duration, &mut errs);
    sc.simulation.max_particles = s.u64("max_particles", d.max_particles, &mut errs);
    sc.simulation.max_duration = s.f64("max_duration", d.max_duration, &mut errs);
    sc.simulation.trajectory_stride = s.u64("trajectory_stride", d.trajectory_stride, &mut errs);
    s.finish(&mut errs);

    sc.medium = read_medium(section("medium"), sc.medium, &mut errs);

    // geometry
    let mut s = section("geometry");
    let g = sc.geometry;
    sc.geometry.pipe_radius = s.f64("pipe_radius", g.pipe_radius, &mut errs);
    sc.geometry.detector_distance = s.f64("detector_distance", g.detector_distance, &mut errs);
    sc.geometry.loop_length = s.f64("loop_length", g.loop_length, &mut errs);
    if let Some(v) = s.f64_list("gravity", &mut errs) {
        if v.len() == 3 {
            sc.geometry.gravity = Vector3::new(v[0], v[1], v[2]);
        } else {
            errs.push("geometry.gravity", format!("expected 3 components, got {}", v.len()));
        }
    }
    s.finish(&mut errs);
    sc.detector.axial_position = sc.geometry.detector_distance;

    // flow
    let mut s = section("flow");
    let kind = s.choice(
        "profile",
        &[
            ("poiseuille", ProfileKind::Poiseuille),
            ("plug", ProfileKind::Plug),
            ("tabulated", ProfileKind::Tabulated),
        ],
        sc.flow.kind,
        &mut errs,
    );
    let u = s.f64("mean_velocity", sc.flow.mean_velocity, &mut errs);
    let table_path = s.opt_str("table", &mut errs);
    match (kind, table_path) {
        (ProfileKind::Tabulated, None) => {
            errs.push("flow.table", "required when flow.profile = \"tabulated\"");
        }
        (ProfileKind::Tabulated, Some(p)) => match load_profile_csv(&base_dir.join(p)) {
            Ok(table) => sc.flow = FlowField::new(kind, u, Some(table))?,
            Err(e) => errs.push("flow.table", e.to_string()),
        },
        (_, Some(_)) => errs.push("flow.table", "only used with flow.profile = \"tabulated\""),
        (_, None) => sc.flow = FlowField::new(kind, u, None)?,
    }
    s.finish(&mut errs);

    // species
    let mut s = section("species");
    let gas_density = s.f64("gas_density", sc.species.gas_density, &mut errs);
    #[derive(Clone, Copy)]
    enum Dist {
        Mono,
        LogNormal,
    }
    let default_kind = match sc.species.distribution {
        DiameterDistribution::Monodisperse { .. } => Dist::Mono,
        DiameterDistribution::LogNormal { .. } => Dist::LogNormal,
    };
    let kind = s.choice(
        "distribution",
        &[("monodisperse", Dist::Mono), ("lognormal", Dist::LogNormal)],
        default_kind,
        &mut errs,
    );
    let DiameterDistribution::LogNormal {
        median,
        geometric_sigma,
        min,
        max,
    } = BubbleSpecies::sonovue_like().distribution
    else {
        unreachable!("default population is lognormal")
    };
    let distribution = match kind {
        Dist::Mono => {
            for k in ["median", "geometric_sigma", "min", "max"] {
                if s.has(k) {
                    errs.push(format!("species.{k}"), "only used with species.distribution = \"lognormal\"");
                }
            }
            let _ = (s.raw("median"), s.raw("geometric_sigma"), s.raw("min"), s.raw("max"));
            DiameterDistribution::Monodisperse {
                diameter: s.f64("diameter", median, &mut errs),
            }
        }
        Dist::LogNormal => {
            if s.has("diameter") {
                errs.push("species.diameter", "only used with species.distribution = \"monodisperse\"");
            }
            let _ = s.raw("diameter");
            DiameterDistribution::LogNormal {
                median: s.f64("median", median, &mut errs),
                geometric_sigma: s.f64("geometric_sigma", geometric_sigma, &mut errs),
                min: s.f64("min", min, &mut errs),
                max: s.f64("max", max, &mut errs),
            }
        }
    };
    sc.species = BubbleSpecies {
        gas_density,
        distribution,
    };
    s.finish(&mut errs);

    // injection
    let mut s = section("injection");
    let count = s.opt_u64("count", &mut errs);
    let events = match s.raw("events") {
        None => None,
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                let mut e = Section::new(format!("injection.events[{i}]"), item.as_table());
                if item.as_table().is_none() {
                    errs.push(e.prefix.clone(), "expected a table with time and count");
                    continue;
                }
                let time = e.f64("time", 0.0, &mut errs);
                let count = e.u64("count", 0, &mut errs);
                if !e.has("count") {
                    errs.push(e.key("count"), "missing");
                }
                e.finish(&mut errs);
                out.push(InjectionEvent { time, count });
            }
            Some(out)
        }
        Some(_) => {
            errs.push("injection.events", "expected an array of tables");
            None
        }
    };
    let mut schedule = match (count, events) {
        (Some(_), Some(_)) => {
            errs.push("injection", "set either count or events, not both");
            InjectionSchedule::impulse(0)
        }
        (Some(n), None) => InjectionSchedule::impulse(n),
        (None, Some(ev)) => InjectionSchedule {
            events: ev,
            ..InjectionSchedule::default()
        },
        (None, None) => sc.injection.clone(),
    };
    schedule.release_radius_fraction =
        s.f64("release_radius_fraction", schedule.release_radius_fraction, &mut errs);
    schedule.initial_velocity = s.choice(
        "initial_velocity",
        &[("local_fluid", InitialVelocity::LocalFluid), ("zero", InitialVelocity::Zero)],
        schedule.initial_velocity,
        &mut errs,
    );
    sc.injection = schedule;
    s.finish(&mut errs);

    // detector
    let mut s = section("detector");
    sc.detector.mode = s.choice(
        "mode",
        &[("transparent", DetectorMode::Transparent), ("absorbing", DetectorMode::Absorbing)],
        sc.detector.mode,
        &mut errs,
    );
    let passes = s.u64("max_passes_recorded", u64::from(sc.detector.max_passes_recorded), &mut errs);
    sc.detector.max_passes_recorded = u32::try_from(passes).unwrap_or(u32::MAX);
    s.finish(&mut errs);

    // recirculation
    let mut s = section("recirculation");
    let r = sc.recirculation;
    sc.recirculation.enabled = s.bool("enabled", r.enabled, &mut errs);
    sc.recirculation.reservoir_delay = s.f64("reservoir_delay", r.reservoir_delay, &mut errs);
    sc.recirculation.remix_radial = s.bool("remix_radial", r.remix_radial, &mut errs);
    s.finish(&mut errs);

    // integrator
    let mut s = section("integrator");
    let i = sc.integrator;
    sc.integrator.mode = s.choice(
        "mode",
        &[
            ("exponential_drag", IntegratorMode::ExponentialDrag),
            ("equilibrium", IntegratorMode::Equilibrium),
        ],
        i.mode,
        &mut errs,
    );
    sc.integrator.dt = s.opt_f64("dt", &mut errs).or(i.dt);
    sc.integrator.brownian_enabled = s.bool("brownian", i.brownian_enabled, &mut errs);
    sc.integrator.added_mass_coefficient =
        s.f64("added_mass_coefficient", i.added_mass_coefficient, &mut errs);
    s.finish(&mut errs);

    // comm
    let mut s = section("comm");
    let c = sc.comm.clone();
    sc.comm.symbol_duration = s.f64("symbol_duration", c.symbol_duration, &mut errs);
    sc.comm.bubbles_per_one = s.u64("bubbles_per_one", c.bubbles_per_one, &mut errs);
    sc.comm.guard_bins = u32::try_from(s.u64("guard_bins", u64::from(c.guard_bins), &mut errs)).unwrap_or(u32::MAX);
    sc.comm.n_bits = s.u64("n_bits", c.n_bits as u64, &mut errs) as usize;
    sc.comm.training_bits = s.u64("training_bits", c.training_bits as u64, &mut errs) as usize;
    sc.comm.trials = s.u64("trials", c.trials as u64, &mut errs) as usize;
    sc.comm.bin_width = s.opt_f64("bin_width", &mut errs).or(c.bin_width);
    if let Some(list) = s.f64_list("thresholds", &mut errs) {
        if list.iter().all(|v| *v >= 0.0 && v.fract() == 0.0) {
            sc.comm.thresholds = Some(list.iter().map(|v| *v as u64).collect());
        } else {
            errs.push("comm.thresholds", "expected non-negative integers");
        }
    }
    sc.comm.window_offset = s.opt_f64("window_offset", &mut errs).or(c.window_offset);
    sc.comm.window_width = s.opt_f64("window_width", &mut errs).or(c.window_width);
    if let Some(list) = s.f64_list("tsym_list", &mut errs) {
        sc.comm.tsym_list = list;
    }
    s.finish(&mut errs);

    // studies
    let mut s = section("studies");
    let st = sc.studies.clone();
    sc.studies.high_velocity = s.f64("high_velocity", st.high_velocity, &mut errs);
    sc.studies.physiological_velocity = s.f64("physiological_velocity", st.physiological_velocity, &mut errs);
    sc.studies.reference_period = s.f64("reference_period", st.reference_period, &mut errs);
    sc.studies.seeds = s.u64("seeds", st.seeds as u64, &mut errs) as usize;
    sc.studies.resample_points = s.u64("resample_points", st.resample_points as u64, &mut errs) as usize;
    sc.studies.lag_window = s.opt_f64("lag_window", &mut errs).or(st.lag_window);
    sc.studies.measured_path = s
        .opt_str("measured_path", &mut errs)
        .map(|p| base_dir.join(p).to_string_lossy().into_owned())
        .or(st.measured_path);
    let water = s.sub("water", &mut errs);
    sc.studies.water = read_medium(Section::new("studies.water", water), st.water, &mut errs);
    let blood = s.sub("blood_like", &mut errs);
    sc.studies.blood_like = read_medium(Section::new("studies.blood_like", blood), st.blood_like, &mut errs);
    s.finish(&mut errs);

    if errs.is_empty() {
        sc.validate_into(&mut errs);
    }
    errs.into_result().map(|_| sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issues(text: &str) -> ValidationError {
        match parse_config(text) {
            Err(Error::Validation(v)) => v,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn shipped_defaults_match_code_defaults() {
        assert_eq!(parse_config(DEFAULT_CONFIG).unwrap(), Scenario::default());
    }

    #[test]
    fn empty_config_is_default() {
        assert_eq!(parse_config("").unwrap(), Scenario::default());
    }

    #[test]
    fn reads_every_section() {
        let sc = parse_config(
            r#"
            [simulation]
            duration = 10
            [medium]
            preset = "blood_like"
            [geometry]
            pipe_radius = 1e-3
            detector_distance = 0.2
            loop_length = 1.0
            gravity = [0, 0, 0]
            [flow]
            profile = "plug"
            mean_velocity = 0.05
            [species]
            distribution = "monodisperse"
            diameter = 3e-6
            [injection]
            events = [{ time = 0.0, count = 10 }, { time = 1.5, count = 5 }]
            initial_velocity = "zero"
            [detector]
            mode = "absorbing"
            [recirculation]
            enabled = false
            [integrator]
            mode = "equilibrium"
            dt = 0.01
            brownian = false
            [comm]
            tsym_list = [1, 2]
            [studies]
            reference_period = 30
            [studies.water]
            temperature = 300
            "#,
        )
        .unwrap();
        assert_eq!(sc.simulation.duration, 10.0);
        assert_eq!(sc.medium, FluidMedium::blood_like());
        assert_eq!(sc.detector.axial_position, 0.2);
        assert_eq!(sc.flow, FlowField::plug(0.05));
        assert_eq!(sc.species.distribution, DiameterDistribution::Monodisperse { diameter: 3e-6 });
        assert_eq!(sc.injection.total_count(), 15);
        assert_eq!(sc.injection.initial_velocity, InitialVelocity::Zero);
        assert_eq!(sc.detector.mode, DetectorMode::Absorbing);
        assert!(!sc.recirculation.enabled);
        assert_eq!(sc.integrator.dt, Some(0.01));
        assert_eq!(sc.comm.tsym_list, vec![1.0, 2.0]);
        assert_eq!(sc.studies.reference_period, 30.0);
        assert_eq!(sc.studies.water.temperature, 300.0);
        assert_eq!(sc.studies.water.density, 1000.0);
    }

    #[test]
    fn all_problems_reported_together() {
        let v = issues(
            r#"
            [medium]
            dynamic_viscosity = -1
            [geometry]
            pipe_radius = 0
            "#,
        );
        assert!(v.mentions("medium.dynamic_viscosity"), "{v}");
        assert!(v.mentions("geometry.pipe_radius"), "{v}");
    }

    #[test]
    fn unknown_keys_and_sections() {
        let v = issues("[flow]\nmean_velocty = 0.1\n[bogus]\nx = 1\n");
        assert!(v.mentions("flow.mean_velocty"));
        assert!(v.mentions("bogus"));
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let v = issues("[simulation]\nduration = \"long\"\n");
        assert!(v.mentions("simulation.duration"));
        let v = issues("[flow]\nprofile = \"turbulent\"\n");
        assert!(v.mentions("flow.profile"));
    }

    #[test]
    fn tabulated_profile_resolves_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("profile.csv"),
            "r_over_R,u_over_Umean\n0.0,1.5\n0.5,1.2\n1.0,0.0\n",
        )
        .unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "[flow]\nprofile = \"tabulated\"\ntable = \"profile.csv\"\n").unwrap();
        let sc = load_config(&cfg).unwrap();
        assert_eq!(sc.flow.kind, ProfileKind::Tabulated);
        assert_eq!(sc.flow.shape(0.5), 1.2);

        let v = issues("[flow]\nprofile = \"tabulated\"\n");
        assert!(v.mentions("flow.table"));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut t: Table = "[flow]\nmean_velocity = 0.1\n".parse().unwrap();
        apply_overrides(
            &mut t,
            &[
                "flow.mean_velocity=0.3".into(),
                "flow.profile=plug".into(),
                "comm.tsym_list=[1.0, 4.0]".into(),
            ],
        )
        .unwrap();
        let sc = scenario_from_table(&t, Path::new(".")).unwrap();
        assert_eq!(sc.flow, FlowField::plug(0.3));
        assert_eq!(sc.comm.tsym_list, vec![1.0, 4.0]);
        assert!(apply_overrides(&mut t, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut t, &["flow.mean_velocity.x=1".into()]).is_err());
    }

    #[test]
    fn count_and_events_conflict() {
        let v = issues("[injection]\ncount = 5\nevents = [{ time = 0.0, count = 1 }]\n");
        assert!(v.mentions("injection"));
    }

    #[test]
    fn syntax_error_is_config_error() {
        let e = parse_config("[flow\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.is_validation());
    }
}
