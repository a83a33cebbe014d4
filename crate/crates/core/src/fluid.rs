//! Carrier media, loop geometry and the steady laminar velocity fields that
//! drive particle transport.
//!
//! The pipe axis is `x`; the cross-section is the `(y, z)` plane. All flow
//! fields are purely axial and axisymmetric.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::io::read_two_column_csv;

/// Reynolds number above which the laminar profile assumption is flagged.
pub const LAMINAR_LIMIT: f64 = 2300.0;

/// Header expected on tabulated profile CSV files.
pub const PROFILE_CSV_HEADER: [&str; 2] = ["r_over_R", "u_over_Umean"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidMedium {
    /// kg/m^3
    pub density: f64,
    /// Pa·s
    pub dynamic_viscosity: f64,
    /// K
    pub temperature: f64,
}

impl FluidMedium {
    /// Water near room temperature. Literature values, not measured testbed data.
    pub const fn water() -> Self {
        Self {
            density: 1000.0,
            dynamic_viscosity: 1.0e-3,
            temperature: 293.0,
        }
    }

    /// Newtonian blood analogue at body temperature. Literature values.
    pub const fn blood_like() -> Self {
        Self {
            density: 1060.0,
            dynamic_viscosity: 3.5e-3,
            temperature: 310.0,
        }
    }

    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        errs.check(
            self.density > 0.0 && self.density.is_finite(),
            &format!("{prefix}.density"),
            format!("must be > 0, got {}", self.density),
        );
        errs.check(
            self.dynamic_viscosity > 0.0 && self.dynamic_viscosity.is_finite(),
            &format!("{prefix}.dynamic_viscosity"),
            format!("must be > 0, got {}", self.dynamic_viscosity),
        );
        errs.check(
            self.temperature > 0.0 && self.temperature.is_finite(),
            &format!("{prefix}.temperature"),
            format!("must be > 0, got {}", self.temperature),
        );
    }
}

/// Straight-pipe abstraction of a closed circuit: the loop is axially
/// periodic with period `loop_length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoopGeometry {
    /// m
    pub pipe_radius: f64,
    /// Axial transmitter→detector distance, m.
    pub detector_distance: f64,
    /// Axial period of the circuit, m.
    pub loop_length: f64,
    /// m/s^2, expressed in pipe coordinates (x is the axis).
    pub gravity: Vector3<f64>,
}

impl LoopGeometry {
    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        errs.check(
            self.pipe_radius > 0.0 && self.pipe_radius.is_finite(),
            &format!("{prefix}.pipe_radius"),
            format!("must be > 0, got {}", self.pipe_radius),
        );
        errs.check(
            self.detector_distance > 0.0 && self.detector_distance < self.loop_length,
            &format!("{prefix}.detector_distance"),
            format!(
                "must satisfy 0 < detector_distance < loop_length, got {} (loop_length {})",
                self.detector_distance, self.loop_length
            ),
        );
        errs.check(
            self.loop_length.is_finite() && self.loop_length > 0.0,
            &format!("{prefix}.loop_length"),
            format!("must be finite and > 0, got {}", self.loop_length),
        );
        let g = self.gravity.norm();
        errs.check(
            (0.0..=20.0).contains(&g),
            &format!("{prefix}.gravity"),
            format!("magnitude must lie in [0, 20] m/s^2, got {g}"),
        );
    }
}

/// Radial distance from the pipe axis.
#[inline]
pub fn radial_distance(position: &Vector3<f64>) -> f64 {
    position.y.hypot(position.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Poiseuille,
    Plug,
    Tabulated,
}

/// Shape-preserving piecewise cubic Hermite interpolant (PCHIP) over `r/R`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileTable {
    nodes: Vec<f64>,
    values: Vec<f64>,
    #[serde(skip)]
    slopes: Vec<f64>,
}

impl ProfileTable {
    pub fn new(samples: &[(f64, f64)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("tabulated profile has no samples".into()));
        }
        if samples.len() < 2 {
            return Err(Error::Config(
                "tabulated profile needs at least two samples spanning r/R in [0, 1]".into(),
            ));
        }
        if samples.iter().any(|(r, u)| !r.is_finite() || !u.is_finite()) {
            return Err(Error::Config("tabulated profile contains non-finite values".into()));
        }
        let nodes: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let values: Vec<f64> = samples.iter().map(|s| s.1).collect();
        if nodes[0] != 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(Error::Config(
                "tabulated profile must start at r/R = 0.0 and end at r/R = 1.0".into(),
            ));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "tabulated profile r/R column must be strictly increasing".into(),
            ));
        }
        if values.iter().any(|&u| u < 0.0) {
            return Err(Error::Config(
                "tabulated profile u/U_mean must be non-negative".into(),
            ));
        }
        let slopes = pchip_slopes(&nodes, &values);
        Ok(Self {
            nodes,
            values,
            slopes,
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.values.iter().copied())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Interpolated `u/U_mean` at `r/R`, clamped to the table range.
    pub fn eval(&self, rho: f64) -> f64 {
        let n = self.nodes.len();
        if rho <= 0.0 {
            return self.values[0];
        }
        if rho >= 1.0 {
            return self.values[n - 1];
        }
        // First node strictly greater than rho; segment is [k, k+1].
        let k = self.nodes.partition_point(|&x| x <= rho) - 1;
        let (x0, x1) = (self.nodes[k], self.nodes[k + 1]);
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        let (d0, d1) = (self.slopes[k], self.slopes[k + 1]);
        let h = x1 - x0;
        let t = (rho - x0) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
    }
}

impl<'de> Deserialize<'de> for ProfileTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            nodes: Vec<f64>,
            values: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        if raw.nodes.len() != raw.values.len() {
            return Err(serde::de::Error::custom("nodes and values differ in length"));
        }
        let samples: Vec<(f64, f64)> = raw.nodes.into_iter().zip(raw.values).collect();
        ProfileTable::new(&samples).map_err(serde::de::Error::custom)
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    d[0] = pchip_edge(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = pchip_edge(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn pchip_edge(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// Steady axial velocity field `u(r)` scaled by `mean_velocity`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowField {
    pub kind: ProfileKind,
    /// m/s
    pub mean_velocity: f64,
    pub table: Option<ProfileTable>,
}

impl FlowField {
    pub fn poiseuille(mean_velocity: f64) -> Self {
        Self {
            kind: ProfileKind::Poiseuille,
            mean_velocity,
            table: None,
        }
    }

    pub fn plug(mean_velocity: f64) -> Self {
        Self {
            kind: ProfileKind::Plug,
            mean_velocity,
            table: None,
        }
    }

    pub fn tabulated(mean_velocity: f64, samples: &[(f64, f64)]) -> Result<Self> {
        Ok(Self {
            kind: ProfileKind::Tabulated,
            mean_velocity,
            table: Some(ProfileTable::new(samples)?),
        })
    }

    /// Builds a field of the given kind; the table is required for
    /// [`ProfileKind::Tabulated`] and ignored otherwise.
    pub fn new(kind: ProfileKind, mean_velocity: f64, table: Option<ProfileTable>) -> Result<Self> {
        match kind {
            ProfileKind::Tabulated => match table {
                Some(t) => Ok(Self {
                    kind,
                    mean_velocity,
                    table: Some(t),
                }),
                None => Err(Error::Config(
                    "tabulated profile selected but no table was supplied".into(),
                )),
            },
            _ => Ok(Self {
                kind,
                mean_velocity,
                table: None,
            }),
        }
    }

    pub fn with_mean_velocity(&self, mean_velocity: f64) -> Self {
        Self {
            mean_velocity,
            ..self.clone()
        }
    }

    /// `u/U_mean` at normalized radius `rho = r/R`, clamped to `[0, 1]`.
    #[inline]
    pub fn shape(&self, rho: f64) -> f64 {
        let rho = rho.clamp(0.0, 1.0);
        match self.kind {
            ProfileKind::Poiseuille => 2.0 * (1.0 - rho * rho),
            ProfileKind::Plug => 1.0,
            ProfileKind::Tabulated => self
                .table
                .as_ref()
                .expect("tabulated flow field always carries a table")
                .eval(rho),
        }
    }

    /// Axial speed at radial distance `r`; radii beyond the wall take the wall value.
    #[inline]
    pub fn axial_speed(&self, r: f64, pipe_radius: f64) -> f64 {
        self.mean_velocity * self.shape(r / pipe_radius)
    }

    /// Largest axial speed anywhere in the cross-section.
    pub fn max_speed(&self) -> f64 {
        let peak = match self.kind {
            ProfileKind::Poiseuille => 2.0,
            ProfileKind::Plug => 1.0,
            ProfileKind::Tabulated => self.table.as_ref().map_or(0.0, ProfileTable::max_value),
        };
        self.mean_velocity * peak
    }

    /// Cross-sectional mean of the profile shape; exactly 1 for a consistent table.
    pub fn shape_mean(&self) -> f64 {
        // integral of shape(rho) * 2 rho over [0, 1]
        gauss_legendre(|rho| self.shape(rho) * 2.0 * rho, 0.0, 1.0, 256)
    }

    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        errs.check(
            self.mean_velocity >= 0.0 && self.mean_velocity.is_finite(),
            &format!("{prefix}.mean_velocity"),
            format!("must be >= 0, got {}", self.mean_velocity),
        );
        if self.kind == ProfileKind::Tabulated && self.table.is_none() {
            errs.push(format!("{prefix}.table"), "tabulated profile requires a table");
        }
    }
}

/// Fluid velocity at `position`. Purely axial.
#[inline]
pub fn velocity_at(field: &FlowField, geom: &LoopGeometry, position: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        field.axial_speed(radial_distance(position), geom.pipe_radius),
        0.0,
        0.0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelReynolds {
    pub value: f64,
    /// Set when the value exceeds [`LAMINAR_LIMIT`].
    pub laminar_violated: bool,
}

/// Channel Reynolds number `ρ U_mean 2R / μ`.
pub fn channel_reynolds(medium: &FluidMedium, geom: &LoopGeometry, field: &FlowField) -> ChannelReynolds {
    let value = medium.density * field.mean_velocity * 2.0 * geom.pipe_radius / medium.dynamic_viscosity;
    ChannelReynolds {
        value,
        laminar_violated: value > LAMINAR_LIMIT,
    }
}

/// Volumetric flow rate `U_mean π R²`.
pub fn flow_rate(field: &FlowField, geom: &LoopGeometry) -> f64 {
    field.mean_velocity * PI * geom.pipe_radius * geom.pipe_radius
}

/// Flow rate by integrating `u(r) 2πr` over the cross-section with
/// `panels` Gauss–Legendre panels. Cross-check for [`flow_rate`].
pub fn flow_rate_quadrature(field: &FlowField, geom: &LoopGeometry, panels: usize) -> f64 {
    let radius = geom.pipe_radius;
    gauss_legendre(
        |r| field.axial_speed(r, radius) * 2.0 * PI * r,
        0.0,
        radius,
        panels,
    )
}

/// Composite 5-point Gauss–Legendre rule.
fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|p| {
            let lo = a + p as f64 * h;
            let mid = lo + 0.5 * h;
            NODES
                .iter()
                .zip(WEIGHTS.iter())
                .map(|(x, w)| w * f(mid + 0.5 * h * x))
                .sum::<f64>()
                * 0.5
                * h
        })
        .sum()
}

/// Loads a tabulated profile from CSV with header `r_over_R,u_over_Umean`.
pub fn load_profile_csv(path: &Path) -> Result<ProfileTable> {
    let text = std::fs::read_to_string(path)?;
    parse_profile_csv(&text)
}

pub fn parse_profile_csv(text: &str) -> Result<ProfileTable> {
    let rows = read_two_column_csv(text, PROFILE_CSV_HEADER)?;
    ProfileTable::new(&rows)
}
