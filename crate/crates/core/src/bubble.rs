//! Microbubble force models and the single-particle velocity/position update.
//!
//! Drag follows Schiller–Naumann written as a multiplier on Stokes drag,
//! `F = 3πμd (u − v) φ(Re_p)`, so the Stokes limit needs no division by a
//! vanishing Reynolds number. Gravity and buoyancy combine into one net weight
//! term. In a steady, fully developed profile `Du/Dt = 0`, so the added-mass
//! and pressure-gradient driving terms vanish and added mass only augments the
//! particle inertia in the relaxation time.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::fluid::FluidMedium;

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Largest admissible bubble diameter, m.
pub const MAX_DIAMETER: f64 = 100e-6;

/// Particle Reynolds number above which the Newton-regime drag branch applies.
pub const NEWTON_REGIME_RE: f64 = 1000.0;

const RISE_MAX_ITERATIONS: usize = 20;
const RISE_TOLERANCE: f64 = 1e-10;
const RISE_RESIDUAL_LIMIT: f64 = 1e-8;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiameterDistribution {
    Monodisperse {
        diameter: f64,
    },
    /// Lognormal in diameter, truncated to `[min, max]` by rejection.
    LogNormal {
        median: f64,
        geometric_sigma: f64,
        min: f64,
        max: f64,
    },
}

impl DiameterDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            DiameterDistribution::Monodisperse { diameter } => Ok(diameter),
            DiameterDistribution::LogNormal {
                median,
                geometric_sigma,
                min,
                max,
            } => {
                let dist = LogNormal::new(median.ln(), geometric_sigma.ln())
                    .map_err(|e| Error::Config(format!("lognormal diameter distribution: {e}")))?;
                for _ in 0..MAX_REJECTIONS {
                    let d = dist.sample(rng);
                    if (min..=max).contains(&d) {
                        return Ok(d);
                    }
                }
                Err(Error::Config(format!(
                    "no diameter in [{min}, {max}] after {MAX_REJECTIONS} draws; truncation window carries negligible mass"
                )))
            }
        }
    }

    /// Largest diameter the distribution can produce.
    pub fn upper_bound(&self) -> f64 {
        match *self {
            DiameterDistribution::Monodisperse { diameter } => diameter,
            DiameterDistribution::LogNormal { max, .. } => max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleSpecies {
    /// Gas density, kg/m^3.
    pub gas_density: f64,
    pub distribution: DiameterDistribution,
}

impl BubbleSpecies {
    /// SF6-filled lipid-shelled agent, loosely modelled on clinical contrast
    /// agents. Literature-informed defaults.
    pub fn sonovue_like() -> Self {
        Self {
            gas_density: 6.6,
            distribution: DiameterDistribution::LogNormal {
                median: 2.5e-6,
                geometric_sigma: 1.6,
                min: 1.0e-6,
                max: 10.0e-6,
            },
        }
    }

    pub fn monodisperse(gas_density: f64, diameter: f64) -> Self {
        Self {
            gas_density,
            distribution: DiameterDistribution::Monodisperse { diameter },
        }
    }

    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        let in_range = |d: f64| d > 0.0 && d <= MAX_DIAMETER;
        errs.check(
            self.gas_density >= 0.0 && self.gas_density.is_finite(),
            &format!("{prefix}.gas_density"),
            format!("must be >= 0, got {}", self.gas_density),
        );
        match self.distribution {
            DiameterDistribution::Monodisperse { diameter } => errs.check(
                in_range(diameter),
                &format!("{prefix}.diameter"),
                format!("must lie in (0, {MAX_DIAMETER}] m, got {diameter}"),
            ),
            DiameterDistribution::LogNormal {
                median,
                geometric_sigma,
                min,
                max,
            } => {
                errs.check(
                    median > 0.0 && median.is_finite(),
                    &format!("{prefix}.median"),
                    format!("must be > 0, got {median}"),
                );
                errs.check(
                    geometric_sigma >= 1.0 && geometric_sigma.is_finite(),
                    &format!("{prefix}.geometric_sigma"),
                    format!("must be >= 1, got {geometric_sigma}"),
                );
                errs.check(
                    in_range(min),
                    &format!("{prefix}.min"),
                    format!("must lie in (0, {MAX_DIAMETER}] m, got {min}"),
                );
                errs.check(
                    in_range(max),
                    &format!("{prefix}.max"),
                    format!("must lie in (0, {MAX_DIAMETER}] m, got {max}"),
                );
                errs.check(
                    min < max,
                    &format!("{prefix}.min"),
                    format!("must be below max ({min} >= {max})"),
                );
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleStatus {
    InFlight,
    Absorbed,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub id: u64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub diameter: f64,
    pub pass_count: u32,
    pub status: ParticleStatus,
}

impl ParticleState {
    pub fn new(id: u64, position: Vector3<f64>, velocity: Vector3<f64>, diameter: f64) -> Self {
        Self {
            id,
            position,
            velocity,
            diameter,
            pass_count: 0,
            status: ParticleStatus::InFlight,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.diameter.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorMode {
    /// Exact exponential relaxation toward the local equilibrium velocity.
    ExponentialDrag,
    /// Velocity pinned to the equilibrium velocity (massless limit).
    Equilibrium,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub mode: IntegratorMode,
    /// Time step, s. `None` selects the automatic rule of the transport engine.
    pub dt: Option<f64>,
    pub brownian_enabled: bool,
    pub added_mass_coefficient: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            mode: IntegratorMode::ExponentialDrag,
            dt: None,
            brownian_enabled: true,
            added_mass_coefficient: 0.5,
        }
    }
}

impl IntegratorConfig {
    pub fn validate_into(&self, prefix: &str, errs: &mut ValidationError) {
        if let Some(dt) = self.dt {
            errs.check(
                dt > 0.0 && dt.is_finite(),
                &format!("{prefix}.dt"),
                format!("must be > 0, got {dt}"),
            );
        }
        errs.check(
            (0.0..=1.0).contains(&self.added_mass_coefficient),
            &format!("{prefix}.added_mass_coefficient"),
            format!("must lie in [0, 1], got {}", self.added_mass_coefficient),
        );
    }
}

/// `Re_p = ρ_f |u − v| d / μ`.
#[inline]
pub fn particle_reynolds(medium: &FluidMedium, diameter: f64, slip_speed: f64) -> f64 {
    medium.density * slip_speed * diameter / medium.dynamic_viscosity
}

/// Schiller–Naumann correction to Stokes drag.
#[inline]
pub fn drag_multiplier(re_p: f64) -> Result<f64> {
    if !(re_p >= 0.0) {
        return Err(Error::Domain(format!(
            "particle Reynolds number must be >= 0, got {re_p}"
        )));
    }
    Ok(if re_p <= NEWTON_REGIME_RE {
        1.0 + 0.15 * re_p.powf(0.687)
    } else {
        0.44 * re_p / 24.0
    })
}

/// Drag coefficient `C_D = 24 φ / Re_p`; only meaningful for `Re_p > 0`.
pub fn drag_coefficient(re_p: f64) -> Result<f64> {
    Ok(24.0 * drag_multiplier(re_p)? / re_p)
}

/// Drag force on `p` from fluid moving at `u_fluid`.
pub fn drag_force(medium: &FluidMedium, p: &ParticleState, u_fluid: &Vector3<f64>) -> Vector3<f64> {
    let slip = u_fluid - p.velocity;
    let re = particle_reynolds(medium, p.diameter, slip.norm());
    let phi = drag_multiplier(re).expect("slip norm is non-negative");
    slip * (3.0 * PI * medium.dynamic_viscosity * p.diameter * phi)
}

/// Sphere volume `π d³ / 6`.
#[inline]
pub fn sphere_volume(diameter: f64) -> f64 {
    PI * diameter.powi(3) / 6.0
}

/// Gravity plus buoyancy, `(ρ_p − ρ_f) V g`.
pub fn net_weight_force(medium: &FluidMedium, gas_density: f64, diameter: f64, gravity: &Vector3<f64>) -> Vector3<f64> {
    gravity * ((gas_density - medium.density) * sphere_volume(diameter))
}

/// Added-mass-corrected Stokes relaxation time `(ρ_p + C_am ρ_f) d² / (18 μ)`.
pub fn relaxation_time(medium: &FluidMedium, gas_density: f64, diameter: f64, added_mass: f64) -> f64 {
    (gas_density + added_mass * medium.density) * diameter * diameter
        / (18.0 * medium.dynamic_viscosity)
}

/// Terminal velocity from the balance `3πμd v φ(Re_p(v)) = (ρ_f − ρ_p) V g`.
///
/// Positive means rising against gravity; a heavier-than-fluid particle gets
/// the (negative) settling analogue.
pub fn terminal_rise_velocity(medium: &FluidMedium, gas_density: f64, diameter: f64, gravity_magnitude: f64) -> Result<f64> {
    let delta_rho = medium.density - gas_density;
    if delta_rho == 0.0 || gravity_magnitude == 0.0 {
        return Ok(0.0);
    }
    let mu = medium.dynamic_viscosity;
    let buoyancy = delta_rho.abs() * sphere_volume(diameter) * gravity_magnitude;
    let stokes = delta_rho.abs() * gravity_magnitude * diameter * diameter / (18.0 * mu);

    let mut v = stokes;
    let mut converged = false;
    let mut history = Vec::with_capacity(RISE_MAX_ITERATIONS);
    for _ in 0..RISE_MAX_ITERATIONS {
        let phi = drag_multiplier(particle_reynolds(medium, diameter, v))?;
        let next = stokes / phi;
        history.push(next);
        let change = (next - v).abs();
        v = next;
        if change <= RISE_TOLERANCE * v {
            converged = true;
            break;
        }
    }
    let phi = drag_multiplier(particle_reynolds(medium, diameter, v))?;
    let residual = (3.0 * PI * mu * diameter * v * phi - buoyancy).abs() / buoyancy;
    if !converged || residual > RISE_RESIDUAL_LIMIT {
        return Err(Error::Convergence(format!(
            "terminal velocity did not converge for d={diameter} m in {} iterations (residual {residual:e}, iterates {history:?})",
            history.len()
        )));
    }
    Ok(v.copysign(delta_rho))
}

/// Stokes–Einstein diffusivity `k_B T / (3πμd)`.
pub fn brownian_diffusivity(medium: &FluidMedium, diameter: f64) -> f64 {
    BOLTZMANN * medium.temperature / (3.0 * PI * medium.dynamic_viscosity * diameter)
}

/// Per-particle coefficients that stay fixed for its whole life (the
/// diameter never changes), precomputed once at injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleKinetics {
    /// Relaxation time, s. Zero forces the equilibrium update.
    pub tau: f64,
    /// Terminal rise velocity vector (opposite to gravity for bubbles), m/s.
    pub rise_velocity: Vector3<f64>,
    /// m^2/s
    pub diffusivity: f64,
}

impl BubbleKinetics {
    pub fn new(
        medium: &FluidMedium,
        gas_density: f64,
        diameter: f64,
        gravity: &Vector3<f64>,
        added_mass: f64,
    ) -> Result<Self> {
        let g = gravity.norm();
        let rise = terminal_rise_velocity(medium, gas_density, diameter, g)?;
        let rise_velocity = if g > 0.0 {
            -gravity / g * rise
        } else {
            Vector3::zeros()
        };
        Ok(Self {
            tau: relaxation_time(medium, gas_density, diameter, added_mass),
            rise_velocity,
            diffusivity: brownian_diffusivity(medium, diameter),
        })
    }
}

/// Advances one particle by `dt`.
///
/// `noise` holds three standard-normal draws and is only used when Brownian
/// motion is enabled. Equilibrium mode (or `τ = 0`) pins the velocity to
/// `u_eq = u_fluid + v_rise`; exponential mode relaxes toward it exactly and
/// advances the position with the closed-form integral of that relaxation.
pub fn step_particle(
    p: &ParticleState,
    u_fluid: &Vector3<f64>,
    kinetics: &BubbleKinetics,
    cfg: &IntegratorConfig,
    dt: f64,
    noise: [f64; 3],
) -> Result<ParticleState> {
    if p.status != ParticleStatus::InFlight {
        return Err(Error::Misuse(format!(
            "particle {} is {:?}, only in-flight particles are stepped",
            p.id, p.status
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Misuse(format!("time step must be > 0, got {dt}")));
    }
    if !p.is_finite() || !u_fluid.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            particle_id: p.id,
            step: None,
            message: "non-finite state before update".into(),
        });
    }

    let u_eq = u_fluid + kinetics.rise_velocity;
    let mut next = *p;
    if cfg.mode == IntegratorMode::Equilibrium || kinetics.tau == 0.0 {
        next.velocity = u_eq;
        next.position += u_eq * dt;
    } else {
        let x = -dt / kinetics.tau;
        let decay = x.exp();
        let growth = -x.exp_m1();
        let slip = p.velocity - u_eq;
        next.velocity = u_eq + slip * decay;
        next.position += u_eq * dt + slip * (kinetics.tau * growth);
    }
    if cfg.brownian_enabled {
        let scale = (2.0 * kinetics.diffusivity * dt).sqrt();
        next.position += Vector3::from(noise) * scale;
    }

    if !next.is_finite() {
        return Err(Error::Numeric {
            particle_id: p.id,
            step: None,
            message: "non-finite state after update".into(),
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn water() -> FluidMedium {
        FluidMedium::water()
    }

    fn bubble(d: f64) -> ParticleState {
        ParticleState::new(7, Vector3::zeros(), Vector3::zeros(), d)
    }

    fn no_brownian(mode: IntegratorMode) -> IntegratorConfig {
        IntegratorConfig {
            mode,
            dt: None,
            brownian_enabled: false,
            added_mass_coefficient: 0.5,
        }
    }

    #[test]
    fn particle_reynolds_examples() {
        assert!(rel(particle_reynolds(&water(), 2.5e-6, 3.4e-6), 8.5e-6) < 1e-12);
        assert_eq!(particle_reynolds(&water(), 2.5e-6, 0.0), 0.0);
        assert!(rel(particle_reynolds(&water(), 1e-5, 0.01), 0.1) < 1e-12);
    }

    #[test]
    fn drag_multiplier_examples() {
        assert_eq!(drag_multiplier(0.0).unwrap(), 1.0);
        assert!(rel(drag_multiplier(1.0).unwrap(), 1.15) < 1e-12);
        assert!(rel(drag_coefficient(1.0).unwrap(), 27.6) < 1e-12);

        // hand evaluation 1 + 0.15 * 1000^0.687
        let phi = drag_multiplier(1000.0).unwrap();
        assert!((phi - 18.2611).abs() < 1e-3, "{phi}");
        let cd = drag_coefficient(1000.0).unwrap();
        assert!((cd - 0.438).abs() < 1e-3);
        assert!(rel(cd, 0.44) < 0.005);

        assert!(matches!(drag_multiplier(-1e-9), Err(Error::Domain(_))));
        assert!(drag_multiplier(f64::NAN).is_err());
    }

    #[test]
    fn drag_force_examples() {
        let mut p = bubble(2.5e-6);
        p.velocity = Vector3::new(0.3, -0.1, 0.2);
        assert_eq!(drag_force(&water(), &p, &p.velocity.clone()), Vector3::zeros());

        let p = bubble(2.5e-6);
        let f = drag_force(&water(), &p, &Vector3::new(1e-3, 0.0, 0.0));
        let re: f64 = 1000.0 * 1e-3 * 2.5e-6 / 1e-3;
        let exact = 3.0 * std::f64::consts::PI * 1e-3 * 2.5e-6 * 1e-3 * (1.0 + 0.15 * re.powf(0.687));
        assert!(rel(f.x, exact) < 1e-12);
        assert!(rel(f.x, 2.356e-11) < 5e-3);
        assert_eq!((f.y, f.z), (0.0, 0.0));

        let f2 = drag_force(&water(), &p, &Vector3::new(2e-3, 0.0, 0.0));
        assert!(rel(f2.x, 2.0 * f.x) < 5e-3);
    }

    #[test]
    fn net_weight_examples() {
        let g = Vector3::new(0.0, 0.0, -9.81);
        assert_eq!(net_weight_force(&water(), 1000.0, 2.5e-6, &g), Vector3::zeros());

        let f = net_weight_force(&water(), 6.6, 2.5e-6, &g);
        let oracle = (6.6 - 1000.0) * (PI * 2.5e-6f64.powi(3) / 6.0) * -9.81;
        assert!(rel(f.z, oracle) < 1e-12);
        assert!(rel(f.z, 7.97e-14) < 1e-3);
        assert!(f.z > 0.0);

        let f2 = net_weight_force(&water(), 6.6, 5e-6, &g);
        assert!(rel(f2.z, 8.0 * f.z) < 1e-9);
    }

    #[test]
    fn relaxation_time_examples() {
        assert!(rel(relaxation_time(&water(), 6.6, 2.5e-6, 0.5), 1.7590e-7) < 1e-3);
        assert_eq!(relaxation_time(&water(), 0.0, 2.5e-6, 0.0), 0.0);
        let viscous = FluidMedium {
            dynamic_viscosity: 3.5e-3,
            ..water()
        };
        assert!(rel(relaxation_time(&viscous, 6.6, 2.5e-6, 0.5), 5.03e-8) < 1e-3);
    }

    #[test]
    fn terminal_rise_examples() {
        let v = terminal_rise_velocity(&water(), 6.6, 2.5e-6, 9.81).unwrap();
        let stokes = (1000.0 - 6.6) * 9.81 * 2.5e-6f64.powi(2) / (18.0 * 1e-3);
        assert!(rel(v, stokes) < 1e-4);
        assert!(rel(v, 3.38e-6) < 2e-3);

        let blood = FluidMedium::blood_like();
        let v = terminal_rise_velocity(&blood, 6.6, 2.5e-6, 9.81).unwrap();
        assert!(rel(v, 1.03e-6) < 5e-3);

        assert_eq!(terminal_rise_velocity(&water(), 1000.0, 2.5e-6, 9.81).unwrap(), 0.0);
        assert_eq!(terminal_rise_velocity(&water(), 6.6, 2.5e-6, 0.0).unwrap(), 0.0);

        // heavy particle settles
        assert!(terminal_rise_velocity(&water(), 2500.0, 1e-5, 9.81).unwrap() < 0.0);
    }

    #[test]
    fn terminal_rise_balances_forces_for_large_bubbles() {
        for d in [1e-6, 1e-5, 5e-5, 1e-4] {
            let v = terminal_rise_velocity(&water(), 6.6, d, 9.81).unwrap();
            let p = bubble(d);
            let drag = drag_force(&water(), &p, &Vector3::new(0.0, 0.0, -v)).z.abs();
            let weight = net_weight_force(&water(), 6.6, d, &Vector3::new(0.0, 0.0, -9.81)).z;
            assert!(rel(drag, weight) < 1e-8, "d={d}");
        }
    }

    #[test]
    fn diffusivity_examples() {
        assert!(rel(brownian_diffusivity(&water(), 2.5e-6), 1.7169e-13) < 1e-3);
        let d1 = brownian_diffusivity(&water(), 2.5e-6);
        let d2 = brownian_diffusivity(&water(), 5e-6);
        assert!(rel(d2, d1 / 2.0) < 1e-12);
        assert!(rel(brownian_diffusivity(&FluidMedium::blood_like(), 2.5e-6), 5.19e-14) < 2e-3);
    }

    #[test]
    fn uniform_flow_is_a_fixed_point() {
        let u = Vector3::new(0.1, 0.0, 0.0);
        let mut p = bubble(2.5e-6);
        p.velocity = u;
        let kin = BubbleKinetics::new(&water(), 6.6, 2.5e-6, &Vector3::zeros(), 0.5).unwrap();
        for mode in [IntegratorMode::ExponentialDrag, IntegratorMode::Equilibrium] {
            let next = step_particle(&p, &u, &kin, &no_brownian(mode), 1e-3, [0.0; 3]).unwrap();
            assert_eq!(next.velocity, u);
            assert_eq!(next.position, u * 1e-3);
            assert_eq!(next.diameter, p.diameter);
            assert_eq!(next.id, p.id);
        }
    }

    #[test]
    fn equilibrium_mode_rises_at_terminal_velocity() {
        let g = Vector3::new(0.0, 0.0, -9.81);
        let kin = BubbleKinetics::new(&water(), 6.6, 2.5e-6, &g, 0.5).unwrap();
        let next = step_particle(
            &bubble(2.5e-6),
            &Vector3::zeros(),
            &kin,
            &no_brownian(IntegratorMode::Equilibrium),
            1e-3,
            [0.0; 3],
        )
        .unwrap();
        let v = terminal_rise_velocity(&water(), 6.6, 2.5e-6, 9.81).unwrap();
        assert_eq!(next.velocity.x, 0.0);
        assert_eq!(next.velocity.y, 0.0);
        assert!(rel(next.velocity.z, v) < 1e-12);
    }

    #[test]
    fn exponential_decay_over_ten_relaxation_times() {
        let kin = BubbleKinetics::new(&water(), 6.6, 2.5e-6, &Vector3::zeros(), 0.5).unwrap();
        let mut p = bubble(2.5e-6);
        p.velocity = Vector3::new(1e-3, 0.0, 0.0);
        let next = step_particle(
            &p,
            &Vector3::zeros(),
            &kin,
            &no_brownian(IntegratorMode::ExponentialDrag),
            10.0 * kin.tau,
            [0.0; 3],
        )
        .unwrap();
        assert!(rel(next.velocity.norm(), 1e-3 * (-10f64).exp()) < 1e-12);
        assert!(rel(next.velocity.norm(), 4.54e-8) < 1e-3);
        // displacement is the integral of the decaying velocity
        assert!(rel(next.position.x, 1e-3 * kin.tau * (1.0 - (-10f64).exp())) < 1e-12);
    }

    #[test]
    fn massless_bubble_uses_equilibrium() {
        let kin = BubbleKinetics::new(&water(), 0.0, 2.5e-6, &Vector3::zeros(), 0.0).unwrap();
        assert_eq!(kin.tau, 0.0);
        let u = Vector3::new(0.05, 0.0, 0.0);
        let next = step_particle(
            &bubble(2.5e-6),
            &u,
            &kin,
            &no_brownian(IntegratorMode::ExponentialDrag),
            1e-3,
            [0.0; 3],
        )
        .unwrap();
        assert_eq!(next.velocity, u);
    }

    #[test]
    fn non_finite_input_names_particle() {
        let kin = BubbleKinetics::new(&water(), 6.6, 2.5e-6, &Vector3::zeros(), 0.5).unwrap();
        let mut p = bubble(2.5e-6);
        p.position.x = f64::NAN;
        match step_particle(&p, &Vector3::zeros(), &kin, &IntegratorConfig::default(), 1e-3, [0.0; 3]) {
            Err(Error::Numeric { particle_id, .. }) => assert_eq!(particle_id, 7),
            other => panic!("unexpected {other:?}"),
        }
        let mut done = bubble(2.5e-6);
        done.status = ParticleStatus::Absorbed;
        assert!(matches!(
            step_particle(&done, &Vector3::zeros(), &kin, &IntegratorConfig::default(), 1e-3, [0.0; 3]),
            Err(Error::Misuse(_))
        ));
    }

    #[test]
    fn brownian_step_variance() {
        // one-step displacement variance per axis is 2 D dt
        let kin = BubbleKinetics::new(&water(), 6.6, 2.5e-6, &Vector3::zeros(), 0.5).unwrap();
        let cfg = IntegratorConfig {
            brownian_enabled: true,
            ..IntegratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dt = 1e-2;
        let n = 20_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noise: [f64; 3] = std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal));
            let next = step_particle(&bubble(2.5e-6), &Vector3::zeros(), &kin, &cfg, dt, noise).unwrap();
            sum_sq += next.position.norm_squared();
        }
        let msd = sum_sq / n as f64;
        let expected = 6.0 * kin.diffusivity * dt;
        // std of |x|^2 for a 3-dof gaussian is sqrt(2*3)*2Ddt
        let se = (6.0f64).sqrt() * 2.0 * kin.diffusivity * dt / (n as f64).sqrt();
        assert!((msd - expected).abs() < 3.0 * se, "msd {msd} expected {expected}");
    }

    #[test]
    fn lognormal_sampling_respects_truncation() {
        let dist = BubbleSpecies::sonovue_like().distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..5000).map(|_| dist.sample(&mut rng).unwrap()).collect();
        assert!(samples.iter().all(|d| (1e-6..=10e-6).contains(d)));
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!((median - 2.5e-6).abs() < 0.15e-6, "{median}");

        let impossible = DiameterDistribution::LogNormal {
            median: 1e-6,
            geometric_sigma: 1.0,
            min: 5e-6,
            max: 6e-6,
        };
        assert!(impossible.sample(&mut rng).is_err());
    }

    #[test]
    fn species_validation() {
        let mut errs = ValidationError::default();
        BubbleSpecies {
            gas_density: -1.0,
            distribution: DiameterDistribution::LogNormal {
                median: 2e-6,
                geometric_sigma: 0.5,
                min: 5e-6,
                max: 2e-4,
            },
        }
        .validate_into("species", &mut errs);
        assert!(errs.mentions("species.gas_density"));
        assert!(errs.mentions("species.geometric_sigma"));
        assert!(errs.mentions("species.max"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn exponential_update_contracts(
                log_ratio in -3.0f64..6.0,
                d in 1e-6f64..1e-4,
                v0 in proptest::array::uniform3(-1.0f64..1.0),
                u in proptest::array::uniform3(-0.5f64..0.5),
                gz in -20.0f64..0.0,
            ) {
                let g = Vector3::new(0.0, 0.0, gz);
                let kin = BubbleKinetics::new(&FluidMedium::water(), 6.6, d, &g, 0.5).unwrap();
                let dt = kin.tau * 10f64.powf(log_ratio);
                let mut p = bubble(d);
                p.velocity = Vector3::from(v0);
                let u = Vector3::from(u);
                let next = step_particle(&p, &u, &kin, &no_brownian(IntegratorMode::ExponentialDrag), dt, [0.0; 3]).unwrap();
                let u_eq = u + kin.rise_velocity;
                prop_assert!(next.is_finite());
                prop_assert!((next.velocity - u_eq).norm() <= (p.velocity - u_eq).norm() * (1.0 + 1e-12) + 1e-18);
            }

            #[test]
            fn modes_agree_once_relaxed(
                d in 1e-6f64..5e-6,
                u_axial in 0.01f64..0.2,
                dt in 1e-3f64..1e-2,
                blood in proptest::bool::ANY,
            ) {
                let medium = if blood { FluidMedium::blood_like() } else { FluidMedium::water() };
                let g = Vector3::new(0.0, 0.0, -9.81);
                let kin = BubbleKinetics::new(&medium, 6.6, d, &g, 0.5).unwrap();
                prop_assume!(dt >= 50.0 * kin.tau);
                let u = Vector3::new(u_axial, 0.0, 0.0);
                let mut p = bubble(d);
                p.velocity = u;
                let a = step_particle(&p, &u, &kin, &no_brownian(IntegratorMode::ExponentialDrag), dt, [0.0; 3]).unwrap();
                let b = step_particle(&p, &u, &kin, &no_brownian(IntegratorMode::Equilibrium), dt, [0.0; 3]).unwrap();
                let displacement = (b.position - p.position).norm();
                prop_assert!((a.position - b.position).norm() < 1e-6 * displacement);
                prop_assert!((a.velocity - b.velocity).norm() <= 1e-6 * b.velocity.norm());
            }

            #[test]
            fn stokes_drag_is_linear(scale in 1.1f64..10.0, d in 1e-6f64..1e-5, slip in 1e-6f64..1e-4) {
                let p = bubble(d);
                let u1 = Vector3::new(slip, 0.0, 0.0);
                let re = particle_reynolds(&FluidMedium::water(), d, slip * scale);
                prop_assume!(re < 0.01);
                let f1 = drag_force(&FluidMedium::water(), &p, &u1).x;
                let f2 = drag_force(&FluidMedium::water(), &p, &(u1 * scale)).x;
                prop_assert!(((f2 / f1) / scale - 1.0).abs() < 0.005);
            }

            #[test]
            fn drag_multiplier_monotone(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(drag_multiplier(lo).unwrap() <= drag_multiplier(hi).unwrap());
                prop_assert!(drag_multiplier(lo).unwrap() >= 1.0);
            }
        }
    }
}
