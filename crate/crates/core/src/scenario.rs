//! The full configuration bundle for one simulation.

use nalgebra::Vector3;
use serde::Serialize;

use crate::bubble::{BubbleSpecies, IntegratorConfig};
use crate::comm::CommSettings;
use crate::error::{Result, ValidationError};
use crate::fluid::{FlowField, FluidMedium, LoopGeometry};
use crate::studies::StudySettings;
use crate::transport::{
    DetectorMode, DetectorSpec, InjectionSchedule, RecirculationSpec, SimulationSettings,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub simulation: SimulationSettings,
    pub medium: FluidMedium,
    pub geometry: LoopGeometry,
    pub flow: FlowField,
    pub species: BubbleSpecies,
    pub injection: InjectionSchedule,
    pub detector: DetectorSpec,
    pub recirculation: RecirculationSpec,
    pub integrator: IntegratorConfig,
    pub comm: CommSettings,
    pub studies: StudySettings,
}

impl Default for Scenario {
    /// Desk-scale defaults. Geometry, velocities and the bubble population are
    /// illustrative values, not testbed measurements.
    fn default() -> Self {
        let geometry = LoopGeometry {
            pipe_radius: 2.5e-3,
            detector_distance: 0.5,
            loop_length: 2.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        };
        Self {
            simulation: SimulationSettings::default(),
            medium: FluidMedium::water(),
            geometry,
            flow: FlowField::poiseuille(0.1),
            species: BubbleSpecies::sonovue_like(),
            injection: InjectionSchedule::impulse(500),
            detector: DetectorSpec {
                axial_position: geometry.detector_distance,
                mode: DetectorMode::Transparent,
                max_passes_recorded: 3,
            },
            recirculation: RecirculationSpec::default(),
            integrator: IntegratorConfig::default(),
            comm: CommSettings::default(),
            studies: StudySettings::default(),
        }
    }
}

impl Scenario {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = ValidationError::default();
        self.validate_into(&mut errs);
        errs.into_result()
    }

    pub fn validate_into(&self, errs: &mut ValidationError) {
        self.simulation.validate_into("simulation", errs);
        self.medium.validate_into("medium", errs);
        self.geometry.validate_into("geometry", errs);
        self.flow.validate_into("flow", errs);
        self.species.validate_into("species", errs);
        self.injection.validate_into("injection", errs);
        self.detector
            .validate_into("detector", self.geometry.loop_length, errs);
        self.recirculation.validate_into("recirculation", errs);
        self.integrator.validate_into("integrator", errs);
        self.comm.validate_into("comm", errs);
        self.studies.validate_into("studies", errs);

        let d_max = self.species.distribution.upper_bound();
        errs.check(
            d_max < self.geometry.pipe_radius,
            "species",
            format!(
                "largest diameter {d_max} m must be below the pipe radius {} m",
                self.geometry.pipe_radius
            ),
        );
        let total = self.injection.total_count();
        errs.check(
            total <= self.simulation.max_particles,
            "injection.events",
            format!(
                "schedule injects {total} particles, above simulation.max_particles = {}",
                self.simulation.max_particles
            ),
        );
        if let Some(last) = self.injection.events.last() {
            errs.check(
                last.time <= self.simulation.duration,
                "injection.events",
                format!(
                    "event at t = {} s lies beyond simulation.duration = {} s",
                    last.time, self.simulation.duration
                ),
            );
        }
    }

    /// Loop period `L_loop / U_mean`; infinite for still fluid.
    pub fn loop_period(&self) -> f64 {
        self.geometry.loop_length / self.flow.mean_velocity
    }
}
