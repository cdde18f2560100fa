//! Ground-truth trajectory generators and the regime groups built from them.

mod gray_scott;
mod groups;
mod io;
mod shear;
mod spectral;
mod trajectory;

pub use gray_scott::simulate_gray_scott;
pub use groups::{
    build_regime_groups, generate, laminar_viscosity, vortex_viscosity, GroupMember, RegimeGroupSpec,
    TrajectoryCache, SPIN_UP_FORCING,
};
pub use io::{load_trajectory, read_trajectory, save_trajectory, write_trajectory};
pub use shear::{kinetic_energy, simulate_shear_flow, spectral_divergence};
pub use trajectory::{subsample_stride, SimulationTrajectory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which PDE a trajectory comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    ShearFlow,
    GrayScott,
}

impl System {
    pub fn field_names(self) -> &'static [&'static str] {
        match self {
            System::ShearFlow => &["tracer", "pressure", "velocity_x", "velocity_y"],
            System::GrayScott => &["species_A", "species_B"],
        }
    }
}

/// Initial state handed to a solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    /// Two opposing tanh shear layers with a seeded transverse perturbation;
    /// the tracer marks the central band.
    DoubleShearLayer,
    /// Fluid at rest apart from the seeded perturbation; the tracer band is
    /// the same as for the shear layer. Meant to be spun up by forcing.
    Quiescent,
    /// `u = (sin 2πx cos 2πy, -cos 2πx sin 2πy)`, zero tracer.
    TaylorGreen,
    /// Zero velocity and a uniform tracer.
    Still,
    /// Uniform `A = 1, B = 0` with seeded squares of species B.
    SeededSquares,
    /// Uniform `A = 1, B = 0`.
    Uniform,
}

/// Physical and numerical parameters of one simulation.
///
/// Fields that do not apply to `system` are ignored by the solver but still
/// participate in the content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub system: System,
    /// Kinematic viscosity (shear flow).
    pub viscosity: f64,
    /// Tracer diffusivity; Schmidt number is `viscosity / tracer_diffusivity`.
    pub tracer_diffusivity: f64,
    /// Amplitude of the steady `sin(4πy)` body force in x (shear flow).
    pub forcing: f64,
    /// Gray-Scott feed rate F.
    pub feed: f64,
    /// Gray-Scott kill rate k.
    pub kill: f64,
    /// Gray-Scott diffusion of species A, in grid units.
    pub diffusion_a: f64,
    /// Gray-Scott diffusion of species B, in grid units.
    pub diffusion_b: f64,
    /// Gray-Scott reaction terms on/off (off leaves pure diffusion).
    pub reactions: bool,
    pub initial: InitialCondition,
    pub dt: f64,
    /// Solver steps per saved frame.
    pub save_stride: usize,
}

impl PhysicsParams {
    pub fn shear_flow(viscosity: f64, tracer_diffusivity: f64) -> Self {
        Self {
            system: System::ShearFlow,
            viscosity,
            tracer_diffusivity,
            forcing: 0.0,
            feed: 0.0,
            kill: 0.0,
            diffusion_a: 0.0,
            diffusion_b: 0.0,
            reactions: false,
            initial: InitialCondition::DoubleShearLayer,
            dt: 0.005,
            save_stride: 8,
        }
    }

    /// Shear flow parameterised by viscosity and Schmidt number.
    pub fn shear_flow_schmidt(viscosity: f64, schmidt: f64) -> Self {
        Self::shear_flow(viscosity, viscosity / schmidt)
    }

    pub fn gray_scott(feed: f64, kill: f64) -> Self {
        Self {
            system: System::GrayScott,
            viscosity: 0.0,
            tracer_diffusivity: 0.0,
            forcing: 0.0,
            feed,
            kill,
            diffusion_a: 0.2,
            diffusion_b: 0.1,
            reactions: true,
            initial: InitialCondition::SeededSquares,
            dt: 1.0,
            save_stride: 40,
        }
    }

    pub fn with_initial(mut self, initial: InitialCondition) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_forcing(mut self, forcing: f64) -> Self {
        self.forcing = forcing;
        self
    }

    pub fn with_timing(mut self, dt: f64, save_stride: usize) -> Self {
        self.dt = dt;
        self.save_stride = save_stride;
        self
    }

    pub fn schmidt(&self) -> f64 {
        self.viscosity / self.tracer_diffusivity
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.save_stride == 0 {
            return bad("save_stride must be >= 1".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        match self.system {
            System::ShearFlow => {
                if !(self.viscosity > 0.0 && self.tracer_diffusivity > 0.0) {
                    return bad(format!(
                        "viscosity ({}) and tracer_diffusivity ({}) must be > 0",
                        self.viscosity, self.tracer_diffusivity
                    ));
                }
                if !self.forcing.is_finite() {
                    return bad("forcing must be finite".into());
                }
                if !matches!(
                    self.initial,
                    InitialCondition::DoubleShearLayer
                        | InitialCondition::Quiescent
                        | InitialCondition::TaylorGreen
                        | InitialCondition::Still
                ) {
                    return bad(format!("{:?} is not a shear-flow initial condition", self.initial));
                }
            }
            System::GrayScott => {
                for (name, v) in [("feed", self.feed), ("kill", self.kill)] {
                    if !(0.0..=0.1).contains(&v) {
                        return bad(format!("{name} must lie in [0, 0.1], got {v}"));
                    }
                }
                if self.diffusion_a < 0.0 || self.diffusion_b < 0.0 {
                    return bad("diffusion coefficients must be >= 0".into());
                }
                if !matches!(
                    self.initial,
                    InitialCondition::SeededSquares | InitialCondition::Uniform
                ) {
                    return bad(format!("{:?} is not a Gray-Scott initial condition", self.initial));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_grid(height: usize, width: usize, power_of_two: bool) -> Result<()> {
    if height < 4 || width < 4 {
        return Err(Error::InvalidGrid {
            height,
            width,
            reason: "dimensions must be at least 4",
        });
    }
    if power_of_two && !(height.is_power_of_two() && width.is_power_of_two()) {
        return Err(Error::InvalidGrid {
            height,
            width,
            reason: "pseudo-spectral solver needs power-of-two dimensions",
        });
    }
    Ok(())
}

/// Magnitude beyond which a solver state counts as blown up.
pub(crate) const BLOW_UP_LIMIT: f64 = 1e6;
