//! Built-in experiments.

use steerlab_core::metrics::Metric;
use steerlab_core::pde::{laminar_viscosity, vortex_viscosity, InitialCondition, System, SPIN_UP_FORCING};
use steerlab_core::steering::{Align, Mode, Renorm, DEFAULT_ALPHA_LIMIT};
use steerlab_core::LayerId;

use crate::config::*;

pub const PRESETS: [&str; 6] = [
    "vortex-shear",
    "vortex-shear-64",
    "diffusion-shear",
    "speed-shear",
    "vortex-to-grayscott",
    "smoke",
];

const SHEAR_TRAINING: [&str; 3] = ["vortex", "diffusion", "speed"];
const MASTER_SEED: u64 = 7;

fn shear_data() -> DataSection {
    DataSection {
        system: System::ShearFlow,
        grid: [64, 64],
        frames: 64,
        training: SHEAR_TRAINING.iter().map(|s| s.to_string()).collect(),
    }
}

fn shear_training() -> TrainingSection {
    TrainingSection {
        steps: 3000,
        ..TrainingSection::default()
    }
}

fn shear_init(name: &str, seed: u64, viscosity: f64, schmidt: f64) -> InitSpec {
    InitSpec {
        name: name.into(),
        seed,
        viscosity: Some(viscosity),
        schmidt: Some(schmidt),
        forcing: None,
        initial: None,
        feed: None,
        kill: None,
    }
}

fn steering(alphas: &[f64], mode: Mode, metric: Metric, inits: Vec<InitSpec>) -> SteeringSection {
    SteeringSection {
        alphas: alphas.to_vec(),
        mode,
        align: Align::None,
        renorm: Renorm::Global,
        alpha_limit: DEFAULT_ALPHA_LIMIT,
        rollout_steps: 60,
        metric,
        eval_frame: None,
        threshold: None,
        inits,
    }
}

fn base(name: &str, concept: &str, layer: usize, steering: SteeringSection) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed: MASTER_SEED,
        data: shear_data(),
        model: ModelSection::default(),
        training: shear_training(),
        concept: ConceptSection {
            name: concept.into(),
            groups: None,
            source: None,
            layer: Some(LayerId(layer)),
            epsilon: steerlab_core::concepts::DEFAULT_EPSILON,
        },
        steering,
        outputs: OutputSection::default(),
    }
}

pub fn vortex_shear() -> ExperimentConfig {
    base(
        "vortex-shear",
        "vortex",
        1,
        steering(
            &[-0.5, -0.25, 0.0, 0.25, 0.5],
            Mode::ChannelBroadcast,
            Metric::MeanAbsVorticity,
            vec![
                shear_init("laminar", 9001, laminar_viscosity(1e5), 1.0),
                shear_init("vortex", 9002, vortex_viscosity(1e5), 1.0),
            ],
        ),
    )
}

pub fn diffusion_shear() -> ExperimentConfig {
    let mut s = steering(
        &[-0.25, 0.0, 0.25],
        Mode::FullSpatial,
        Metric::InterfaceSharpness("tracer".into()),
        vec![shear_init("mixed", 9101, vortex_viscosity(5e4), 1.0)],
    );
    s.eval_frame = Some(30);
    base("diffusion-shear", "diffusion", 1, s)
}

pub fn speed_shear() -> ExperimentConfig {
    let mut init = shear_init("spin_up", 9201, vortex_viscosity(1e5), 1.0);
    init.forcing = Some(SPIN_UP_FORCING);
    init.initial = Some(InitialCondition::Quiescent);
    let mut s = steering(&[-0.25, 0.0, 0.25], Mode::FullSpatial, Metric::MeanAbsVorticity, vec![init]);
    s.threshold = Some(Threshold::Calibrated { calibrate_frame: 30 });
    base("speed-shear", "speed", 1, s)
}

pub fn vortex_to_grayscott() -> ExperimentConfig {
    let gs_init = |name: &str, seed, f, k| InitSpec {
        name: String::from(name),
        seed,
        viscosity: None,
        schmidt: None,
        forcing: None,
        initial: None,
        feed: Some(f),
        kill: Some(k),
    };
    let mut c = base(
        "vortex-to-grayscott",
        "vortex",
        1,
        steering(
            &[-0.1, -0.05, 0.0, 0.05, 0.1],
            Mode::ChannelBroadcast,
            Metric::InterfaceSharpness("species_B".into()),
            vec![gs_init("mitosis", 9301, 0.0367, 0.0649), gs_init("stripes", 9302, 0.026, 0.051)],
        ),
    );
    c.data = DataSection {
        system: System::GrayScott,
        grid: [64, 64],
        frames: 64,
        training: vec!["gray_scott".into()],
    };
    c.training.steps = 1500;
    c.concept.source = Some("vortex-shear".into());
    c.concept.layer = None;
    c
}

/// A seconds-long run through every stage on a 16x16 grid, for checking an
/// installation and for tests. Its numbers mean nothing.
pub fn smoke() -> ExperimentConfig {
    let mut c = vortex_shear();
    c.name = "smoke".into();
    c.data.grid = [16, 16];
    c.data.frames = 12;
    c.data.training = vec!["vortex".into()];
    c.model = ModelSection {
        patch_size: 4,
        embed_dim: 16,
        n_blocks: 2,
        n_heads: 2,
        window_t: 4,
        mlp_ratio: 2,
        attention: true,
    };
    c.training.steps = 20;
    c.training.batch = 4;
    c.steering.rollout_steps = 6;
    c
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "vortex-shear" => Some(vortex_shear()),
        "vortex-shear-64" => Some(ExperimentConfig {
            name: "vortex-shear-64".into(),
            ..vortex_shear()
        }),
        "diffusion-shear" => Some(diffusion_shear()),
        "speed-shear" => Some(speed_shear()),
        "vortex-to-grayscott" => Some(vortex_to_grayscott()),
        "smoke" => Some(smoke()),
        _ => None,
    }
}
