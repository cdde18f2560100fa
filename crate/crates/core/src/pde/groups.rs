//! Contrasting regime groups and the on-disk trajectory cache.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    load_trajectory, save_trajectory, simulate_gray_scott, simulate_shear_flow, subsample_stride,
    InitialCondition, PhysicsParams, SimulationTrajectory, System,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bumped whenever a solver change alters generated data.
const GENERATOR_VERSION: u32 = 1;

/// One simulation to run: parameters plus seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub params: PhysicsParams,
    pub seed: u64,
}

/// Two groups of simulations: one exhibiting a concept, one lacking it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeGroupSpec {
    pub concept_name: String,
    pub group_f: Vec<GroupMember>,
    pub group_not_f: Vec<GroupMember>,
    #[serde(default = "one")]
    pub stride_f: usize,
    #[serde(default = "one")]
    pub stride_not_f: usize,
}

fn one() -> usize {
    1
}

/// Reynolds/Schmidt pairs of the vortex-regime group.
const VORTEX_TABLE: [(f64, f64); 18] = [
    (1e4, 1e-1), (1e4, 2e-1), (1e4, 2e0), (1e4, 5e-1), (1e4, 5e0),
    (1e5, 1e-1), (1e5, 1e0), (1e5, 2e0), (1e5, 5e-1),
    (5e4, 1e-1), (5e4, 1e0), (5e4, 1e1), (5e4, 2e0), (5e4, 5e-1), (5e4, 5e0),
    (5e5, 1e0), (5e5, 2e-1), (5e5, 5e0),
];

/// Reynolds/Schmidt pairs of the laminar-regime group (also the speed groups).
const LAMINAR_TABLE: [(f64, f64); 10] = [
    (1e4, 1e0), (1e4, 1e1), (1e5, 1e1), (1e5, 2e-1), (1e5, 5e0),
    (5e4, 2e-1), (5e5, 1e-1), (5e5, 1e1), (5e5, 2e0), (5e5, 5e-1),
];

/// Feed/kill pairs that grow patterns from the seeded squares.
const GS_PATTERN: [(f64, f64); 6] = [
    (0.0367, 0.0649), (0.0545, 0.062), (0.030, 0.057), (0.026, 0.051), (0.022, 0.051), (0.046, 0.063),
];

/// Feed/kill pairs where the seeds fade.
const GS_DECAY: [(f64, f64); 4] = [(0.010, 0.070), (0.090, 0.060), (0.005, 0.065), (0.080, 0.065)];

/// Desk-scale viscosity for a vortex-regime Reynolds number: 1e-3 at 5e5,
/// rising to ~3.2e-3 at 1e4.
pub fn vortex_viscosity(reynolds: f64) -> f64 {
    1e-3 * (5e5 / reynolds).powf(0.3)
}

/// Desk-scale viscosity for a laminar-regime Reynolds number: 1e-2 at 5e5,
/// capped at 2e-2.
pub fn laminar_viscosity(reynolds: f64) -> f64 {
    (1e-2 * (5e5 / reynolds).powf(0.18)).min(2e-2)
}

/// Forcing amplitude of the spin-up runs used for the temporal concept.
pub const SPIN_UP_FORCING: f64 = 0.6;

fn members(params: impl IntoIterator<Item = PhysicsParams>, seed_base: u64) -> Vec<GroupMember> {
    params
        .into_iter()
        .enumerate()
        .map(|(i, params)| GroupMember {
            params,
            seed: seed_base + i as u64,
        })
        .collect()
}

impl RegimeGroupSpec {
    /// Low-viscosity roll-up against high-viscosity decay.
    pub fn vortex() -> Self {
        Self {
            concept_name: "vortex".into(),
            group_f: members(
                VORTEX_TABLE
                    .iter()
                    .map(|&(re, sc)| PhysicsParams::shear_flow_schmidt(vortex_viscosity(re), sc)),
                100,
            ),
            group_not_f: members(
                LAMINAR_TABLE
                    .iter()
                    .map(|&(re, sc)| PhysicsParams::shear_flow_schmidt(laminar_viscosity(re), sc)),
                200,
            ),
            stride_f: 1,
            stride_not_f: 1,
        }
    }

    /// Same viscosity, Schmidt 0.2 (diffusive tracer) against Schmidt 10.
    pub fn diffusion() -> Self {
        let nu = vortex_viscosity(5e4);
        Self {
            concept_name: "diffusion".into(),
            group_f: members((0..4).map(|_| PhysicsParams::shear_flow_schmidt(nu, 0.2)), 300),
            group_not_f: members((0..4).map(|_| PhysicsParams::shear_flow_schmidt(nu, 10.0)), 300),
            stride_f: 1,
            stride_not_f: 1,
        }
    }

    /// Identical forced spin-up runs sampled every second frame against
    /// every frame.
    pub fn speed() -> Self {
        let group = members(
            LAMINAR_TABLE.iter().map(|&(re, sc)| {
                PhysicsParams::shear_flow_schmidt(vortex_viscosity(re), sc)
                    .with_initial(InitialCondition::Quiescent)
                    .with_forcing(SPIN_UP_FORCING)
            }),
            400,
        );
        Self {
            concept_name: "speed".into(),
            group_f: group.clone(),
            group_not_f: group,
            stride_f: 2,
            stride_not_f: 1,
        }
    }

    /// Patterned Gray-Scott regimes (spots, stripes, mitosis) against feed
    /// and kill rates where the seeds die out.
    pub fn gray_scott() -> Self {
        Self {
            concept_name: "pattern".into(),
            group_f: members(GS_PATTERN.iter().map(|&(f, k)| PhysicsParams::gray_scott(f, k)), 500),
            group_not_f: members(GS_DECAY.iter().map(|&(f, k)| PhysicsParams::gray_scott(f, k)), 600),
            stride_f: 1,
            stride_not_f: 1,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["vortex", "diffusion", "speed", "gray_scott"];

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vortex" => Some(Self::vortex()),
            "diffusion" => Some(Self::diffusion()),
            "speed" => Some(Self::speed()),
            "gray_scott" => Some(Self::gray_scott()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGroupSpec(m));
        if self.group_f.is_empty() || self.group_not_f.is_empty() {
            return bad(format!(
                "both groups must be non-empty (group_f: {}, group_not_f: {})",
                self.group_f.len(),
                self.group_not_f.len()
            ));
        }
        if self.stride_f == 0 || self.stride_not_f == 0 {
            return bad("strides must be >= 1".into());
        }
        if self.concept_name == "speed" && self.group_f != self.group_not_f {
            return bad("speed groups must share identical (params, seed) pairs".into());
        }
        for m in self.group_f.iter().chain(&self.group_not_f) {
            m.params.validate()?;
        }
        Ok(())
    }
}

/// Content-addressed store of generated trajectories.
#[derive(Clone, Debug)]
pub struct TrajectoryCache {
    dir: PathBuf,
}

impl TrajectoryCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hash of every generation input.
    pub fn key(member: &GroupMember, grid: (usize, usize), frames: usize) -> String {
        let doc = serde_json::json!({
            "generator": GENERATOR_VERSION,
            "params": member.params,
            "seed": member.seed,
            "grid": [grid.0, grid.1],
            "frames": frames,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.straj"))
    }

    /// Loads the cached trajectory or generates and stores it. Returns the
    /// trajectory and whether it was a cache hit.
    pub fn get_or_generate<T: Scalar>(
        &self,
        member: &GroupMember,
        grid: (usize, usize),
        frames: usize,
    ) -> Result<(SimulationTrajectory<T>, bool)> {
        let path = self.path_for(&Self::key(member, grid, frames));
        if path.exists() {
            if let Ok(t) = load_trajectory(&path) {
                return Ok((t, true));
            }
        }
        let traj = generate::<T>(member, grid, frames)?;
        // Distinct keys never share a temp name; same-key writers race benignly.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_trajectory(&traj, &tmp)?;
        fs::rename(&tmp, &path)?;
        Ok((traj, false))
    }
}

/// Runs the solver for one member (in f64) and converts to `T`.
pub fn generate<T: Scalar>(
    member: &GroupMember,
    grid: (usize, usize),
    frames: usize,
) -> Result<SimulationTrajectory<T>> {
    let t = match member.params.system {
        System::ShearFlow => simulate_shear_flow::<f64>(&member.params, grid, frames, member.seed)?,
        System::GrayScott => simulate_gray_scott::<f64>(&member.params, grid, frames, member.seed)?,
    };
    // Round through f32 so cached and freshly generated data agree bitwise.
    Ok(t.cast::<f32>().cast::<T>())
}

fn build_group<T: Scalar>(
    group: &'static str,
    list: &[GroupMember],
    stride: usize,
    grid: (usize, usize),
    frames: usize,
    cache: Option<&TrajectoryCache>,
) -> Result<Vec<SimulationTrajectory<T>>> {
    list.par_iter()
        .enumerate()
        .map(|(index, m)| {
            let annotate = |e: Error| Error::GroupMember {
                group,
                index,
                source: Box::new(e),
            };
            let traj = match cache {
                Some(c) => c.get_or_generate::<T>(m, grid, frames).map(|(t, _)| t),
                None => generate::<T>(m, grid, frames),
            }
            .map_err(annotate)?;
            subsample_stride(&traj, stride).map_err(annotate)
        })
        .collect()
}

/// Generates (or loads) both groups, applying each group's frame stride.
pub fn build_regime_groups<T: Scalar>(
    spec: &RegimeGroupSpec,
    grid: (usize, usize),
    frames: usize,
    cache: Option<&TrajectoryCache>,
) -> Result<(Vec<SimulationTrajectory<T>>, Vec<SimulationTrajectory<T>>)> {
    spec.validate()?;
    let f = build_group("group_f", &spec.group_f, spec.stride_f, grid, frames, cache)?;
    let not_f = build_group("group_not_f", &spec.group_not_f, spec.stride_not_f, grid, frames, cache)?;
    Ok((f, not_f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vortex_preset_mirrors_table_composition() {
        let s = RegimeGroupSpec::vortex();
        assert_eq!(s.group_f.len(), 18);
        assert_eq!(s.group_not_f.len(), 10);
        let max_f = s.group_f.iter().map(|m| m.params.viscosity).fold(0.0, f64::max);
        let min_not = s.group_not_f.iter().map(|m| m.params.viscosity).fold(1.0, f64::min);
        assert!(max_f < min_not);
        for m in s.group_f.iter().chain(&s.group_not_f) {
            assert!((1e-3..=2e-2).contains(&m.params.viscosity));
        }
    }

    #[test]
    fn speed_preset_differs_only_in_stride() {
        let s = RegimeGroupSpec::speed();
        assert_eq!(s.group_f, s.group_not_f);
        assert_eq!((s.stride_f, s.stride_not_f), (2, 1));
        s.validate().unwrap();
    }

    #[test]
    fn empty_group_fails_before_simulating() {
        let mut s = RegimeGroupSpec::vortex();
        s.group_not_f.clear();
        let r = build_regime_groups::<f32>(&s, (64, 64), 64, None);
        assert!(matches!(r, Err(Error::InvalidGroupSpec(_))));
    }

    #[test]
    fn member_failures_are_annotated() {
        let mut s = RegimeGroupSpec::diffusion();
        s.group_f.truncate(1);
        s.group_not_f.truncate(1);
        let r = build_regime_groups::<f32>(&s, (48, 48), 4, None);
        match r {
            Err(Error::GroupMember { group, index, .. }) => {
                assert_eq!(group, "group_f");
                assert_eq!(index, 0);
            }
            other => panic!("expected GroupMember error, got {other:?}"),
        }
    }

    #[test]
    fn cache_hits_return_identical_data() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TrajectoryCache::new(dir.path()).unwrap();
        let m = GroupMember {
            params: PhysicsParams::shear_flow(5e-3, 5e-3),
            seed: 4,
        };
        let (a, hit_a) = cache.get_or_generate::<f32>(&m, (16, 16), 3).unwrap();
        let (b, hit_b) = cache.get_or_generate::<f32>(&m, (16, 16), 3).unwrap();
        assert!(!hit_a && hit_b);
        assert_eq!(a, b);
    }
}
