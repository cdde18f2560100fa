use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pde::SimulationTrajectory;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    Viridis,
    Gray,
    /// Blue to white to red.
    Diverging,
}

const VIRIDIS: [[u8; 3]; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];
const DIVERGING: [[u8; 3]; 3] = [[33, 102, 172], [247, 247, 247], [178, 24, 43]];

fn lerp_stops(stops: &[[u8; 3]], x: f64) -> Rgb<u8> {
    let x = x.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (stops[i][k] as f64 + (stops[i + 1][k] as f64 - stops[i][k] as f64) * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

impl Palette {
    /// Colour of `x ∈ [0, 1]`.
    pub fn color(self, x: f64) -> Rgb<u8> {
        match self {
            Self::Viridis => lerp_stops(&VIRIDIS, x),
            Self::Diverging => lerp_stops(&DIVERGING, x),
            Self::Gray => {
                let v = (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([v, v, v])
            }
        }
    }
}

/// Joint min and max of `field` over several trajectories, for a colour
/// scale shared across an α sweep.
pub fn value_range<'a, T: Scalar + 'a>(
    trajs: impl IntoIterator<Item = &'a SimulationTrajectory<T>>,
    field: &str,
) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in trajs {
        for v in t.field(field)?.iter() {
            let v = v.to_f64_lossy();
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo, hi))
}

/// Writes one PNG per frame of `field` into `out_dir` as
/// `{field}_{index}.png`, with y pointing up. The colour scale is `scale`
/// or the trajectory's own range.
pub fn render_frames<T: Scalar>(
    traj: &SimulationTrajectory<T>,
    field: &str,
    palette: Palette,
    out_dir: &Path,
    scale: Option<(f64, f64)>,
) -> Result<Vec<PathBuf>> {
    let data = traj.field(field)?;
    let (lo, hi) = match scale {
        Some(s) => s,
        None => value_range([traj], field)?,
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    fs::create_dir_all(out_dir)?;
    let (n, h, w) = data.dim();
    let digits = n.saturating_sub(1).to_string().len().max(4);
    let mut paths = Vec::with_capacity(n);
    for t in 0..n {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let v = data[[t, h - 1 - y as usize, x as usize]].to_f64_lossy();
            palette.color(if hi > lo { (v - lo) / span } else { 0.5 })
        });
        let path = out_dir.join(format!("{field}_{t:0digits$}.png"));
        img.save_with_format(&path, image::ImageFormat::Png)?;
        paths.push(path);
    }
    Ok(paths)
}
