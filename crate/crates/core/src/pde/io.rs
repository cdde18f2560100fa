//! `.straj` trajectory files.
//!
//! Layout: `"STLB"`, `u16` version, `u32` metadata length, JSON metadata
//! (field names, `[T, H, W]`, params, seed, stride), then one float32 LE
//! array per field in C order, fields in metadata order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{PhysicsParams, SimulationTrajectory};
use crate::binio::{expect_eof, read_f32s, read_header, write_f32s, write_header};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"STLB";

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    fields: Vec<String>,
    dims: [usize; 3],
    params: PhysicsParams,
    seed: u64,
    stride: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, Value>,
}

pub fn write_trajectory<W: Write, T: Scalar>(w: &mut W, traj: &SimulationTrajectory<T>) -> Result<()> {
    let (h, wd) = traj.grid();
    let meta = TrajectoryMeta {
        fields: traj.field_names(),
        dims: [traj.frames(), h, wd],
        params: traj.params.clone(),
        seed: traj.seed,
        stride: traj.stride,
        extra: traj.extra.clone(),
    };
    write_header(w, TRAJECTORY_MAGIC, &meta)?;
    for (_, data) in traj.fields() {
        write_f32s(w, data.iter().copied())?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read, T: Scalar>(r: &mut R) -> Result<SimulationTrajectory<T>> {
    let meta: TrajectoryMeta =
        read_header(r, TRAJECTORY_MAGIC).map_err(|e| Error::CorruptTrajectory(e.to_string()))?;
    let [t, h, w] = meta.dims;
    if meta.fields.is_empty() {
        return Err(Error::CorruptTrajectory("no fields".into()));
    }
    let mut fields = Vec::with_capacity(meta.fields.len());
    for name in &meta.fields {
        let values = read_f32s(r, t * h * w)
            .map_err(|e| Error::CorruptTrajectory(format!("field `{name}`: {e}")))?;
        let data = Array3::from_shape_vec((t, h, w), values)
            .map_err(|e| Error::CorruptTrajectory(e.to_string()))?;
        fields.push((name.clone(), data));
    }
    if !expect_eof(r)? {
        return Err(Error::CorruptTrajectory("trailing bytes".into()));
    }
    let mut traj = SimulationTrajectory::new(fields, meta.params, meta.seed, meta.stride)?;
    traj.extra = meta.extra;
    Ok(traj)
}

pub fn save_trajectory<T: Scalar>(traj: &SimulationTrajectory<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectory(&mut w, traj)?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectory<T: Scalar>(path: &Path) -> Result<SimulationTrajectory<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_trajectory(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::simulate_shear_flow;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = PhysicsParams::shear_flow(5e-3, 1e-3);
        let mut t = simulate_shear_flow::<f32>(&p, (16, 16), 3, 9).unwrap();
        t.extra.insert("alpha".into(), Value::from(0.25));
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"STLB");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        let back: SimulationTrajectory<f32> = read_trajectory(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn payload_is_little_endian_c_order() {
        let a = Array3::from_shape_fn((2, 4, 4), |(t, y, x)| (t * 16 + y * 4 + x) as f32);
        let t = SimulationTrajectory::new(
            vec![("tracer".into(), a)],
            PhysicsParams::shear_flow(0.01, 0.01),
            0,
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        let meta_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let payload = &buf[10 + meta_len..];
        assert_eq!(payload.len(), 32 * 4);
        let fifth = f32::from_le_bytes(payload[20..24].try_into().unwrap());
        assert_eq!(fifth, 5.0);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let p = PhysicsParams::shear_flow(5e-3, 1e-3);
        let t = simulate_shear_flow::<f32>(&p, (16, 16), 2, 9).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 7);
        assert!(matches!(
            read_trajectory::<_, f32>(&mut buf.as_slice()),
            Err(Error::CorruptTrajectory(_))
        ));
    }
}
