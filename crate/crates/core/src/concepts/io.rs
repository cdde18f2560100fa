//! `.scdir` direction files and `.sgst` group-statistics files.
//!
//! Direction layout: `"SDIR"`, `u16` version, `u32` metadata length, JSON
//! metadata (name, layer, shape, which payloads are present, statistics
//! hash), then the float32 LE full tensor and/or channel vector, in that
//! order.
//!
//! Statistics layout: `"SGST"`, same framing, metadata (layer, shape,
//! epsilon, counts, source), then mean, std, μ and ν as float32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use super::{ConceptDirection, GroupStatistics, NormalizationStats};
use crate::activation::LayerId;
use crate::binio::{expect_eof, read_f32s, read_header, write_f32s, write_header};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DIRECTION_MAGIC: &[u8; 4] = b"SDIR";
pub const STATS_MAGIC: &[u8; 4] = b"SGST";

#[derive(Serialize, Deserialize)]
struct DirectionMeta {
    name: String,
    layer: LayerId,
    /// `[T, C, W, H]` of the full tensor, or `[0, C, 0, 0]` for channel-only.
    shape: [usize; 4],
    full: bool,
    channel: bool,
    stats_ref: String,
}

pub fn write_direction<W: Write, T: Scalar>(w: &mut W, dir: &ConceptDirection<T>) -> Result<()> {
    let shape = match (&dir.full, &dir.channel) {
        (Some(f), _) => {
            let d = f.dim();
            [d.0, d.1, d.2, d.3]
        }
        (None, Some(c)) => [0, c.len(), 0, 0],
        (None, None) => return Err(Error::MissingFullDirection(dir.name.clone())),
    };
    if let (Some(c), true) = (&dir.channel, dir.full.is_some()) {
        if c.len() != shape[1] {
            return Err(Error::ChannelMismatch {
                expected: shape[1],
                found: c.len(),
            });
        }
    }
    let meta = DirectionMeta {
        name: dir.name.clone(),
        layer: dir.layer,
        shape,
        full: dir.full.is_some(),
        channel: dir.channel.is_some(),
        stats_ref: dir.stats_ref.clone(),
    };
    write_header(w, DIRECTION_MAGIC, &meta)?;
    if let Some(f) = &dir.full {
        write_f32s(w, f.iter().copied())?;
    }
    if let Some(c) = &dir.channel {
        write_f32s(w, c.iter().copied())?;
    }
    Ok(())
}

pub fn read_direction<R: Read, T: Scalar>(r: &mut R) -> Result<ConceptDirection<T>> {
    let corrupt = |m: String| Error::CorruptDirection(m);
    let meta: DirectionMeta = read_header(r, DIRECTION_MAGIC).map_err(|e| corrupt(e.to_string()))?;
    if !meta.full && !meta.channel {
        return Err(corrupt("neither full nor channel payload present".into()));
    }
    let full = if meta.full {
        let n = meta.shape.iter().product();
        let v = read_f32s(r, n).map_err(|e| corrupt(format!("full payload: {e}")))?;
        Some(Array4::from_shape_vec(meta.shape, v).map_err(|e| corrupt(e.to_string()))?)
    } else {
        None
    };
    let channel = if meta.channel {
        let v = read_f32s(r, meta.shape[1]).map_err(|e| corrupt(format!("channel payload: {e}")))?;
        Some(Array1::from(v))
    } else {
        None
    };
    if !expect_eof(r)? {
        return Err(corrupt("trailing bytes".into()));
    }
    Ok(ConceptDirection {
        name: meta.name,
        full,
        channel,
        stats_ref: meta.stats_ref,
        layer: meta.layer,
    })
}

pub fn save_direction<T: Scalar>(dir: &ConceptDirection<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_direction(&mut w, dir)?;
    w.flush()?;
    Ok(())
}

pub fn load_direction<T: Scalar>(path: &Path) -> Result<ConceptDirection<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_direction(&mut r)
}

#[derive(Serialize, Deserialize)]
struct StatsMeta {
    layer: LayerId,
    shape: [usize; 4],
    epsilon: f64,
    source: String,
    count_f: usize,
    count_not_f: usize,
}

/// Writes the normalization statistics together with the group means
/// computed under them.
pub fn write_group_stats<W: Write, T: Scalar>(
    w: &mut W,
    norm: &NormalizationStats<T>,
    groups: &GroupStatistics<T>,
) -> Result<()> {
    let shape = norm.shape();
    for (what, a) in [("mu", &groups.mu), ("nu", &groups.nu), ("std", &norm.std)] {
        if a.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: format!("group statistics `{what}`"),
                expected: shape.to_vec(),
                found: a.shape().to_vec(),
            });
        }
    }
    let meta = StatsMeta {
        layer: groups.layer,
        shape,
        epsilon: norm.epsilon,
        source: norm.source.clone(),
        count_f: groups.count_f,
        count_not_f: groups.count_not_f,
    };
    write_header(w, STATS_MAGIC, &meta)?;
    for a in [&norm.mean, &norm.std, &groups.mu, &groups.nu] {
        write_f32s(w, a.iter().copied())?;
    }
    Ok(())
}

pub fn read_group_stats<R: Read, T: Scalar>(
    r: &mut R,
) -> Result<(NormalizationStats<T>, GroupStatistics<T>)> {
    let corrupt = |m: String| Error::CorruptActivations(m);
    let meta: StatsMeta = read_header(r, STATS_MAGIC).map_err(|e| corrupt(e.to_string()))?;
    let n = meta.shape.iter().product();
    let mut arrays = Vec::with_capacity(4);
    for what in ["mean", "std", "mu", "nu"] {
        let v = read_f32s(r, n).map_err(|e| corrupt(format!("{what}: {e}")))?;
        arrays.push(Array4::from_shape_vec(meta.shape, v).map_err(|e| corrupt(e.to_string()))?);
    }
    if !expect_eof(r)? {
        return Err(corrupt("trailing bytes".into()));
    }
    let nu = arrays.pop().expect("four arrays");
    let mu = arrays.pop().expect("four arrays");
    let std = arrays.pop().expect("four arrays");
    let mean = arrays.pop().expect("four arrays");
    Ok((
        NormalizationStats {
            mean,
            std,
            epsilon: meta.epsilon,
            source: meta.source,
        },
        GroupStatistics {
            mu,
            nu,
            count_f: meta.count_f,
            count_not_f: meta.count_not_f,
            layer: meta.layer,
        },
    ))
}

pub fn save_group_stats<T: Scalar>(
    norm: &NormalizationStats<T>,
    groups: &GroupStatistics<T>,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_group_stats(&mut w, norm, groups)?;
    w.flush()?;
    Ok(())
}

pub fn load_group_stats<T: Scalar>(path: &Path) -> Result<(NormalizationStats<T>, GroupStatistics<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_group_stats(&mut r)
}
