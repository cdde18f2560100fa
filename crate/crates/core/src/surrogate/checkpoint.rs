//! `.sckpt` checkpoint files.
//!
//! Layout: `"SCKP"`, `u16` version, `u32` metadata length, JSON metadata
//! (config, normalizer, training meta, parameter table), then for each
//! parameter a `u16` name length, the UTF-8 name, a `u32` element count and
//! the float32 LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Surrogate;
use super::normalizer::Normalizer;
use crate::binio::{expect_eof, read_f32s, read_header, write_f32s, write_header};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// One-step MSE on held-out windows, in decoder output units.
    pub holdout_mse: Option<f64>,
    /// Same, for the zero-delta predictor.
    pub persistence_mse: Option<f64>,
    /// False when training was skipped (`steps = 0`) or nothing was held out.
    pub holdout_checked: bool,
    #[serde(default)]
    pub train_windows: usize,
    #[serde(default)]
    pub holdout_windows: usize,
}

impl TrainingMeta {
    /// Held-out MSE over persistence MSE, if measured.
    pub fn skill_ratio(&self) -> Option<f64> {
        Some(self.holdout_mse? / self.persistence_mse?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Surrogate<T>,
    pub normalizer: Normalizer,
    pub meta: TrainingMeta,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        let mut model = Surrogate::<U>::new(self.model.config.clone(), 0)
            .expect("config already validated");
        let flat = self.model.flat();
        let mut k = 0;
        model.visit_mut(&mut |_, _, d| {
            for v in d.iter_mut() {
                *v = U::lit(flat[k].to_f64_lossy());
                k += 1;
            }
        });
        model.output_scale = self.model.output_scale.mapv(|v| U::lit(v.to_f64_lossy()));
        Checkpoint {
            model,
            normalizer: self.normalizer.clone(),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    normalizer: Normalizer,
    training_meta: TrainingMeta,
    params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write, T: Scalar>(w: &mut W, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut params = Vec::new();
    ckpt.model.visit(&mut |name, shape, _| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
    });
    let meta = CheckpointMeta {
        config: ckpt.model.config.clone(),
        normalizer: ckpt.normalizer.clone(),
        training_meta: ckpt.meta.clone(),
        params,
    };
    write_header(w, CHECKPOINT_MAGIC, &meta)?;
    let mut res = Ok(());
    ckpt.model.visit(&mut |name, _, data| {
        if res.is_err() {
            return;
        }
        res = (|| {
            let n = name.as_bytes();
            w.write_all(&(n.len() as u16).to_le_bytes())?;
            w.write_all(n)?;
            w.write_all(&(data.len() as u32).to_le_bytes())?;
            write_f32s(w, data.iter().copied())
        })();
    });
    res?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_blob<R: Read, T: Scalar>(r: &mut R) -> Result<(String, Vec<T>)> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|e| corrupt(format!("parameter header: {e}")))?;
    let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
    r.read_exact(&mut name).map_err(|e| corrupt(format!("parameter name: {e}")))?;
    let name = String::from_utf8(name).map_err(|e| corrupt(e.to_string()))?;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| corrupt(format!("`{name}` length: {e}")))?;
    let count = u32::from_le_bytes(b4) as usize;
    let values = read_f32s(r, count).map_err(|e| corrupt(format!("`{name}`: {e}")))?;
    Ok((name, values))
}

pub fn read_checkpoint<R: Read, T: Scalar>(r: &mut R) -> Result<Checkpoint<T>> {
    let meta: CheckpointMeta =
        read_header(r, CHECKPOINT_MAGIC).map_err(|e| corrupt(e.to_string()))?;
    let mut model =
        Surrogate::<T>::new(meta.config, 0).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut expected = Vec::new();
    model.visit(&mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if expected.len() != meta.params.len()
        || expected
            .iter()
            .zip(&meta.params)
            .any(|((n, s), p)| *n != p.name || *s != p.shape)
    {
        return Err(corrupt("parameter table does not match config"));
    }
    let mut blobs = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let (found, values) = read_blob::<_, T>(r)?;
        if found != *name || values.len() != shape.iter().product::<usize>() {
            return Err(corrupt(format!(
                "expected `{name}` {shape:?}, found `{found}` with {} values",
                values.len()
            )));
        }
        blobs.push(values);
    }
    if !expect_eof(r)? {
        return Err(corrupt("trailing bytes"));
    }
    let mut it = blobs.into_iter();
    model.visit_mut(&mut |_, _, d| d.copy_from_slice(&it.next().expect("counted")));
    if meta.normalizer.delta_scale.len() != model.config.field_count {
        return Err(corrupt("normalizer field count does not match config"));
    }
    model.output_scale = meta.normalizer.delta_scale.iter().map(|&v| T::lit(v)).collect();
    Ok(Checkpoint {
        model,
        normalizer: meta.normalizer,
        meta: meta.training_meta,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
