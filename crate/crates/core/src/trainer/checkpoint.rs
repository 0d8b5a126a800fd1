//! Training checkpoints (little-endian):
//!
//! ```text
//! "UAVT" | u32 version | u32 n | n bytes of JSON {epoch, lengths}
//! model section (see model checkpoint layout)
//! u64 optimizer step | u64 total steps | f64 base lr | f64 momentum
//! u32 clip flag | f64 clip norm
//! u32 count | velocity arrays
//! u32 k | k × f64 length means | k × f64 length sigmas
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::error::{Error, Result};
use crate::model::checkpoint::{put_json, put_matrix, put_u32, read_model, Reader};
use crate::model::encode_model;
use crate::numcore::OptimState;
use crate::ranking::{LengthModel, LengthVariant};

pub const TRAIN_MAGIC: &[u8; 4] = b"UAVT";
pub const TRAIN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    length_variant: LengthVariant,
    length_learned: bool,
    length_ema_rate: f64,
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(st: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAIN_MAGIC);
    put_u32(&mut buf, TRAIN_VERSION);
    put_json(
        &mut buf,
        &Meta {
            epoch: st.epoch,
            length_variant: st.lengths.variant,
            length_learned: st.lengths.learned,
            length_ema_rate: st.lengths.ema_rate,
        },
    );
    buf.extend_from_slice(&encode_model(&st.model));
    let o = &st.opt;
    buf.extend_from_slice(&o.step.to_le_bytes());
    buf.extend_from_slice(&o.total_steps.to_le_bytes());
    put_f64(&mut buf, o.base_lr);
    put_f64(&mut buf, o.momentum);
    put_u32(&mut buf, u32::from(o.clip_norm.is_some()));
    put_f64(&mut buf, o.clip_norm.unwrap_or(0.0));
    put_u32(&mut buf, o.velocity.len() as u32);
    for v in &o.velocity {
        put_matrix(&mut buf, v);
    }
    put_u32(&mut buf, st.lengths.mean.len() as u32);
    for &m in &st.lengths.mean {
        put_f64(&mut buf, m);
    }
    for &s in &st.lengths.sigma {
        put_f64(&mut buf, s);
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], file: &Path) -> Result<TrainState> {
    let mut r = Reader::new(bytes, file);
    r.magic(TRAIN_MAGIC)?;
    r.version(TRAIN_VERSION)?;
    let meta: Meta = r.json()?;
    let model = read_model(&mut r)?;
    let step = r.u64()?;
    let total_steps = r.u64()?;
    let base_lr = r.f64()?;
    let momentum = r.f64()?;
    let has_clip = r.u32()?;
    let clip = r.f64()?;
    let n = r.u32()? as usize;
    let shapes: Vec<_> = model.params.mats().iter().map(|m| m.shape()).collect();
    if n != shapes.len() {
        return Err(r.fail(format!("{n} velocity arrays, expected {}", shapes.len())));
    }
    let mut velocity = Vec::with_capacity(n);
    for &shape in &shapes {
        velocity.push(r.matrix(Some(shape))?);
    }
    let k = r.u32()? as usize;
    if k != model.config.k {
        return Err(r.fail(format!("{k} length parameters, expected {}", model.config.k)));
    }
    let mean = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let sigma = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if step > total_steps {
        return Err(Error::format(file, 0, "optimizer step beyond schedule"));
    }
    Ok(TrainState {
        model,
        opt: OptimState {
            velocity,
            base_lr,
            momentum,
            total_steps,
            step,
            clip_norm: (has_clip != 0).then_some(clip),
        },
        lengths: LengthModel {
            variant: meta.length_variant,
            learned: meta.length_learned,
            ema_rate: meta.length_ema_rate,
            mean,
            sigma,
        },
        epoch: meta.epoch,
    })
}

pub fn save_checkpoint(st: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(st)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
