//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SONNCKPT"
//! version  u32
//! config   u64 length + that many bytes of JSON-serialized ModelConfig
//! tensors  u64 count, then per tensor:
//!            u8 rank, rank x u64 extents, numel x f64 (LE bits)
//! trailer  u8 flag; when 1: step u64, epoch u64, best_cer f64,
//!            best_wer f64, then 2 x (params) moment tensors
//! ```
//!
//! Tensor order is [`Model::visit_params`] followed by each batch-norm
//! site's running mean and variance ([`Model::visit_bn`] order), so a
//! round trip is bit-exact.

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SONNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer state carried by `last.ckpt` so training can resume with a
/// monotone step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerTrailer {
    pub step: u64,
    pub epoch: u64,
    pub best_cer: f64,
    pub best_wer: f64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    for &v in data {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_tensor(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = read_exact::<1>(r)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r)?);
    }
    Ok((shape, data))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    trailer: Option<&TrainerTrailer>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    write_u64(&mut w, config.len() as u64)?;
    w.write_all(&config)?;

    let mut tensors: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |t| tensors.push((t.shape().to_vec(), t.data().to_vec())));
    model.visit_bn(&mut |bn| {
        tensors.push((vec![bn.mean.len()], bn.mean.clone()));
        tensors.push((vec![bn.var.len()], bn.var.clone()));
    });
    write_u64(&mut w, tensors.len() as u64)?;
    for (shape, data) in &tensors {
        write_tensor(&mut w, shape, data)?;
    }

    match trailer {
        None => w.write_all(&[0u8])?,
        Some(t) => {
            w.write_all(&[1u8])?;
            write_u64(&mut w, t.step)?;
            write_u64(&mut w, t.epoch)?;
            write_f64(&mut w, t.best_cer)?;
            write_f64(&mut w, t.best_wer)?;
            for m in t.adam_m.iter().chain(&t.adam_v) {
                write_tensor(&mut w, m.shape(), m.data())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TrainerTrailer>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<8>(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = read_u64(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;

    let mut model = build_model(&config, 0)?;
    let n_tensors = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(read_tensor(&mut r)?);
    }
    let expected = {
        let mut n = model.num_param_tensors();
        model.visit_bn(&mut |_| n += 2);
        n
    };
    if n_tensors != expected {
        return Err(Error::Checkpoint(format!(
            "tensor count {n_tensors} does not match model ({expected})"
        )));
    }
    let mut it = tensors.into_iter();
    let mut shape_err = None;
    model.visit_params_mut(&mut |t| {
        let (shape, data) = it.next().expect("count checked");
        if shape != t.shape() {
            shape_err = Some((shape, t.shape().to_vec()));
        } else {
            t.data_mut().copy_from_slice(&data);
        }
    });
    model.visit_bn_mut(&mut |bn| {
        let (_, mean) = it.next().expect("count checked");
        let (_, var) = it.next().expect("count checked");
        if mean.len() == bn.mean.len() && var.len() == bn.var.len() {
            bn.mean = mean;
            bn.var = var;
        } else {
            shape_err = Some((vec![mean.len()], vec![bn.mean.len()]));
        }
    });
    if let Some((got, want)) = shape_err {
        return Err(Error::Checkpoint(format!(
            "tensor shape {got:?} does not match model shape {want:?}"
        )));
    }

    let flag = read_exact::<1>(&mut r)?[0];
    let trailer = if flag == 1 {
        let step = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let best_cer = read_f64(&mut r)?;
        let best_wer = read_f64(&mut r)?;
        let n_params = model.num_param_tensors();
        let mut read_moments = |n: usize| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let (shape, data) = read_tensor(&mut r)?;
                out.push(Tensor::new(shape, data)?);
            }
            Ok(out)
        };
        let adam_m = read_moments(n_params)?;
        let adam_v = read_moments(n_params)?;
        Some(TrainerTrailer {
            step,
            epoch,
            best_cer,
            best_wer,
            adam_m,
            adam_v,
        })
    } else {
        None
    };
    Ok((model, trailer))
}
