//! Single-file checkpoints: magic, version, a JSON header carrying the
//! architecture and noise schedule, then every parameter as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::toy::{ToyArch, ToyUNet};
use super::{ScheduleConfig, Trainable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSTYLECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: String,
    pub arch: ToyArch,
    pub schedule: ScheduleConfig,
    /// Scalar type the model was trained in.
    pub dtype: String,
    pub tensors: Vec<TensorInfo>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
}

pub fn save_checkpoint<T: Scalar>(model: &ToyUNet<T>, epoch_losses: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let params = model.params();
    let header = CheckpointHeader {
        model: "toy-unet".into(),
        arch: *model.arch(),
        schedule: *model.schedule_config(),
        dtype: T::DTYPE.into(),
        tensors: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(name, v)| TensorInfo {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        epoch_losses: epoch_losses.to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        for v in params.values() {
            for x in v.iter() {
                w.write_f64::<LittleEndian>(x.as_f64())?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads the header without loading weights.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut r = open(path)?;
    read_header(&mut r, path)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
    serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ToyUNet<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let header = read_header(&mut r, path)?;
    if header.model != "toy-unet" {
        return Err(Error::Checkpoint(format!("unknown model kind {:?}", header.model)));
    }
    let mut values = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let mut buf = vec![0f64; n];
        r.read_f64_into::<LittleEndian>(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("{}: truncated weights ({e})", path.display())))?;
        let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), buf.into_iter().map(T::of).collect())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        values.push((info.name.clone(), arr));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!("{}: trailing bytes after weights", path.display())));
    }
    let model = ToyUNet::from_parts(header.arch, header.schedule, values)?;
    Ok((model, header))
}
