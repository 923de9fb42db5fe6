//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ODPCKPT\0"
//! version  u32
//! json_len u32, then the model config as compact JSON
//! count    u32
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   ndim     u32, then ndim x u64 extents
//!   values   raw little-endian f32 or f64, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, RnntModel};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

const MAGIC: &[u8; 8] = b"ODPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &RnntModel, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(model.config())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.num_params() as u32).to_le_bytes())?;
    for (id, tensor) in model.params() {
        let name = model.param_name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[match tensor.dtype() {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
        }])?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            match tensor.dtype() {
                DType::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                DType::F64 => w.write_all(&v.to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<RnntModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    config.validate()?;
    let count = read_u32(&mut r)? as usize;
    let template = RnntModel::init(config.clone(), 0)?;
    if count != template.num_params() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors, config implies {}",
            template.num_params()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (id, _) in template.params() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != template.param_name(id) {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{}`, found `{name}`",
                template.param_name(id)
            )));
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = match code[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        };
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(match dtype {
                DType::F32 => {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    f64::from(f32::from_le_bytes(b))
                }
                DType::F64 => f64::from_bits(read_u64(&mut r)?),
            });
        }
        params.push(Tensor::new(shape, data, dtype)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    RnntModel::from_parts(config, params)
}

pub fn save_checkpoint(model: &RnntModel, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<RnntModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
