//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"UNETCKPT"
//! u32    format version
//! u64    E, D, K
//! params       tensor section
//! u64    optimizer step
//! f64    learning rate, beta1, beta2, eps
//! first moment tensor section
//! second moment tensor section
//! ```
//!
//! A tensor section is a `u32` count followed by, per tensor, a `u16` name
//! length, the UTF-8 name, a `u64` element count and the `f64` values, in
//! declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::train::OptimizerState;
use super::{NetDims, UtilityNetParams, TENSOR_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UNETCKPT";

pub fn save_checkpoint(
    params: &UtilityNetParams,
    opt: &OptimizerState,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, opt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UtilityNetParams, OptimizerState)> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

/// Loads a checkpoint and rejects it unless it was written for `expected`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: NetDims,
) -> Result<(UtilityNetParams, OptimizerState)> {
    let (params, opt) = load_checkpoint(path)?;
    if params.dims() != expected {
        return Err(Error::Dimension(format!(
            "checkpoint is for {:?}, expected {:?}",
            params.dims(),
            expected
        )));
    }
    Ok((params, opt))
}

pub(crate) fn write_checkpoint<W: Write>(
    params: &UtilityNetParams,
    opt: &OptimizerState,
    w: &mut W,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let dims = params.dims();
    for d in [dims.embed_dim, dims.num_domains, dims.num_actions] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    write_tensors(params, w)?;
    w.write_u64::<LittleEndian>(opt.step)?;
    for x in [opt.learning_rate, opt.beta1, opt.beta2, opt.eps] {
        w.write_f64::<LittleEndian>(x)?;
    }
    write_tensors(&opt.first_moment, w)?;
    write_tensors(&opt.second_moment, w)?;
    Ok(())
}

pub(crate) fn read_checkpoint<R: Read>(r: &mut R) -> Result<(UtilityNetParams, OptimizerState)> {
    let mut magic = [0u8; 8];
    read_or_truncated(r.read_exact(&mut magic))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_or_truncated(r.read_u32::<LittleEndian>())?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_or_truncated(r.read_u64::<LittleEndian>())? as usize;
    }
    let dims = NetDims::new(dims[0], dims[1], dims[2])?;
    let mut params = UtilityNetParams::zeros(dims);
    read_tensors(&mut params, r)?;
    let step = read_or_truncated(r.read_u64::<LittleEndian>())?;
    let mut hyper = [0.0; 4];
    for h in &mut hyper {
        *h = read_or_truncated(r.read_f64::<LittleEndian>())?;
    }
    let mut opt = OptimizerState::new(&params, hyper[0]);
    opt.step = step;
    opt.beta1 = hyper[1];
    opt.beta2 = hyper[2];
    opt.eps = hyper[3];
    read_tensors(&mut opt.first_moment, r)?;
    read_tensors(&mut opt.second_moment, r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((params, opt))
}

fn read_or_truncated<T>(res: std::io::Result<T>) -> Result<T> {
    res.map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Checkpoint("truncated file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn write_tensors<W: Write>(params: &UtilityNetParams, w: &mut W) -> Result<()> {
    let tensors = params.tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, values) in tensors {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(values.len() as u64)?;
        for v in values {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(params: &mut UtilityNetParams, r: &mut R) -> Result<()> {
    let count = read_or_truncated(r.read_u32::<LittleEndian>())? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            TENSOR_NAMES.len()
        )));
    }
    for (expected, values) in params.tensors_mut() {
        let len = read_or_truncated(r.read_u16::<LittleEndian>())? as usize;
        let mut name = vec![0u8; len];
        read_or_truncated(r.read_exact(&mut name))?;
        if name != expected.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected}, found {}",
                String::from_utf8_lossy(&name)
            )));
        }
        let n = read_or_truncated(r.read_u64::<LittleEndian>())? as usize;
        if n != values.len() {
            return Err(Error::Dimension(format!(
                "tensor {expected} has {n} values, header dims require {}",
                values.len()
            )));
        }
        read_or_truncated(r.read_f64_into::<LittleEndian>(values))?;
    }
    Ok(())
}
