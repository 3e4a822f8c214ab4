//! NACK1 parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NACK1"                       5 bytes
//! count                         u32
//! repeated count times:
//!   name_len                    u32
//!   name                        name_len bytes, UTF-8
//!   rank                        u32
//!   extents                     rank x u32
//!   values                      prod(extents) x f32
//! ```

use std::io::{Read, Write};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"NACK1";

/// Named tensors as stored in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(ps: &ParamSet<T>) -> Self {
        Self {
            entries: ps.iter().map(|p| (p.name.clone(), p.value.cast())).collect(),
        }
    }

    /// Copies stored values into `ps`; names, order and shapes must match.
    pub fn load_into<T: Scalar>(&self, ps: &mut ParamSet<T>) -> Result<()> {
        if self.entries.len() != ps.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                self.entries.len(),
                ps.len()
            )));
        }
        let ids: Vec<_> = ps.ids().collect();
        for ((name, t), id) in self.entries.iter().zip(ids) {
            let p = ps.get(id);
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint entry {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *ps.value_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&len_u32(self.entries.len())?.to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&len_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&len_u32(e)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 16 {
                return Err(Error::Format(format!("implausible name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("implausible rank {rank} for {name}")));
            }
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { entries })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
