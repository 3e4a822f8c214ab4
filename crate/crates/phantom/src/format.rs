//! NODV1 sample files.
//!
//! ```text
//! "NODV1"                          5 bytes
//! version                          u8 = 1
//! count, channels, height, width   u32 LE each
//! count x { label u8, C*H*W f32 LE row-major }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use hesam_core::{Error, Result, Tensor};

use crate::channels::{Sample, SampleMeta};
use crate::generate::Label;

pub const MAGIC: &[u8; 5] = b"NODV1";
pub const VERSION: u8 = 1;
const MAX_EXTENT: u32 = 4096;

pub fn write_dataset<W: Write>(samples: &[Sample], mut w: W) -> Result<()> {
    let shape = match samples.first() {
        Some(s) => s.volume.shape().to_vec(),
        None => vec![0, 0, 0],
    };
    if shape.len() != 3 {
        return Err(Error::Format(format!("sample volumes must be [C, H, W], got {shape:?}")));
    }
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.volume.shape() != shape.as_slice()) {
        return Err(Error::Format(format!(
            "sample {i} has shape {:?}, first sample {shape:?}",
            s.volume.shape()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for v in [samples.len(), shape[0], shape[1], shape[2]] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("extent {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(1 + 4 * shape.iter().product::<usize>());
    for s in samples {
        buf.clear();
        buf.push(s.label as u8);
        for v in s.volume.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected NODV1")));
    }
    let mut version = [0u8];
    read_exact(&mut r, &mut version)?;
    if version[0] != VERSION {
        return Err(Error::Format(format!("unsupported NODV1 version {}", version[0])));
    }
    let count = read_u32(&mut r)?;
    let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
    if dims.iter().any(|&d| d == 0 || d > MAX_EXTENT) && count > 0 {
        return Err(Error::Format(format!("inconsistent header: volume extents {dims:?}")));
    }
    let shape = dims.map(|d| d as usize);
    let voxels: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut raw = vec![0u8; 4 * voxels];
    for i in 0..count {
        let mut label = [0u8];
        read_exact(&mut r, &mut label)?;
        let label = Label::from_u8(label[0]).map_err(|e| Error::Format(format!("sample {i}: {e}")))?;
        read_exact(&mut r, &mut raw)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        samples.push(Sample {
            volume: Tensor::new(&shape, data)?,
            label,
            meta: SampleMeta {
                centre_slice: shape[0] / 2,
                diameter: None,
                clamped: false,
            },
        });
    }
    let mut extra = [0u8];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format(format!("inconsistent header: data beyond {count} samples")));
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    write_dataset(samples, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    read_dataset(BufReader::new(File::open(path)?))
}
