//! Model files: a config header followed by a NACK1 checkpoint.
//!
//! ```text
//! "HSMD1"                       5 bytes
//! config_len                    u32 LE
//! config                        config_len bytes, JSON-encoded ModelConfig
//! NACK1 checkpoint              see `nn::checkpoint`
//! ```

use std::io::{Read, Write};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_exact, read_u32, Checkpoint};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 5] = b"HSMD1";

pub fn write_model<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    Checkpoint::from_params(model.params()).write(w)
}

pub fn read_model<T: Scalar, R: Read>(mut r: R) -> Result<Model<T>> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad model magic {magic:?}")));
    }
    let len = read_u32(&mut r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("implausible config length {len}")));
    }
    let mut cfg = vec![0u8; len];
    read_exact(&mut r, &mut cfg)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg).map_err(|e| Error::Format(format!("model config: {e}")))?;
    let mut model = Model::build(config, 0)?;
    Checkpoint::read(r)?.load_into(model.params_mut())?;
    Ok(model)
}
