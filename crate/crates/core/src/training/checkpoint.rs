//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      "GRUMT"                         5 bytes
//! version    u8                              currently 1
//! manifest   u32 × 4                         layers, hidden_size, input_size, target id count
//! params     f32 × n, row-major              per layer W, U, W_z, U_z, W_v, U_v;
//!                                            then output_weight, output_bias
//! velocity   f32 × n, same order and shapes
//! seed       u64
//! cursor     u32 epoch, u32 batch            next batch to process
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gru::{ModelParameters, ModelShape};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GRUMT";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Position in the training schedule: the next batch to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor {
    pub epoch: u32,
    pub batch: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters<f32>,
    pub velocity: ModelParameters<f32>,
    pub seed: u64,
    pub cursor: Cursor,
}

fn write_tensors<W: Write>(w: &mut W, p: &ModelParameters<f32>) -> Result<()> {
    for t in p.tensors() {
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R, p: &mut ModelParameters<f32>) -> Result<()> {
    let mut buf = [0u8; 4];
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f32::from_le_bytes(buf);
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// `path` with `.partial` appended; outputs are written there first and
/// renamed into place once complete.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

impl Checkpoint {
    pub fn shape(&self) -> ModelShape {
        self.params.shape()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if !self.params.same_layout(&self.velocity) {
            return Err(Error::Checkpoint("velocity layout differs from parameters".into()));
        }
        let shape = self.shape();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        for n in [
            shape.layers,
            shape.hidden_size,
            shape.input_size,
            shape.vocab_size,
        ] {
            let n = u32::try_from(n)
                .map_err(|_| Error::Checkpoint(format!("dimension {n} exceeds u32")))?;
            w.write_all(&n.to_le_bytes())?;
        }
        write_tensors(&mut w, &self.params)?;
        write_tensors(&mut w, &self.velocity)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.cursor.epoch.to_le_bytes())?;
        w.write_all(&self.cursor.batch.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &head[..5] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if head[5] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (this build reads {CHECKPOINT_VERSION})",
                head[5]
            )));
        }
        let shape = ModelShape {
            layers: read_u32(&mut r)? as usize,
            hidden_size: read_u32(&mut r)? as usize,
            input_size: read_u32(&mut r)? as usize,
            vocab_size: read_u32(&mut r)? as usize,
        };
        shape.validate()?;
        let mut params = ModelParameters::zeros(shape);
        let mut velocity = ModelParameters::zeros(shape);
        let truncated = |_| Error::Checkpoint("truncated tensor data".into());
        read_tensors(&mut r, &mut params).map_err(truncated)?;
        read_tensors(&mut r, &mut velocity).map_err(truncated)?;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let cursor = Cursor {
            epoch: read_u32(&mut r)?,
            batch: read_u32(&mut r)?,
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            params,
            velocity,
            seed: u64::from_le_bytes(seed),
            cursor,
        })
    }

    /// Writes to `<path>.partial`, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = partial_path(path);
        let file = File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        self.write_to(BufWriter::new(file))?;
        fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
