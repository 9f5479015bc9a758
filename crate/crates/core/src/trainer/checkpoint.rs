//! Binary checkpoint format.
//!
//! ```text
//! "CVLM" | u32 version | config block | vocabulary block
//! | u64 epochs done | u64 step | f64 best valid objective
//! | u32 tensor count | tensors | u64 adam step | first moments | second moments
//! | u32 crc32 of everything before it
//! ```
//!
//! Blocks are u32 length-prefixed UTF-8. A tensor is u32 rows, u32 cols and
//! row-major f64 values. Integers and floats are little-endian. Parameter
//! tensors come in declaration order followed by the batch-norm running mean
//! and variance.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::adam::AdamState;
use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamId};

pub const MAGIC: &[u8; 4] = b"CVLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_valid: f64,
}

fn put_tensor(out: &mut Vec<u8>, t: &Array2<f64>) {
    out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    for x in t.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_block(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn block(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("block is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<Array2<f64>> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let n = r
            .checked_mul(c)
            .filter(|n| n * 8 <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let vals = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((r, c), vals).expect("sized"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_block(&mut out, &self.config.to_text());
        put_block(&mut out, &self.vocab.to_file_string());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_valid.to_le_bytes());
        let p = &self.params;
        out.extend_from_slice(&((p.tensors.len() + 2) as u32).to_le_bytes());
        for t in &p.tensors {
            put_tensor(&mut out, t);
        }
        put_tensor(&mut out, &row(&p.bn_mean));
        put_tensor(&mut out, &row(&p.bn_var));
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_tensor(&mut out, t);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let config = RunConfig::parse(r.block()?)?;
        let vocab = Vocabulary::parse(r.block()?)?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let best_valid = r.f64()?;
        let n = r.u32()? as usize;
        if n != ParamId::ALL.len() + 2 {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {n}", ParamId::ALL.len() + 2)));
        }
        let mut tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let bn_var = tensors.pop().expect("n >= 2").into_raw_vec_and_offset().0;
        let bn_mean = tensors.pop().expect("n >= 2").into_raw_vec_and_offset().0;
        let params = ModelParams {
            config: config.model_config(vocab.len()),
            tensors,
            bn_mean,
            bn_var,
        };
        params.validate().map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
        let adam_step = r.u64()?;
        let k = params.tensors.len();
        let moments = (0..2 * k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let (m, v) = moments.split_at(k);
        for (a, p) in moments.iter().zip(params.tensors.iter().chain(&params.tensors)) {
            if a.dim() != p.dim() {
                return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            adam: AdamState {
                m: m.to_vec(),
                v: v.to_vec(),
                step: adam_step,
            },
            epoch,
            step,
            best_valid,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
