//! Binary checkpoint format.
//!
//! ```text
//! "CSRT" | u32 version | u32 config_len | config (JSON) | u32 n_params
//! n_params x { u32 name_len | name | u32 ndim | ndim x u64 dim | f32 LE data }
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers are little-endian. The vocabulary is stored next to the
//! checkpoint as `<stem>.vocab`, one token per line.

use super::{parameter_layout, EncoderConfig, EncoderError, EncoderParams, Result, SentenceModel};
use crate::data::Vocab;
use crate::numerics::Tensor;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSRT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncoderError + '_ {
    move |source| EncoderError::Io { path: path.to_path_buf(), source }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_params(params: &EncoderParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(&config);
    let named = params.named_tensors();
    put_u32(&mut buf, named.len() as u32);
    for (name, t) in named {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EncoderError::Integrity(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<EncoderParams> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(EncoderError::Integrity("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(EncoderError::Integrity("CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let len = r.u32()? as usize;
    let config: EncoderConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| EncoderError::Integrity(format!("config block: {e}")))?;
    config.validate()?;
    let layout = parameter_layout(&config);
    let n = r.u32()? as usize;
    if n != layout.len() {
        return Err(EncoderError::Integrity(format!("expected {} parameter blocks, found {n}", layout.len())));
    }
    let mut tensors = Vec::with_capacity(n);
    for (name, shape) in &layout {
        let len = r.u32()? as usize;
        let found = String::from_utf8_lossy(r.take(len)?).into_owned();
        if &found != name {
            return Err(EncoderError::Integrity(format!("expected parameter {name}, found {found}")));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(EncoderError::Integrity(format!("{name}: expected shape {shape:?}, found {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != body.len() {
        return Err(EncoderError::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }
    EncoderParams::from_tensors(config, tensors)
}

/// Sidecar vocabulary path for a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab")
}

/// Writes the checkpoint and its vocabulary sidecar.
pub fn save_checkpoint(path: &Path, model: &SentenceModel) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_params(&model.params)).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    model.vocab.save(&vocab_path(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SentenceModel> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let params = decode_params(&bytes)?;
    let vocab = Vocab::load(&vocab_path(path))?;
    SentenceModel::new(params, vocab)
}
