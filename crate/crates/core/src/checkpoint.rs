//! Checkpoint serialization.
//!
//! Byte layout (all integers little-endian, all floats f32 LE):
//!
//! ```text
//! magic           4 bytes  "UPLB"
//! version         u32      currently 1
//! config_len      u32      followed by that many bytes of TOML (model config)
//! seed            u64      run seed (sanity-checked on resume)
//! instances_seen  u64
//! microbatch_idx  u64      counts every microbatch ever trained
//! opt_step        u64      optimizer updates performed
//! skipped_steps   u64      microbatches aborted for non-finite loss
//! param_count     u32
//!   per param:    name_len u32, name bytes, rank u32, dims (u64 each),
//!                 data (numel * f32)
//! moments:        per param, in the same order: m (numel * f32),
//!                 then v (numel * f32)
//! source_tag      u8       0 = none, 1 = round-counter only, 2 = lstm buffer
//!   tag 1:        round u64
//!   tag 2:        round u64, capacity u64, context_len u64,
//!                 entries (capacity * context_len bytes),
//!                 depths (capacity * u32)
//! ```
//!
//! The generator state (tag 1/2) is exactly what resuming needs: every other
//! random decision is derived from (seed, purpose label, counter), so saved
//! counters reconstruct all streams.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Param, Transformer, TransformerConfig};

pub const MAGIC: &[u8; 4] = b"UPLB";
pub const VERSION: u32 = 1;

/// Generator state carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceState {
    None,
    /// Stateless-per-round sources: the round counter is the whole state.
    Round(u64),
    /// The LSTM (or transformer) buffer scheme.
    LstmBuffer {
        round: u64,
        capacity: usize,
        context_len: usize,
        entries: Vec<u8>,
        depths: Vec<u32>,
    },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub seed: u64,
    pub instances_seen: u64,
    pub microbatch_index: u64,
    pub opt_step: u64,
    pub skipped_steps: u64,
    pub params: Vec<Param>,
    pub opt_m: Vec<Vec<f32>>,
    pub opt_v: Vec<Vec<f32>>,
    pub source: SourceState,
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let config = toml::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        w.u32(config.len() as u32);
        w.bytes(config.as_bytes());
        w.u64(self.seed);
        w.u64(self.instances_seen);
        w.u64(self.microbatch_index);
        w.u64(self.opt_step);
        w.u64(self.skipped_steps);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.u32(p.name.len() as u32);
            w.bytes(p.name.as_bytes());
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f32s(&p.data);
        }
        if self.opt_m.len() != self.params.len() || self.opt_v.len() != self.params.len() {
            return Err(Error::Checkpoint("moment count mismatch".into()));
        }
        for (p, (m, v)) in self.params.iter().zip(self.opt_m.iter().zip(&self.opt_v)) {
            if m.len() != p.data.len() || v.len() != p.data.len() {
                return Err(Error::Checkpoint(format!("moment size mismatch for {}", p.name)));
            }
            w.f32s(m);
            w.f32s(v);
        }
        match &self.source {
            SourceState::None => w.u8(0),
            SourceState::Round(round) => {
                w.u8(1);
                w.u64(*round);
            }
            SourceState::LstmBuffer {
                round,
                capacity,
                context_len,
                entries,
                depths,
            } => {
                w.u8(2);
                w.u64(*round);
                w.u64(*capacity as u64);
                w.u64(*context_len as u64);
                w.bytes(entries);
                for &d in depths {
                    w.u32(d);
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} != supported {VERSION}"
            )));
        }
        let config_len = r.u32()? as usize;
        let config_str = std::str::from_utf8(r.take(config_len)?)
            .map_err(|e| Error::Checkpoint(format!("config not utf8: {e}")))?;
        let config: TransformerConfig = toml::from_str(config_str)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        let seed = r.u64()?;
        let instances_seen = r.u64()?;
        let microbatch_index = r.u64()?;
        let opt_step = r.u64()?;
        let skipped_steps = r.u64()?;
        let param_count = r.u32()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("param name not utf8: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            params.push(Param { name, shape, data });
        }
        let mut opt_m = Vec::with_capacity(param_count);
        let mut opt_v = Vec::with_capacity(param_count);
        for p in &params {
            opt_m.push(r.f32s(p.data.len())?);
            opt_v.push(r.f32s(p.data.len())?);
        }
        let source = match r.u8()? {
            0 => SourceState::None,
            1 => SourceState::Round(r.u64()?),
            2 => {
                let round = r.u64()?;
                let capacity = r.u64()? as usize;
                let context_len = r.u64()? as usize;
                let entries = r.take(capacity * context_len)?.to_vec();
                let mut depths = Vec::with_capacity(capacity);
                for _ in 0..capacity {
                    depths.push(r.u32()?);
                }
                SourceState::LstmBuffer {
                    round,
                    capacity,
                    context_len,
                    entries,
                    depths,
                }
            }
            tag => return Err(Error::Checkpoint(format!("unknown source tag {tag}"))),
        };
        if !r.done() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            seed,
            instances_seen,
            microbatch_index,
            opt_step,
            skipped_steps,
            params,
            opt_m,
            opt_v,
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }

    /// Rebuild the model this checkpoint captured.
    pub fn to_model(&self) -> Transformer {
        Transformer {
            cfg: self.config.clone(),
            params: self.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_config;
    use crate::rng::StreamRng;

    fn sample_checkpoint() -> Checkpoint {
        let mut cfg = build_config(16, Some(2)).unwrap();
        cfg.context = 32;
        let model = Transformer::init(cfg.clone(), &StreamRng::new(5)).unwrap();
        let opt_m: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.125; p.data.len()]).collect();
        let opt_v: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.25; p.data.len()]).collect();
        Checkpoint {
            config: cfg,
            seed: 99,
            instances_seen: 12345,
            microbatch_index: 678,
            opt_step: 90,
            skipped_steps: 1,
            params: model.params,
            opt_m,
            opt_v,
            source: SourceState::LstmBuffer {
                round: 7,
                capacity: 4,
                context_len: 8,
                entries: (0..32).collect(),
                depths: vec![0, 3, 1, 2],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.seed, ck.seed);
        assert_eq!(back.instances_seen, ck.instances_seen);
        assert_eq!(back.microbatch_index, ck.microbatch_index);
        assert_eq!(back.opt_step, ck.opt_step);
        assert_eq!(back.skipped_steps, ck.skipped_steps);
        assert_eq!(back.source, ck.source);
        for (a, b) in back.params.iter().zip(&ck.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            // Bit-exact float round trip.
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (a, b) in back.opt_m.iter().zip(&ck.opt_m) {
            assert_eq!(a, b);
        }
        // Serialization itself is deterministic.
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let ck = sample_checkpoint();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[4] = 99; // version field
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = Checkpoint::from_bytes(b"nope").unwrap_err();
        assert!(err.to_string().contains("magic") || err.to_string().contains("truncated"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }
}
