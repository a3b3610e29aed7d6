//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LCNF`, version `u32`, config TOML
//! (`u32` length + UTF-8), step `u64`, RNG seed (32 bytes), RNG stream
//! `u64`, RNG word position `u128`, counter count `u32` then
//! `(name, u64)` pairs, tensor count `u32` then per tensor: name, rank
//! `u32`, dims `u64` each, float32 data. Names are `u32` length + UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"LCNF";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    /// Integer state such as optimizer step counts.
    pub counters: BTreeMap<String, u64>,
    /// Parameters (`geo.*`, `tex.*`, `map.*`, `fuse.*`, `disc_*`) and
    /// optimizer moments (`opt.{g|di|dim}.{m|v}.*`).
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_toml());
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.counters.len() as u32);
        for (name, v) in &self.counters {
            put_str(&mut out, name);
            put_u64(&mut out, *v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                supported: VERSION,
            });
        }
        let text = r.string("config")?;
        let config: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("stored config: {}", e.message())))?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let mut counters = BTreeMap::new();
        for _ in 0..r.u32("counter count")? {
            let name = r.string("counter name")?;
            counters.insert(name, r.u64("counter")?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("sized"));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            rng: RngState { seed, stream, word_pos },
            counters,
            tensors,
        })
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip(&self, prefix: &str) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        let prefix = prefix.to_string();
        self.tensors
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix.as_str()).map(|s| (s, v)))
    }
}

/// Write via a temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    io::write_file(&tmp, &ckpt.encode())?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = io::read_file(path)?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
