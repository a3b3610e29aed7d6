//! Latent bank files: magic `LCLW`, version `u32`, `K` `u32`, `L_w` `u32`,
//! then the `w_g` rows and the `w_t` rows as little-endian float32.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field_generators::LatentBank;
use crate::io;

pub const MAGIC: &[u8; 4] = b"LCLW";
pub const VERSION: u32 = 1;

pub fn encode_bank(bank: &LatentBank<f32>) -> Vec<u8> {
    let (k, l) = bank.w_g.dim();
    let mut out = Vec::with_capacity(16 + 8 * k * l);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    for x in bank.w_g.iter().chain(bank.w_t.iter()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_bank(bytes: &[u8]) -> Result<LatentBank<f32>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not a latent bank file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::Version {
            kind: "latent bank",
            found: version,
            supported: VERSION,
        });
    }
    let (k, l) = (word(8) as usize, word(12) as usize);
    let n = k.checked_mul(l).and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX);
    if bytes.len() - 16 != n {
        return Err(Error::Parse(format!(
            "latent bank {k}x{l} needs {n} data bytes, found {}",
            bytes.len() - 16
        )));
    }
    let vals: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (g, t) = vals.split_at(k * l);
    LatentBank::new(
        Array2::from_shape_vec((k, l), g.to_vec()).expect("sized"),
        Array2::from_shape_vec((k, l), t.to_vec()).expect("sized"),
    )
}

pub fn write_bank(path: &Path, bank: &LatentBank<f32>) -> Result<()> {
    io::write_file(path, &encode_bank(bank))
}

pub fn read_bank(path: &Path) -> Result<LatentBank<f32>> {
    decode_bank(&io::read_file(path)?).map_err(|e| match e {
        Error::Parse(message) => Error::Image {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}
