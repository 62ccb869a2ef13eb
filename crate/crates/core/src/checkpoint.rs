//! Versioned binary checkpoints: named parameter tensors, optimizer
//! moments, generator RNG states and a configuration hash.
//!
//! Layout (little endian): magic `DCLCKPT1`, 32-byte config hash, then
//! length-prefixed sections for metadata strings, tensors, optimizers and
//! RNG states.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ImageBatch, Provenance};
use crate::nn::{Adam, Network};

pub const MAGIC: &[u8; 8] = b"DCLCKPT1";

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Vec<f64>>,
    pub optimizers: BTreeMap<String, Adam>,
    pub rngs: BTreeMap<String, RngState>,
}

/// SHA-256 of a canonical configuration text.
pub fn config_hash(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self { config_hash, ..Default::default() }
    }

    /// Stores every parameter tensor of `net` as `<prefix>/<param name>`.
    pub fn put_network(&mut self, prefix: &str, net: &Network) {
        for p in net.params() {
            self.tensors.insert(format!("{prefix}/{}", p.name), p.values.to_vec());
        }
    }

    /// Overwrites the parameters of `net` (whose architecture must already
    /// match) from `<prefix>/...` tensors.
    pub fn load_network(&self, prefix: &str, net: &mut Network) -> Result<()> {
        let names: Vec<String> = net.params().iter().map(|p| format!("{prefix}/{}", p.name)).collect();
        for (name, (slot, _)) in names.iter().zip(net.params_mut()) {
            let values = self.tensors.get(name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
            if values.len() != slot.len() {
                return Err(ckpt_err(format!("tensor {name} has {} values, expected {}", values.len(), slot.len())));
            }
            slot.copy_from_slice(values);
        }
        Ok(())
    }

    /// Stores an image batch as tensor `name` with its shape in the metadata.
    pub fn put_images(&mut self, name: &str, images: &ImageBatch) {
        let (n, c, h, w) = images.data().dim();
        self.meta.insert(format!("{name}.shape"), format!("{n},{c},{h},{w}"));
        self.tensors.insert(name.into(), images.data().iter().copied().collect());
    }

    pub fn get_images(&self, name: &str, provenance: Provenance) -> Result<ImageBatch> {
        let shape = self.meta.get(&format!("{name}.shape")).ok_or_else(|| ckpt_err(format!("missing images {name}")))?;
        let dims: Vec<usize> = shape.split(',').map(|d| d.parse().map_err(|_| ckpt_err(format!("bad shape {shape}")))).collect::<Result<_>>()?;
        let [n, c, h, w] = dims[..] else { return Err(ckpt_err(format!("bad shape {shape}"))) };
        let values = self.tensors.get(name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        let data = ndarray::Array4::from_shape_vec((n, c, h, w), values.clone()).map_err(|e| ckpt_err(e.to_string()))?;
        ImageBatch::new(data, provenance)
    }

    pub fn has_network(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Fails on a config hash mismatch unless `force`.
    pub fn check_hash(&self, expected: &[u8; 32], force: bool) -> Result<()> {
        if &self.config_hash != expected && !force {
            return Err(ckpt_err(format!(
                "config hash mismatch: checkpoint {} vs current {} (use --force to override)",
                hex(&self.config_hash),
                hex(expected)
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&self.config_hash);
        write_u64(&mut w, self.meta.len() as u64);
        for (k, v) in &self.meta {
            write_str(&mut w, k);
            write_str(&mut w, v);
        }
        write_u64(&mut w, self.tensors.len() as u64);
        for (k, v) in &self.tensors {
            write_str(&mut w, k);
            write_f64s(&mut w, v);
        }
        write_u64(&mut w, self.optimizers.len() as u64);
        for (k, a) in &self.optimizers {
            write_str(&mut w, k);
            for x in [a.lr, a.beta1, a.beta2, a.eps] {
                w.write_f64::<LittleEndian>(x).expect("vec write");
            }
            write_u64(&mut w, a.step);
            write_u64(&mut w, a.m.len() as u64);
            for (m, v) in a.m.iter().zip(&a.v) {
                write_f64s(&mut w, m);
                write_f64s(&mut w, v);
            }
        }
        write_u64(&mut w, self.rngs.len() as u64);
        for (k, r) in &self.rngs {
            write_str(&mut w, k);
            w.extend_from_slice(&r.seed);
            write_u64(&mut w, r.stream);
            w.write_u128::<LittleEndian>(r.word_pos).expect("vec write");
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| ckpt_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(ckpt_err("not a checkpoint (bad magic)"));
        }
        let parse = |r: &mut Cursor<&[u8]>| -> std::io::Result<Checkpoint> {
            let mut ck = Checkpoint::default();
            r.read_exact(&mut ck.config_hash)?;
            for _ in 0..read_len(r)? {
                let k = read_str(r)?;
                ck.meta.insert(k, read_str(r)?);
            }
            for _ in 0..read_len(r)? {
                let k = read_str(r)?;
                ck.tensors.insert(k, read_f64s(r)?);
            }
            for _ in 0..read_len(r)? {
                let k = read_str(r)?;
                let lr = r.read_f64::<LittleEndian>()?;
                let beta1 = r.read_f64::<LittleEndian>()?;
                let beta2 = r.read_f64::<LittleEndian>()?;
                let eps = r.read_f64::<LittleEndian>()?;
                let step = r.read_u64::<LittleEndian>()?;
                let mut a = Adam::new(lr, beta1, beta2);
                a.eps = eps;
                a.step = step;
                for _ in 0..read_len(r)? {
                    a.m.push(read_f64s(r)?);
                    a.v.push(read_f64s(r)?);
                }
                ck.optimizers.insert(k, a);
            }
            for _ in 0..read_len(r)? {
                let k = read_str(r)?;
                let mut seed = [0u8; 32];
                r.read_exact(&mut seed)?;
                let stream = r.read_u64::<LittleEndian>()?;
                let word_pos = r.read_u128::<LittleEndian>()?;
                ck.rngs.insert(k, RngState { seed, stream, word_pos });
            }
            Ok(ck)
        };
        let ck = parse(&mut r).map_err(|e| ckpt_err(format!("corrupt checkpoint: {e}")))?;
        if (r.position() as usize) != bytes.len() {
            return Err(ckpt_err("trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_u64(w: &mut Vec<u8>, v: u64) {
    w.write_u64::<LittleEndian>(v).expect("vec write");
}

fn write_str(w: &mut Vec<u8>, s: &str) {
    write_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn write_f64s(w: &mut Vec<u8>, v: &[f64]) {
    write_u64(w, v.len() as u64);
    for x in v {
        w.write_f64::<LittleEndian>(*x).expect("vec write");
    }
}

/// Reads a length prefix, refusing values that cannot fit in the remaining
/// input.
fn read_len(r: &mut Cursor<&[u8]>) -> std::io::Result<usize> {
    let n = r.read_u64::<LittleEndian>()?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if n > remaining {
        return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "length prefix exceeds input"));
    }
    Ok(n as usize)
}

fn read_str(r: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let n = read_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_f64s(r: &mut Cursor<&[u8]>) -> std::io::Result<Vec<f64>> {
    let n = read_len(r)?;
    (0..n).map(|_| r.read_f64::<LittleEndian>()).collect()
}
