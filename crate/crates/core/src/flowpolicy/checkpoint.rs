//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `IFLOWCKP`, `u32` format version, `u8`
//! scalar tag, `u64` architecture digest, the architecture fields, `u64`
//! config digest, `u64` iteration, length-prefixed stage name and config
//! JSON, length-prefixed parameter payload, Adam state, and a trailing
//! FNV-1a checksum over everything before it.

use std::path::Path;

use super::network::{Architecture, PolicyParams};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"IFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub stage: String,
    pub iteration: u64,
    pub params: PolicyParams<S>,
    pub optimizer: Adam<S>,
    /// Resolved experiment configuration as JSON.
    pub config_json: String,
    pub config_digest: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn scalars<S: Scalar>(&mut self, v: &[S]) {
        self.u64(v.len() as u64);
        for x in v {
            x.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(format!("implausible length {n}"));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.len()?;
        self.take(n)
    }
    fn scalars<S: Scalar>(&mut self) -> std::result::Result<Vec<S>, String> {
        let n = self.len()?;
        let raw = self.take(n * S::BYTES)?;
        Ok(raw.chunks_exact(S::BYTES).map(S::read_le).collect())
    }
}

fn write_arch(w: &mut Writer, a: &Architecture) {
    for v in [a.traj_dim, a.time_dim, a.context_dim, a.embed_dim, a.hidden] {
        w.u64(v as u64);
    }
    w.f64(a.action_scale);
}

fn read_arch(r: &mut Reader) -> std::result::Result<Architecture, String> {
    Ok(Architecture {
        traj_dim: r.u64()? as usize,
        time_dim: r.u64()? as usize,
        context_dim: r.u64()? as usize,
        embed_dim: r.u64()? as usize,
        hidden: r.u64()? as usize,
        action_scale: r.f64()?,
    })
}

pub fn encode_checkpoint<S: Scalar>(ck: &Checkpoint<S>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(S::TAG);
    let arch = ck.params.arch();
    w.u64(arch.digest());
    write_arch(&mut w, arch);
    w.u64(ck.config_digest);
    w.u64(ck.iteration);
    w.bytes(ck.stage.as_bytes());
    w.bytes(ck.config_json.as_bytes());
    w.scalars(ck.params.as_slice());
    let oc = &ck.optimizer.config;
    for v in [oc.learning_rate, oc.beta1, oc.beta2, oc.epsilon] {
        w.f64(v);
    }
    w.u64(ck.optimizer.step);
    w.scalars(&ck.optimizer.m);
    w.scalars(&ck.optimizer.v);
    let sum = fnv1a(&w.0);
    w.u64(sum);
    w.0
}

/// Decodes a checkpoint, refusing it unless its architecture matches `expected`.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8], expected: &Architecture, path: &Path) -> Result<Checkpoint<S>> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a policy checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored_sum = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored_sum {
        return Err(bad("checksum mismatch (file corrupted)".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let mut inner = || -> std::result::Result<Checkpoint<S>, Error> {
        let version = r.u32().map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let tag = r.u8().map_err(bad)?;
        if tag != S::TAG {
            return Err(bad(format!("scalar tag {:?} does not match {:?}", tag as char, S::TAG as char)));
        }
        let digest = r.u64().map_err(bad)?;
        let arch = read_arch(&mut r).map_err(bad)?;
        if digest != expected.digest() || arch != *expected {
            return Err(Error::DigestMismatch {
                found: digest,
                expected: expected.digest(),
                detail: format!("checkpoint architecture {arch:?}, expected {expected:?}"),
            });
        }
        let config_digest = r.u64().map_err(bad)?;
        let iteration = r.u64().map_err(bad)?;
        let stage = String::from_utf8(r.bytes().map_err(bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let config_json = String::from_utf8(r.bytes().map_err(bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let data = r.scalars::<S>().map_err(bad)?;
        let params = PolicyParams::from_flat(arch, data).ok_or_else(|| bad("parameter count does not match architecture".into()))?;
        let mut hyper = [0.0; 4];
        for h in &mut hyper {
            *h = r.f64().map_err(bad)?;
        }
        let step = r.u64().map_err(bad)?;
        let m = r.scalars::<S>().map_err(bad)?;
        let v = r.scalars::<S>().map_err(bad)?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer state size does not match parameters".into()));
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            stage,
            iteration,
            params,
            optimizer: Adam {
                config: AdamConfig {
                    learning_rate: hyper[0],
                    beta1: hyper[1],
                    beta2: hyper[2],
                    epsilon: hyper[3],
                },
                step,
                m,
                v,
            },
            config_json,
            config_digest,
        })
    };
    inner()
}

pub fn save_checkpoint<S: Scalar>(ck: &Checkpoint<S>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path, expected: &Architecture) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected, path)
}
