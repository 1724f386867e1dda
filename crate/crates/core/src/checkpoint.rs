//! Single-file binary checkpoint codec.
//!
//! Layout (little-endian): magic `VSEDIV01`; length-prefixed UTF-8
//! `key=value` config lines; both vocabularies as length-prefixed token
//! lists; the parameter manifest (name, rows, cols, f64 payload) in
//! canonical order; Adam state (step, then m and v per parameter in manifest
//! order); epoch and validation score. Round-trips are value-exact: floats
//! are stored as raw bits.

use std::fmt;
use std::path::Path;

use crate::config::RunConfig;
use crate::encoders::Vocabulary;
use crate::model::ModelParams;
use crate::params::Param;
use crate::tensor::Shape;
use crate::training::{Checkpoint, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSEDIV01";

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    Io { path: String, message: String },
    Corrupt { offset: usize, message: String },
    /// The file's parameter manifest disagrees with the model rebuilt from
    /// its own config (names, order, or shapes).
    Manifest { message: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, message } => write!(f, "{path}: {message}"),
            CheckpointError::Corrupt { offset, message } => {
                write!(f, "checkpoint byte {offset}: {message}")
            }
            CheckpointError::Manifest { message } => write!(f, "checkpoint manifest: {message}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt<T>(&self, message: impl Into<String>) -> CheckpointResult<T> {
        Err(CheckpointError::Corrupt {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> CheckpointResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.corrupt("unexpected end of file");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> CheckpointResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> CheckpointResult<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> CheckpointResult<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str(&mut self) -> CheckpointResult<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| CheckpointError::Corrupt {
            offset: at,
            message: format!("invalid UTF-8: {e}"),
        })
    }

    fn f64s(&mut self, n: usize) -> CheckpointResult<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(CHECKPOINT_MAGIC);

    let pairs = ckpt.cfg.to_pairs();
    w.u32(pairs.len() as u32);
    for (k, v) in &pairs {
        w.str(&format!("{k}={v}"));
    }

    for vocab in [&ckpt.vocab_a, &ckpt.vocab_b] {
        let tokens = vocab.tokens();
        w.u32(tokens.len() as u32);
        for t in tokens {
            w.str(t);
        }
    }

    let flat = ckpt.params.flat();
    w.u32(flat.len() as u32);
    for p in &flat {
        w.str(&p.name);
        w.u32(p.shape.rows as u32);
        w.u32(p.shape.cols as u32);
        w.f64s(&p.values);
    }

    w.u64(ckpt.opt.step);
    for (m, v) in ckpt.opt.m.iter().zip(&ckpt.opt.v) {
        w.f64s(m);
        w.f64s(v);
    }

    w.u32(ckpt.epoch as u32);
    w.f64(ckpt.val_score);
    w.bytes
}

fn decode(bytes: &[u8]) -> CheckpointResult<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }

    let n_pairs = r.u32()? as usize;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let line = r.str()?;
        let (k, v) = match line.split_once('=') {
            Some(kv) => kv,
            None => return r.corrupt(format!("config line '{line}' lacks '='")),
        };
        pairs.push((k.to_string(), v.to_string()));
    }
    let cfg = RunConfig::from_pairs(&pairs).map_err(|e| CheckpointError::Manifest {
        message: e.to_string(),
    })?;

    let mut vocabs = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            tokens.push(r.str()?);
        }
        if tokens.len() < 2 {
            return r.corrupt("vocabulary too short for reserved tokens");
        }
        vocabs.push(Vocabulary::from_full_list(tokens));
    }
    let vocab_b = vocabs.pop().unwrap();
    let vocab_a = vocabs.pop().unwrap();

    let n_params = r.u32()? as usize;
    let mut file_params: Vec<Param> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let values = r.f64s(rows * cols)?;
        file_params.push(Param::new(name, Shape::new(rows, cols), values));
    }

    // Rebuild the structured model and fill it strictly in manifest order.
    let mut params = ModelParams::init(&cfg, vocab_a.len(), vocab_b.len(), cfg.seed);
    {
        let mut targets = params.flat_mut();
        if targets.len() != file_params.len() {
            return Err(CheckpointError::Manifest {
                message: format!(
                    "file has {} parameters, model expects {}",
                    file_params.len(),
                    targets.len()
                ),
            });
        }
        for (target, file) in targets.iter_mut().zip(&file_params) {
            if target.name != file.name || target.shape != file.shape {
                return Err(CheckpointError::Manifest {
                    message: format!(
                        "expected {} {}, file has {} {}",
                        target.name, target.shape, file.name, file.shape
                    ),
                });
            }
            target.values.copy_from_slice(&file.values);
        }
    }

    let step = r.u64()?;
    let mut m = Vec::with_capacity(n_params);
    let mut v = Vec::with_capacity(n_params);
    for p in &file_params {
        m.push(r.f64s(p.len())?);
        v.push(r.f64s(p.len())?);
    }

    let epoch = r.u32()? as usize;
    let val_score = r.f64()?;
    if r.pos != bytes.len() {
        return r.corrupt("trailing bytes after checkpoint payload");
    }

    Ok(Checkpoint {
        cfg,
        params,
        opt: OptimizerState { step, m, v },
        epoch,
        val_score,
        vocab_a,
        vocab_b,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> CheckpointResult<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load(path: &Path) -> CheckpointResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode(&bytes)
}
