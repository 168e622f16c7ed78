//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          4 bytes  "KZRD"
//! version        u32      1
//! config_len     u32
//! config         config_len bytes of UTF-8 key=value lines: every model and
//!                training hyperparameter, then encoder_hash, decoder_hash and
//!                vocab_hash (hex SHA-256 of the respective canonical text)
//! vocab_count    u32
//! vocab_count ×  { len u32, UTF-8 bytes }            index order, <S> and <E> first
//! epoch          u64      completed epochs
//! best_epoch     u64
//! best_val_ser   f64
//! tensor_count   u32
//! tensor_count × { name_len u32, name, dtype u8 (1 = f64), rank u32, rank × u64 extents }
//! payloads       each tensor's values as f64, in manifest order
//! ```
//!
//! Model parameters come first in registration order. Optimizer
//! accumulators, when present, follow as `adadelta.sq_grad/<name>` and then
//! `adadelta.sq_delta/<name>` for every parameter.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{decoder_text, encoder_text, train_text, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{AdaDelta, TrainConfig};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"KZRD";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
const SQ_GRAD: &str = "adadelta.sq_grad/";
const SQ_DELTA: &str = "adadelta.sq_delta/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: Vec<(String, Tensor)>,
    /// `(E[g²], E[Δx²])` per parameter.
    pub optimizer: Option<(Vec<Tensor>, Vec<Tensor>)>,
    pub epoch: u64,
    pub best_epoch: u64,
    pub best_val_ser: Scalar,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        train_config: &TrainConfig,
        optimizer: Option<&AdaDelta>,
        epoch: u64,
        best_val_ser: Scalar,
        best_epoch: u64,
    ) -> Self {
        Self {
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            vocab: model.vocab.clone(),
            params: model
                .params
                .names()
                .iter()
                .cloned()
                .zip(model.params.tensors().iter().cloned())
                .collect(),
            optimizer: optimizer.map(|o| (o.sq_grad.clone(), o.sq_delta.clone())),
            epoch,
            best_epoch,
            best_val_ser,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::with_weights(&self.model_config, self.vocab.clone(), self.params.clone())
    }

    fn config_text(&self) -> String {
        let e = encoder_text(&self.model_config.encoder);
        let d = decoder_text(&self.model_config.decoder);
        format!(
            "{e}{d}{}encoder_hash={}\ndecoder_hash={}\nvocab_hash={}\n",
            train_text(&self.train_config),
            sha256_hex(e.as_bytes()),
            sha256_hex(d.as_bytes()),
            sha256_hex(self.vocab.to_text().as_bytes()),
        )
    }

    /// Hex SHA-256 of the vocabulary file text.
    pub fn vocab_hash(&self) -> String {
        sha256_hex(self.vocab.to_text().as_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val_ser.to_le_bytes());

        let mut tensors: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some((sq_grad, sq_delta)) = &self.optimizer {
            for (prefix, set) in [(SQ_GRAD, sq_grad), (SQ_DELTA, sq_delta)] {
                for ((name, _), t) in self.params.iter().zip(set) {
                    tensors.push((format!("{prefix}{name}"), t));
                }
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_str(&mut out, name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a KZRD checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = r.string()?;
        let mut run_text = String::new();
        let mut hashes = Vec::new();
        for line in config.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.ends_with("_hash") => hashes.push((k.to_string(), v.to_string())),
                _ => {
                    run_text.push_str(line);
                    run_text.push('\n');
                }
            }
        }
        let run = RunConfig::parse(&run_text, Path::new("<checkpoint>"))
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let n_vocab = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::parse(&(tokens.join("\n") + "\n"), Path::new("<checkpoint>"))
            .map_err(|e| Error::Checkpoint(format!("vocabulary: {e}")))?;
        let epoch = r.u64()?;
        let best_epoch = r.u64()?;
        let best_val_ser = r.f64()?;

        let n_tensors = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut params = Vec::new();
        let mut sq_grad = Vec::new();
        let mut sq_delta = Vec::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if name.starts_with(SQ_GRAD) {
                sq_grad.push(t);
            } else if name.starts_with(SQ_DELTA) {
                sq_delta.push(t);
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        let optimizer = match (sq_grad.len(), sq_delta.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((sq_grad, sq_delta)),
            _ => return Err(Error::Checkpoint("incomplete optimizer state".into())),
        };
        let ckpt = Self {
            model_config: run.model,
            train_config: run.train,
            vocab,
            params,
            optimizer,
            epoch,
            best_epoch,
            best_val_ser,
        };
        let expected = ckpt.config_text();
        for (k, v) in hashes {
            if !expected.contains(&format!("{k}={v}\n")) {
                return Err(Error::Checkpoint(format!("{k} does not match stored contents")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
