//! Versioned binary checkpoint; the layout is described in `docs/checkpoint.md`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use latclass_core::corpus::{Vocabulary, NUM_RESERVED};
use latclass_core::{Model, ModelConfig, ModelError, ParamStore, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"LATCLSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config record: {0}")]
    Config(#[from] serde_json::Error),
    #[error("{0}")]
    Model(ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> io::Result<()> {
    put_u64(w, b.len() as u64)?;
    w.write_all(b)
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    put_u64(w, xs.len() as u64)?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        if n > limit {
            return Err(CheckpointError::Malformed(format!("{what} length {n} is implausible")));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<Vec<u8>, CheckpointError> {
        let n = self.len(1 << 32, "byte string")?;
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes()?).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len(1 << 34, "array")?;
        (0..n).map(|_| Ok(f64::from_le_bytes(self.array()?))).collect()
    }
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_bytes(w, &serde_json::to_vec(&self.model.config)?)?;
        put_f64s(w, self.model.label_prior())?;
        put_u64(w, self.vocab.min_count as u64)?;
        let content = &self.vocab.tokens()[NUM_RESERVED..];
        put_u64(w, content.len() as u64)?;
        for t in content {
            put_bytes(w, t.as_bytes())?;
        }
        put_u64(w, self.model.params.len() as u64)?;
        for (_, name, t) in self.model.params.iter() {
            put_bytes(w, name.as_bytes())?;
            put_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u64(w, d as u64)?;
            }
            put_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = Reader { inner: r };
        if &r.array::<8>()? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config: ModelConfig = serde_json::from_slice(&r.bytes()?)?;
        let prior = r.f64s()?;
        let min_count = r.u64()? as usize;
        let n_tokens = r.len(1 << 32, "vocabulary")?;
        let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocabulary::from_content_tokens(tokens, min_count);
        let n_params = r.len(1 << 16, "parameter list")?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            params.add(name, t);
        }
        let mut rest = Vec::new();
        r.inner.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", rest.len())));
        }
        if vocab.len() != config.vocab_size {
            return Err(CheckpointError::Malformed("vocabulary size differs from the config".into()));
        }
        let model = Model::from_parts(config, params, prior).map_err(CheckpointError::Model)?;
        Ok(Checkpoint { model, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}
