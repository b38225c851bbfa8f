//! Binary checkpoint of a training run: model configuration, vocabulary,
//! parameters and Adam state.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "RNMSCKPT" | u32 version | u64 config hash | u64 epochs done
//! u64 vocab_size, word_dim, hidden, feature_dim | u64 max_len
//! u64 n_words, then per word: u32 len + utf-8 bytes
//! u64 n_tensors, then per tensor: u32 name len + name, u32 rank, u64 dims.., f64 data..
//! u64 adam step, then m and v tensors in the same encoding
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use log::warn;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::ingest::Vocabulary;
use crate::model::{ModelConfig, ModelParameters};
use crate::trainer::{OptimizerState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"RNMSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, cfg: &TrainConfig) -> Self {
        Checkpoint {
            config_hash: cfg.hash(),
            state,
        }
    }

    /// Warns and returns false when `cfg` differs from the training config.
    pub fn check_config(&self, cfg: &TrainConfig) -> bool {
        let same = self.config_hash == cfg.hash();
        if !same {
            warn!(
                "checkpoint config hash {:016x} differs from current config {:016x}",
                self.config_hash,
                cfg.hash()
            );
        }
        same
    }
}

fn corrupt(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Array) {
    write_str(out, name);
    out.write_u32::<LE>(t.shape().len() as u32).expect("vec write");
    for &d in t.shape() {
        out.write_u64::<LE>(d as u64).expect("vec write");
    }
    for &v in t.data() {
        out.write_f64::<LE>(v).expect("vec write");
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let st = &ck.state;
    let cfg = &st.params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u64::<LE>(ck.config_hash).unwrap();
    out.write_u64::<LE>(st.epochs_done as u64).unwrap();
    for d in [
        cfg.vocab_size,
        cfg.word_dim,
        cfg.hidden,
        cfg.feature_dim,
        st.vocab.max_sentence_length(),
    ] {
        out.write_u64::<LE>(d as u64).unwrap();
    }
    out.write_u64::<LE>(st.vocab.len() as u64).unwrap();
    for w in st.vocab.words() {
        write_str(&mut out, w);
    }
    let names = ModelParameters::tensor_names();
    out.write_u64::<LE>(names.len() as u64).unwrap();
    for (name, t) in names.iter().zip(st.params.tensors()) {
        write_tensor(&mut out, name, t);
    }
    out.write_u64::<LE>(st.optimizer.step).unwrap();
    for (name, t) in names.iter().zip(&st.optimizer.m) {
        write_tensor(&mut out, &format!("m.{name}"), t);
    }
    for (name, t) in names.iter().zip(&st.optimizer.v) {
        write_tensor(&mut out, &format!("v.{name}"), t);
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().map_err(corrupt)
    }

    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(corrupt)
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(corrupt)
    }

    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > self.remaining() {
            return Err(corrupt("truncated string"));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).map_err(corrupt)?;
        String::from_utf8(buf).map_err(corrupt)
    }

    fn tensor(&mut self, want_name: &str, want_shape: &[usize]) -> Result<Array> {
        let name = self.string()?;
        if name != want_name {
            return Err(corrupt(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(Error::shape(
                "checkpoint",
                format!("{name} stored as {shape:?}, expected {want_shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.remaining() {
            return Err(corrupt(format!("truncated tensor `{name}`")));
        }
        let mut data = vec![0.0; n];
        self.0.read_f64_into::<LE>(&mut data).map_err(corrupt)?;
        Array::new(shape, data)
    }
}

/// Decodes a checkpoint. With `expected`, the stored model configuration
/// must match it exactly.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut r = Reader(Cursor::new(&bytes[MAGIC.len()..]));
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let config_hash = r.u64()?;
    let epochs_done = r.usize()?;
    let config = ModelConfig {
        vocab_size: r.usize()?,
        word_dim: r.usize()?,
        hidden: r.usize()?,
        feature_dim: r.usize()?,
    };
    let max_len = r.usize()?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::shape(
                "checkpoint",
                format!("stored model {config:?} does not match expected {want:?}"),
            ));
        }
    }
    let n_words = r.usize()?;
    if n_words != config.vocab_size || n_words > r.remaining() {
        return Err(corrupt(format!(
            "{n_words} vocabulary words for vocab_size {}",
            config.vocab_size
        )));
    }
    let words = (0..n_words).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_words(words, max_len)?;

    let names = ModelParameters::tensor_names();
    let shapes = ModelParameters::expected_shapes(&config);
    if r.usize()? != names.len() {
        return Err(corrupt("unexpected tensor count"));
    }
    let mut read_all = |prefix: &str| -> Result<Vec<Array>> {
        names
            .iter()
            .zip(&shapes)
            .map(|(n, s)| r.tensor(&format!("{prefix}{n}"), s))
            .collect()
    };
    let tensors = read_all("")?;
    let mut params = ModelParameters::init(config, None, None, 0)?;
    for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
        *dst = src;
    }
    let step = r.u64()?;
    let mut read_all = |prefix: &str| -> Result<Vec<Array>> {
        names
            .iter()
            .zip(&shapes)
            .map(|(n, s)| r.tensor(&format!("{prefix}{n}"), s))
            .collect()
    };
    let m = read_all("m.")?;
    let v = read_all("v.")?;
    if r.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        config_hash,
        state: TrainState {
            params,
            optimizer: OptimizerState { step, m, v },
            vocab,
            epochs_done,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}
