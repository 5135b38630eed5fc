//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DAPCKPT\0"
//! version    u32
//! sections   u32 count, then per section:
//!              u32 name length, name (UTF-8), u64 body length, body (UTF-8)
//! arrays     u32 count, then per array:
//!              u32 name length, name, u32 rank, rank x u64 dims,
//!              product(dims) x f64
//! ```
//!
//! Text sections, in order: `model` and `train` (`key = value` text),
//! `rng` (generator state) and `history` (metrics CSV). Arrays are the
//! model parameters in registration order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::Kv;
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::param::Params;
use crate::tensor::Tensor;
use crate::train::{metrics_csv, parse_metrics_csv, MetricsRow, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DAPCKPT\0";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 4] = ["model", "train", "rng", "history"];

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
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

    fn to_text(self) -> String {
        let hex: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "seed = {hex}\nstream = {}\nword_pos = {}\n",
            self.stream, self.word_pos
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let kv = Kv::parse(text, Path::new("<rng>"))?;
        let bad = || Error::Checkpoint("bad rng section".into());
        let hex = kv.get("seed").ok_or_else(bad)?;
        if hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(RngState {
            seed,
            stream: kv.parse_opt("stream")?.ok_or_else(bad)?,
            word_pos: kv.parse_opt("word_pos")?.ok_or_else(bad)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Params,
    /// Training generator state after the last epoch.
    pub rng: RngState,
    pub history: Vec<MetricsRow>,
}

impl ModelCheckpoint {
    /// Rebuilds the model and loads the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = build_model(&self.model, 0)?;
        let arrays: Vec<_> = self
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec(), e.value.to_vec()))
            .collect();
        model.params.load(&arrays)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let bodies = [
            self.model.to_kv().to_text(),
            self.train.to_kv().to_text(),
            self.rng.to_text(),
            metrics_csv(&self.history),
        ];
        out.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
        for (name, body) in SECTIONS.iter().zip(&bodies) {
            put_name(&mut out, name);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(body.as_bytes());
        }
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            put_name(&mut out, &e.name);
            let shape = e.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Version {
                found: format!(
                    "unknown format (magic {:?})",
                    String::from_utf8_lossy(magic)
                ),
                expected: format!("dapconv checkpoint v{VERSION}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: format!("dapconv checkpoint v{version}"),
                expected: format!("dapconv checkpoint v{VERSION}"),
            });
        }
        let n_sections = r.u32()? as usize;
        let mut bodies = Vec::with_capacity(n_sections);
        for expected in SECTIONS {
            let name = r.name()?;
            if name != expected {
                return Err(Error::Checkpoint(format!(
                    "expected section {expected}, found {name}"
                )));
            }
            let len = r.u64()? as usize;
            let body = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("section {name} is not UTF-8")))?;
            bodies.push(body.to_string());
        }
        if n_sections != SECTIONS.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} sections, found {n_sections}",
                SECTIONS.len()
            )));
        }
        let model_kv = Kv::parse(&bodies[0], Path::new("<model>"))?;
        let model = ModelConfig::from_kv(&model_kv)?;
        model_kv.reject_unused("model section")?;
        let train_kv = Kv::parse(&bodies[1], Path::new("<train>"))?;
        let train = TrainConfig::from_kv(&train_kv)?;
        train_kv.reject_unused("train section")?;
        let rng = RngState::from_text(&bodies[2])?;
        let history = parse_metrics_csv(&bodies[3])?;

        let n_arrays = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..n_arrays {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("array {name} is too large")))?;
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("array too large".into()))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(name, Tensor::from_vec(shape, values)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ModelCheckpoint {
            model,
            train,
            params,
            rng,
            history,
        })
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_bytes(&fs::read(path)?)
}
