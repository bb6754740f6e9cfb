//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VTRGCKPT" | u32 version
//! u32 n | n bytes   model config as TOML
//! u32 count, then per tensor: u32 n | name | u32 rank | u64 dims.. | f64 values..
//! u8 has_normalizer, then u64 dim | f64 mean.. | f64 std..
//! u32 anchors, then per anchor: u32 n | label | u64 enrolled | u64 dim | f64 values..
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::NormalizerStats;
use crate::inference::AnchorEmbedding;
use crate::model::{Model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"VTRGCKPT";
pub const VERSION: u32 = 1;

/// A model with the feature statistics it was trained on and any enrolled
/// anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Option<NormalizerStats>,
    pub anchors: Vec<(String, AnchorEmbedding)>,
}

impl Checkpoint {
    pub fn new(model: Model, normalizer: Option<NormalizerStats>) -> Self {
        Self {
            model,
            normalizer,
            anchors: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let cfg = toml::to_string(&self.model.config).expect("model config serializes");
        w.str(&cfg);
        let tensors = self.model.params.tensors();
        w.u32(tensors.len() as u32);
        for t in &tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.f64s(t.data);
        }
        match &self.normalizer {
            Some(n) => {
                w.bytes(&[1]);
                w.u64(n.dim() as u64);
                w.f64s(n.mean.as_slice().expect("contiguous"));
                w.f64s(n.std.as_slice().expect("contiguous"));
            }
            None => w.bytes(&[0]),
        }
        w.u32(self.anchors.len() as u32);
        for (label, a) in &self.anchors {
            w.str(label);
            w.u64(a.enrolled_count as u64);
            w.u64(a.values.len() as u64);
            w.f64s(a.values.as_slice().expect("contiguous"));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config: ModelConfig =
            toml::from_str(&r.str()?).map_err(|e| bad(format!("model config: {e}")))?;
        config.validate()?;
        // Initialization values are overwritten below; only the layout matters.
        let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(bad(format!(
                "{count} tensors, config needs {}",
                expected.len()
            )));
        }
        for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
            let got = r.str()?;
            if &got != name {
                return Err(bad(format!("tensor {got} where {name} was expected")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(bad(format!(
                    "{name}: shape {dims:?}, config needs {shape:?}"
                )));
            }
            let values = r.f64s(slot.data.len())?;
            slot.data.copy_from_slice(&values);
        }
        let normalizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let dim = r.len()?;
                let mean = Array1::from(r.f64s(dim)?);
                let std = Array1::from(r.f64s(dim)?);
                Some(NormalizerStats { mean, std })
            }
            f => return Err(bad(format!("normalizer flag {f}"))),
        };
        let n_anchors = r.u32()? as usize;
        let mut anchors = Vec::with_capacity(n_anchors.min(1024));
        for _ in 0..n_anchors {
            let label = r.str()?;
            let enrolled_count = r.len()?;
            let dim = r.len()?;
            if dim != config.embedding_dim() {
                return Err(bad(format!("anchor {label}: dimension {dim}")));
            }
            let values = Array1::from(r.f64s(dim)?);
            anchors.push((
                label,
                AnchorEmbedding {
                    values,
                    enrolled_count,
                },
            ));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            model: Model { config, params },
            normalizer,
            anchors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| bad("length overflow"))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non-UTF-8 string"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
