//! Little-endian binary checkpoints.
//!
//! Layout: magic `SSCK`, `u32` version, then the fields of [`Checkpoint`]
//! in declaration order. Integers are `u64`, reals are raw `f64` bits,
//! strings and arrays carry a `u64` length prefix.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::ModelConfig;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::sorting::{AsnConfig, Normalization};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub cursor: u64,
    pub model: ModelConfig,
    pub asn: Option<AsnConfig>,
    /// Free-form snapshot of the run configuration.
    pub config_text: String,
    pub params: Vec<NamedTensor>,
    pub adam: Option<AdamState>,
    pub rngs: Vec<(String, RngState)>,
    pub best_val_bleu: f64,
    pub best_step: u64,
}

impl Checkpoint {
    /// Weights and configuration only.
    pub fn from_model(model: &Model, config_text: &str) -> Self {
        Self {
            step: 0,
            epoch: 0,
            cursor: 0,
            model: model.config.clone(),
            asn: model.asn_config.clone(),
            config_text: config_text.into(),
            params: model
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.into(),
                    tensor: t.clone(),
                })
                .collect(),
            adam: None,
            rngs: Vec::new(),
            best_val_bleu: 0.0,
            best_step: 0,
        }
    }

    /// Drops the sorting network, optimizer and random state.
    pub fn inference_only(&self) -> Self {
        Self {
            asn: None,
            params: self
                .params
                .iter()
                .filter(|p| !p.name.starts_with("asn."))
                .cloned()
                .collect(),
            adam: None,
            rngs: Vec::new(),
            ..self.clone()
        }
    }

    pub fn rng(&self, name: &str) -> Option<RngState> {
        self.rngs.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    /// Rebuilds the model and loads every stored parameter.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), self.asn.clone(), 0)?;
        load_params(&mut model.store, &self.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.cursor);
        let m = &self.model;
        for x in [m.vocab_size, m.embed_dim, m.ffn_dim, m.heads, m.layers] {
            w.usize(x);
        }
        w.f64(m.dropout);
        w.usize(m.delay_k);
        w.usize(m.upsample_ratio);
        match &self.asn {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.usize(a.decoder_layers);
                w.usize(a.sinkhorn_iters);
                w.f64(a.temperature);
                w.f64(a.noise_factor);
                w.f64(a.context_mask_ratio);
                w.u8(match a.normalization {
                    Normalization::Sinkhorn => 0,
                    Normalization::Softmax => 1,
                });
            }
        }
        w.str(&self.config_text);
        w.usize(self.params.len());
        for p in &self.params {
            w.str(&p.name);
            w.usize(p.tensor.rank());
            for &d in p.tensor.shape() {
                w.usize(d);
            }
            w.f64s(p.tensor.data());
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                for moments in [&a.m, &a.v] {
                    w.usize(moments.len());
                    for x in moments {
                        w.f64s(x);
                    }
                }
            }
        }
        w.usize(self.rngs.len());
        for (name, s) in &self.rngs {
            w.str(name);
            w.0.extend_from_slice(&s.seed);
            w.u64(s.stream);
            w.0.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        w.f64(self.best_val_bleu);
        w.u64(self.best_step);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let cursor = r.u64()?;
        let model = ModelConfig {
            vocab_size: r.usize()?,
            embed_dim: r.usize()?,
            ffn_dim: r.usize()?,
            heads: r.usize()?,
            layers: r.usize()?,
            dropout: r.f64()?,
            delay_k: r.usize()?,
            upsample_ratio: r.usize()?,
        };
        let asn = match r.u8()? {
            0 => None,
            1 => Some(AsnConfig {
                decoder_layers: r.usize()?,
                sinkhorn_iters: r.usize()?,
                temperature: r.f64()?,
                noise_factor: r.f64()?,
                context_mask_ratio: r.f64()?,
                normalization: match r.u8()? {
                    0 => Normalization::Sinkhorn,
                    1 => Normalization::Softmax,
                    x => return Err(Error::Checkpoint(format!("bad normalization tag {x}"))),
                },
            }),
            x => return Err(Error::Checkpoint(format!("bad flag {x}"))),
        };
        let config_text = r.str()?;
        let n = r.usize()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            params.push(NamedTensor {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut read = || -> Result<Vec<Vec<f64>>> {
                    let n = r.usize()?;
                    (0..n).map(|_| r.f64s()).collect()
                };
                let m = read()?;
                let v = read()?;
                Some(AdamState { step, m, v })
            }
            x => return Err(Error::Checkpoint(format!("bad flag {x}"))),
        };
        let n = r.usize()?;
        let mut rngs = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let seed = r.array()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.array()?);
            rngs.push((
                name,
                RngState {
                    seed,
                    stream,
                    word_pos,
                },
            ));
        }
        let best_val_bleu = r.f64()?;
        let best_step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            step,
            epoch,
            cursor,
            model,
            asn,
            config_text,
            params,
            adam,
            rngs,
            best_val_bleu,
            best_step,
        })
    }
}

/// Assigns every named tensor; reports all unknown names and shape
/// mismatches at once.
pub fn load_params(store: &mut ParamStore, params: &[NamedTensor]) -> Result<()> {
    let mut problems = Vec::new();
    for p in params {
        if store.assign(&p.name, p.tensor.clone()).is_err() {
            problems.push(p.name.clone());
        }
    }
    for (_, name, _) in store.iter() {
        if !params.iter().any(|p| p.name == name) {
            problems.push(format!("{name} (missing)"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "parameter mismatch: {}",
            problems.join(", ")
        )))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn usize(&mut self, x: usize) {
        self.u64(x as u64);
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
