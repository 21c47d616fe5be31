//! Causal Transformer encoder with a delay-k first layer and the
//! position-wise length projection that feeds CTC.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{AttnSegment, Graph, Var, Visibility};
use crate::math;
use crate::params::{normal, Linear, Norm, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

/// Architecture hyperparameters of the encoder and projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Size of the shared id space, blank and padding included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub delay_k: usize,
    pub upsample_ratio: usize,
}

impl ModelConfig {
    /// Base Transformer encoder sizes.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 512,
            ffn_dim: 2048,
            heads: 8,
            layers: 6,
            dropout: 0.1,
            delay_k: 1,
            upsample_ratio: 2,
        }
    }

    /// Small model used for the synthetic experiments.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            embed_dim: 128,
            ffn_dim: 256,
            heads: 4,
            layers: 2,
            ..Self::new(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config("model.vocab_size must be at least 3"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.embed_dim {} is not divisible by model.heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::config(
                "model.layers and model.ffn_dim must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must lie in [0, 1)"));
        }
        if self.delay_k == 0 {
            return Err(Error::config("model.delay_k must be at least 1"));
        }
        if self.upsample_ratio == 0 {
            return Err(Error::config("model.upsample_ratio must be at least 1"));
        }
        Ok(())
    }
}

/// Encoder output for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// `(source_length, embed_dim)`.
    pub values: Tensor,
    pub source_length: usize,
}

/// Attention mask of the first encoder layer: row `t` may attend to column
/// `j` iff `j <= t + k - 1` (0-based), clipped to the sentence.
pub fn delay_mask(length: usize, k: usize) -> Vec<Vec<bool>> {
    (0..length)
        .map(|t| (0..length).map(|j| j < t + k).collect())
        .collect()
}

/// Sinusoidal position table of shape `(max_len, dim)`.
pub fn positional_encoding(max_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; max_len * dim];
    let half = dim / 2;
    for pos in 0..max_len {
        for i in 0..half {
            let freq = math::powf(10000.0, -(2.0 * i as f64) / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + 2 * i] = math::sin(angle);
            data[pos * dim + 2 * i + 1] = math::cos(angle);
        }
    }
    Tensor::new(vec![max_len, dim], data).expect("shape")
}

/// Contiguous rows of one sentence inside a packed matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Packs sentence lengths into consecutive spans.
pub fn spans_for(lengths: impl IntoIterator<Item = usize>) -> Vec<Span> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let s = Span { start, len };
            start += len;
            s
        })
        .collect()
}

/// Dropout switch threaded through a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut StreamRng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Query/key/value/output projections of a multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    /// `x + dropout(attention(norm(x), context))`; `context = None` means
    /// self-attention over `norm(x)`.
    #[allow(clippy::too_many_arguments)]
    pub fn residual(
        &self,
        g: &mut Graph,
        vars: &[Var],
        norm: &Norm,
        x: Var,
        context: Option<Var>,
        heads: usize,
        segments: &[AttnSegment],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var, TensorError> {
        let y = norm.forward(g, vars, x)?;
        let kv = context.unwrap_or(y);
        let q = self.q.forward(g, vars, y)?;
        let k = self.k.forward(g, vars, kv)?;
        let v = self.v.forward(g, vars, kv)?;
        let a = g.attention(q, k, v, heads, segments)?;
        let o = self.o.forward(g, vars, a)?;
        let o = dropout.apply(g, o)?;
        g.add(x, o)
    }
}

/// Position-wise feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.fc1"), d, ffn, rng),
            outer: Linear::new(store, &format!("{name}.fc2"), ffn, d, rng),
        }
    }

    pub fn residual(
        &self,
        g: &mut Graph,
        vars: &[Var],
        norm: &Norm,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var, TensorError> {
        let y = norm.forward(g, vars, x)?;
        let h = self.inner.forward(g, vars, y)?;
        let h = g.relu(h);
        let h = self.outer.forward(g, vars, h)?;
        let h = dropout.apply(g, h)?;
        g.add(x, h)
    }

    /// Graph-free residual block for a single row.
    pub fn apply_residual(&self, store: &ParamStore, norm: &Norm, x: &mut [f64]) {
        let y = norm.apply(store, x);
        let mut h = self.inner.apply(store, &y, 1);
        for v in h.iter_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        let h = self.outer.apply(store, &h, 1);
        for (a, b) in x.iter_mut().zip(&h) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub attn: AttentionParams,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

/// Parameter ids of the encoder and the length projection.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: crate::params::ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
    pub projection: Linear,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let embed = store.insert(
            "encoder.embed",
            normal(cfg.vocab_size, d, 1.0 / math::sqrt(d as f64), rng),
        );
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer {
                attn_norm: Norm::new(store, &format!("encoder.layers.{l}.attn_norm"), d),
                attn: AttentionParams::new(store, &format!("encoder.layers.{l}.attn"), d, rng),
                ffn_norm: Norm::new(store, &format!("encoder.layers.{l}.ffn_norm"), d),
                ffn: FeedForward::new(
                    store,
                    &format!("encoder.layers.{l}.ffn"),
                    d,
                    cfg.ffn_dim,
                    rng,
                ),
            })
            .collect();
        let final_norm = Norm::new(store, "encoder.final_norm", d);
        let projection = Linear::new(
            store,
            "projection",
            d,
            cfg.upsample_ratio * cfg.vocab_size,
            rng,
        );
        Self {
            embed,
            layers,
            final_norm,
            projection,
        }
    }

    /// Encodes a packed batch. Returns the `(total_rows, d)` hidden states
    /// and the row span of each sentence.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &[Var],
        cfg: &ModelConfig,
        positions: &Tensor,
        sources: &[&[u32]],
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Vec<Span>)> {
        let d = cfg.embed_dim;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in sources {
            if s.is_empty() {
                return Err(Error::Empty("source sentence"));
            }
            if s.len() > positions.shape()[0] {
                return Err(Error::config(format!(
                    "sentence of {} tokens exceeds the position table",
                    s.len()
                )));
            }
            for (p, &id) in s.iter().enumerate() {
                if id as usize >= cfg.vocab_size {
                    return Err(Error::OutOfVocabulary {
                        id,
                        vocab: cfg.vocab_size,
                    });
                }
                ids.push(id as usize);
                pos.extend_from_slice(positions.row(p));
            }
        }
        let spans = spans_for(sources.iter().map(|s| s.len()));
        let emb = g.embedding(vars[self.embed.0], &ids)?;
        let emb = g.scale(emb, math::sqrt(d as f64));
        let pe = g.constant(Tensor::new(vec![ids.len(), d], pos)?);
        let mut x = g.add(emb, pe)?;
        x = dropout.apply(g, x)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let delay = if l == 0 { cfg.delay_k } else { 1 };
            let segments: Vec<AttnSegment> = spans
                .iter()
                .map(|s| AttnSegment {
                    q_start: s.start,
                    q_len: s.len,
                    k_start: s.start,
                    k_len: s.len,
                    visibility: Visibility::Delayed(delay),
                })
                .collect();
            x = layer.attn.residual(
                g,
                vars,
                &layer.attn_norm,
                x,
                None,
                cfg.heads,
                &segments,
                dropout,
            )?;
            x = layer.ffn.residual(g, vars, &layer.ffn_norm, x, dropout)?;
        }
        let h = self.final_norm.forward(g, vars, x)?;
        Ok((h, spans))
    }

    /// Position-wise projection of `(rows, d)` states to
    /// `(upsample_ratio * rows, vocab)` frame logits. Row `i` yields frames
    /// `mu * i .. mu * i + mu - 1`.
    pub fn length_project(
        &self,
        g: &mut Graph,
        vars: &[Var],
        cfg: &ModelConfig,
        states: Var,
    ) -> Result<Var, TensorError> {
        let rows = g.value(states).shape()[0];
        let y = self.projection.forward(g, vars, states)?;
        g.reshape(y, &[cfg.upsample_ratio * rows, cfg.vocab_size])
    }
}
