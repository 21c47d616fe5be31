//! Auxiliary sorting network: non-causal decoder layers that look at the
//! (partially masked) target, scaled dot-product scores against the encoder
//! states, and the Gumbel-Sinkhorn operator that turns the scores into a
//! doubly-stochastic reordering matrix.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::Open01;
use rand::Rng;

use crate::encoder::{AttentionParams, Dropout, FeedForward, ModelConfig, Span};
use crate::graph::{AttnSegment, Graph, Var, Visibility};
use crate::math;
use crate::params::{normal, Norm, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

/// How scores are normalized into `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Alternating row/column normalization.
    Sinkhorn,
    /// Row-wise softmax only (the Gumbel-softmax ablation).
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsnConfig {
    pub decoder_layers: usize,
    pub sinkhorn_iters: usize,
    pub temperature: f64,
    pub noise_factor: f64,
    pub context_mask_ratio: f64,
    pub normalization: Normalization,
}

impl Default for AsnConfig {
    fn default() -> Self {
        Self {
            decoder_layers: 3,
            sinkhorn_iters: 16,
            temperature: 0.25,
            noise_factor: 0.3,
            context_mask_ratio: 0.5,
            normalization: Normalization::Sinkhorn,
        }
    }
}

impl AsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_layers == 0 {
            return Err(Error::config("asn.decoder_layers must be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("asn.temperature must be positive"));
        }
        if !(self.noise_factor >= 0.0) || !self.noise_factor.is_finite() {
            return Err(Error::config("asn.noise_factor must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.context_mask_ratio) {
            return Err(Error::config("asn.context_mask_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Settings used when the sorting network is queried for analysis or
    /// oracle decoding: full target context and no noise.
    pub fn deterministic(&self) -> Self {
        Self {
            noise_factor: 0.0,
            context_mask_ratio: 0.0,
            ..self.clone()
        }
    }
}

/// Ablation variants of the Gumbel-Sinkhorn operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Default,
    NoTemperature,
    NoNoise,
    GumbelSoftmax,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Default,
        Ablation::NoTemperature,
        Ablation::NoNoise,
        Ablation::GumbelSoftmax,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::Default),
            "no_temperature" => Ok(Self::NoTemperature),
            "no_noise" => Ok(Self::NoNoise),
            "gumbel_softmax" => Ok(Self::GumbelSoftmax),
            other => Err(Error::UnknownAblation(other.into())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::NoTemperature => "no_temperature",
            Self::NoNoise => "no_noise",
            Self::GumbelSoftmax => "gumbel_softmax",
        }
    }

    /// Configuration implementing this variant on top of `cfg`.
    pub fn apply(self, cfg: &AsnConfig) -> AsnConfig {
        let mut out = cfg.clone();
        match self {
            Self::Default => {}
            Self::NoTemperature => out.temperature = 1.0,
            Self::NoNoise => out.noise_factor = 0.0,
            Self::GumbelSoftmax => out.normalization = Normalization::Softmax,
        }
        out
    }
}

/// A sampled reordering matrix with the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationSample {
    pub matrix: Tensor,
    pub config: AsnConfig,
    pub noise_seed: u64,
}

/// `l` rounds of log-space row then column normalization on `x`, then `exp`.
/// With `l = 0` this is `exp(x)`.
pub fn sinkhorn_graph(g: &mut Graph, x: Var, iters: usize) -> Result<Var, TensorError> {
    let mut log_z = x;
    for _ in 0..iters {
        log_z = g.log_softmax(log_z);
        let t = g.transpose(log_z)?;
        let t = g.log_softmax(t);
        log_z = g.transpose(t)?;
    }
    Ok(g.exp(log_z))
}

/// Draws an `n x n` matrix of standard Gumbel noise, `-ln(-ln U)`.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let data = (0..n * n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -math::ln(-math::ln(u))
        })
        .collect();
    Tensor::new(vec![n, n], data).expect("square")
}

/// Perturbs, tempers and normalizes a score matrix on the graph.
pub fn gumbel_sinkhorn_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    scores: Var,
    cfg: &AsnConfig,
    rng: &mut R,
) -> Result<Var> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::config("asn.temperature must be positive"));
    }
    let t = g.value(scores);
    t.expect_rank("gumbel_sinkhorn", 2)?;
    let n = t.shape()[0];
    if t.shape()[1] != n {
        return Err(TensorError::invalid("gumbel_sinkhorn", "score matrix is not square").into());
    }
    let mut x = scores;
    if cfg.noise_factor > 0.0 {
        let mut e = gumbel_noise(n, rng);
        for v in e.data_mut() {
            *v *= cfg.noise_factor;
        }
        let e = g.constant(e);
        x = g.add(x, e)?;
    }
    x = g.scale(x, 1.0 / cfg.temperature);
    let z = match cfg.normalization {
        Normalization::Sinkhorn => sinkhorn_graph(g, x, cfg.sinkhorn_iters)?,
        Normalization::Softmax => g.softmax(x),
    };
    Ok(z)
}

/// `S^l(X)`: `exp(X)` followed by `l` row/column normalization rounds.
pub fn sinkhorn_normalize(x: &Tensor, iters: usize) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(TensorError::NonFinite("sinkhorn_normalize").into());
    }
    x.expect_rank("sinkhorn_normalize", 2)?;
    if x.shape()[0] != x.shape()[1] {
        return Err(TensorError::invalid("sinkhorn_normalize", "matrix is not square").into());
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let z = sinkhorn_graph(&mut g, v, iters)?;
    Ok(g.value(z).clone())
}

/// `Z = S^l((A + delta E) / tau)` with fresh noise from `seed`.
pub fn gumbel_sinkhorn(scores: &Tensor, cfg: &AsnConfig, seed: u64) -> Result<PermutationSample> {
    if !scores.all_finite() {
        return Err(TensorError::NonFinite("gumbel_sinkhorn").into());
    }
    let mut rng = rng::stream(seed, rng::streams::SORTING);
    let mut g = Graph::new();
    let a = g.constant(scores.clone());
    let z = gumbel_sinkhorn_graph(&mut g, a, cfg, &mut rng)?;
    Ok(PermutationSample {
        matrix: g.value(z).clone(),
        config: cfg.clone(),
        noise_seed: seed,
    })
}

/// `A = Q H^T / sqrt(d_h)` on the graph.
pub fn sinkhorn_attention_graph(g: &mut Graph, q: Var, h: Var) -> Result<Var, TensorError> {
    let (tq, th) = (g.value(q), g.value(h));
    if tq.shape() != th.shape() || tq.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "sinkhorn_attention",
            lhs: tq.shape().to_vec(),
            rhs: th.shape().to_vec(),
        });
    }
    let d = tq.shape()[1];
    let ht = g.transpose(h)?;
    let a = g.matmul(q, ht)?;
    Ok(g.scale(a, 1.0 / math::sqrt(d as f64)))
}

pub fn sinkhorn_attention(q: &Tensor, h: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let (qv, hv) = (g.constant(q.clone()), g.constant(h.clone()));
    let a = sinkhorn_attention_graph(&mut g, qv, hv)?;
    Ok(g.value(a).clone())
}

/// `H_bar = Z H`.
pub fn apply_permutation(z: &Tensor, h: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let (zv, hv) = (g.constant(z.clone()), g.constant(h.clone()));
    let out = g.matmul(zv, hv)?;
    Ok(g.value(out).clone())
}

/// Column of the largest entry in every row; rows may collide.
pub fn row_argmax(z: &Tensor) -> Vec<usize> {
    (0..z.rows())
        .map(|i| crate::kernels::argmax(z.row(i)))
        .collect()
}

/// Hard assignment from a soft matrix: entries are visited in decreasing
/// order and accepted when both their row and column are still free.
/// `result[row] = column`.
pub fn hard_assignment(z: &Tensor) -> Vec<usize> {
    let n = z.shape()[0];
    let mut entries: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    entries.sort_by(|&(a, b), &(c, d)| {
        z.at(c, d)
            .partial_cmp(&z.at(a, b))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then((a, b).cmp(&(c, d)))
    });
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    let mut out = vec![usize::MAX; n];
    for (i, j) in entries {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            out[i] = j;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_norm: Norm,
    pub self_attn: AttentionParams,
    pub cross_norm: Norm,
    pub cross_attn: AttentionParams,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

/// Parameter ids of the sorting network.
#[derive(Clone, Debug)]
pub struct AsnParams {
    /// Target table with one extra row for the mask embedding.
    pub target_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Norm,
}

impl AsnParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        model: &ModelConfig,
        cfg: &AsnConfig,
        rng: &mut R,
    ) -> Self {
        let d = model.embed_dim;
        let target_embed = store.insert(
            "asn.target_embed",
            normal(model.vocab_size + 1, d, 1.0 / math::sqrt(d as f64), rng),
        );
        let layers = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer {
                self_norm: Norm::new(store, &format!("asn.layers.{l}.self_norm"), d),
                self_attn: AttentionParams::new(
                    store,
                    &format!("asn.layers.{l}.self_attn"),
                    d,
                    rng,
                ),
                cross_norm: Norm::new(store, &format!("asn.layers.{l}.cross_norm"), d),
                cross_attn: AttentionParams::new(
                    store,
                    &format!("asn.layers.{l}.cross_attn"),
                    d,
                    rng,
                ),
                ffn_norm: Norm::new(store, &format!("asn.layers.{l}.ffn_norm"), d),
                ffn: FeedForward::new(store, &format!("asn.layers.{l}.ffn"), d, model.ffn_dim, rng),
            })
            .collect();
        let final_norm = Norm::new(store, "asn.final_norm", d);
        Self {
            target_embed,
            layers,
            final_norm,
        }
    }

    /// Id of the mask embedding row.
    pub fn mask_id(model: &ModelConfig) -> usize {
        model.vocab_size
    }

    /// Computes `Q` for a packed batch of encoder states.
    ///
    /// Each target position is replaced by the mask embedding independently
    /// with probability `mask_ratio`. Returns `Q` with the same row layout as
    /// `states`.
    #[allow(clippy::too_many_arguments)]
    pub fn compute_q<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        model: &ModelConfig,
        positions: &Tensor,
        states: Var,
        source_spans: &[Span],
        targets: &[&[u32]],
        mask_ratio: f64,
        mask_rng: &mut R,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let d = model.embed_dim;
        if targets.len() != source_spans.len() {
            return Err(Error::LengthMismatch {
                left: source_spans.len(),
                right: targets.len(),
            });
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(targets.len());
        for (span, tgt) in source_spans.iter().zip(targets) {
            if tgt.is_empty() {
                return Err(Error::Empty("target sentence"));
            }
            if tgt.len() > positions.shape()[0] {
                return Err(Error::config("target sentence exceeds the position table"));
            }
            segments.push(AttnSegment {
                q_start: span.start,
                q_len: span.len,
                k_start: ids.len(),
                k_len: tgt.len(),
                visibility: Visibility::All,
            });
            for (p, &id) in tgt.iter().enumerate() {
                if id as usize >= model.vocab_size {
                    return Err(Error::OutOfVocabulary {
                        id,
                        vocab: model.vocab_size,
                    });
                }
                let masked = mask_ratio > 0.0 && mask_rng.random::<f64>() < mask_ratio;
                ids.push(if masked {
                    Self::mask_id(model)
                } else {
                    id as usize
                });
                pos.extend_from_slice(positions.row(p));
            }
        }
        let emb = g.embedding(vars[self.target_embed.0], &ids)?;
        let emb = g.scale(emb, math::sqrt(d as f64));
        let pe = g.constant(Tensor::new(vec![ids.len(), d], pos)?);
        let ctx = g.add(emb, pe)?;
        let ctx = dropout.apply(g, ctx)?;
        let self_segments: Vec<AttnSegment> = source_spans
            .iter()
            .map(|s| AttnSegment {
                q_start: s.start,
                q_len: s.len,
                k_start: s.start,
                k_len: s.len,
                visibility: Visibility::All,
            })
            .collect();
        let mut x = states;
        for layer in &self.layers {
            x = layer.self_attn.residual(
                g,
                vars,
                &layer.self_norm,
                x,
                None,
                model.heads,
                &self_segments,
                dropout,
            )?;
            x = layer.cross_attn.residual(
                g,
                vars,
                &layer.cross_norm,
                x,
                Some(ctx),
                model.heads,
                &segments,
                dropout,
            )?;
            x = layer.ffn.residual(g, vars, &layer.ffn_norm, x, dropout)?;
        }
        Ok(self.final_norm.forward(g, vars, x)?)
    }
}

/// Per-sentence reordering of packed states: `H_bar_s = Z_s H_s` with
/// `Z_s = GumbelSinkhorn(Q_s H_s^T / sqrt(d))`. Returns the packed `H_bar`
/// and the `Z` node of every sentence.
pub fn reorder_states<R: Rng + ?Sized>(
    g: &mut Graph,
    q: Var,
    states: Var,
    spans: &[Span],
    cfg: &AsnConfig,
    noise_rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let mut reordered = Vec::with_capacity(spans.len());
    let mut zs = Vec::with_capacity(spans.len());
    for span in spans {
        let qs = g.slice_rows(q, span.start, span.len)?;
        let hs = g.slice_rows(states, span.start, span.len)?;
        let a = sinkhorn_attention_graph(g, qs, hs)?;
        let z = gumbel_sinkhorn_graph(g, a, cfg, noise_rng)?;
        reordered.push(g.matmul(z, hs)?);
        zs.push(z);
    }
    let hbar = g.concat(&reordered)?;
    Ok((hbar, zs))
}
