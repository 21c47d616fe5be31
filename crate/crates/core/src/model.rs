//! The full network: encoder + length projection, and optionally the
//! sorting network used during training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ctc;
use crate::encoder::{
    positional_encoding, Dropout, EncoderParams, HiddenStates, ModelConfig, Span,
};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::sorting::{reorder_states, AsnConfig, AsnParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Longest sentence the position table covers.
pub const MAX_POSITIONS: usize = 1024;

/// Stream used to initialize sorting-network weights, kept apart from the
/// encoder stream so that both training arms start from the same ASN.
const ASN_INIT_STREAM: u64 = 7;

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub asn_config: Option<AsnConfig>,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub asn: Option<AsnParams>,
    positions: Tensor,
}

/// Random streams consumed by one training forward pass.
pub struct ForwardRngs<'a> {
    pub dropout: Option<&'a mut StreamRng>,
    pub sorting: &'a mut StreamRng,
}

pub struct LossOutput {
    /// Sum of per-sentence losses.
    pub loss: Var,
    /// Target tokens of the pairs that contributed.
    pub target_tokens: usize,
    /// Indices of infeasible pairs that were skipped.
    pub skipped: Vec<usize>,
    /// Reordering matrix per sentence when the sorting network ran.
    pub z: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, asn_config: Option<AsnConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(a) = &asn_config {
            a.validate()?;
        }
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, rng::streams::INIT);
        let encoder = EncoderParams::new(&mut store, &config, &mut init);
        let asn = asn_config.as_ref().map(|a| {
            let mut r = rng::stream(seed, ASN_INIT_STREAM);
            AsnParams::new(&mut store, &config, a, &mut r)
        });
        let positions = positional_encoding(MAX_POSITIONS, config.embed_dim);
        Ok(Self {
            config,
            asn_config,
            store,
            encoder,
            asn,
            positions,
        })
    }

    /// Same weights with a different first-layer delay.
    pub fn with_delay(&self, delay_k: usize) -> Result<Self> {
        let mut m = self.clone();
        m.config.delay_k = delay_k;
        m.config.validate()?;
        Ok(m)
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn has_asn(&self) -> bool {
        self.asn.is_some()
    }

    /// Copies every encoder/projection parameter from `source` by name.
    /// Sorting-network parameters are left at their fresh initialization.
    pub fn init_from(&mut self, source: &ParamStore) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, n, _)| !n.starts_with("asn."))
            .map(|(_, n, _)| n.into())
            .collect();
        for name in &names {
            match source.id(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(id) => {
                    let value = source.get(id).clone();
                    if self.store.assign(name, value).is_err() {
                        problems.push(format!("{name} (shape)"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InitMismatch(problems.join(", ")))
        }
    }

    /// Training objective for a batch of `(source, target)` pairs.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        pairs: &[(&[u32], &[u32])],
        use_asn: bool,
        label_smoothing: f64,
        rngs: ForwardRngs<'_>,
    ) -> Result<LossOutput> {
        let sources: Vec<&[u32]> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<&[u32]> = pairs.iter().map(|p| p.1).collect();
        let mut dropout = Dropout {
            rate: self.config.dropout,
            rng: rngs.dropout,
        };
        let (h, spans) = self.encoder.encode(
            g,
            vars,
            &self.config,
            &self.positions,
            &sources,
            &mut dropout,
        )?;
        let mut z = Vec::new();
        let states = if use_asn {
            let (asn, cfg) = self.asn_parts()?;
            let q = asn.compute_q(
                g,
                vars,
                &self.config,
                &self.positions,
                h,
                &spans,
                &targets,
                cfg.context_mask_ratio,
                rngs.sorting,
                &mut dropout,
            )?;
            let (hbar, zs) = reorder_states(g, q, h, &spans, cfg, rngs.sorting)?;
            z = zs;
            hbar
        } else {
            h
        };
        let logits = self.encoder.length_project(g, vars, &self.config, states)?;
        let frames = self.frame_spans(&spans);
        let (loss, skipped) = ctc::ctc_loss_packed(g, logits, &frames, &targets, label_smoothing)?;
        let target_tokens = targets
            .iter()
            .enumerate()
            .filter(|(i, _)| !skipped.contains(i))
            .map(|(_, t)| t.len())
            .sum();
        Ok(LossOutput {
            loss,
            target_tokens,
            skipped,
            z,
        })
    }

    fn asn_parts(&self) -> Result<(&AsnParams, &AsnConfig)> {
        match (&self.asn, &self.asn_config) {
            (Some(a), Some(c)) => Ok((a, c)),
            _ => Err(Error::MissingSortingNetwork),
        }
    }

    pub fn frame_spans(&self, spans: &[Span]) -> Vec<Span> {
        let mu = self.config.upsample_ratio;
        spans
            .iter()
            .map(|s| Span {
                start: s.start * mu,
                len: s.len * mu,
            })
            .collect()
    }

    /// Encoder states of one sentence (inference mode).
    pub fn encode(&self, source: &[u32]) -> Result<HiddenStates> {
        let mut g = Graph::new();
        let vars = self.store.register(&mut g, false);
        let (h, _) = self.encoder.encode(
            &mut g,
            &vars,
            &self.config,
            &self.positions,
            &[source],
            &mut Dropout::off(),
        )?;
        Ok(HiddenStates {
            values: g.value(h).clone(),
            source_length: source.len(),
        })
    }

    /// Frame logits `(mu * |x|, vocab)` for a batch, without reordering.
    pub fn frame_logits_batch(&self, sources: &[&[u32]]) -> Result<Vec<Tensor>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let vars = self.store.register(&mut g, false);
        let (h, spans) = self.encoder.encode(
            &mut g,
            &vars,
            &self.config,
            &self.positions,
            sources,
            &mut Dropout::off(),
        )?;
        let logits = self
            .encoder
            .length_project(&mut g, &vars, &self.config, h)?;
        let all = g.value(logits);
        let v = self.config.vocab_size;
        self.frame_spans(&spans)
            .iter()
            .map(|s| {
                Ok(Tensor::new(
                    alloc::vec![s.len, v],
                    all.data()[s.start * v..(s.start + s.len) * v].to_vec(),
                )?)
            })
            .collect()
    }

    pub fn frame_logits(&self, source: &[u32]) -> Result<Tensor> {
        Ok(self.frame_logits_batch(&[source])?.remove(0))
    }

    /// Per-frame argmax followed by collapse, on the whole sentence at once.
    pub fn offline_decode_batch(&self, sources: &[&[u32]]) -> Result<Vec<Vec<u32>>> {
        let nonempty: Vec<&[u32]> = sources.iter().copied().filter(|s| !s.is_empty()).collect();
        let mut logits = self.frame_logits_batch(&nonempty)?.into_iter();
        Ok(sources
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Vec::new()
                } else {
                    greedy_collapse(&logits.next().expect("one per sentence"))
                }
            })
            .collect())
    }

    pub fn offline_decode(&self, source: &[u32]) -> Result<Vec<u32>> {
        Ok(self.offline_decode_batch(&[source])?.remove(0))
    }

    /// `Q` for one pair with the given context mask ratio.
    pub fn compute_q(
        &self,
        source: &[u32],
        target: &[u32],
        mask_ratio: f64,
        seed: u64,
    ) -> Result<Tensor> {
        let (asn, _) = self.asn_parts()?;
        let mut g = Graph::new();
        let vars = self.store.register(&mut g, false);
        let mut off = Dropout::off();
        let (h, spans) = self.encoder.encode(
            &mut g,
            &vars,
            &self.config,
            &self.positions,
            &[source],
            &mut off,
        )?;
        let mut r = rng::stream(seed, rng::streams::SORTING);
        let q = asn.compute_q(
            &mut g,
            &vars,
            &self.config,
            &self.positions,
            h,
            &spans,
            &[target],
            mask_ratio,
            &mut r,
            &mut off,
        )?;
        Ok(g.value(q).clone())
    }

    /// Reordering matrix with the full reference as context and no noise,
    /// plus the frame logits of the reordered states.
    pub fn oracle_reordering(&self, source: &[u32], reference: &[u32]) -> Result<(Tensor, Tensor)> {
        let (asn, cfg) = self.asn_parts()?;
        let cfg = cfg.deterministic();
        let mut g = Graph::new();
        let vars = self.store.register(&mut g, false);
        let mut off = Dropout::off();
        let (h, spans) = self.encoder.encode(
            &mut g,
            &vars,
            &self.config,
            &self.positions,
            &[source],
            &mut off,
        )?;
        let mut r = rng::stream(0, rng::streams::SORTING);
        let q = asn.compute_q(
            &mut g,
            &vars,
            &self.config,
            &self.positions,
            h,
            &spans,
            &[reference],
            0.0,
            &mut r,
            &mut off,
        )?;
        let (hbar, zs) = reorder_states(&mut g, q, h, &spans, &cfg, &mut r)?;
        let logits = self
            .encoder
            .length_project(&mut g, &vars, &self.config, hbar)?;
        Ok((g.value(zs[0]).clone(), g.value(logits).clone()))
    }

    /// Decodes with the sorting network re-enabled and fed the reference.
    pub fn decode_with_oracle(&self, source: &[u32], reference: &[u32]) -> Result<Vec<u32>> {
        if source.is_empty() {
            return Ok(Vec::new());
        }
        let (_, logits) = self.oracle_reordering(source, reference)?;
        Ok(greedy_collapse(&logits))
    }
}

/// Argmax per frame, then collapse.
pub fn greedy_collapse(logits: &Tensor) -> Vec<u32> {
    let symbols: Vec<u32> = (0..logits.rows())
        .map(|t| kernels::argmax(logits.row(t)) as u32)
        .collect();
    ctc::collapse(&symbols)
}
