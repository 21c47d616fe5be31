//! Incremental inference: hidden states are finalized as soon as the delay
//! mask allows, projected to frames and collapsed online.

use alloc::vec;
use alloc::vec::Vec;

use crate::ctc::CollapseState;
use crate::encoder::EncoderLayer;
use crate::kernels;
use crate::math;
use crate::model::{Model, MAX_POSITIONS};
use crate::{Error, Result};

/// Source of elapsed time for computation-aware latency.
pub trait Clock {
    /// Called once when a stream starts.
    fn start(&mut self) {}
    /// Milliseconds since [`Clock::start`]. `reads` is the number of source
    /// tokens consumed so far; simulated clocks may use it.
    fn elapsed_ms(&mut self, reads: usize) -> f64;
}

/// Deterministic clock: `offset_ms + reads * ms_per_read`. With the
/// defaults it reports one millisecond per source token read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeClock {
    pub ms_per_read: f64,
    pub offset_ms: f64,
}

impl Default for FakeClock {
    fn default() -> Self {
        Self {
            ms_per_read: 1.0,
            offset_ms: 0.0,
        }
    }
}

impl Clock for FakeClock {
    fn elapsed_ms(&mut self, reads: usize) -> f64 {
        self.offset_ms + reads as f64 * self.ms_per_read
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emission {
    pub token: u32,
    /// Source tokens read when the token was written.
    pub g: usize,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamTrace {
    pub emissions: Vec<Emission>,
    pub source_length: usize,
    pub target_length: usize,
    pub finished: bool,
}

impl StreamTrace {
    pub fn g(&self) -> Vec<usize> {
        self.emissions.iter().map(|e| e.g).collect()
    }

    pub fn ms(&self) -> Vec<f64> {
        self.emissions.iter().map(|e| e.ms).collect()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.emissions.iter().map(|e| e.token).collect()
    }
}

/// Per-layer key/value caches of a causal encoder.
pub struct IncrementalEncoder<'m> {
    model: &'m Model,
    delay: usize,
    /// Residual-stream input of the first layer, one row per token read.
    inputs: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    consumed: usize,
    finalized: usize,
    ended: bool,
}

impl<'m> IncrementalEncoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        let layers = model.config.layers;
        Self {
            model,
            delay: model.config.delay_k,
            inputs: Vec::new(),
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            consumed: 0,
            finalized: 0,
            ended: false,
        }
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn finalized(&self) -> usize {
        self.finalized
    }

    /// Reads one source token and returns the hidden states it unlocked.
    pub fn push(&mut self, token: u32) -> Result<Vec<Vec<f64>>> {
        if self.ended {
            return Err(Error::config("token pushed after end of stream"));
        }
        let cfg = &self.model.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::OutOfVocabulary {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if self.consumed >= MAX_POSITIONS {
            return Err(Error::config("stream exceeds the position table"));
        }
        let d = cfg.embed_dim;
        let store = &self.model.store;
        let table = store.get(self.model.encoder.embed);
        let scale = math::sqrt(d as f64);
        let pe = self.model.positions().row(self.consumed);
        let row: Vec<f64> = table
            .row(token as usize)
            .iter()
            .zip(pe)
            .map(|(e, p)| e * scale + p)
            .collect();
        let first = &self.model.encoder.layers[0];
        self.cache_kv(0, first, &row);
        self.inputs.extend_from_slice(&row);
        self.consumed += 1;
        self.advance()
    }

    /// Signals end of stream and returns the remaining hidden states.
    pub fn finish(&mut self) -> Result<Vec<Vec<f64>>> {
        self.ended = true;
        self.advance()
    }

    fn cache_kv(&mut self, l: usize, layer: &EncoderLayer, x: &[f64]) {
        let store = &self.model.store;
        let y = layer.attn_norm.apply(store, x);
        let k = layer.attn.k.apply(store, &y, 1);
        let v = layer.attn.v.apply(store, &y, 1);
        self.keys[l].extend_from_slice(&k);
        self.values[l].extend_from_slice(&v);
    }

    fn ready(&self, t: usize) -> bool {
        t < self.consumed && (self.ended || t + self.delay <= self.consumed)
    }

    fn advance(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        while self.ready(self.finalized) {
            let t = self.finalized;
            out.push(self.finalize(t));
            self.finalized += 1;
        }
        Ok(out)
    }

    fn finalize(&mut self, t: usize) -> Vec<f64> {
        let model = self.model;
        let cfg = &model.config;
        let store = &model.store;
        let d = cfg.embed_dim;
        let mut x = self.inputs[t * d..(t + 1) * d].to_vec();
        for (l, layer) in model.encoder.layers.iter().enumerate() {
            if l > 0 {
                self.cache_kv(l, layer, &x);
            }
            let visible = if l == 0 {
                (t + self.delay).min(self.consumed)
            } else {
                t + 1
            };
            attention_residual(self, l, layer, &mut x, visible);
            layer.ffn.apply_residual(store, &layer.ffn_norm, &mut x);
        }
        model.encoder.final_norm.apply(store, &x)
    }
}

fn attention_residual(
    enc: &IncrementalEncoder<'_>,
    l: usize,
    layer: &EncoderLayer,
    x: &mut [f64],
    visible: usize,
) {
    let store = &enc.model.store;
    let cfg = &enc.model.config;
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / math::sqrt(hd as f64);
    let y = layer.attn_norm.apply(store, x);
    let q = layer.attn.q.apply(store, &y, 1);
    let mut attended = vec![0.0; d];
    let mut probs = vec![0.0; visible];
    for h in 0..heads {
        kernels::attention_row(
            &q[h * hd..(h + 1) * hd],
            &enc.keys[l],
            &enc.values[l],
            d,
            h * hd,
            visible,
            scale,
            &mut probs,
            &mut attended[h * hd..(h + 1) * hd],
        );
    }
    let o = layer.attn.o.apply(store, &attended, 1);
    for (a, b) in x.iter_mut().zip(&o) {
        *a += b;
    }
}

/// Projects a hidden state into its frames and returns the argmax symbols.
fn frame_symbols(model: &Model, h: &[f64]) -> Vec<u32> {
    let v = model.config.vocab_size;
    let logits = model.encoder.projection.apply(&model.store, h, 1);
    logits
        .chunks_exact(v)
        .map(|f| kernels::argmax(f) as u32)
        .collect()
}

/// Translates `source` token by token with the model's first-layer delay.
pub fn stream_translate<C: Clock + ?Sized>(
    model: &Model,
    source: &[u32],
    clock: &mut C,
) -> Result<(Vec<u32>, StreamTrace)> {
    clock.start();
    let mut enc = IncrementalEncoder::new(model);
    let mut collapse = CollapseState::default();
    let mut trace = StreamTrace {
        source_length: source.len(),
        ..StreamTrace::default()
    };
    let mut emit = |states: Vec<Vec<f64>>, reads: usize, clock: &mut C, trace: &mut StreamTrace| {
        for h in states {
            for s in frame_symbols(model, &h) {
                if let Some(token) = collapse.step(s) {
                    let ms = clock.elapsed_ms(reads);
                    trace.emissions.push(Emission {
                        token,
                        g: reads,
                        ms,
                    });
                }
            }
        }
    };
    for &tok in source {
        let states = enc.push(tok)?;
        emit(states, enc.consumed(), clock, &mut trace);
    }
    let states = enc.finish()?;
    emit(states, enc.consumed(), clock, &mut trace);
    trace.target_length = trace.emissions.len();
    trace.finished = true;
    Ok((trace.tokens(), trace))
}

/// `g(t) = min(t + k - 1, |x|)` for `t = 1..=target_length`.
pub fn wait_k_schedule(k: usize, source_length: usize, target_length: usize) -> Vec<usize> {
    (1..=target_length)
        .map(|t| (t + k - 1).min(source_length))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn tiny(delay: usize) -> Model {
        let mut cfg = ModelConfig::desk_scale(12);
        cfg.embed_dim = 16;
        cfg.ffn_dim = 24;
        cfg.heads = 2;
        cfg.delay_k = delay;
        Model::new(cfg, None, 3).unwrap()
    }

    #[test]
    fn wait_three() {
        let g = wait_k_schedule(3, 10, 12);
        assert_eq!(g, vec![3, 4, 5, 6, 7, 8, 9, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn wait_longer_than_source() {
        assert_eq!(wait_k_schedule(7, 4, 3), vec![4, 4, 4]);
    }

    #[test]
    fn empty_source() {
        let m = tiny(1);
        let (out, trace) = stream_translate(&m, &[], &mut FakeClock::default()).unwrap();
        assert!(out.is_empty());
        assert!(trace.finished);
        assert_eq!(trace.source_length, 0);
    }

    #[test]
    fn single_token_reads_once() {
        let m = tiny(1);
        let (_, trace) = stream_translate(&m, &[5], &mut FakeClock::default()).unwrap();
        assert!(trace.emissions.iter().all(|e| e.g == 1));
    }

    #[test]
    fn states_match_graph_encoder() {
        for delay in [1, 2, 4] {
            let m = tiny(delay);
            let src = [2u32, 7, 3, 3, 11, 4];
            let offline = m.encode(&src).unwrap();
            let mut enc = IncrementalEncoder::new(&m);
            let mut rows = Vec::new();
            for (i, &t) in src.iter().enumerate() {
                let got = enc.push(t).unwrap();
                for _ in &got {
                    assert!(rows.len() + delay <= i + 1);
                }
                rows.extend(got);
            }
            rows.extend(enc.finish().unwrap());
            assert_eq!(rows.len(), src.len());
            for (t, r) in rows.iter().enumerate() {
                assert_eq!(r.as_slice(), offline.values.row(t), "delay {delay} row {t}");
            }
        }
    }

    #[test]
    fn stream_equals_offline() {
        let m = tiny(2);
        let src = [9u32, 2, 2, 5, 10, 6, 3];
        let (out, trace) = stream_translate(&m, &src, &mut FakeClock::default()).unwrap();
        assert_eq!(out, m.offline_decode(&src).unwrap());
        let g = trace.g();
        assert!(g.windows(2).all(|w| w[0] <= w[1]));
        assert!(g.iter().all(|&x| x <= src.len()));
    }

    #[test]
    fn rejects_oov() {
        let m = tiny(1);
        assert!(stream_translate(&m, &[12], &mut FakeClock::default()).is_err());
    }
}
