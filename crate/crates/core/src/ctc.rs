//! Connectionist temporal classification: log-space forward-backward loss
//! with a uniform-prior smoothing term, Viterbi alignment and collapse.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::Span;
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::math::{self, log_add};
use crate::tensor::Tensor;
use crate::{Error, Result, BLANK_ID};

/// Fewest frames that can emit `target`: one per label plus a blank between
/// equal neighbours.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[u32], vocab: usize, frames: usize) -> Result<()> {
    for &y in target {
        if y == BLANK_ID || y as usize >= vocab {
            return Err(Error::OutOfVocabulary { id: y, vocab });
        }
    }
    let required = min_frames(target);
    if frames < required {
        return Err(Error::Infeasible { frames, required });
    }
    Ok(())
}

/// Blank-interleaved label sequence `_ y1 _ y2 ... _`.
fn extend(target: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK_ID);
    for &y in target {
        ext.push(y);
        ext.push(BLANK_ID);
    }
    ext
}

fn log_softmax_rows(logits: &Tensor) -> Vec<f64> {
    let v = logits.last_dim();
    let mut out = vec![0.0; logits.numel()];
    for (src, dst) in logits.data().chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        kernels::log_softmax_row(src, dst);
    }
    out
}

/// Forward variables `alpha[t][s]` (emission at `t` included).
fn forward(lp: &[f64], frames: usize, vocab: usize, ext: &[u32]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = lp[ext[0] as usize];
    if s_len > 1 {
        alpha[1] = lp[ext[1] as usize];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + lp[t * vocab + ext[s] as usize];
        }
    }
    alpha
}

/// Backward variables `beta[t][s]` (emission at `t` included).
fn backward(lp: &[f64], frames: usize, vocab: usize, ext: &[u32]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp[(frames - 1) * vocab + ext[s_len - 1] as usize];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(frames - 1) * vocab + ext[s_len - 2] as usize];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK_ID && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + lp[t * vocab + ext[s] as usize];
        }
    }
    beta
}

fn total(alpha: &[f64], frames: usize, s_len: usize) -> f64 {
    let last = (frames - 1) * s_len;
    let mut p = alpha[last + s_len - 1];
    if s_len > 1 {
        p = log_add(p, alpha[last + s_len - 2]);
    }
    p
}

/// `log p(target | logits)` summed over every path that collapses to the
/// target. `logits` is `(frames, vocab)` and is normalized here.
pub fn log_likelihood(logits: &Tensor, target: &[u32]) -> Result<f64> {
    logits.expect_rank("ctc", 2)?;
    let (frames, vocab) = (logits.shape()[0], logits.shape()[1]);
    check_target(target, vocab, frames)?;
    if frames == 0 {
        return Ok(0.0);
    }
    let lp = log_softmax_rows(logits);
    let ext = extend(target);
    let alpha = forward(&lp, frames, vocab, &ext);
    Ok(total(&alpha, frames, ext.len()))
}

/// Loss of one sequence and its gradient with respect to the logits.
///
/// `loss = (1 - eps) * NLL + eps * mean_t KL(uniform || p_t)`.
pub fn loss_and_grad(
    logits: &[f64],
    vocab: usize,
    target: &[u32],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let frames = logits.len() / vocab;
    check_target(target, vocab, frames)?;
    if frames == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut lp = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks_exact(vocab).zip(lp.chunks_exact_mut(vocab)) {
        kernels::log_softmax_row(src, dst);
    }
    let ext = extend(target);
    let s_len = ext.len();
    let alpha = forward(&lp, frames, vocab, &ext);
    let beta = backward(&lp, frames, vocab, &ext);
    let log_p = total(&alpha, frames, s_len);
    let nll = -log_p;
    let mut grad = vec![0.0; logits.len()];
    let inv_v = 1.0 / vocab as f64;
    let log_v = math::ln(vocab as f64);
    let mut kl = 0.0;
    for t in 0..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        let mut mean_lp = 0.0;
        for v in 0..vocab {
            let p = math::exp(row[v]);
            g[v] = (1.0 - eps) * p + eps / frames as f64 * (p - inv_v);
            mean_lp += row[v];
        }
        kl += -log_v - mean_lp * inv_v;
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let label = ext[s] as usize;
            let occ = math::exp(a + b - row[label] - log_p);
            g[label] -= (1.0 - eps) * occ;
        }
    }
    let loss = (1.0 - eps) * nll + eps * kl / frames as f64;
    Ok((loss, grad))
}

/// CTC loss of a single `(frames, vocab)` logits node.
pub fn ctc_loss(g: &mut Graph, logits: Var, target: &[u32], eps: f64) -> Result<Var> {
    let t = g.value(logits);
    t.expect_rank("ctc_loss", 2)?;
    let vocab = t.shape()[1];
    let (loss, grad) = loss_and_grad(t.data(), vocab, target, eps)?;
    Ok(g.custom_scalar(logits, loss, grad)?)
}

/// Summed CTC loss over frame spans of a packed logits node. Infeasible
/// pairs contribute nothing and are reported by index.
pub fn ctc_loss_packed(
    g: &mut Graph,
    logits: Var,
    frames: &[Span],
    targets: &[&[u32]],
    eps: f64,
) -> Result<(Var, Vec<usize>)> {
    let t = g.value(logits);
    t.expect_rank("ctc_loss", 2)?;
    let vocab = t.shape()[1];
    let mut grad = vec![0.0; t.numel()];
    let mut loss = 0.0;
    let mut skipped = Vec::new();
    for (i, (span, target)) in frames.iter().zip(targets).enumerate() {
        let rows = &t.data()[span.start * vocab..(span.start + span.len) * vocab];
        match loss_and_grad(rows, vocab, target, eps) {
            Ok((l, gr)) => {
                loss += l;
                grad[span.start * vocab..(span.start + span.len) * vocab].copy_from_slice(&gr);
            }
            Err(Error::Infeasible { frames, required }) => {
                log::warn!("skipping pair {i}: {frames} frames < {required} required");
                skipped.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((g.custom_scalar(logits, loss, grad)?, skipped))
}

/// Merges repeats, then drops blanks.
pub fn collapse(frames: &[u32]) -> Vec<u32> {
    let mut state = CollapseState::default();
    frames.iter().filter_map(|&s| state.step(s)).collect()
}

/// Streaming form of [`collapse`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CollapseState {
    pub last_frame_symbol: Option<u32>,
}

impl CollapseState {
    /// Emits `symbol` iff it is not blank and differs from the previous frame.
    pub fn step(&mut self, symbol: u32) -> Option<u32> {
        let emit = symbol != BLANK_ID && self.last_frame_symbol != Some(symbol);
        self.last_frame_symbol = Some(symbol);
        emit.then_some(symbol)
    }

    pub fn reset(&mut self) {
        self.last_frame_symbol = None;
    }
}

/// Free-function form of [`CollapseState::step`].
pub fn online_collapse_step(state: CollapseState, symbol: u32) -> (CollapseState, Option<u32>) {
    let mut next = state;
    let out = next.step(symbol);
    (next, out)
}

/// Most probable frame labelling that collapses to `target`.
pub fn viterbi_align(logits: &Tensor, target: &[u32]) -> Result<Vec<u32>> {
    logits.expect_rank("viterbi_align", 2)?;
    let (frames, vocab) = (logits.shape()[0], logits.shape()[1]);
    check_target(target, vocab, frames)?;
    if frames == 0 {
        return Ok(Vec::new());
    }
    let lp = log_softmax_rows(logits);
    let ext = extend(target);
    let s_len = ext.len();
    let mut score = vec![f64::NEG_INFINITY; frames * s_len];
    let mut back = vec![0usize; frames * s_len];
    score[0] = lp[ext[0] as usize];
    if s_len > 1 {
        score[1] = lp[ext[1] as usize];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut best = score[(t - 1) * s_len + s];
            let mut from = s;
            if s >= 1 && score[(t - 1) * s_len + s - 1] > best {
                best = score[(t - 1) * s_len + s - 1];
                from = s - 1;
            }
            if s >= 2
                && ext[s] != BLANK_ID
                && ext[s] != ext[s - 2]
                && score[(t - 1) * s_len + s - 2] > best
            {
                best = score[(t - 1) * s_len + s - 2];
                from = s - 2;
            }
            score[t * s_len + s] = best + lp[t * vocab + ext[s] as usize];
            back[t * s_len + s] = from;
        }
    }
    let last = (frames - 1) * s_len;
    let mut s = s_len - 1;
    if s_len > 1 && score[last + s_len - 2] > score[last + s_len - 1] {
        s = s_len - 2;
    }
    let mut path = vec![0u32; frames];
    for t in (0..frames).rev() {
        path[t] = ext[s];
        if t > 0 {
            s = back[t * s_len + s];
        }
    }
    Ok(path)
}

/// Log-probability of a specific frame path.
pub fn path_log_prob(logits: &Tensor, path: &[u32]) -> f64 {
    let lp = log_softmax_rows(logits);
    let vocab = logits.last_dim();
    path.iter()
        .enumerate()
        .map(|(t, &s)| lp[t * vocab + s as usize])
        .sum()
}
