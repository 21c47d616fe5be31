//! Latency, quality and anticipation metrics.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::rng;
use crate::streaming::StreamTrace;
use crate::{Error, Result};

/// Source/target link, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AlignmentLink {
    pub source: usize,
    pub target: usize,
}

impl AlignmentLink {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }
}

/// Cutoff: first 1-based step whose read count covers the whole source.
fn cutoff(g: &[usize], source_length: usize) -> Result<usize> {
    g.iter()
        .position(|&v| v >= source_length)
        .map(|i| i + 1)
        .ok_or(Error::IncompleteTrace)
}

fn lagging(delays: &[f64], g: &[usize], source_length: usize, target_length: usize) -> Result<f64> {
    let tau = cutoff(g, source_length)?;
    lagging_to(delays, tau, source_length, target_length)
}

fn lagging_to(
    delays: &[f64],
    tau: usize,
    source_length: usize,
    target_length: usize,
) -> Result<f64> {
    if target_length == 0 || source_length == 0 {
        return Err(Error::Empty("sentence"));
    }
    let rate = target_length as f64 / source_length as f64;
    let sum: f64 = (0..tau).map(|t| delays[t] - t as f64 / rate).sum();
    Ok(sum / tau as f64)
}

/// Average lagging of the read schedule `g` (one entry per target token).
pub fn average_lagging(g: &[usize], source_length: usize, target_length: usize) -> Result<f64> {
    let delays: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    lagging(&delays, g, source_length, target_length)
}

/// Computation-aware average lagging in milliseconds, with one time unit
/// per ideal step.
pub fn al_ca(trace: &StreamTrace) -> Result<f64> {
    if !trace.finished {
        return Err(Error::IncompleteTrace);
    }
    lagging(
        &trace.ms(),
        &trace.g(),
        trace.source_length,
        trace.target_length,
    )
}

/// AL and AL-CA of a finished stream.
///
/// A stream always reads its whole source before it ends, but every token
/// may have been written before the last read. Such a trace has no cutoff in
/// its schedule, and all of its tokens are averaged instead.
pub fn stream_lagging(trace: &StreamTrace) -> Result<(f64, f64)> {
    if !trace.finished {
        return Err(Error::IncompleteTrace);
    }
    let g = trace.g();
    let tau = cutoff(&g, trace.source_length).unwrap_or(g.len());
    let reads: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    Ok((
        lagging_to(&reads, tau, trace.source_length, trace.target_length)?,
        lagging_to(&trace.ms(), tau, trace.source_length, trace.target_length)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// 0..=100.
    pub score: f64,
    /// Per-order precisions in percent.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Ord + Clone>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with exponential smoothing and closest-reference length.
pub fn bleu<T: Ord + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<BleuScore> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Empty("reference set"));
        }
        hyp_len += hyp.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("non-empty");
        ref_len += closest;
        for n in 1..=max_n {
            let h = ngram_counts(hyp, n);
            let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &h {
                correct[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        math::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    let mut precisions = vec![0.0; max_n];
    if correct.iter().all(|&c| c == 0) {
        return Ok(BleuScore {
            score: 0.0,
            precisions,
            brevity_penalty: bp,
            hyp_len,
            ref_len,
        });
    }
    let mut smooth = 1.0;
    for n in 0..max_n {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
    }
    let log_sum: f64 = precisions
        .iter()
        .map(|&p| {
            if p > 0.0 {
                math::ln(p)
            } else {
                -9_999_999_999.0
            }
        })
        .sum();
    let score = bp * math::exp(log_sum / max_n as f64);
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
    })
}

/// Matched, hypothesis and reference n-gram totals for orders `1..=max_n`.
fn chrf_stats<T: Ord + Clone>(hyp: &[T], reference: &[T], max_n: usize) -> Vec<[usize; 3]> {
    (1..=max_n)
        .map(|n| {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            let matched = h
                .iter()
                .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
                .sum();
            [matched, h.values().sum(), r.values().sum()]
        })
        .collect()
}

fn chrf_from_stats(stats: &[[usize; 3]], beta: f64) -> f64 {
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0usize);
    for &[m, h, rf] in stats {
        if h == 0 || rf == 0 {
            continue;
        }
        p += m as f64 / h as f64;
        r += m as f64 / rf as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    p /= orders as f64;
    r /= orders as f64;
    let b2 = beta * beta;
    if p + r == 0.0 {
        return 0.0;
    }
    (1.0 + b2) * p * r / (b2 * p + r)
}

/// chrF over symbol sequences (whitespace already removed), in `[0, 1]`.
/// Precision and recall are averaged over the orders present on both sides.
pub fn chrf<T: Ord + Clone>(
    hypothesis: &[T],
    reference: &[T],
    beta: f64,
    max_n: usize,
) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    Ok(chrf_from_stats(
        &chrf_stats(hypothesis, reference, max_n),
        beta,
    ))
}

/// Corpus chrF from statistics summed over sentences.
pub fn corpus_chrf<T: Ord + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    beta: f64,
    max_n: usize,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    let mut sum = vec![[0usize; 3]; max_n];
    for (h, r) in hypotheses.iter().zip(references) {
        if r.is_empty() {
            return Err(Error::Empty("reference"));
        }
        for (acc, s) in sum.iter_mut().zip(chrf_stats(h, r, max_n)) {
            for i in 0..3 {
                acc[i] += s[i];
            }
        }
    }
    Ok(chrf_from_stats(&sum, beta))
}

/// Fraction of links whose source word lies at least `k` positions ahead
/// of the target position: `i - k + 1 > j`.
pub fn k_anticipation_rate(links: &[Vec<AlignmentLink>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let total: usize = links.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::NoLinks);
    }
    let hits = links
        .iter()
        .flatten()
        .filter(|l| l.source + 1 > l.target + k)
        .count();
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    /// Half-width of the 95% percentile interval around the mean.
    pub half_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapResult {
    /// Fraction of resamples in which system B scored at least system A.
    pub p_value: f64,
    pub a: MeanCi,
    pub b: MeanCi,
}

fn mean_ci(mut xs: Vec<f64>) -> MeanCi {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.sort_by(f64::total_cmp);
    let lo = xs[(n as f64 * 0.025) as usize];
    let hi = xs[((n as f64 * 0.975) as usize).min(n - 1)];
    MeanCi {
        mean,
        half_width: (mean - lo).max(hi - mean),
    }
}

/// Paired bootstrap resampling over sentence indices.
pub fn paired_bootstrap<H, R, F>(
    metric: F,
    system_a: &[H],
    system_b: &[H],
    references: &[R],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult>
where
    H: Clone,
    R: Clone,
    F: Fn(&[H], &[R]) -> f64,
{
    if system_a.len() != system_b.len() {
        return Err(Error::LengthMismatch {
            left: system_a.len(),
            right: system_b.len(),
        });
    }
    if system_a.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: system_a.len(),
            right: references.len(),
        });
    }
    if system_a.is_empty() || resamples == 0 {
        return Err(Error::Empty("bootstrap sample"));
    }
    let n = system_a.len();
    let mut r = rng::stream(seed, rng::streams::BOOTSTRAP);
    let (mut sa, mut sb) = (Vec::with_capacity(resamples), Vec::with_capacity(resamples));
    let mut wins_b = 0usize;
    for _ in 0..resamples {
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let refs: Vec<R> = idx.iter().map(|&i| references[i].clone()).collect();
        let a: Vec<H> = idx.iter().map(|&i| system_a[i].clone()).collect();
        let b: Vec<H> = idx.iter().map(|&i| system_b[i].clone()).collect();
        let (ma, mb) = (metric(&a, &refs), metric(&b, &refs));
        if mb >= ma {
            wins_b += 1;
        }
        sa.push(ma);
        sb.push(mb);
    }
    Ok(BootstrapResult {
        p_value: wins_b as f64 / resamples as f64,
        a: mean_ci(sa),
        b: mean_ci(sb),
    })
}

/// Scores of one sentence in an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
    pub chrf: f64,
    /// `None` when the output was empty.
    pub al: Option<f64>,
    pub al_ca_ms: Option<f64>,
    pub trace: StreamTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub bleu: f64,
    /// Corpus chrF2 scaled to 0..=100.
    pub chrf: f64,
    /// Mean over sentences with a defined value.
    pub al: f64,
    pub al_ca_ms: f64,
    pub oracle_bleu: Option<f64>,
    pub sentences: Vec<SentenceRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streaming::{wait_k_schedule, Emission};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn al_wait_k() {
        for k in 1..=10 {
            let g = wait_k_schedule(k, 10, 10);
            assert!(
                close(average_lagging(&g, 10, 10).unwrap(), k as f64),
                "k={k}"
            );
        }
        assert!(close(average_lagging(&[1], 1, 1).unwrap(), 1.0));
    }

    #[test]
    fn al_incomplete() {
        assert!(matches!(
            average_lagging(&[1, 2], 5, 2),
            Err(Error::IncompleteTrace)
        ));
    }

    #[test]
    fn stream_written_before_last_read() {
        // two tokens out after reads 1 and 2 of a 4-token source
        let t = trace(&[1, 2], &[1.0, 2.0], 4);
        let (al, al_ca_ms) = stream_lagging(&t).unwrap();
        // (1 - 0) and (2 - 2) over both tokens
        assert_eq!(al, 0.5);
        assert_eq!(al_ca_ms, 0.5);
        let full = trace(&[2, 4], &[2.0, 4.0], 4);
        assert_eq!(
            stream_lagging(&full).unwrap().0,
            average_lagging(&[2, 4], 4, 2).unwrap()
        );
    }

    fn trace(g: &[usize], ms: &[f64], src: usize) -> StreamTrace {
        StreamTrace {
            emissions: g
                .iter()
                .zip(ms)
                .map(|(&g, &ms)| Emission { token: 2, g, ms })
                .collect(),
            source_length: src,
            target_length: g.len(),
            finished: true,
        }
    }

    #[test]
    fn al_ca_single_token() {
        assert!(close(al_ca(&trace(&[4], &[5.0], 4)).unwrap(), 5.0));
    }

    #[test]
    fn al_ca_shift() {
        let g = wait_k_schedule(2, 6, 6);
        let ms: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = ms.iter().map(|m| m + 7.5).collect();
        let base = al_ca(&trace(&g, &ms, 6)).unwrap();
        assert!(close(base, average_lagging(&g, 6, 6).unwrap()));
        assert!(close(al_ca(&trace(&g, &shifted, 6)).unwrap(), base + 7.5));
    }

    #[test]
    fn al_ca_unfinished() {
        let mut t = trace(&[1], &[1.0], 1);
        t.finished = false;
        assert!(al_ca(&t).is_err());
    }

    #[test]
    fn bleu_identity() {
        let h = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        let r: Vec<Vec<Vec<i32>>> = h.iter().map(|s| vec![s.clone()]).collect();
        let b = bleu(&h, &r, 4).unwrap();
        assert!(close(b.score, 100.0));
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_brevity() {
        let b = bleu(
            &[vec!['a', 'b', 'c', 'd']],
            &[vec![vec!['a', 'b', 'c', 'd', 'e']]],
            4,
        )
        .unwrap();
        assert!(close(b.brevity_penalty, math::exp(1.0 - 5.0 / 4.0)));
        assert!(close(b.score, 100.0 * math::exp(-0.25)));
    }

    #[test]
    fn bleu_no_match() {
        let b = bleu(&[vec![1, 2]], &[vec![vec![3, 4]]], 4).unwrap();
        assert_eq!(b.score, 0.0);
        assert!(bleu::<u32>(&[], &[], 4).is_err());
    }

    #[test]
    fn bleu_exp_smoothing() {
        // 1-grams 4/4, 2-grams 1/3, 3-grams 0/2, 4-grams 0/1.
        let b = bleu(&[vec![1, 2, 9, 3]], &[vec![vec![1, 2, 3, 9]]], 4).unwrap();
        let p = [100.0, 100.0 / 3.0, 100.0 / 4.0, 100.0 / 4.0];
        for (a, e) in b.precisions.iter().zip(p) {
            assert!(close(*a, e), "{a} vs {e}");
        }
    }

    #[test]
    fn chrf_hand_counts() {
        let v = chrf(&['a', 'b'], &['a', 'b', 'c'], 2.0, 6).unwrap();
        assert!(close(v, 7.0 / 11.0));
        assert!(close(chrf(&[1, 2, 3], &[1, 2, 3], 2.0, 6).unwrap(), 1.0));
        assert_eq!(chrf(&[1, 2], &[3, 4], 2.0, 6).unwrap(), 0.0);
        assert_eq!(chrf::<u8>(&[], &[3], 2.0, 6).unwrap(), 0.0);
        assert!(chrf::<u8>(&[1], &[], 2.0, 6).is_err());
    }

    #[test]
    fn k_ar_example() {
        let links = vec![vec![AlignmentLink::new(3, 1)]];
        assert_eq!(k_anticipation_rate(&links, 2).unwrap(), 1.0);
        assert_eq!(k_anticipation_rate(&links, 3).unwrap(), 0.0);
        assert!(k_anticipation_rate(&[vec![]], 1).is_err());
    }

    #[test]
    fn bootstrap_identical_systems() {
        let h = vec![vec![1u32, 2], vec![3, 4], vec![5]];
        let r = vec![vec![vec![1u32, 2]], vec![vec![3, 5]], vec![vec![5]]];
        let f = |hs: &[Vec<u32>], rs: &[Vec<Vec<u32>>]| bleu(hs, rs, 4).unwrap().score;
        let res = paired_bootstrap(f, &h, &h, &r, 50, 1).unwrap();
        assert_eq!(res.p_value, 1.0);
        assert_eq!(res.a, res.b);
        let again = paired_bootstrap(f, &h, &h, &r, 50, 1).unwrap();
        assert_eq!(res, again);
    }
}
