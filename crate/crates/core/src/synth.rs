//! Synthetic parallel corpora with known reorderings, the corpus text
//! format, and token-budget batching.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::metrics::AlignmentLink;
use crate::rng;
use crate::{Error, Result, FIRST_TOKEN_ID, PAD_ID};

/// Pairs with a longer side are dropped when loading.
pub const MAX_SENTENCE_TOKENS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReorderRule {
    Monotonic,
    /// Reverses a window of `window` consecutive tokens.
    LocalSwap {
        window: usize,
    },
    /// Moves a block of `block` tokens `distance` positions toward the front.
    BlockMove {
        distance: usize,
        block: usize,
    },
}

impl ReorderRule {
    pub fn name(&self) -> &'static str {
        match self {
            ReorderRule::Monotonic => "monotonic",
            ReorderRule::LocalSwap { .. } => "local_swap",
            ReorderRule::BlockMove { .. } => "block_move",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Distinct source words; target words are disjoint copies.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: ReorderRule,
    /// Probability that a sentence is reordered at all.
    pub rule_prob: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(rule: ReorderRule, seed: u64) -> Self {
        Self {
            vocab_size: 32,
            min_len: 8,
            max_len: 16,
            rule,
            rule_prob: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("gen.vocab_size must be positive"));
        }
        if self.min_len < 2 || self.max_len < self.min_len || self.max_len > MAX_SENTENCE_TOKENS {
            return Err(Error::config(format!(
                "gen length range [{}, {}] must satisfy 2 <= min <= max <= {MAX_SENTENCE_TOKENS}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.rule_prob) {
            return Err(Error::config("gen.rule_prob must lie in [0, 1]"));
        }
        match self.rule {
            ReorderRule::Monotonic => {}
            ReorderRule::LocalSwap { window } => {
                if window < 2 || window > self.min_len {
                    return Err(Error::config("gen.window must lie in [2, gen.min_len]"));
                }
            }
            ReorderRule::BlockMove { distance, block } => {
                if distance == 0 || block == 0 || distance + block > self.min_len {
                    return Err(Error::config(
                        "gen.distance and gen.block must be positive with distance + block <= gen.min_len",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Size of the model's output space: blank, pad, source and target words.
    pub fn model_vocab(&self) -> usize {
        FIRST_TOKEN_ID as usize + 2 * self.vocab_size
    }

    pub fn target_id(&self, source_id: u32) -> u32 {
        source_id + self.vocab_size as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub links: Vec<AlignmentLink>,
    /// `permutation[j]` is the 1-based source position placed at target
    /// position `j + 1`.
    pub permutation: Option<Vec<usize>>,
}

/// 0-based source order for one sentence.
fn sample_order<R: Rng + ?Sized>(rule: ReorderRule, len: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    match rule {
        ReorderRule::Monotonic => {}
        ReorderRule::LocalSwap { window } => {
            let start = rng.random_range(0..=len - window);
            order[start..start + window].reverse();
        }
        ReorderRule::BlockMove { distance, block } => {
            let s = rng.random_range(distance..=len - block);
            let mut moved = Vec::with_capacity(len);
            moved.extend_from_slice(&order[..s - distance]);
            moved.extend_from_slice(&order[s..s + block]);
            moved.extend_from_slice(&order[s - distance..s]);
            moved.extend_from_slice(&order[s + block..]);
            order = moved;
        }
    }
    order
}

pub fn generate_corpus(cfg: &GenConfig, size: usize) -> Result<Vec<SentencePair>> {
    cfg.validate()?;
    if size == 0 {
        return Err(Error::Empty("corpus size"));
    }
    let mut r = rng::stream(cfg.seed, rng::streams::GENERATOR);
    let first = FIRST_TOKEN_ID;
    let last = first + cfg.vocab_size as u32;
    Ok((0..size)
        .map(|_| {
            let len = r.random_range(cfg.min_len..=cfg.max_len);
            let source: Vec<u32> = (0..len).map(|_| r.random_range(first..last)).collect();
            let apply = r.random_bool(cfg.rule_prob);
            let rule = if apply {
                cfg.rule
            } else {
                ReorderRule::Monotonic
            };
            let order = sample_order(rule, len, &mut r);
            let target = order.iter().map(|&i| cfg.target_id(source[i])).collect();
            let links = order
                .iter()
                .enumerate()
                .map(|(j, &i)| AlignmentLink::new(i + 1, j + 1))
                .collect();
            SentencePair {
                source,
                target,
                links,
                permutation: Some(order.iter().map(|i| i + 1).collect()),
            }
        })
        .collect())
}

fn join<T: core::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (n, x) in xs.into_iter().enumerate() {
        if n > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x}");
    }
    s
}

/// One line per pair: source, target, links `i-j`, permutation; tab-separated.
pub fn format_corpus(pairs: &[SentencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&join(&p.source));
        out.push('\t');
        out.push_str(&join(&p.target));
        if !p.links.is_empty() || p.permutation.is_some() {
            out.push('\t');
            out.push_str(&join(
                p.links.iter().map(|l| format!("{}-{}", l.source, l.target)),
            ));
        }
        if let Some(perm) = &p.permutation {
            out.push('\t');
            out.push_str(&join(perm));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub pairs: Vec<SentencePair>,
    /// 1-based line numbers of pairs dropped by the length filter.
    pub rejected: Vec<usize>,
}

fn parse_ids(field: &str, line: usize) -> Result<Vec<u32>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Corpus {
                line,
                msg: format!("bad token id {t:?}"),
            })
        })
        .collect()
}

fn parse_links(field: &str, line: usize) -> Result<Vec<AlignmentLink>> {
    field
        .split_whitespace()
        .map(|t| {
            let bad = || Error::Corpus {
                line,
                msg: format!("bad link {t:?}"),
            };
            let (i, j) = t.split_once('-').ok_or_else(bad)?;
            Ok(AlignmentLink::new(
                i.parse().map_err(|_| bad())?,
                j.parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// Parses the corpus text format. Blank lines are ignored.
pub fn parse_corpus(text: &str) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(2..=4).contains(&fields.len()) {
            return Err(Error::Corpus {
                line,
                msg: format!(
                    "expected 2 to 4 tab-separated fields, found {}",
                    fields.len()
                ),
            });
        }
        let source = parse_ids(fields[0], line)?;
        let target = parse_ids(fields[1], line)?;
        let links = match fields.get(2) {
            Some(f) => parse_links(f, line)?,
            None => Vec::new(),
        };
        let permutation = match fields.get(3) {
            Some(f) => Some(
                f.split_whitespace()
                    .map(|t| {
                        t.parse::<usize>().map_err(|_| Error::Corpus {
                            line,
                            msg: format!("bad permutation entry {t:?}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        if source.is_empty()
            || target.is_empty()
            || source.len() > MAX_SENTENCE_TOKENS
            || target.len() > MAX_SENTENCE_TOKENS
        {
            out.rejected.push(line);
            continue;
        }
        for l in &links {
            if l.source == 0 || l.source > source.len() || l.target == 0 || l.target > target.len()
            {
                return Err(Error::Corpus {
                    line,
                    msg: format!("link {}-{} out of range", l.source, l.target),
                });
            }
        }
        if let Some(p) = &permutation {
            let mut seen = alloc::vec![false; source.len()];
            let ok = p.len() == source.len()
                && p.iter().all(|&i| {
                    i >= 1 && i <= source.len() && !core::mem::replace(&mut seen[i - 1], true)
                });
            if !ok {
                return Err(Error::Corpus {
                    line,
                    msg: "permutation is not a bijection on the source positions".into(),
                });
            }
        }
        out.pairs.push(SentencePair {
            source,
            target,
            links,
            permutation,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the member pairs.
    pub indices: Vec<usize>,
    /// Sources padded with [`PAD_ID`] to the longest member.
    pub sources: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn padded_tokens(&self) -> usize {
        self.sources.len() * self.sources.first().map_or(0, Vec::len)
    }

    /// Unpadded `(source, target)` slices.
    pub fn pairs(&self) -> Vec<(&[u32], &[u32])> {
        (0..self.indices.len())
            .map(|i| {
                (
                    &self.sources[i][..self.source_lengths[i]],
                    &self.targets[i][..self.target_lengths[i]],
                )
            })
            .collect()
    }
}

fn pad(seqs: &[&[u32]]) -> Vec<Vec<u32>> {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut v = s.to_vec();
            v.resize(width, PAD_ID);
            v
        })
        .collect()
}

/// Length-bucketed batches whose padded source size stays within
/// `max_tokens`. Every pair appears in exactly one batch; order depends
/// only on `seed`.
pub fn make_batches(pairs: &[SentencePair], max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some(p) = pairs.iter().find(|p| p.source.len() > max_tokens) {
        return Err(Error::config(format!(
            "sentence of {} tokens exceeds the batch budget of {max_tokens}",
            p.source.len()
        )));
    }
    let mut r = rng::stream(seed, rng::streams::DATA);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut r);
    order.sort_by_key(|&i| pairs[i].source.len());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let len = pairs[i].source.len();
        let w = width.max(len);
        if !current.is_empty() && w * (current.len() + 1) > max_tokens {
            groups.push(core::mem::take(&mut current));
            width = 0;
        }
        width = width.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut r);
    Ok(groups
        .into_iter()
        .map(|indices| {
            let src: Vec<&[u32]> = indices
                .iter()
                .map(|&i| pairs[i].source.as_slice())
                .collect();
            let tgt: Vec<&[u32]> = indices
                .iter()
                .map(|&i| pairs[i].target.as_slice())
                .collect();
            Batch {
                sources: pad(&src),
                targets: pad(&tgt),
                source_lengths: src.iter().map(|s| s.len()).collect(),
                target_lengths: tgt.iter().map(|s| s.len()).collect(),
                indices,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::k_anticipation_rate;
    use alloc::vec;

    fn block_cfg() -> GenConfig {
        GenConfig::new(
            ReorderRule::BlockMove {
                distance: 5,
                block: 2,
            },
            11,
        )
    }

    #[test]
    fn monotonic_has_no_anticipation() {
        let c = generate_corpus(&GenConfig::new(ReorderRule::Monotonic, 1), 50).unwrap();
        let links: Vec<_> = c.iter().map(|p| p.links.clone()).collect();
        for k in 1..10 {
            assert_eq!(k_anticipation_rate(&links, k).unwrap(), 0.0);
        }
        for p in &c {
            assert_eq!(
                p.permutation.as_ref().unwrap(),
                &(1..=p.source.len()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn block_move_anticipation_profile() {
        let c = generate_corpus(&block_cfg(), 200).unwrap();
        let links: Vec<_> = c.iter().map(|p| p.links.clone()).collect();
        for k in 1..=5 {
            assert!(k_anticipation_rate(&links, k).unwrap() > 0.0);
        }
        for k in 6..=9 {
            assert_eq!(k_anticipation_rate(&links, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn target_is_relabelled_permutation() {
        let cfg = GenConfig::new(ReorderRule::LocalSwap { window: 3 }, 4);
        for p in generate_corpus(&cfg, 100).unwrap() {
            let perm = p.permutation.unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert_eq!(p.target[j], cfg.target_id(p.source[i - 1]));
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_corpus(&block_cfg(), 30).unwrap(),
            generate_corpus(&block_cfg(), 30).unwrap()
        );
    }

    #[test]
    fn validation() {
        let mut c = block_cfg();
        c.min_len = 6;
        assert!(c.validate().is_err());
        c.min_len = 1;
        c.rule = ReorderRule::Monotonic;
        assert!(c.validate().is_err());
        let mut c = block_cfg();
        c.rule_prob = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn round_trip() {
        let c = generate_corpus(&block_cfg(), 100).unwrap();
        let back = parse_corpus(&format_corpus(&c)).unwrap();
        assert!(back.rejected.is_empty());
        assert_eq!(back.pairs, c);
    }

    #[test]
    fn filters_and_errors() {
        let long: Vec<String> = (0..1025).map(|_| String::from("3")).collect();
        let text = format!("2 3\t\n{}\t4\n2\t5\n", long.join(" "));
        let got = parse_corpus(&text).unwrap();
        assert_eq!(got.rejected, vec![1, 2]);
        assert_eq!(got.pairs.len(), 1);
        match parse_corpus("2 x\t3\n") {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_corpus("2 3\t4 5\t\t1 1\n").is_err());
    }

    #[test]
    fn batches_partition() {
        let c = generate_corpus(&block_cfg(), 97).unwrap();
        let b = make_batches(&c, 64, 3).unwrap();
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..97).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.padded_tokens() <= 64));
        assert_eq!(make_batches(&c, 64, 3).unwrap(), b);
        assert!(make_batches(&c, 10, 3).is_err());
        assert_eq!(make_batches(&c[..1], 64, 0).unwrap().len(), 1);
    }
}
