//! Anticipation curves, reordering heatmaps and Viterbi labels.

use std::fmt::Write;

use anyhow::Result;
use sortsimul_core::ctc::viterbi_align;
use sortsimul_core::metrics::{k_anticipation_rate, AlignmentLink};
use sortsimul_core::model::Model;
use sortsimul_core::sorting::row_argmax;
use sortsimul_core::synth::SentencePair;
use sortsimul_core::tensor::Tensor;
use sortsimul_core::BLANK_ID;

pub const MAX_K: usize = 9;

/// `k,k_ar` for `k = 1..=9` over the corpus' oracle links.
pub fn kar_csv(pairs: &[SentencePair]) -> Result<String> {
    let links: Vec<Vec<AlignmentLink>> = pairs.iter().map(|p| p.links.clone()).collect();
    let mut s = String::from("k,k_ar\n");
    for k in 1..=MAX_K {
        writeln!(s, "{k},{:.6}", k_anticipation_rate(&links, k)?)?;
    }
    Ok(s)
}

pub struct Heatmap {
    pub z: Tensor,
    /// Frame labels of the reordered states (blank as `BLANK_ID`), `None`
    /// when the reference cannot be aligned.
    pub frames: Option<Vec<u32>>,
    pub upsample: usize,
    pub source: Vec<u32>,
}

impl Heatmap {
    pub fn compute(model: &Model, pair: &SentencePair) -> Result<Self> {
        let (z, logits) = model.oracle_reordering(&pair.source, &pair.target)?;
        let frames = viterbi_align(&logits, &pair.target).ok();
        Ok(Self {
            z,
            frames,
            upsample: model.config.upsample_ratio,
            source: pair.source.clone(),
        })
    }

    fn row_label(&self, i: usize) -> String {
        match &self.frames {
            None => format!("row{}", i + 1),
            Some(f) => f[i * self.upsample..(i + 1) * self.upsample]
                .iter()
                .map(|&s| {
                    if s == BLANK_ID {
                        "_".to_string()
                    } else {
                        s.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join("|"),
        }
    }

    /// Rows are reordered slots labelled by their frames; columns are
    /// source positions labelled `position:token`.
    pub fn csv(&self) -> String {
        let n = self.source.len();
        let mut s = String::from("row,label");
        for (j, t) in self.source.iter().enumerate() {
            let _ = write!(s, ",{}:{t}", j + 1);
        }
        s.push('\n');
        for i in 0..n {
            let _ = write!(s, "{},{}", i + 1, self.row_label(i));
            for v in self.z.row(i) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn viterbi_csv(&self) -> Option<String> {
        let f = self.frames.as_ref()?;
        let mut s = String::from("frame,row,label\n");
        for (t, &l) in f.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", t + 1, t / self.upsample + 1, l);
        }
        Some(s)
    }

    /// Fraction of rows whose largest entry sits on the oracle source
    /// position (`oracle` is 1-based, one entry per row).
    pub fn permutation_accuracy(&self, oracle: &[usize]) -> f64 {
        let hard = row_argmax(&self.z);
        let hits = hard
            .iter()
            .zip(oracle)
            .filter(|(&h, &o)| h + 1 == o)
            .count();
        hits as f64 / oracle.len().max(1) as f64
    }
}
