//! Optimization: inverse-square-root schedule, Adam, gradient accumulation,
//! validation-BLEU early stopping and evaluation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::checkpoint::{load_params, AdamState, Checkpoint};
use crate::ctc;
use crate::encoder::ModelConfig;
use crate::graph::Graph;
use crate::math;
use crate::metrics::{self, EvalReport, SentenceRecord};
use crate::model::{ForwardRngs, Model};
use crate::params::ParamStore;
use crate::rng::{self, RngState, StreamRng};
use crate::sorting::{Ablation, AsnConfig};
use crate::streaming::{stream_translate, Clock};
use crate::synth::{make_batches, Batch, SentencePair};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CtcPretrain,
    AsnFinetune,
    FromScratch,
}

impl Phase {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ctc_pretrain" => Ok(Self::CtcPretrain),
            "asn_finetune" => Ok(Self::AsnFinetune),
            "from_scratch" => Ok(Self::FromScratch),
            other => Err(Error::config(alloc::format!("unknown phase `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CtcPretrain => "ctc_pretrain",
            Self::AsnFinetune => "asn_finetune",
            Self::FromScratch => "from_scratch",
        }
    }

    pub fn uses_asn(self) -> bool {
        self != Self::CtcPretrain
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub patience_steps: u64,
    pub accumulate_batches: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub phase: Phase,
    pub ablation: Ablation,
    /// Padded source tokens per micro-batch.
    pub max_tokens: usize,
    /// Validation interval in optimizer steps.
    pub eval_every: u64,
    /// Validation pairs used for early stopping (0 = all).
    pub valid_limit: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 5e-4,
            warmup_steps: 4000,
            max_steps: 300_000,
            patience_steps: 25_000,
            accumulate_batches: 1,
            label_smoothing: 0.1,
            seed: 1,
            phase: Phase::CtcPretrain,
            ablation: Ablation::Default,
            max_tokens: 4096,
            eval_every: 1000,
            valid_limit: 0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Small-run overrides for the synthetic experiments.
    pub fn desk_scale() -> Self {
        Self {
            max_steps: 20_000,
            patience_steps: 2_000,
            eval_every: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) {
            return Err(Error::config("train.max_lr must be positive"));
        }
        if self.max_steps == 0 || self.eval_every == 0 || self.accumulate_batches == 0 {
            return Err(Error::config(
                "train.max_steps, train.eval_every and train.accumulate_batches must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(
                "train.beta1 and train.beta2 must lie in [0, 1)",
            ));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("train.max_tokens must be positive"));
        }
        Ok(())
    }
}

/// `max_lr * min(step / warmup, sqrt(warmup / step))` for `step >= 1`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    if cfg.warmup_steps == 0 {
        return cfg.max_lr / math::sqrt(step);
    }
    let w = cfg.warmup_steps as f64;
    cfg.max_lr * (step / w).min(math::sqrt(w / step))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    /// One update; `grads[i] = None` leaves parameter `i` and its moments
    /// untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.state.step += 1;
        let t = self.state.step as f64;
        let c1 = 1.0 - math::powf(self.beta1, t);
        let c2 = 1.0 - math::powf(self.beta2, t);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    /// Loss per target token.
    pub loss: f64,
    pub lr: f64,
    pub val_bleu: Option<f64>,
}

/// Summed loss and gradients of a set of micro-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss_sum: f64,
    pub target_tokens: usize,
    /// One entry per parameter; `None` for frozen or unused parameters.
    pub grads: Vec<Option<Vec<f64>>>,
    pub skipped: usize,
}

impl Gradients {
    fn empty(n: usize) -> Self {
        Self {
            loss_sum: 0.0,
            target_tokens: 0,
            grads: vec![None; n],
            skipped: 0,
        }
    }
}

/// Keeps pairs whose targets fit in the model's frames.
pub fn feasible_pairs(pairs: &[SentencePair], cfg: &ModelConfig) -> Vec<SentencePair> {
    pairs
        .iter()
        .filter(|p| {
            !p.source.is_empty()
                && ctc::min_frames(&p.target) <= cfg.upsample_ratio * p.source.len()
        })
        .cloned()
        .collect()
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    epoch: u64,
    cursor: usize,
    batches: Vec<Batch>,
    train: Vec<SentencePair>,
    valid: Vec<SentencePair>,
    dropout_rng: StreamRng,
    sorting_rng: StreamRng,
    pub best_val_bleu: f64,
    pub best_step: u64,
    best_params: Option<ParamStore>,
    pub log: Vec<LogEntry>,
    pub skipped_pairs: usize,
}

pub struct TrainOutcome {
    /// Parameters with the best validation BLEU.
    pub best: Checkpoint,
    /// Full resumable state at the last step.
    pub last: Checkpoint,
    pub log: Vec<LogEntry>,
    pub skipped_pairs: usize,
}

impl Trainer {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        train: &[SentencePair],
        valid: &[SentencePair],
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.phase.uses_asn() && !model.has_asn() {
            return Err(Error::MissingSortingNetwork);
        }
        let feasible = feasible_pairs(train, &model.config);
        if feasible.is_empty() {
            return Err(Error::NoTrainablePairs);
        }
        let skipped_pairs = train.len() - feasible.len();
        if skipped_pairs > 0 {
            log::warn!("dropping {skipped_pairs} training pairs that cannot be aligned");
        }
        let mut valid = valid.to_vec();
        if cfg.valid_limit > 0 {
            valid.truncate(cfg.valid_limit);
        }
        let adam = Adam::new(&model.store, &cfg);
        let batches = make_batches(&feasible, cfg.max_tokens, epoch_seed(cfg.seed, 0))?;
        Ok(Self {
            adam,
            step: 0,
            epoch: 0,
            cursor: 0,
            batches,
            train: feasible,
            valid,
            dropout_rng: rng::stream(cfg.seed, rng::streams::DROPOUT),
            sorting_rng: rng::stream(cfg.seed, rng::streams::SORTING),
            best_val_bleu: f64::NEG_INFINITY,
            best_step: 0,
            best_params: None,
            log: Vec::new(),
            skipped_pairs,
            model,
            cfg,
        })
    }

    /// Restores the full state saved by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: TrainConfig,
        train: &[SentencePair],
        valid: &[SentencePair],
    ) -> Result<Self> {
        let model = ckpt.build_model()?;
        let mut t = Self::new(model, cfg, train, valid)?;
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.cursor = ckpt.cursor as usize;
        t.batches = make_batches(&t.train, t.cfg.max_tokens, epoch_seed(t.cfg.seed, t.epoch))?;
        if let Some(a) = &ckpt.adam {
            t.adam.state = a.clone();
        }
        if let Some(s) = ckpt.rng("dropout") {
            t.dropout_rng = s.restore();
        }
        if let Some(s) = ckpt.rng("sorting") {
            t.sorting_rng = s.restore();
        }
        t.best_val_bleu = ckpt.best_val_bleu;
        t.best_step = ckpt.best_step;
        Ok(t)
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, config_text);
        c.step = self.step;
        c.epoch = self.epoch;
        c.cursor = self.cursor as u64;
        c.adam = Some(self.adam.state.clone());
        c.rngs = vec![
            (
                String::from("dropout"),
                RngState::capture(&self.dropout_rng),
            ),
            (
                String::from("sorting"),
                RngState::capture(&self.sorting_rng),
            ),
        ];
        c.best_val_bleu = self.best_val_bleu;
        c.best_step = self.best_step;
        c
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.cursor >= self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.batches = make_batches(
                &self.train,
                self.cfg.max_tokens,
                epoch_seed(self.cfg.seed, self.epoch),
            )?;
        }
        let b = self.batches[self.cursor].clone();
        self.cursor += 1;
        Ok(b)
    }

    /// Loss and gradients summed over `batches`, without updating weights.
    pub fn gradients(&mut self, batches: &[Vec<(&[u32], &[u32])>]) -> Result<Gradients> {
        let n = self.model.store.len();
        let mut acc = Gradients::empty(n);
        let use_asn = self.cfg.phase.uses_asn();
        for pairs in batches {
            let mut g = Graph::new();
            let vars = self.model.store.register(&mut g, true);
            let out = self.model.training_loss(
                &mut g,
                &vars,
                pairs,
                use_asn,
                self.cfg.label_smoothing,
                ForwardRngs {
                    dropout: Some(&mut self.dropout_rng),
                    sorting: &mut self.sorting_rng,
                },
            )?;
            acc.skipped += out.skipped.len();
            if out.target_tokens == 0 {
                continue;
            }
            acc.loss_sum += g.value(out.loss).item();
            acc.target_tokens += out.target_tokens;
            g.backward(out.loss)?;
            for (slot, &v) in acc.grads.iter_mut().zip(&vars) {
                if let Some(grad) = g.grad(v) {
                    match slot {
                        Some(s) => s.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
                        None => *slot = Some(grad.to_vec()),
                    }
                }
            }
        }
        Ok(acc)
    }

    /// One optimizer step over `accumulate_batches` micro-batches. Returns
    /// the per-token loss, or `None` when every pair was skipped.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        let batches: Vec<Batch> = (0..self.cfg.accumulate_batches)
            .map(|_| self.next_batch())
            .collect::<Result<_>>()?;
        let pairs: Vec<Vec<(&[u32], &[u32])>> = batches.iter().map(Batch::pairs).collect();
        let mut grads = self.gradients(&pairs)?;
        self.step += 1;
        if grads.target_tokens == 0 {
            return Ok(None);
        }
        let scale = 1.0 / grads.target_tokens as f64;
        for g in grads.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
        let lr = lr_schedule(self.step, &self.cfg);
        self.adam.update(&mut self.model.store, &grads.grads, lr);
        Ok(Some(grads.loss_sum * scale))
    }

    /// Corpus BLEU of offline decoding on the validation pairs.
    pub fn validate(&self) -> Result<f64> {
        validation_bleu(&self.model, &self.valid)
    }

    /// Trains until `max_steps` or until validation BLEU has not improved
    /// for `patience_steps`. `on_log` sees every log entry as it is made.
    pub fn run(
        &mut self,
        config_text: &str,
        mut on_log: impl FnMut(&LogEntry),
    ) -> Result<TrainOutcome> {
        let mut window_loss = 0.0;
        let mut window_steps = 0u64;
        while self.step < self.cfg.max_steps {
            if let Some(l) = self.train_step()? {
                window_loss += l;
                window_steps += 1;
            }
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.max_steps {
                let val = if self.valid.is_empty() {
                    0.0
                } else {
                    self.validate()?
                };
                let entry = LogEntry {
                    step: self.step,
                    loss: if window_steps > 0 {
                        window_loss / window_steps as f64
                    } else {
                        f64::NAN
                    },
                    lr: lr_schedule(self.step, &self.cfg),
                    val_bleu: Some(val),
                };
                window_loss = 0.0;
                window_steps = 0;
                on_log(&entry);
                self.log.push(entry);
                if val > self.best_val_bleu {
                    self.best_val_bleu = val;
                    self.best_step = self.step;
                    self.best_params = Some(self.model.store.clone());
                } else if self.step - self.best_step >= self.cfg.patience_steps {
                    log::info!(
                        "early stop at step {} (best {} at {})",
                        self.step,
                        self.best_val_bleu,
                        self.best_step
                    );
                    break;
                }
            }
        }
        let last = self.checkpoint(config_text);
        let mut best = last.clone();
        if let Some(p) = &self.best_params {
            let mut m = self.model.clone();
            m.store = p.clone();
            best = Checkpoint::from_model(&m, config_text);
            best.step = self.best_step;
            best.best_val_bleu = self.best_val_bleu;
            best.best_step = self.best_step;
        }
        Ok(TrainOutcome {
            best,
            last,
            log: self.log.clone(),
            skipped_pairs: self.skipped_pairs,
        })
    }
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn validation_bleu(model: &Model, pairs: &[SentencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut hyps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let src: Vec<&[u32]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        hyps.extend(model.offline_decode_batch(&src)?);
    }
    let refs: Vec<Vec<Vec<u32>>> = pairs.iter().map(|p| vec![p.target.clone()]).collect();
    Ok(metrics::bleu(&hyps, &refs, 4)?.score)
}

/// CTC pretraining of the encoder and projection.
pub fn train_ctc_baseline(
    train: &[SentencePair],
    valid: &[SentencePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    config_text: &str,
    on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.phase = Phase::CtcPretrain;
    let model = Model::new(model_cfg.clone(), None, cfg.seed)?;
    Trainer::new(model, cfg, train, valid)?.run(config_text, on_log)
}

/// Training with the sorting network, optionally starting the encoder and
/// projection from `init`.
#[allow(clippy::too_many_arguments)]
pub fn train_asn(
    train: &[SentencePair],
    valid: &[SentencePair],
    model_cfg: &ModelConfig,
    asn_cfg: &AsnConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    config_text: &str,
    on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if cfg.phase == Phase::CtcPretrain {
        cfg.phase = if init.is_some() {
            Phase::AsnFinetune
        } else {
            Phase::FromScratch
        };
    }
    let asn = cfg.ablation.apply(asn_cfg);
    let mut model = Model::new(model_cfg.clone(), Some(asn), cfg.seed)?;
    if let Some(c) = init {
        let mut source = Model::new(c.model.clone(), None, 0)
            .map_err(|e| Error::InitMismatch(alloc::format!("{e}")))?
            .store;
        let encoder_only: Vec<_> = c
            .params
            .iter()
            .filter(|p| !p.name.starts_with("asn."))
            .cloned()
            .collect();
        load_params(&mut source, &encoder_only)
            .map_err(|e| Error::InitMismatch(alloc::format!("{e}")))?;
        model.init_from(&source)?;
    }
    Trainer::new(model, cfg, train, valid)?.run(config_text, on_log)
}

/// Streams every pair at each first-layer delay in `ks`.
pub fn evaluate<C: Clock + ?Sized>(
    model: &Model,
    corpus: &[SentencePair],
    ks: &[usize],
    oracle: bool,
    clock: &mut C,
) -> Result<Vec<EvalReport>> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    ks.iter()
        .map(|&k| {
            let m = model.with_delay(k)?;
            let mut sentences = Vec::with_capacity(corpus.len());
            for p in corpus {
                let (hyp, trace) = stream_translate(&m, &p.source, clock)?;
                let (al, al_ca_ms) = if hyp.is_empty() {
                    (None, None)
                } else {
                    let (al, al_ca) = metrics::stream_lagging(&trace)?;
                    (Some(al), Some(al_ca))
                };
                sentences.push(SentenceRecord {
                    chrf: metrics::chrf(&hyp, &p.target, 2.0, 6)? * 100.0,
                    hypothesis: hyp,
                    reference: p.target.clone(),
                    al,
                    al_ca_ms,
                    trace,
                });
            }
            let hyps: Vec<Vec<u32>> = sentences.iter().map(|s| s.hypothesis.clone()).collect();
            let refs: Vec<Vec<Vec<u32>>> = corpus.iter().map(|p| vec![p.target.clone()]).collect();
            let flat_refs: Vec<Vec<u32>> = corpus.iter().map(|p| p.target.clone()).collect();
            let mean = |f: fn(&SentenceRecord) -> Option<f64>| {
                let xs: Vec<f64> = sentences.iter().filter_map(f).collect();
                if xs.is_empty() {
                    f64::NAN
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            let oracle_bleu = if oracle {
                let o: Vec<Vec<u32>> = corpus
                    .iter()
                    .map(|p| m.decode_with_oracle(&p.source, &p.target))
                    .collect::<Result<_>>()?;
                Some(metrics::bleu(&o, &refs, 4)?.score)
            } else {
                None
            };
            Ok(EvalReport {
                k,
                bleu: metrics::bleu(&hyps, &refs, 4)?.score,
                chrf: metrics::corpus_chrf(&hyps, &flat_refs, 2.0, 6)? * 100.0,
                al: mean(|s| s.al),
                al_ca_ms: mean(|s| s.al_ca_ms),
                oracle_bleu,
                sentences,
            })
        })
        .collect()
}
