//! Command implementations behind the `sortsimul` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use sortsimul_core::checkpoint::Checkpoint;
use sortsimul_core::sorting::Ablation;
use sortsimul_core::streaming::{Clock, FakeClock};
use sortsimul_core::synth::generate_corpus;
use sortsimul_core::train::{self, LogEntry, Phase, Trainer};

use crate::analyze::{kar_csv, Heatmap};
use crate::clock::MonotonicClock;
use crate::config::RunConfig;
use crate::io::{self, Manifest};
use crate::report;

#[derive(Debug, Parser)]
#[command(
    name = "sortsimul",
    version,
    about = "Simultaneous translation with a sorting network"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/valid/test corpora and a manifest.
    Gen { config: PathBuf },
    /// Train a model on the generated corpora.
    Train {
        config: PathBuf,
        /// ctc_pretrain, asn_finetune or from_scratch (overrides train.phase).
        #[arg(long)]
        phase: Option<String>,
        /// Checkpoint whose encoder and projection initialize the model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// default, no_temperature, no_noise or gumbel_softmax.
        #[arg(long)]
        ablation: Option<String>,
        /// Resume from a full checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output name; defaults to the phase (plus ablation).
        #[arg(long)]
        name: Option<String>,
    },
    /// Stream a corpus through a checkpoint at each delay.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        k: Vec<usize>,
        /// Also decode with the sorting network fed the reference.
        #[arg(long)]
        oracle: bool,
        /// Time emissions with the wall clock instead of one ms per read.
        #[arg(long)]
        wall_clock: bool,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anticipation curve of a corpus, or reordering heatmaps of a checkpoint.
    Analyze {
        input: PathBuf,
        /// Sentences for heatmaps (required for checkpoints).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 2 and 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    require_file(path, "config")?;
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config } => gen(&config),
        Command::Train {
            config,
            phase,
            init,
            ablation,
            resume,
            name,
        } => train_cmd(&config, phase, init, ablation, resume, name),
        Command::Eval {
            checkpoint,
            corpus,
            k,
            oracle,
            wall_clock,
            out,
        } => eval(&checkpoint, &corpus, &k, oracle, wall_clock, out),
        Command::Analyze {
            input,
            corpus,
            samples,
            out,
        } => analyze(&input, corpus, samples, out),
    }
}

pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join("train.txt"),
        dir.join("valid.txt"),
        dir.join("test.txt"),
    ]
}

fn gen(config: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let total = cfg.splits.train + cfg.splits.valid + cfg.splits.test;
    let all = generate_corpus(&cfg.gen, total).map_err(usage)?;
    let (train, rest) = all.split_at(cfg.splits.train);
    let (valid, test) = rest.split_at(cfg.splits.valid);
    let paths = split_paths(&cfg.output_dir);
    let mut m = Manifest::new("gen");
    m.config_sha256 = Some(io::sha256_hex(cfg.text.as_bytes()));
    m.seeds.insert("gen.seed".into(), cfg.gen.seed);
    m.set("gen.rule", cfg.gen.rule.name());
    m.set("gen.rule_params", format!("{:?}", cfg.gen.rule));
    m.set("gen.rule_prob", cfg.gen.rule_prob);
    m.set("model_vocab", cfg.gen.model_vocab());
    for (path, pairs) in paths.iter().zip([train, valid, test]) {
        io::write_corpus(path, pairs)?;
        m.output(path)?;
    }
    io::write_json(&cfg.output_dir.join("gen.manifest.json"), &m)?;
    log::info!("wrote {} pairs to {}", total, cfg.output_dir.display());
    Ok(())
}

fn train_cmd(
    config: &Path,
    phase: Option<String>,
    init: Option<PathBuf>,
    ablation: Option<String>,
    resume: Option<PathBuf>,
    name: Option<String>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let mut tc = cfg.train.clone();
    if let Some(p) = phase {
        tc.phase = Phase::parse(&p).map_err(usage)?;
    }
    if let Some(a) = ablation {
        tc.ablation = Ablation::parse(&a).map_err(usage)?;
    }
    if tc.phase == Phase::AsnFinetune && init.is_none() && resume.is_none() {
        return Err(usage("--phase asn_finetune needs --init <checkpoint>"));
    }
    for p in init.iter().chain(resume.iter()) {
        require_file(p, "checkpoint")?;
    }
    let [train_path, valid_path, _] = split_paths(&cfg.output_dir);
    require_file(&train_path, "training corpus")?;
    require_file(&valid_path, "validation corpus")?;
    let train_pairs = io::read_corpus(&train_path)?;
    let valid_pairs = io::read_corpus(&valid_path)?;
    let name = name.unwrap_or_else(|| match tc.ablation {
        Ablation::Default => tc.phase.name().to_string(),
        a => format!("{}-{}", tc.phase.name(), a.name()),
    });
    let dir = &cfg.output_dir;
    let log_path = dir.join(format!("{name}.log.jsonl"));
    let mut log_lines = String::new();
    let on_log = |e: &LogEntry| {
        log::info!(
            "step {} loss {:.4} lr {:.2e} val_bleu {:?}",
            e.step,
            e.loss,
            e.lr,
            e.val_bleu
        );
        log_lines.push_str(&log_line(e));
    };
    let init_ckpt = init.as_deref().map(io::read_checkpoint).transpose()?;
    let outcome = if let Some(r) = &resume {
        let ckpt = io::read_checkpoint(r)?;
        Trainer::resume(&ckpt, tc.clone(), &train_pairs, &valid_pairs)
            .context("restoring trainer")?
            .run(&cfg.text, on_log)
    } else if tc.phase.uses_asn() {
        train::train_asn(
            &train_pairs,
            &valid_pairs,
            &cfg.model,
            &cfg.asn,
            &tc,
            init_ckpt.as_ref(),
            &cfg.text,
            on_log,
        )
    } else {
        train::train_ctc_baseline(
            &train_pairs,
            &valid_pairs,
            &cfg.model,
            &tc,
            &cfg.text,
            on_log,
        )
    }
    .map_err(|e| match e {
        sortsimul_core::Error::InitMismatch(_) => usage(e),
        other => CliError::Runtime(other.into()),
    })?;

    let mut m = Manifest::new("train");
    m.config_sha256 = Some(io::sha256_hex(cfg.text.as_bytes()));
    m.seeds.insert("train.seed".into(), tc.seed);
    m.set("phase", tc.phase.name());
    m.set("ablation", tc.ablation.name());
    m.set("best_step", outcome.best.best_step);
    m.set(
        "best_val_bleu",
        format!("{:.4}", outcome.best.best_val_bleu),
    );
    m.set("skipped_pairs", outcome.skipped_pairs);
    m.input(&train_path)?;
    m.input(&valid_path)?;
    for p in init.iter().chain(resume.iter()) {
        m.input(p)?;
    }
    let best = dir.join(format!("{name}.ckpt"));
    let last = dir.join(format!("{name}.last.ckpt"));
    let infer = dir.join(format!("{name}.infer.ckpt"));
    io::write_checkpoint(&best, &outcome.best)?;
    io::write_checkpoint(&last, &outcome.last)?;
    io::write_checkpoint(&infer, &outcome.best.inference_only())?;
    io::write(&log_path, log_lines.as_bytes())?;
    for p in [&best, &last, &infer, &log_path] {
        m.output(p)?;
    }
    io::write_json(&dir.join(format!("{name}.manifest.json")), &m)?;
    Ok(())
}

pub fn log_line(e: &LogEntry) -> String {
    let v = serde_json::json!({
        "step": e.step,
        "loss": e.loss,
        "lr": e.lr,
        "val_bleu": e.val_bleu,
    });
    format!("{v}\n")
}

fn eval(
    checkpoint: &Path,
    corpus: &Path,
    ks: &[usize],
    oracle: bool,
    wall_clock: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    require_file(checkpoint, "checkpoint")?;
    require_file(corpus, "corpus")?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--k needs positive delays"));
    }
    let ckpt = io::read_checkpoint(checkpoint)?;
    let model = ckpt.build_model().context("rebuilding model")?;
    if oracle && !model.has_asn() {
        return Err(usage(
            "--oracle needs a checkpoint with sorting network parameters",
        ));
    }
    let pairs = io::read_corpus(corpus)?;
    let mut clock: Box<dyn Clock> = if wall_clock {
        Box::new(MonotonicClock::new())
    } else {
        Box::new(FakeClock::default())
    };
    let reports =
        train::evaluate(&model, &pairs, ks, oracle, clock.as_mut()).context("evaluating")?;
    let dir = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let paths = [
        dir.join(format!("{stem}.eval.json")),
        dir.join(format!("{stem}.curve.csv")),
        dir.join(format!("{stem}.curve.svg")),
        dir.join(format!("{stem}.traces.jsonl")),
    ];
    io::write_json(&paths[0], &report::reports_json(&reports))?;
    io::write(&paths[1], report::curve_csv(&reports).as_bytes())?;
    io::write(&paths[2], report::curve_svg(&reports).as_bytes())?;
    io::write(&paths[3], report::traces_jsonl(&reports).as_bytes())?;
    let mut m = Manifest::new("eval");
    m.set("k", format!("{ks:?}"));
    m.set("oracle", oracle);
    m.set("clock", if wall_clock { "wall" } else { "fake" });
    m.input(checkpoint)?;
    m.input(corpus)?;
    for p in &paths {
        m.output(p)?;
    }
    io::write_json(&dir.join(format!("{stem}.eval.manifest.json")), &m)?;
    for r in &reports {
        println!(
            "k={} bleu={:.2} chrf={:.2} al={:.3} al_ca_ms={:.3}{}",
            r.k,
            r.bleu,
            r.chrf,
            r.al,
            r.al_ca_ms,
            r.oracle_bleu
                .map(|o| format!(" oracle_bleu={o:.2}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn analyze(
    input: &Path,
    corpus: Option<PathBuf>,
    samples: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    require_file(input, "input")?;
    let dir = out.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let mut m = Manifest::new("analyze");
    m.input(input)?;
    if bytes.starts_with(sortsimul_core::checkpoint::MAGIC) {
        let corpus = corpus.ok_or_else(|| usage("analyzing a checkpoint needs --corpus"))?;
        require_file(&corpus, "corpus")?;
        m.input(&corpus)?;
        let model = Checkpoint::decode(&bytes)
            .context("decoding checkpoint")?
            .build_model()
            .context("rebuilding model")?;
        if !model.has_asn() {
            return Err(usage("checkpoint has no sorting network parameters"));
        }
        let pairs = io::read_corpus(&corpus)?;
        let mut summary = String::from("sentence,length,permutation_accuracy\n");
        for (i, p) in pairs.iter().take(samples).enumerate() {
            let hm = Heatmap::compute(&model, p)?;
            let z_path = dir.join(format!("{stem}.z{}.csv", i + 1));
            io::write(&z_path, hm.csv().as_bytes())?;
            m.output(&z_path)?;
            if let Some(v) = hm.viterbi_csv() {
                let v_path = dir.join(format!("{stem}.viterbi{}.csv", i + 1));
                io::write(&v_path, v.as_bytes())?;
                m.output(&v_path)?;
            }
            let acc = p
                .permutation
                .as_ref()
                .map(|o| format!("{:.4}", hm.permutation_accuracy(o)))
                .unwrap_or_default();
            summary.push_str(&format!("{},{},{}\n", i + 1, p.source.len(), acc));
        }
        let s_path = dir.join(format!("{stem}.permutation.csv"));
        io::write(&s_path, summary.as_bytes())?;
        m.output(&s_path)?;
    } else {
        let pairs = io::read_corpus(input)?;
        let path = dir.join(format!("{stem}.kar.csv"));
        io::write(&path, kar_csv(&pairs)?.as_bytes())?;
        m.output(&path)?;
    }
    io::write_json(&dir.join(format!("{stem}.analyze.manifest.json")), &m)?;
    Ok(())
}
