//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1-6 and 12 are deterministic checks and must pass. 7-11 train
//! desk-scale models on a 20k-pair corpus (about 80 minutes on one core); their
//! outcomes are printed with the measured numbers, and only 7-11 failures
//! are tolerated by the exit code since they are empirical effects.
//! `ACCEPTANCE_SKIP_TRAINING=1` skips the training criteria.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use sortsimul::analyze::Heatmap;
use sortsimul::io::sha256_file;
use sortsimul_core::ctc::{collapse, log_likelihood, min_frames, CollapseState};
use sortsimul_core::encoder::ModelConfig;
use sortsimul_core::metrics::{
    al_ca, average_lagging, k_anticipation_rate, AlignmentLink, EvalReport,
};
use sortsimul_core::model::{ForwardRngs, Model};
use sortsimul_core::rng::{self, streams};
use sortsimul_core::sorting::{gumbel_sinkhorn, Ablation, AsnConfig};
use sortsimul_core::streaming::{
    stream_translate, wait_k_schedule, Emission, FakeClock, StreamTrace,
};
use sortsimul_core::synth::{generate_corpus, GenConfig, ReorderRule, SentencePair};
use sortsimul_core::train::{evaluate, train_asn, train_ctc_baseline, TrainConfig};
use sortsimul_core::{Graph, Tensor};

const CTC_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const SINKHORN_TOL: [(usize, f64); 2] = [(16, 5e-2), (64, 1e-3)];
const AL_CA_TOL: f64 = 1e-9;
const MAIN_GAP: f64 = 5.0;
const PERM_ACC: f64 = 0.80;
const ABLATION_GAP: f64 = 1.0;

// training budget for 7-11
const BASELINE_STEPS: u64 = 2000;
const ASN_STEPS: u64 = 4000;
const CORPUS: usize = 20_000;
const HELD_OUT: usize = 500;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, pass: bool, started: Instant, detail: String) -> Outcome {
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id,
        pass,
        detail: format!("{detail}; {secs:.1}s"),
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn brute_force(logits: &Tensor, target: &[u32]) -> f64 {
    let (frames, vocab) = (logits.shape()[0], logits.shape()[1]);
    let lp: Vec<f64> = (0..frames)
        .flat_map(|t| {
            let row = logits.row(t);
            let z = row
                .iter()
                .fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v));
            row.iter().map(move |&v| v - z).collect::<Vec<_>>()
        })
        .collect();
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0u32; frames];
    for code in 0..vocab.pow(frames as u32) {
        let mut c = code;
        for s in path.iter_mut() {
            *s = (c % vocab) as u32;
            c /= vocab;
        }
        if collapse(&path) == target {
            let l: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &s)| lp[t * vocab + s as usize])
                .sum();
            total = log_add(total, l);
        }
    }
    total
}

fn ctc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng::stream(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let vocab = r.random_range(2..=4usize);
        let frames = r.random_range(1..=5usize);
        let data = (0..frames * vocab)
            .map(|_| r.random_range(-3.0..3.0))
            .collect();
        let logits = Tensor::new(vec![frames, vocab], data).unwrap();
        let target = loop {
            let len = r.random_range(0..=3usize);
            let y: Vec<u32> = (0..len).map(|_| r.random_range(1..vocab as u32)).collect();
            if min_frames(&y) <= frames {
                break y;
            }
        };
        let fast = log_likelihood(&logits, &target).unwrap();
        worst = worst.max((fast - brute_force(&logits, &target)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        worst <= CTC_TOL && secs < 10.0,
        t0,
        format!("max |diff| {worst:.2e} over 200"),
    )
}

fn tiny_model(asn: bool, seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 10,
        embed_dim: 8,
        ffn_dim: 12,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        delay_k: 1,
        upsample_ratio: 2,
    };
    let asn = asn.then(|| AsnConfig {
        decoder_layers: 1,
        ..AsnConfig::default()
    });
    Model::new(cfg, asn, seed).unwrap()
}

fn loss(
    model: &Model,
    pair: (&[u32], &[u32]),
    use_asn: bool,
    g: &mut Graph,
    grads: bool,
) -> (f64, Vec<sortsimul_core::Var>, sortsimul_core::Var) {
    let vars = model.store.register(g, grads);
    // fixed noise and mask draws make the loss a pure function of the weights
    let mut sorting = rng::stream(99, streams::SORTING);
    let out = model
        .training_loss(
            g,
            &vars,
            &[pair],
            use_asn,
            0.0,
            ForwardRngs {
                dropout: None,
                sorting: &mut sorting,
            },
        )
        .unwrap();
    (g.value(out.loss).item(), vars, out.loss)
}

fn grad_check(model: &Model, pair: (&[u32], &[u32]), use_asn: bool) -> f64 {
    let step = 1e-5;
    let mut g = Graph::new();
    let (_, vars, l) = loss(model, pair, use_asn, &mut g, true);
    g.backward(l).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(vars[k])
            .map(|d| d.to_vec())
            .unwrap_or_else(|| vec![0.0; model.store.get(id).numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.store.get(id).data()[j];
            probe.store.get_mut(id).data_mut()[j] = orig + step;
            let up = loss(&probe, pair, use_asn, &mut Graph::new(), false).0;
            probe.store.get_mut(id).data_mut()[j] = orig - step;
            let down = loss(&probe, pair, use_asn, &mut Graph::new(), false).0;
            probe.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let src: &[u32] = &[2, 3, 4, 5];
    let plain = grad_check(&tiny_model(false, 3), (src, &[7, 6, 9, 8]), false);
    let sorted = grad_check(&tiny_model(true, 5), (src, &[8, 9, 6, 7]), true);
    let secs = t0.elapsed().as_secs_f64();
    report(
        2,
        plain <= GRAD_TOL && sorted <= GRAD_TOL && secs < 60.0,
        t0,
        format!("max rel err ctc {plain:.2e}, asn {sorted:.2e}"),
    )
}

fn sinkhorn() -> Outcome {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (iters, tol) in SINKHORN_TOL {
        let cfg = AsnConfig {
            sinkhorn_iters: iters,
            temperature: 0.25,
            noise_factor: 0.3,
            ..AsnConfig::default()
        };
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut r = rng::stream(seed, 0);
            let scores =
                Tensor::new(vec![8, 8], (0..64).map(|_| r.random::<f64>()).collect()).unwrap();
            let z = gumbel_sinkhorn(&scores, &cfg, seed).unwrap().matrix;
            for i in 0..8 {
                let row: f64 = (0..8).map(|j| z.at(i, j)).sum();
                let col: f64 = (0..8).map(|j| z.at(j, i)).sum();
                worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
            }
        }
        pass &= worst <= tol;
        parts.push(format!("l={iters} worst {worst:.1e}"));
    }
    pass &= t0.elapsed().as_secs_f64() < 5.0;
    report(3, pass, t0, parts.join(", "))
}

fn streaming() -> Outcome {
    let t0 = Instant::now();
    let vocab = 18;
    let models: Vec<Model> = [1, 3, 5]
        .iter()
        .map(|&k| {
            let mut cfg = ModelConfig::desk_scale(vocab);
            cfg.embed_dim = 32;
            cfg.ffn_dim = 48;
            cfg.delay_k = k;
            Model::new(cfg, None, 4).unwrap()
        })
        .collect();
    let mut r = rng::stream(31, 0);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for i in 0..500 {
        let m = &models[i % models.len()];
        let n = r.random_range(1..=20);
        let src: Vec<u32> = (0..n).map(|_| r.random_range(2..vocab as u32)).collect();
        let (out, _) = stream_translate(m, &src, &mut FakeClock::default()).unwrap();
        mismatches += usize::from(out != m.offline_decode(&src).unwrap());
        nonempty += usize::from(!out.is_empty());
    }
    let mut collapse_mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(0..40);
        let frames: Vec<u32> = (0..n).map(|_| r.random_range(0..5)).collect();
        let mut st = CollapseState::default();
        let online: Vec<u32> = frames.iter().filter_map(|&s| st.step(s)).collect();
        collapse_mismatches += usize::from(online != collapse(&frames));
    }
    report(
        4,
        mismatches == 0 && collapse_mismatches == 0 && nonempty > 100,
        t0,
        format!("{mismatches}/500 stream mismatches ({nonempty} non-empty), {collapse_mismatches}/1000 collapse mismatches"),
    )
}

fn latency() -> Outcome {
    let t0 = Instant::now();
    let mut pass = true;
    let mut als = Vec::new();
    for k in [1usize, 3, 5, 7, 9] {
        for n in [10usize, 20, 40] {
            let g = wait_k_schedule(k, n, n);
            let al = average_lagging(&g, n, n).unwrap();
            pass &= al == k as f64;
            // one millisecond per read, no compute time
            let trace = StreamTrace {
                emissions: g
                    .iter()
                    .map(|&gi| Emission {
                        token: 2,
                        g: gi,
                        ms: FakeClock::default().ms_per_read * gi as f64,
                    })
                    .collect(),
                source_length: n,
                target_length: n,
                finished: true,
            };
            pass &= (al_ca(&trace).unwrap() - al).abs() <= AL_CA_TOL;
            if n == 20 {
                als.push(format!("{al}"));
            }
        }
    }
    report(5, pass, t0, format!("AL at k=1,3,5,7,9: {}", als.join(",")))
}

fn block_move_corpus(size: usize) -> (GenConfig, Vec<SentencePair>) {
    let cfg = GenConfig::new(
        ReorderRule::BlockMove {
            distance: 5,
            block: 2,
        },
        1,
    );
    let pairs = generate_corpus(&cfg, size).unwrap();
    (cfg, pairs)
}

fn anticipation() -> Outcome {
    let t0 = Instant::now();
    let (_, pairs) = block_move_corpus(2000);
    let links: Vec<Vec<AlignmentLink>> = pairs.iter().map(|p| p.links.clone()).collect();
    let rates: Vec<f64> = (1..=9)
        .map(|k| k_anticipation_rate(&links, k).unwrap())
        .collect();
    let positive = rates[..5].iter().all(|&r| r > 0.0);
    let zero = rates[6..].iter().all(|&r| r == 0.0);
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.3}")).collect();
    report(
        6,
        positive && zero && monotone,
        t0,
        format!("k-AR k=1..9: {}", shown.join(",")),
    )
}

struct MainRuns {
    baseline: EvalReport,
    init: EvalReport,
    init_model: Model,
    minutes: f64,
}

struct Setup {
    train: Vec<SentencePair>,
    valid: Vec<SentencePair>,
    test: Vec<SentencePair>,
    model: ModelConfig,
    train_cfg: TrainConfig,
}

fn setup() -> Setup {
    let (gen, pairs) = block_move_corpus(CORPUS + 2 * HELD_OUT);
    let mut tc = TrainConfig::desk_scale();
    tc.max_lr = 1e-3;
    tc.warmup_steps = 500;
    tc.max_tokens = 512;
    tc.eval_every = 500;
    tc.valid_limit = 300;
    Setup {
        train: pairs[..CORPUS].to_vec(),
        valid: pairs[CORPUS..CORPUS + HELD_OUT].to_vec(),
        test: pairs[CORPUS + HELD_OUT..].to_vec(),
        model: ModelConfig::desk_scale(gen.model_vocab()),
        train_cfg: tc,
    }
}

fn held_out(s: &Setup, m: &Model, oracle: bool) -> EvalReport {
    evaluate(m, &s.test, &[1], oracle, &mut FakeClock::default())
        .unwrap()
        .remove(0)
}

fn asn_run(
    s: &Setup,
    ablation: Ablation,
    init: Option<&sortsimul_core::checkpoint::Checkpoint>,
) -> Model {
    let mut tc = s.train_cfg.clone();
    tc.max_steps = ASN_STEPS;
    tc.ablation = ablation;
    train_asn(
        &s.train,
        &s.valid,
        &s.model,
        &AsnConfig::default(),
        &tc,
        init,
        "",
        |_| {},
    )
    .unwrap()
    .best
    .build_model()
    .unwrap()
}

fn main_runs(s: &Setup) -> MainRuns {
    let t0 = Instant::now();
    let mut tc = s.train_cfg.clone();
    tc.max_steps = BASELINE_STEPS;
    let base = train_ctc_baseline(&s.train, &s.valid, &s.model, &tc, "", |_| {}).unwrap();
    let baseline = held_out(s, &base.best.build_model().unwrap(), false);
    let init_model = asn_run(s, Ablation::Default, Some(&base.best));
    let init = held_out(s, &init_model, true);
    println!(
        "    baseline: BLEU {:.2}; weight-init asn: BLEU {:.2}",
        baseline.bleu, init.bleu
    );
    MainRuns {
        baseline,
        init,
        init_model,
        minutes: t0.elapsed().as_secs_f64() / 60.0,
    }
}

fn main_criteria(s: &Setup, runs: &MainRuns, t0: Instant) -> Vec<Outcome> {
    let mut out = Vec::new();
    let (b, a) = (&runs.baseline, &runs.init);
    out.push(report(
        7,
        a.bleu - b.bleu >= MAIN_GAP && a.al <= b.al && runs.minutes <= 30.0,
        t0,
        format!(
            "asn-init {:.2} vs baseline {:.2} BLEU (gap {:.2}), AL {:.2} vs {:.2}, {:.1} min",
            a.bleu,
            b.bleu,
            a.bleu - b.bleu,
            a.al,
            b.al,
            runs.minutes
        ),
    ));

    let t8 = Instant::now();
    let (mut hits, mut total) = (0.0, 0usize);
    for p in s.test.iter().take(200) {
        let oracle = p
            .permutation
            .as_ref()
            .expect("block_move pairs carry a permutation");
        let hm = Heatmap::compute(&runs.init_model, p).unwrap();
        hits += hm.permutation_accuracy(oracle) * oracle.len() as f64;
        total += oracle.len();
    }
    let acc = hits / total as f64;
    out.push(report(
        8,
        acc >= PERM_ACC,
        t8,
        format!(
            "row-argmax accuracy {:.1}% over {total} positions",
            acc * 100.0
        ),
    ));

    let oracle = a.oracle_bleu.unwrap();
    out.push(report(
        10,
        oracle >= a.bleu,
        t0,
        format!("oracle {oracle:.2} vs streaming {:.2}", a.bleu),
    ));
    out
}

fn scratch_criteria(s: &Setup, init_bleu: f64) -> Vec<Outcome> {
    let t0 = Instant::now();
    let mut bleu = Vec::new();
    for ab in [
        Ablation::Default,
        Ablation::GumbelSoftmax,
        Ablation::NoTemperature,
        Ablation::NoNoise,
    ] {
        let r = held_out(s, &asn_run(s, ab, None), false);
        println!("    from scratch, {}: BLEU {:.2}", ab.name(), r.bleu);
        bleu.push(r.bleu);
    }
    let [d, gs, nt, nn] = bleu[..] else {
        unreachable!()
    };
    vec![
        report(
            9,
            d - gs >= ABLATION_GAP && gs - nt >= ABLATION_GAP && gs - nn >= ABLATION_GAP,
            t0,
            format!(
                "default {d:.2}, gumbel_softmax {gs:.2}, no_temperature {nt:.2}, no_noise {nn:.2}"
            ),
        ),
        report(
            11,
            init_bleu >= d,
            t0,
            format!("weight-init {init_bleu:.2} vs from-scratch {d:.2} at {ASN_STEPS} steps"),
        ),
    ]
}

const TINY: &str = "\
output_dir = data
gen.rule = block_move
gen.distance = 2
gen.block = 1
gen.vocab_size = 6
gen.min_len = 3
gen.max_len = 6
gen.seed = 17
gen.train_size = 60
gen.valid_size = 10
gen.test_size = 12
model.embed_dim = 16
model.ffn_dim = 24
model.heads = 2
model.layers = 1
asn.decoder_layers = 1
train.max_steps = 6
train.eval_every = 3
train.warmup_steps = 3
train.max_tokens = 64
";

fn pipeline(dir: &Path) -> Vec<String> {
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_sortsimul"))
            .current_dir(dir)
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    fs::write(dir.join("run.conf"), TINY).unwrap();
    run(&["gen", "run.conf"]);
    run(&["train", "run.conf", "--phase", "ctc_pretrain"]);
    run(&[
        "train",
        "run.conf",
        "--phase",
        "asn_finetune",
        "--init",
        "data/ctc_pretrain.ckpt",
    ]);
    run(&[
        "eval",
        "data/asn_finetune.ckpt",
        "data/test.txt",
        "--oracle",
        "--k",
        "1,3",
    ]);
    run(&[
        "analyze",
        "data/asn_finetune.ckpt",
        "--corpus",
        "data/test.txt",
        "--samples",
        "2",
    ]);
    let mut files: Vec<_> = fs::read_dir(dir.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            format!(
                "{} {}",
                p.file_name().unwrap().to_string_lossy(),
                sha256_file(p).unwrap()
            )
        })
        .collect()
}

fn reproducibility() -> Outcome {
    let t0 = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing = first.iter().zip(&second).filter(|(x, y)| x != y).count()
        + first.len().abs_diff(second.len());
    report(
        12,
        differing == 0 && !first.is_empty(),
        t0,
        format!("{} output files, {differing} differ", first.len()),
    )
}

fn main() {
    let mut skipped = false;
    let mut outcomes = vec![
        ctc_oracle(),
        gradients(),
        sinkhorn(),
        streaming(),
        latency(),
        anticipation(),
    ];
    if std::env::var_os("ACCEPTANCE_SKIP_TRAINING").is_some() {
        skipped = true;
    } else {
        let t0 = Instant::now();
        let s = setup();
        let runs = main_runs(&s);
        outcomes.extend(main_criteria(&s, &runs, t0));
        outcomes.extend(scratch_criteria(&s, runs.init.bleu));
    }
    outcomes.push(reproducibility());

    outcomes.sort_by_key(|o| o.id);
    for o in &outcomes {
        if skipped && o.id == 12 {
            for id in 7..=11 {
                println!("criterion {id:>2}: SKIP (ACCEPTANCE_SKIP_TRAINING set)");
            }
        }
        println!(
            "criterion {:>2}: {} ({})",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    let hard: Vec<&&Outcome> = failed
        .iter()
        .filter(|o| !(7..=11).contains(&o.id))
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        outcomes.len() - failed.len(),
        failed.len()
    );
    if !hard.is_empty() {
        for o in hard {
            eprintln!("criterion {} failed: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
