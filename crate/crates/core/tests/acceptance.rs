//! Acceptance checks. Runs as a plain binary so every line is visible in
//! `cargo test` output: one `PASS`/`FAIL` line per criterion.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use vlcap::checkpoint;
use vlcap::config::{DataConfig, LossConfig, ModelConfig, RunConfig, TrainConfig};
use vlcap::data::{self, batch, synth_corpus, MaxLens, Profile, SynthSpec, VideoRecord, VocabSpec, Vocabulary};
use vlcap::decoder::{GateOverride, MemoryMode, MemoryState};
use vlcap::gradcheck;
use vlcap::losses::{vl_loss, CaptionEncoder};
use vlcap::metrics::{self, Paragraph};
use vlcap::nn::Linear;
use vlcap::tensor::{ParamStore, Tape, Tensor};
use vlcap::train::{self, adam_step, TrainState, Trainer};
use vlcap::VlCap;

struct Outcome {
    pass: bool,
    /// Failing a non-fatal check is reported but does not fail the run.
    fatal: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, fatal: true, detail }
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_model(records: &[VideoRecord], cfg: ModelConfig, seed: u64) -> VlCap {
    let vocab = Vocabulary::build(records, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VlCap::new(cfg, vocab, LossConfig::default().rho_init, &mut rng).unwrap()
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let (mut model, b, loss_cfg) = gradcheck::reference_setup(0).unwrap();
    let report = gradcheck::check_model(&mut model, &b, &loss_cfg, 1e-5).unwrap();
    let elapsed = t0.elapsed();
    let worst = report.worst().unwrap();
    let n_scalars: usize = report.params.iter().map(|p| p.numel).sum();
    Outcome::new(
        worst.rel_error < 1e-4 && within(elapsed, 120),
        format!(
            "{} tensors / {n_scalars} scalars, worst rel {:.2e} ({}), {:.1}s",
            report.params.len(),
            worst.rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

fn memory_gate_identities() -> Outcome {
    let (model, _, _) = gradcheck::reference_setup(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = model.cfg.d_model;
    let mut all = true;
    for layer in 0..model.cfg.n_layers {
        let mut tape = Tape::new();
        let m = tape.constant(random_tensor(&mut rng, &[model.cfg.memory_slots, d]));
        let hb = tape.constant(random_tensor(&mut rng, &[7, d]));
        let real = [true, true, true, true, true, false, false];
        let dec = &model.decoder;
        let keep = dec.memory_update(&mut tape, &model.store, layer, m, hb, &real, GateOverride::Retain).unwrap();
        let repl = dec.memory_update(&mut tape, &model.store, layer, m, hb, &real, GateOverride::Replace).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        all &= bits(tape.data(keep.memory)) == bits(tape.data(m));
        all &= bits(tape.data(repl.memory)) == bits(tape.data(repl.candidate));
    }
    Outcome::new(all, "Z=1 gives M_prev and Z=0 gives R, bit-exact in every layer".into())
}

fn causality() -> Outcome {
    let (model, _, _) = gradcheck::reference_setup(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = model.cfg.d_model;
    let v = model.cfg.vocab_size as u32;
    let t = 7;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..5 {
        let mut tape = Tape::new();
        let memory = MemoryState::from_tensors(
            &mut tape,
            &(0..model.cfg.n_layers)
                .map(|_| random_tensor(&mut rng, &[model.cfg.memory_slots, d]))
                .collect::<Vec<_>>(),
        );
        let l = 2 + trial % 3;
        let vl = tape.constant(random_tensor(&mut rng, &[l, d]));
        let tokens: Vec<u32> = std::iter::once(data::BOS)
            .chain((1..t).map(|_| rng.random_range(4..v)))
            .collect();
        let run = |tape: &mut Tape, toks: &[u32]| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let f = model
                .decoder
                .forward_event(tape, &model.store, &memory, vl, &vec![true; l], toks, &vec![true; t], false, &mut r)
                .unwrap();
            tape.data(f.logits).to_vec()
        };
        let base = run(&mut tape, &tokens);
        for j in 0..t - 1 {
            let mut changed = tokens.clone();
            changed[j + 1] = 4 + (changed[j + 1] - 4 + 1 + rng.random_range(0..v - 5)) % (v - 4);
            let other = run(&mut tape, &changed);
            let vs = v as usize;
            let diff = base[..(j + 1) * vs]
                .iter()
                .zip(&other[..(j + 1) * vs])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
            checked += 1;
        }
    }
    Outcome::new(worst == 0.0, format!("{checked} perturbations, max |Δlogit| at positions <= j = {worst:e}"))
}

fn contrastive_behaviour() -> Outcome {
    let t0 = Instant::now();
    let corpus = synth_corpus(3, 12, 3.65, VocabSpec::default());
    let mut seen = std::collections::HashSet::new();
    let events: Vec<_> = corpus
        .iter()
        .flat_map(|r| &r.events)
        .filter(|e| seen.insert(e.caption.clone()))
        .take(8)
        .cloned()
        .collect();
    let vocab = Vocabulary::build(&corpus, 1);
    let n = events.len();
    let d_img = events[0].frame_embeds[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cap = CaptionEncoder::new(&mut store, vocab.len(), 16, 16, &mut rng);
    let proj = Linear::new(&mut store, "event", d_img, 16, true, &mut rng);
    let rho = store.add("rho", Tensor::scalar(LossConfig::default().rho_init));
    let pooled: Vec<Vec<f64>> = events
        .iter()
        .map(|e| {
            let l = e.frame_embeds.len() as f64;
            (0..d_img).map(|k| e.frame_embeds.iter().map(|f| f[k]).sum::<f64>() / l).collect()
        })
        .collect();
    let feats = Tensor::from_rows(&pooled).unwrap();
    let captions: Vec<Vec<u32>> = events.iter().map(|e| vocab.encode(&e.caption)).collect();
    let cfg = TrainConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&store);
    let forward = |store: &ParamStore, tape: &mut Tape| {
        let x = tape.constant(feats.clone());
        let y = proj.forward(tape, store, x).unwrap();
        let f = tape.l2_normalize_rows(y).unwrap();
        let rows: Vec<_> = captions.iter().map(|c| cap.encode(tape, store, c).unwrap()).collect();
        let ft = tape.concat(&rows, 0).unwrap();
        let r = tape.param(store, rho);
        let loss = vl_loss(tape, f, ft, r, 100.0).unwrap();
        (loss, f, ft)
    };
    let mut last = f64::NAN;
    for _ in 0..300 {
        let mut tape = Tape::new();
        let (loss, _, _) = forward(&store, &mut tape);
        tape.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate_grads(&tape);
        adam_step(&mut store, &mut state, &cfg, cfg.lr).unwrap();
        last = tape.item(loss);
    }
    let mut tape = Tape::new();
    let (loss, f, ft) = forward(&store, &mut tape);
    last = last.min(tape.item(loss));
    let final_loss = tape.item(loss);
    let (fd, td) = (tape.data(f).to_vec(), tape.data(ft).to_vec());
    let correct = (0..n)
        .filter(|&i| {
            let sims: Vec<f64> = (0..n)
                .map(|j| (0..16).map(|k| fd[i * 16 + k] * td[j * 16 + k]).sum())
                .collect();
            vlcap::decoder::argmax(&sims) == i
        })
        .count();
    let _ = last;
    let elapsed = t0.elapsed();
    let bound = (8f64).ln() / 4.0;
    Outcome::new(
        n == 8 && final_loss < bound && correct >= 7 && within(elapsed, 30),
        format!(
            "loss {final_loss:.4} (< {bound:.4}), diagonal argmax {correct}/8, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// First `n` events of a seeded corpus, keeping video grouping and order.
fn first_events(corpus: Vec<VideoRecord>, n: usize) -> Vec<VideoRecord> {
    let mut left = n;
    let mut out = Vec::new();
    for mut r in corpus {
        if left == 0 {
            break;
        }
        r.events.truncate(left);
        left -= r.events.len();
        out.push(r);
    }
    out
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let records = first_events(synth_corpus(7, 8, 3.65, VocabSpec::default()), 8);
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = small_model(&records, cfg, 7);
    let vocab_len = model.vocab.len();
    let max = MaxLens {
        video: model.cfg.max_video_len,
        text: model.cfg.max_text_len,
    };
    let full = batch(&records, &model.vocab, records.len(), max).unwrap().remove(0);
    let train_cfg = TrainConfig {
        lr: 2e-3,
        weight_decay: 0.0,
        seed: 7,
        ..TrainConfig::default()
    };
    let loss_cfg = LossConfig {
        label_smoothing: 0.0,
        lambda_vl: 0.0,
        ..LossConfig::default()
    };
    let mut trainer = Trainer::new(model, train_cfg, loss_cfg, 20);
    let mut reached = None;
    let mut mle = f64::NAN;
    for step in 0..500 {
        mle = trainer.step(&full, 0).unwrap().mle;
        if mle < 0.1 && reached.is_none() {
            reached = Some(step);
            break;
        }
    }
    let model = &trainer.model;
    let mut exact = 0;
    let mut total = 0;
    for r in &records {
        let got = model.generate(r, 20, MemoryMode::Flow).unwrap();
        for (g, e) in got.iter().zip(&r.events) {
            total += 1;
            if data::tokenize(g) == data::tokenize(&e.caption) {
                exact += 1;
            }
        }
    }
    let elapsed = t0.elapsed();
    Outcome::new(
        total == 8 && vocab_len <= 60 && reached.is_some() && exact == 8 && within(elapsed, 300),
        format!(
            "vocab {vocab_len}, L_MLE < 0.1 at step {:?} (last {mle:.4}), exact captions {exact}/{total}, {:.1}s",
            reached,
            elapsed.as_secs_f64()
        ),
    )
}

fn gain_config(lambda_vl: f64, out: &Path) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            lr: 1e-3,
            epochs: 50,
            seed: 0,
            ..TrainConfig::default()
        },
        loss: LossConfig {
            lambda_vl,
            ..LossConfig::default()
        },
        data: DataConfig {
            synth: Some(SynthSpec {
                profile: Profile::Anet,
                n_videos: 200,
                seed: 0,
                ..SynthSpec::default()
            }),
            ..DataConfig::default()
        },
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn end_to_end_gain() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [0.0, 0.1]
        .into_iter()
        .map(|lam| {
            let cfg = gain_config(lam, &dir.path().join(format!("lambda_{lam}")));
            std::thread::spawn(move || {
                let t = Instant::now();
                let outcome = train::train(&cfg).unwrap();
                let val = train::load_splits(&cfg).unwrap().val;
                let last = checkpoint::load(&outcome.last_checkpoint).unwrap();
                let (final_report, _) = train::evaluate(&last, &val, cfg.train.max_gen_len).unwrap();
                (outcome.best.unwrap(), final_report, t.elapsed())
            })
        })
        .collect();
    let mut results: Vec<_> = runs.into_iter().map(|h| h.join().unwrap()).collect();
    let (vl, vl_final, t_vl) = results.pop().unwrap();
    let (mle, mle_final, t_mle) = results.pop().unwrap();
    let cpu = t_vl + t_mle;
    let cider_ok = vl.cider >= mle.cider - 0.02;
    let div_ok = vl.div2 >= mle.div2;
    let strict = vl.cider > mle.cider && vl.div2 > mle.div2;
    Outcome::new(
        cider_ok && div_ok && cpu <= Duration::from_secs(1800),
        format!(
            "best-val CIDEr {:.3} vs MLE {:.3}, Div@2 {:.4} vs {:.4}; final-epoch CIDEr {:.3} vs {:.3}, Div@2 {:.4} vs {:.4}; strict gain on both: {}; {:.0}s train+eval ({:.0}s wall)",
            vl.cider,
            mle.cider,
            vl.div2,
            mle.div2,
            vl_final.cider,
            mle_final.cider,
            vl_final.div2,
            mle_final.div2,
            if strict { "yes" } else { "no (logged only)" },
            cpu.as_secs_f64(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

#[derive(Deserialize)]
struct FixturePair {
    candidate: Vec<String>,
    reference: Vec<String>,
}

#[derive(Deserialize)]
struct FixtureExpected {
    bleu4: f64,
    rouge_l: f64,
    cider: f64,
    div2: f64,
    rep4: f64,
}

#[derive(Deserialize)]
struct Fixture {
    pairs: Vec<FixturePair>,
    expected: FixtureExpected,
}

fn metrics_fixture() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics_fixture.json");
    let fx: Fixture = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let cands: Vec<Paragraph> = fx.pairs.iter().map(|p| Paragraph::from_sentences(&p.candidate)).collect();
    let refs: Vec<Paragraph> = fx.pairs.iter().map(|p| Paragraph::from_sentences(&p.reference)).collect();
    let r = metrics::evaluate(&cands, &refs).unwrap();
    let e = &fx.expected;
    let mut worst = [
        r.bleu4 - e.bleu4,
        r.rouge_l - e.rouge_l,
        r.cider - e.cider,
        r.div2 - e.div2,
        r.rep4 - e.rep4,
    ]
    .iter()
    .map(|d| d.abs())
    .fold(0.0, f64::max);
    let p = Paragraph::parse;
    for x in &refs {
        let one = std::slice::from_ref(x);
        worst = worst.max((metrics::bleu4(one, one).unwrap() - 1.0).abs());
    }
    let hand = [
        metrics::bleu4(&[p("zebra yak xylophone wolf")], &[p("quiet river stone bridge")]).unwrap(),
        metrics::rouge_l(&[p("zebra yak")], &[p("quiet river")]).unwrap(),
        metrics::div2(&p("a b a b")).unwrap() - 2.0 / 3.0,
        metrics::div2(&p("a a a a a")).unwrap() - 0.25,
        metrics::rep4(&p("a b c d a b c d")).unwrap() - 0.2,
        metrics::rep4(&p("a a a a a a a a")).unwrap() - 0.8,
    ];
    worst = hand.iter().map(|d| d.abs()).fold(worst, f64::max);
    Outcome::new(
        worst <= 1e-10,
        format!("10-paragraph fixture, identity, disjoint and hand cases: max deviation {worst:.1e}"),
    )
}

fn small_run_config(out: &Path) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_v: 8,
            d_img: 8,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            lr: 1e-3,
            epochs: 2,
            warmup_epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        },
        data: DataConfig {
            synth: Some(SynthSpec {
                n_videos: 20,
                seed: 3,
                d_v: 8,
                d_img: 8,
                ..SynthSpec::default()
            }),
            ..DataConfig::default()
        },
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = train::train(&small_run_config(&dir.path().join(name))).unwrap();
            std::fs::read(out.log_path).unwrap()
        })
        .collect();
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    Outcome::new(
        lines > 0 && logs[0] == logs[1],
        format!("two seeded runs with dropout: {lines} log lines, byte-identical: {}", logs[0] == logs[1]),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config(&dir.path().join("run"));
    let out = train::train(&cfg).unwrap();
    let val = train::load_splits(&cfg).unwrap().val;
    let model = checkpoint::load(&out.best_checkpoint).unwrap();
    let (before, preds_before) = train::evaluate(&model, &val, 14).unwrap();
    let copy = dir.path().join("copy.ckpt");
    checkpoint::save(&model, &copy).unwrap();
    let (after, preds_after) = train::evaluate(&checkpoint::load(&copy).unwrap(), &val, 14).unwrap();
    let ckpt_ok = before == after && preds_before == preds_after;

    let records = SynthSpec {
        n_videos: 15,
        seed: 8,
        ..SynthSpec::default()
    }
    .generate();
    let path = dir.path().join("corpus.jsonl");
    data::write_jsonl(&path, &records).unwrap();
    let back = data::load_jsonl(&path).unwrap();
    let jsonl_ok = back == records;
    Outcome::new(
        ckpt_ok && jsonl_ok,
        format!("checkpoint reload gives identical report and paragraphs: {ckpt_ok}; JSONL records identical: {jsonl_ok}"),
    )
}

fn main() -> ExitCode {
    type Check = (&'static str, fn() -> Outcome);
    let checks: Vec<Check> = vec![
        ("gradient suite", gradient_suite),
        ("memory gate identities", memory_gate_identities),
        ("causality", causality),
        ("contrastive behaviour", contrastive_behaviour),
        ("overfit", overfit),
        ("end-to-end synthetic gain", end_to_end_gain),
        ("metrics oracle fixture", metrics_fixture),
        ("determinism", determinism),
        ("round trips", round_trips),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in checks {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let o = f();
        let tag = match (o.pass, o.fatal) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        println!("{tag} {name}: {}", o.detail);
        if !o.pass && o.fatal {
            failed += 1;
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
