//! AdamW with linear warmup, the training loop, evaluation and generation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{LossConfig, RunConfig, TrainConfig};
use crate::data::{self, batch, split_corpus, Batch, MaxLens, Prediction, VideoRecord, Vocabulary};
use crate::decoder::MemoryMode;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, Paragraph};
use crate::model::VlCap;
use crate::tensor::{ParamStore, Tape};

/// Adam moments plus the step counter and best validation score.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub best_cider: Option<f64>,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            best_cider: None,
        }
    }
}

/// `lr * step / warmup_steps` for the first `warmup_steps` steps (0-based),
/// then `lr`.
pub fn warmup_lr(lr: f64, step: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        lr * step as f64 / warmup_steps as f64
    } else {
        lr
    }
}

/// Global L2 norm of all trainable gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(_, p)| p.tensor.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update from the gradients held in `store`.
///
/// Weight decay is decoupled and skipped for vectors and scalars (biases,
/// norm gains, the temperature). Missing gradients count as zero.
pub fn adam_step(store: &mut ParamStore, state: &mut TrainState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for (_, p) in store.iter() {
        if p.tensor.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let clip = match cfg.grad_clip {
        Some(c) => {
            let norm = grad_norm(store);
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let decay = if p.tensor.rank() >= 2 { cfg.weight_decay } else { 0.0 };
        let grad = p.tensor.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j] * clip);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + decay * *w);
        }
    }
    Ok(())
}

/// One line of `loss_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mle: f64,
    pub vl: Option<f64>,
    pub total: f64,
    pub logit_scale: f64,
}

/// Model, optimizer state and RNG for step-wise training.
#[derive(Debug)]
pub struct Trainer {
    pub model: VlCap,
    pub state: TrainState,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub warmup_steps: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: VlCap, train_cfg: TrainConfig, loss_cfg: LossConfig, warmup_steps: usize) -> Self {
        let state = TrainState::new(&model.store);
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
        Self {
            model,
            state,
            train_cfg,
            loss_cfg,
            warmup_steps,
            rng,
        }
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepLog> {
        let mut tape = Tape::new();
        let loss = self.model.batch_loss(&mut tape, batch, &self.loss_cfg, true, &mut self.rng)?;
        tape.backward(loss.total)?;
        let log = StepLog {
            step: self.state.step,
            epoch,
            lr: warmup_lr(self.train_cfg.lr, self.state.step, self.warmup_steps),
            mle: tape.item(loss.mle),
            vl: loss.vl.map(|v| tape.item(v)),
            total: tape.item(loss.total),
            logit_scale: self.model.logit_scale(&self.loss_cfg),
        };
        self.model.store.zero_grad();
        self.model.store.accumulate_grads(&tape);
        adam_step(&mut self.model.store, &mut self.state, &self.train_cfg, log.lr)?;
        Ok(log)
    }
}

/// Training, validation and test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    if let Some(spec) = &cfg.data.synth {
        let (train, val, test) = split_corpus(spec.generate());
        return Ok(Splits { train, val, test });
    }
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is required without data.synth".into()))?;
    let train = data::load_jsonl(train_path)?;
    let val = match &cfg.data.val {
        Some(p) => data::load_jsonl(p)?,
        None => Vec::new(),
    };
    Ok(Splits {
        train,
        val,
        test: Vec::new(),
    })
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub steps: usize,
    pub best: Option<MetricReport>,
    pub last_log: Option<StepLog>,
}

/// Runs the configured number of epochs, writing `loss_log.jsonl`,
/// `last.ckpt` and `best.ckpt` (highest validation CIDEr, or the last model
/// when there is no validation split) into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let vocab = Vocabulary::build(&splits.train, cfg.data.min_count);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = VlCap::new(cfg.model.clone(), vocab, cfg.loss.rho_init, &mut init_rng)?;
    let max = MaxLens {
        video: model.cfg.max_video_len,
        text: model.cfg.max_text_len,
    };
    let steps_per_epoch = splits.train.len().div_ceil(cfg.train.batch_size);
    let warmup = cfg.train.warmup_epochs * steps_per_epoch;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), warmup);

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("loss_log.jsonl");
    let best_checkpoint = cfg.out_dir.join("best.ckpt");
    let last_checkpoint = cfg.out_dir.join("last.ckpt");
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    info!(
        "{}",
        serde_json::json!({
            "event": "start",
            "train_videos": splits.train.len(),
            "val_videos": splits.val.len(),
            "vocab": trainer.model.vocab.len(),
            "params": trainer.model.store.num_scalars(),
        })
    );

    let mut order = splits.train.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(2));
    let mut best = None;
    let mut last_log = None;
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut shuffle_rng);
        for b in batch(&order, &trainer.model.vocab, cfg.train.batch_size, max)? {
            let log = trainer.step(&b, epoch)?;
            serde_json::to_writer(&mut log_file, &log)?;
            log_file.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            last_log = Some(log);
        }
        if !splits.val.is_empty() && (epoch + 1) % cfg.train.eval_every == 0 {
            let (report, _) = evaluate(&trainer.model, &splits.val, cfg.train.max_gen_len)?;
            info!("{}", serde_json::json!({"event": "eval", "epoch": epoch, "report": report}));
            if trainer.state.best_cider.is_none_or(|b| report.cider > b) {
                trainer.state.best_cider = Some(report.cider);
                best = Some(report);
                checkpoint::save(&trainer.model, &best_checkpoint)?;
            }
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&trainer.model, &last_checkpoint)?;
    if best.is_none() {
        checkpoint::save(&trainer.model, &best_checkpoint)?;
    }
    Ok(TrainOutcome {
        log_path,
        best_checkpoint,
        last_checkpoint,
        steps: trainer.state.step,
        best,
        last_log,
    })
}

/// Greedy paragraphs for `records`, generated in parallel across videos.
pub fn generate(model: &VlCap, records: &[VideoRecord], max_len: usize) -> Result<Vec<Prediction>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Prediction {
                video_id: r.video_id.clone(),
                sentences: model.generate(r, max_len, MemoryMode::Flow)?,
            })
        })
        .collect()
}

/// Generates for `records` and scores against their captions.
pub fn evaluate(model: &VlCap, records: &[VideoRecord], max_len: usize) -> Result<(MetricReport, Vec<Prediction>)> {
    let preds = generate(model, records, max_len)?;
    let cands: Vec<Paragraph> = preds.iter().map(|p| Paragraph::from_sentences(&p.sentences)).collect();
    let refs: Vec<Paragraph> = records
        .iter()
        .map(|r| Paragraph::from_sentences(&r.events.iter().map(|e| e.caption.as_str()).collect::<Vec<_>>()))
        .collect();
    Ok((metrics::evaluate(&cands, &refs)?, preds))
}

/// Loads a checkpoint and evaluates it on a JSONL dataset.
pub fn evaluate_checkpoint(ckpt: &Path, data_path: &Path, max_len: usize) -> Result<(MetricReport, Vec<Prediction>)> {
    let model = checkpoint::load(ckpt)?;
    let records = data::load_jsonl(data_path)?;
    evaluate(&model, &records, max_len)
}
