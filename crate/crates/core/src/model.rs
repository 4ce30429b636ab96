//! The full captioner: encoder, memory decoder, caption encoder and the
//! learnable contrastive temperature, sharing one [`ParamStore`].

use rand::Rng;

use crate::config::{LossConfig, ModelConfig};
use crate::data::{Batch, PaddedEvent, VideoRecord, Vocabulary};
use crate::decoder::{Decoder, MemoryMode, MemoryState};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::losses::{mle_loss, total_loss, vl_loss, CaptionEncoder};
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct VlCap {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub caption: CaptionEncoder,
    /// Projects pooled video hidden states into the contrastive space.
    pub event_proj: Linear,
    /// Log inverse temperature of the contrastive loss.
    pub rho: ParamId,
}

/// Loss terms of one batch, recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub mle: Var,
    /// Absent when the batch has fewer than two events or `lambda_vl` is 0.
    pub vl: Option<Var>,
    pub n_events: usize,
}

impl VlCap {
    /// `cfg.vocab_size` is replaced by the vocabulary's size.
    pub fn new<R: Rng>(mut cfg: ModelConfig, vocab: Vocabulary, rho_init: f64, rng: &mut R) -> Result<Self> {
        cfg.vocab_size = vocab.len();
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg, vocab.words(), rng)?;
        let decoder = Decoder::new(&mut store, &cfg, rng)?;
        let caption = CaptionEncoder::new(&mut store, cfg.vocab_size, cfg.d_caption, cfg.d_contrast, rng);
        let event_proj = Linear::new(&mut store, "event_proj", cfg.d_model, cfg.d_contrast, true, rng);
        let rho = store.add("loss.rho", Tensor::scalar(rho_init));
        Ok(Self {
            cfg,
            vocab,
            store,
            encoder,
            decoder,
            caption,
            event_proj,
            rho,
        })
    }

    /// Encodes the real snippets of `ev` and zero-pads to its padded length.
    /// Returns `[L_pad × d_model]`.
    pub fn encode_padded(&self, tape: &mut Tape, ev: &PaddedEvent) -> Result<Var> {
        let real = ev.trimmed();
        let l = real.video_mask.len();
        let backbone = tape.constant(real.snippets);
        let frames = tape.constant(real.frames);
        let enc = self.encoder.encode_event(tape, &self.store, backbone, frames)?;
        let pad = ev.video_mask.len() - l;
        if pad == 0 {
            return Ok(enc.features);
        }
        let zeros = tape.constant(Tensor::zeros(&[pad, self.cfg.d_model]));
        tape.concat(&[enc.features, zeros], 0)
    }

    /// Encodes an unpadded event from a record.
    pub fn encode_record_event(&self, tape: &mut Tape, snippets: Tensor, frames: Tensor) -> Result<Var> {
        let backbone = tape.constant(snippets);
        let frames = tape.constant(frames);
        Ok(self.encoder.encode_event(tape, &self.store, backbone, frames)?.features)
    }

    /// Teacher-forced loss over every stream of `batch`. Memory starts at zero
    /// per stream and flows through its events in order. The caption loss is
    /// the mean of per-event losses.
    pub fn batch_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        loss_cfg: &LossConfig,
        train: bool,
        rng: &mut R,
    ) -> Result<BatchLoss> {
        let n_events = batch.n_events();
        if n_events == 0 {
            return Err(Error::Degenerate("batch without events".into()));
        }
        let mut mle_terms = Vec::with_capacity(n_events);
        let mut event_embeds = Vec::with_capacity(n_events);
        let mut caption_embeds = Vec::with_capacity(n_events);
        let want_vl = loss_cfg.lambda_vl > 0.0 && n_events >= 2;
        for stream in &batch.streams {
            let mut memory = MemoryState::zeros(tape, &self.cfg);
            for ev in &stream.events {
                let t = ev.tokens.len();
                let vl = self.encode_padded(tape, ev)?;
                let fwd = self.decoder.forward_event(
                    tape,
                    &self.store,
                    &memory,
                    vl,
                    &ev.video_mask,
                    &ev.tokens[..t - 1],
                    &ev.text_mask[1..],
                    train,
                    rng,
                )?;
                mle_terms.push(mle_loss(tape, fwd.logits, &ev.tokens[1..], &ev.text_mask[1..], loss_cfg.label_smoothing)?);
                if want_vl {
                    event_embeds.push(self.event_embedding(tape, fwd.hidden, ev.n_snippets())?);
                    let words = &ev.tokens[1..ev.n_tokens() - 1];
                    caption_embeds.push(self.caption.encode(tape, &self.store, words)?);
                }
                memory = self.decoder.update_memory(tape, &self.store, &memory, &fwd)?;
            }
        }
        let mle = mean_of(tape, &mle_terms)?;
        let (total, vl) = if want_vl {
            let f = tape.concat(&event_embeds, 0)?;
            let ft = tape.concat(&caption_embeds, 0)?;
            let rho = tape.param(&self.store, self.rho);
            let vl = vl_loss(tape, f, ft, rho, loss_cfg.max_logit_scale)?;
            (total_loss(tape, mle, vl, loss_cfg)?, Some(vl))
        } else {
            (mle, None)
        };
        Ok(BatchLoss { total, mle, vl, n_events })
    }

    /// Unit-norm `[1 × d_contrast]` embedding from the mean of the final
    /// hidden states at the first `n_real` (video) positions.
    pub fn event_embedding(&self, tape: &mut Tape, hidden: Var, n_real: usize) -> Result<Var> {
        let video = tape.narrow(hidden, 0, 0, n_real)?;
        let pooled = tape.mean_axis(video, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.cfg.d_model])?;
        let y = self.event_proj.forward(tape, &self.store, pooled)?;
        tape.l2_normalize_rows(y)
    }

    /// `min(exp(rho), max_scale)` at the current parameters.
    pub fn logit_scale(&self, loss_cfg: &LossConfig) -> f64 {
        self.store.get(self.rho).tensor.data()[0].exp().min(loss_cfg.max_logit_scale)
    }

    /// Greedy paragraph for one video, one sentence per event.
    pub fn generate(&self, record: &VideoRecord, max_len: usize, mode: MemoryMode) -> Result<Vec<String>> {
        let ids = self.generate_ids(record, max_len, mode)?;
        Ok(ids.iter().map(|s| self.vocab.decode(s)).collect())
    }

    pub fn generate_ids(&self, record: &VideoRecord, max_len: usize, mode: MemoryMode) -> Result<Vec<Vec<u32>>> {
        let features = record
            .events
            .iter()
            .map(|ev| {
                let mut tape = Tape::new();
                let v = self.encode_record_event(&mut tape, ev.snippet_tensor(), ev.frame_tensor())?;
                Ok(tape.value(v).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        self.decoder.generate_paragraph(&self.store, &features, max_len, mode)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}
