//! Central finite-difference check of every trainable parameter's gradient
//! of the total loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LossConfig, ModelConfig};
use crate::data::{batch, Batch, MaxLens, SynthSpec, VocabSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::model::VlCap;
use crate::tensor::Tape;

/// Floor on the per-tensor denominator. Central differences of an O(1) loss
/// carry round-off near 1e-11 at eps = 1e-5, so gradients that are exactly
/// zero (attention key biases) need an absolute scale to compare against.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_abs_diff: f64,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn loss_value(model: &VlCap, batch: &Batch, loss_cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = model.batch_loss(&mut tape, batch, loss_cfg, false, &mut rng)?;
    Ok(tape.item(loss.total))
}

/// Compares backprop gradients with `(L(w + eps) - L(w - eps)) / 2eps` for
/// every entry of every trainable parameter. Dropout is off.
pub fn check_model(model: &mut VlCap, batch: &Batch, loss_cfg: &LossConfig, eps: f64) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = model.batch_loss(&mut tape, batch, loss_cfg, false, &mut rng)?;
    tape.backward(loss.total)?;
    model.store.zero_grad();
    model.store.accumulate_grads(&tape);

    let ids: Vec<_> = model.store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let p = model.store.get(id);
        if !p.trainable {
            continue;
        }
        let name = p.name.clone();
        let n = p.tensor.numel();
        let analytic = p.tensor.grad().map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.store.get(id).tensor.data()[j];
            model.store.get_mut(id).tensor.data_mut()[j] = orig + eps;
            let up = loss_value(model, batch, loss_cfg)?;
            model.store.get_mut(id).tensor.data_mut()[j] = orig - eps;
            let down = loss_value(model, batch, loss_cfg)?;
            model.store.get_mut(id).tensor.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let max_abs_diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(REL_FLOOR, f64::max);
        if !max_abs_diff.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        params.push(ParamCheck {
            name,
            numel: n,
            max_abs_diff,
            rel_error: max_abs_diff / scale,
        });
    }
    Ok(GradCheckReport { eps, params })
}

/// Small model and two-video batch used by the `gradcheck` command:
/// two layers, two heads, `d_model = 16`, both loss terms active.
pub fn reference_setup(seed: u64) -> Result<(VlCap, Batch, LossConfig)> {
    let spec = SynthSpec {
        n_videos: 2,
        seed,
        events_per_video: Some(2.0),
        vocab: VocabSpec {
            subjects: 2,
            verbs: 2,
            objects: 2,
            places: 2,
        },
        n_positions: 2,
        d_v: 6,
        d_img: 6,
        min_snippets: 2,
        max_snippets: 3,
        ..SynthSpec::default()
    };
    let mut records = spec.generate();
    for r in &mut records {
        r.events.truncate(2);
    }
    let vocab = Vocabulary::build(&records, 1);
    let cfg = ModelConfig {
        d_v: 6,
        d_img: 6,
        d_word: 6,
        d_embed: 6,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        top_k: 3,
        memory_slots: 2,
        dropout: 0.0,
        d_caption: 6,
        d_contrast: 6,
        ..ModelConfig::default()
    };
    let loss_cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = VlCap::new(cfg, vocab, loss_cfg.rho_init, &mut rng)?;
    let max = MaxLens {
        video: model.cfg.max_video_len,
        text: model.cfg.max_text_len,
    };
    let batches = batch(&records, &model.vocab, records.len(), max)?;
    let b = batches.into_iter().next().expect("one batch");
    Ok((model, b, loss_cfg))
}
