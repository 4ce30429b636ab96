//! Caption likelihood and the contrastive vision-language objective.

use rand::Rng;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const UNIT_TOL: f64 = 1e-6;

/// Label-smoothed cross-entropy averaged over positions where `mask` is set.
///
/// The target row puts `1 - smoothing` on the gold token and
/// `smoothing / (V - 1)` on every other token.
pub fn mle_loss(tape: &mut Tape, logits: Var, targets: &[u32], mask: &[bool], smoothing: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.len() != mask.len() {
        return Err(Error::dim("mle_loss", &shape, &[targets.len(), mask.len()]));
    }
    let v = shape[1];
    if v < 2 {
        return Err(Error::Contract("mle_loss needs at least two classes".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Degenerate("mle_loss over zero unmasked positions".into()));
    }
    let on = (1.0 - smoothing) / n as f64;
    let off = smoothing / (v - 1) as f64 / n as f64;
    let mut weights = vec![0.0; targets.len() * v];
    for (t, (&gold, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        let gold = gold as usize;
        if gold >= v {
            return Err(Error::Contract(format!("target id {gold} outside {v} classes")));
        }
        let row = &mut weights[t * v..(t + 1) * v];
        row.fill(off);
        row[gold] = on;
    }
    let logp = tape.log_softmax(logits)?;
    let w = tape.constant(Tensor::new(shape, weights)?);
    let picked = tape.mul(logp, w)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// Bag-of-words caption encoder: mean embedding, projection, unit norm.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    pub table: ParamId,
    pub proj: Linear,
    pub vocab_size: usize,
}

impl CaptionEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab_size: usize, d_caption: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (3.0 / d_caption as f64).sqrt();
        Self {
            table: store.add_uniform("caption.embed", &[vocab_size, d_caption], bound, rng),
            proj: Linear::new(store, "caption.proj", d_caption, d_out, true, rng),
            vocab_size,
        }
    }

    /// `[1 × d_out]` unit-norm encoding of `tokens`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("caption_encode of an empty caption".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Contract(format!("caption token {bad} outside vocabulary")));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(store, self.table);
        let rows = tape.gather_rows(table, &ids)?;
        let pooled = tape.mean_axis(rows, 0)?;
        let d = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, d])?;
        let y = self.proj.forward(tape, store, pooled)?;
        tape.l2_normalize_rows(y)
    }
}

/// Symmetric InfoNCE over `[N × d]` unit rows with logit scale
/// `min(exp(rho), max_scale)`; pair `i` of `events` and `captions` is the
/// positive for row and column `i`.
pub fn vl_loss(tape: &mut Tape, events: Var, captions: Var, rho: Var, max_scale: f64) -> Result<Var> {
    let (se, sc) = (tape.shape(events).to_vec(), tape.shape(captions).to_vec());
    if se.len() != 2 || se != sc {
        return Err(Error::dim("vl_loss", &se, &sc));
    }
    let n = se[0];
    if n < 2 {
        return Err(Error::Contract(format!("vl_loss needs N >= 2, got {n}")));
    }
    if !tape.shape(rho).is_empty() {
        return Err(Error::dim("vl_loss rho", tape.shape(rho), &[]));
    }
    for (what, v) in [("event", events), ("caption", captions)] {
        if let Some(r) = tape
            .data(v)
            .chunks(se[1])
            .position(|row| (row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() > UNIT_TOL)
        {
            return Err(Error::Contract(format!("{what} row {r} is not unit norm")));
        }
    }
    let scale = tape.exp(rho);
    let scale = tape.clamp_max(scale, max_scale);
    let ct = tape.transpose(captions)?;
    let sim = tape.matmul(events, ct)?;
    let logits = tape.mul(sim, scale)?;
    let logits_t = tape.transpose(logits)?;
    let rows = tape.log_softmax(logits)?;
    let cols = tape.log_softmax(logits_t)?;
    let both = tape.add(rows, cols)?;
    let eye = tape.constant(Tensor::eye(n));
    let diag = tape.mul(both, eye)?;
    let total = tape.sum(diag);
    Ok(tape.scale(total, -0.5 / n as f64))
}

/// `mle + lambda_vl * vl`.
pub fn total_loss(tape: &mut Tape, mle: Var, vl: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = tape.scale(vl, cfg.lambda_vl);
    tape.add(mle, weighted)
}
