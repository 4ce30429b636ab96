//! Unified video+text transformer with a gated per-layer memory carried
//! across the events of one video.
//!
//! Each layer runs masked self-attention over `[F^VL; text]`, then attends
//! from the result `H̄` over `[M_{t-1}; H̄]`, and merges a feed-forward
//! encoding of that back into `H̄`. After an event is done, every layer's
//! memory is refreshed from its `H̄`:
//!
//! ```text
//! U = MHA(Q = M, K = V = [M; H̄])
//! R = tanh(M W_mr + U W_ur + b_r)
//! Z = sigmoid(M W_mz + U W_uz + b_z)
//! M' = (1 - Z) ⊙ R + Z ⊙ M
//! ```

use rand::{Rng, SeedableRng};

use crate::config::ModelConfig;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const VIDEO_TYPE: usize = 0;
const TEXT_TYPE: usize = 1;

/// Per-layer memory matrices `[memory_slots × d_model]` on a tape.
#[derive(Debug, Clone)]
pub struct MemoryState {
    pub layers: Vec<Var>,
}

impl MemoryState {
    pub fn zeros(tape: &mut Tape, cfg: &ModelConfig) -> Self {
        Self::from_tensors(tape, &vec![Tensor::zeros(&[cfg.memory_slots, cfg.d_model]); cfg.n_layers])
    }

    pub fn from_tensors(tape: &mut Tape, values: &[Tensor]) -> Self {
        Self {
            layers: values.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn to_tensors(&self, tape: &Tape) -> Vec<Tensor> {
        self.layers.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

/// `[F^VL; text]` with its attention visibility.
#[derive(Debug, Clone)]
pub struct UnifiedInput {
    /// `[(L + T) × d_model]`.
    pub hidden: Var,
    pub n_video: usize,
    pub n_text: usize,
    /// Whether each position is a real (unpadded) key.
    pub key_real: Vec<bool>,
}

impl UnifiedInput {
    pub fn len(&self) -> usize {
        self.n_video + self.n_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `len × len` mask: video queries see real video keys; text
    /// query `j` sees real video keys and real text keys `<= j`.
    pub fn visibility(&self) -> Vec<bool> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                let causal = k < self.n_video || (q >= self.n_video && k <= q);
                m[q * n + k] = self.key_real[k] && causal;
            }
        }
        m
    }
}

/// Test hook for the retain gate `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    None,
    /// Pre-activation forced to `+inf`, so `Z = 1`.
    Retain,
    /// Pre-activation forced to `-inf`, so `Z = 0`.
    Replace,
}

#[derive(Debug, Clone)]
pub struct MemoryUpdate {
    pub memory: Var,
    pub candidate: Var,
    pub gate: Var,
}

/// Whether memory flows between events during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MemoryMode {
    #[default]
    Flow,
    /// Zero memory before every event.
    Reset,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub mem_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub update_attn: MultiHeadAttention,
    pub w_mr: ParamId,
    pub w_ur: ParamId,
    pub b_r: ParamId,
    pub w_mz: ParamId,
    pub w_uz: ParamId,
    pub b_z: ParamId,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.n_heads;
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, h, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            mem_attn: MultiHeadAttention::new(store, &format!("{name}.mem_attn"), d, h, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            update_attn: MultiHeadAttention::new(store, &format!("{name}.update_attn"), d, h, rng),
            w_mr: store.add_glorot(format!("{name}.memory.w_mr"), d, d, rng),
            w_ur: store.add_glorot(format!("{name}.memory.w_ur"), d, d, rng),
            b_r: store.add(format!("{name}.memory.b_r"), Tensor::zeros(&[d])),
            w_mz: store.add_glorot(format!("{name}.memory.w_mz"), d, d, rng),
            w_uz: store.add_glorot(format!("{name}.memory.w_uz"), d, d, rng),
            b_z: store.add(format!("{name}.memory.b_z"), Tensor::zeros(&[d])),
        }
    }
}

/// Forward pass result for one event.
#[derive(Debug, Clone)]
pub struct EventForward {
    /// `[T × vocab]`, one row per text position.
    pub logits: Var,
    /// Per-layer `H̄`, used for the memory update.
    pub h_bar: Vec<Var>,
    /// Final-layer hidden states `[(L + T) × d_model]`.
    pub hidden: Var,
    pub input: UnifiedInput,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: ModelConfig,
    pub token_embed: ParamId,
    pub type_embed: ParamId,
    pub embed_norm: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    /// `None` when the output projection is tied to `token_embed`.
    pub out_proj: Option<Linear>,
    pub out_bias: Option<ParamId>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let bound = (3.0 / d as f64).sqrt();
        let token_embed = store.add_uniform("decoder.token_embed", &[cfg.vocab_size, d], bound, rng);
        let type_embed = store.add_uniform("decoder.type_embed", &[2, d], bound, rng);
        let embed_norm = LayerNorm::new(store, "decoder.embed_norm", d);
        let layers = (0..cfg.n_layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.layer{l}"), cfg, rng))
            .collect();
        let (out_proj, out_bias) = if cfg.tie_embeddings {
            (None, Some(store.add("decoder.out_bias", Tensor::zeros(&[cfg.vocab_size]))))
        } else {
            (Some(Linear::new(store, "decoder.out_proj", d, cfg.vocab_size, true, rng)), None)
        };
        Ok(Self {
            cfg: cfg.clone(),
            token_embed,
            type_embed,
            embed_norm,
            layers,
            out_proj,
            out_bias,
        })
    }

    /// Embeds `[F^VL; tokens]`. `video_real` and `text_real` mark unpadded
    /// positions; padding must come after the real entries.
    #[allow(clippy::too_many_arguments)]
    pub fn build_unified_input<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vl: Var,
        video_real: &[bool],
        tokens: &[u32],
        text_real: &[bool],
        train: bool,
        rng: &mut R,
    ) -> Result<UnifiedInput> {
        let d = self.cfg.d_model;
        let vs = tape.shape(vl).to_vec();
        if vs.len() != 2 || vs[1] != d || vs[0] != video_real.len() {
            return Err(Error::dim("build_unified_input", &vs, &[video_real.len(), d]));
        }
        if tokens.is_empty() || tokens.len() != text_real.len() {
            return Err(Error::dim("build_unified_input", &[tokens.len()], &[text_real.len()]));
        }
        let (l, t) = (vs[0], tokens.len());
        if l > self.cfg.max_video_len {
            return Err(Error::Overlength { what: "video positions", len: l, limit: self.cfg.max_video_len });
        }
        if t > self.cfg.max_text_len {
            return Err(Error::Overlength { what: "text positions", len: t, limit: self.cfg.max_text_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let table = tape.param(store, self.token_embed);
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let text = tape.gather_rows(table, &ids)?;
        let text = tape.scale(text, (d as f64).sqrt());
        let pe_v = tape.constant(sinusoid_positions(l, d));
        let pe_t = tape.constant(sinusoid_positions(t, d));
        let video = tape.add(vl, pe_v)?;
        let text = tape.add(text, pe_t)?;
        let joined = tape.concat(&[video, text], 0)?;
        let types = tape.param(store, self.type_embed);
        let type_ids: Vec<usize> = std::iter::repeat_n(VIDEO_TYPE, l).chain(std::iter::repeat_n(TEXT_TYPE, t)).collect();
        let type_rows = tape.gather_rows(types, &type_ids)?;
        let h = tape.add(joined, type_rows)?;
        let h = self.embed_norm.forward(tape, store, h)?;
        let hidden = tape.dropout(h, self.cfg.dropout, train, rng)?;
        let key_real = video_real.iter().chain(text_real).copied().collect();
        Ok(UnifiedInput {
            hidden,
            n_video: l,
            n_text: t,
            key_real,
        })
    }

    /// One transformer layer. Returns `(H_out, H̄)`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        h_in: Var,
        memory: Var,
        visible: &[bool],
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let ly = &self.layers[layer];
        let n = tape.shape(h_in)[0];
        let s = tape.shape(memory)[0];
        if visible.len() != n * n {
            return Err(Error::dim("layer_forward mask", &[n, n], &[visible.len()]));
        }
        let a = ly.self_attn.forward(tape, store, h_in, h_in, Some(visible))?.output;
        let a = tape.dropout(a, self.cfg.dropout, train, rng)?;
        let res = tape.add(h_in, a)?;
        let h_bar = ly.norm1.forward(tape, store, res)?;

        let kv = tape.concat(&[memory, h_bar], 0)?;
        let mut mem_visible = Vec::with_capacity(n * (s + n));
        for q in 0..n {
            mem_visible.extend(std::iter::repeat_n(true, s));
            mem_visible.extend_from_slice(&visible[q * n..(q + 1) * n]);
        }
        let u = ly.mem_attn.forward(tape, store, h_bar, kv, Some(&mem_visible))?.output;
        let f = ly.ffn.forward(tape, store, u)?;
        let f = tape.dropout(f, self.cfg.dropout, train, rng)?;
        let res = tape.add(h_bar, f)?;
        let h_out = ly.norm2.forward(tape, store, res)?;
        Ok((h_out, h_bar))
    }

    /// Gated memory refresh for one layer from `H̄` of a finished event.
    pub fn memory_update(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        memory: Var,
        h_bar: Var,
        key_real: &[bool],
        gate: GateOverride,
    ) -> Result<MemoryUpdate> {
        let ly = &self.layers[layer];
        let ms = tape.shape(memory).to_vec();
        let hs = tape.shape(h_bar).to_vec();
        if ms.len() != 2 || hs.len() != 2 || ms[1] != hs[1] || key_real.len() != hs[0] {
            return Err(Error::dim("memory_update", &ms, &hs));
        }
        let s = ms[0];
        let kv = tape.concat(&[memory, h_bar], 0)?;
        let mut visible = Vec::with_capacity(s * (s + hs[0]));
        for _ in 0..s {
            visible.extend(std::iter::repeat_n(true, s));
            visible.extend_from_slice(key_real);
        }
        let u = ly.update_attn.forward(tape, store, memory, kv, Some(&visible))?.output;

        let gate_input = |tape: &mut Tape, w_m: ParamId, w_u: ParamId, b: ParamId| -> Result<Var> {
            let wm = tape.param(store, w_m);
            let wu = tape.param(store, w_u);
            let bb = tape.param(store, b);
            let a = tape.matmul(memory, wm)?;
            let c = tape.matmul(u, wu)?;
            let sum = tape.add(a, c)?;
            tape.add(sum, bb)
        };
        let r_pre = gate_input(tape, ly.w_mr, ly.w_ur, ly.b_r)?;
        let candidate = tape.tanh(r_pre);
        let z_pre = match gate {
            GateOverride::None => gate_input(tape, ly.w_mz, ly.w_uz, ly.b_z)?,
            GateOverride::Retain => tape.constant(Tensor::full(&ms, f64::INFINITY)),
            GateOverride::Replace => tape.constant(Tensor::full(&ms, f64::NEG_INFINITY)),
        };
        let z = tape.sigmoid(z_pre);
        let neg_z = tape.scale(z, -1.0);
        let one_minus_z = tape.add_scalar(neg_z, 1.0);
        let keep_new = tape.mul(one_minus_z, candidate)?;
        let keep_old = tape.mul(z, memory)?;
        let memory = tape.add(keep_new, keep_old)?;
        Ok(MemoryUpdate {
            memory,
            candidate,
            gate: z,
        })
    }

    /// Full stack over one event with teacher-forced `tokens`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_event<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &MemoryState,
        vl: Var,
        video_real: &[bool],
        tokens: &[u32],
        text_real: &[bool],
        train: bool,
        rng: &mut R,
    ) -> Result<EventForward> {
        if memory.layers.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "memory has {} layers, decoder has {}",
                memory.layers.len(),
                self.layers.len()
            )));
        }
        let input = self.build_unified_input(tape, store, vl, video_real, tokens, text_real, train, rng)?;
        let visible = input.visibility();
        let mut h = input.hidden;
        let mut h_bar = Vec::with_capacity(self.layers.len());
        for (l, &m) in memory.layers.iter().enumerate() {
            let (out, hb) = self.layer_forward(tape, store, l, h, m, &visible, train, rng)?;
            h = out;
            h_bar.push(hb);
        }
        let text = tape.narrow(h, 0, input.n_video, input.n_text)?;
        let logits = self.project(tape, store, text)?;
        Ok(EventForward {
            logits,
            h_bar,
            hidden: h,
            input,
        })
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        match (&self.out_proj, self.out_bias) {
            (Some(lin), _) => lin.forward(tape, store, h),
            (None, Some(b)) => {
                let table = tape.param(store, self.token_embed);
                let tt = tape.transpose(table)?;
                let y = tape.matmul(h, tt)?;
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            (None, None) => unreachable!("decoder has an output head"),
        }
    }

    /// Applies the memory update in every layer.
    pub fn update_memory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &MemoryState,
        fwd: &EventForward,
    ) -> Result<MemoryState> {
        let layers = memory
            .layers
            .iter()
            .zip(&fwd.h_bar)
            .enumerate()
            .map(|(l, (&m, &hb))| {
                self.memory_update(tape, store, l, m, hb, &fwd.input.key_real, GateOverride::None)
                    .map(|u| u.memory)
            })
            .collect::<Result<_>>()?;
        Ok(MemoryState { layers })
    }

    /// Logits for the token after `prefix` plus the forward pass they came from.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &MemoryState,
        vl: Var,
        prefix: &[u32],
    ) -> Result<(Vec<f64>, EventForward)> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("decoding prefix must start with BOS".into()));
        }
        let l = tape.shape(vl)[0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_event(tape, store, memory, vl, &vec![true; l], prefix, &vec![true; prefix.len()], false, &mut rng)?;
        let v = self.cfg.vocab_size;
        let last = tape.data(fwd.logits)[(prefix.len() - 1) * v..].to_vec();
        Ok((last, fwd))
    }

    /// Greedy decoding of one sentence per event, in order. Memory starts at
    /// zero and is refreshed once after each event from the `H̄` of the final
    /// decoding step.
    pub fn generate_paragraph(
        &self,
        store: &ParamStore,
        events: &[Tensor],
        max_len: usize,
        mode: MemoryMode,
    ) -> Result<Vec<Vec<u32>>> {
        if events.is_empty() {
            return Err(Error::Contract("generate_paragraph needs at least one event".into()));
        }
        let zero = vec![Tensor::zeros(&[self.cfg.memory_slots, self.cfg.d_model]); self.cfg.n_layers];
        let mut memory_values = zero.clone();
        let mut sentences = Vec::with_capacity(events.len());
        for vl_value in events {
            if mode == MemoryMode::Reset {
                memory_values = zero.clone();
            }
            let mut tape = Tape::new();
            let memory = MemoryState::from_tensors(&mut tape, &memory_values);
            let vl = tape.constant(vl_value.clone());
            let (words, fwd) = self.greedy_sentence(&mut tape, store, &memory, vl, max_len)?;
            memory_values = self.update_memory(&mut tape, store, &memory, &fwd)?.to_tensors(&tape);
            sentences.push(words);
        }
        Ok(sentences)
    }

    /// Greedy words (without BOS/EOS) and the last forward pass.
    pub fn greedy_sentence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &MemoryState,
        vl: Var,
        max_len: usize,
    ) -> Result<(Vec<u32>, EventForward)> {
        let cap = max_len.min(self.cfg.max_text_len - 1);
        let mut prefix = vec![BOS];
        loop {
            let (logits, fwd) = self.decode_step(tape, store, memory, vl, &prefix)?;
            let next = argmax(&logits) as u32;
            if next == EOS || prefix.len() > cap {
                return Ok((prefix[1..].to_vec(), fwd));
            }
            prefix.push(next);
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Standard transformer sinusoid table `[n × d]`:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoid_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("n*d values")
}
