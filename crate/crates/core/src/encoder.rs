//! Snippet encoder producing one fused vision-language vector per snippet.
//!
//! * vision: average-pool the `P` spatial cells of each snippet's backbone
//!   map, then a channel MLP to `d_model`;
//! * language: project the middle-frame feature and every vocabulary word
//!   into a shared space, rank words by cosine similarity, keep the top `k`
//!   (scaled by their similarity) and reduce them with a learned-query
//!   attention selector;
//! * fusion: self-attention over the pair `[f_v; f_l]`, then the mean of
//!   the two outputs.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

const MIN_NORM: f64 = 1e-12;

/// Learned stand-ins for the word text features and the two projections
/// into the joint word/frame space.
#[derive(Debug, Clone)]
pub struct VocabularyEmbedding {
    pub tokens: Vec<String>,
    /// `[N × d_word]`.
    pub word_feats: ParamId,
    /// `[d_word × d_embed]`.
    pub text_proj: ParamId,
    /// `[d_img × d_embed]`.
    pub img_proj: ParamId,
}

#[derive(Debug, Clone)]
pub struct TopK {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Scores on the tape, `[k]`.
    pub score_var: Var,
    /// Normalized embeddings of the selected words, `[k × d_embed]`.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct AamOutput {
    /// `[1 × d_model]`.
    pub output: Var,
    /// `[1 × k]`, sums to one.
    pub weights: Var,
}

/// Which attention the fused modality runs; `Identity` bypasses it so the
/// output is the plain average of the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FuseMode {
    #[default]
    Attention,
    Identity,
}

#[derive(Debug, Clone)]
pub struct EncodedEvent {
    /// `[L × d_model]`.
    pub features: Var,
    pub vision: Var,
    pub language: Var,
    pub topk: Vec<TopK>,
    pub aam_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub d_v: usize,
    pub d_img: usize,
    pub d_embed: usize,
    pub d_model: usize,
    pub top_k: usize,
    pub vision_mlp: FeedForward,
    pub vocab: VocabularyEmbedding,
    /// AAM query, `[d_embed × 1]`.
    pub aam_query: ParamId,
    pub aam_proj: Linear,
    pub fuse_attn: MultiHeadAttention,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, words: &[String], rng: &mut R) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Config("encoder needs at least one vocabulary word".into()));
        }
        if cfg.top_k > words.len() {
            return Err(Error::Config(format!(
                "top_k {} exceeds the {} vocabulary words",
                cfg.top_k,
                words.len()
            )));
        }
        let n = words.len();
        let vocab = VocabularyEmbedding {
            tokens: words.to_vec(),
            word_feats: store.add_glorot("encoder.word_feats", n, cfg.d_word, rng),
            text_proj: store.add_glorot("encoder.text_proj", cfg.d_word, cfg.d_embed, rng),
            img_proj: store.add_glorot("encoder.img_proj", cfg.d_img, cfg.d_embed, rng),
        };
        Ok(Self {
            d_v: cfg.d_v,
            d_img: cfg.d_img,
            d_embed: cfg.d_embed,
            d_model: cfg.d_model,
            top_k: cfg.top_k,
            vision_mlp: FeedForward::new(store, "encoder.vision", cfg.d_v, cfg.d_model, cfg.d_model, rng),
            vocab,
            aam_query: store.add_glorot("encoder.aam.query", cfg.d_embed, 1, rng),
            aam_proj: Linear::new(store, "encoder.aam.proj", cfg.d_embed, cfg.d_model, true, rng),
            fuse_attn: MultiHeadAttention::new(store, "encoder.fuse", cfg.d_model, cfg.n_heads, rng),
        })
    }

    /// `[L × P × d_v]` → `[L × d_model]`: mean over `P`, then the MLP.
    pub fn vision_modality(&self, tape: &mut Tape, store: &ParamStore, backbone: Var) -> Result<Var> {
        let s = tape.shape(backbone).to_vec();
        if s.len() != 3 || s[2] != self.d_v {
            return Err(Error::dim("vision_modality", &s, &[0, 0, self.d_v]));
        }
        let pooled = tape.mean_axis(backbone, 1)?;
        self.vision_mlp.forward(tape, store, pooled)
    }

    /// Row-normalized projected word embeddings `[N × d_embed]`.
    pub fn word_embeddings(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let wf = tape.param(store, self.vocab.word_feats);
        let tp = tape.param(store, self.vocab.text_proj);
        let we = tape.matmul(wf, tp)?;
        check_norms(tape, we, "word embedding")?;
        tape.l2_normalize_rows(we)
    }

    /// Cosine similarity of each frame `[L × d_img]` to every word: `[L × N]`.
    pub fn frame_word_cosine(&self, tape: &mut Tape, store: &ParamStore, frames: Var, words: Var) -> Result<Var> {
        let s = tape.shape(frames).to_vec();
        if s.len() != 2 || s[1] != self.d_img {
            return Err(Error::dim("language_modality", &s, &[0, self.d_img]));
        }
        let ip = tape.param(store, self.vocab.img_proj);
        let ie = tape.matmul(frames, ip)?;
        check_norms(tape, ie, "frame embedding")?;
        let ie = tape.l2_normalize_rows(ie)?;
        let wt = tape.transpose(words)?;
        tape.matmul(ie, wt)
    }

    /// Top-`k` words for row `row` of a cosine matrix, ties broken by the
    /// lower vocabulary index.
    pub fn select_top_k(&self, tape: &mut Tape, cosine: Var, words: Var, row: usize, k: usize) -> Result<TopK> {
        let n = tape.shape(cosine)[1];
        if k == 0 || k > n {
            return Err(Error::Contract(format!("top-k needs 1 <= k <= {n}, got {k}")));
        }
        let scores_row = &tape.data(cosine)[row * n..(row + 1) * n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores_row[b].total_cmp(&scores_row[a]).then(a.cmp(&b)));
        order.truncate(k);
        let scores = order.iter().map(|&j| scores_row[j]).collect();
        let r = tape.narrow(cosine, 0, row, 1)?;
        let col = tape.reshape(r, &[n, 1])?;
        let picked = tape.gather_rows(col, &order)?;
        let score_var = tape.reshape(picked, &[k])?;
        let features = tape.gather_rows(words, &order)?;
        Ok(TopK {
            indices: order,
            scores,
            score_var,
            features,
        })
    }

    /// Ranks all vocabulary words against one middle-frame feature `[d_img]`.
    pub fn language_frame_embedding(&self, tape: &mut Tape, store: &ParamStore, frame: Var, k: usize) -> Result<TopK> {
        let s = tape.shape(frame).to_vec();
        let frame = match s.as_slice() {
            [d] => tape.reshape(frame, &[1, *d])?,
            _ => frame,
        };
        let words = self.word_embeddings(tape, store)?;
        let cos = self.frame_word_cosine(tape, store, frame, words)?;
        self.select_top_k(tape, cos, words, 0, k)
    }

    /// Learned-query attention over `k` candidates `[k × d_embed]`, projected
    /// to `d_model`.
    pub fn adaptive_attention(&self, tape: &mut Tape, store: &ParamStore, candidates: Var) -> Result<AamOutput> {
        let s = tape.shape(candidates).to_vec();
        if s.len() != 2 || s[1] != self.d_embed {
            return Err(Error::dim("adaptive_attention", &s, &[0, self.d_embed]));
        }
        let q = tape.param(store, self.aam_query);
        let scores = tape.matmul(candidates, q)?;
        let scores = tape.scale(scores, 1.0 / (self.d_embed as f64).sqrt());
        let scores = tape.reshape(scores, &[1, s[0]])?;
        let weights = tape.softmax(scores, 1)?;
        let pooled = tape.matmul(weights, candidates)?;
        let output = self.aam_proj.forward(tape, store, pooled)?;
        Ok(AamOutput { output, weights })
    }

    /// Per-snippet two-token self-attention over `[f_v_i; f_l_i]`, averaged.
    ///
    /// All snippets run in one attention call whose mask keeps each token
    /// inside its own pair.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, f_v: Var, f_l: Var, mode: FuseMode) -> Result<Var> {
        let (sv, sl) = (tape.shape(f_v).to_vec(), tape.shape(f_l).to_vec());
        if sv != sl || sv.len() != 2 || sv[1] != self.d_model {
            return Err(Error::dim("fuse", &sv, &sl));
        }
        let l = sv[0];
        let (a, b) = match mode {
            FuseMode::Identity => (f_v, f_l),
            FuseMode::Attention => {
                let tokens = tape.concat(&[f_v, f_l], 0)?;
                let mut visible = vec![false; 4 * l * l];
                for i in 0..l {
                    for (q, k) in [(i, i), (i, i + l), (i + l, i), (i + l, i + l)] {
                        visible[q * 2 * l + k] = true;
                    }
                }
                let out = self.fuse_attn.forward(tape, store, tokens, tokens, Some(&visible))?.output;
                (tape.narrow(out, 0, 0, l)?, tape.narrow(out, 0, l, l)?)
            }
        };
        let sum = tape.add(a, b)?;
        Ok(tape.scale(sum, 0.5))
    }

    /// Full encoder over one event's snippets.
    pub fn encode_event(&self, tape: &mut Tape, store: &ParamStore, backbone: Var, frames: Var) -> Result<EncodedEvent> {
        self.encode_event_with(tape, store, backbone, frames, FuseMode::Attention)
    }

    pub fn encode_event_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        backbone: Var,
        frames: Var,
        mode: FuseMode,
    ) -> Result<EncodedEvent> {
        let l = tape.shape(backbone)[0];
        if tape.shape(frames).first() != Some(&l) {
            return Err(Error::dim("encode_event", tape.shape(backbone), tape.shape(frames)));
        }
        let vision = self.vision_modality(tape, store, backbone)?;
        let words = self.word_embeddings(tape, store)?;
        let cos = self.frame_word_cosine(tape, store, frames, words)?;
        let mut topk = Vec::with_capacity(l);
        let mut rows = Vec::with_capacity(l);
        let mut aam_weights = Vec::with_capacity(l);
        for i in 0..l {
            let sel = self.select_top_k(tape, cos, words, i, self.top_k)?;
            let cands = tape.row_scale(sel.features, sel.score_var)?;
            let aam = self.adaptive_attention(tape, store, cands)?;
            rows.push(aam.output);
            aam_weights.push(aam.weights);
            topk.push(sel);
        }
        let language = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let features = self.fuse(tape, store, vision, language, mode)?;
        Ok(EncodedEvent {
            features,
            vision,
            language,
            topk,
            aam_weights,
        })
    }
}

fn check_norms(tape: &Tape, x: Var, what: &str) -> Result<()> {
    let n = *tape.shape(x).last().unwrap_or(&1);
    for (i, row) in tape.data(x).chunks(n).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > MIN_NORM) {
            return Err(Error::Degenerate(format!("{what} {i} has zero norm; cosine is undefined")));
        }
    }
    Ok(())
}
