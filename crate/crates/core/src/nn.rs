//! Parameterized layers shared by the encoder and decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), d_in, d_out, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias, d_in, d_out }
    }

    /// `x[n×d_in] · W + b`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Scaled dot-product attention with `n_heads` heads over a shared width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

/// Attention result plus the per-head weight matrices `[n_q × n_k]`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(d_model % n_heads == 0, "d_model must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, true, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, true, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, true, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, true, rng),
            n_heads,
            d_model,
        }
    }

    /// Attends from `query[n_q×d]` over `kv[n_k×d]`. `visible`, when given,
    /// is a row-major `n_q × n_k` mask of allowed query/key pairs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        kv: Var,
        visible: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let (qs, ks) = (tape.shape(query).to_vec(), tape.shape(kv).to_vec());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.d_model || ks[1] != self.d_model {
            return Err(Error::dim("attention", &qs, &ks));
        }
        if let Some(m) = visible {
            if m.len() != qs[0] * ks[0] {
                return Err(Error::dim("attention mask", &[qs[0], ks[0]], &[m.len()]));
            }
        }
        let q = self.query.forward(tape, store, query)?;
        let k = self.key.forward(tape, store, kv)?;
        let v = self.value.forward(tape, store, kv)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let kh = tape.narrow(k, 1, h * dh, dh)?;
            let vh = tape.narrow(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let w = match visible {
                Some(m) => tape.masked_softmax(scores, m)?,
                None => tape.softmax(scores, 1)?,
            };
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let output = self.output.forward(tape, store, joined)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Position-wise `linear → relu → linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d_in, d_hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 8, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let out = mha.forward(&mut tape, &store, x, x, None).unwrap();
        assert_eq!(tape.shape(out.output), &[3, 8]);
        for w in out.weights {
            for row in tape.data(w).chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_length_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 4, 1, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(mha.forward(&mut tape, &store, x, x, Some(&[true; 3])).is_err());
    }
}
