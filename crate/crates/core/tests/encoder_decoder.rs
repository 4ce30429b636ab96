use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlcap::data::{Vocabulary, BOS};
use vlcap::decoder::{sinusoid_positions, Decoder, GateOverride, MemoryMode, MemoryState};
use vlcap::nn::{Linear, MultiHeadAttention};
use vlcap::tensor::{ParamId, ParamStore, Tape, Tensor};
use vlcap::{ModelConfig, VlCap};

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut ChaCha8Rng) {
    for x in store.get_mut(id).tensor.data_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
}

fn affine(store: &ParamStore, lin: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.get(lin.weight).tensor.data();
    let b = lin.bias.map(|b| store.get(b).tensor.data().to_vec());
    x.iter()
        .map(|row| {
            (0..lin.d_out)
                .map(|o| {
                    let mut s = b.as_ref().map_or(0.0, |b| b[o]);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i * lin.d_out + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Single-head attention written as explicit loops.
fn loop_attention(
    store: &ParamStore,
    att: &MultiHeadAttention,
    q_in: &[Vec<f64>],
    kv_in: &[Vec<f64>],
    visible: &[bool],
) -> Vec<Vec<f64>> {
    let q = affine(store, &att.query, q_in);
    let k = affine(store, &att.key, kv_in);
    let v = affine(store, &att.value, kv_in);
    let d = att.d_model;
    let mut mixed = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let mut scores = Vec::new();
        for (j, kj) in k.iter().enumerate() {
            if visible[i * k.len() + j] {
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                scores.push((j, dot / (d as f64).sqrt()));
            }
        }
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
        let mut row = vec![0.0; d];
        for &(j, s) in &scores {
            let w = (s - max).exp() / z;
            for c in 0..d {
                row[c] += w * v[j][c];
            }
        }
        mixed.push(row);
    }
    affine(store, &att.output, &mixed)
}

#[test]
fn single_head_attention_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let att = MultiHeadAttention::new(&mut store, "att", 6, 1, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        randomize(&mut store, id, &mut rng);
    }
    let q_in = random_rows(&mut rng, 4, 6);
    let kv_in = random_rows(&mut rng, 5, 6);
    let visible: Vec<bool> = (0..20).map(|i| i % 5 <= i / 5 + 1).collect();

    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&q_in).unwrap());
    let kv = tape.constant(Tensor::from_rows(&kv_in).unwrap());
    let out = att.forward(&mut tape, &store, q, kv, Some(&visible)).unwrap();
    let want = loop_attention(&store, &att, &q_in, &kv_in, &visible);
    let got = tape.data(out.output);
    for (g, w) in got.iter().zip(want.iter().flatten()) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
    // Hidden keys get exactly zero weight.
    let weights = tape.data(out.weights[0]);
    for (w, &vis) in weights.iter().zip(&visible) {
        if !vis {
            assert_eq!(*w, 0.0);
        }
    }
}

#[test]
fn sinusoid_table_matches_hand_values() {
    let pe = sinusoid_positions(3, 4);
    let d = pe.data();
    let want = [
        [0.0, 1.0, 0.0, 1.0],
        [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()],
        [2f64.sin(), 2f64.cos(), 0.02f64.sin(), 0.02f64.cos()],
    ];
    for (got, want) in d.iter().zip(want.iter().flatten()) {
        assert!((got - want).abs() < 1e-15);
    }
}

fn tiny_decoder(seed: u64) -> (ModelConfig, ParamStore, Decoder) {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        memory_slots: 3,
        vocab_size: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
    (cfg, store, dec)
}

#[test]
fn zero_memory_gives_finite_logits() {
    let (cfg, store, dec) = tiny_decoder(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let memory = MemoryState::zeros(&mut tape, &cfg);
    let vl = tape.constant(Tensor::from_rows(&random_rows(&mut rng, 3, 8)).unwrap());
    let fwd = dec
        .forward_event(&mut tape, &store, &memory, vl, &[true; 3], &[BOS, 5, 6], &[true; 3], false, &mut rng)
        .unwrap();
    assert_eq!(tape.shape(fwd.logits), &[3, 12]);
    assert!(tape.data(fwd.logits).iter().all(|x| x.is_finite()));
}

#[test]
fn gate_and_candidate_stay_in_range() {
    let (cfg, store, dec) = tiny_decoder(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for layer in 0..cfg.n_layers {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&random_rows(&mut rng, 3, 8)).unwrap());
        let hb = tape.constant(Tensor::from_rows(&random_rows(&mut rng, 6, 8)).unwrap());
        let up = dec.memory_update(&mut tape, &store, layer, m, hb, &[true; 6], GateOverride::None).unwrap();
        assert!(tape.data(up.gate).iter().all(|&z| z > 0.0 && z < 1.0));
        assert!(tape.data(up.candidate).iter().all(|&r| r > -1.0 && r < 1.0));
    }
}

#[test]
fn reset_memory_makes_events_independent() {
    let records = vlcap::data::synth_corpus(5, 2, 3.0, Default::default());
    let vocab = Vocabulary::build(&records, 1);
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = VlCap::new(cfg, vocab, 0.0, &mut rng).unwrap();
    let rec = records.iter().find(|r| r.events.len() >= 2).unwrap();
    let events: Vec<Tensor> = rec
        .events
        .iter()
        .map(|e| {
            let mut tape = Tape::new();
            let v = model.encode_record_event(&mut tape, e.snippet_tensor(), e.frame_tensor()).unwrap();
            Tensor::new(tape.shape(v).to_vec(), tape.data(v).to_vec()).unwrap()
        })
        .collect();
    let dec = &model.decoder;
    let together = dec.generate_paragraph(&model.store, &events, 8, MemoryMode::Reset).unwrap();
    for (i, ev) in events.iter().enumerate() {
        let alone = dec
            .generate_paragraph(&model.store, std::slice::from_ref(ev), 8, MemoryMode::Reset)
            .unwrap();
        assert_eq!(alone[0], together[i]);
    }
}
