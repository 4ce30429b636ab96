use serde::{Deserialize, Serialize};

use super::{VideoRecord, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxLens {
    /// Snippets per event.
    pub video: usize,
    /// Text positions per event, BOS and EOS included.
    pub text: usize,
}

/// One event right-padded to the batch's widest event.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedEvent {
    /// `[L_pad × P × d_v]`, zero rows past the real snippets.
    pub snippets: Tensor,
    /// `[L_pad × d_img]`.
    pub frames: Tensor,
    pub video_mask: Vec<bool>,
    /// `[BOS, words..., EOS, PAD...]`.
    pub tokens: Vec<u32>,
    pub text_mask: Vec<bool>,
    pub caption: String,
}

impl PaddedEvent {
    pub fn n_snippets(&self) -> usize {
        self.video_mask.iter().filter(|&&m| m).count()
    }

    pub fn n_tokens(&self) -> usize {
        self.text_mask.iter().filter(|&&m| m).count()
    }

    /// Unpadded copy.
    pub fn trimmed(&self) -> PaddedEvent {
        let (l, t) = (self.n_snippets(), self.n_tokens());
        let s = self.snippets.shape();
        let cell = s[1] * s[2];
        let di = self.frames.shape()[1];
        PaddedEvent {
            snippets: Tensor::new(vec![l, s[1], s[2]], self.snippets.data()[..l * cell].to_vec()).expect("prefix"),
            frames: Tensor::new(vec![l, di], self.frames.data()[..l * di].to_vec()).expect("prefix"),
            video_mask: vec![true; l],
            tokens: self.tokens[..t].to_vec(),
            text_mask: vec![true; t],
            caption: self.caption.clone(),
        }
    }
}

/// All events of one video, in order. Memory flows only within a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoStream {
    pub video_id: String,
    pub events: Vec<PaddedEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub streams: Vec<VideoStream>,
}

impl Batch {
    pub fn n_events(&self) -> usize {
        self.streams.iter().map(|s| s.events.len()).sum()
    }
}

/// Groups `batch_size` consecutive videos per batch and pads every event in
/// a batch to the batch's longest snippet run and caption.
pub fn batch(records: &[VideoRecord], vocab: &Vocabulary, batch_size: usize, max: MaxLens) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be positive".into()));
    }
    let mut out = Vec::with_capacity(records.len().div_ceil(batch_size));
    for group in records.chunks(batch_size) {
        let mut encoded = Vec::new();
        let (mut lmax, mut tmax) = (1, 2);
        for rec in group {
            for ev in &rec.events {
                let ids = vocab.encode_framed(&ev.caption);
                let l = ev.n_snippets();
                if l > max.video {
                    return Err(Error::Overlength { what: "event snippets", len: l, limit: max.video });
                }
                if ids.len() > max.text {
                    return Err(Error::Overlength { what: "caption tokens", len: ids.len(), limit: max.text });
                }
                lmax = lmax.max(l);
                tmax = tmax.max(ids.len());
                encoded.push(ids);
            }
        }
        let mut ids = encoded.into_iter();
        let streams = group
            .iter()
            .map(|rec| VideoStream {
                video_id: rec.video_id.clone(),
                events: rec
                    .events
                    .iter()
                    .map(|ev| {
                        let tokens = ids.next().expect("one encoding per event");
                        pad_event(ev, tokens, lmax, tmax)
                    })
                    .collect(),
            })
            .collect();
        out.push(Batch { streams });
    }
    Ok(out)
}

fn pad_event(ev: &super::EventSample, mut tokens: Vec<u32>, lmax: usize, tmax: usize) -> PaddedEvent {
    let snip = ev.snippet_tensor();
    let frames = ev.frame_tensor();
    let l = snip.shape()[0];
    let (p, dv, di) = (snip.shape()[1], snip.shape()[2], frames.shape()[1]);
    let mut sd = snip.into_data();
    sd.resize(lmax * p * dv, 0.0);
    let mut fd = frames.into_data();
    fd.resize(lmax * di, 0.0);
    let t = tokens.len();
    tokens.resize(tmax, PAD);
    PaddedEvent {
        snippets: Tensor::new(vec![lmax, p, dv], sd).expect("padded grid"),
        frames: Tensor::new(vec![lmax, di], fd).expect("padded frames"),
        video_mask: (0..lmax).map(|i| i < l).collect(),
        tokens,
        text_mask: (0..tmax).map(|i| i < t).collect(),
        caption: ev.caption.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, VocabSpec};

    const MAX: MaxLens = MaxLens { video: 12, text: 16 };

    #[test]
    fn single_video_batch_masks_real_positions() {
        let recs = synth_corpus(1, 1, 1.0, VocabSpec::default());
        let vocab = Vocabulary::build(&recs, 1);
        let b = batch(&recs, &vocab, 1, MAX).unwrap();
        let ev = &b[0].streams[0].events[0];
        assert!(ev.video_mask.iter().all(|&m| m));
        assert!(ev.text_mask.iter().all(|&m| m));
        assert_eq!(ev.tokens.len(), vocab.encode_framed(&recs[0].events[0].caption).len());
    }

    #[test]
    fn streams_keep_video_order() {
        let recs = synth_corpus(2, 7, 3.65, VocabSpec::default());
        let vocab = Vocabulary::build(&recs, 1);
        let batches = batch(&recs, &vocab, 3, MAX).unwrap();
        assert_eq!(batches.len(), 3);
        let streams: Vec<&VideoStream> = batches.iter().flat_map(|b| &b.streams).collect();
        for (s, r) in streams.iter().zip(&recs) {
            assert_eq!(s.video_id, r.video_id);
            let caps: Vec<&str> = s.events.iter().map(|e| e.caption.as_str()).collect();
            let want: Vec<&str> = r.events.iter().map(|e| e.caption.as_str()).collect();
            assert_eq!(caps, want);
        }
    }

    #[test]
    fn padding_is_masked_and_trim_recovers() {
        let recs = synth_corpus(5, 4, 3.0, VocabSpec::default());
        let vocab = Vocabulary::build(&recs, 1);
        let b = &batch(&recs, &vocab, 4, MAX).unwrap()[0];
        for (s, r) in b.streams.iter().zip(&recs) {
            for (pe, ev) in s.events.iter().zip(&r.events) {
                let t = pe.trimmed();
                assert_eq!(t.snippets, ev.snippet_tensor());
                assert_eq!(t.frames, ev.frame_tensor());
                assert!(pe.tokens[pe.n_tokens()..].iter().all(|&x| x == PAD));
            }
        }
    }

    #[test]
    fn overlength_is_an_error() {
        let recs = synth_corpus(1, 2, 2.0, VocabSpec::default());
        let vocab = Vocabulary::build(&recs, 1);
        let err = batch(&recs, &vocab, 2, MaxLens { video: 1, text: 16 }).unwrap_err();
        assert!(matches!(err, Error::Overlength { .. }));
        let err = batch(&recs, &vocab, 2, MaxLens { video: 12, text: 4 }).unwrap_err();
        assert!(matches!(err, Error::Overlength { .. }));
    }
}
