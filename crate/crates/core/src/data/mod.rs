//! Dataset records, JSONL I/O, vocabulary, synthetic corpora and batching.
//!
//! One video per JSONL line:
//!
//! ```json
//! {"video_id": "v0", "events": [{"start": 0.0, "end": 4.5, "caption": "...",
//!   "snippet_feats": [[[...]]], "frame_embeds": [[...]]}]}
//! ```
//!
//! `snippet_feats` is `L × P × d_v` (a spatial feature grid per snippet) and
//! `frame_embeds` is `L × d_img` (one middle-frame feature per snippet).

mod batch;
mod synth;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{batch, Batch, MaxLens, PaddedEvent, VideoStream};
pub use synth::{split_corpus, synth_corpus, Profile, SynthSpec, VocabSpec};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, N_RESERVED, PAD, UNK};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSample {
    pub start: f64,
    pub end: f64,
    pub caption: String,
    pub snippet_feats: Vec<Vec<Vec<f64>>>,
    pub frame_embeds: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub events: Vec<EventSample>,
}

/// Feature widths of an event: `(L, P, d_v, d_img)`.
pub type FeatureDims = (usize, usize, usize, usize);

impl EventSample {
    pub fn n_snippets(&self) -> usize {
        self.snippet_feats.len()
    }

    /// Checks rectangular, finite feature arrays and ordered timestamps.
    pub fn validate(&self) -> std::result::Result<FeatureDims, String> {
        if !(self.start.is_finite() && self.end.is_finite() && self.start < self.end) {
            return Err(format!("event needs finite start < end, got {} .. {}", self.start, self.end));
        }
        let l = self.snippet_feats.len();
        if l == 0 {
            return Err("event has no snippets".into());
        }
        if self.frame_embeds.len() != l {
            return Err(format!("{} frame embeddings for {l} snippets", self.frame_embeds.len()));
        }
        let p = self.snippet_feats[0].len();
        let dv = self.snippet_feats[0].first().map_or(0, Vec::len);
        let di = self.frame_embeds[0].len();
        if p == 0 || dv == 0 || di == 0 {
            return Err("empty feature extent".into());
        }
        for (i, grid) in self.snippet_feats.iter().enumerate() {
            if grid.len() != p || grid.iter().any(|c| c.len() != dv) {
                return Err(format!("snippet {i} is not {p} × {dv}"));
            }
            if grid.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("snippet {i} has a non-finite feature"));
            }
        }
        for (i, f) in self.frame_embeds.iter().enumerate() {
            if f.len() != di {
                return Err(format!("frame embedding {i} has width {} not {di}", f.len()));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(format!("frame embedding {i} has a non-finite value"));
            }
        }
        Ok((l, p, dv, di))
    }

    /// Backbone map as `[L × P × d_v]`.
    pub fn snippet_tensor(&self) -> Tensor {
        let l = self.snippet_feats.len();
        let p = self.snippet_feats[0].len();
        let dv = self.snippet_feats[0][0].len();
        let data = self.snippet_feats.iter().flatten().flatten().copied().collect();
        Tensor::new(vec![l, p, dv], data).expect("validated snippet grid")
    }

    /// Middle-frame features as `[L × d_img]`.
    pub fn frame_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.frame_embeds).expect("validated frame embeddings")
    }
}

impl VideoRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.events.is_empty() {
            return Err(format!("video `{}` has no events", self.video_id));
        }
        let mut dims: Option<(usize, usize, usize)> = None;
        for (i, ev) in self.events.iter().enumerate() {
            let (_, p, dv, di) = ev.validate().map_err(|e| format!("event {i}: {e}"))?;
            match dims {
                Some(d) if d != (p, dv, di) => {
                    return Err(format!("event {i}: feature dims {:?} differ from {d:?}", (p, dv, di)));
                }
                _ => dims = Some((p, dv, di)),
            }
        }
        if self.events.windows(2).any(|w| w[0].start > w[1].start) {
            return Err(format!("video `{}`: events not ordered by start", self.video_id));
        }
        Ok(())
    }
}

/// Reads and validates one video per line. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<VideoRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: VideoRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub video_id: String,
    pub sentences: Vec<String>,
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
