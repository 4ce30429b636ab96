//! Checkpoint files: a version line followed by one JSON document holding the
//! model config, the vocabulary and every parameter.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::VlCap;
use crate::tensor::Tensor;

pub const MAGIC: &str = "vlcap-ckpt-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    model: ModelConfig,
    vocab: Vocabulary,
    params: Vec<StoredParam>,
}

pub fn save(model: &VlCap, path: &Path) -> Result<()> {
    let stored = Stored {
        model: model.cfg.clone(),
        vocab: model.vocab.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect(),
    };
    let mut text = format!("{MAGIC}\n");
    text.push_str(&serde_json::to_string(&stored)?);
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<VlCap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header line", path.display())))?;
    if header != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: expected header `{MAGIC}`, found `{header}`",
            path.display()
        )));
    }
    let stored: Stored = serde_json::from_str(body)?;
    if stored.model.vocab_size != stored.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "config says {} tokens, stored vocabulary has {}",
            stored.model.vocab_size,
            stored.vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VlCap::new(stored.model, stored.vocab, 0.0, &mut rng)?;
    let tensors = stored
        .params
        .into_iter()
        .map(|p| Ok((p.name, Tensor::new(p.shape, p.data)?)))
        .collect::<Result<Vec<_>>>()?;
    model.store.load_values(tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(model)
}
