//! Checkpoint directories:
//!
//! ```text
//! model.bin   current parameters
//! best.bin    parameters of the best validated step, if any
//! optim.bin   Adam moments and the embedding indices
//! state.json  counters, RNG, metrics, best record, pseudo pairs, config
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::EmbeddingIndex;
use crate::error::{Error, Result};
use crate::kernel::checkpoint::{load_params, read_tensors, save_params, write_tensors};
use crate::kernel::{AdamState, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::text::{CorpusBundle, Sentence};
use crate::train::config::TrainConfig;
use crate::train::metrics::MetricsRow;
use crate::train::trainer::{BestRecord, Trainer};

pub const MODEL_FILE: &str = "model.bin";
pub const BEST_FILE: &str = "best.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const STATE_FILE: &str = "state.json";

type PairIds = Vec<(Vec<usize>, Vec<usize>)>;

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    vocab_size: usize,
    rng: ChaCha8Rng,
    adam_tr_step: u64,
    adam_r_step: u64,
    index_src_stamp: Option<u64>,
    index_tgt_stamp: Option<u64>,
    metrics: Vec<MetricsRow>,
    best: Option<BestRecord>,
    pseudo: Option<[PairIds; 2]>,
    config: TrainConfig,
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn moments<S: Scalar>(prefix: &str, adam: &AdamState<S>, store: &ParamStore<S>, out: &mut Vec<(String, Tensor<S>)>) {
    for &id in adam.ids() {
        let (m, v) = adam.moments(id).expect("managed id");
        out.push((format!("{prefix}.m.{}", store.name(id)), m.clone()));
        out.push((format!("{prefix}.v.{}", store.name(id)), v.clone()));
    }
}

fn restore<S: Scalar>(
    prefix: &str,
    step: u64,
    adam: &mut AdamState<S>,
    store: &ParamStore<S>,
    tensors: &mut std::collections::HashMap<String, Tensor<S>>,
    path: &Path,
) -> Result<()> {
    let mut take = |key: String| {
        tensors.remove(&key).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing tensor {key}"),
        })
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for &id in adam.ids() {
        m.push(take(format!("{prefix}.m.{}", store.name(id)))?);
        v.push(take(format!("{prefix}.v.{}", store.name(id)))?);
    }
    adam.restore(step, m, v)
}

fn to_ids(pairs: &[(Sentence, Sentence)]) -> PairIds {
    pairs.iter().map(|(a, b)| (a.ids().to_vec(), b.ids().to_vec())).collect()
}

fn from_ids(pairs: PairIds) -> Result<Vec<(Sentence, Sentence)>> {
    pairs
        .into_iter()
        .map(|(a, b)| Ok((Sentence::new(a)?, Sentence::new(b)?)))
        .collect()
}

impl<S: Scalar> Trainer<S> {
    /// Writes everything needed to continue training bit-exactly.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let st = &self.state;
        save_params(&self.model.store, &dir.join(MODEL_FILE))?;
        match &st.best_params {
            Some(p) => save_params(p, &dir.join(BEST_FILE))?,
            None if dir.join(BEST_FILE).exists() => std::fs::remove_file(dir.join(BEST_FILE))?,
            None => {}
        }
        let mut tensors = Vec::new();
        moments("tr", &st.adam_tr, &self.model.store, &mut tensors);
        moments("r", &st.adam_r, &self.model.store, &mut tensors);
        if let Some(ix) = &st.index_src {
            tensors.push(("index.src".into(), ix.rows().clone()));
        }
        if let Some(ix) = &st.index_tgt {
            tensors.push(("index.tgt".into(), ix.rows().clone()));
        }
        let refs: Vec<(String, &Tensor<S>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_tensors(&dir.join(OPTIM_FILE), &refs)?;
        let file = StateFile {
            step: st.step,
            vocab_size: self.model.config.vocab_size,
            rng: st.rng.clone(),
            adam_tr_step: st.adam_tr.step(),
            adam_r_step: st.adam_r.step(),
            index_src_stamp: st.index_src.as_ref().map(|i| i.stamp),
            index_tgt_stamp: st.index_tgt.as_ref().map(|i| i.stamp),
            metrics: st.metrics.clone(),
            best: st.best.clone(),
            pseudo: st.pseudo.as_ref().map(|[a, b]| [to_ids(a), to_ids(b)]),
            config: self.config.clone(),
        };
        let path = dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&file).map_err(|e| json_err(&path, e))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Reads the training config stored in a checkpoint.
    pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
        let path = dir.join(STATE_FILE);
        let file: StateFile = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| json_err(&path, e))?;
        Ok(file.config)
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output.
    pub fn resume(dir: &Path, data: CorpusBundle) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let file: StateFile = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| json_err(&path, e))?;
        if file.vocab_size != data.vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "checkpoint vocabulary has {} entries, corpus has {}",
                file.vocab_size,
                data.vocab.len()
            )));
        }
        let mut t = Trainer::new(file.config, data)?;
        t.model.load(&dir.join(MODEL_FILE))?;
        if dir.join(BEST_FILE).exists() {
            let mut best = t.model.store.clone();
            load_params(&mut best, &dir.join(BEST_FILE))?;
            t.state.best_params = Some(best);
        }
        let optim = dir.join(OPTIM_FILE);
        let mut tensors: std::collections::HashMap<String, Tensor<S>> = read_tensors(&optim)?.into_iter().collect();
        restore("tr", file.adam_tr_step, &mut t.state.adam_tr, &t.model.store, &mut tensors, &optim)?;
        restore("r", file.adam_r_step, &mut t.state.adam_r, &t.model.store, &mut tensors, &optim)?;
        let mut index = |key: &str, stamp: Option<u64>| -> Result<Option<EmbeddingIndex<S>>> {
            match (tensors.remove(key), stamp) {
                (Some(rows), Some(stamp)) => Ok(Some(EmbeddingIndex::from_rows(rows, stamp)?)),
                _ => Ok(None),
            }
        };
        t.state.index_src = index("index.src", file.index_src_stamp)?;
        t.state.index_tgt = index("index.tgt", file.index_tgt_stamp)?;
        t.state.step = file.step;
        t.state.rng = file.rng;
        t.state.metrics = file.metrics;
        t.state.best = file.best;
        t.state.pseudo = match file.pseudo {
            Some([a, b]) => Some([from_ids(a)?, from_ids(b)?]),
            None => None,
        };
        Ok(t)
    }
}

/// Loads only the weights of a checkpoint, preferring the best validated ones.
pub fn load_checkpoint_params<S: Scalar>(store: &mut ParamStore<S>, dir: &Path, best: bool) -> Result<()> {
    let best_path = dir.join(BEST_FILE);
    if best && best_path.exists() {
        load_params(store, &best_path)
    } else {
        load_params(store, &dir.join(MODEL_FILE))
    }
}
