//! Language-model training with validation-NDCG early stopping.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio::write_atomic;
use crate::data::{truncate_sequence, SplitDataset};
use crate::eval::ndcg_from_rank;
use crate::generate::{recommend, GenerationError, GenerationRequest, RecommendationList, Strategy};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::optim::Adam;
use crate::tokeniser::Tokenisation;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("item {0} is not in the tokenisation")]
    UnknownItem(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}\n{report}")]
    NonFinite { epoch: usize, batch: usize, report: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub max_seq_items: usize,
    pub seed: u64,
    /// Sequences per gradient work unit; fixes the summation order.
    pub grad_chunk: usize,
    /// Candidates per validation user in multi-token mode.
    pub validation_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            max_epochs: 10_000,
            patience_epochs: 300,
            max_seq_items: 100,
            seed: 0,
            grad_chunk: 8,
            validation_candidates: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be >= 1");
        }
        if self.max_seq_items == 0 || self.grad_chunk == 0 {
            return bad("max_seq_items and grad_chunk must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_ndcg10: f64,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_validation_ndcg10: f64,
    pub epochs_since_best: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<EpochLog>,
}

/// Last `max_items` items, each expanded to its token tuple.
pub fn encode_training_sequence(items: &[usize], tok: &Tokenisation, max_items: usize) -> Result<Vec<u32>, TrainError> {
    let mut out = Vec::with_capacity(max_items.min(items.len()) * tok.tokens_per_item());
    for &item in truncate_sequence(items, max_items) {
        out.extend_from_slice(tok.encode(item).ok_or(TrainError::UnknownItem(item))?);
    }
    Ok(out)
}

/// Mean NDCG@10 over validation users, scoring each with `rank`, which
/// receives the user's training history (validation target held out).
pub fn validation_ndcg10_with<F>(split: &SplitDataset, rank: F) -> Result<f64, GenerationError>
where
    F: Fn(usize, &[usize]) -> Result<RecommendationList, GenerationError> + Sync,
{
    let users = &split.validation_users;
    assert!(!users.is_empty(), "validation set is empty");
    let scores: Vec<f64> = users
        .par_iter()
        .map(|&u| {
            let target = split.validation_target[u].expect("validation user has a target");
            let list = rank(u, &split.train[u])?;
            Ok(ndcg_from_rank(list.rank_of(target), 10))
        })
        .collect::<Result<_, GenerationError>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Validation NDCG@10 of the model: Top-K in one-token mode, sampled
/// multi-token candidates (fixed seed per user) otherwise.
pub fn validation_ndcg10(
    params: &ModelParams,
    split: &SplitDataset,
    tok: &Tokenisation,
    num_candidates: usize,
) -> Result<f64, GenerationError> {
    let strategy = if tok.is_one_token() { Strategy::TopK } else { Strategy::TopKMultiToken };
    validation_ndcg10_with(split, |u, history| {
        let mut req = GenerationRequest::new(history.to_vec(), 10, strategy);
        req.num_candidates = num_candidates.max(10);
        req.seed = u as u64;
        recommend(params, tok, &req)
    })
}

/// Where training writes its per-epoch log and best checkpoint.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains from the standard GPT-2 initialisation with model-based validation.
pub fn train(
    split: &SplitDataset,
    tok: &Tokenisation,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    outputs: TrainOutputs<'_>,
) -> Result<TrainState, TrainError> {
    let init = ModelParams::init(mcfg, tcfg.seed);
    let candidates = tcfg.validation_candidates;
    train_with(split, tok, init, tcfg, outputs, |p| Ok(validation_ndcg10(p, split, tok, candidates)?))
}

/// Training loop with a pluggable validation metric.
pub fn train_with<V>(
    split: &SplitDataset,
    tok: &Tokenisation,
    init: ModelParams,
    tcfg: &TrainConfig,
    mut outputs: TrainOutputs<'_>,
    mut validate: V,
) -> Result<TrainState, TrainError>
where
    V: FnMut(&ModelParams) -> Result<f64, TrainError>,
{
    tcfg.validate()?;
    let mcfg = init.config().clone();
    mcfg.validate()?;
    let t = tok.tokens_per_item();
    if mcfg.max_positions < tcfg.max_seq_items * t {
        return Err(TrainError::Config(format!(
            "max_positions {} < max_seq_items {} x tokens_per_item {t}",
            mcfg.max_positions, tcfg.max_seq_items
        )));
    }
    if mcfg.vocab_size != tok.vocab_size() {
        return Err(TrainError::Config(format!(
            "model vocabulary {} != tokenisation vocabulary {}",
            mcfg.vocab_size,
            tok.vocab_size()
        )));
    }

    let sequences: Vec<(usize, Vec<u32>)> = split
        .train
        .iter()
        .enumerate()
        .map(|(u, items)| Ok((u, encode_training_sequence(items, tok, tcfg.max_seq_items)?)))
        .collect::<Result<Vec<_>, TrainError>>()?
        .into_iter()
        .filter(|(_, s)| s.len() >= 2)
        .collect();
    if sequences.is_empty() {
        return Err(TrainError::Config("no training sequence has two or more tokens".into()));
    }

    let mut params = init;
    let mut adam = Adam::new(params.num_parameters(), tcfg.learning_rate, tcfg.adam_betas, tcfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut best_params = params.clone();
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let wave = rayon::current_num_threads().max(1);

    if let Some(log) = outputs.log.as_deref_mut() {
        writeln!(log, "epoch\tmean_loss\tvalidation_ndcg10\tepochs_since_best")?;
    }

    let mut epoch = 0;
    while epoch < tcfg.max_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let predicted: usize = batch.iter().map(|&i| sequences[i].1.len() - 1).sum();
            let scale = 1.0 / predicted as f64;
            let chunks: Vec<&[usize]> = batch.chunks(tcfg.grad_chunk).collect();
            let mut grads = ModelParams::zeros(&mcfg);
            let mut batch_loss = 0.0;
            for group in chunks.chunks(wave) {
                let parts: Vec<(f64, ModelParams)> = group
                    .par_iter()
                    .map(|chunk| {
                        let mut g = ModelParams::zeros(&mcfg);
                        let mut loss = 0.0;
                        for &i in chunk.iter() {
                            let (user, seq) = &sequences[i];
                            let mut drop_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
                            drop_rng.set_stream(((epoch as u64) << 32) | *user as u64);
                            loss += params.accumulate_lm_gradient(seq, scale, &mut g, Some(&mut drop_rng))?;
                        }
                        Ok((loss, g))
                    })
                    .collect::<Result<_, ModelError>>()?;
                for (loss, g) in parts {
                    batch_loss += loss;
                    grads.add_assign(&g);
                }
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                let mut report = String::from("parameter norms:\n");
                for (name, norm) in params.norms() {
                    report.push_str(&format!("  {name}\t{norm:.6e}\n"));
                }
                return Err(TrainError::NonFinite { epoch, batch: b, report });
            }
            adam.update(&mut params.data, &grads.data);
            epoch_loss += batch_loss;
            epoch_tokens += predicted;
        }
        let mean_loss = epoch_loss / epoch_tokens as f64;

        let metric = validate(&params)?;
        // ties keep the earlier checkpoint
        if metric > best {
            best = metric;
            best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
            if let Some(path) = &outputs.checkpoint {
                let mut buf = Vec::new();
                best_params.write_checkpoint(&mut buf)?;
                write_atomic(path, &buf)?;
            }
        } else {
            since_best += 1;
        }
        log::info!("epoch {epoch}: loss {mean_loss:.5}, val NDCG@10 {metric:.5}, best {best:.5} @ {best_epoch}");
        if let Some(log) = outputs.log.as_deref_mut() {
            writeln!(log, "{epoch}\t{mean_loss:.6}\t{metric:.6}\t{since_best}")?;
            log.flush()?;
        }
        history.push(EpochLog {
            epoch,
            mean_loss,
            validation_ndcg10: metric,
            epochs_since_best: since_best,
        });
        if since_best >= tcfg.patience_epochs {
            break;
        }
    }

    Ok(TrainState {
        params: best_params,
        optimizer: adam,
        epoch,
        best_epoch,
        best_validation_ndcg10: best,
        epochs_since_best: since_best,
        best_checkpoint: outputs.checkpoint,
        history,
    })
}
