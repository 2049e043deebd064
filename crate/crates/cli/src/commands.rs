use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use gptrec::binio::{sha256_hex, write_atomic};
use gptrec::data::{leave_one_out_split, parse_interactions, DataError, InteractionDataset, SplitDataset};
use gptrec::eval::{cutoffs_to_csv, cutoffs_to_text, evaluate as run_evaluation, sweep_cutoffs, EvalOptions};
use gptrec::generate::{check_legal, recommend as generate, GenerationRequest, Strategy};
use gptrec::model::ModelParams;
use gptrec::svd::{truncated_svd_sparse, InteractionMatrix, SvdOptions};
use gptrec::tokeniser::{
    memory_report as build_memory_report, reference_memory_report, svd_tokenise, Tokenisation, REFERENCE_CONFIGS,
    REFERENCE_DATASETS,
};
use gptrec::train::{train as run_training, TrainOutputs};
use serde_json::json;

use crate::config::{RunConfig, TokenModeSetting};
use crate::{manifest, CliError, CliResult};

// stdout may be a closed pipe (`| head`); that is not an error
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

const DATASET: &str = "dataset.bin";
const DATASET_META: &str = "dataset.json";
const SUMMARY: &str = "summary.txt";
const TOKENISATION: &str = "tokenisation.bin";
const ITEM_FACTORS: &str = "item_factors.bin";
const CHECKPOINT: &str = "model.ckpt";
const TRAIN_LOG: &str = "train_log.tsv";

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn artifact(cfg: &RunConfig, name: &str, producer: &str) -> CliResult<PathBuf> {
    let path = cfg.out.join(name);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; run `gptrec {producer}` with the same --out first",
            path.display()
        )));
    }
    Ok(path)
}

fn load_dataset(cfg: &RunConfig) -> CliResult<InteractionDataset> {
    let path = artifact(cfg, DATASET, "prepare")?;
    Ok(InteractionDataset::read_cache(File::open(&path)?).with_context(|| format!("reading {}", path.display()))?)
}

fn make_split(cfg: &RunConfig, ds: &InteractionDataset) -> CliResult<SplitDataset> {
    leave_one_out_split(ds, cfg.data.validation_users, cfg.data.split_seed).map_err(|e| match e {
        DataError::TooManyValidationUsers { .. } | DataError::SequenceTooShort { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.into()),
    })
}

fn load_tokenisation(cfg: &RunConfig) -> CliResult<Tokenisation> {
    let path = artifact(cfg, TOKENISATION, "tokenise")?;
    Ok(Tokenisation::read(File::open(&path)?).with_context(|| format!("reading {}", path.display()))?)
}

fn load_model(cfg: &RunConfig, tok: &Tokenisation) -> CliResult<ModelParams> {
    let path = artifact(cfg, CHECKPOINT, "train")?;
    let params = ModelParams::read_checkpoint(File::open(&path)?).with_context(|| format!("reading {}", path.display()))?;
    if params.config().vocab_size != tok.vocab_size() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary {} does not match tokenisation vocabulary {}",
            params.config().vocab_size,
            tok.vocab_size()
        )));
    }
    Ok(params)
}

fn legal(strategy: Strategy, tok: &Tokenisation) -> CliResult {
    check_legal(strategy, tok).map_err(|e| {
        CliError::Usage(format!(
            "{e}; the tokenisation in this run is {} (t = {})",
            if tok.is_one_token() { "one-token-per-item" } else { "multi-token" },
            tok.tokens_per_item()
        ))
    })
}

pub fn prepare(cfg: &RunConfig, force: bool) -> CliResult {
    let input = cfg.input_path()?;
    if !input.is_file() {
        return Err(CliError::Usage(format!("input file not found: {}", input.display())));
    }
    let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
    let input_sha = sha256_hex(&bytes);
    let opts = cfg.data.parse_options();
    let dir = out_dir(cfg)?;
    let meta_path = dir.join(DATASET_META);

    if !force && dir.join(DATASET).exists() {
        if let Ok(meta) = std::fs::read_to_string(&meta_path) {
            let meta: serde_json::Value = serde_json::from_str(&meta)?;
            if meta["input_sha256"] == json!(input_sha)
                && meta["parse_options"] == serde_json::to_value(&opts)?
                && meta["format"] == serde_json::to_value(cfg.data.format)?
            {
                outln!("dataset cache {} is up to date; nothing to do", dir.join(DATASET).display());
                out!("{}", std::fs::read_to_string(dir.join(SUMMARY)).unwrap_or_default());
                return Ok(());
            }
        }
    }

    let (ds, report) = parse_interactions(&bytes[..], cfg.data.format, &opts)
        .with_context(|| format!("parsing {}", input.display()))?;
    for (line, reason) in report.skipped_lines.iter().take(10) {
        log::warn!("skipped line {line}: {reason}");
    }
    let mut cache = Vec::new();
    ds.write_cache(&mut cache)?;
    write_atomic(&dir.join(DATASET), &cache)?;
    let summary = ds.summary();
    write_atomic(&dir.join(SUMMARY), summary.to_string().as_bytes())?;
    let meta = json!({
        "input": input,
        "input_sha256": input_sha,
        "format": cfg.data.format,
        "parse_options": opts,
        "records": report.records,
        "dropped_users": report.dropped_users,
        "dropped_items": report.dropped_items,
        "dropped_interactions": report.dropped_interactions,
        "skipped_lines": report.skipped_lines.len(),
        "num_users": summary.num_users,
        "num_items": summary.num_items,
        "num_interactions": summary.num_interactions,
        "median_sequence_length": summary.median_sequence_length,
    });
    write_atomic(&meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    out!("{summary}");
    manifest::record(cfg, "prepare", &[DATASET, DATASET_META, SUMMARY])
}

pub fn tokenise(cfg: &RunConfig) -> CliResult {
    let ds = load_dataset(cfg)?;
    let split = make_split(cfg, &ds)?;
    let dir = out_dir(cfg)?;
    let n = ds.num_items();
    let mut artifacts = vec![TOKENISATION, "memory_report.txt", "memory_report.csv"];
    let tok = match cfg.tokeniser.mode {
        TokenModeSetting::OneToken => Tokenisation::one_token_per_item(n),
        TokenModeSetting::MultiToken => {
            let tc = cfg.tokeniser.tokeniser_config();
            let matrix = InteractionMatrix::from_split(&split);
            let opts = SvdOptions {
                oversampling: cfg.tokeniser.svd_oversampling,
                power_iterations: cfg.tokeniser.svd_power_iterations,
            };
            let factors = truncated_svd_sparse(&matrix, tc.tokens_per_item, cfg.tokeniser.svd_seed, opts)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            if factors.rank_deficient {
                log::warn!("interaction matrix has rank below t = {}", tc.tokens_per_item);
            }
            let mut buf = Vec::new();
            factors.write_item_factors(&mut buf, (matrix.rows, matrix.cols))?;
            write_atomic(&dir.join(ITEM_FACTORS), &buf)?;
            artifacts.push(ITEM_FACTORS);
            let tok = svd_tokenise(&factors, &tc)?;
            if tok.reassigned > 0 {
                log::warn!("{} items moved to the nearest free tuple", tok.reassigned);
            }
            tok
        }
    };
    let mut buf = Vec::new();
    tok.write(&mut buf)?;
    write_atomic(&dir.join(TOKENISATION), &buf)?;

    let (t, v) = if tok.is_one_token() { (1, n) } else { (tok.tokens_per_item(), tok.values_per_token()) };
    let name = dataset_name(cfg);
    let report = build_memory_report(&[(name, n as u64)], cfg.model.embed_dim as u64, 4, &[(t as u64, v as u64)]);
    write_atomic(&dir.join("memory_report.txt"), report.to_text().as_bytes())?;
    write_atomic(&dir.join("memory_report.csv"), report.to_csv().as_bytes())?;
    outln!(
        "tokenisation: {} items, t = {t}, v = {v}, vocabulary {}, reassigned {}",
        n,
        tok.vocab_size(),
        tok.reassigned
    );
    out!("{}", report.to_text());
    manifest::record(cfg, "tokenise", &artifacts)
}

fn dataset_name(cfg: &RunConfig) -> String {
    cfg.data
        .input
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn train(cfg: &RunConfig) -> CliResult {
    let ds = load_dataset(cfg)?;
    let split = make_split(cfg, &ds)?;
    let tok = load_tokenisation(cfg)?;
    let mcfg = cfg
        .model
        .model_config(tok.vocab_size(), cfg.train.max_seq_items * tok.tokens_per_item());
    mcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if split.validation_users.is_empty() {
        return Err(CliError::Usage("data.validation_users must be at least 1 for early stopping".into()));
    }
    let dir = out_dir(cfg)?;
    let ckpt = dir.join(CHECKPOINT);
    let mut log = BufWriter::new(File::create(dir.join(TRAIN_LOG))?);
    let state = run_training(
        &split,
        &tok,
        &mcfg,
        &cfg.train,
        TrainOutputs {
            log: Some(&mut log),
            checkpoint: Some(ckpt.clone()),
        },
    )?;
    log.flush()?;
    let mut buf = Vec::new();
    state.params.write_checkpoint(&mut buf)?;
    write_atomic(&ckpt, &buf)?;
    let summary = json!({
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_validation_ndcg10": state.best_validation_ndcg10,
        "num_parameters": state.params.num_parameters(),
        "model": mcfg,
    });
    write_atomic(&dir.join("train_summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    outln!(
        "trained {} epochs; best validation NDCG@10 {:.4} at epoch {}",
        state.epoch, state.best_validation_ndcg10, state.best_epoch
    );
    manifest::record(cfg, "train", &[CHECKPOINT, TRAIN_LOG, "train_summary.json", TOKENISATION, DATASET])
}

pub fn recommend(cfg: &RunConfig, users: &[u64], output: Option<&Path>) -> CliResult {
    let g = &cfg.generation;
    let tok = load_tokenisation(cfg)?;
    legal(g.strategy, &tok)?;
    let ds = load_dataset(cfg)?;
    let index = ds.user_index();
    let dense: Vec<usize> = if users.is_empty() {
        (0..ds.num_users()).collect()
    } else {
        users
            .iter()
            .map(|u| index.get(u).copied().ok_or_else(|| CliError::Usage(format!("unknown user id {u}"))))
            .collect::<CliResult<_>>()?
    };
    let params = load_model(cfg, &tok)?;
    let lists = {
        use rayon::prelude::*;
        dense
            .par_iter()
            .map(|&u| {
                let req = GenerationRequest {
                    history: ds.sequences[u].clone(),
                    k: g.k,
                    strategy: g.strategy,
                    num_candidates: g.num_candidates,
                    exclude_history: g.exclude_history,
                    seed: g.seed.wrapping_add(u as u64),
                    mask_positions: g.mask_positions,
                };
                generate(&params, &tok, &req)
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    writeln!(sink, "user\trank\titem\tscore")?;
    for (&u, list) in dense.iter().zip(&lists) {
        for (rank, (item, score)) in list.entries.iter().enumerate() {
            writeln!(sink, "{}\t{}\t{}\t{score:.6}", ds.user_ids[u], rank + 1, ds.item_ids[*item])?;
        }
    }
    sink.flush()?;
    drop(sink);
    manifest::record(cfg, "recommend", &[CHECKPOINT, TOKENISATION])
}

pub fn evaluate(cfg: &RunConfig) -> CliResult {
    let g = &cfg.generation;
    let tok = load_tokenisation(cfg)?;
    legal(g.strategy, &tok)?;
    let ds = load_dataset(cfg)?;
    let split = make_split(cfg, &ds)?;
    let params = load_model(cfg, &tok)?;
    let opts = EvalOptions {
        num_candidates: g.num_candidates,
        exclude_history: g.exclude_history,
        mask_positions: g.mask_positions,
        seed: g.seed,
    };
    let result = run_evaluation(&params, &tok, &split, g.strategy, &g.ks, &opts)?;
    let dir = out_dir(cfg)?;
    let stem = format!("eval_{}", g.strategy);
    let (txt, csv, tsv) = (format!("{stem}.txt"), format!("{stem}.csv"), format!("{stem}_users.tsv"));
    write_atomic(&dir.join(&txt), result.to_text().as_bytes())?;
    write_atomic(&dir.join(&csv), result.to_csv().as_bytes())?;
    write_atomic(&dir.join(&tsv), result.per_user_tsv().as_bytes())?;
    let shortfall: usize = result.per_user.iter().map(|u| u.shortfall).sum();
    if shortfall > 0 {
        log::warn!("{shortfall} list slots unfilled across all users");
    }
    out!("{}", result.to_text());
    manifest::record(cfg, "evaluate", &[&txt, &csv, &tsv, CHECKPOINT, TOKENISATION])
}

pub fn sweep(cfg: &RunConfig) -> CliResult {
    let tok = load_tokenisation(cfg)?;
    legal(Strategy::NextK, &tok)?;
    let ds = load_dataset(cfg)?;
    let split = make_split(cfg, &ds)?;
    let params = load_model(cfg, &tok)?;
    let rows = sweep_cutoffs(&params, &tok, &split, cfg.generation.sweep_max_k, cfg.generation.exclude_history)?;
    let dir = out_dir(cfg)?;
    write_atomic(&dir.join("sweep.txt"), cutoffs_to_text(&rows).as_bytes())?;
    write_atomic(&dir.join("sweep.csv"), cutoffs_to_csv(&rows).as_bytes())?;
    out!("{}", cutoffs_to_text(&rows));
    manifest::record(cfg, "sweep", &["sweep.txt", "sweep.csv", CHECKPOINT])
}

pub fn memory_report(datasets: &[String], configs: &[String], embed_dim: u64, bytes_per_value: u64, csv: bool) -> CliResult {
    let report = if datasets.is_empty() && configs.is_empty() && embed_dim == 256 && bytes_per_value == 4 {
        reference_memory_report()
    } else {
        let ds: Vec<(String, u64)> = if datasets.is_empty() {
            REFERENCE_DATASETS.iter().map(|&(n, i)| (n.to_string(), i)).collect()
        } else {
            datasets
                .iter()
                .map(|s| {
                    let (name, items) = s
                        .split_once('=')
                        .ok_or_else(|| CliError::Usage(format!("--dataset expects NAME=ITEMS, got `{s}`")))?;
                    let items = items
                        .parse()
                        .map_err(|_| CliError::Usage(format!("bad item count in `{s}`")))?;
                    Ok((name.to_string(), items))
                })
                .collect::<CliResult<_>>()?
        };
        let tv: Vec<(u64, u64)> = if configs.is_empty() {
            REFERENCE_CONFIGS.to_vec()
        } else {
            configs
                .iter()
                .map(|s| {
                    let parsed = s.split_once(':').and_then(|(t, v)| Some((t.parse().ok()?, v.parse().ok()?)));
                    parsed.ok_or_else(|| CliError::Usage(format!("--tv expects T:V, got `{s}`")))
                })
                .collect::<CliResult<_>>()?
        };
        build_memory_report(&ds, embed_dim, bytes_per_value, &tv)
    };
    out!("{}", if csv { report.to_csv() } else { report.to_text() });
    Ok(())
}
