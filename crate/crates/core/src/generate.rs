//! Recommendation generation: Top-K over one-token scores, Top-K over
//! sampled multi-token candidates, and greedy Next-K.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{log_softmax, ModelError, ModelParams};
use crate::tokeniser::Tokenisation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TopK,
    TopKMultiToken,
    NextK,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::TopK => "top_k",
            Strategy::TopKMultiToken => "top_k_multi_token",
            Strategy::NextK => "next_k",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "top_k" => Ok(Strategy::TopK),
            "top_k_multi_token" => Ok(Strategy::TopKMultiToken),
            "next_k" => Ok(Strategy::NextK),
            _ => Err(format!("unknown strategy `{s}` (top_k, top_k_multi_token, next_k)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("empty history: nothing to condition on")]
    EmptyHistory,
    #[error("K must be at least 1")]
    ZeroK,
    #[error("num_candidates ({candidates}) must be at least K ({k})")]
    TooFewCandidates { candidates: usize, k: usize },
    #[error("strategy {strategy} needs {needs} tokenisation")]
    IllegalMode { strategy: Strategy, needs: &'static str },
    #[error("item {0} is not in the catalogue")]
    UnknownItem(usize),
    #[error("model vocabulary {model} does not match tokenisation vocabulary {tok}")]
    VocabMismatch { model: usize, tok: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub history: Vec<usize>,
    pub k: usize,
    pub strategy: Strategy,
    pub num_candidates: usize,
    pub exclude_history: bool,
    pub seed: u64,
    /// Restrict sampled token i of a tuple to the i-th value range.
    pub mask_positions: bool,
}

impl GenerationRequest {
    pub fn new(history: Vec<usize>, k: usize, strategy: Strategy) -> Self {
        GenerationRequest {
            history,
            k,
            strategy,
            num_candidates: 50,
            exclude_history: true,
            seed: 0,
            mask_positions: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecommendationList {
    /// (item, score), best first. Top-K scores never increase down the
    /// list; Next-K scores are each step's conditional probability.
    pub entries: Vec<(usize, f64)>,
    /// How many of the requested K slots could not be filled.
    pub shortfall: usize,
}

impl RecommendationList {
    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.entries.iter().position(|&(i, _)| i == item).map(|p| p + 1)
    }
}

/// Rejects (strategy, tokenisation) pairs that have no defined behaviour.
pub fn check_legal(strategy: Strategy, tok: &Tokenisation) -> Result<(), GenerationError> {
    match strategy {
        Strategy::TopK | Strategy::NextK if !tok.is_one_token() => Err(GenerationError::IllegalMode {
            strategy,
            needs: "one-token-per-item",
        }),
        _ => Ok(()),
    }
}

fn check_request(params: &ModelParams, tok: &Tokenisation, req: &GenerationRequest) -> Result<(), GenerationError> {
    check_legal(req.strategy, tok)?;
    if req.k == 0 {
        return Err(GenerationError::ZeroK);
    }
    if req.history.is_empty() {
        return Err(GenerationError::EmptyHistory);
    }
    if let Some(&bad) = req.history.iter().find(|&&i| i >= tok.num_items()) {
        return Err(GenerationError::UnknownItem(bad));
    }
    if params.config().vocab_size != tok.vocab_size() {
        return Err(GenerationError::VocabMismatch {
            model: params.config().vocab_size,
            tok: tok.vocab_size(),
        });
    }
    Ok(())
}

/// Encodes the most recent items of `history` that fit in the model's
/// position budget, leaving room for `extra` further tokens.
pub fn context_tokens(tok: &Tokenisation, history: &[usize], max_positions: usize, extra: usize) -> Vec<u32> {
    let t = tok.tokens_per_item();
    let max_items = max_positions.saturating_sub(extra) / t;
    let start = history.len().saturating_sub(max_items);
    history[start..]
        .iter()
        .flat_map(|&i| tok.encode(i).expect("item checked against catalogue").iter().copied())
        .collect()
}

/// Top `k` of (item, score) pairs: score descending, lower item id first on
/// ties, `-inf` entries dropped.
pub fn rank_scores(scores: impl IntoIterator<Item = (usize, f64)>, k: usize) -> RecommendationList {
    let mut all: Vec<(usize, f64)> = scores.into_iter().filter(|(_, s)| *s > f64::NEG_INFINITY).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    RecommendationList {
        shortfall: k - all.len(),
        entries: all,
    }
}

/// Scores every item by the next-token probability after the history.
pub fn top_k_recommend(
    params: &ModelParams,
    tok: &Tokenisation,
    req: &GenerationRequest,
) -> Result<RecommendationList, GenerationError> {
    check_request(params, tok, req)?;
    if req.strategy != Strategy::TopK {
        return Err(GenerationError::IllegalMode { strategy: req.strategy, needs: "the top_k entry point for" });
    }
    let ctx = context_tokens(tok, &req.history, params.config().max_positions, 0);
    let mut probs = params.next_token_distribution(&ctx)?;
    if req.exclude_history {
        for &i in &req.history {
            probs[i] = f64::NEG_INFINITY;
        }
    }
    Ok(rank_scores(probs.into_iter().enumerate(), req.k))
}

/// Autoregressive tuple sampler that memoises the per-prefix log-softmax,
/// so candidates sharing a prefix reuse one forward pass.
pub struct CandidateSampler<'a> {
    params: &'a ModelParams,
    tok: &'a Tokenisation,
    context: Vec<u32>,
    mask_positions: bool,
    cache: HashMap<Vec<u32>, Vec<f64>>,
}

impl<'a> CandidateSampler<'a> {
    pub fn new(params: &'a ModelParams, tok: &'a Tokenisation, context: Vec<u32>, mask_positions: bool) -> Self {
        CandidateSampler {
            params,
            tok,
            context,
            mask_positions,
            cache: HashMap::new(),
        }
    }

    /// Log-probabilities for the token at tuple position `prefix.len()`.
    pub fn step_log_probs(&mut self, prefix: &[u32]) -> Result<&[f64], ModelError> {
        if !self.cache.contains_key(prefix) {
            let mut seq = self.context.clone();
            seq.extend_from_slice(prefix);
            let mut logits = self.params.last_logits(&seq)?;
            if self.mask_positions {
                let allowed = self.tok.position_range(prefix.len());
                for (j, l) in logits.iter_mut().enumerate() {
                    if !allowed.contains(&j) {
                        *l = f64::NEG_INFINITY;
                    }
                }
            }
            self.cache.insert(prefix.to_vec(), log_softmax(&logits));
        }
        Ok(&self.cache[prefix])
    }

    /// Samples one t-token tuple; returns it with its summed log-probability.
    pub fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Vec<u32>, f64), ModelError> {
        let t = self.tok.tokens_per_item();
        let mut tuple = Vec::with_capacity(t);
        let mut total = 0.0;
        for _ in 0..t {
            let lp = self.step_log_probs(&tuple)?;
            let weights: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let dist = WeightedIndex::new(&weights).expect("distribution has positive mass");
            let token = dist.sample(rng);
            total += lp[token];
            tuple.push(token as u32);
        }
        Ok((tuple, total))
    }
}

/// Samples t tokens after `context` at temperature 1.
pub fn generate_candidate(
    params: &ModelParams,
    tok: &Tokenisation,
    context: &[u32],
    seed: u64,
    mask_positions: bool,
) -> Result<(Vec<u32>, f64), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CandidateSampler::new(params, tok, context.to_vec(), mask_positions).sample(&mut rng)
}

/// Σ log p(sᵢ | context, s₁..sᵢ₋₁), recomputed with fresh forward passes.
pub fn chain_rule_log_prob(
    params: &ModelParams,
    tok: &Tokenisation,
    context: &[u32],
    tuple: &[u32],
    mask_positions: bool,
) -> Result<f64, ModelError> {
    let mut seq = context.to_vec();
    let mut total = 0.0;
    for (pos, &s) in tuple.iter().enumerate() {
        let mut logits = params.last_logits(&seq)?;
        if mask_positions {
            let allowed = tok.position_range(pos);
            for (j, l) in logits.iter_mut().enumerate() {
                if !allowed.contains(&j) {
                    *l = f64::NEG_INFINITY;
                }
            }
        }
        total += log_softmax(&logits)[s as usize];
        seq.push(s);
    }
    Ok(total)
}

/// Draws candidates, drops invalid tuples, keeps each item's best score.
pub fn top_k_multi_token_recommend(
    params: &ModelParams,
    tok: &Tokenisation,
    req: &GenerationRequest,
) -> Result<RecommendationList, GenerationError> {
    check_request(params, tok, req)?;
    if req.num_candidates < req.k {
        return Err(GenerationError::TooFewCandidates {
            candidates: req.num_candidates,
            k: req.k,
        });
    }
    let t = tok.tokens_per_item();
    let ctx = context_tokens(tok, &req.history, params.config().max_positions, t - 1);
    let excluded: HashSet<usize> = if req.exclude_history {
        req.history.iter().copied().collect()
    } else {
        HashSet::new()
    };
    let mut sampler = CandidateSampler::new(params, tok, ctx, req.mask_positions);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    let mut invalid = 0;
    for _ in 0..req.num_candidates {
        let (tuple, lp) = sampler.sample(&mut rng)?;
        match tok.decode(&tuple) {
            Some(item) if !excluded.contains(&item) => {
                let slot = best.entry(item).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(lp);
            }
            Some(_) => {}
            None => invalid += 1,
        }
    }
    if best.is_empty() {
        log::warn!(
            "no valid candidates among {} samples ({invalid} invalid tuples)",
            req.num_candidates
        );
    }
    Ok(rank_scores(best, req.k))
}

/// Greedy list construction: each pick conditions on the picks before it.
pub fn next_k_recommend(
    params: &ModelParams,
    tok: &Tokenisation,
    req: &GenerationRequest,
) -> Result<RecommendationList, GenerationError> {
    check_request(params, tok, req)?;
    if req.strategy != Strategy::NextK {
        return Err(GenerationError::IllegalMode { strategy: req.strategy, needs: "the next_k entry point for" });
    }
    let mut masked = vec![false; tok.num_items()];
    if req.exclude_history {
        for &i in &req.history {
            masked[i] = true;
        }
    }
    let mut seq = req.history.clone();
    let mut entries = Vec::with_capacity(req.k);
    for _ in 0..req.k {
        let ctx = context_tokens(tok, &seq, params.config().max_positions, 0);
        let probs = params.next_token_distribution(&ctx)?;
        let pick = probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| !masked[i])
            .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            });
        let Some((item, p)) = pick else {
            log::warn!("next_k: only {} items available for K = {}", entries.len(), req.k);
            break;
        };
        masked[item] = true;
        seq.push(item);
        entries.push((item, p));
    }
    Ok(RecommendationList {
        shortfall: req.k - entries.len(),
        entries,
    })
}

/// Dispatches on `req.strategy`.
pub fn recommend(
    params: &ModelParams,
    tok: &Tokenisation,
    req: &GenerationRequest,
) -> Result<RecommendationList, GenerationError> {
    match req.strategy {
        Strategy::TopK => top_k_recommend(params, tok, req),
        Strategy::TopKMultiToken => top_k_multi_token_recommend(params, tok, req),
        Strategy::NextK => next_k_recommend(params, tok, req),
    }
}
