//! Leave-one-out ranking evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::binio::sha256_hex;
use crate::data::SplitDataset;
use crate::generate::{
    check_legal, next_k_recommend, rank_scores, recommend, top_k_recommend, GenerationError, GenerationRequest,
    RecommendationList, Strategy,
};
use crate::model::ModelParams;
use crate::tokeniser::Tokenisation;

/// 1 if `target` is among the first `k` entries.
pub fn recall_at_k(recs: &RecommendationList, target: usize, k: usize) -> f64 {
    recall_from_rank(recs.rank_of(target), k)
}

/// 1/log₂(rank + 1) if `target` is ranked within `k`, else 0.
pub fn ndcg_at_k(recs: &RecommendationList, target: usize, k: usize) -> f64 {
    ndcg_from_rank(recs.rank_of(target), k)
}

pub fn recall_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserResult {
    pub user: usize,
    pub target: usize,
    /// 1-based rank of the target in the generated list.
    pub rank: Option<usize>,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub label: String,
    pub ks: Vec<usize>,
    /// (K, Recall@K, NDCG@K), one row per cutoff.
    pub metrics: Vec<(usize, f64, f64)>,
    pub per_user: Vec<UserResult>,
    pub fingerprint: String,
}

impl EvalResult {
    fn from_users(label: String, ks: &[usize], per_user: Vec<UserResult>, fingerprint: String) -> Self {
        let n = per_user.len().max(1) as f64;
        let metrics = ks
            .iter()
            .map(|&k| {
                let recall = per_user.iter().map(|u| recall_from_rank(u.rank, k)).sum::<f64>() / n;
                let ndcg = per_user.iter().map(|u| ndcg_from_rank(u.rank, k)).sum::<f64>() / n;
                (k, recall, ndcg)
            })
            .collect();
        EvalResult {
            label,
            ks: ks.to_vec(),
            metrics,
            per_user,
            fingerprint,
        }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == k).map(|m| m.1)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == k).map(|m| m.2)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} ({} users)\n", self.label, self.per_user.len());
        let _ = writeln!(s, "{:>4}  {:>10}  {:>10}", "K", "Recall@K", "NDCG@K");
        for (k, r, n) in &self.metrics {
            let _ = writeln!(s, "{k:>4}  {r:>10.4}  {n:>10.4}");
        }
        let _ = writeln!(s, "fingerprint {}", self.fingerprint);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,k,recall,ndcg\n");
        for (k, r, n) in &self.metrics {
            let _ = writeln!(s, "{},{k},{r:.6},{n:.6}", self.label);
        }
        s
    }

    /// user, target, rank (0 when absent), shortfall.
    pub fn per_user_tsv(&self) -> String {
        let mut s = String::from("user\ttarget\trank\tshortfall\n");
        for u in &self.per_user {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", u.user, u.target, u.rank.unwrap_or(0), u.shortfall);
        }
        s
    }
}

/// Runs `recommend(user, history, k_max)` for every user of the split,
/// conditioning on everything except the test target.
pub fn evaluate_with<E, F>(
    split: &SplitDataset,
    ks: &[usize],
    label: &str,
    fingerprint: String,
    recommend: F,
) -> Result<EvalResult, E>
where
    E: Send,
    F: Fn(usize, Vec<usize>, usize) -> Result<RecommendationList, E> + Sync,
{
    assert!(!ks.is_empty() && ks.iter().all(|&k| k >= 1), "cutoffs must be >= 1");
    let k_max = *ks.iter().max().unwrap();
    let per_user: Vec<UserResult> = (0..split.num_users())
        .into_par_iter()
        .map(|user| {
            let list = recommend(user, split.test_history(user), k_max)?;
            let target = split.test_target[user];
            Ok(UserResult {
                user,
                target,
                rank: list.rank_of(target),
                shortfall: list.shortfall,
            })
        })
        .collect::<Result<_, E>>()?;
    Ok(EvalResult::from_users(label.to_string(), ks, per_user, fingerprint))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalOptions {
    pub num_candidates: usize,
    pub exclude_history: bool,
    pub mask_positions: bool,
    /// Sampling seed; user `u` samples with `seed + u`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            num_candidates: 50,
            exclude_history: true,
            mask_positions: true,
            seed: 0,
        }
    }
}

/// Hash of everything that determines an evaluation's outcome.
pub fn fingerprint(params: &ModelParams, tok: &Tokenisation, strategy: Strategy, ks: &[usize], opts: &EvalOptions) -> String {
    let mut bytes = Vec::with_capacity(params.data.len() * 8 + 256);
    for v in &params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for item in 0..tok.num_items() {
        for t in tok.encode(item).unwrap() {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
    }
    let desc = format!(
        "{:?}|t={} v={} noise_seed={}|{strategy}|{ks:?}|{opts:?}",
        params.config(),
        tok.tokens_per_item(),
        tok.values_per_token(),
        tok.noise_seed
    );
    bytes.extend_from_slice(desc.as_bytes());
    sha256_hex(&bytes)
}

/// Leave-one-out evaluation of a trained model with one strategy.
pub fn evaluate(
    params: &ModelParams,
    tok: &Tokenisation,
    split: &SplitDataset,
    strategy: Strategy,
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<EvalResult, GenerationError> {
    check_legal(strategy, tok)?;
    let fp = fingerprint(params, tok, strategy, ks, opts);
    evaluate_with(split, ks, strategy.name(), fp, |user, history, k| {
        let req = GenerationRequest {
            history,
            k,
            strategy,
            num_candidates: opts.num_candidates.max(k),
            exclude_history: opts.exclude_history,
            seed: opts.seed.wrapping_add(user as u64),
            mask_positions: opts.mask_positions,
        };
        recommend(params, tok, &req)
    })
}

/// Training-split interaction count per item.
pub fn popularity_scores(split: &SplitDataset) -> Vec<f64> {
    let mut counts = vec![0.0; split.num_items];
    for seq in &split.train {
        for &i in seq {
            counts[i] += 1.0;
        }
    }
    counts
}

/// Ranks items by training popularity, excluding the user's history.
pub fn evaluate_popularity(split: &SplitDataset, ks: &[usize]) -> EvalResult {
    let pop = popularity_scores(split);
    let fp = sha256_hex(format!("popularity|{ks:?}|{}", split.num_items).as_bytes());
    let result: Result<EvalResult, std::convert::Infallible> =
        evaluate_with(split, ks, "popularity", fp, |_, history, k| {
            let mut scores = pop.clone();
            for i in history {
                scores[i] = f64::NEG_INFINITY;
            }
            Ok(rank_scores(scores.into_iter().enumerate(), k))
        });
    match result {
        Ok(r) => r,
        Err(e) => match e {},
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutoffRow {
    pub k: usize,
    pub top_k: f64,
    pub next_k: f64,
    /// next_k / top_k; 1 when the two coincide.
    pub ratio: f64,
}

/// NDCG@K of Top-K and Next-K for K = 1..=k_max. Both strategies are
/// deterministic and prefix-consistent, so one list of length `k_max` per
/// user and strategy serves every cutoff.
pub fn sweep_cutoffs(
    params: &ModelParams,
    tok: &Tokenisation,
    split: &SplitDataset,
    k_max: usize,
    exclude_history: bool,
) -> Result<Vec<CutoffRow>, GenerationError> {
    check_legal(Strategy::NextK, tok)?;
    let ranks: Vec<(Option<usize>, Option<usize>)> = (0..split.num_users())
        .into_par_iter()
        .map(|user| {
            let mut req = GenerationRequest::new(split.test_history(user), k_max, Strategy::TopK);
            req.exclude_history = exclude_history;
            let target = split.test_target[user];
            let top = top_k_recommend(params, tok, &req)?.rank_of(target);
            req.strategy = Strategy::NextK;
            let next = next_k_recommend(params, tok, &req)?.rank_of(target);
            Ok((top, next))
        })
        .collect::<Result<_, GenerationError>>()?;
    let n = ranks.len().max(1) as f64;
    Ok((1..=k_max)
        .map(|k| {
            let top_k = ranks.iter().map(|r| ndcg_from_rank(r.0, k)).sum::<f64>() / n;
            let next_k = ranks.iter().map(|r| ndcg_from_rank(r.1, k)).sum::<f64>() / n;
            let ratio = if top_k == next_k { 1.0 } else { next_k / top_k };
            CutoffRow { k, top_k, next_k, ratio }
        })
        .collect())
}

pub fn cutoffs_to_text(rows: &[CutoffRow]) -> String {
    let mut s = format!("{:>4}  {:>10}  {:>10}  {:>8}\n", "K", "TopK", "NextK", "ratio");
    for r in rows {
        let _ = writeln!(s, "{:>4}  {:>10.4}  {:>10.4}  {:>8.4}", r.k, r.top_k, r.next_k, r.ratio);
    }
    s
}

pub fn cutoffs_to_csv(rows: &[CutoffRow]) -> String {
    let mut s = String::from("k,top_k_ndcg,next_k_ndcg,ratio\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.k, r.top_k, r.next_k, r.ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(items: &[usize]) -> RecommendationList {
        RecommendationList {
            entries: items.iter().map(|&i| (i, 0.0)).collect(),
            shortfall: 0,
        }
    }

    #[test]
    fn closed_form_cases() {
        let l = list(&[4, 9, 1]);
        assert_eq!(recall_at_k(&l, 4, 10), 1.0);
        assert_eq!(ndcg_at_k(&l, 4, 10), 1.0);
        assert!((ndcg_at_k(&l, 9, 10) - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&l, 1, 2), 0.0);
        assert_eq!(recall_at_k(&l, 7, 10), 0.0);
    }

    #[test]
    fn rank_eleven_misses_k_ten() {
        assert_eq!(recall_from_rank(Some(11), 10), 0.0);
        assert_eq!(ndcg_from_rank(Some(11), 10), 0.0);
        assert_eq!(recall_from_rank(Some(10), 10), 1.0);
    }

    #[test]
    fn four_user_mean_recall() {
        let ranks = [Some(1), Some(2), Some(11), Some(200)];
        let mean: f64 = ranks.iter().map(|&r| recall_from_rank(r, 10)).sum::<f64>() / 4.0;
        assert_eq!(mean, 0.5);
    }
}
