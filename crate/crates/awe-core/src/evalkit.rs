//! Word discrimination (mean average precision over cosine rankings) and
//! phonological similarity (Kendall's tau between the embedding ordering and
//! the PWLD ordering, per query).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phonology::{pwld, CostModel, FeatureTable, PhonologyError};
use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evalkit: zero-norm embedding for segment '{0}'")]
    ZeroNormRow(String),
    #[error("evalkit: zero-norm query embedding")]
    ZeroNormQuery,
    #[error("evalkit: embeddings ({emb}) and metadata ({meta}) differ in length")]
    LengthMismatch { emb: usize, meta: usize },
    #[error("evalkit: empty candidate set")]
    EmptyIndex,
    #[error("evalkit: query '{0}' has an empty relevant set (AP undefined)")]
    UndefinedAp(String),
    #[error("evalkit: rankings cover different candidate sets")]
    CandidateMismatch,
    #[error("evalkit: need at least 2 candidates for a rank correlation")]
    TooFewCandidates,
    #[error(transparent)]
    Phonology(#[from] PhonologyError),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Metadata carried per indexed segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub segment_id: String,
    pub word_type: String,
    pub phones: Vec<String>,
}

/// Brute-force cosine search index over a candidate set. Rows are stored in
/// 32-bit; similarity accumulates in 64-bit so rankings are stable.
#[derive(Debug)]
pub struct SearchIndex {
    embeddings: Vec<Vec<f32>>,
    norms: Vec<f64>,
    meta: Vec<SegmentMeta>,
}

impl SearchIndex {
    pub fn build(embeddings: Vec<Vec<f32>>, meta: Vec<SegmentMeta>) -> Result<Self> {
        if embeddings.len() != meta.len() {
            return Err(EvalError::LengthMismatch {
                emb: embeddings.len(),
                meta: meta.len(),
            });
        }
        if embeddings.is_empty() {
            return Err(EvalError::EmptyIndex);
        }
        let mut norms = Vec::with_capacity(embeddings.len());
        for (row, m) in embeddings.iter().zip(&meta) {
            let n: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(EvalError::ZeroNormRow(m.segment_id.clone()));
            }
            norms.push(n);
        }
        Ok(Self {
            embeddings,
            norms,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self, i: usize) -> &SegmentMeta {
        &self.meta[i]
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i]
    }

    pub fn cosine(&self, query: &[f32], i: usize) -> Result<f64> {
        let qn: f64 = query.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(EvalError::ZeroNormQuery);
        }
        let dot: f64 = query
            .iter()
            .zip(&self.embeddings[i])
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        Ok(dot / (qn * self.norms[i]))
    }

    /// Rank all candidates by descending cosine similarity to the query.
    /// Ties break by ascending segment id.
    pub fn rank_by_embedding(&self, query_id: &str, query: &[f32]) -> Result<RankedList> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.rank_subset(query_id, query, &all)
    }

    /// Rank a subset of candidates (used for query self-exclusion).
    pub fn rank_subset(
        &self,
        query_id: &str,
        query: &[f32],
        candidates: &[usize],
    ) -> Result<RankedList> {
        let mut entries = Vec::with_capacity(candidates.len());
        for &i in candidates {
            entries.push((i, self.cosine(query, i)?));
        }
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.meta[a.0].segment_id.cmp(&self.meta[b.0].segment_id))
        });
        Ok(RankedList {
            query_id: query_id.to_owned(),
            entries,
        })
    }

    /// Rank a subset by ascending PWLD to the query's phone string. Equal
    /// distances form tie groups rather than being broken arbitrarily.
    pub fn rank_by_pwld(
        &self,
        query_id: &str,
        query_phones: &[String],
        candidates: &[usize],
        table: &FeatureTable,
        cm: &CostModel,
    ) -> Result<PwldRanking> {
        let q = table.sequence_owned(query_phones)?;
        let mut entries = Vec::with_capacity(candidates.len());
        for &i in candidates {
            let c = table.sequence_owned(&self.meta[i].phones)?;
            entries.push((i, pwld(&q, &c, table, cm)?));
        }
        entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let mut group_rank = Vec::with_capacity(entries.len());
        let mut group = 0usize;
        for (k, e) in entries.iter().enumerate() {
            if k > 0 && e.1 > entries[k - 1].1 {
                group += 1;
            }
            group_rank.push(group);
        }
        Ok(PwldRanking {
            query_id: query_id.to_owned(),
            entries,
            group_rank,
        })
    }
}

/// A strict ordering of candidates with scores (descending similarity).
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    /// `(candidate index, cosine similarity)`, best first.
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// A weak ordering of candidates by PWLD (ascending distance) with dense tie
/// groups.
#[derive(Debug, Clone)]
pub struct PwldRanking {
    pub query_id: String,
    /// `(candidate index, pwld)`, closest first.
    pub entries: Vec<(usize, f64)>,
    /// Dense group rank per entry; equal distances share a group.
    pub group_rank: Vec<usize>,
}

// ------------------------------------------------------------------- mAP --

/// Average precision of an ordering against a relevant set (Eq.-style
/// rank-by-rank precision sum, normalized by the relevant count).
pub fn average_precision(order: &[usize], relevant: &HashSet<usize>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(EvalError::UndefinedAp(String::new()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (r, cand) in order.iter().enumerate() {
        if relevant.contains(cand) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryScore {
    pub segment_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// Standard deviation over per-query AP values (sample std).
    pub std: f64,
    pub n_queries: usize,
    /// Query segments excluded because their word type is a singleton.
    pub excluded: Vec<String>,
    pub per_query: Vec<QueryScore>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Mean average precision over every query in the index. Each query segment
/// is excluded from its own candidate set; queries whose word type occurs
/// nowhere else are excluded and reported.
pub fn mean_average_precision(index: &SearchIndex) -> Result<MapReport> {
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for q in 0..index.len() {
        let candidates: Vec<usize> = (0..index.len()).filter(|&i| i != q).collect();
        let relevant: HashSet<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| index.meta(i).word_type == index.meta(q).word_type)
            .collect();
        if relevant.is_empty() {
            excluded.push(index.meta(q).segment_id.clone());
            continue;
        }
        let ranking = index.rank_subset(
            &index.meta(q).segment_id,
            index.embedding(q),
            &candidates,
        )?;
        let ap = average_precision(&ranking.order(), &relevant)
            .map_err(|_| EvalError::UndefinedAp(index.meta(q).segment_id.clone()))?;
        per_query.push(QueryScore {
            segment_id: index.meta(q).segment_id.clone(),
            score: ap,
        });
    }
    let values: Vec<f64> = per_query.iter().map(|p| p.score).collect();
    let (map, std) = mean_std(&values);
    Ok(MapReport {
        map,
        std,
        n_queries: per_query.len(),
        excluded,
        per_query,
    })
}

// ------------------------------------------------------------ Kendall tau --

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauVariant {
    /// `tau = 1 - 2 delta / (0.5 k (k-1))` where `delta` counts pairs
    /// strictly ordered by PWLD that the embedding ranking reverses; pairs
    /// tied in PWLD contribute nothing but stay in the denominator.
    Eq5,
    /// Standard tau-b with tie corrections in both rankings.
    TauB,
}

impl TauVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            TauVariant::Eq5 => "eq5",
            TauVariant::TauB => "tau_b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eq5" => Some(TauVariant::Eq5),
            "tau_b" => Some(TauVariant::TauB),
            _ => None,
        }
    }
}

/// Count pairs `i < j` with `a[i] > a[j]` by merge sort. Ties do not count.
fn count_strict_inversions(a: &mut [usize]) -> u64 {
    let n = a.len();
    if n < 2 {
        return 0;
    }
    let mut buf = vec![0usize; n];
    let mut inv = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo + width < n {
            let mid = lo + width;
            let hi = (mid + width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid || j < hi {
                if i < mid && (j >= hi || a[i] <= a[j]) {
                    buf[k] = a[i];
                    i += 1;
                } else {
                    // a[j] < a[i]: it jumps over the remaining left elements.
                    inv += (mid - i) as u64;
                    buf[k] = a[j];
                    j += 1;
                }
                k += 1;
            }
            a[lo..hi].copy_from_slice(&buf[lo..hi]);
            lo = hi;
        }
        width *= 2;
    }
    inv
}

/// Kendall's tau between an embedding ranking and a PWLD ranking over the
/// same candidate set.
pub fn kendall_tau(
    r_theta: &RankedList,
    r_phi: &PwldRanking,
    variant: TauVariant,
) -> Result<f64> {
    let k = r_theta.entries.len();
    if k != r_phi.entries.len() {
        return Err(EvalError::CandidateMismatch);
    }
    if k < 2 {
        return Err(EvalError::TooFewCandidates);
    }
    let max_cand = r_theta
        .entries
        .iter()
        .map(|e| e.0)
        .max()
        .unwrap();
    let mut phi_group = vec![usize::MAX; max_cand + 1];
    for (pos, e) in r_phi.entries.iter().enumerate() {
        if e.0 > max_cand || phi_group.get(e.0).is_none() {
            return Err(EvalError::CandidateMismatch);
        }
        phi_group[e.0] = r_phi.group_rank[pos];
    }
    // Sequence of PWLD group ranks in embedding order.
    let mut seq = Vec::with_capacity(k);
    for e in &r_theta.entries {
        let g = *phi_group.get(e.0).ok_or(EvalError::CandidateMismatch)?;
        if g == usize::MAX {
            return Err(EvalError::CandidateMismatch);
        }
        seq.push(g);
    }
    match variant {
        TauVariant::Eq5 => {
            let delta = count_strict_inversions(&mut seq);
            let pairs = (k * (k - 1)) as f64 / 2.0;
            Ok(1.0 - 2.0 * delta as f64 / pairs)
        }
        TauVariant::TauB => {
            // x: embedding rank with ties on equal scores; y: PWLD group.
            let mut x_rank = vec![0usize; k];
            let mut dense = 0usize;
            for (pos, e) in r_theta.entries.iter().enumerate() {
                if pos > 0 && r_theta.entries[pos - 1].1 > e.1 {
                    dense += 1;
                }
                x_rank[pos] = dense;
            }
            let pairs: Vec<(usize, usize)> =
                x_rank.into_iter().zip(seq.iter().copied()).collect();
            Ok(tau_b_from_pairs(pairs))
        }
    }
}

/// Textbook tau-b over paired rank vectors, O(k log k).
pub fn tau_b_from_pairs(mut pairs: Vec<(usize, usize)>) -> f64 {
    let n = pairs.len();
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let tie_pairs = |counts: &mut u64, run: u64| {
        *counts += run * (run - 1) / 2;
    };
    let mut tied_x = 0u64;
    let mut tied_xy = 0u64;
    let mut run_x = 1u64;
    let mut run_xy = 1u64;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_x += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_xy += 1;
            } else {
                tie_pairs(&mut tied_xy, run_xy);
                run_xy = 1;
            }
        } else {
            tie_pairs(&mut tied_x, run_x);
            run_x = 1;
            tie_pairs(&mut tied_xy, run_xy);
            run_xy = 1;
        }
    }
    tie_pairs(&mut tied_x, run_x);
    tie_pairs(&mut tied_xy, run_xy);

    // Merge sort by y counting discordant swaps.
    let mut ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let swaps = count_strict_inversions(&mut ys);

    let mut tied_y = 0u64;
    let mut sorted_y: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    sorted_y.sort_unstable();
    let mut run_y = 1u64;
    for i in 1..n {
        if sorted_y[i] == sorted_y[i - 1] {
            run_y += 1;
        } else {
            tie_pairs(&mut tied_y, run_y);
            run_y = 1;
        }
    }
    tie_pairs(&mut tied_y, run_y);

    let n0 = (n as u64 * (n as u64 - 1) / 2) as f64;
    let cmd = n0 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - tied_x as f64) * (n0 - tied_y as f64)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (cmd / denom).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhonSimReport {
    pub variant: String,
    pub mean_tau: f64,
    /// Standard deviation over per-query tau values (sample std).
    pub std: f64,
    pub n_queries: usize,
    pub per_query: Vec<QueryScore>,
}

/// Per-query Kendall's tau between the embedding and PWLD orderings over the
/// index, query self-excluded. Queries of singleton word types stay in.
pub fn phonological_similarity_eval(
    index: &SearchIndex,
    table: &FeatureTable,
    cm: &CostModel,
    variant: TauVariant,
) -> Result<PhonSimReport> {
    let mut per_query = Vec::new();
    for q in 0..index.len() {
        let candidates: Vec<usize> = (0..index.len()).filter(|&i| i != q).collect();
        if candidates.len() < 2 {
            continue;
        }
        let meta = index.meta(q);
        let theta = index.rank_subset(&meta.segment_id, index.embedding(q), &candidates)?;
        let phi = index.rank_by_pwld(&meta.segment_id, &meta.phones, &candidates, table, cm)?;
        let tau = kendall_tau(&theta, &phi, variant)?;
        per_query.push(QueryScore {
            segment_id: meta.segment_id.clone(),
            score: tau,
        });
    }
    let values: Vec<f64> = per_query.iter().map(|p| p.score).collect();
    let (mean_tau, std) = mean_std(&values);
    Ok(PhonSimReport {
        variant: variant.as_str().to_owned(),
        mean_tau,
        std,
        n_queries: per_query.len(),
        per_query,
    })
}

// --------------------------------------------------------- Monte-Carlo null

/// mAP samples under uniformly random rankings of the same candidate sets.
pub fn permutation_null_map(index: &SearchIndex, trials: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut aps = Vec::new();
        for q in 0..index.len() {
            let mut candidates: Vec<usize> = (0..index.len()).filter(|&i| i != q).collect();
            let relevant: HashSet<usize> = candidates
                .iter()
                .copied()
                .filter(|&i| index.meta(i).word_type == index.meta(q).word_type)
                .collect();
            if relevant.is_empty() {
                continue;
            }
            rng.shuffle(&mut candidates);
            aps.push(average_precision(&candidates, &relevant).expect("relevant nonempty"));
        }
        out.push(mean_std(&aps).0);
    }
    out
}

/// Mean-tau samples under uniformly random embedding orderings against the
/// true PWLD orderings.
pub fn permutation_null_tau(
    index: &SearchIndex,
    table: &FeatureTable,
    cm: &CostModel,
    variant: TauVariant,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    // Precompute PWLD rankings once.
    let mut phis = Vec::with_capacity(index.len());
    for q in 0..index.len() {
        let candidates: Vec<usize> = (0..index.len()).filter(|&i| i != q).collect();
        let meta = index.meta(q);
        phis.push(index.rank_by_pwld(&meta.segment_id, &meta.phones, &candidates, table, cm)?);
    }
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut taus = Vec::new();
        for (q, phi) in phis.iter().enumerate() {
            let mut candidates: Vec<usize> = (0..index.len()).filter(|&i| i != q).collect();
            if candidates.len() < 2 {
                continue;
            }
            rng.shuffle(&mut candidates);
            let theta = RankedList {
                query_id: index.meta(q).segment_id.clone(),
                entries: candidates
                    .iter()
                    .enumerate()
                    .map(|(pos, &c)| (c, -(pos as f64)))
                    .collect(),
            };
            taus.push(kendall_tau(&theta, phi, variant)?);
        }
        out.push(mean_std(&taus).0);
    }
    Ok(out)
}

/// Two-sided interval `[lo, hi]` covering the central `1 - alpha` mass of
/// the samples.
pub fn central_interval(samples: &[f64], alpha: f64) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let lo_idx = ((alpha / 2.0) * n as f64).floor() as usize;
    let hi_idx = (((1.0 - alpha / 2.0) * n as f64).ceil() as usize).saturating_sub(1);
    (sorted[lo_idx.min(n - 1)], sorted[hi_idx.min(n - 1)])
}
