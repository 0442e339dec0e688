//! Pure selection rules.
//!
//! Token ids are assigned in original sequence order, so "lower original
//! index first" on ties is "lower id first".

use std::collections::BTreeSet;

use log::warn;
use rand::Rng;

use super::{PruneError, ViewPartition};
use crate::agent::TopoMap;
use crate::encoder::{ImportanceScores, MergeGroup, Token, TokenId};
use crate::rng::cosine;
use crate::vocabulary::{normalize, Vocabulary, BOS};

/// Outcome of a removal rule: retained and removed ids in input order, plus
/// how many requested removals could not be made.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    pub retained: Vec<TokenId>,
    pub removed: Vec<TokenId>,
    pub clamped: usize,
}

impl Selection {
    fn split(ids: &[TokenId], removed: &BTreeSet<TokenId>, clamped: usize) -> Self {
        let (removed, retained) = ids.iter().partition(|id| removed.contains(id));
        Selection {
            retained,
            removed,
            clamped,
        }
    }
}

/// The `k` lowest-scoring candidates; ties go to the lower id.
pub(crate) fn lowest_k(cands: &[TokenId], scores: &ImportanceScores, k: usize) -> Vec<TokenId> {
    let mut v: Vec<(f64, TokenId)> = cands
        .iter()
        .map(|id| (scores.get(*id).unwrap_or(0.0), *id))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v.into_iter().take(k).map(|(_, id)| id).collect()
}

fn clamp(what: &str, k: usize, available: usize) -> (usize, usize) {
    if k > available {
        warn!("{what}: budget {k} exceeds {available} prunable tokens, clamping");
        (available, k - available)
    } else {
        (k, 0)
    }
}

fn candidates(ids: &[TokenId], protected: &BTreeSet<TokenId>) -> Vec<TokenId> {
    ids.iter().filter(|id| !protected.contains(id)).copied().collect()
}

/// Remove the `k` lowest-scoring background views. Action views are never
/// touched.
pub fn bgp_prune(partition: &ViewPartition, scores: &ImportanceScores, k: usize) -> Selection {
    let bg = partition.background_ids();
    let (k, clamped) = clamp("bgp", k, bg.len());
    let removed: BTreeSet<TokenId> = lowest_k(bg, scores, k).into_iter().collect();
    let mut all: Vec<TokenId> = partition.action_ids().iter().chain(bg).copied().collect();
    all.sort();
    Selection::split(&all, &removed, clamped)
}

/// Core of vocabulary priority pruning over prunable tokens flagged with
/// vocabulary membership: members go first, lowest score first; then
/// non-members, lowest score first.
pub(crate) fn vpp_select(
    prunable: &[(TokenId, bool)],
    scores: &ImportanceScores,
    k: usize,
) -> Result<Vec<TokenId>, PruneError> {
    if k > prunable.len() {
        return Err(PruneError::BudgetExceedsPrunable {
            k,
            prunable: prunable.len(),
        });
    }
    let members: Vec<TokenId> = prunable.iter().filter(|t| t.1).map(|t| t.0).collect();
    let others: Vec<TokenId> = prunable.iter().filter(|t| !t.1).map(|t| t.0).collect();
    if members.len() >= k {
        Ok(lowest_k(&members, scores, k))
    } else {
        let mut removed = members;
        removed.extend(lowest_k(&others, scores, k - removed.len()));
        Ok(removed)
    }
}

/// Vocabulary priority pruning over an instruction given as `(id, text)`.
/// The start-of-sequence token is never removed.
pub fn vpp_prune<S: AsRef<str>>(
    tokens: &[(TokenId, S)],
    vocab: &Vocabulary,
    scores: &ImportanceScores,
    k: usize,
) -> Result<Selection, PruneError> {
    let prunable: Vec<(TokenId, bool)> = tokens
        .iter()
        .filter(|(_, t)| normalize(t.as_ref()) != BOS)
        .map(|(id, t)| (*id, vocab.contains(t.as_ref())))
        .collect();
    let removed: BTreeSet<TokenId> = vpp_select(&prunable, scores, k)?.into_iter().collect();
    let ids: Vec<TokenId> = tokens.iter().map(|t| t.0).collect();
    Ok(Selection::split(&ids, &removed, 0))
}

/// Remove the `k` unprotected tokens with the lowest accumulated score.
pub fn cascade_prune(
    ids: &[TokenId],
    protected: &BTreeSet<TokenId>,
    cumulative: &ImportanceScores,
    k: usize,
) -> Selection {
    let cands = candidates(ids, protected);
    let (k, clamped) = clamp("cascade", k, cands.len());
    let removed = lowest_k(&cands, cumulative, k).into_iter().collect();
    Selection::split(ids, &removed, clamped)
}

/// Single-shot removal of the `total_k` lowest-scoring unprotected tokens.
pub fn fastv_prune(
    ids: &[TokenId],
    protected: &BTreeSet<TokenId>,
    scores: &ImportanceScores,
    total_k: usize,
) -> Selection {
    let cands = candidates(ids, protected);
    let (k, clamped) = clamp("fastv", total_k, cands.len());
    let removed = lowest_k(&cands, scores, k).into_iter().collect();
    Selection::split(ids, &removed, clamped)
}

pub fn random_prune(
    ids: &[TokenId],
    protected: &BTreeSet<TokenId>,
    rng: &mut impl Rng,
    k: usize,
) -> Selection {
    let cands = candidates(ids, protected);
    let (k, clamped) = clamp("random", k, cands.len());
    let removed = rand::seq::index::sample(rng, cands.len(), k)
        .into_iter()
        .map(|i| cands[i])
        .collect();
    Selection::split(ids, &removed, clamped)
}

/// Bipartite soft matching. Unprotected tokens alternate into sets A and B
/// in sequence order; each A token is paired with its most similar B token
/// by cosine, and the `m` most similar pairs are merged into their B token.
/// Returns the merge groups and the number of merges that could not be made.
pub fn tome_merge(
    tokens: &[Token],
    protected: &BTreeSet<TokenId>,
    m: usize,
) -> (Vec<MergeGroup>, usize) {
    let cands: Vec<&Token> = tokens.iter().filter(|t| !protected.contains(&t.id)).collect();
    let a: Vec<&Token> = cands.iter().step_by(2).copied().collect();
    let b: Vec<&Token> = cands.iter().skip(1).step_by(2).copied().collect();
    let limit = if b.is_empty() { 0 } else { a.len().min(tokens.len() / 2) };
    let (m, clamped) = clamp("tome", m, limit);
    let mut pairs: Vec<(f64, usize, usize)> = a
        .iter()
        .enumerate()
        .filter(|_| !b.is_empty())
        .map(|(i, ta)| {
            let (j, s) = b
                .iter()
                .enumerate()
                .map(|(j, tb)| (j, cosine(&ta.feature, &tb.feature)))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            (s, i, j)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut groups: Vec<MergeGroup> = Vec::new();
    for (_, i, j) in pairs.into_iter().take(m) {
        match groups.iter_mut().find(|g| g.keep == b[j].id) {
            Some(g) => g.absorb.push(a[i].id),
            None => groups.push(MergeGroup {
                keep: b[j].id,
                absorb: vec![a[i].id],
            }),
        }
    }
    for g in &mut groups {
        g.absorb.sort();
    }
    groups.sort_by_key(|g| g.keep);
    (groups, clamped)
}

/// Query-skip set for selective attention: every background view.
pub fn sas_mask(partition: &ViewPartition) -> BTreeSet<TokenId> {
    partition.background_ids().iter().copied().collect()
}

/// Keep the `k_btp` unvisited nodes with the highest latest score; ties keep
/// the earlier discovery, then the lower node id.
pub fn btp_prune(map: &TopoMap, k_btp: usize) -> TopoMap {
    let mut unvisited: Vec<(f64, usize, usize)> = map
        .unvisited()
        .map(|(id, n)| (n.latest_score, n.discovery_step, id))
        .collect();
    if unvisited.len() <= k_btp {
        return map.clone();
    }
    unvisited.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = map.clone();
    for (_, _, id) in &unvisited[k_btp..] {
        out.remove_unvisited(*id);
    }
    out
}
