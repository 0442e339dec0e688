use std::collections::BTreeSet;

use super::select::{self, lowest_k, vpp_select};
use super::{Modality, PruneBudget, PruneError, StrategyKind, StrategySpec};
use crate::encoder::{HookAction, ImportanceScores, LayerContext, LayerHook, TokenId};
use crate::rng::{self, StreamRng};

/// Runs one strategy inside an encoder stack.
#[derive(Debug, Clone)]
pub struct LayerPruner {
    spec: StrategySpec,
    removals: Vec<usize>,
    total: usize,
    /// Never removed, whatever the strategy (the start token).
    fixed: BTreeSet<TokenId>,
    /// Action views; protected unless the spec turns protection off.
    actions: BTreeSet<TokenId>,
    /// Instruction tokens in the vocabulary of irrelevance.
    members: BTreeSet<TokenId>,
    rng: StreamRng,
    cumulative: ImportanceScores,
    removed: usize,
    clamped: usize,
}

impl LayerPruner {
    pub fn new(spec: StrategySpec, budget: &PruneBudget, seed: u64) -> Result<Self, PruneError> {
        let layers = budget.per_layer_removals.len();
        if spec.kind == StrategyKind::Btp {
            return Err(PruneError::BadStrategy {
                spec: spec.to_string(),
                reason: "btp prunes the map, not an encoder stack".into(),
            });
        }
        if spec.kind == StrategyKind::Fastv && !(1..=layers).contains(&spec.fastv_layer()) {
            return Err(PruneError::FastvLayer {
                layer: spec.fastv_layer(),
                layers,
            });
        }
        Ok(LayerPruner {
            spec,
            total: budget.total(),
            removals: budget.per_layer_removals.clone(),
            fixed: BTreeSet::new(),
            actions: BTreeSet::new(),
            members: BTreeSet::new(),
            rng: rng::stream(seed, "layer-pruner", spec.kind as u64),
            cumulative: ImportanceScores::default(),
            removed: 0,
            clamped: 0,
        })
    }

    pub fn with_fixed(mut self, ids: impl IntoIterator<Item = TokenId>) -> Self {
        self.fixed.extend(ids);
        self
    }

    pub fn with_actions(mut self, ids: impl IntoIterator<Item = TokenId>) -> Self {
        self.actions.extend(ids);
        self
    }

    pub fn with_members(mut self, ids: impl IntoIterator<Item = TokenId>) -> Self {
        self.members.extend(ids);
        self
    }

    /// Tokens removed or merged away so far.
    pub fn removed(&self) -> usize {
        self.removed
    }

    /// Requested removals that had no eligible token.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    fn protected(&self) -> BTreeSet<TokenId> {
        let mut p = self.fixed.clone();
        if self.spec.protect_action_views || self.spec.kind == StrategyKind::Bgp {
            p.extend(&self.actions);
        }
        p
    }

    fn budget_at(&self, layer: usize) -> usize {
        match self.spec.kind {
            StrategyKind::Fastv if layer + 1 == self.spec.fastv_layer() => self.total,
            StrategyKind::Fastv => 0,
            StrategyKind::Tome => self.spec.param.unwrap_or(self.removals[layer]),
            _ => self.removals[layer],
        }
    }

    fn action(&mut self, ctx: &LayerContext<'_>) -> Result<HookAction, PruneError> {
        let ids: Vec<TokenId> = ctx.tokens.iter().map(|t| t.id).collect();
        if self.spec.kind == StrategyKind::Cascade {
            for (id, s) in ctx.scores.iter() {
                let prev = self.cumulative.get(id).unwrap_or(0.0);
                self.cumulative.insert(id, prev + s);
            }
        }
        let k = self.budget_at(ctx.layer_index);
        if k == 0 {
            return Ok(HookAction::Keep);
        }
        let protected = self.protected();
        let eligible = ids.iter().filter(|id| !protected.contains(id)).count();
        if self.spec.modality == Modality::Instruction && k > eligible {
            return Err(PruneError::BudgetExceedsPrunable { k, prunable: eligible });
        }
        let sel = match self.spec.kind {
            StrategyKind::Bgp => {
                let bg: Vec<TokenId> = ids.iter().filter(|id| !protected.contains(id)).copied().collect();
                let take = k.min(bg.len());
                if take < k {
                    log::warn!("bgp: budget {k} exceeds {} background views, clamping", bg.len());
                }
                select::Selection {
                    removed: lowest_k(&bg, ctx.scores, take),
                    retained: Vec::new(),
                    clamped: k - take,
                }
            }
            StrategyKind::Vpp => {
                let prunable: Vec<(TokenId, bool)> = ids
                    .iter()
                    .filter(|id| !protected.contains(id))
                    .map(|id| (*id, self.members.contains(id)))
                    .collect();
                select::Selection {
                    removed: vpp_select(&prunable, ctx.scores, k)?,
                    retained: Vec::new(),
                    clamped: 0,
                }
            }
            StrategyKind::Random => select::random_prune(&ids, &protected, &mut self.rng, k),
            StrategyKind::Cascade => select::cascade_prune(&ids, &protected, &self.cumulative, k),
            StrategyKind::Fastv => select::fastv_prune(&ids, &protected, ctx.scores, k),
            StrategyKind::Tome => {
                let (groups, clamped) = select::tome_merge(ctx.tokens, &protected, k);
                self.clamped += clamped;
                self.removed += groups.iter().map(|g| g.absorb.len()).sum::<usize>();
                return Ok(HookAction::Merge(groups));
            }
            StrategyKind::Btp => unreachable!("rejected in new"),
        };
        self.clamped += sel.clamped;
        self.removed += sel.removed.len();
        Ok(HookAction::Remove(sel.removed))
    }
}

impl LayerHook for LayerPruner {
    fn after_attention(&mut self, ctx: &LayerContext<'_>) -> crate::Result<HookAction> {
        Ok(self.action(ctx)?)
    }
}
