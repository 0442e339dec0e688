//! Pruning strategies and budget scheduling.
//!
//! Selection functions in [`select`] are pure: given candidates, scores and
//! a count they return what to drop. [`hook::LayerPruner`] drives them from
//! inside an encoder stack, one layer at a time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TokenId;

pub mod hook;
pub mod select;

pub use hook::LayerPruner;
pub use select::{
    bgp_prune, btp_prune, cascade_prune, fastv_prune, random_prune, sas_mask, tome_merge,
    vpp_prune, Selection,
};

pub const DEFAULT_FASTV_LAYER: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("retain fraction {0} outside (0, 1]")]
    RetainFraction(f64),
    #[error("budget exceeds prunable tokens ({k} > {prunable})")]
    BudgetExceedsPrunable { k: usize, prunable: usize },
    #[error("encoder needs at least one layer")]
    NoLayers,
    #[error("view partition overlaps on {0}")]
    OverlappingPartition(TokenId),
    #[error("fastv prune_layer {layer} outside 1..={layers}")]
    FastvLayer { layer: usize, layers: usize },
    #[error("bad strategy {spec:?}: {reason}")]
    BadStrategy { spec: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Instruction,
    Views,
    History,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Instruction => "instruction",
            Modality::Views => "views",
            Modality::History => "history",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instruction" | "instr" | "lang" => Ok(Modality::Instruction),
            "views" | "view" | "vis" => Ok(Modality::Views),
            "history" | "hist" => Ok(Modality::History),
            _ => Err(format!("unknown modality {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneBudget {
    pub retain_fraction: f64,
    pub per_layer_removals: Vec<usize>,
    pub modality: Modality,
}

impl PruneBudget {
    pub fn total(&self) -> usize {
        self.per_layer_removals.iter().sum()
    }
}

/// Split `round((1 - r) * count)` removals evenly over `layers`, giving the
/// remainder to the earliest layers.
pub fn schedule_budget(
    retain_fraction: f64,
    layers: usize,
    prunable_count: usize,
    modality: Modality,
) -> Result<PruneBudget, PruneError> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(PruneError::RetainFraction(retain_fraction));
    }
    if layers == 0 {
        return Err(PruneError::NoLayers);
    }
    let total = ((1.0 - retain_fraction) * prunable_count as f64).round() as usize;
    let (base, rem) = (total / layers, total % layers);
    Ok(PruneBudget {
        retain_fraction,
        per_layer_removals: (0..layers).map(|i| base + usize::from(i < rem)).collect(),
        modality,
    })
}

/// Action views (one per navigable edge) and background views of a panorama.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViewPartition {
    action_ids: Vec<TokenId>,
    background_ids: Vec<TokenId>,
}

impl ViewPartition {
    pub fn new(action_ids: Vec<TokenId>, background_ids: Vec<TokenId>) -> Result<Self, PruneError> {
        if let Some(id) = action_ids.iter().find(|a| background_ids.contains(a)) {
            return Err(PruneError::OverlappingPartition(*id));
        }
        Ok(ViewPartition {
            action_ids,
            background_ids,
        })
    }

    pub fn action_ids(&self) -> &[TokenId] {
        &self.action_ids
    }

    pub fn background_ids(&self) -> &[TokenId] {
        &self.background_ids
    }

    pub fn len(&self) -> usize {
        self.action_ids.len() + self.background_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    Bgp,
    Vpp,
    Btp,
    Random,
    Cascade,
    Fastv,
    Tome,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Bgp => "bgp",
            StrategyKind::Vpp => "vpp",
            StrategyKind::Btp => "btp",
            StrategyKind::Random => "random",
            StrategyKind::Cascade => "cascade",
            StrategyKind::Fastv => "fastv",
            StrategyKind::Tome => "tome",
        }
    }

    pub fn default_modality(self) -> Modality {
        match self {
            StrategyKind::Vpp => Modality::Instruction,
            StrategyKind::Btp => Modality::History,
            _ => Modality::Views,
        }
    }

    fn allowed(self, m: Modality) -> bool {
        match self {
            StrategyKind::Bgp => m == Modality::Views,
            StrategyKind::Vpp => m == Modality::Instruction,
            StrategyKind::Btp => m == Modality::History,
            _ => m != Modality::History,
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "bgp" => StrategyKind::Bgp,
            "vpp" => StrategyKind::Vpp,
            "btp" => StrategyKind::Btp,
            "random" => StrategyKind::Random,
            "cascade" => StrategyKind::Cascade,
            "fastv" => StrategyKind::Fastv,
            "tome" => StrategyKind::Tome,
            _ => return Err(format!("unknown strategy kind {s:?}")),
        })
    }
}

/// One strategy applied to one modality.
///
/// `param` is the fastv prune layer, the tome merges per layer or k_BTP.
/// When absent, fastv uses layer 2, tome follows the budget schedule and
/// btp takes k_BTP from the episode config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub modality: Modality,
    pub param: Option<usize>,
    pub protect_action_views: bool,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        StrategySpec {
            kind,
            modality: kind.default_modality(),
            param: None,
            protect_action_views: true,
        }
    }

    pub fn on(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn with_param(mut self, p: usize) -> Self {
        self.param = Some(p);
        self
    }

    pub fn unprotected(mut self) -> Self {
        self.protect_action_views = false;
        self
    }

    pub fn fastv_layer(&self) -> usize {
        self.param.unwrap_or(DEFAULT_FASTV_LAYER)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        if self.modality != self.kind.default_modality() {
            write!(f, "@{}", self.modality)?;
        }
        if let Some(p) = self.param {
            write!(f, ":{p}")?;
        }
        if !self.protect_action_views {
            f.write_str("!")?;
        }
        Ok(())
    }
}

impl FromStr for StrategySpec {
    type Err = PruneError;

    /// `kind[@modality][:param][!]`; a trailing `!` turns action-view
    /// protection off.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: String| PruneError::BadStrategy {
            spec: s.to_string(),
            reason,
        };
        let mut rest = s.trim();
        let protect = match rest.strip_suffix('!') {
            Some(r) => {
                rest = r;
                false
            }
            None => true,
        };
        let param = match rest.split_once(':') {
            Some((head, p)) => {
                rest = head;
                Some(p.parse::<usize>().map_err(|e| bad(e.to_string()))?)
            }
            None => None,
        };
        let (kind, modality) = match rest.split_once('@') {
            Some((k, m)) => {
                let kind: StrategyKind = k.parse().map_err(bad)?;
                (kind, m.parse().map_err(bad)?)
            }
            None => {
                let kind: StrategyKind = rest.parse().map_err(bad)?;
                (kind, kind.default_modality())
            }
        };
        if !kind.allowed(modality) {
            return Err(bad(format!("{} cannot prune {modality}", kind.name())));
        }
        Ok(StrategySpec {
            kind,
            modality,
            param,
            protect_action_views: protect,
        })
    }
}

/// Parse a `+`-joined strategy list. `none` is the empty list and `nap`
/// expands to `bgp+vpp+btp:6`.
pub fn parse_strategies(s: &str) -> Result<Vec<StrategySpec>, PruneError> {
    let mut out: Vec<StrategySpec> = Vec::new();
    for part in s.split('+').map(str::trim) {
        match part {
            "none" | "" => {}
            "nap" => out.extend(parse_strategies("bgp+vpp+btp:6")?),
            p => out.push(p.parse()?),
        }
    }
    for (i, a) in out.iter().enumerate() {
        if out[..i].iter().any(|b| b.modality == a.modality) {
            return Err(PruneError::BadStrategy {
                spec: s.to_string(),
                reason: format!("two strategies target {}", a.modality),
            });
        }
    }
    Ok(out)
}

pub fn strategies_label(specs: &[StrategySpec]) -> String {
    if specs.is_empty() {
        return "none".to_string();
    }
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
}
