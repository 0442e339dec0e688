//! Feature-matching navigation agent.
//!
//! The policy walks a pointer along the retained relevant instruction
//! tokens and, at each node, picks the action whose target looks most like
//! the current landmark: an action view of the current panorama, a jump back
//! to an unvisited node on the topological map, or stop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    init_weights, run_stack, simulate_stack, EncoderConfig, EncoderWeights, FeatureSeq, ImportanceScores,
    LayerHook, NoPrune, StackRun, Token, TokenId,
};
use crate::flops::{ledger_from_shapes, FlopsLedger, LayerShape, ModelDims, StepShapes};
use crate::pruning::{
    btp_prune, schedule_budget, LayerPruner, Modality, StrategyKind, StrategySpec, ViewPartition,
};
use crate::rng::{self, cosine};
use crate::vocabulary::Vocabulary;
use crate::worldgen::{importance_oracle, view_oracle, OracleConfig, ViewKind, World};

pub type NodeId = usize;

const VIEW_BASE: u32 = 1 << 20;
const HIST_BASE: u32 = 1 << 21;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("vocabulary required by vpp but none given")]
    MissingVocabulary,
    #[error("attention mode needs encoder weights")]
    MissingEncoders,
    #[error("encoder width {encoder} does not match world hidden_dim {world}")]
    DimMismatch { encoder: usize, world: usize },
    #[error("malformed state: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Visited,
    Unvisited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapNode {
    pub status: NodeStatus,
    pub feature: Vec<f64>,
    pub latest_score: f64,
    pub discovery_step: usize,
}

/// Discovered part of the house: visited nodes and the unvisited nodes seen
/// from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoMap {
    nodes: BTreeMap<NodeId, MapNode>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    current: NodeId,
}

impl TopoMap {
    pub fn new(start: NodeId, feature: Vec<f64>) -> Self {
        let node = MapNode {
            status: NodeStatus::Visited,
            feature,
            latest_score: 0.0,
            discovery_step: 0,
        };
        TopoMap {
            nodes: BTreeMap::from([(start, node)]),
            adjacency: BTreeMap::from([(start, BTreeSet::new())]),
            current: start,
        }
    }

    pub fn current(&self) -> NodeId {
        self.current
    }

    pub fn node(&self, id: NodeId) -> Option<&MapNode> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        self.adjacency.get(&id).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &MapNode)> {
        self.nodes.iter().map(|(k, v)| (*k, v))
    }

    pub fn unvisited(&self) -> impl Iterator<Item = (NodeId, &MapNode)> {
        self.nodes().filter(|(_, n)| n.status == NodeStatus::Unvisited)
    }

    pub fn unvisited_count(&self) -> usize {
        self.unvisited().count()
    }

    pub fn is_visited(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.status == NodeStatus::Visited)
    }

    fn link(&mut self, a: NodeId, b: NodeId) {
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
    }

    /// Record `id` as seen from visited node `from`. A new node enters as
    /// unvisited; an unvisited node takes the new score and feature.
    pub fn observe(&mut self, id: NodeId, from: NodeId, feature: Vec<f64>, score: f64, step: usize) {
        match self.nodes.get_mut(&id) {
            Some(n) if n.status == NodeStatus::Unvisited => {
                n.latest_score = score;
                n.feature = feature;
            }
            Some(_) => {}
            None => {
                self.nodes.insert(
                    id,
                    MapNode {
                        status: NodeStatus::Unvisited,
                        feature,
                        latest_score: score,
                        discovery_step: step,
                    },
                );
            }
        }
        self.link(from, id);
    }

    /// Mark `id` visited and make it current, linking it to the previous
    /// current node.
    pub fn visit(&mut self, id: NodeId, feature: Vec<f64>, step: usize) {
        let prev = self.current;
        let n = self.nodes.entry(id).or_insert(MapNode {
            status: NodeStatus::Visited,
            feature,
            latest_score: 0.0,
            discovery_step: step,
        });
        n.status = NodeStatus::Visited;
        if prev != id && !self.adjacency.get(&prev).is_some_and(|s| s.contains(&id)) {
            // Jumps reach nodes already linked through the map; a fresh link
            // only appears for a direct move.
            self.link(prev, id);
        }
        self.current = id;
    }

    pub fn remove_unvisited(&mut self, id: NodeId) {
        if self.nodes.get(&id).is_some_and(|n| n.status == NodeStatus::Unvisited) {
            self.nodes.remove(&id);
            if let Some(ns) = self.adjacency.remove(&id) {
                for n in ns {
                    if let Some(s) = self.adjacency.get_mut(&n) {
                        s.remove(&id);
                    }
                }
            }
        }
    }

    /// Shortest route from the current node to `target` whose intermediate
    /// nodes are all visited, excluding the current node and including the
    /// target.
    pub fn route_to(&self, target: NodeId) -> Option<Vec<NodeId>> {
        let mut prev: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut q = VecDeque::from([self.current]);
        let mut seen = BTreeSet::from([self.current]);
        while let Some(n) = q.pop_front() {
            if n == target {
                let mut route = vec![n];
                let mut cur = n;
                while let Some(&p) = prev.get(&cur) {
                    if p == self.current {
                        break;
                    }
                    route.push(p);
                    cur = p;
                }
                route.reverse();
                return Some(route);
            }
            if n != self.current && !self.is_visited(n) {
                continue;
            }
            for m in self.neighbors(n) {
                if seen.insert(m) {
                    prev.insert(m, n);
                    q.push_back(m);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub gamma: f64,
    pub tau: f64,
    pub theta_stop: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            gamma: 0.9,
            tau: 0.95,
            theta_stop: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Stop,
    Navigate { view: usize, node: NodeId },
    Backtrack { node: NodeId, hops: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionChoice {
    pub kind: ActionKind,
    pub score: f64,
    /// Cosine to the current target before any decay.
    pub match_cos: f64,
}

/// A retained action view as the policy sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionView {
    pub slot: usize,
    pub dest: NodeId,
    pub feature: Vec<f64>,
}

fn rank(kind: &ActionKind) -> (u8, usize) {
    match kind {
        ActionKind::Stop => (0, 0),
        ActionKind::Navigate { node, .. } => (1, *node),
        ActionKind::Backtrack { node, .. } => (2, *node),
    }
}

/// Pick the best action. `targets` are the embeddings of retained relevant
/// tokens and `p` the pointer into them.
pub fn step(
    targets: &[Vec<f64>],
    p: usize,
    views: &[ActionView],
    map: &TopoMap,
    policy: &PolicyParams,
) -> ActionChoice {
    let stop = ActionChoice {
        kind: ActionKind::Stop,
        score: policy.theta_stop,
        match_cos: 0.0,
    };
    let Some(target) = targets.get(p) else {
        return stop;
    };
    let mut options = vec![stop];
    for v in views.iter().filter(|v| !map.is_visited(v.dest)) {
        let c = cosine(&v.feature, target);
        options.push(ActionChoice {
            kind: ActionKind::Navigate { view: v.slot, node: v.dest },
            score: c,
            match_cos: c,
        });
    }
    for (id, n) in map.unvisited() {
        let Some(route) = map.route_to(id) else { continue };
        let c = cosine(&n.feature, target);
        options.push(ActionChoice {
            kind: ActionKind::Backtrack {
                node: id,
                hops: route.len(),
            },
            score: c * policy.gamma.powi(route.len() as i32),
            match_cos: c,
        });
    }
    options
        .into_iter()
        .reduce(|best, o| {
            let better = o.score > best.score || (o.score == best.score && rank(&o.kind) < rank(&best.kind));
            if better {
                o
            } else {
                best
            }
        })
        .expect("stop is always an option")
}

/// True iff `stop` lies within `success_hops` of `goal`.
pub fn judge_success(world: &World, stop: NodeId, goal: NodeId, success_hops: usize) -> bool {
    world.house.distance(stop, goal).is_some_and(|d| d <= success_hops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceMode {
    Oracle,
    Attention,
}

impl FromStr for ImportanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(ImportanceMode::Oracle),
            "attention" => Ok(ImportanceMode::Attention),
            _ => Err(format!("unknown importance source {s:?}")),
        }
    }
}

impl fmt::Display for ImportanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceMode::Oracle => "oracle",
            ImportanceMode::Attention => "attention",
        })
    }
}

/// Seeded weights of the language, view and cross-modal stacks.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub lang: EncoderWeights,
    pub vis: EncoderWeights,
    pub cm: EncoderWeights,
}

impl Encoders {
    pub fn new(dims: &ModelDims, heads: usize, seed: u64) -> crate::Result<Self> {
        let cfg = |layers, tag| EncoderConfig {
            layers,
            heads,
            hidden_dim: dims.hidden_dim as usize,
            ffn_mult: dims.ffn_mult as usize,
            seed: rng::derive_seed(seed, tag, 0),
        };
        Ok(Encoders {
            lang: init_weights(&cfg(dims.lan_layers, "lang"))?,
            vis: init_weights(&cfg(dims.vis_layers, "vis"))?,
            cm: init_weights(&cfg(dims.cm_layers, "cm"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub strategies: Vec<StrategySpec>,
    /// Retain fraction for the instruction and view strategies.
    pub retain: f64,
    /// k_BTP for a btp strategy without its own parameter.
    pub k_btp: usize,
    pub importance: ImportanceMode,
    pub oracle: OracleConfig,
    pub policy: PolicyParams,
    pub lan_layers: usize,
    pub vis_layers: usize,
    pub cm_layers: usize,
    pub ffn_mult: usize,
    /// Step cap as a multiple of the ground-truth path's node count.
    pub t_max_factor: usize,
    pub success_hops: usize,
    /// Skip attention rows of background views in the view stack.
    pub sas: bool,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            strategies: Vec::new(),
            retain: 1.0,
            k_btp: 6,
            importance: ImportanceMode::Oracle,
            oracle: OracleConfig::default(),
            policy: PolicyParams::default(),
            lan_layers: 6,
            vis_layers: 2,
            cm_layers: 3,
            ffn_mult: 4,
            t_max_factor: 3,
            success_hops: 0,
            sas: false,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn dims(&self, hidden_dim: usize) -> ModelDims {
        ModelDims {
            hidden_dim: hidden_dim as u64,
            ffn_mult: self.ffn_mult as u64,
            lan_layers: self.lan_layers,
            vis_layers: self.vis_layers,
            cm_layers: self.cm_layers,
        }
    }

    fn strategy(&self, m: Modality) -> Option<StrategySpec> {
        self.strategies.iter().copied().find(|s| s.modality == m)
    }

    fn k_btp(&self) -> Option<usize> {
        self.strategy(Modality::History)
            .filter(|s| s.kind == StrategyKind::Btp)
            .map(|s| s.param.unwrap_or(self.k_btp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepPruneLog {
    pub views: usize,
    pub history: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: usize,
    pub action: ActionKind,
    pub score: f64,
    pub instruction_tokens: usize,
    pub view_tokens: usize,
    pub history_tokens: usize,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, target) = match self.action {
            ActionKind::Stop => ("stop", "-".to_string()),
            ActionKind::Navigate { view, node } => ("navigate", format!("{node}@view{view}")),
            ActionKind::Backtrack { node, hops } => ("backtrack", format!("{node}+{hops}")),
        };
        write!(
            f,
            "step={} kind={kind} target={target} score={:.4} instr={} views={} history={}",
            self.step, self.score, self.instruction_tokens, self.view_tokens, self.history_tokens
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Node moves plus the stop decision, or the cap on timeout.
    pub steps: usize,
    pub decisions: usize,
    pub path: Vec<NodeId>,
    pub flops: FlopsLedger,
    /// Multiply-add based count from the encoders; attention mode only.
    pub instrumented_flops: Option<u64>,
    pub instruction_removed: usize,
    pub prune_log: Vec<StepPruneLog>,
    /// Unvisited nodes right after map pruning, per decision.
    pub unvisited_after_prune: Vec<usize>,
    pub trace: Vec<TraceLine>,
    pub timed_out: bool,
}

fn run(
    seq: &FeatureSeq,
    layers: usize,
    weights: Option<&EncoderWeights>,
    hook: &mut dyn LayerHook,
    oracle: &ImportanceScores,
    mask: &BTreeSet<TokenId>,
) -> crate::Result<StackRun> {
    match weights {
        Some(w) => run_stack(seq, w, hook, mask),
        None => simulate_stack(seq, layers, hook, oracle, mask),
    }
}

fn mean_of(features: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let all: Vec<Vec<f64>> = features.collect();
    let n = all.len() as f64;
    let mut out = vec![0.0; all.first().map_or(0, Vec::len)];
    for f in &all {
        out.iter_mut().zip(f).for_each(|(a, b)| *a += b / n);
    }
    out
}

fn retag(tokens: &[Token], base: u32) -> Vec<Token> {
    tokens
        .iter()
        .map(|t| Token {
            id: TokenId(t.id.0 + base),
            ..t.clone()
        })
        .collect()
}

/// Run one episode of `world` under `cfg`. Attention mode requires
/// `encoders`; vpp requires `vocab`.
pub fn run_episode(
    world: &World,
    cfg: &EpisodeConfig,
    encoders: Option<&Encoders>,
    vocab: Option<&Vocabulary>,
) -> crate::Result<EpisodeResult> {
    let dim = world.panoramas.hidden_dim;
    let dims = cfg.dims(dim);
    let attention = cfg.importance == ImportanceMode::Attention;
    let enc = match (attention, encoders) {
        (true, None) => return Err(AgentError::MissingEncoders.into()),
        (true, Some(e)) => {
            if e.lang.config().hidden_dim != dim {
                return Err(AgentError::DimMismatch {
                    encoder: e.lang.config().hidden_dim,
                    world: dim,
                }
                .into());
            }
            Some(e)
        }
        (false, _) => None,
    };
    let (lan_layers, vis_layers, cm_layers) = match enc {
        Some(e) => (e.lang.config().layers, e.vis.config().layers, e.cm.config().layers),
        None => (cfg.lan_layers, cfg.vis_layers, cfg.cm_layers),
    };
    let dims = ModelDims {
        lan_layers,
        vis_layers,
        cm_layers,
        ffn_mult: enc.map_or(dims.ffn_mult, |e| e.lang.config().ffn_mult as u64),
        ..dims
    };
    let mut macs = 0u64;

    // Instruction: encoded once per episode.
    let instr = &world.instruction;
    let instr_seq = FeatureSeq::from_features(instr.tokens.iter().map(|t| t.embedding.clone()).collect());
    let instr_oracle = importance_oracle(
        instr,
        &OracleConfig {
            seed: rng::derive_seed(cfg.seed, "instruction-oracle", 0),
            ..cfg.oracle
        },
    );
    let instr_run = match cfg.strategy(Modality::Instruction) {
        Some(spec) => {
            let budget = schedule_budget(cfg.retain, lan_layers, instr.len(), Modality::Instruction)?;
            let mut pruner = LayerPruner::new(spec, &budget, rng::derive_seed(cfg.seed, "instr-pruner", 0))?
                .with_fixed([TokenId(0)]);
            if spec.kind == StrategyKind::Vpp {
                let vocab = vocab.ok_or(AgentError::MissingVocabulary)?;
                pruner = pruner.with_members(
                    instr
                        .id_texts()
                        .into_iter()
                        .filter(|(_, t)| vocab.contains(t))
                        .map(|(id, _)| id),
                );
            }
            run(&instr_seq, lan_layers, enc.map(|e| &e.lang), &mut pruner, &instr_oracle, &BTreeSet::new())?
        }
        None => run(&instr_seq, lan_layers, enc.map(|e| &e.lang), &mut NoPrune, &instr_oracle, &BTreeSet::new())?,
    };
    macs += instr_run.macs;
    let instr_shapes = instr_run.shapes.clone();
    let instruction_removed = instr.len() - instr_run.output.len();
    let instr_out = instr_run.output.into_tokens();
    let targets: Vec<Vec<f64>> = instr_out
        .iter()
        .filter(|t| instr.tokens[t.id.0 as usize].relevant)
        .map(|t| mean_of(t.origins.iter().map(|&o| instr.tokens[o].embedding.clone())))
        .collect();

    let house = &world.house;
    let t_max = cfg.t_max_factor * house.gt_path.len();
    let view_spec = cfg.strategy(Modality::Views);
    let k_btp = cfg.k_btp();
    let mut map = TopoMap::new(house.start, world.panoramas.landmarks[house.start].clone());
    let mut p = 0usize;
    let mut moves = 0usize;
    let mut path = vec![house.start];
    let mut steps_shapes: Vec<StepShapes> = Vec::new();
    let mut prune_log = Vec::new();
    let mut unvisited_after_prune = Vec::new();
    let mut trace = Vec::new();
    let mut stopped_at = None;

    while moves < t_max {
        let decision = steps_shapes.len();
        let mut log_entry = StepPruneLog::default();
        if let Some(k) = k_btp {
            let before = map.unvisited_count();
            map = btp_prune(&map, k);
            log_entry.history = before - map.unvisited_count();
        }
        unvisited_after_prune.push(map.unvisited_count());

        let here = map.current();
        let pano = &world.panoramas.views[here];
        let n_views = pano.len();
        let view_seq = FeatureSeq::from_features(pano.iter().map(|v| v.feature.clone()).collect());
        let action_ids: Vec<TokenId> = (0..n_views)
            .filter(|&s| pano[s].kind != ViewKind::Background)
            .map(|s| TokenId(s as u32))
            .collect();
        let background_ids: Vec<TokenId> = (0..n_views)
            .filter(|&s| pano[s].kind == ViewKind::Background)
            .map(|s| TokenId(s as u32))
            .collect();
        let partition = ViewPartition::new(action_ids, background_ids)?;
        let mask = if cfg.sas {
            crate::pruning::sas_mask(&partition)
        } else {
            BTreeSet::new()
        };
        let step_oracle = OracleConfig {
            seed: rng::derive_seed(cfg.seed, "view-oracle", 0),
            ..cfg.oracle
        };
        let view_scores = view_oracle(n_views, &step_oracle, decision as u64);
        let view_run = match view_spec {
            Some(spec) => {
                let budget = schedule_budget(cfg.retain, vis_layers, n_views, Modality::Views)?;
                let seed = rng::derive_seed(cfg.seed, "view-pruner", decision as u64);
                let mut pruner = LayerPruner::new(spec, &budget, seed)?.with_actions(partition.action_ids().to_vec());
                run(&view_seq, vis_layers, enc.map(|e| &e.vis), &mut pruner, &view_scores, &mask)?
            }
            None => run(&view_seq, vis_layers, enc.map(|e| &e.vis), &mut NoPrune, &view_scores, &mask)?,
        };
        macs += view_run.macs;
        log_entry.views = n_views - view_run.output.len();

        // Cross-modal stack over retained instruction, retained views and
        // every map node.
        let hist_nodes: Vec<NodeId> = map.nodes().map(|(id, _)| id).collect();
        let cm_len = (instr_out.len() + view_run.output.len() + hist_nodes.len()) as u64;
        let (cm_shapes, latest): (Vec<LayerShape>, ImportanceScores) = match enc {
            Some(e) => {
                let mut tokens = instr_out.clone();
                tokens.extend(retag(view_run.output.tokens(), VIEW_BASE));
                tokens.extend(hist_nodes.iter().map(|&n| Token {
                    id: TokenId(HIST_BASE + n as u32),
                    feature: map.node(n).expect("listed").feature.clone(),
                    origins: vec![0],
                }));
                let seq = FeatureSeq::new(tokens)?;
                let cm = run_stack(&seq, &e.cm, &mut NoPrune, &BTreeSet::new())?;
                macs += cm.macs;
                let last = cm.scores.last().expect("at least one layer");
                let latest = ImportanceScores::from_pairs(
                    (0..n_views as u32).map(|s| (TokenId(s), last.get(TokenId(s + VIEW_BASE)).unwrap_or(0.0))),
                );
                (cm.shapes, latest)
            }
            None => (vec![LayerShape::uniform(cm_len); cm_layers], view_scores.clone()),
        };
        steps_shapes.push(StepShapes {
            views: view_run.shapes.clone(),
            cm: cm_shapes,
        });

        let retained_views: Vec<ActionView> = view_run
            .output
            .tokens()
            .iter()
            .filter_map(|t| match pano[t.id.0 as usize].kind {
                ViewKind::Action(dest) => Some(ActionView {
                    slot: t.id.0 as usize,
                    dest,
                    feature: mean_of(t.origins.iter().map(|&o| pano[o].feature.clone())),
                }),
                ViewKind::Background => None,
            })
            .collect();
        let choice = step(&targets, p, &retained_views, &map, &cfg.policy);
        trace.push(TraceLine {
            step: decision + 1,
            action: choice.kind,
            score: choice.score,
            instruction_tokens: instr_out.len(),
            view_tokens: view_run.output.len(),
            history_tokens: hist_nodes.len(),
        });
        prune_log.push(log_entry);

        for v in &retained_views {
            if !map.is_visited(v.dest) {
                let score = latest.get(TokenId(v.slot as u32)).unwrap_or(0.0);
                map.observe(v.dest, here, v.feature.clone(), score, decision + 1);
            }
        }
        match choice.kind {
            ActionKind::Stop => {
                stopped_at = Some(here);
                break;
            }
            ActionKind::Navigate { node, .. } => {
                map.visit(node, world.panoramas.landmarks[node].clone(), decision + 1);
                path.push(node);
                moves += 1;
            }
            ActionKind::Backtrack { node, .. } => {
                let route = map
                    .route_to(node)
                    .ok_or_else(|| AgentError::Malformed(format!("no route to {node}")))?;
                for &n in &route {
                    map.visit(n, world.panoramas.landmarks[n].clone(), decision + 1);
                    path.push(n);
                }
                moves += route.len();
            }
        }
        if choice.kind != ActionKind::Stop && choice.match_cos >= cfg.policy.tau {
            p += 1;
        }
    }

    let timed_out = stopped_at.is_none();
    let success = stopped_at.is_some_and(|n| judge_success(world, n, house.goal, cfg.success_hops));
    let steps = if timed_out { t_max } else { moves + 1 };
    let flops = ledger_from_shapes(&instr_shapes, &steps_shapes, &dims, 0)?;
    Ok(EpisodeResult {
        success,
        steps,
        decisions: steps_shapes.len(),
        path,
        flops,
        instrumented_flops: attention.then_some(macs * crate::flops::FLOPS_PER_MAC),
        instruction_removed,
        prune_log,
        unvisited_after_prune,
        trace,
        timed_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::parse_strategies;
    use crate::worldgen::{generate_world, WorldConfig};

    fn clean() -> WorldConfig {
        WorldConfig {
            sigma_feat: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn map_tracks_visits_and_routes() {
        let mut m = TopoMap::new(0, vec![1.0]);
        m.observe(1, 0, vec![1.0], 0.3, 1);
        m.observe(2, 0, vec![1.0], 0.4, 1);
        m.visit(1, vec![1.0], 1);
        m.observe(3, 1, vec![1.0], 0.1, 2);
        assert_eq!(m.current(), 1);
        assert_eq!(m.route_to(2), Some(vec![0, 2]));
        assert_eq!(m.route_to(3), Some(vec![3]));
        assert_eq!(m.unvisited_count(), 2);
        m.observe(2, 0, vec![1.0], 0.9, 3);
        assert_eq!(m.node(2).unwrap().latest_score, 0.9);
        assert_eq!(m.node(2).unwrap().discovery_step, 1);
    }

    #[test]
    fn no_targets_forces_stop() {
        let m = TopoMap::new(0, vec![1.0]);
        let views = [ActionView {
            slot: 0,
            dest: 1,
            feature: vec![1.0],
        }];
        let c = step(&[], 0, &views, &m, &PolicyParams::default());
        assert_eq!(c.kind, ActionKind::Stop);
    }

    #[test]
    fn ties_prefer_stop_then_navigate() {
        let m = TopoMap::new(0, vec![1.0, 0.0]);
        let views = [ActionView {
            slot: 3,
            dest: 7,
            feature: vec![0.5, 0.75f64.sqrt()],
        }];
        let c = step(&[vec![1.0, 0.0]], 0, &views, &m, &PolicyParams::default());
        assert!((cosine(&views[0].feature, &[1.0, 0.0]) - 0.5).abs() < 1e-12);
        assert!(matches!(c.kind, ActionKind::Stop | ActionKind::Navigate { .. }));
        let exact = PolicyParams {
            theta_stop: cosine(&views[0].feature, &[1.0, 0.0]),
            ..Default::default()
        };
        assert_eq!(step(&[vec![1.0, 0.0]], 0, &views, &m, &exact).kind, ActionKind::Stop);
    }

    #[test]
    fn success_judgement() {
        let w = generate_world(&clean(), 1).unwrap();
        let g = w.house.goal;
        let adj = w.house.neighbors(g)[0];
        assert!(judge_success(&w, g, g, 0));
        assert!(!judge_success(&w, adj, g, 0));
        assert!(judge_success(&w, adj, g, 1));
    }

    #[test]
    fn clean_worlds_are_solved_along_the_path() {
        for seed in 0..20 {
            let w = generate_world(&clean(), seed).unwrap();
            let r = run_episode(&w, &EpisodeConfig::default(), None, None).unwrap();
            assert!(r.success, "seed {seed}");
            assert_eq!(r.steps, w.house.gt_path.len());
            assert_eq!(r.path, w.house.gt_path);
            assert!(r.prune_log.iter().all(|l| *l == StepPruneLog::default()));
        }
    }

    #[test]
    fn zero_btp_leaves_no_backtrack_targets() {
        let w = generate_world(&WorldConfig::default(), 3).unwrap();
        let cfg = EpisodeConfig {
            strategies: parse_strategies("btp:0").unwrap(),
            ..Default::default()
        };
        let r = run_episode(&w, &cfg, None, None).unwrap();
        assert!(r.unvisited_after_prune.iter().all(|&u| u == 0));
        assert!(r.trace.iter().all(|t| !matches!(t.action, ActionKind::Backtrack { .. })));
    }

    #[test]
    fn attention_mode_counts_match_ledger() {
        let w = generate_world(&WorldConfig::default(), 5).unwrap();
        let cfg = EpisodeConfig {
            importance: ImportanceMode::Attention,
            strategies: parse_strategies("bgp+cascade@instruction+btp:4").unwrap(),
            retain: 0.6,
            ..Default::default()
        };
        let enc = Encoders::new(&cfg.dims(64), 4, 11).unwrap();
        let r = run_episode(&w, &cfg, Some(&enc), None).unwrap();
        assert_eq!(r.instrumented_flops, Some(r.flops.g_total()));
    }

    #[test]
    fn vpp_needs_a_vocabulary() {
        let w = generate_world(&WorldConfig::default(), 5).unwrap();
        let cfg = EpisodeConfig {
            strategies: parse_strategies("vpp").unwrap(),
            retain: 0.5,
            ..Default::default()
        };
        assert!(run_episode(&w, &cfg, None, None).is_err());
    }
}
