//! Seeded synthetic navigation worlds.
//!
//! A world is a tree-shaped house graph with a ground-truth path, one
//! panorama per node and an instruction naming the landmark of every node
//! along the path, padded with function-word fillers.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ImportanceScores, TokenId};
use crate::rng::{self, cosine, normalize};
use crate::vocabulary::{function_word_list, BOS, EOS};

const WORLD_HEADER: &str = "# navprune-world v1";
const LANDMARK_COS_LIMIT: f64 = 0.85;
const LANDMARK_ATTEMPTS: usize = 10_000;

const LANDMARK_WORDS: &[&str] = &[
    "kitchen", "bedroom", "bathroom", "hallway", "stairs", "sofa", "couch", "table", "doorway",
    "fireplace", "piano", "bookshelf", "bed", "sink", "mirror", "painting", "window", "closet",
    "lamp", "rug", "chair", "desk", "fridge", "oven", "bathtub", "shower", "toilet", "balcony",
    "patio", "garden", "pool", "garage", "laundry", "pantry", "office", "library", "lounge",
    "porch", "landing", "corridor", "archway", "plant", "statue", "counter", "cabinet", "dresser",
    "wardrobe", "television", "armchair", "bench", "column", "fountain", "railing", "staircase",
    "vase", "clock", "curtain", "shelf", "stool", "entrance",
];

const FILLER_PUNCT: &[&str] = &[".", ","];

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("infeasible world parameters: {0}")]
    Infeasible(String),
    #[error("could not separate landmark features after {0} draws")]
    LandmarkSeparation(usize),
    #[error("version header mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },
    #[error("malformed world file line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseGraph {
    /// Landmark word of each node.
    pub tags: Vec<String>,
    /// Sorted neighbour lists.
    pub adjacency: Vec<Vec<usize>>,
    pub start: usize,
    pub goal: usize,
    pub gt_path: Vec<usize>,
    pub max_degree: usize,
}

impl HouseGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for (a, ns) in self.adjacency.iter().enumerate() {
            e.extend(ns.iter().filter(|&&b| a < b).map(|&b| (a, b)));
        }
        e
    }

    /// Hop distance, or `None` when unreachable.
    pub fn distance(&self, from: usize, to: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        let mut q = VecDeque::from([from]);
        dist[from] = 0;
        while let Some(n) = q.pop_front() {
            if n == to {
                return Some(dist[n]);
            }
            for &m in &self.adjacency[n] {
                if dist[m] == usize::MAX {
                    dist[m] = dist[n] + 1;
                    q.push_back(m);
                }
            }
        }
        None
    }

    fn connect(&mut self, a: usize, b: usize) {
        self.adjacency[a].push(b);
        self.adjacency[b].push(a);
    }
}

/// A tree: the ground-truth path first, then every other node hung off a
/// random node that still has spare degree. `path_len` counts nodes.
pub fn generate_house(
    seed: u64,
    n_nodes: usize,
    path_len: usize,
    max_degree: usize,
) -> Result<HouseGraph, WorldError> {
    if path_len < 2 {
        return Err(WorldError::Infeasible(format!("path_len {path_len} < 2")));
    }
    if path_len >= n_nodes {
        return Err(WorldError::Infeasible(format!("path_len {path_len} >= n_nodes {n_nodes}")));
    }
    if max_degree < 2 {
        return Err(WorldError::Infeasible(format!("max_degree {max_degree} < 2")));
    }
    let mut rng = rng::stream(seed, "house", 0);
    let mut ids: Vec<usize> = (0..n_nodes).collect();
    ids.shuffle(&mut rng);
    let mut g = HouseGraph {
        tags: (0..n_nodes)
            .map(|_| LANDMARK_WORDS[rng.random_range(0..LANDMARK_WORDS.len())].to_string())
            .collect(),
        adjacency: vec![Vec::new(); n_nodes],
        start: ids[0],
        goal: ids[path_len - 1],
        gt_path: ids[..path_len].to_vec(),
        max_degree,
    };
    for w in ids[..path_len].windows(2) {
        g.connect(w[0], w[1]);
    }
    let mut placed: Vec<usize> = ids[..path_len].to_vec();
    for &n in &ids[path_len..] {
        let open: Vec<usize> = placed.iter().copied().filter(|&p| g.degree(p) < max_degree).collect();
        let parent = open[rng.random_range(0..open.len())];
        g.connect(parent, n);
        placed.push(n);
    }
    for ns in &mut g.adjacency {
        ns.sort_unstable();
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    /// Faces the edge to the given node.
    Action(usize),
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub kind: ViewKind,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaSpec {
    pub hidden_dim: usize,
    pub landmarks: Vec<Vec<f64>>,
    /// `views[node][slot]`.
    pub views: Vec<Vec<View>>,
}

impl PanoramaSpec {
    pub fn views_per_node(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }
}

fn scaled_sum(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// Unit landmark per node, mixing a shared house style (weight
/// `similarity`) with a per-node component, redrawn until every pair's
/// cosine is below 0.85. Action views show the destination landmark plus
/// N(0, sigma_feat²) noise, renormalized; backgrounds are random unit
/// vectors.
pub fn generate_panoramas(
    house: &HouseGraph,
    hidden_dim: usize,
    views_per_node: usize,
    sigma_feat: f64,
    similarity: f64,
    seed: u64,
) -> Result<PanoramaSpec, WorldError> {
    if views_per_node < house.max_degree {
        return Err(WorldError::Infeasible(format!(
            "{views_per_node} views cannot hold max_degree {}",
            house.max_degree
        )));
    }
    if !(0.0..1.0).contains(&similarity) || !(sigma_feat >= 0.0) || hidden_dim == 0 {
        return Err(WorldError::Infeasible(format!(
            "similarity {similarity}, sigma_feat {sigma_feat}, hidden_dim {hidden_dim}"
        )));
    }
    let mut rng = rng::stream(seed, "landmarks", 0);
    let style = rng::unit_vec(&mut rng, hidden_dim);
    let mut landmarks: Vec<Vec<f64>> = Vec::with_capacity(house.len());
    let mut attempts = 0;
    while landmarks.len() < house.len() {
        attempts += 1;
        if attempts > LANDMARK_ATTEMPTS {
            return Err(WorldError::LandmarkSeparation(LANDMARK_ATTEMPTS));
        }
        let own = rng::unit_vec(&mut rng, hidden_dim);
        let l = normalize(scaled_sum(&style, similarity.sqrt(), &own, (1.0 - similarity).sqrt()));
        if landmarks.iter().all(|m| cosine(m, &l) < LANDMARK_COS_LIMIT) {
            landmarks.push(l);
        }
    }
    let mut rng = rng::stream(seed, "views", 0);
    let views = (0..house.len())
        .map(|node| {
            let mut slots: Vec<usize> = (0..views_per_node).collect();
            slots.shuffle(&mut rng);
            let mut kinds = vec![ViewKind::Background; views_per_node];
            for (&dest, &slot) in house.neighbors(node).iter().zip(&slots) {
                kinds[slot] = ViewKind::Action(dest);
            }
            kinds
                .into_iter()
                .map(|kind| {
                    let feature = match kind {
                        ViewKind::Action(dest) if sigma_feat == 0.0 => landmarks[dest].clone(),
                        ViewKind::Action(dest) => {
                            let noise = rng::normal_vec(&mut rng, hidden_dim);
                            normalize(scaled_sum(&landmarks[dest], 1.0, &noise, sigma_feat))
                        }
                        ViewKind::Background => rng::unit_vec(&mut rng, hidden_dim),
                    };
                    View { kind, feature }
                })
                .collect()
        })
        .collect();
    Ok(PanoramaSpec {
        hidden_dim,
        landmarks,
        views,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionToken {
    pub text: String,
    pub embedding: Vec<f64>,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticInstruction {
    pub tokens: Vec<InstructionToken>,
}

impl SyntheticInstruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn relevant_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.relevant).count()
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    /// `(id, text)` pairs with ids equal to positions.
    pub fn id_texts(&self) -> Vec<(TokenId, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (TokenId(i as u32), t.text.as_str()))
            .collect()
    }
}

/// One landmark token per hop of the ground-truth path (its embedding is
/// the destination's landmark), with `round(rate / (1 - rate) × landmarks)`
/// fillers at seeded positions.
pub fn generate_instruction(
    house: &HouseGraph,
    landmarks: &[Vec<f64>],
    filler_rate: f64,
    seed: u64,
) -> Result<SyntheticInstruction, WorldError> {
    if !(0.0..1.0).contains(&filler_rate) {
        return Err(WorldError::Infeasible(format!("filler_rate {filler_rate} outside [0, 1)")));
    }
    let dim = landmarks.first().map_or(0, Vec::len);
    let mut rng = rng::stream(seed, "instruction", 0);
    let hops = &house.gt_path[1..];
    let fillers = (filler_rate / (1.0 - filler_rate) * hops.len() as f64).round() as usize;
    let body = hops.len() + fillers;
    let mut is_filler = vec![false; body];
    for i in rand::seq::index::sample(&mut rng, body, fillers) {
        is_filler[i] = true;
    }
    let words = function_word_list();
    let mut tokens = vec![InstructionToken {
        text: BOS.into(),
        embedding: rng::unit_vec(&mut rng, dim),
        relevant: false,
    }];
    let mut next_hop = hops.iter();
    for f in is_filler {
        tokens.push(if f {
            let k = rng.random_range(0..words.len() + FILLER_PUNCT.len());
            let text = words.get(k).copied().unwrap_or_else(|| FILLER_PUNCT[k - words.len()]);
            InstructionToken {
                text: text.into(),
                embedding: rng::unit_vec(&mut rng, dim),
                relevant: false,
            }
        } else {
            let node = *next_hop.next().expect("one slot per hop");
            InstructionToken {
                text: house.tags[node].clone(),
                embedding: landmarks[node].clone(),
                relevant: true,
            }
        });
    }
    tokens.push(InstructionToken {
        text: EOS.into(),
        embedding: rng::unit_vec(&mut rng, dim),
        relevant: false,
    });
    Ok(SyntheticInstruction { tokens })
}

/// Simulated attention over instruction tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Std of the Gaussian noise added to every score.
    pub sigma: f64,
    pub p_flip: f64,
    pub boost: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            sigma: 0.1,
            p_flip: 0.0,
            boost: 1.0,
            seed: 0,
        }
    }
}

/// Relevant tokens score 1.0 and everything else 0.2, plus N(0, sigma²);
/// each non-relevant token gains `boost` with probability `p_flip`. Scores
/// are clamped at zero.
pub fn importance_oracle(instruction: &SyntheticInstruction, config: &OracleConfig) -> ImportanceScores {
    let mut rng = rng::stream(config.seed, "instruction-oracle", 0);
    let p = config.p_flip.clamp(0.0, 1.0);
    ImportanceScores::from_pairs(instruction.tokens.iter().enumerate().map(|(i, t)| {
        let base = if t.relevant { 1.0 } else { 0.2 };
        let noise = config.sigma * rng::normal(&mut rng);
        let flip = rng.random_bool(p);
        let boost = if !t.relevant && flip { config.boost } else { 0.0 };
        (TokenId(i as u32), (base + noise + boost).max(0.0))
    }))
}

/// Simulated attention over a panorama: every view scores 1.0 plus
/// N(0, sigma²), whatever its kind.
pub fn view_oracle(n_views: usize, config: &OracleConfig, step: u64) -> ImportanceScores {
    let mut rng = rng::stream(config.seed, "view-oracle", step);
    ImportanceScores::from_pairs(
        (0..n_views).map(|i| (TokenId(i as u32), (1.0 + config.sigma * rng::normal(&mut rng)).max(0.0))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_nodes: usize,
    pub path_len_min: usize,
    pub path_len_max: usize,
    pub max_degree: usize,
    pub views_per_node: usize,
    pub hidden_dim: usize,
    pub sigma_feat: f64,
    pub landmark_similarity: f64,
    pub filler_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_nodes: 60,
            path_len_min: 5,
            path_len_max: 8,
            max_degree: 4,
            views_per_node: 12,
            hidden_dim: 64,
            sigma_feat: 0.02,
            landmark_similarity: 0.75,
            filler_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub house: HouseGraph,
    pub panoramas: PanoramaSpec,
    pub instruction: SyntheticInstruction,
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World, WorldError> {
    if config.path_len_min > config.path_len_max {
        return Err(WorldError::Infeasible(format!(
            "path_len_min {} > path_len_max {}",
            config.path_len_min, config.path_len_max
        )));
    }
    let path_len = rng::stream(seed, "path-len", 0).random_range(config.path_len_min..=config.path_len_max);
    let house = generate_house(seed, config.n_nodes, path_len, config.max_degree)?;
    let panoramas = generate_panoramas(
        &house,
        config.hidden_dim,
        config.views_per_node,
        config.sigma_feat,
        config.landmark_similarity,
        seed,
    )?;
    let instruction = generate_instruction(&house, &panoramas.landmarks, config.filler_rate, seed)?;
    Ok(World {
        seed,
        config: *config,
        house,
        panoramas,
        instruction,
    })
}

fn floats(v: &[f64]) -> String {
    let mut s = String::new();
    for x in v {
        let _ = write!(s, " {x:?}");
    }
    s
}

impl World {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let h = &self.house;
        let mut s = String::new();
        let _ = writeln!(s, "{WORLD_HEADER}");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(
            s,
            "config {} {} {} {} {} {} {:?} {:?} {:?}",
            c.n_nodes,
            c.path_len_min,
            c.path_len_max,
            c.max_degree,
            c.views_per_node,
            c.hidden_dim,
            c.sigma_feat,
            c.landmark_similarity,
            c.filler_rate
        );
        let _ = writeln!(s, "nodes {} {}", h.len(), h.max_degree);
        for (i, t) in h.tags.iter().enumerate() {
            let _ = writeln!(s, "tag {i} {t}");
        }
        for (a, b) in h.edges() {
            let _ = writeln!(s, "edge {a} {b}");
        }
        let _ = writeln!(s, "start {}", h.start);
        let _ = writeln!(s, "goal {}", h.goal);
        let path: Vec<String> = h.gt_path.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "path {}", path.join(" "));
        let _ = writeln!(s, "dim {}", self.panoramas.hidden_dim);
        for (i, l) in self.panoramas.landmarks.iter().enumerate() {
            let _ = writeln!(s, "landmark {i}{}", floats(l));
        }
        for (n, views) in self.panoramas.views.iter().enumerate() {
            for (slot, v) in views.iter().enumerate() {
                let kind = match v.kind {
                    ViewKind::Action(d) => format!("action {d}"),
                    ViewKind::Background => "background -".into(),
                };
                let _ = writeln!(s, "view {n} {slot} {kind}{}", floats(&v.feature));
            }
        }
        for (i, t) in self.instruction.tokens.iter().enumerate() {
            let _ = writeln!(s, "token {i} {} {}{}", u8::from(t.relevant), t.text, floats(&t.embedding));
        }
        s
    }

    pub fn parse(text: &str) -> Result<World, WorldError> {
        let mut lines = text.lines().enumerate();
        let first = lines.next().map(|l| l.1).unwrap_or_default();
        if first != WORLD_HEADER {
            return Err(WorldError::VersionMismatch {
                expected: WORLD_HEADER.into(),
                found: first.into(),
            });
        }
        let mut w = World {
            seed: 0,
            config: WorldConfig::default(),
            house: HouseGraph {
                tags: Vec::new(),
                adjacency: Vec::new(),
                start: 0,
                goal: 0,
                gt_path: Vec::new(),
                max_degree: 0,
            },
            panoramas: PanoramaSpec {
                hidden_dim: 0,
                landmarks: Vec::new(),
                views: Vec::new(),
            },
            instruction: SyntheticInstruction::default(),
        };
        for (ln, line) in lines {
            let bad = |message: String| WorldError::Malformed { line: ln + 1, message };
            let f: Vec<&str> = line.split_whitespace().collect();
            let Some((&key, rest)) = f.split_first() else { continue };
            let num = |i: usize| -> Result<usize, WorldError> {
                rest.get(i)
                    .ok_or_else(|| bad(format!("missing field {i}")))?
                    .parse()
                    .map_err(|e| bad(format!("{e}")))
            };
            let real = |i: usize| -> Result<f64, WorldError> {
                rest.get(i)
                    .ok_or_else(|| bad(format!("missing field {i}")))?
                    .parse()
                    .map_err(|e| bad(format!("{e}")))
            };
            let vec_from = |i: usize| -> Result<Vec<f64>, WorldError> {
                rest[i.min(rest.len())..]
                    .iter()
                    .map(|x| x.parse().map_err(|e| bad(format!("{e}"))))
                    .collect()
            };
            match key {
                "seed" => w.seed = rest.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad seed".into()))?,
                "config" => {
                    w.config = WorldConfig {
                        n_nodes: num(0)?,
                        path_len_min: num(1)?,
                        path_len_max: num(2)?,
                        max_degree: num(3)?,
                        views_per_node: num(4)?,
                        hidden_dim: num(5)?,
                        sigma_feat: real(6)?,
                        landmark_similarity: real(7)?,
                        filler_rate: real(8)?,
                    }
                }
                "nodes" => {
                    let n = num(0)?;
                    w.house.adjacency = vec![Vec::new(); n];
                    w.house.tags = vec![String::new(); n];
                    w.house.max_degree = num(1)?;
                }
                "tag" => {
                    let i = num(0)?;
                    let t = rest.get(1).ok_or_else(|| bad("missing tag".into()))?;
                    *w.house.tags.get_mut(i).ok_or_else(|| bad("node out of range".into()))? = t.to_string();
                }
                "edge" => {
                    let (a, b) = (num(0)?, num(1)?);
                    if a.max(b) >= w.house.len() {
                        return Err(bad("edge out of range".into()));
                    }
                    w.house.connect(a, b);
                }
                "start" => w.house.start = num(0)?,
                "goal" => w.house.goal = num(0)?,
                "path" => w.house.gt_path = (0..rest.len()).map(num).collect::<Result<_, _>>()?,
                "dim" => w.panoramas.hidden_dim = num(0)?,
                "landmark" => w.panoramas.landmarks.push(vec_from(1)?),
                "view" => {
                    let n = num(0)?;
                    if w.panoramas.views.len() <= n {
                        w.panoramas.views.resize(n + 1, Vec::new());
                    }
                    let kind = match rest.get(2) {
                        Some(&"action") => ViewKind::Action(num(3)?),
                        Some(&"background") => ViewKind::Background,
                        _ => return Err(bad("bad view kind".into())),
                    };
                    w.panoramas.views[n].push(View {
                        kind,
                        feature: vec_from(4)?,
                    });
                }
                "token" => {
                    let text = rest.get(2).ok_or_else(|| bad("missing token text".into()))?;
                    w.instruction.tokens.push(InstructionToken {
                        text: text.to_string(),
                        relevant: num(1)? == 1,
                        embedding: vec_from(3)?,
                    });
                }
                _ => return Err(bad(format!("unknown record {key:?}"))),
            }
        }
        for ns in &mut w.house.adjacency {
            ns.sort_unstable();
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> crate::Result<World> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn houses_are_deterministic_and_contain_the_path() {
        let a = generate_house(1, 10, 4, 4).unwrap();
        assert_eq!(a, generate_house(1, 10, 4, 4).unwrap());
        assert_eq!(a.gt_path.len(), 4);
        for w in a.gt_path.windows(2) {
            assert!(a.neighbors(w[0]).contains(&w[1]));
        }
        assert_ne!(a.start, a.goal);
    }

    #[test]
    fn degrees_stay_bounded_and_graphs_connected() {
        for seed in 0..100 {
            let g = generate_house(seed, 30, 6, 3).unwrap();
            assert!((0..g.len()).all(|n| g.degree(n) <= 3));
            assert!((0..g.len()).all(|n| g.distance(g.start, n).is_some()));
            assert_eq!(g.edges().len(), g.len() - 1);
        }
    }

    #[test]
    fn infeasible_houses_are_rejected() {
        assert!(generate_house(1, 5, 5, 4).is_err());
        assert!(generate_house(1, 5, 1, 4).is_err());
        assert!(generate_house(1, 5, 3, 1).is_err());
    }

    #[test]
    fn zero_noise_action_views_equal_landmarks() {
        let g = generate_house(2, 20, 5, 4).unwrap();
        let p = generate_panoramas(&g, 32, 12, 0.0, 0.5, 2).unwrap();
        for (n, views) in p.views.iter().enumerate() {
            let actions: Vec<&View> = views.iter().filter(|v| v.kind != ViewKind::Background).collect();
            assert_eq!(actions.len(), g.degree(n));
            for v in actions {
                let ViewKind::Action(d) = v.kind else { unreachable!() };
                assert_eq!(v.feature, p.landmarks[d]);
            }
        }
    }

    #[test]
    fn filler_arithmetic() {
        let g = generate_house(3, 20, 6, 4).unwrap();
        let p = generate_panoramas(&g, 16, 12, 0.0, 0.0, 3).unwrap();
        let ins = generate_instruction(&g, &p.landmarks, 0.75, 3).unwrap();
        assert_eq!(ins.len(), 22);
        assert_eq!(ins.relevant_count(), 5);
        let bare = generate_instruction(&g, &p.landmarks, 0.0, 3).unwrap();
        assert_eq!(bare.len(), 7);
        assert_eq!(bare.tokens[0].text, BOS);
        assert_eq!(bare.tokens[6].text, EOS);
        assert!(bare.tokens[1..6].iter().all(|t| t.relevant));
    }

    #[test]
    fn oracle_separates_without_flips() {
        let w = generate_world(&WorldConfig::default(), 4).unwrap();
        let s = importance_oracle(
            &w.instruction,
            &OracleConfig {
                sigma: 1e-9,
                ..Default::default()
            },
        );
        let min_rel = w.instruction.tokens.iter().enumerate().filter(|t| t.1.relevant);
        let max_fill = w.instruction.tokens.iter().enumerate().filter(|t| !t.1.relevant);
        let lo = min_rel.map(|(i, _)| s.get(TokenId(i as u32)).unwrap()).fold(f64::MAX, f64::min);
        let hi = max_fill.map(|(i, _)| s.get(TokenId(i as u32)).unwrap()).fold(f64::MIN, f64::max);
        assert!(lo > hi);
    }

    #[test]
    fn world_text_round_trips() {
        let w = generate_world(&WorldConfig::default(), 9).unwrap();
        let text = w.to_text();
        let back = World::parse(&text).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_text(), text);
    }
}
