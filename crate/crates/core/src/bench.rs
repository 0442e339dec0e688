//! Seeded sweeps over strategies and retain fractions.
//!
//! Every episode index gets its own world and seeds, shared by all cells,
//! and is compared against an unpruned run of the same episode. Results are
//! collected by episode index, so the output does not depend on how many
//! worker threads ran the episodes.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::agent::{run_episode, EpisodeConfig, EpisodeResult, Encoders, ImportanceMode, PolicyParams};
use crate::flops::{flops_percent, FLOPS_PER_MAC};
use crate::pruning::{parse_strategies, strategies_label, StrategyKind, StrategySpec};
use crate::rng::derive_seed;
use crate::vocabulary::Vocabulary;
use crate::worldgen::{generate_world, OracleConfig, WorldConfig};

pub const CSV_COLUMNS: &str =
    "strategy,retain_fraction,success_rate,ci95,mean_steps,mean_flops_percent,episodes,seed_block";

const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("vocabulary required by vpp but none given")]
    MissingVocabulary,
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub world: WorldConfig,
    /// Strategy lists in `+` notation, e.g. `nap` or `bgp+cascade@instruction`.
    pub strategies: Vec<String>,
    pub retain_fractions: Vec<f64>,
    pub episodes: usize,
    pub seed_block: u64,
    pub importance: ImportanceMode,
    pub p_flip: f64,
    pub boost: f64,
    pub oracle_sigma: f64,
    pub k_btp: usize,
    pub heads: usize,
    pub encoder_seed: u64,
    pub sas: bool,
    pub success_hops: usize,
    pub vocab: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// 15 fractions from 1.00 down to 0.30.
pub fn default_fractions() -> Vec<f64> {
    (0..15).map(|i| ((1.0 - 0.05 * i as f64) * 100.0).round() / 100.0).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            world: WorldConfig::default(),
            strategies: vec!["none".into(), "nap".into()],
            retain_fractions: default_fractions(),
            episodes: 500,
            seed_block: 0,
            importance: ImportanceMode::Oracle,
            p_flip: 0.3,
            boost: 1.0,
            oracle_sigma: 0.1,
            k_btp: 6,
            heads: 4,
            encoder_seed: 0,
            sas: false,
            success_hops: 0,
            vocab: None,
            output: None,
        }
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl SweepConfig {
    /// Parse flat `key=value` text. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut c = SweepConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| BenchError::Config { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            fn p<T: std::str::FromStr>(v: &str, bad: impl Fn(String) -> BenchError) -> Result<T, BenchError>
            where
                T::Err: std::fmt::Display,
            {
                v.parse().map_err(|e: T::Err| bad(format!("{v:?}: {e}")))
            }
            let w = &mut c.world;
            match k {
                "n_nodes" => w.n_nodes = p(v, bad)?,
                "path_len_min" => w.path_len_min = p(v, bad)?,
                "path_len_max" => w.path_len_max = p(v, bad)?,
                "max_degree" => w.max_degree = p(v, bad)?,
                "views_per_node" => w.views_per_node = p(v, bad)?,
                "hidden_dim" => w.hidden_dim = p(v, bad)?,
                "sigma_feat" => w.sigma_feat = p(v, bad)?,
                "landmark_similarity" => w.landmark_similarity = p(v, bad)?,
                "filler_rate" => w.filler_rate = p(v, bad)?,
                "strategies" => c.strategies = v.split(',').map(|s| s.trim().to_string()).collect(),
                "retain_fractions" => {
                    c.retain_fractions = v.split(',').map(|s| p(s.trim(), bad)).collect::<Result<_, _>>()?
                }
                "episodes" => c.episodes = p(v, bad)?,
                "seed_block" | "seeds" => c.seed_block = p(v, bad)?,
                "importance" => c.importance = v.parse().map_err(bad)?,
                "p_flip" => c.p_flip = p(v, bad)?,
                "boost" => c.boost = p(v, bad)?,
                "oracle_sigma" => c.oracle_sigma = p(v, bad)?,
                "k_btp" => c.k_btp = p(v, bad)?,
                "heads" => c.heads = p(v, bad)?,
                "encoder_seed" => c.encoder_seed = p(v, bad)?,
                "sas" => c.sas = p(v, bad)?,
                "success_hops" => c.success_hops = p(v, bad)?,
                "vocab" => c.vocab = Some(PathBuf::from(v)),
                "output" => c.output = Some(PathBuf::from(v)),
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |message: String| BenchError::Config { line: 0, message };
        if self.episodes == 0 {
            return Err(bad("episodes must be at least 1".into()));
        }
        if let Some(r) = self.retain_fractions.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(bad(format!("retain fraction {r} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.p_flip) {
            return Err(bad(format!("p_flip {} outside [0, 1]", self.p_flip)));
        }
        for s in &self.strategies {
            parse_strategies(s).map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }

    /// The effective configuration as `key=value` lines.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("n_nodes", w.n_nodes.to_string());
        kv("path_len_min", w.path_len_min.to_string());
        kv("path_len_max", w.path_len_max.to_string());
        kv("max_degree", w.max_degree.to_string());
        kv("views_per_node", w.views_per_node.to_string());
        kv("hidden_dim", w.hidden_dim.to_string());
        kv("sigma_feat", w.sigma_feat.to_string());
        kv("landmark_similarity", w.landmark_similarity.to_string());
        kv("filler_rate", w.filler_rate.to_string());
        kv("strategies", self.strategies.join(","));
        kv("retain_fractions", list(&self.retain_fractions));
        kv("episodes", self.episodes.to_string());
        kv("seed_block", self.seed_block.to_string());
        kv("importance", self.importance.to_string());
        kv("p_flip", self.p_flip.to_string());
        kv("boost", self.boost.to_string());
        kv("oracle_sigma", self.oracle_sigma.to_string());
        kv("k_btp", self.k_btp.to_string());
        kv("heads", self.heads.to_string());
        kv("encoder_seed", self.encoder_seed.to_string());
        kv("sas", self.sas.to_string());
        kv("success_hops", self.success_hops.to_string());
        if let Some(v) = &self.vocab {
            kv("vocab", v.display().to_string());
        }
        s
    }

    pub fn needs_vocabulary(&self) -> bool {
        self.strategies
            .iter()
            .filter_map(|s| parse_strategies(s).ok())
            .flatten()
            .any(|s| s.kind == StrategyKind::Vpp)
    }

    /// Episode settings shared by every cell; strategies and retain are
    /// filled per cell.
    pub fn episode_template(&self) -> EpisodeConfig {
        EpisodeConfig {
            k_btp: self.k_btp,
            importance: self.importance,
            oracle: OracleConfig {
                sigma: self.oracle_sigma,
                p_flip: self.p_flip,
                boost: self.boost,
                seed: 0,
            },
            policy: PolicyParams::default(),
            success_hops: self.success_hops,
            sas: self.sas,
            ..Default::default()
        }
    }

    pub fn cells(&self) -> Result<Vec<Cell>, BenchError> {
        let mut cells = Vec::new();
        for s in &self.strategies {
            let specs = parse_strategies(s).map_err(|e| BenchError::Config {
                line: 0,
                message: e.to_string(),
            })?;
            for &r in &self.retain_fractions {
                cells.push(Cell {
                    label: strategies_label(&specs),
                    strategies: specs.clone(),
                    retain: r,
                });
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub strategies: Vec<StrategySpec>,
    pub retain: f64,
}

/// Per-episode numbers a row is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub flops_percent: f64,
    pub max_unvisited: usize,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: String,
    pub retain_fraction: f64,
    /// Percent.
    pub success_rate: f64,
    /// Half-width of the 95% interval on `success_rate`, normal approximation.
    pub ci95: f64,
    pub mean_steps: f64,
    pub steps_ci95: f64,
    pub mean_flops_percent: f64,
    pub episodes: usize,
    pub seed_block: u64,
}

impl SweepRow {
    pub fn sr_interval(&self) -> (f64, f64) {
        (self.success_rate - self.ci95, self.success_rate + self.ci95)
    }

    pub fn steps_interval(&self) -> (f64, f64) {
        (self.mean_steps - self.steps_ci95, self.mean_steps + self.steps_ci95)
    }
}

/// Upper end of `a` strictly below lower end of `b`.
pub fn separated_below(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0
}

pub fn summarize(cell: &Cell, outcomes: &[EpisodeOutcome], seed_block: u64) -> SweepRow {
    let n = outcomes.len() as f64;
    let sr = outcomes.iter().filter(|o| o.success).count() as f64 / n;
    let steps: Vec<f64> = outcomes.iter().map(|o| o.steps as f64).collect();
    let mean_steps = steps.iter().sum::<f64>() / n;
    let var = if outcomes.len() > 1 {
        steps.iter().map(|s| (s - mean_steps).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    SweepRow {
        strategy: cell.label.clone(),
        retain_fraction: cell.retain,
        success_rate: 100.0 * sr,
        ci95: 100.0 * Z95 * (sr * (1.0 - sr) / n).sqrt(),
        mean_steps,
        steps_ci95: Z95 * (var / n).sqrt(),
        mean_flops_percent: outcomes.iter().map(|o| o.flops_percent).sum::<f64>() / n,
        episodes: outcomes.len(),
        seed_block,
    }
}

/// Episode worlds and seeds for index `i` of a seed block.
pub fn episode_seeds(seed_block: u64, i: usize) -> (u64, u64) {
    (derive_seed(seed_block, "world", i as u64), derive_seed(seed_block, "episode", i as u64))
}

fn outcome(r: &EpisodeResult, reference: &EpisodeResult) -> crate::Result<EpisodeOutcome> {
    Ok(EpisodeOutcome {
        success: r.success,
        steps: r.steps,
        flops_percent: flops_percent(&r.flops, &reference.flops)?,
        max_unvisited: r.unvisited_after_prune.iter().copied().max().unwrap_or(0),
        timed_out: r.timed_out,
    })
}

/// Run every cell over `cfg.episodes` episodes. Returns `[cell][episode]`.
pub fn run_cells(
    cfg: &SweepConfig,
    cells: &[Cell],
    vocab: Option<&Vocabulary>,
    jobs: usize,
) -> crate::Result<Vec<Vec<EpisodeOutcome>>> {
    if vocab.is_none() && cells.iter().flat_map(|c| &c.strategies).any(|s| s.kind == StrategyKind::Vpp) {
        return Err(BenchError::MissingVocabulary.into());
    }
    let template = cfg.episode_template();
    let encoders = match cfg.importance {
        ImportanceMode::Attention => Some(Encoders::new(&template.dims(cfg.world.hidden_dim), cfg.heads, cfg.encoder_seed)?),
        ImportanceMode::Oracle => None,
    };
    let one = |i: usize| -> crate::Result<Vec<EpisodeOutcome>> {
        let (world_seed, ep_seed) = episode_seeds(cfg.seed_block, i);
        let world = generate_world(&cfg.world, world_seed)?;
        let base = EpisodeConfig {
            seed: ep_seed,
            ..template.clone()
        };
        let reference = run_episode(&world, &base, encoders.as_ref(), vocab)?;
        cells
            .iter()
            .map(|c| {
                let ec = EpisodeConfig {
                    strategies: c.strategies.clone(),
                    retain: c.retain,
                    ..base.clone()
                };
                outcome(&run_episode(&world, &ec, encoders.as_ref(), vocab)?, &reference)
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let per_episode: Vec<Vec<EpisodeOutcome>> =
        pool.install(|| (0..cfg.episodes).into_par_iter().map(one).collect::<crate::Result<_>>())?;
    Ok((0..cells.len())
        .map(|c| per_episode.iter().map(|e| e[c]).collect())
        .collect())
}

/// One row per (strategy, fraction), sorted by strategy then fraction
/// descending.
pub fn run_sweep(cfg: &SweepConfig, vocab: Option<&Vocabulary>, jobs: usize) -> crate::Result<Vec<SweepRow>> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let results = run_cells(cfg, &cells, vocab, jobs)?;
    let mut rows: Vec<SweepRow> = cells
        .iter()
        .zip(&results)
        .map(|(c, o)| summarize(c, o, cfg.seed_block))
        .collect();
    rows.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(b.retain_fraction.total_cmp(&a.retain_fraction))
    });
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow], importance: ImportanceMode) -> String {
    let mut s = format!("# navprune-sweep-csv v1 flops_per_mac={FLOPS_PER_MAC} importance={importance}\n{CSV_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.2},{:.4},{:.4},{:.4},{:.4},{},{}",
            r.strategy, r.retain_fraction, r.success_rate, r.ci95, r.mean_steps, r.mean_flops_percent, r.episodes, r.seed_block
        );
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    format: &'static str,
    flops_per_mac: u64,
    config: &'a SweepConfig,
    rows: &'a [SweepRow],
}

pub fn to_json(cfg: &SweepConfig, rows: &[SweepRow]) -> String {
    let s = Summary {
        format: "navprune-sweep-json v1",
        flops_per_mac: FLOPS_PER_MAC,
        config: cfg,
        rows,
    };
    serde_json::to_string_pretty(&s).expect("plain data serializes") + "\n"
}
