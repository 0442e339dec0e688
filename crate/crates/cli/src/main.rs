use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use navprune::agent::{run_episode, Encoders, EpisodeConfig, ImportanceMode};
use navprune::bench::{run_sweep, to_csv, to_json, SweepConfig};
use navprune::flops::{attention_flops, layer_flops, sas_attention_flops, FLOPS_PER_MAC};
use navprune::pruning::parse_strategies;
use navprune::vocabulary::{
    build_vocabulary, classify_words, extract_lexicon, function_words_version, ClassifyOptions, CompletionClient,
    HttpCompletionClient, LabelCache, VocabMeta, Vocabulary,
};
use navprune::worldgen::{generate_world, OracleConfig, World, WorldConfig};

#[derive(Parser)]
#[command(name = "navprune", version, about = "Token pruning benchmark for navigation agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label a corpus lexicon and write the vocabulary of irrelevant words.
    BuildVocab {
        /// Instruction corpus, one instruction per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the classification service and use the built-in word list.
        #[arg(long)]
        offline: bool,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Fail instead of falling back when the service cannot label a word.
        #[arg(long)]
        no_fallback: bool,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Generate a synthetic world and write it to a file.
    GenWorld {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = WorldConfig::default().n_nodes)]
        nodes: usize,
        /// Fixed ground-truth path length in nodes, start and goal included.
        #[arg(long)]
        path_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode and print its trace and FLOP ledger.
    RunEpisode {
        #[arg(long)]
        world: PathBuf,
        /// Strategy list such as `nap`, `bgp+btp:4` or `cascade@instruction`.
        #[arg(long, default_value = "none")]
        strategy: String,
        #[arg(long, default_value_t = 1.0)]
        retain: f64,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        k_btp: usize,
        #[arg(long, default_value = "oracle")]
        importance: ImportanceMode,
        #[arg(long, default_value_t = 0.3)]
        p_flip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        encoder_seed: u64,
    },
    /// Run a strategy by budget sweep and write sweep.csv, summary.json and config.txt.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print analytic FLOP counts for one layer.
    Flops {
        #[arg(long)]
        l: u64,
        #[arg(long)]
        d: u64,
        /// Action-view query count for selective attention.
        #[arg(long)]
        l_act: Option<u64>,
        #[arg(long, default_value_t = 4)]
        ffn_mult: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::BuildVocab {
            corpus,
            out,
            offline,
            cache,
            no_fallback,
            concurrency,
        } => build_vocab(&corpus, &out, offline, cache.as_deref(), !no_fallback, concurrency),
        Command::GenWorld {
            seed,
            nodes,
            path_len,
            out,
        } => {
            let mut cfg = WorldConfig {
                n_nodes: nodes,
                ..WorldConfig::default()
            };
            if let Some(p) = path_len {
                cfg.path_len_min = p;
                cfg.path_len_max = p;
            }
            let world = generate_world(&cfg, seed)?;
            world.save(&out).with_context(|| format!("writing {}", out.display()))?;
            info!("wrote {} ({} nodes, path {})", out.display(), world.house.len(), world.house.gt_path.len() - 1);
            Ok(())
        }
        Command::RunEpisode {
            world,
            strategy,
            retain,
            vocab,
            k_btp,
            importance,
            p_flip,
            seed,
            heads,
            encoder_seed,
        } => {
            let world = World::load(&world)?;
            let vocab = vocab.map(|p| Vocabulary::load(&p)).transpose()?;
            let cfg = EpisodeConfig {
                strategies: parse_strategies(&strategy)?,
                retain,
                k_btp,
                importance,
                oracle: OracleConfig {
                    p_flip,
                    ..OracleConfig::default()
                },
                seed,
                ..EpisodeConfig::default()
            };
            let encoders = match importance {
                ImportanceMode::Attention => {
                    Some(Encoders::new(&cfg.dims(world.panoramas.hidden_dim), heads, encoder_seed)?)
                }
                ImportanceMode::Oracle => None,
            };
            let r = run_episode(&world, &cfg, encoders.as_ref(), vocab.as_ref())?;
            for line in &r.trace {
                println!("{line}");
            }
            for (i, p) in r.prune_log.iter().enumerate() {
                println!("prune step={} views={} history={}", i + 1, p.views, p.history);
            }
            println!("instruction_removed={}", r.instruction_removed);
            println!(
                "success={} steps={} timed_out={} path={:?}",
                r.success, r.steps, r.timed_out, r.path
            );
            println!("{}", r.flops);
            Ok(())
        }
        Command::Sweep { config, out, jobs } => sweep(&config, &out, jobs),
        Command::Flops { l, d, l_act, ffn_mult } => {
            let g = |x: u64| x as f64 / 1e9;
            let a = attention_flops(l, d);
            println!("flops_per_mac={FLOPS_PER_MAC}");
            println!("attention={a} ({:.1e} G)", g(a));
            if let Some(la) = l_act {
                let s = sas_attention_flops(l, la, d);
                println!("sas_attention={s} ({:.1e} G)", g(s));
            }
            let lf = layer_flops(l, d, ffn_mult);
            println!("layer={lf} ({:.3e} G)", g(lf));
            Ok(())
        }
    }
}

fn build_vocab(
    corpus: &Path,
    out: &Path,
    offline: bool,
    cache: Option<&Path>,
    fallback: bool,
    concurrency: usize,
) -> Result<()> {
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let lexicon = extract_lexicon(&lines)?;
    let client = if offline {
        None
    } else {
        match HttpCompletionClient::from_env() {
            Ok(c) => Some(c),
            Err(e) => {
                warn!("classification service unavailable: {e}");
                None
            }
        }
    };
    let builder = match &client {
        Some(c) => format!("service:{}", c.model()),
        None => format!("fallback:{}", function_words_version()),
    };
    let mut labels = match cache {
        Some(p) => LabelCache::open(p, &builder)?,
        None => LabelCache::in_memory(&builder),
    };
    let opts = ClassifyOptions {
        concurrency,
        fallback,
        ..ClassifyOptions::default()
    };
    let records = classify_words(&lexicon, client.as_ref().map(|c| c as &dyn CompletionClient), &mut labels, &opts)?;
    labels.save()?;
    let created = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let meta = VocabMeta {
        source: corpus.display().to_string(),
        builder,
        created,
    };
    let vocab = build_vocabulary(&records, meta);
    vocab.save(out)?;
    info!("{} of {} lexicon words are irrelevant", vocab.len(), lexicon.len());
    Ok(())
}

fn sweep(config: &Path, out: &Path, jobs: usize) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = SweepConfig::parse(&text)?;
    let vocab = match &cfg.vocab {
        Some(p) => {
            // Relative vocabulary paths resolve against the config file.
            let p = config.parent().map_or_else(|| p.clone(), |dir| dir.join(p));
            Some(Vocabulary::load(&p).with_context(|| format!("loading vocabulary {}", p.display()))?)
        }
        None if cfg.needs_vocabulary() => bail!("strategy list uses vpp but the config sets no vocab"),
        None => None,
    };
    let rows = run_sweep(&cfg, vocab.as_ref(), jobs)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), to_csv(&rows, cfg.importance))?;
    fs::write(out.join("summary.json"), to_json(&cfg, &rows))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    for r in &rows {
        info!(
            "{} r={:.2} sr={:.1}±{:.1} steps={:.2} flops%={:.1}",
            r.strategy, r.retain_fraction, r.success_rate, r.ci95, r.mean_steps, r.mean_flops_percent
        );
    }
    Ok(())
}
