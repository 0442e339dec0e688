use navprune::agent::ImportanceMode;
use navprune::bench::{run_sweep, separated_below, to_csv, SweepConfig};
use navprune::pruning::{parse_strategies, strategies_label};
use navprune::vocabulary::{function_word_list, Vocabulary};

fn vocab() -> Vocabulary {
    Vocabulary::from_words(function_word_list().into_iter().chain(["."]))
}

fn label(s: &str) -> String {
    strategies_label(&parse_strategies(s).unwrap())
}

fn small() -> SweepConfig {
    SweepConfig::parse(
        "strategies=none,nap,bgp+vpp,random!+btp:2,tome
retain_fractions=1.0,0.6
episodes=24
n_nodes=30
",
    )
    .unwrap()
}

#[test]
fn csv_is_identical_across_job_counts() {
    let cfg = small();
    let v = vocab();
    let one = to_csv(&run_sweep(&cfg, Some(&v), 1).unwrap(), cfg.importance);
    let four = to_csv(&run_sweep(&cfg, Some(&v), 4).unwrap(), cfg.importance);
    assert_eq!(one, four);
    assert_eq!(one, to_csv(&run_sweep(&cfg, Some(&v), 3).unwrap(), cfg.importance));
}

#[test]
fn reference_cell_costs_exactly_full_flops() {
    let cfg = small();
    let rows = run_sweep(&cfg, Some(&vocab()), 2).unwrap();
    let none: Vec<_> = rows.iter().filter(|r| r.strategy == "none").collect();
    assert_eq!(none.len(), 2);
    for r in none {
        assert_eq!(r.mean_flops_percent, 100.0);
    }
    let full = rows.iter().find(|r| r.strategy == "bgp+vpp" && r.retain_fraction == 1.0).unwrap();
    assert_eq!(full.mean_flops_percent, 100.0);
    // The history cap applies whatever the retention.
    let capped = rows.iter().find(|r| r.strategy == label("nap") && r.retain_fraction == 1.0).unwrap();
    assert!(capped.mean_flops_percent <= 100.0);
}

#[test]
fn rows_sorted_by_strategy_then_fraction_descending() {
    let cfg = small();
    let rows = run_sweep(&cfg, Some(&vocab()), 2).unwrap();
    let keys: Vec<(String, f64)> = rows.iter().map(|r| (r.strategy.clone(), r.retain_fraction)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    assert_eq!(keys, sorted);
}

#[test]
fn vpp_sweep_without_vocabulary_is_rejected() {
    assert!(run_sweep(&small(), None, 1).is_err());
}

#[test]
fn nap_beats_cascade_on_success_and_cost() {
    let cfg = SweepConfig::parse(
        "strategies=nap,cascade@instruction+cascade
retain_fractions=0.5
episodes=500
p_flip=0.3
",
    )
    .unwrap();
    assert_eq!(cfg.importance, ImportanceMode::Oracle);
    let rows = run_sweep(&cfg, Some(&vocab()), 4).unwrap();
    let cascade = rows.iter().find(|r| r.strategy.starts_with("cascade")).unwrap();
    let nap = rows.iter().find(|r| r.strategy == label("nap")).unwrap();
    assert!(separated_below(cascade.sr_interval(), nap.sr_interval()), "{cascade:?} {nap:?}");
    assert!(nap.mean_flops_percent < cascade.mean_flops_percent);
}
