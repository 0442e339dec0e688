use navprune::rng::cosine;
use navprune::worldgen::{
    generate_house, generate_instruction, generate_panoramas, generate_world, importance_oracle, OracleConfig,
    ViewKind, World, WorldConfig,
};

#[test]
fn degrees_bounded_over_hundred_seeds() {
    for seed in 0..100 {
        for max_degree in [2, 3, 4] {
            let h = generate_house(seed, 30, 6, max_degree).unwrap();
            assert!((0..h.len()).all(|n| h.degree(n) <= max_degree), "seed {seed}");
            assert_eq!(h.gt_path.len(), 6);
            assert_eq!(h.distance(h.start, h.goal), Some(5));
        }
    }
}

#[test]
fn landmarks_are_separated_over_hundred_seeds() {
    for dim in [32, 64] {
        for seed in 0..100 {
            let w = generate_world(
                &WorldConfig {
                    hidden_dim: dim,
                    ..WorldConfig::default()
                },
                seed,
            )
            .unwrap();
            let lm = &w.panoramas.landmarks;
            for i in 0..lm.len() {
                for j in i + 1..lm.len() {
                    assert!(cosine(&lm[i], &lm[j]) < 0.9, "dim {dim} seed {seed} ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn action_views_follow_degree() {
    for seed in 0..20 {
        let w = generate_world(&WorldConfig::default(), seed).unwrap();
        for (node, views) in w.panoramas.views.iter().enumerate() {
            let mut dests: Vec<usize> = views
                .iter()
                .filter_map(|v| match v.kind {
                    ViewKind::Action(d) => Some(d),
                    ViewKind::Background => None,
                })
                .collect();
            dests.sort();
            assert_eq!(dests, w.house.neighbors(node).to_vec());
            assert_eq!(views.len(), w.config.views_per_node);
        }
    }
}

#[test]
fn noise_moves_action_views_off_landmarks() {
    let h = generate_house(4, 20, 5, 4).unwrap();
    let p = generate_panoramas(&h, 64, 12, 0.1, 0.5, 4).unwrap();
    for views in &p.views {
        for v in views {
            if let ViewKind::Action(d) = v.kind {
                let c = cosine(&v.feature, &p.landmarks[d]);
                assert!(c < 1.0 && c > 0.5);
            }
        }
    }
}

#[test]
fn instruction_shapes() {
    let h = generate_house(2, 20, 6, 4).unwrap();
    let p = generate_panoramas(&h, 16, 12, 0.0, 0.5, 2).unwrap();
    let bare = generate_instruction(&h, &p.landmarks, 0.0, 2).unwrap();
    assert_eq!(bare.len(), 7);
    assert_eq!(bare.relevant_count(), 5);
    let padded = generate_instruction(&h, &p.landmarks, 0.75, 2).unwrap();
    assert_eq!(padded.len(), 22);
    assert_eq!(padded.relevant_count(), 5);
    assert_eq!(padded.tokens[0].text, "<s>");
    assert_eq!(padded.tokens[21].text, "</s>");
    let order: Vec<&str> = padded.tokens.iter().filter(|t| t.relevant).map(|t| t.text.as_str()).collect();
    let expect: Vec<&str> = h.gt_path[1..].iter().map(|&n| h.tags[n].as_str()).collect();
    assert_eq!(order, expect);
}

#[test]
fn flip_rate_matches_probability() {
    let cfg = WorldConfig {
        filler_rate: 0.75,
        ..WorldConfig::default()
    };
    let mut fillers = 0usize;
    let mut boosted = 0usize;
    let mut seed = 0;
    while fillers < 10_000 {
        let w = generate_world(&cfg, seed % 50).unwrap();
        let s = importance_oracle(
            &w.instruction,
            &OracleConfig {
                p_flip: 0.3,
                seed,
                ..OracleConfig::default()
            },
        );
        for ((_, score), t) in s.iter().zip(&w.instruction.tokens) {
            if !t.relevant {
                fillers += 1;
                boosted += usize::from(score > 0.7);
            }
        }
        seed += 1;
    }
    let rate = boosted as f64 / fillers as f64;
    assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
}

#[test]
fn oracle_extremes() {
    let w = generate_world(&WorldConfig::default(), 1).unwrap();
    let sharp = importance_oracle(
        &w.instruction,
        &OracleConfig {
            sigma: 1e-9,
            ..OracleConfig::default()
        },
    );
    let min_rel = sharp
        .iter()
        .filter(|(id, _)| w.instruction.tokens[id.0 as usize].relevant)
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min);
    let max_fill = sharp
        .iter()
        .filter(|(id, _)| !w.instruction.tokens[id.0 as usize].relevant)
        .map(|p| p.1)
        .fold(0.0, f64::max);
    assert!(min_rel > max_fill);
    let all = importance_oracle(
        &w.instruction,
        &OracleConfig {
            sigma: 0.0,
            p_flip: 1.0,
            ..OracleConfig::default()
        },
    );
    for (id, s) in all.iter() {
        let expect = if w.instruction.tokens[id.0 as usize].relevant { 1.0 } else { 1.2 };
        assert!((s - expect).abs() < 1e-12);
    }
}

#[test]
fn worlds_are_reproducible_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_world(&WorldConfig::default(), 77).unwrap();
    let b = generate_world(&WorldConfig::default(), 77).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    let path = dir.path().join("w.txt");
    a.save(&path).unwrap();
    let back = World::load(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_text(), a.to_text());
    assert_ne!(generate_world(&WorldConfig::default(), 78).unwrap().to_text(), a.to_text());
}
