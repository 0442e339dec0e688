use std::collections::BTreeSet;

use navprune::encoder::{
    attention_forward, importance_scores, init_weights, position_code, run_stack, AttentionRecord, EncoderConfig,
    EncoderWeights, FeatureSeq, HookAction, LayerContext, LayerWeights, Matrix, NoPrune, Token, TokenId,
};
use navprune::pruning::tome_merge;
use navprune::rng::{normal_vec, stream};
use proptest::prelude::*;

fn random_seq(n: usize, d: usize, seed: u64) -> FeatureSeq {
    let mut r = stream(seed, "encoder-test-input", 0);
    FeatureSeq::from_features((0..n).map(|_| normal_vec(&mut r, d)).collect())
}

// Reference layer written with plain index loops over the weight entries.
fn reference_layer(x: &[Vec<f64>], w: &LayerWeights, heads: usize, skip: &[bool]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = x.len();
    let d = x[0].len();
    let hd = d / heads;
    let ln = |v: &Vec<f64>| -> Vec<f64> {
        let mut mean = 0.0;
        for a in v {
            mean += a;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for a in v {
            var += (a - mean) * (a - mean);
        }
        var /= d as f64;
        v.iter().map(|a| (a - mean) / (var + 1e-5).sqrt()).collect()
    };
    let matvec = |v: &[f64], m: &Matrix| -> Vec<f64> {
        let mut out = vec![0.0; m.cols()];
        for c in 0..m.cols() {
            for r in 0..m.rows() {
                out[c] += v[r] * m.get(r, c);
            }
        }
        out
    };
    let xn: Vec<Vec<f64>> = x.iter().map(ln).collect();
    let q: Vec<Vec<f64>> = xn.iter().map(|v| matvec(v, &w.wq)).collect();
    let k: Vec<Vec<f64>> = xn.iter().map(|v| matvec(v, &w.wk)).collect();
    let v: Vec<Vec<f64>> = xn.iter().map(|v| matvec(v, &w.wv)).collect();
    let mut attn = vec![vec![vec![0.0; n]; n]; heads];
    let mut out = x.to_vec();
    for i in 0..n {
        if !skip[i] {
            let mut z = vec![0.0; d];
            for h in 0..heads {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    for c in h * hd..(h + 1) * hd {
                        logits[j] += q[i][c] * k[j][c];
                    }
                    logits[j] /= (hd as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..n {
                    attn[h][i][j] = e[j] / s;
                    for c in h * hd..(h + 1) * hd {
                        z[c] += attn[h][i][j] * v[j][c];
                    }
                }
            }
            let o = matvec(&z, &w.wo);
            for c in 0..d {
                out[i][c] += o[c];
            }
        }
        let hidden: Vec<f64> = matvec(&ln(&out[i]), &w.w1).into_iter().map(|a| if a > 0.0 { a } else { 0.0 }).collect();
        let f = matvec(&hidden, &w.w2);
        for c in 0..d {
            out[i][c] += f[c];
        }
    }
    (out, attn)
}

fn features(seq: &FeatureSeq) -> Vec<Vec<f64>> {
    seq.tokens().iter().map(|t| t.feature.clone()).collect()
}

fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= tol, "{p} vs {q}");
        }
    }
}

#[test]
fn forward_pass_matches_plain_loop_reference() {
    let w = init_weights(&EncoderConfig::new(1, 1, 8, 7)).unwrap();
    let seq = random_seq(3, 8, 7);
    let (out, rec) = attention_forward(&seq, &w, 0, &BTreeSet::new()).unwrap();
    let (expect, attn) = reference_layer(&features(&seq), w.layer(0).unwrap(), 1, &[false; 3]);
    close(&features(&out), &expect, 1e-12);
    for i in 0..3 {
        for j in 0..3 {
            assert!((rec.heads[0].get(i, j) - attn[0][i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_head_forward_matches_reference() {
    let w = init_weights(&EncoderConfig::new(2, 4, 16, 3)).unwrap();
    let seq = random_seq(6, 16, 3);
    let (out, _) = attention_forward(&seq, &w, 1, &BTreeSet::new()).unwrap();
    let (expect, _) = reference_layer(&features(&seq), w.layer(1).unwrap(), 4, &[false; 6]);
    close(&features(&out), &expect, 1e-12);
}

#[test]
fn masked_queries_keep_residual_and_ffn_only() {
    let w = init_weights(&EncoderConfig::new(1, 2, 8, 11)).unwrap();
    let seq = random_seq(5, 8, 11);
    let mask: BTreeSet<TokenId> = [TokenId(1), TokenId(3)].into();
    let (masked, rec) = attention_forward(&seq, &w, 0, &mask).unwrap();
    let (plain, _) = attention_forward(&seq, &w, 0, &BTreeSet::new()).unwrap();
    assert_eq!(masked.len(), plain.len());
    let skip = [false, true, false, true, false];
    let (expect, _) = reference_layer(&features(&seq), w.layer(0).unwrap(), 2, &skip);
    close(&features(&masked), &expect, 1e-12);
    for i in [0, 2, 4] {
        assert_eq!(masked.tokens()[i].feature, plain.tokens()[i].feature);
    }
    assert_eq!(rec.computed, skip.map(|s| !s).to_vec());
}

fn with_positions(seq: &FeatureSeq, d: usize) -> FeatureSeq {
    let tokens = seq
        .tokens()
        .iter()
        .map(|t| {
            let pe = position_code(t.origins[0], d);
            Token {
                feature: t.feature.iter().zip(pe).map(|(a, b)| a + b).collect(),
                ..t.clone()
            }
        })
        .collect();
    FeatureSeq::new(tokens).unwrap()
}

#[test]
fn hooked_stack_matches_explicit_rebuilds() {
    let d = 16;
    let w = init_weights(&EncoderConfig::new(3, 2, d, 5)).unwrap();
    let seq = random_seq(10, d, 5);
    // Drop the two lowest-scoring tokens after every layer's attention.
    let pick = |ctx: &LayerContext<'_>| -> Vec<TokenId> {
        let mut v: Vec<(f64, TokenId)> = ctx.scores.iter().map(|(id, s)| (s, id)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.iter().take(2).map(|p| p.1).collect()
    };
    let mut hook = |ctx: &LayerContext<'_>| Ok(HookAction::Remove(pick(ctx)));
    let run = run_stack(&seq, &w, &mut hook, &BTreeSet::new()).unwrap();

    let mut cur = with_positions(&seq, d);
    for layer in 0..3 {
        let (out, rec) = attention_forward(&cur, &w, layer, &BTreeSet::new()).unwrap();
        let scores = importance_scores(&rec);
        assert_eq!(scores, run.scores[layer]);
        let mut ranked: Vec<(f64, TokenId)> = scores.iter().map(|(id, s)| (s, id)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let drop: BTreeSet<TokenId> = ranked.iter().take(2).map(|p| p.1).collect();
        cur = FeatureSeq::new(out.into_tokens().into_iter().filter(|t| !drop.contains(&t.id)).collect()).unwrap();
    }
    assert_eq!(run.output.ids(), cur.ids());
    close(&features(&run.output), &features(&cur), 1e-12);
}

#[test]
fn importance_matches_double_loop_on_random_stochastic_matrices() {
    let mut r = stream(21, "stochastic", 0);
    let heads: Vec<Matrix> = (0..3)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    let raw: Vec<f64> = normal_vec(&mut r, 5).into_iter().map(f64::exp).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            Matrix::from_rows(&rows)
        })
        .collect();
    let rec = AttentionRecord {
        layer_index: 0,
        ids: (0..5).map(TokenId).collect(),
        heads: heads.clone(),
        computed: vec![true; 5],
    };
    let got = importance_scores(&rec);
    for j in 0..5 {
        let mut s = 0.0;
        for h in &heads {
            for i in 0..5 {
                s += h.get(i, j);
            }
        }
        assert!((got.get(TokenId(j as u32)).unwrap() - s).abs() < 1e-12);
    }
}

// All A x B cosine pairs, best B per A, top m pairs merged into B.
fn tome_reference(tokens: &[Token], m: usize) -> Vec<(TokenId, Vec<TokenId>)> {
    let cos = |a: &[f64], b: &[f64]| {
        let mut d = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            d += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        d / (na.sqrt() * nb.sqrt())
    };
    let mut best = Vec::new();
    for ai in (0..tokens.len()).step_by(2) {
        let mut top = (f64::MIN, 0);
        for bi in (1..tokens.len()).step_by(2) {
            let c = cos(&tokens[ai].feature, &tokens[bi].feature);
            if c > top.0 {
                top = (c, bi);
            }
        }
        best.push((top.0, ai, top.1));
    }
    best.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    let mut groups: Vec<(TokenId, Vec<TokenId>)> = Vec::new();
    for &(_, a, b) in best.iter().take(m) {
        let keep = tokens[b].id;
        match groups.iter_mut().find(|g| g.0 == keep) {
            Some(g) => g.1.push(tokens[a].id),
            None => groups.push((keep, vec![tokens[a].id])),
        }
    }
    for g in &mut groups {
        g.1.sort();
    }
    groups.sort();
    groups
}

#[test]
fn tome_matches_exhaustive_pairing() {
    for seed in 0..50 {
        let seq = random_seq(6, 4, 100 + seed);
        let (groups, clamped) = tome_merge(seq.tokens(), &BTreeSet::new(), 2);
        assert_eq!(clamped, 0);
        let got: Vec<(TokenId, Vec<TokenId>)> = groups.into_iter().map(|g| (g.keep, g.absorb)).collect();
        assert_eq!(got, tome_reference(seq.tokens(), 2), "seed {seed}");
    }
}

#[test]
fn tome_in_stack_averages_and_unites_origins() {
    let w = init_weights(&EncoderConfig::new(1, 1, 4, 2)).unwrap();
    let seq = random_seq(6, 4, 9);
    let mut hook = |ctx: &LayerContext<'_>| {
        let (groups, _) = tome_merge(ctx.tokens, &BTreeSet::new(), 2);
        Ok(HookAction::Merge(groups))
    };
    let run = run_stack(&seq, &w, &mut hook, &BTreeSet::new()).unwrap();
    assert_eq!(run.output.len(), 4);
    let origins: usize = run.output.tokens().iter().map(|t| t.origins.len()).sum();
    assert_eq!(origins, 6);
}

#[test]
fn same_seed_same_bits() {
    let run = |seed| {
        let w = init_weights(&EncoderConfig::new(2, 2, 8, seed)).unwrap();
        let r = run_stack(&random_seq(7, 8, 1), &w, &mut NoPrune, &BTreeSet::new()).unwrap();
        (w.to_bytes(), features(&r.output))
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4).0, run(5).0);
}

fn weights_for(heads: usize, d: usize, seed: u64) -> EncoderWeights {
    init_weights(&EncoderConfig::new(2, heads, d, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_sum_to_one_and_scores_to_h_times_len(
        n in 1usize..9,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        seed in any::<u64>(),
        mask_bits in any::<u16>(),
    ) {
        let d = 8;
        let w = weights_for(heads, d, seed % 17);
        let seq = random_seq(n, d, seed);
        let mask: BTreeSet<TokenId> = (0..n).filter(|i| mask_bits >> i & 1 == 1).map(|i| TokenId(i as u32)).collect();
        let run = run_stack(&seq, &w, &mut NoPrune, &mask).unwrap();
        prop_assert_eq!(run.output.len(), n);
        for layer in 0..2 {
            let (_, rec) = attention_forward(&seq, &w, layer, &BTreeSet::new()).unwrap();
            for h in &rec.heads {
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| h.get(i, j)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
            let total = importance_scores(&rec).total();
            prop_assert!((total - (heads * n) as f64).abs() < 1e-4);
        }
        let queried = n - mask.len();
        for s in &run.scores {
            prop_assert!((s.total() - (heads * queried) as f64).abs() < 1e-4);
        }
    }
}
