//! Toy multi-head self-attention stack.
//!
//! Weights are seeded random; the stack exists to produce real softmax
//! attention, importance scores and exact multiply-add counts. Each layer is
//! pre-norm: `x + Wo·Attn(LN(x))` followed by `x + FFN(LN(x))`, with a hook
//! between the attention matrices and the output projection where pruning
//! strategies remove or merge tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::LayerShape;
use crate::rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("hidden_dim not divisible by heads ({hidden_dim} % {heads} != 0)")]
    HeadsDoNotDivide { hidden_dim: usize, heads: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error("empty sequence")]
    EmptySequence,
    #[error("feature width {got} does not match hidden_dim {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("duplicate token id {0}")]
    DuplicateToken(TokenId),
    #[error("token {0} is not in the sequence")]
    UnknownToken(TokenId),
    #[error("token {0} has no origin index")]
    NoOrigin(TokenId),
    #[error("layer {index} out of range for a {layers}-layer stack")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("token {0} appears in more than one merge group")]
    OverlappingMerge(TokenId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(layers: usize, heads: usize, hidden_dim: usize, seed: u64) -> Self {
        EncoderConfig {
            layers,
            heads,
            hidden_dim,
            ffn_mult: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.layers == 0 {
            return Err(EncoderError::InvalidConfig("layers must be at least 1"));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.ffn_mult == 0 {
            return Err(EncoderError::InvalidConfig(
                "heads, hidden_dim and ffn_mult must be positive",
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(EncoderError::HeadsDoNotDivide {
                hidden_dim: self.hidden_dim,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics when rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn random(rng: &mut rng::StreamRng, rows: usize, cols: usize, scale: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng::normal(rng) * scale).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    config: EncoderConfig,
    layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layer(&self, index: usize) -> Option<&LayerWeights> {
        self.layers.get(index)
    }

    /// Little-endian dump of every weight in initialization order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2])
            .flat_map(|m| m.data.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }
}

/// Draw all weights from N(0, 1) / sqrt(hidden_dim). Head h uses columns
/// `h*head_dim..(h+1)*head_dim` of Wq, Wk and Wv.
pub fn init_weights(config: &EncoderConfig) -> Result<EncoderWeights, EncoderError> {
    config.validate()?;
    let d = config.hidden_dim;
    let f = d * config.ffn_mult;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = rng::stream(config.seed, "encoder-weights", 0);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: Matrix::random(&mut rng, d, d, scale),
            wk: Matrix::random(&mut rng, d, d, scale),
            wv: Matrix::random(&mut rng, d, d, scale),
            wo: Matrix::random(&mut rng, d, d, scale),
            w1: Matrix::random(&mut rng, d, f, scale),
            w2: Matrix::random(&mut rng, f, d, scale),
        })
        .collect();
    Ok(EncoderWeights {
        config: *config,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub feature: Vec<f64>,
    /// Positions in the unpruned sequence this token stands for. More than
    /// one after a merge.
    pub origins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSeq {
    tokens: Vec<Token>,
}

impl FeatureSeq {
    pub fn new(tokens: Vec<Token>) -> Result<Self, EncoderError> {
        let mut seen = BTreeSet::new();
        for t in &tokens {
            if !seen.insert(t.id) {
                return Err(EncoderError::DuplicateToken(t.id));
            }
            if t.origins.is_empty() {
                return Err(EncoderError::NoOrigin(t.id));
            }
        }
        Ok(FeatureSeq { tokens })
    }

    /// Ids 0.. and origins equal to positions.
    pub fn from_features(features: Vec<Vec<f64>>) -> Self {
        let tokens = features
            .into_iter()
            .enumerate()
            .map(|(i, feature)| Token {
                id: TokenId(i as u32),
                feature,
                origins: vec![i],
            })
            .collect();
        FeatureSeq { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn get(&self, id: TokenId) -> Option<&Token> {
        self.tokens.iter().find(|t| t.id == id)
    }
}

/// Softmax attention of one layer. `heads[h]` has one row per token; rows of
/// query-skipped tokens are all zero and flagged in `computed`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub ids: Vec<TokenId>,
    pub heads: Vec<Matrix>,
    pub computed: Vec<bool>,
}

/// Received attention per token, summed over heads and query rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImportanceScores(BTreeMap<TokenId, f64>);

impl ImportanceScores {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (TokenId, f64)>) -> Self {
        ImportanceScores(pairs.into_iter().collect())
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        self.0.get(&id).copied()
    }

    pub fn insert(&mut self, id: TokenId, score: f64) {
        self.0.insert(id, score);
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    /// Scores restricted to `ids`; missing ids score 0.
    pub fn restrict(&self, ids: impl IntoIterator<Item = TokenId>) -> Self {
        ImportanceScores(ids.into_iter().map(|id| (id, self.get(id).unwrap_or(0.0))).collect())
    }
}

pub fn importance_scores(record: &AttentionRecord) -> ImportanceScores {
    let n = record.ids.len();
    let mut col = vec![0.0; n];
    for head in &record.heads {
        for (i, computed) in record.computed.iter().enumerate() {
            if !computed {
                continue;
            }
            for (j, c) in col.iter_mut().enumerate() {
                *c += head.get(i, j);
            }
        }
    }
    ImportanceScores(record.ids.iter().copied().zip(col).collect())
}

/// Multiply-add counter threaded through every matrix product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub macs: u64,
}

impl MacCounter {
    pub fn flops(&self) -> u64 {
        self.macs * crate::flops::FLOPS_PER_MAC
    }
}

fn vec_mat(x: &[f64], m: &Matrix, counter: &mut MacCounter) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for (r, xr) in x.iter().enumerate() {
        let row = m.row(r);
        for (o, w) in out.iter_mut().zip(row) {
            *o += xr * w;
        }
    }
    counter.macs += (m.rows * m.cols) as u64;
    out
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Sinusoidal position code scaled by 1/sqrt(d).
pub fn position_code(pos: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            scale * if i % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

struct Slot {
    token: Token,
    /// Concatenated head outputs, absent for query-skipped tokens.
    z: Option<Vec<f64>>,
    masked: bool,
}

fn check_seq(seq: &FeatureSeq, d: usize) -> Result<(), EncoderError> {
    if seq.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    if let Some(t) = seq.tokens.iter().find(|t| t.feature.len() != d) {
        return Err(EncoderError::WidthMismatch {
            got: t.feature.len(),
            expected: d,
        });
    }
    Ok(())
}

/// Attention half of a layer: fills `z` for unmasked slots and returns the
/// softmax matrices.
fn attend(
    slots: &mut [Slot],
    w: &LayerWeights,
    config: &EncoderConfig,
    layer_index: usize,
    counter: &mut MacCounter,
) -> AttentionRecord {
    let n = slots.len();
    let hd = config.head_dim();
    let normed: Vec<Vec<f64>> = slots.iter().map(|s| layer_norm(&s.token.feature)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &w.wq, counter)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &w.wk, counter)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &w.wv, counter)).collect();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = vec![Matrix::zeros(n, n); config.heads];
    let computed: Vec<bool> = slots.iter().map(|s| !s.masked).collect();
    let mut z = vec![vec![0.0; config.hidden_dim]; n];
    for (h, attn) in heads.iter_mut().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in (0..n).filter(|&i| computed[i]) {
            let mut row: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = q[i][cols.clone()].iter().zip(&k[j][cols.clone()]).map(|(a, b)| a * b).sum();
                    dot * scale
                })
                .collect();
            counter.macs += (n * hd) as u64;
            softmax(&mut row);
            for (j, a) in row.iter().enumerate() {
                attn.set(i, j, *a);
                for (zc, vc) in z[i][cols.clone()].iter_mut().zip(&v[j][cols.clone()]) {
                    *zc += a * vc;
                }
            }
            counter.macs += (n * hd) as u64;
        }
    }
    for ((slot, zi), c) in slots.iter_mut().zip(z).zip(&computed) {
        slot.z = c.then_some(zi);
    }
    AttentionRecord {
        layer_index,
        ids: slots.iter().map(|s| s.token.id).collect(),
        heads,
        computed,
    }
}

/// Output projection, residual and feed-forward half of a layer.
fn finish(slots: &mut [Slot], w: &LayerWeights, counter: &mut MacCounter) {
    for slot in slots.iter_mut() {
        if let Some(z) = slot.z.take() {
            let o = vec_mat(&z, &w.wo, counter);
            slot.token.feature.iter_mut().zip(o).for_each(|(x, o)| *x += o);
        }
        let hidden: Vec<f64> = vec_mat(&layer_norm(&slot.token.feature), &w.w1, counter)
            .into_iter()
            .map(|h| h.max(0.0))
            .collect();
        let out = vec_mat(&hidden, &w.w2, counter);
        slot.token.feature.iter_mut().zip(out).for_each(|(x, o)| *x += o);
    }
}

fn slots_of(seq: &FeatureSeq, mask: &BTreeSet<TokenId>) -> Vec<Slot> {
    seq.tokens
        .iter()
        .map(|t| Slot {
            token: t.clone(),
            z: None,
            masked: mask.contains(&t.id),
        })
        .collect()
}

/// One full layer with no hook. Tokens in `mask` compute no attention row
/// and keep only the residual and feed-forward paths.
pub fn attention_forward(
    seq: &FeatureSeq,
    weights: &EncoderWeights,
    layer_index: usize,
    mask: &BTreeSet<TokenId>,
) -> Result<(FeatureSeq, AttentionRecord), EncoderError> {
    attention_forward_counted(seq, weights, layer_index, mask, &mut MacCounter::default())
}

pub fn attention_forward_counted(
    seq: &FeatureSeq,
    weights: &EncoderWeights,
    layer_index: usize,
    mask: &BTreeSet<TokenId>,
    counter: &mut MacCounter,
) -> Result<(FeatureSeq, AttentionRecord), EncoderError> {
    let config = weights.config;
    check_seq(seq, config.hidden_dim)?;
    let w = weights.layer(layer_index).ok_or(EncoderError::LayerOutOfRange {
        index: layer_index,
        layers: config.layers,
    })?;
    let mut slots = slots_of(seq, mask);
    let record = attend(&mut slots, w, &config, layer_index, counter);
    finish(&mut slots, w, counter);
    let tokens = slots.into_iter().map(|s| s.token).collect();
    Ok((FeatureSeq { tokens }, record))
}

/// Tokens `absorb` are folded into `keep`: features are averaged without
/// weighting and origins are united.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeGroup {
    pub keep: TokenId,
    pub absorb: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum HookAction {
    #[default]
    Keep,
    Remove(Vec<TokenId>),
    Merge(Vec<MergeGroup>),
}

/// What a hook sees after a layer's attention has been computed.
pub struct LayerContext<'a> {
    pub layer_index: usize,
    pub layers: usize,
    pub tokens: &'a [Token],
    pub scores: &'a ImportanceScores,
}

pub trait LayerHook {
    fn after_attention(&mut self, ctx: &LayerContext<'_>) -> crate::Result<HookAction>;
}

pub struct NoPrune;

impl LayerHook for NoPrune {
    fn after_attention(&mut self, _: &LayerContext<'_>) -> crate::Result<HookAction> {
        Ok(HookAction::Keep)
    }
}

impl<F> LayerHook for F
where
    F: FnMut(&LayerContext<'_>) -> crate::Result<HookAction>,
{
    fn after_attention(&mut self, ctx: &LayerContext<'_>) -> crate::Result<HookAction> {
        self(ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackRun {
    pub output: FeatureSeq,
    pub scores: Vec<ImportanceScores>,
    pub shapes: Vec<LayerShape>,
    /// Zero for simulated runs.
    pub macs: u64,
}

impl StackRun {
    pub fn removed(&self) -> usize {
        self.shapes
            .iter()
            .map(|s| (s.l_in - s.l_out) as usize)
            .sum()
    }
}

fn apply(slots: &mut Vec<Slot>, action: HookAction) -> Result<(), EncoderError> {
    let index = |slots: &[Slot], id: TokenId| {
        slots
            .iter()
            .position(|s| s.token.id == id)
            .ok_or(EncoderError::UnknownToken(id))
    };
    match action {
        HookAction::Keep => {}
        HookAction::Remove(ids) => {
            let set: BTreeSet<TokenId> = ids.into_iter().collect();
            for id in &set {
                index(slots, *id)?;
            }
            slots.retain(|s| !set.contains(&s.token.id));
        }
        HookAction::Merge(groups) => {
            let mut used = BTreeSet::new();
            for g in &groups {
                for id in std::iter::once(&g.keep).chain(&g.absorb) {
                    index(slots, *id)?;
                    if !used.insert(*id) {
                        return Err(EncoderError::OverlappingMerge(*id));
                    }
                }
            }
            for g in groups {
                let members: Vec<usize> = std::iter::once(g.keep)
                    .chain(g.absorb.iter().copied())
                    .map(|id| index(slots, id))
                    .collect::<Result<_, _>>()?;
                let n = members.len() as f64;
                let d = slots[members[0]].token.feature.len();
                let mut feature = vec![0.0; d];
                let mut origins = Vec::new();
                let mut zs: Vec<&Vec<f64>> = Vec::new();
                for &m in &members {
                    let s = &slots[m];
                    feature.iter_mut().zip(&s.token.feature).for_each(|(a, b)| *a += b / n);
                    origins.extend_from_slice(&s.token.origins);
                    zs.extend(s.z.as_ref());
                }
                origins.sort_unstable();
                origins.dedup();
                let z = (!zs.is_empty()).then(|| {
                    let k = zs.len() as f64;
                    let mut z = vec![0.0; zs[0].len()];
                    for zi in &zs {
                        z.iter_mut().zip(*zi).for_each(|(a, b)| *a += b / k);
                    }
                    z
                });
                let masked = members.iter().all(|&m| slots[m].masked);
                let keep = &mut slots[members[0]];
                keep.token.feature = feature;
                keep.token.origins = origins;
                keep.z = z;
                keep.masked = masked;
                let absorbed: BTreeSet<TokenId> = g.absorb.into_iter().collect();
                slots.retain(|s| !absorbed.contains(&s.token.id));
            }
        }
    }
    Ok(())
}

fn shape(l_in: usize, l_query: usize, slots: &[Slot]) -> LayerShape {
    LayerShape {
        l_in: l_in as u64,
        l_query: l_query as u64,
        l_out: slots.len() as u64,
        l_out_query: slots.iter().filter(|s| !s.masked).count() as u64,
    }
}

/// Run every layer, adding position codes at the input and calling `hook`
/// after each layer's attention.
pub fn run_stack(
    seq: &FeatureSeq,
    weights: &EncoderWeights,
    hook: &mut dyn LayerHook,
    mask: &BTreeSet<TokenId>,
) -> crate::Result<StackRun> {
    let config = weights.config;
    check_seq(seq, config.hidden_dim)?;
    let mut counter = MacCounter::default();
    let mut slots = slots_of(seq, mask);
    for s in &mut slots {
        let pos = *s.token.origins.iter().min().expect("checked nonempty");
        let pe = position_code(pos, config.hidden_dim);
        s.token.feature.iter_mut().zip(pe).for_each(|(x, p)| *x += p);
    }
    let mut scores = Vec::with_capacity(config.layers);
    let mut shapes = Vec::with_capacity(config.layers);
    for (index, w) in weights.layers.iter().enumerate() {
        if slots.is_empty() {
            return Err(EncoderError::EmptySequence.into());
        }
        let l_in = slots.len();
        let l_query = slots.iter().filter(|s| !s.masked).count();
        let record = attend(&mut slots, w, &config, index, &mut counter);
        let layer_scores = importance_scores(&record);
        let tokens: Vec<Token> = slots.iter().map(|s| s.token.clone()).collect();
        let action = hook.after_attention(&LayerContext {
            layer_index: index,
            layers: config.layers,
            tokens: &tokens,
            scores: &layer_scores,
        })?;
        apply(&mut slots, action)?;
        shapes.push(shape(l_in, l_query, &slots));
        finish(&mut slots, w, &mut counter);
        scores.push(layer_scores);
    }
    Ok(StackRun {
        output: FeatureSeq {
            tokens: slots.into_iter().map(|s| s.token).collect(),
        },
        scores,
        shapes,
        macs: counter.macs,
    })
}

/// Run the hook protocol of a `layers`-deep stack without any arithmetic:
/// every layer reports the fixed `scores` (restricted to live tokens) and
/// features change only through merges.
pub fn simulate_stack(
    seq: &FeatureSeq,
    layers: usize,
    hook: &mut dyn LayerHook,
    scores: &ImportanceScores,
    mask: &BTreeSet<TokenId>,
) -> crate::Result<StackRun> {
    if seq.is_empty() {
        return Err(EncoderError::EmptySequence.into());
    }
    let mut slots = slots_of(seq, mask);
    let mut all_scores = Vec::with_capacity(layers);
    let mut shapes = Vec::with_capacity(layers);
    for index in 0..layers {
        let l_in = slots.len();
        let l_query = slots.iter().filter(|s| !s.masked).count();
        let layer_scores = scores.restrict(slots.iter().map(|s| s.token.id));
        let tokens: Vec<Token> = slots.iter().map(|s| s.token.clone()).collect();
        let action = hook.after_attention(&LayerContext {
            layer_index: index,
            layers,
            tokens: &tokens,
            scores: &layer_scores,
        })?;
        apply(&mut slots, action)?;
        shapes.push(shape(l_in, l_query, &slots));
        all_scores.push(layer_scores);
    }
    Ok(StackRun {
        output: FeatureSeq {
            tokens: slots.into_iter().map(|s| s.token).collect(),
        },
        scores: all_scores,
        shapes,
        macs: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::stack_flops;

    fn seq(n: usize, d: usize, seed: u64) -> FeatureSeq {
        let mut r = rng::stream(seed, "test-seq", 0);
        FeatureSeq::from_features((0..n).map(|_| rng::normal_vec(&mut r, d)).collect())
    }

    #[test]
    fn weights_are_deterministic_per_seed() {
        let c = EncoderConfig::new(1, 2, 8, 7);
        assert_eq!(init_weights(&c).unwrap().to_bytes(), init_weights(&c).unwrap().to_bytes());
        let other = EncoderConfig { seed: 8, ..c };
        assert_ne!(init_weights(&c).unwrap().to_bytes(), init_weights(&other).unwrap().to_bytes());
    }

    #[test]
    fn heads_must_divide_hidden_dim() {
        let err = init_weights(&EncoderConfig::new(1, 4, 6, 7)).unwrap_err();
        assert!(err.to_string().contains("hidden_dim not divisible by heads"));
        assert!(init_weights(&EncoderConfig::new(0, 1, 4, 7)).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = init_weights(&EncoderConfig::new(1, 2, 8, 7)).unwrap();
        let (_, rec) = attention_forward(&seq(1, 8, 1), &w, 0, &BTreeSet::new()).unwrap();
        for h in &rec.heads {
            assert_eq!(h.get(0, 0), 1.0);
        }
    }

    #[test]
    fn equal_logits_give_uniform_attention() {
        let w = init_weights(&EncoderConfig::new(1, 2, 8, 7)).unwrap();
        let f = rng::normal_vec(&mut rng::stream(3, "x", 0), 8);
        let s = FeatureSeq::from_features(vec![f.clone(), f]);
        let (_, rec) = attention_forward(&s, &w, 0, &BTreeSet::new()).unwrap();
        for h in &rec.heads {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((h.get(i, j) - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let w = init_weights(&EncoderConfig::new(1, 2, 8, 7)).unwrap();
        let err = attention_forward(&FeatureSeq::default(), &w, 0, &BTreeSet::new()).unwrap_err();
        assert_eq!(err.to_string(), "empty sequence");
    }

    #[test]
    fn column_sums_of_a_given_matrix() {
        let rec = AttentionRecord {
            layer_index: 0,
            ids: vec![TokenId(1), TokenId(2)],
            heads: vec![Matrix::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6]])],
            computed: vec![true, true],
        };
        let s = importance_scores(&rec);
        assert!((s.get(TokenId(1)).unwrap() - 1.3).abs() < 1e-12);
        assert!((s.get(TokenId(2)).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn uniform_attention_scores_equal_head_count() {
        let n = 5;
        let u = Matrix::from_rows(&vec![vec![1.0 / n as f64; n]; n]);
        let rec = AttentionRecord {
            layer_index: 0,
            ids: (0..n as u32).map(TokenId).collect(),
            heads: vec![u; 3],
            computed: vec![true; n],
        };
        for (_, v) in importance_scores(&rec).iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_hook_keeps_length() {
        let w = init_weights(&EncoderConfig::new(2, 2, 8, 7)).unwrap();
        let run = run_stack(&seq(6, 8, 2), &w, &mut NoPrune, &BTreeSet::new()).unwrap();
        assert_eq!(run.output.len(), 6);
        assert_eq!(run.scores.len(), 2);
    }

    #[test]
    fn removing_two_per_layer_shortens_output() {
        let w = init_weights(&EncoderConfig::new(2, 2, 8, 7)).unwrap();
        let mut hook = |ctx: &LayerContext<'_>| {
            Ok(HookAction::Remove(ctx.tokens[..2].iter().map(|t| t.id).collect()))
        };
        let run = run_stack(&seq(38, 8, 2), &w, &mut hook, &BTreeSet::new()).unwrap();
        assert_eq!(run.output.len(), 34);
        assert_eq!(run.removed(), 4);
    }

    #[test]
    fn removing_an_absent_token_fails() {
        let w = init_weights(&EncoderConfig::new(1, 2, 8, 7)).unwrap();
        let mut hook = |_: &LayerContext<'_>| Ok(HookAction::Remove(vec![TokenId(99)]));
        let err = run_stack(&seq(3, 8, 2), &w, &mut hook, &BTreeSet::new()).unwrap_err();
        assert!(err.to_string().contains("t99"));
    }

    #[test]
    fn instrumented_count_matches_shapes() {
        let c = EncoderConfig {
            ffn_mult: 2,
            ..EncoderConfig::new(3, 2, 8, 7)
        };
        let w = init_weights(&c).unwrap();
        let mask: BTreeSet<TokenId> = [TokenId(0), TokenId(3)].into();
        let mut hook = |ctx: &LayerContext<'_>| {
            Ok(HookAction::Remove(vec![ctx.tokens.last().unwrap().id]))
        };
        let run = run_stack(&seq(7, 8, 4), &w, &mut hook, &mask).unwrap();
        assert_eq!(run.macs * 2, stack_flops(&run.shapes, 8, 2));
    }

    #[test]
    fn merge_averages_features_and_unites_origins() {
        let s = FeatureSeq::from_features(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 3.0]]);
        let mut hook = |ctx: &LayerContext<'_>| {
            Ok(if ctx.layer_index == 0 {
                HookAction::Merge(vec![MergeGroup {
                    keep: TokenId(2),
                    absorb: vec![TokenId(0)],
                }])
            } else {
                HookAction::Keep
            })
        };
        let run = simulate_stack(&s, 2, &mut hook, &ImportanceScores::default(), &BTreeSet::new()).unwrap();
        assert_eq!(run.output.len(), 2);
        let merged = run.output.get(TokenId(2)).unwrap();
        assert_eq!(merged.feature, vec![2.0, 1.5]);
        assert_eq!(merged.origins, vec![0, 2]);
    }
}
