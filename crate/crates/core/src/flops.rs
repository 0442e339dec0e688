//! Analytic FLOP model of the encoder stacks.
//!
//! Counting convention: one multiply-add is two FLOPs. Only matrix products
//! are counted (Q/K/V/output projections, QKᵀ, Attn·V and the two
//! feed-forward projections); softmax, layer norm and biases are free.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FLOPS_PER_MAC: u64 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlopsError {
    #[error("schedule/stack mismatch: {what} has {got} layers, stack has {expected}")]
    StackMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("zero original flops")]
    ZeroOriginal,
}

/// QKᵀ plus Attn·V over `l` queries and `l` keys.
pub fn attention_flops(l: u64, d: u64) -> u64 {
    4 * l * l * d
}

/// Attention cost when only `l_act` query rows are computed.
pub fn sas_attention_flops(l: u64, l_act: u64, d: u64) -> u64 {
    4 * l_act * l * d
}

pub fn layer_flops(l: u64, d: u64, ffn_mult: u64) -> u64 {
    8 * l * d * d + attention_flops(l, d) + 4 * ffn_mult * l * d * d
}

/// Token counts seen by one encoder layer.
///
/// `l_in` tokens enter the layer and are projected to Q, K and V. `l_query`
/// of them compute attention rows. After the pruning hook `l_out` tokens
/// remain, `l_out_query` of which carry an attention output through the
/// output projection. All `l_out` tokens go through the feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub l_in: u64,
    pub l_query: u64,
    pub l_out: u64,
    pub l_out_query: u64,
}

impl LayerShape {
    pub fn uniform(l: u64) -> Self {
        LayerShape {
            l_in: l,
            l_query: l,
            l_out: l,
            l_out_query: l,
        }
    }

    pub fn flops(&self, d: u64, ffn_mult: u64) -> u64 {
        6 * self.l_in * d * d
            + 4 * self.l_query * self.l_in * d
            + 2 * self.l_out_query * d * d
            + 4 * ffn_mult * self.l_out * d * d
    }
}

pub fn stack_flops(shapes: &[LayerShape], d: u64, ffn_mult: u64) -> u64 {
    shapes.iter().map(|s| s.flops(d, ffn_mult)).sum()
}

/// Widths and depths of the three encoder stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden_dim: u64,
    pub ffn_mult: u64,
    pub lan_layers: usize,
    pub vis_layers: usize,
    pub cm_layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden_dim: 768,
            ffn_mult: 4,
            lan_layers: 6,
            vis_layers: 2,
            cm_layers: 3,
        }
    }
}

/// Per-step layer shapes of the view and cross-modal stacks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepShapes {
    pub views: Vec<LayerShape>,
    pub cm: Vec<LayerShape>,
}

/// FLOP totals of one episode. Counts are raw FLOPs, not GFLOPs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub lan: u64,
    pub vis_per_step: Vec<u64>,
    pub cm_per_step: Vec<u64>,
    pub c: u64,
}

impl FlopsLedger {
    pub fn steps(&self) -> usize {
        self.vis_per_step.len()
    }

    /// Mean per-step view-stack cost.
    pub fn g_vis(&self) -> f64 {
        mean(&self.vis_per_step)
    }

    pub fn g_cm(&self) -> f64 {
        mean(&self.cm_per_step)
    }

    pub fn g_lan(&self) -> f64 {
        self.lan as f64
    }

    pub fn g_total(&self) -> u64 {
        self.lan + self.vis_per_step.iter().sum::<u64>() + self.cm_per_step.iter().sum::<u64>() + self.c
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        self.lan += other.lan;
        self.vis_per_step.extend_from_slice(&other.vis_per_step);
        self.cm_per_step.extend_from_slice(&other.cm_per_step);
        self.c += other.c;
    }
}

impl fmt::Display for FlopsLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "G_lan={:.6e} G_vis={:.6e} G_cm={:.6e} D={} c={} G_total={:.6e} (GFLOPs, flops_per_mac={})",
            self.g_lan() / 1e9,
            self.g_vis() / 1e9,
            self.g_cm() / 1e9,
            self.steps(),
            self.c,
            self.g_total() as f64 / 1e9,
            FLOPS_PER_MAC
        )
    }
}

fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<u64>() as f64 / xs.len() as f64
    }
}

fn check(what: &'static str, got: usize, expected: usize) -> Result<(), FlopsError> {
    if got == expected {
        Ok(())
    } else {
        Err(FlopsError::StackMismatch {
            what,
            got,
            expected,
        })
    }
}

/// Compose a ledger from explicit layer shapes.
pub fn ledger_from_shapes(
    instr: &[LayerShape],
    steps: &[StepShapes],
    dims: &ModelDims,
    c: u64,
) -> Result<FlopsLedger, FlopsError> {
    check("instruction schedule", instr.len(), dims.lan_layers)?;
    let (d, f) = (dims.hidden_dim, dims.ffn_mult);
    let mut ledger = FlopsLedger {
        lan: stack_flops(instr, d, f),
        c,
        ..Default::default()
    };
    for s in steps {
        check("view schedule", s.views.len(), dims.vis_layers)?;
        check("cross-modal schedule", s.cm.len(), dims.cm_layers)?;
        ledger.vis_per_step.push(stack_flops(&s.views, d, f));
        ledger.cm_per_step.push(stack_flops(&s.cm, d, f));
    }
    Ok(ledger)
}

/// Compose a ledger from per-layer input lengths.
///
/// `instr_lens[i]` and `view_lens[step][i]` are the input lengths of layer i;
/// a layer's output length is the next layer's input length, and the last
/// layer's output length is `*_out`. The cross-modal stack at each step sees
/// the retained instruction, the retained views and `hist_lens[step]` history
/// tokens, and is not pruned.
pub fn g_total(
    instr_lens: &[u64],
    instr_out: u64,
    view_lens: &[(Vec<u64>, u64)],
    hist_lens: &[u64],
    dims: &ModelDims,
    c: u64,
) -> Result<FlopsLedger, FlopsError> {
    check("history schedule", hist_lens.len(), view_lens.len())?;
    let instr = chain(instr_lens, instr_out);
    let steps = view_lens
        .iter()
        .zip(hist_lens)
        .map(|((lens, out), h)| StepShapes {
            views: chain(lens, *out),
            cm: vec![LayerShape::uniform(instr_out + out + h); dims.cm_layers],
        })
        .collect::<Vec<_>>();
    ledger_from_shapes(&instr, &steps, dims, c)
}

fn chain(lens: &[u64], out: u64) -> Vec<LayerShape> {
    (0..lens.len())
        .map(|i| {
            let next = lens.get(i + 1).copied().unwrap_or(out);
            LayerShape {
                l_in: lens[i],
                l_query: lens[i],
                l_out: next,
                l_out_query: next,
            }
        })
        .collect()
}

pub fn flops_percent(pruned: &FlopsLedger, original: &FlopsLedger) -> Result<f64, FlopsError> {
    let o = original.g_total();
    if o == 0 {
        return Err(FlopsError::ZeroOriginal);
    }
    Ok(100.0 * pruned.g_total() as f64 / o as f64)
}

/// FLOPS percentage points saved by pruning a fraction of an `instr_len`
/// token instruction before the language stack, with `views` view tokens,
/// `history` history tokens and `steps` decisions.
pub fn instruction_pruning_savings(
    dims: &ModelDims,
    instr_len: u64,
    prune_fraction: f64,
    views: u64,
    history: u64,
    steps: usize,
) -> f64 {
    let ledger = |l: u64| {
        let view = (vec![views; dims.vis_layers], views);
        g_total(
            &vec![l; dims.lan_layers],
            l,
            &vec![view; steps],
            &vec![history; steps],
            dims,
            0,
        )
        .expect("schedules built from dims")
    };
    let kept = instr_len - (prune_fraction * instr_len as f64).round() as u64;
    let original = ledger(instr_len);
    let pruned = ledger(kept);
    100.0 - flops_percent(&pruned, &original).expect("nonzero original")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_counts_match_reference_values() {
        assert_eq!(attention_flops(36, 768), 3_981_312);
        assert_eq!(sas_attention_flops(36, 4, 768), 442_368);
        assert_eq!(sas_attention_flops(36, 36, 768), attention_flops(36, 768));
    }

    #[test]
    fn attention_share_of_a_layer_is_small() {
        let share = attention_flops(36, 768) as f64 / layer_flops(36, 768, 4) as f64;
        assert!(share < 0.02, "{share}");
    }

    #[test]
    fn halving_length_quarters_attention_and_halves_projections() {
        assert_eq!(attention_flops(18, 64) * 4, attention_flops(36, 64));
        let proj = |l: u64| layer_flops(l, 64, 4) - attention_flops(l, 64);
        assert_eq!(proj(18) * 2, proj(36));
    }

    #[test]
    fn uniform_shape_equals_layer_flops() {
        for (l, d, f) in [(1, 8, 4), (36, 768, 4), (7, 12, 2)] {
            assert_eq!(LayerShape::uniform(l).flops(d, f), layer_flops(l, d, f));
        }
    }

    #[test]
    fn unpruned_ledger_composes_linearly_in_steps() {
        let dims = ModelDims::default();
        let one = g_total(&[20; 6], 20, &[(vec![36; 2], 36)], &[14], &dims, 0).unwrap();
        assert_eq!(one.lan, 6 * layer_flops(20, 768, 4));
        assert_eq!(one.g_total(), one.lan + one.vis_per_step[0] + one.cm_per_step[0]);
        assert_eq!(one.cm_per_step[0], 3 * layer_flops(70, 768, 4));
        let two = g_total(
            &[20; 6],
            20,
            &[(vec![36; 2], 36), (vec![36; 2], 36)],
            &[14, 14],
            &dims,
            5,
        )
        .unwrap();
        assert_eq!(two.g_total() - two.lan - 5, 2 * (one.g_total() - one.lan));
    }

    #[test]
    fn stack_mismatch_is_reported() {
        let dims = ModelDims::default();
        let err = g_total(&[20; 5], 20, &[], &[], &dims, 0).unwrap_err();
        assert!(matches!(err, FlopsError::StackMismatch { .. }));
    }

    #[test]
    fn percent_of_identical_ledgers_is_hundred() {
        let dims = ModelDims::default();
        let l = g_total(&[20; 6], 20, &[(vec![36; 2], 36)], &[14], &dims, 0).unwrap();
        assert_eq!(flops_percent(&l, &l).unwrap(), 100.0);
        assert_eq!(
            flops_percent(&l, &FlopsLedger::default()),
            Err(FlopsError::ZeroOriginal)
        );
    }

    #[test]
    fn halving_all_lengths_roughly_halves_cost() {
        let dims = ModelDims::default();
        let full = g_total(&[36; 6], 36, &[(vec![36; 2], 36)], &[36], &dims, 0).unwrap();
        let half = g_total(&[18; 6], 18, &[(vec![18; 2], 18)], &[18], &dims, 0).unwrap();
        let p = flops_percent(&half, &full).unwrap();
        assert!((p - 50.0).abs() <= 2.0, "{p}");
    }

    #[test]
    fn longer_steps_can_exceed_hundred_percent() {
        let dims = ModelDims::default();
        let base = g_total(&[20; 6], 20, &[(vec![12; 2], 12)], &[3], &dims, 0).unwrap();
        let step = (vec![10; 2], 10);
        let longer = g_total(&[20; 6], 20, &[step.clone(), step.clone(), step], &[3, 4, 5], &dims, 0).unwrap();
        assert!(flops_percent(&longer, &base).unwrap() > 100.0);
    }
}
