//! Rank scheduling and compression accounting.
//!
//! A plan is a short list of steps; each step optionally assigns one rank to
//! every attention matrix and one to every MLP matrix, across all blocks.
//! Layers marked non-compressible (K/V under multi-query attention,
//! embeddings, norms) are never targeted. Parameter predictions are exact
//! integer arithmetic so they can be cross-checked against surgery output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a fully-connected slot inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    AttentionQ,
    AttentionK,
    AttentionV,
    AttentionO,
    MlpUp,
    MlpGate,
    MlpDown,
    Other,
}

impl ModuleKind {
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ModuleKind::AttentionQ | ModuleKind::AttentionK | ModuleKind::AttentionV | ModuleKind::AttentionO
        )
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, ModuleKind::MlpUp | ModuleKind::MlpGate | ModuleKind::MlpDown)
    }
}

/// One fully-connected slot as the planner sees it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub module_kind: ModuleKind,
    pub compressible: bool,
}

impl LayerSpec {
    pub fn max_rank(&self) -> usize {
        self.d_in.min(self.d_out)
    }

    pub fn dense_params(&self) -> u64 {
        self.d_in as u64 * self.d_out as u64
    }

    pub fn factored_params(&self, rank: usize) -> u64 {
        rank as u64 * (self.d_in + self.d_out) as u64
    }
}

/// One step of a compression schedule. An absent rank means that module kind
/// is untouched this step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_attn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_mlp: Option<usize>,
    #[serde(default)]
    pub token_budget: u64,
}

impl PlanStep {
    /// Rank this step assigns to a slot of the given kind, if any.
    pub fn rank_for(&self, kind: ModuleKind) -> Option<usize> {
        if kind.is_attention() {
            self.r_attn
        } else if kind.is_mlp() {
            self.r_mlp
        } else {
            None
        }
    }
}

/// Predicted state after one plan step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepPrediction {
    pub step_index: usize,
    /// Exact total parameter count (all tensors) after this step.
    pub params_total: u64,
    /// Exact parameter count over compressible slots only.
    pub params_compressible: u64,
    /// Whole-model compression ratio relative to the dense layout.
    pub aggregate_cr: f64,
    /// (layer name, rank) for every slot this step touches.
    pub targets: Vec<(String, usize)>,
}

/// A validated schedule plus its per-step predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub steps: Vec<PlanStep>,
    pub predictions: Vec<StepPrediction>,
    /// Free-form flags, e.g. attention slots excluded by multi-query attention.
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Per-layer and aggregate cost figures for a (partially) factored model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionStats {
    pub per_layer: Vec<LayerStat>,
    pub params_before: u64,
    pub params_after: u64,
    pub aggregate_cr: f64,
    /// Forward cost over FC slots, dense layout: `sum 2·d_in·d_out` per token.
    pub flops_dense_per_token: u64,
    /// Forward cost over FC slots in the current layout: factored slots cost
    /// `2·R·(d_in+d_out)` per token.
    pub flops_factored_per_token: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStat {
    pub name: String,
    pub rank: Option<usize>,
    pub cr: f64,
}

/// A slot together with its current factorization state, the input to
/// [`compression_stats`].
#[derive(Debug, Clone)]
pub struct SlotCost {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: Option<usize>,
}

/// `d_in·d_out / (R·(d_in+d_out))` without the rank-bound check.
pub(crate) fn compression_ratio_unchecked(d_in: usize, d_out: usize, rank: usize) -> f64 {
    let num = d_in as u64 * d_out as u64;
    let den = rank as u64 * (d_in + d_out) as u64;
    num as f64 / den as f64
}

/// Layer compression ratio `d_in·d_out / (R·(d_in+d_out))`.
///
/// The numerator and denominator are formed in integer arithmetic before the
/// single float division. Values above 1 mean the factored layer is smaller.
pub fn compression_ratio(d_in: usize, d_out: usize, rank: usize) -> Result<f64> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::RankOutOfRange {
            rank,
            max: d_in.min(d_out),
            context: Some(format!("{d_in}x{d_out} layer")),
        });
    }
    Ok(compression_ratio_unchecked(d_in, d_out, rank))
}

/// Largest rank whose factored parameter count fits `max_params`, clamped to
/// `[1, min(d_in, d_out)]`. Errors if even rank 1 does not fit.
pub fn rank_for_budget(d_in: usize, d_out: usize, max_params: u64) -> Result<usize> {
    let per_rank = (d_in + d_out) as u64;
    if max_params < per_rank {
        return Err(Error::InfeasibleBudget { budget: max_params, d_in, d_out });
    }
    Ok(((max_params / per_rank) as usize).min(d_in.min(d_out)))
}

/// Validates a schedule against the model's FC slots and predicts the exact
/// parameter count after each step.
///
/// `other_params` counts the tensors outside the FC slots (embeddings, norms)
/// so the per-step totals are whole-model figures.
pub fn build_plan(layers: &[LayerSpec], steps: &[PlanStep], other_params: u64) -> Result<CompressionPlan> {
    if steps.is_empty() {
        return Err(Error::PlanValidation("plan has no steps".into()));
    }

    let mut notes = Vec::new();
    let excluded: Vec<&str> = layers
        .iter()
        .filter(|l| !l.compressible && l.module_kind != ModuleKind::Other)
        .map(|l| l.name.as_str())
        .collect();
    if !excluded.is_empty() {
        notes.push(format!(
            "multi-query attention: {} slot(s) excluded from every step ({})",
            excluded.len(),
            excluded.join(", ")
        ));
    }

    let dense_total: u64 = other_params + layers.iter().map(|l| l.dense_params()).sum::<u64>();

    // Current rank per layer index; None = still dense.
    let mut current: Vec<Option<usize>> = vec![None; layers.len()];
    let mut predictions = Vec::with_capacity(steps.len());

    for (pos, step) in steps.iter().enumerate() {
        if step.step_index != pos + 1 {
            return Err(Error::PlanValidation(format!(
                "step indices must run 1..{}, found {} at position {}",
                steps.len(),
                step.step_index,
                pos + 1
            )));
        }
        if step.r_attn.is_none() && step.r_mlp.is_none() {
            return Err(Error::PlanValidation(format!("step {} targets nothing", step.step_index)));
        }
        if step.r_attn == Some(0) || step.r_mlp == Some(0) {
            return Err(Error::PlanValidation(format!("step {} has a zero rank", step.step_index)));
        }

        let mut targets = Vec::new();
        for (idx, layer) in layers.iter().enumerate() {
            if !layer.compressible {
                continue;
            }
            let Some(rank) = step.rank_for(layer.module_kind) else { continue };
            if rank > layer.max_rank() {
                return Err(Error::PlanValidation(format!(
                    "step {}: rank {} exceeds min(d_in, d_out) = {} for layer {}",
                    step.step_index,
                    rank,
                    layer.max_rank(),
                    layer.name
                )));
            }
            if let Some(prev) = current[idx] {
                if rank > prev {
                    return Err(Error::PlanValidation(format!(
                        "step {}: rank {} for layer {} increases over earlier rank {}",
                        step.step_index, rank, layer.name, prev
                    )));
                }
            }
            current[idx] = Some(rank);
            targets.push((layer.name.clone(), rank));
        }

        let params_compressible: u64 = layers
            .iter()
            .zip(&current)
            .filter(|(l, _)| l.compressible)
            .map(|(l, r)| match r {
                Some(rank) => l.factored_params(*rank),
                None => l.dense_params(),
            })
            .sum();
        let params_fixed: u64 = layers
            .iter()
            .filter(|l| !l.compressible)
            .map(|l| l.dense_params())
            .sum::<u64>()
            + other_params;
        let params_total = params_compressible + params_fixed;

        predictions.push(StepPrediction {
            step_index: step.step_index,
            params_total,
            params_compressible,
            aggregate_cr: dense_total as f64 / params_total as f64,
            targets,
        });
    }

    Ok(CompressionPlan { steps: steps.to_vec(), predictions, notes })
}

/// Analytic parameter and flops accounting over the given FC slots.
pub fn compression_stats(slots: &[SlotCost], other_params: u64) -> CompressionStats {
    let mut per_layer = Vec::with_capacity(slots.len());
    let mut dense_params = 0u64;
    let mut current_params = 0u64;
    for slot in slots {
        let dense = slot.d_in as u64 * slot.d_out as u64;
        dense_params += dense;
        let (now, cr) = match slot.rank {
            Some(rank) => {
                let p = rank as u64 * (slot.d_in + slot.d_out) as u64;
                (p, compression_ratio_unchecked(slot.d_in, slot.d_out, rank))
            }
            None => (dense, 1.0),
        };
        current_params += now;
        per_layer.push(LayerStat { name: slot.name.clone(), rank: slot.rank, cr });
    }

    CompressionStats {
        per_layer,
        params_before: dense_params + other_params,
        params_after: current_params + other_params,
        aggregate_cr: (dense_params + other_params) as f64 / (current_params + other_params) as f64,
        flops_dense_per_token: 2 * dense_params,
        flops_factored_per_token: 2 * current_params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(name: &str, d_in: usize, d_out: usize, kind: ModuleKind, compressible: bool) -> LayerSpec {
        LayerSpec { name: name.into(), d_in, d_out, module_kind: kind, compressible }
    }

    #[test]
    fn cr_break_even_at_half_rank() {
        assert_eq!(compression_ratio(8, 8, 4).unwrap(), 1.0);
    }

    #[test]
    fn cr_hand_arithmetic() {
        assert!((compression_ratio(6, 4, 2).unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn cr_full_rank_expands_square() {
        assert_eq!(compression_ratio(4, 4, 4).unwrap(), 0.5);
    }

    #[test]
    fn cr_rank_errors() {
        assert!(compression_ratio(4, 6, 0).is_err());
        assert!(compression_ratio(4, 6, 5).is_err());
    }

    #[test]
    fn budget_exact_fit() {
        assert_eq!(rank_for_budget(8, 8, 64).unwrap(), 4);
    }

    #[test]
    fn budget_clamps_to_min_dim() {
        assert_eq!(rank_for_budget(8, 8, 1000).unwrap(), 8);
    }

    #[test]
    fn budget_floor() {
        assert_eq!(rank_for_budget(3, 5, 17).unwrap(), 2);
    }

    #[test]
    fn budget_infeasible() {
        assert!(matches!(rank_for_budget(3, 5, 7), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn plan_rejects_rank_above_min_dim_naming_layer() {
        let layers = vec![layer("blocks.0.attn.q", 8, 8, ModuleKind::AttentionQ, true)];
        let steps = vec![PlanStep { step_index: 1, r_attn: Some(9), r_mlp: None, token_budget: 0 }];
        let err = build_plan(&layers, &steps, 0).unwrap_err();
        assert!(err.to_string().contains("blocks.0.attn.q"), "{err}");
    }

    #[test]
    fn plan_rejects_rank_increase() {
        let layers = vec![layer("blocks.0.mlp.up", 8, 16, ModuleKind::MlpUp, true)];
        let steps = vec![
            PlanStep { step_index: 1, r_attn: None, r_mlp: Some(4), token_budget: 0 },
            PlanStep { step_index: 2, r_attn: None, r_mlp: Some(6), token_budget: 0 },
        ];
        assert!(build_plan(&layers, &steps, 0).is_err());
    }

    #[test]
    fn plan_na_step_leaves_attention_untouched() {
        let layers = vec![
            layer("blocks.0.attn.q", 8, 8, ModuleKind::AttentionQ, true),
            layer("blocks.0.mlp.up", 8, 16, ModuleKind::MlpUp, true),
        ];
        let steps = vec![PlanStep { step_index: 1, r_attn: None, r_mlp: Some(4), token_budget: 0 }];
        let plan = build_plan(&layers, &steps, 0).unwrap();
        assert_eq!(plan.predictions[0].targets, vec![("blocks.0.mlp.up".to_string(), 4)]);
        // Attention stays dense in the prediction: 64 + 4*(24) = 160.
        assert_eq!(plan.predictions[0].params_total, 64 + 96);
    }

    #[test]
    fn mqa_slots_never_targeted_and_flagged() {
        let layers = vec![
            layer("blocks.0.attn.q", 8, 8, ModuleKind::AttentionQ, true),
            layer("blocks.0.attn.k", 8, 2, ModuleKind::AttentionK, false),
            layer("blocks.0.attn.v", 8, 2, ModuleKind::AttentionV, false),
            layer("blocks.0.attn.o", 8, 8, ModuleKind::AttentionO, true),
        ];
        let steps = vec![PlanStep { step_index: 1, r_attn: Some(2), r_mlp: None, token_budget: 0 }];
        let plan = build_plan(&layers, &steps, 0).unwrap();
        for step in &plan.predictions {
            assert!(step.targets.iter().all(|(n, _)| !n.contains(".attn.k") && !n.contains(".attn.v")));
        }
        assert!(plan.notes.iter().any(|n| n.contains("multi-query")));
    }

    #[test]
    fn flops_hand_values() {
        let stats = compression_stats(
            &[SlotCost { name: "fc".into(), d_in: 4, d_out: 6, rank: None }],
            0,
        );
        assert_eq!(stats.flops_dense_per_token, 48);
        let stats = compression_stats(
            &[SlotCost { name: "fc".into(), d_in: 4, d_out: 6, rank: Some(2) }],
            0,
        );
        assert_eq!(stats.flops_factored_per_token, 40);
    }

    #[test]
    fn flops_smaller_iff_cr_above_one() {
        for rank in 1..=4usize {
            let stats = compression_stats(
                &[SlotCost { name: "fc".into(), d_in: 4, d_out: 6, rank: Some(rank) }],
                0,
            );
            let cr = compression_ratio(4, 6, rank).unwrap();
            assert_eq!(cr > 1.0, stats.flops_factored_per_token < stats.flops_dense_per_token);
        }
    }
}
