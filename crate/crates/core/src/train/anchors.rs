//! Anchor selection, chain masks, window KL and group advantages.

use std::collections::BTreeSet;

use crate::dist::{branching_room_weight, kl_from_log_probs};
use crate::env::{TaskInstance, Trajectory};
use crate::policy::{forward, AttentionMaskSpec, ForwardOptions, PolicyError, PolicyParams};

/// `⌊ρT⌋` positions (1-based) of highest entropy, earlier index on ties, ascending.
pub fn select_anchors(entropies: &[f64], rho: f64) -> Vec<usize> {
    let t = entropies.len();
    let k = ((rho * t as f64 + 1e-9).floor() as usize).min(t);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| entropies[j].total_cmp(&entropies[i]).then(i.cmp(&j)));
    let mut out: Vec<usize> = order[..k].iter().map(|i| i + 1).collect();
    out.sort_unstable();
    out
}

/// Effective window `w' = min(w, seq_len − t)` for a 0-based sequence position `t`.
pub fn window_len(t: usize, seq_len: usize, w: usize) -> usize {
    w.min(seq_len.saturating_sub(t))
}

/// Mask for the `k`-th anchor (1-based), positions in the sequence frame: the
/// window queries `t_k .. t_k + w' − 1` may not see vision positions or
/// earlier anchors.
pub fn build_chain_mask(
    anchors: &[usize],
    k: usize,
    vision: &[usize],
    seq_len: usize,
    w: usize,
) -> AttentionMaskSpec {
    assert!(k >= 1 && k <= anchors.len(), "anchor index {k} out of range");
    let t_k = anchors[k - 1];
    let keys: BTreeSet<usize> = vision.iter().chain(&anchors[..k - 1]).copied().collect();
    let queries = t_k..t_k + window_len(t_k, seq_len, w);
    AttentionMaskSpec::from_pairs(queries.flat_map(|q| keys.iter().map(move |&key| (q, key))))
}

/// Per-trajectory anchors with their masks, windows and frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPlan {
    /// 1-based generated positions.
    pub anchors: Vec<usize>,
    pub masks: Vec<AttentionMaskSpec>,
    /// `w'` per anchor.
    pub windows: Vec<usize>,
    /// `ω = (e^{c_t} − 2)_+` from rollout-time entropies.
    pub omega: Vec<f64>,
}

impl AnchorPlan {
    pub fn new(inst: &TaskInstance, traj: &Trajectory, rho: f64, w: usize) -> Self {
        let anchors = select_anchors(&traj.entropies, rho);
        let seq_len = inst.prefix_len() + traj.len();
        let seq_anchors: Vec<usize> = anchors.iter().map(|&j| inst.seq_pos(j)).collect();
        let vision: Vec<usize> = inst.vision_positions().collect();
        let masks = (1..=anchors.len())
            .map(|k| build_chain_mask(&seq_anchors, k, &vision, seq_len, w))
            .collect();
        let windows = seq_anchors.iter().map(|&t| window_len(t, seq_len, w)).collect();
        let omega = anchors
            .iter()
            .map(|&j| branching_room_weight(traj.entropies[j - 1]))
            .collect();
        Self {
            anchors,
            masks,
            windows,
            omega,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `D̄ = (1/w') Σ KL(π_θ(·|v,h) ‖ π_θ^mask(·|h))` over anchor `k`'s window (0-based `k`).
pub fn window_kl(
    params: &PolicyParams,
    inst: &TaskInstance,
    traj: &Trajectory,
    plan: &AnchorPlan,
    k: usize,
) -> Result<f64, PolicyError> {
    let seq = traj.sequence(inst);
    let full = forward(params, &seq, ForwardOptions::default())?.log_probs();
    let masked = forward(
        params,
        &seq,
        ForwardOptions {
            mask: Some(&plan.masks[k]),
            embed_noise: None,
        },
    )?
    .log_probs();
    let start = inst.seq_pos(plan.anchors[k]);
    let w = plan.windows[k];
    let total: f64 = (start..start + w)
        .map(|q| {
            kl_from_log_probs(
                full.row(q - 1).as_slice().unwrap(),
                masked.row(q - 1).as_slice().unwrap(),
            )
        })
        .sum();
    Ok((total / w as f64).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// All rewards equal: advantages are zero.
    pub degenerate: bool,
}

/// `(R_i − mean) / std` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Advantages {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 {
        return Advantages {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        };
    }
    Advantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    }
}
