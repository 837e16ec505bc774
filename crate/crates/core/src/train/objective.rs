//! GRPO, RAPO_G and RAPO_D objectives with exact gradients w.r.t. parameters.
//!
//! Everything that must not be differentiated (masked-reference windows,
//! π_ref log-probs, old log-probs, ω) is computed up front by
//! [`prepare_refs`] and enters [`objective`] as constants.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::env::{RolloutGroup, TaskInstance, Trajectory};
use crate::policy::{backward, forward, ForwardOptions, PolicyParams};

use super::anchors::{grpo_advantages, AnchorPlan};
use super::config::{TrainConfig, Variant};
use super::TrainError;

/// Smoothing floor inside `√(D̄ + δ) − √δ`.
pub const SQRT_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGroup {
    pub group: RolloutGroup,
    pub plans: Vec<AnchorPlan>,
    pub degenerate: bool,
}

impl PreparedGroup {
    /// Fills advantages and anchor plans from rollout-time quantities.
    pub fn new(mut group: RolloutGroup, cfg: &TrainConfig) -> Self {
        let adv = grpo_advantages(&group.rewards);
        group.advantages = adv.values;
        let plans = group
            .trajectories
            .iter()
            .map(|t| AnchorPlan::new(&group.prompt, t, cfg.rho, cfg.window))
            .collect();
        Self {
            group,
            plans,
            degenerate: adv.degenerate,
        }
    }
}

/// Stop-gradient inputs, indexed `[group][trajectory]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Refs {
    /// Chain-masked log-probs per anchor, one row per window position.
    pub masked: Vec<Vec<Vec<Array2<f64>>>>,
    /// π_ref log-probs, one row per generated position.
    pub reference: Vec<Vec<Array2<f64>>>,
}

fn row_of(inst: &TaskInstance, j: usize) -> usize {
    inst.seq_pos(j) - 1
}

fn for_each_traj<T, F>(groups: &[PreparedGroup], f: F) -> Result<Vec<Vec<T>>, TrainError>
where
    T: Send,
    F: Fn(usize, &PreparedGroup, usize, &Trajectory) -> Result<T, TrainError> + Sync,
{
    let flat: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, pg)| (0..pg.group.trajectories.len()).map(move |i| (g, i)))
        .collect();
    let results: Vec<T> = flat
        .par_iter()
        .map(|&(g, i)| f(g, &groups[g], i, &groups[g].group.trajectories[i]))
        .collect::<Result<_, _>>()?;
    let mut out: Vec<Vec<T>> = groups.iter().map(|_| Vec::new()).collect();
    for ((g, _), r) in flat.into_iter().zip(results) {
        out[g].push(r);
    }
    Ok(out)
}

/// Masked-reference windows under `params` and reference log-probs under `reference`.
pub fn prepare_refs(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[PreparedGroup],
) -> Result<Refs, TrainError> {
    let per_traj = for_each_traj(groups, |_, pg, i, traj| {
        let inst = &pg.group.prompt;
        let seq = traj.sequence(inst);
        let plan = &pg.plans[i];
        let mut windows = Vec::with_capacity(plan.len());
        for (k, &a) in plan.anchors.iter().enumerate() {
            let lp = forward(
                params,
                &seq,
                ForwardOptions {
                    mask: Some(&plan.masks[k]),
                    embed_noise: None,
                },
            )?
            .log_probs();
            let start = row_of(inst, a);
            windows.push(lp.slice(ndarray::s![start..start + plan.windows[k], ..]).to_owned());
        }
        let lp = forward(reference, &seq, ForwardOptions::default())?.log_probs();
        let first = row_of(inst, 1);
        let reference_rows = lp.slice(ndarray::s![first..first + traj.len(), ..]).to_owned();
        Ok((windows, reference_rows))
    })?;
    let mut masked = Vec::new();
    let mut reference_out = Vec::new();
    for g in per_traj {
        let (m, r): (Vec<_>, Vec<_>) = g.into_iter().unzip();
        masked.push(m);
        reference_out.push(r);
    }
    Ok(Refs {
        masked,
        reference: reference_out,
    })
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub value: f64,
    /// `∂J/∂θ` (ascent direction).
    pub grad: PolicyParams,
    /// Clipped tokens over tokens with nonzero advantage.
    pub clip_fraction: f64,
    /// Mean window KL over every anchor in the batch at the current parameters.
    pub mean_anchor_kl: f64,
    /// Groups that entered the objective.
    pub groups_used: usize,
}

fn kl_rows(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
}

/// Adds `scale · ∂KL(p‖q)/∂z = scale · p ⊙ (log p − log q − KL)` to `out`.
fn add_kl_grad(out: &mut ndarray::ArrayViewMut1<f64>, lp: ArrayView1<f64>, lq: ArrayView1<f64>, scale: f64) {
    let kl = kl_rows(lp, lq);
    for ((o, &a), &b) in out.iter_mut().zip(lp).zip(lq) {
        *o += scale * a.exp() * (a - b - kl);
    }
}

struct TrajTerm {
    value: f64,
    grad: Vec<f64>,
    clipped: usize,
    counted: usize,
    window_kls: Vec<f64>,
}

/// Evaluates the configured variant's objective `J` and `∂J/∂θ`.
pub fn objective(
    params: &PolicyParams,
    groups: &[PreparedGroup],
    refs: &Refs,
    cfg: &TrainConfig,
) -> Result<ObjectiveOutput, TrainError> {
    let variant = cfg.variant;
    let (clip_lo, clip_hi) = cfg.clip();
    let used: Vec<bool> = groups
        .iter()
        .map(|g| variant != Variant::RapoD || !g.degenerate)
        .collect();
    let n_used = used.iter().filter(|&&u| u).count();
    if n_used == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let anchor_mode = |plan: &AnchorPlan| variant != Variant::Grpo && !plan.is_empty();
    // RAPO_D normalizes by the group's total number of selected tokens
    let group_tokens: Vec<usize> = groups
        .iter()
        .map(|pg| {
            pg.group
                .trajectories
                .iter()
                .zip(&pg.plans)
                .map(|(t, p)| if anchor_mode(p) { p.len() } else { t.len() })
                .sum()
        })
        .collect();

    let terms = for_each_traj(groups, |g_idx, pg, i, traj| {
        let inst = &pg.group.prompt;
        let plan = &pg.plans[i];
        let seq = traj.sequence(inst);
        let cache = forward(params, &seq, ForwardOptions::default())?;
        let logp = cache.log_probs();

        let masked = &refs.masked[g_idx][i];
        let mut window_kls = Vec::with_capacity(plan.len());
        for (k, &a) in plan.anchors.iter().enumerate() {
            let start = row_of(inst, a);
            let d: f64 = (0..plan.windows[k])
                .map(|o| kl_rows(logp.row(start + o), masked[k].row(o)))
                .sum::<f64>()
                / plan.windows[k] as f64;
            window_kls.push(d.max(0.0));
        }
        if !used[g_idx] {
            return Ok(TrajTerm {
                value: 0.0,
                grad: Vec::new(),
                clipped: 0,
                counted: 0,
                window_kls,
            });
        }

        let in_anchor_mode = anchor_mode(plan);
        let positions: Vec<usize> = if in_anchor_mode {
            plan.anchors.clone()
        } else {
            (1..=traj.len()).collect()
        };
        let n_groups = n_used as f64;
        let g = pg.group.trajectories.len() as f64;
        let scale = match variant {
            Variant::RapoD => 1.0 / (n_groups * group_tokens[g_idx] as f64),
            _ => 1.0 / (n_groups * g * positions.len() as f64),
        };
        let adv = pg.group.advantages[i];
        let reference = &refs.reference[g_idx][i];
        let mut dlogits = Array2::<f64>::zeros(logp.dim());
        let mut value = 0.0;
        let (mut clipped, mut counted) = (0, 0);

        for (slot, &j) in positions.iter().enumerate() {
            let r = row_of(inst, j);
            let y = traj.tokens[j - 1];
            let lp = logp.row(r);
            let ratio = (lp[y] - traj.log_probs[j - 1]).exp();
            let clipped_ratio = ratio.clamp(1.0 - clip_lo, 1.0 + clip_hi);
            let (surrogate, coef) = if adv == 0.0 {
                (0.0, 0.0)
            } else {
                counted += 1;
                let raw = ratio * adv;
                let cl = clipped_ratio * adv;
                if cl < raw {
                    clipped += 1;
                    (cl, 0.0)
                } else {
                    (raw, ratio * adv)
                }
            };
            value += scale * surrogate;
            if coef != 0.0 {
                let mut row = dlogits.row_mut(r);
                for (o, &l) in row.iter_mut().zip(lp) {
                    *o -= scale * coef * l.exp();
                }
                row[y] += scale * coef;
            }

            if variant != Variant::RapoD && cfg.beta > 0.0 {
                let lref = reference.row(j - 1);
                value -= scale * cfg.beta * kl_rows(lp, lref);
                let mut row = dlogits.row_mut(r);
                add_kl_grad(&mut row, lp, lref, -scale * cfg.beta);
            }

            if in_anchor_mode && cfg.gamma > 0.0 {
                let k = slot;
                let omega = plan.omega[k];
                let d = window_kls[k];
                let (term, dcoef) = match variant {
                    Variant::RapoD => (d, 1.0),
                    _ => (
                        (d + SQRT_DELTA).sqrt() - SQRT_DELTA.sqrt(),
                        0.5 / (d + SQRT_DELTA).sqrt(),
                    ),
                };
                value += scale * cfg.gamma * omega * term;
                let w = plan.windows[k] as f64;
                let start = row_of(inst, plan.anchors[k]);
                for o in 0..plan.windows[k] {
                    let lp_q: Array1<f64> = logp.row(start + o).to_owned();
                    let mut row = dlogits.row_mut(start + o);
                    add_kl_grad(&mut row, lp_q.view(), masked[k].row(o), scale * cfg.gamma * omega * dcoef / w);
                }
            }
        }

        let mut grad = params.zeros_like();
        backward(params, &cache, &dlogits, &mut grad)?;
        Ok(TrajTerm {
            value,
            grad: grad.data,
            clipped,
            counted,
            window_kls,
        })
    })?;

    let mut grad = params.zeros_like();
    let mut value = 0.0;
    let (mut clipped, mut counted) = (0, 0);
    let (mut kl_sum, mut kl_n) = (0.0, 0usize);
    for term in terms.iter().flatten() {
        value += term.value;
        if !term.grad.is_empty() {
            for (a, b) in grad.data.iter_mut().zip(&term.grad) {
                *a += b;
            }
        }
        clipped += term.clipped;
        counted += term.counted;
        kl_sum += term.window_kls.iter().sum::<f64>();
        kl_n += term.window_kls.len();
    }
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss(value));
    }
    Ok(ObjectiveOutput {
        value,
        grad,
        clip_fraction: if counted == 0 { 0.0 } else { clipped as f64 / counted as f64 },
        mean_anchor_kl: if kl_n == 0 { 0.0 } else { kl_sum / kl_n as f64 },
        groups_used: n_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_task_instance, rollout_group, TaskConfig};
    use crate::policy::{ModelConfig, Temperature};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, cfg: &TrainConfig) -> (PolicyParams, PolicyParams, Vec<PreparedGroup>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PolicyParams::init(ModelConfig::default(), &mut rng);
        params.data.iter_mut().for_each(|x| *x *= 4.0);
        let mut reference = params.clone();
        reference.data.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
        let task = TaskConfig::default();
        let mut groups = Vec::new();
        for p in 0..3u64 {
            let inst = make_task_instance(&mut rng, &task, p);
            let mut g = rollout_group(&params, &inst, cfg.group_size, Temperature::Value(1.0), seed, &[p]).unwrap();
            // force mixed rewards so advantages are non-degenerate
            g.rewards = (0..cfg.group_size).map(|i| ((i + p as usize) % 2) as f64).collect();
            groups.push(PreparedGroup::new(g, cfg));
        }
        (params, reference, groups)
    }

    fn fd_check(cfg: &TrainConfig, seed: u64, shift_old: bool) -> f64 {
        let (mut params, reference, groups) = setup(seed, cfg);
        let refs = prepare_refs(&params, &reference, &groups).unwrap();
        if shift_old {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            params.data.iter_mut().for_each(|x| *x += rng.random_range(-0.02..0.02));
        }
        let out = objective(&params, &groups, &refs, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let h = 1e-4;
        let floor = 1e-3 * out.grad.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut worst: f64 = 0.0;
        for _ in 0..64 {
            let i = rng.random_range(0..params.data.len());
            let mut p = params.clone();
            p.data[i] += h;
            let up = objective(&p, &groups, &refs, cfg).unwrap().value;
            p.data[i] -= 2.0 * h;
            let down = objective(&p, &groups, &refs, cfg).unwrap().value;
            let fd = (up - down) / (2.0 * h);
            let g = out.grad.data[i];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(floor));
        }
        worst
    }

    #[test]
    fn rapo_g_gradient_matches_finite_differences() {
        let cfg = TrainConfig { gamma: 0.5, beta: 0.1, ..TrainConfig::default() };
        let e = fd_check(&cfg, 1, false);
        assert!(e < 1e-4, "{e}");
        let e = fd_check(&cfg, 2, true);
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn rapo_d_and_grpo_gradients_match_finite_differences() {
        for variant in [Variant::RapoD, Variant::Grpo] {
            let cfg = TrainConfig { variant, gamma: 0.5, beta: 0.1, ..TrainConfig::default() };
            let e = fd_check(&cfg, 3, true);
            assert!(e < 1e-4, "{variant}: {e}");
        }
    }

    #[test]
    fn identity_ratio_reduces_to_mean_advantage() {
        let cfg = TrainConfig { gamma: 0.0, beta: 0.0, ..TrainConfig::default() };
        let (params, reference, groups) = setup(4, &cfg);
        let refs = prepare_refs(&params, &reference, &groups).unwrap();
        let out = objective(&params, &groups, &refs, &cfg).unwrap();
        let mut want = 0.0;
        for pg in &groups {
            for (i, plan) in pg.plans.iter().enumerate() {
                // each anchor contributes Â; averaged over anchors it stays Â
                assert!(!plan.is_empty());
                want += pg.group.advantages[i] / cfg.group_size as f64;
            }
        }
        want /= groups.len() as f64;
        assert!((out.value - want).abs() < 1e-9, "{} vs {want}", out.value);
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn full_anchor_set_matches_grpo() {
        let rapo = TrainConfig { gamma: 0.0, beta: 0.0, rho: 1.0, ..TrainConfig::default() };
        let grpo = TrainConfig { variant: Variant::Grpo, ..rapo.clone() };
        let (mut params, reference, groups) = setup(5, &rapo);
        let refs = prepare_refs(&params, &reference, &groups).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        params.data.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
        let a = objective(&params, &groups, &refs, &rapo).unwrap();
        let b = objective(&params, &groups, &refs, &grpo).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (x, y) in a.grad.data.iter().zip(&b.grad.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_tokens_have_no_ratio_gradient() {
        let cfg = TrainConfig { gamma: 0.0, beta: 0.0, rho: 1.0, clip_low: Some(1e-6), clip_high: Some(1e-6), ..TrainConfig::default() };
        let (mut params, reference, groups) = setup(6, &cfg);
        let refs = prepare_refs(&params, &reference, &groups).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        params.data.iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
        let out = objective(&params, &groups, &refs, &cfg).unwrap();
        assert!(out.clip_fraction > 0.3, "{}", out.clip_fraction);
        // with every ratio pushed off 1 the surviving gradient comes from unclipped tokens only
        let fd = {
            let i = 7;
            let h = 1e-5;
            let mut p = params.clone();
            p.data[i] += h;
            let up = objective(&p, &groups, &refs, &cfg).unwrap().value;
            p.data[i] -= 2.0 * h;
            let down = objective(&p, &groups, &refs, &cfg).unwrap().value;
            (up - down) / (2.0 * h)
        };
        assert!((fd - out.grad.data[7]).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn reference_branch_carries_no_gradient() {
        let cfg = TrainConfig { gamma: 1.0, beta: 0.0, ..TrainConfig::default() };
        let (params, reference, groups) = setup(7, &cfg);
        let refs = prepare_refs(&params, &reference, &groups).unwrap();
        let base = objective(&params, &groups, &refs, &cfg).unwrap();
        // recomputing the masked branch at perturbed θ changes the slope
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let h = 1e-4;
        let floor = 1e-3 * base.grad.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut differs = false;
        for _ in 0..16 {
            let i = rng.random_range(0..params.data.len());
            let mut p = params.clone();
            p.data[i] += h;
            let up_live = objective(&p, &groups, &prepare_refs(&p, &reference, &groups).unwrap(), &cfg).unwrap().value;
            let up_frozen = objective(&p, &groups, &refs, &cfg).unwrap().value;
            p.data[i] -= 2.0 * h;
            let down_live = objective(&p, &groups, &prepare_refs(&p, &reference, &groups).unwrap(), &cfg).unwrap().value;
            let down_frozen = objective(&p, &groups, &refs, &cfg).unwrap().value;
            let frozen = (up_frozen - down_frozen) / (2.0 * h);
            let live = (up_live - down_live) / (2.0 * h);
            let g = base.grad.data[i];
            assert!((g - frozen).abs() <= 1e-4 * g.abs().max(frozen.abs()).max(floor));
            if (live - frozen).abs() > 1e-2 * frozen.abs().max(floor) {
                differs = true;
            }
        }
        assert!(differs);
    }

    #[test]
    fn perturbed_masked_refs_change_value() {
        let cfg = TrainConfig { gamma: 1.0, ..TrainConfig::default() };
        let (params, reference, groups) = setup(8, &cfg);
        let mut refs = prepare_refs(&params, &reference, &groups).unwrap();
        let a = objective(&params, &groups, &refs, &cfg).unwrap().value;
        refs.masked[0][0][0][[0, 0]] += 0.5;
        let b = objective(&params, &groups, &refs, &cfg).unwrap().value;
        assert_ne!(a, b);
    }

    #[test]
    fn rapo_d_filters_degenerate_groups() {
        let cfg = TrainConfig { variant: Variant::RapoD, ..TrainConfig::default() };
        let (params, reference, mut groups) = setup(9, &cfg);
        for pg in groups.iter_mut() {
            pg.group.rewards = vec![1.0; cfg.group_size];
            *pg = PreparedGroup::new(pg.group.clone(), &cfg);
        }
        let refs = prepare_refs(&params, &reference, &groups).unwrap();
        assert!(matches!(objective(&params, &groups, &refs, &cfg), Err(TrainError::EmptyBatch)));
    }
}
