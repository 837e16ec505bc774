//! Regularity checks, gain lower bounds and the modular top-K selection.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::Exp1;

use crate::dist::{
    branching_room_weight, entropy, kl, solve_tilt_for_radius, ProbabilityVector,
};

use super::world::{Intervention, MaskedHistory, Mutation, StepAnalysis, WorldModel};
use super::{Assumption, TheoryError};

/// Slack allowed when comparing two sides of an inequality in floating point.
const BOUND_TOL: f64 = 1e-12;
/// Minimum score gap accepted as "separated".
const MIN_SEPARATION: f64 = 1e-9;
/// Random feasible interventions tried per instance when searching for `Δ*`.
pub const DELTA_SEARCH_CLOUD: usize = 64;
const TILT_FRACTIONS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];
const D0: f64 = 8.0 / 3.0;

/// Instance constants read off the enumerated laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionCheck {
    /// Largest absolute log-ratio between masked suffix laws and the reference,
    /// also dominating every full-history reference gap.
    pub b: f64,
    /// Smallest gap between distinct score values on a next-token support;
    /// infinite when every support is a single token.
    pub gamma: f64,
}

impl AssumptionCheck {
    /// `C_B = 2M·max(d₀+1, d₀)` with `M = 2B`, `d₀ = 8/3`.
    pub fn c_b(&self) -> f64 {
        2.0 * (2.0 * self.b) * (D0 + 1.0).max(D0)
    }
}

pub fn check_assumptions(a: &StepAnalysis) -> Result<AssumptionCheck, TheoryError> {
    let reference = a.reference.table();
    let mut b: f64 = 0.0;
    let mut gamma = f64::INFINITY;
    for v in a.active_visuals() {
        let law = a.masked_suffix[v].as_ref().unwrap();
        for (&p, &r) in law.table().iter().zip(reference) {
            if p > 0.0 {
                b = b.max((p.ln() - r.ln()).abs());
            }
        }
        if a.full_suffix[v].is_none() {
            return Err(TheoryError::AssumptionViolated(Assumption::AbsoluteContinuity));
        }
        b = b.max(a.full_history_gap(v)?);

        let m = a.m(v);
        let mut scores: Vec<f64> = m.support().map(|y| a.score(v).scores()[y]).collect();
        scores.sort_by(f64::total_cmp);
        for w in scores.windows(2) {
            gamma = gamma.min(w[1] - w[0]);
        }
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(TheoryError::AssumptionViolated(Assumption::BoundedRatio));
    }
    if gamma < MIN_SEPARATION {
        return Err(TheoryError::AssumptionViolated(Assumption::GenericNonCoincidence));
    }
    Ok(AssumptionCheck { b, gamma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub id: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub fn margin(&self) -> f64 {
        self.lhs - self.rhs
    }

    pub fn satisfied(&self) -> bool {
        self.margin() >= -BOUND_TOL
    }
}

#[derive(Debug, Clone)]
pub struct GainBoundReport {
    pub epsilon: f64,
    pub constants: AssumptionCheck,
    /// Best gain found by the tilt-family plus random-cloud search.
    pub delta_star: f64,
    /// Per-visual optimal tilts at radius ε.
    pub tilt: Intervention,
    /// Positive part of the local gain bound's right-hand side.
    pub local_score: f64,
    pub checks: Vec<BoundCheck>,
}

/// `E_V[(e^{H(m_V)} − 2)_+ · √KL(p_{t,V} ‖ p_M)]`.
fn entropy_gap_term(a: &StepAnalysis) -> Result<f64, TheoryError> {
    let mut acc = 0.0;
    for v in a.active_visuals() {
        let w = branching_room_weight(entropy(a.m(v)));
        if w > 0.0 {
            acc += a.posterior[v] * w * a.full_history_gap(v)?.sqrt();
        }
    }
    Ok(acc)
}

fn scaled_gap(gamma: f64, coeff: f64, term: f64) -> f64 {
    if term == 0.0 {
        0.0
    } else {
        gamma * coeff * term
    }
}

fn tilt_intervention(a: &StepAnalysis, epsilon: f64) -> Result<Intervention, TheoryError> {
    let mut native = a.native_intervention();
    for v in a.active_visuals() {
        native.per_visual[v] = solve_tilt_for_radius(a.m(v), a.score(v), epsilon)?.q;
    }
    Ok(native)
}

/// Random `q` with `KL(q‖m) ≤ ε`: a Dirichlet(1) direction on the support of
/// `m`, shrunk toward `m` until feasible.
fn random_feasible<R: Rng + ?Sized>(
    m: &ProbabilityVector,
    epsilon: f64,
    rng: &mut R,
) -> Result<ProbabilityVector, TheoryError> {
    let mut target = vec![0.0; m.len()];
    for y in m.support() {
        target[y] = rng.sample::<f64, _>(Exp1);
    }
    let target = ProbabilityVector::from_weights(target)?;
    let mut lambda: f64 = rng.random_range(0.0..1.0);
    for _ in 0..64 {
        let q = m.mix(&target, lambda)?;
        if kl(&q, m)? <= epsilon {
            return Ok(q);
        }
        lambda *= 0.5;
    }
    Ok(m.clone())
}

/// Estimate of `Δ*_t(ε)`: the best of the native law, tilts at several radii up
/// to ε, and a cloud of random feasible interventions.
pub(crate) fn delta_star_search<R: Rng + ?Sized>(
    a: &StepAnalysis,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64, TheoryError> {
    let mut best: f64 = 0.0;
    for frac in TILT_FRACTIONS {
        best = best.max(a.delta(&tilt_intervention(a, frac * epsilon)?)?);
    }
    for _ in 0..DELTA_SEARCH_CLOUD {
        let mut q = a.native_intervention();
        for v in a.active_visuals() {
            q.per_visual[v] = random_feasible(a.m(v), epsilon, rng)?;
        }
        best = best.max(a.delta(&q)?);
    }
    Ok(best)
}

/// Evaluates the first-order gain bound, the entropy–reference-gap bound and
/// the local gain bound at radius ε. Fails with `AssumptionViolated` when the
/// instance is not admissible.
pub fn verify_gain_bounds<R: Rng + ?Sized>(
    a: &StepAnalysis,
    epsilon: f64,
    rng: &mut R,
) -> Result<GainBoundReport, TheoryError> {
    let constants = check_assumptions(a)?;
    let AssumptionCheck { b, gamma } = constants;
    let c_b = constants.c_b();

    let tilt = tilt_intervention(a, epsilon)?;
    let g1_star = a.first_order_gain(&tilt);
    let sigma_bar: f64 = a
        .active_visuals()
        .map(|v| a.posterior[v] * a.m(v).variance(a.score(v).scores()).sqrt())
        .sum();
    let gap = entropy_gap_term(a)?;
    let delta_star = delta_star_search(a, epsilon, rng)?;

    let first_order = BoundCheck {
        id: "tilt_variance_bound",
        lhs: g1_star,
        rhs: (2.0 * epsilon).sqrt() * sigma_bar - c_b * epsilon,
    };
    let spread = BoundCheck {
        id: "entropy_reference_gap_bound",
        lhs: sigma_bar,
        rhs: scaled_gap(gamma, 1.0 / (2.0 * PI * E * b).sqrt(), gap),
    };
    let local_rhs = scaled_gap(gamma, epsilon.sqrt() / (PI * E * b).sqrt(), gap) - c_b * epsilon;
    let local = BoundCheck {
        id: "local_gain_bound",
        lhs: delta_star,
        rhs: local_rhs,
    };
    Ok(GainBoundReport {
        epsilon,
        constants,
        delta_star,
        tilt,
        local_score: local_rhs.max(0.0),
        checks: vec![first_order, spread, local],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetBoundReport {
    /// Sum over the set of the best per-step gains found.
    pub gain_sum: f64,
    /// Sum over the set of the clamped local scores.
    pub score_sum: f64,
}

/// Per-set lower bound: every step of `set` (1-based positions) is analyzed
/// under the history that masks the earlier members of `set`.
pub fn verify_set_lower_bound<R: Rng + ?Sized>(
    world: &WorldModel,
    trajectory: &[usize],
    set: &[usize],
    epsilon: f64,
    mutation: Mutation,
    rng: &mut R,
) -> Result<SetBoundReport, TheoryError> {
    let mut gain_sum = 0.0;
    let mut score_sum = 0.0;
    for &t in set {
        if t == 0 || t > trajectory.len() {
            return Err(TheoryError::InvalidHistory(format!("set position {t}")));
        }
        let masked: Vec<usize> = set.iter().copied().filter(|&s| s < t).collect();
        let mh = MaskedHistory::new(trajectory[..t - 1].to_vec(), masked)?;
        let a = StepAnalysis::with_mutation(world, &mh, mutation)?;
        let report = verify_gain_bounds(&a, epsilon, rng)?;
        gain_sum += report.delta_star;
        score_sum += report.local_score;
    }
    Ok(SetBoundReport {
        gain_sum,
        score_sum,
    })
}

/// Indices of the `k` largest scores (earlier index wins ties), ascending.
///
/// For up to 12 scores the selected value is cross-checked against an
/// exhaustive search over all subsets of size at most `k`.
pub fn topk_modular_check(scores: &[f64], k: usize) -> Result<Vec<usize>, TheoryError> {
    if k > scores.len() {
        return Err(TheoryError::InvalidBudget {
            k,
            len: scores.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(TheoryError::InvalidScore(bad));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();

    if scores.len() <= 12 {
        let value: f64 = chosen.iter().map(|&i| scores[i]).sum();
        let best = exhaustive_best(scores, k);
        if (value - best).abs() > 1e-12 * (1.0 + best.abs()) {
            return Err(TheoryError::PathDisagreement {
                lhs: value,
                rhs: best,
            });
        }
    }
    Ok(chosen)
}

pub(crate) fn exhaustive_best(scores: &[f64], k: usize) -> f64 {
    let n = scores.len();
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize <= k)
        .map(|mask| {
            (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| scores[i])
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}
