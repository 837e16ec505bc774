//! Exact arithmetic on finite discrete distributions.
//!
//! Everything here is in nats. Zero-mass entries follow the `0 · ln 0 = 0`
//! convention, so entropy and KL sums simply skip them.

use thiserror::Error;

/// Entries produced by softmax-like maps that fall below this are treated as zero.
pub const PROB_FLOOR: f64 = 1e-12;

/// Target accuracy on `KL(q‖m)` for [`solve_tilt_for_radius`].
pub const TILT_KL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("empty distribution")]
    Empty,
    #[error("entry {index} is {value}, expected a finite non-negative number")]
    InvalidEntry { index: usize, value: f64 },
    #[error("entries sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("absolute continuity violated at index {index}: p = {p}, q = 0")]
    AbsoluteContinuityViolation { index: usize, p: f64 },
    #[error("invalid trust-region radius {0}")]
    InvalidRadius(f64),
    #[error("invalid tilt parameter {0}")]
    InvalidEta(f64),
}

/// A finite distribution over token ids `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
}

impl ProbabilityVector {
    /// Validates `probs` (non-negative, finite, summing to 1 within 1e-9) and
    /// renormalizes so the stored sum is 1 to machine precision.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        let sum = checked_sum(&probs)?;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self::normalized(probs, sum))
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, DistError> {
        let sum = checked_sum(&weights)?;
        if sum <= 0.0 {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self::normalized(weights, sum))
    }

    /// Softmax of `logits`; entries below [`PROB_FLOOR`] are zeroed and the
    /// remainder renormalized.
    pub fn from_logits(logits: &[f64]) -> Result<Self, DistError> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        if let Some((index, &value)) = logits.iter().enumerate().find(|(_, x)| x.is_nan()) {
            return Err(DistError::InvalidEntry { index, value });
        }
        let lse = log_sum_exp(logits);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
        for p in probs.iter_mut() {
            if *p < PROB_FLOOR {
                *p = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        Ok(Self::normalized(probs, sum))
    }

    pub fn uniform(n: usize) -> Result<Self, DistError> {
        if n == 0 {
            return Err(DistError::Empty);
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn point_mass(n: usize, index: usize) -> Result<Self, DistError> {
        if index >= n {
            return Err(DistError::LengthMismatch(index, n));
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    fn normalized(mut probs: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            for p in probs.iter_mut() {
                *p /= sum;
            }
        }
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Indices with positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
    }

    /// `ln p_i`, or `-inf` for zero-mass entries.
    pub fn ln(&self, i: usize) -> f64 {
        self.probs[i].ln()
    }

    /// Expectation of `values` under this distribution (zero-mass entries skipped).
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.probs
            .iter()
            .zip(values)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Variance of `values` under this distribution.
    pub fn variance(&self, values: &[f64]) -> f64 {
        let mean = self.expect(values);
        self.probs
            .iter()
            .zip(values)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, v)| p * (v - mean) * (v - mean))
            .sum()
    }

    /// `λ·self + (1−λ)·other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self, DistError> {
        if self.len() != other.len() {
            return Err(DistError::LengthMismatch(self.len(), other.len()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Self::from_weights(probs)
    }

    /// Lowest-index argmax.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Per-symbol scores aligned with a [`ProbabilityVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `ψ − E_m[ψ]`.
    pub fn centered(&self, m: &ProbabilityVector) -> Self {
        let mean = m.expect(&self.scores);
        Self::new(self.scores.iter().map(|s| s - mean).collect())
    }
}

fn checked_sum(values: &[f64]) -> Result<f64, DistError> {
    if values.is_empty() {
        return Err(DistError::Empty);
    }
    let mut sum = 0.0;
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DistError::InvalidEntry { index, value });
        }
        sum += value;
    }
    Ok(sum)
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    let h: f64 = p
        .probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// `KL(p‖q) = Σ p_i ln(p_i/q_i)`.
pub fn kl(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64, DistError> {
    if p.len() != q.len() {
        return Err(DistError::LengthMismatch(p.len(), q.len()));
    }
    let mut acc = 0.0;
    for (index, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(DistError::AbsoluteContinuityViolation { index, p: pi });
        }
        acc += pi * (pi.ln() - qi.ln());
    }
    Ok(acc.max(0.0))
}

/// KL between two distributions given as log-probability rows (e.g. two
/// log-softmax outputs). Both rows are strictly positive by construction.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    debug_assert_eq!(log_p.len(), log_q.len());
    let acc: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum();
    acc.max(0.0)
}

/// Entropy of a distribution given as a log-probability row.
pub fn entropy_from_log_probs(log_p: &[f64]) -> f64 {
    let h: f64 = log_p
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                -p * lp
            }
        })
        .sum();
    h.max(0.0)
}

/// Branching-room weight `(e^h − 2)_+`.
pub fn branching_room_weight(h: f64) -> f64 {
    (h.exp() - 2.0).max(0.0)
}

/// `q_η(y) ∝ m(y)·exp(η·ψ(y))`, computed in the log domain with a max shift.
pub fn exp_tilt(
    m: &ProbabilityVector,
    psi: &ScoreVector,
    eta: f64,
) -> Result<ProbabilityVector, DistError> {
    if m.len() != psi.len() {
        return Err(DistError::LengthMismatch(m.len(), psi.len()));
    }
    if !(eta >= 0.0) || eta.is_infinite() {
        return Err(DistError::InvalidEta(eta));
    }
    if eta == 0.0 {
        return Ok(m.clone());
    }
    let centered = psi.centered(m);
    let log_w: Vec<f64> = m
        .probs
        .iter()
        .zip(centered.scores())
        .map(|(&mi, &s)| {
            if mi > 0.0 {
                mi.ln() + eta * s
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let lse = log_sum_exp(&log_w);
    let probs = log_w.iter().map(|&lw| (lw - lse).exp()).collect();
    ProbabilityVector::from_weights(probs)
}

/// Cumulant function of the centered score and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPartition {
    /// `Λ(η) = ln Σ m(y) exp(η ψ̃(y))`
    pub value: f64,
    /// `Λ'(η) = E_{q_η}[ψ̃]`
    pub first: f64,
    /// `Λ''(η) = Var_{q_η}[ψ̃]`
    pub second: f64,
}

pub fn log_partition(
    m: &ProbabilityVector,
    psi: &ScoreVector,
    eta: f64,
) -> Result<LogPartition, DistError> {
    let centered = psi.centered(m);
    let log_w: Vec<f64> = m
        .probs
        .iter()
        .zip(centered.scores())
        .map(|(&mi, &s)| {
            if mi > 0.0 {
                mi.ln() + eta * s
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let value = log_sum_exp(&log_w);
    let q = exp_tilt(m, psi, eta)?;
    let first = q.expect(centered.scores());
    let second = q.variance(centered.scores());
    Ok(LogPartition {
        value,
        first,
        second,
    })
}

/// First-order gain `Σ (q − m)·ψ`.
pub fn first_order_gain(q: &ProbabilityVector, m: &ProbabilityVector, psi: &ScoreVector) -> f64 {
    q.expect(psi.scores()) - m.expect(psi.scores())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiltStatus {
    /// The KL constraint is active at a finite η.
    Interior,
    /// The radius exceeds the KL of the argmax-restricted limit; `eta` is infinite.
    Saturated,
    /// ψ is constant on m's support; the base distribution is returned.
    DegenerateScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub q: ProbabilityVector,
    pub eta: f64,
    pub kl: f64,
    pub status: TiltStatus,
}

/// KL(q_η‖m) for the tilted family, evaluated as `Σ q (η ψ̃ − Λ)`.
fn tilt_kl(m: &ProbabilityVector, centered: &[f64], eta: f64) -> (f64, Vec<f64>) {
    let log_w: Vec<f64> = m
        .probs
        .iter()
        .zip(centered)
        .map(|(&mi, &s)| {
            if mi > 0.0 {
                mi.ln() + eta * s
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let lse = log_sum_exp(&log_w);
    let q: Vec<f64> = log_w.iter().map(|&lw| (lw - lse).exp()).collect();
    let log_z = lse;
    let kl: f64 = q
        .iter()
        .zip(centered)
        .zip(&m.probs)
        .filter(|((&qi, _), &mi)| qi > 0.0 && mi > 0.0)
        .map(|((&qi, &s), _)| qi * (eta * s - log_z))
        .sum();
    (kl.max(0.0), q)
}

/// Maximizes the first-order gain `Σ (q − m) ψ` subject to `KL(q‖m) ≤ ε`
/// within the exponential-tilt family, by bisection on η.
pub fn solve_tilt_for_radius(
    m: &ProbabilityVector,
    psi: &ScoreVector,
    epsilon: f64,
) -> Result<TiltSolution, DistError> {
    if m.len() != psi.len() {
        return Err(DistError::LengthMismatch(m.len(), psi.len()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(DistError::InvalidRadius(epsilon));
    }
    let support: Vec<usize> = m.support().collect();
    let max_score = support
        .iter()
        .map(|&i| psi.scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let min_score = support
        .iter()
        .map(|&i| psi.scores[i])
        .fold(f64::INFINITY, f64::min);
    if max_score == min_score {
        return Ok(TiltSolution {
            q: m.clone(),
            eta: 0.0,
            kl: 0.0,
            status: TiltStatus::DegenerateScore,
        });
    }

    let top_mass: f64 = support
        .iter()
        .filter(|&&i| psi.scores[i] == max_score)
        .map(|&i| m.probs[i])
        .sum();
    let saturation_kl = -top_mass.ln();
    if epsilon >= saturation_kl {
        let weights = (0..m.len())
            .map(|i| {
                if m.probs[i] > 0.0 && psi.scores[i] == max_score {
                    m.probs[i]
                } else {
                    0.0
                }
            })
            .collect();
        return Ok(TiltSolution {
            q: ProbabilityVector::from_weights(weights)?,
            eta: f64::INFINITY,
            kl: saturation_kl,
            status: TiltStatus::Saturated,
        });
    }

    let centered = psi.centered(m);
    let centered = centered.scores();
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while tilt_kl(m, centered, hi).0 < epsilon && grow < 2000 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
    }
    let mut best = (hi, tilt_kl(m, centered, hi));
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let (kl_mid, q_mid) = tilt_kl(m, centered, mid);
        if (kl_mid - epsilon).abs() < (best.1 .0 - epsilon).abs() {
            best = (mid, (kl_mid, q_mid));
        }
        if (kl_mid - epsilon).abs() <= TILT_KL_TOL || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if kl_mid < epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (eta, (kl, q)) = best;
    Ok(TiltSolution {
        q: ProbabilityVector::from_weights(q)?,
        eta,
        kl,
        status: TiltStatus::Interior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    /// Independent linear-domain evaluation: products instead of log sums.
    fn entropy_linear(p: &[f64]) -> f64 {
        // H = -ln Π p_i^{p_i}
        -p.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x.powf(x))
            .product::<f64>()
            .ln()
    }

    fn kl_linear(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| (a / b).powf(a))
            .product::<f64>()
            .ln()
    }

    /// Kahan-compensated summation of −p ln p.
    fn entropy_kahan(p: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut c = 0.0f64;
        for &x in p.iter().filter(|&&x| x > 0.0) {
            let y = -x * x.ln() - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        sum
    }

    #[test]
    fn entropy_examples() {
        assert!(close(entropy(&pv(&[0.5, 0.5])), std::f64::consts::LN_2, 1e-15));
        assert_eq!(entropy(&pv(&[1.0, 0.0, 0.0])), 0.0);
        let p = [0.7, 0.2, 0.1];
        // reference value from 40-digit arithmetic
        let oracle = entropy_kahan(&p);
        assert!(close(entropy(&pv(&p)), oracle, 1e-14));
        assert!(close(oracle, 0.801_818_552_543_337, 1e-12));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
        assert!(close(
            kl(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
        // 0.6 ln 1.5 + 0.4 ln(2/3) = 0.2 ln 1.5 = 0.081093021621632...
        let v = kl(&pv(&[0.6, 0.4]), &pv(&[0.4, 0.6])).unwrap();
        assert!(close(v, kl_linear(&[0.6, 0.4], &[0.4, 0.6]), 1e-14));
        assert!(close(v, 0.2 * 1.5f64.ln(), 1e-15));
    }

    #[test]
    fn kl_absolute_continuity() {
        let err = kl(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(
            err,
            DistError::AbsoluteContinuityViolation { index: 1, .. }
        ));
        // zero p mass where q is zero is fine
        assert!(kl(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0])).is_ok());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            ProbabilityVector::new(vec![0.5, -0.1, 0.6]),
            Err(DistError::InvalidEntry { index: 1, .. })
        ));
        assert!(matches!(
            ProbabilityVector::new(vec![0.5, 0.6]),
            Err(DistError::NotNormalized(_))
        ));
        assert!(matches!(
            ProbabilityVector::new(vec![]),
            Err(DistError::Empty)
        ));
    }

    #[test]
    fn from_logits_floors_tiny_mass() {
        let p = ProbabilityVector::from_logits(&[0.0, -40.0, 0.0]).unwrap();
        assert_eq!(p.get(1), 0.0);
        assert!(close(p.get(0), 0.5, 1e-15));
        let s: f64 = p.probs().iter().sum();
        assert!(close(s, 1.0, 1e-12));
    }

    #[test]
    fn branching_room_examples() {
        assert_eq!(branching_room_weight(0.0), 0.0);
        assert!(branching_room_weight(std::f64::consts::LN_2).abs() < 1e-15);
        assert!(close(branching_room_weight(3f64.ln()), 1.0, 1e-14));
    }

    #[test]
    fn tilt_examples() {
        let m = pv(&[0.2, 0.5, 0.3]);
        let psi = ScoreVector::new(vec![1.0, -2.0, 0.5]);
        assert_eq!(exp_tilt(&m, &psi, 0.0).unwrap(), m);

        let m = pv(&[0.5, 0.5]);
        let psi = ScoreVector::new(vec![1.0, 0.0]);
        let q = exp_tilt(&m, &psi, 3f64.ln()).unwrap();
        assert!(close(q.get(0), 0.75, 1e-15));
        assert!(close(q.get(1), 0.25, 1e-15));
    }

    #[test]
    fn log_partition_examples() {
        let m = pv(&[0.2, 0.5, 0.3]);
        let psi = ScoreVector::new(vec![1.0, -2.0, 0.5]);
        let lp = log_partition(&m, &psi, 0.0).unwrap();
        assert!(lp.value.abs() < 1e-15);
        assert!(lp.first.abs() < 1e-15);
        assert!(close(lp.second, m.variance(psi.scores()), 1e-15));

        let u = ProbabilityVector::uniform(4).unwrap();
        let c = ScoreVector::new(vec![0.7; 4]);
        for eta in [0.0, 0.5, 3.0, 20.0] {
            assert!(log_partition(&u, &c, eta).unwrap().second.abs() < 1e-15);
        }
    }

    #[test]
    fn solve_tilt_binary_closed_form() {
        let m = pv(&[0.5, 0.5]);
        let psi = ScoreVector::new(vec![1.0, 0.0]);
        // KL([0.75,0.25]‖[0.5,0.5]) = 0.75 ln 1.5 + 0.25 ln 0.5
        let eps = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let sol = solve_tilt_for_radius(&m, &psi, eps).unwrap();
        assert_eq!(sol.status, TiltStatus::Interior);
        assert!(close(sol.eta, 3f64.ln(), 1e-9), "eta = {}", sol.eta);
        assert!(close(sol.kl, eps, 1e-9));
    }

    #[test]
    fn solve_tilt_small_radius_limit() {
        let m = pv(&[0.1, 0.6, 0.3]);
        let psi = ScoreVector::new(vec![2.0, -1.0, 0.3]);
        let mut prev_eta = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let sol = solve_tilt_for_radius(&m, &psi, eps).unwrap();
            assert!(sol.eta < prev_eta);
            prev_eta = sol.eta;
            let dist: f64 = sol
                .q
                .probs()
                .iter()
                .zip(m.probs())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(dist < 10.0 * eps.sqrt());
        }
        assert!(prev_eta < 1e-3);
    }

    #[test]
    fn solve_tilt_degenerate_and_saturated() {
        let m = pv(&[0.25, 0.75, 0.0]);
        let psi = ScoreVector::new(vec![1.0, 1.0, 5.0]);
        let sol = solve_tilt_for_radius(&m, &psi, 0.1).unwrap();
        assert_eq!(sol.status, TiltStatus::DegenerateScore);
        assert_eq!(sol.q, m);
        assert_eq!(sol.eta, 0.0);

        let m = pv(&[0.5, 0.5]);
        let psi = ScoreVector::new(vec![1.0, 0.0]);
        let sol = solve_tilt_for_radius(&m, &psi, 1.0).unwrap();
        assert_eq!(sol.status, TiltStatus::Saturated);
        assert!(close(sol.kl, std::f64::consts::LN_2, 1e-15));
        assert_eq!(sol.q.probs(), &[1.0, 0.0]);

        assert!(solve_tilt_for_radius(&m, &psi, 0.0).is_err());
    }

    fn dist_strategy(n: usize) -> impl Strategy<Value = ProbabilityVector> {
        prop::collection::vec(1e-3f64..1.0, n)
            .prop_map(|w| ProbabilityVector::from_weights(w).unwrap())
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_self(p in dist_strategy(5), q in dist_strategy(5)) {
            prop_assert!(kl(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn kl_jointly_convex(
            p1 in dist_strategy(4), p2 in dist_strategy(4),
            q1 in dist_strategy(4), q2 in dist_strategy(4),
            lambda in 0.0f64..=1.0,
        ) {
            let lhs = kl(&p1.mix(&p2, lambda).unwrap(), &q1.mix(&q2, lambda).unwrap()).unwrap();
            let rhs = lambda * kl(&p1, &q1).unwrap() + (1.0 - lambda) * kl(&p2, &q2).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn log_and_linear_domain_agree(p in dist_strategy(6), q in dist_strategy(6)) {
            prop_assert!((entropy(&p) - entropy_linear(p.probs())).abs() < 1e-10);
            prop_assert!((kl(&p, &q).unwrap() - kl_linear(p.probs(), q.probs())).abs() < 1e-10);
        }

        #[test]
        fn tilt_kl_matches_log_partition_identity(
            m in dist_strategy(5),
            psi in prop::collection::vec(-3.0f64..3.0, 5),
            eta in 0.0f64..4.0,
        ) {
            let psi = ScoreVector::new(psi);
            let q = exp_tilt(&m, &psi, eta).unwrap();
            let lp = log_partition(&m, &psi, eta).unwrap();
            let identity = eta * lp.first - lp.value;
            prop_assert!((kl(&q, &m).unwrap() - identity).abs() < 1e-10);
        }

        #[test]
        fn log_partition_derivative_matches_finite_difference(
            m in dist_strategy(5),
            psi in prop::collection::vec(-3.0f64..3.0, 5),
            eta in 0.01f64..3.0,
        ) {
            let psi = ScoreVector::new(psi);
            let h = 1e-5;
            let up = log_partition(&m, &psi, eta + h).unwrap().value;
            let dn = log_partition(&m, &psi, eta - h).unwrap().value;
            let lp = log_partition(&m, &psi, eta).unwrap();
            prop_assert!(((up - dn) / (2.0 * h) - lp.first).abs() < 1e-6);
            let up1 = log_partition(&m, &psi, eta + h).unwrap().first;
            let dn1 = log_partition(&m, &psi, eta - h).unwrap().first;
            prop_assert!(((up1 - dn1) / (2.0 * h) - lp.second).abs() < 1e-6);
        }

        #[test]
        fn tilt_kl_monotone_in_eta(
            m in dist_strategy(5),
            psi in prop::collection::vec(-3.0f64..3.0, 5),
        ) {
            let psi = ScoreVector::new(psi);
            let mut prev = 0.0;
            for i in 0..60 {
                let eta = i as f64 * 0.25;
                let v = kl(&exp_tilt(&m, &psi, eta).unwrap(), &m).unwrap();
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
        }

        #[test]
        fn branching_room_nonnegative(h in 0.0f64..10.0) {
            let w = branching_room_weight(h);
            prop_assert!(w >= 0.0);
            if h <= std::f64::consts::LN_2 {
                prop_assert_eq!(w, 0.0);
            }
            prop_assert!(branching_room_weight(h + 0.01) >= w);
        }

        #[test]
        fn entropy_bounded_by_log_support(p in dist_strategy(7)) {
            let h = entropy(&p);
            prop_assert!(h >= 0.0 && h <= 7f64.ln() + 1e-12);
        }
    }
}
