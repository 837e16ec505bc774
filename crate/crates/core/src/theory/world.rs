//! Tiny enumerable worlds: an explicit joint table over a visual state and a
//! short token trajectory, plus every masked-history quantity derived from it.

use std::collections::BTreeSet;

use crate::dist::{kl, ProbabilityVector, ScoreVector};

use super::TheoryError;

pub const MAX_VOCAB: usize = 6;
pub const MAX_HORIZON: usize = 3;
pub const MAX_VISUAL: usize = 4;

/// Explicit joint law `p(v, y_1, …, y_T)`.
///
/// Index layout: `v * vocab^T + Σ_s y_s * vocab^(T-s)` with `s` 1-based, so the
/// trajectory is stored most-significant-token first and every suffix
/// `y_t..y_T` occupies the low digits.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    n_visual: usize,
    vocab: usize,
    horizon: usize,
    joint: Vec<f64>,
}

impl WorldModel {
    pub fn new(
        n_visual: usize,
        vocab: usize,
        horizon: usize,
        joint: Vec<f64>,
    ) -> Result<Self, TheoryError> {
        if n_visual == 0 || n_visual > MAX_VISUAL {
            return Err(TheoryError::InvalidWorld(format!(
                "visual support size {n_visual} outside 1..={MAX_VISUAL}"
            )));
        }
        if !(1..=MAX_VOCAB).contains(&vocab) {
            return Err(TheoryError::InvalidWorld(format!(
                "vocab {vocab} outside 1..={MAX_VOCAB}"
            )));
        }
        if !(1..=MAX_HORIZON).contains(&horizon) {
            return Err(TheoryError::InvalidWorld(format!(
                "horizon {horizon} outside 1..={MAX_HORIZON}"
            )));
        }
        let expected = n_visual * vocab.pow(horizon as u32);
        if joint.len() != expected {
            return Err(TheoryError::InvalidWorld(format!(
                "joint table has {} entries, expected {expected}",
                joint.len()
            )));
        }
        if joint.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(TheoryError::InvalidWorld("negative or non-finite mass".into()));
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TheoryError::InvalidWorld(format!(
                "joint sums to {total}"
            )));
        }
        Ok(Self {
            n_visual,
            vocab,
            horizon,
            joint,
        })
    }

    /// Builds the joint by the chain rule from a prior over `v` and a
    /// next-token law `next(v, prefix)`; weights need not be normalized.
    pub fn from_conditionals<F>(
        prior: &[f64],
        vocab: usize,
        horizon: usize,
        mut next: F,
    ) -> Result<Self, TheoryError>
    where
        F: FnMut(usize, &[usize]) -> Vec<f64>,
    {
        let prior = ProbabilityVector::from_weights(prior.to_vec())?;
        let n_visual = prior.len();
        let per_v = vocab.pow(horizon as u32);
        let mut joint = vec![0.0; n_visual * per_v];
        for v in 0..n_visual {
            let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), prior.get(v))];
            while let Some((prefix, mass)) = stack.pop() {
                if prefix.len() == horizon {
                    joint[v * per_v + encode(&prefix, vocab)] = mass;
                    continue;
                }
                let law = ProbabilityVector::from_weights(next(v, &prefix))?;
                if law.len() != vocab {
                    return Err(TheoryError::InvalidWorld(format!(
                        "conditional has {} entries, expected {vocab}",
                        law.len()
                    )));
                }
                for y in 0..vocab {
                    let mut p = prefix.clone();
                    p.push(y);
                    stack.push((p, mass * law.get(y)));
                }
            }
        }
        let total: f64 = joint.iter().sum();
        for x in joint.iter_mut() {
            *x /= total;
        }
        Self::new(n_visual, vocab, horizon, joint)
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prob(&self, v: usize, ys: &[usize]) -> f64 {
        self.joint[v * self.per_visual() + encode(ys, self.vocab)]
    }

    fn per_visual(&self) -> usize {
        self.vocab.pow(self.horizon as u32)
    }

    pub fn prior(&self) -> Vec<f64> {
        let per_v = self.per_visual();
        (0..self.n_visual)
            .map(|v| self.joint[v * per_v..(v + 1) * per_v].iter().sum())
            .collect()
    }

    /// `p(v, pattern)` where `None` entries are summed out; positions beyond
    /// the pattern are summed out too.
    pub fn pattern_mass(&self, v: usize, pattern: &[Option<usize>]) -> f64 {
        let per_v = self.per_visual();
        let block = &self.joint[v * per_v..(v + 1) * per_v];
        block
            .iter()
            .enumerate()
            .filter(|(idx, _)| self.matches(*idx, pattern))
            .map(|(_, p)| p)
            .sum()
    }

    fn matches(&self, idx: usize, pattern: &[Option<usize>]) -> bool {
        pattern.iter().enumerate().all(|(s, want)| match want {
            None => true,
            Some(y) => self.digit(idx, s) == *y,
        })
    }

    /// Token at 0-based position `s` of the trajectory encoded by `idx`.
    fn digit(&self, idx: usize, s: usize) -> usize {
        (idx / self.vocab.pow((self.horizon - 1 - s) as u32)) % self.vocab
    }

    /// `p(v, y_1..y_n)` with later positions summed out, by contiguous block sum.
    fn prefix_block_mass(&self, v: usize, prefix: &[usize]) -> f64 {
        let rest = self.vocab.pow((self.horizon - prefix.len()) as u32);
        let start = v * self.per_visual() + encode(prefix, self.vocab) * rest;
        self.joint[start..start + rest].iter().sum()
    }

    /// Samples `(v, y_1..y_T)` from the joint using a uniform draw `u ∈ [0,1)`.
    pub fn sample(&self, u: f64) -> (usize, Vec<usize>) {
        let per_v = self.per_visual();
        let mut acc = 0.0;
        let mut chosen = self.joint.len() - 1;
        for (i, &p) in self.joint.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let v = chosen / per_v;
        let idx = chosen % per_v;
        let ys = (0..self.horizon).map(|s| self.digit(idx, s)).collect();
        (v, ys)
    }
}

fn encode(ys: &[usize], vocab: usize) -> usize {
    ys.iter().fold(0, |acc, &y| acc * vocab + y)
}

/// The realized prefix `y_{<t}` with a set of 1-based positions masked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedHistory {
    prefix: Vec<usize>,
    masked: BTreeSet<usize>,
}

impl MaskedHistory {
    pub fn new(prefix: Vec<usize>, masked: impl IntoIterator<Item = usize>) -> Result<Self, TheoryError> {
        let masked: BTreeSet<usize> = masked.into_iter().collect();
        if let Some(&bad) = masked.iter().find(|&&s| s == 0 || s > prefix.len()) {
            return Err(TheoryError::InvalidHistory(format!(
                "masked position {bad} outside 1..={}",
                prefix.len()
            )));
        }
        Ok(Self { prefix, masked })
    }

    pub fn unmasked(prefix: Vec<usize>) -> Self {
        Self {
            prefix,
            masked: BTreeSet::new(),
        }
    }

    /// The current step `t = |prefix| + 1`.
    pub fn step(&self) -> usize {
        self.prefix.len() + 1
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    pub fn masked(&self) -> &BTreeSet<usize> {
        &self.masked
    }

    fn pattern(&self) -> Vec<Option<usize>> {
        self.prefix
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if self.masked.contains(&(i + 1)) {
                    None
                } else {
                    Some(y)
                }
            })
            .collect()
    }

    fn full_pattern(&self) -> Vec<Option<usize>> {
        self.prefix.iter().map(|&y| Some(y)).collect()
    }
}

/// An explicit distribution over suffixes `(y_t, …, y_T)`, first token most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixLaw {
    vocab: usize,
    len: usize,
    table: Vec<f64>,
}

impl SuffixLaw {
    fn new(vocab: usize, len: usize, table: Vec<f64>) -> Result<Self, TheoryError> {
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TheoryError::InvalidWorld(format!("suffix law sums to {total}")));
        }
        Ok(Self { vocab, len, table })
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Number of continuations after the first suffix token.
    fn tail_size(&self) -> usize {
        self.vocab.pow((self.len - 1) as u32)
    }

    /// Law of the first suffix token.
    pub fn first_marginal(&self) -> Vec<f64> {
        let tail = self.tail_size();
        (0..self.vocab)
            .map(|y| self.table[y * tail..(y + 1) * tail].iter().sum())
            .collect()
    }

    /// Entries `(y, rest)` for a fixed first token `y`.
    fn slice(&self, y: usize) -> &[f64] {
        let tail = self.tail_size();
        &self.table[y * tail..(y + 1) * tail]
    }

    fn as_distribution(&self) -> ProbabilityVector {
        ProbabilityVector::from_weights(self.table.clone()).expect("suffix law is a distribution")
    }
}

/// Which visual state to condition on in [`condition_masked`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualState {
    Value(usize),
    /// Mixture over the posterior `V | h̃_t`.
    Marginal,
}

/// Test-only corruption of the score map used to confirm the sweep detects it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negates the closed-form score before it is used downstream.
    FlipPsiSign,
}

/// Per-visual-state next-token interventions `q_t(· | v, h̃_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub per_visual: Vec<ProbabilityVector>,
}

/// Every masked-history quantity at one step of one world, computed once.
#[derive(Debug, Clone)]
pub struct StepAnalysis {
    pub vocab: usize,
    pub n_visual: usize,
    /// Posterior over `V` given the masked history.
    pub posterior: Vec<f64>,
    /// `p̃_{t,v}` (masked-history native suffix law); `None` where the history has zero mass.
    pub masked_suffix: Vec<Option<SuffixLaw>>,
    /// `p_{t,v}` (full-history suffix law).
    pub full_suffix: Vec<Option<SuffixLaw>>,
    /// Masked-reference suffix law `p_{M,t}`.
    pub reference: SuffixLaw,
    /// `m_{t,v}`.
    pub next_token: Vec<Option<ProbabilityVector>>,
    /// Score by the closed form (log next-token ratio plus continuation KL); drives everything downstream.
    pub psi: Vec<Option<ScoreVector>>,
    /// Score by direct enumeration of the definition.
    pub psi_direct: Vec<Option<ScoreVector>>,
}

/// Tolerance for identities evaluated along two exact routes.
pub const IDENTITY_TOL: f64 = 1e-10;

impl StepAnalysis {
    pub fn new(world: &WorldModel, mh: &MaskedHistory) -> Result<Self, TheoryError> {
        Self::with_mutation(world, mh, Mutation::None)
    }

    pub fn with_mutation(
        world: &WorldModel,
        mh: &MaskedHistory,
        mutation: Mutation,
    ) -> Result<Self, TheoryError> {
        let t = mh.step();
        if t > world.horizon {
            return Err(TheoryError::InvalidHistory(format!(
                "step {t} beyond horizon {}",
                world.horizon
            )));
        }
        if mh.prefix.iter().any(|&y| y >= world.vocab) {
            return Err(TheoryError::InvalidHistory("token outside vocabulary".into()));
        }
        let vocab = world.vocab;
        let suffix_len = world.horizon - t + 1;
        let suffix_size = vocab.pow(suffix_len as u32);
        let pattern = mh.pattern();
        let full_pattern = mh.full_pattern();

        let masses: Vec<f64> = (0..world.n_visual)
            .map(|v| world.pattern_mass(v, &pattern))
            .collect();
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(TheoryError::ZeroProbabilityHistory);
        }
        let posterior: Vec<f64> = masses.iter().map(|m| m / total).collect();

        let suffix_for = |v: usize, pat: &[Option<usize>]| -> Result<Option<SuffixLaw>, TheoryError> {
            let per_v = world.per_visual();
            let block = &world.joint[v * per_v..(v + 1) * per_v];
            let mut table = vec![0.0; suffix_size];
            let mut mass = 0.0;
            for (idx, &p) in block.iter().enumerate() {
                if p > 0.0 && world.matches(idx, pat) {
                    table[idx % suffix_size] += p;
                    mass += p;
                }
            }
            if mass <= 0.0 {
                return Ok(None);
            }
            for x in table.iter_mut() {
                *x /= mass;
            }
            Ok(Some(SuffixLaw::new(vocab, suffix_len, table)?))
        };

        let mut masked_suffix = Vec::with_capacity(world.n_visual);
        let mut full_suffix = Vec::with_capacity(world.n_visual);
        for v in 0..world.n_visual {
            masked_suffix.push(suffix_for(v, &pattern)?);
            full_suffix.push(suffix_for(v, &full_pattern)?);
        }

        let mut reference = vec![0.0; suffix_size];
        for (v, law) in masked_suffix.iter().enumerate() {
            if let Some(law) = law {
                for (r, x) in reference.iter_mut().zip(&law.table) {
                    *r += posterior[v] * x;
                }
            }
        }
        let ref_total: f64 = reference.iter().sum();
        for r in reference.iter_mut() {
            *r /= ref_total;
        }
        let reference = SuffixLaw::new(vocab, suffix_len, reference)?;

        let next_token: Vec<Option<ProbabilityVector>> = masked_suffix
            .iter()
            .map(|law| {
                law.as_ref()
                    .map(|l| ProbabilityVector::from_weights(l.first_marginal()))
                    .transpose()
            })
            .collect::<Result<_, _>>()?;

        let ref_first = reference.first_marginal();
        let mut psi = Vec::with_capacity(world.n_visual);
        let mut psi_direct = Vec::with_capacity(world.n_visual);
        for v in 0..world.n_visual {
            let (Some(law), Some(m)) = (&masked_suffix[v], &next_token[v]) else {
                psi.push(None);
                psi_direct.push(None);
                continue;
            };
            let mut closed = vec![0.0; vocab];
            let mut direct = vec![0.0; vocab];
            for y in 0..vocab {
                let my = m.get(y);
                if my <= 0.0 {
                    continue;
                }
                let joint_v = law.slice(y);
                let joint_ref = reference.slice(y);
                // direct: E_{rest ~ K(.|y)} ln p̃(y,rest)/p_M(y,rest)
                let mut acc = 0.0;
                for (&a, &b) in joint_v.iter().zip(joint_ref) {
                    if a > 0.0 {
                        acc += (a / my) * (a.ln() - b.ln());
                    }
                }
                direct[y] = acc;
                // closed: ln m/m_M + KL(K(.|y) ‖ p_M(.|y))
                let cont = ProbabilityVector::from_weights(joint_v.to_vec())?;
                let ref_cont = ProbabilityVector::from_weights(joint_ref.to_vec())?;
                closed[y] = (my.ln() - ref_first[y].ln()) + kl(&cont, &ref_cont)?;
                if mutation == Mutation::FlipPsiSign {
                    closed[y] = -closed[y];
                }
            }
            psi.push(Some(ScoreVector::new(closed)));
            psi_direct.push(Some(ScoreVector::new(direct)));
        }

        Ok(Self {
            vocab,
            n_visual: world.n_visual,
            posterior,
            masked_suffix,
            full_suffix,
            reference,
            next_token,
            psi,
            psi_direct,
        })
    }

    /// Visual states with positive posterior mass.
    pub fn active_visuals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_visual).filter(|&v| self.posterior[v] > 0.0)
    }

    pub fn m(&self, v: usize) -> &ProbabilityVector {
        self.next_token[v].as_ref().expect("active visual state")
    }

    pub fn score(&self, v: usize) -> &ScoreVector {
        self.psi[v].as_ref().expect("active visual state")
    }

    /// Largest disagreement between the closed-form and direct scores.
    pub fn psi_path_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for v in self.active_visuals() {
            let (a, b) = (self.score(v), self.psi_direct[v].as_ref().unwrap());
            for y in self.m(v).support() {
                gap = gap.max((a.scores()[y] - b.scores()[y]).abs());
            }
        }
        gap
    }

    pub fn native_intervention(&self) -> Intervention {
        Intervention {
            per_visual: (0..self.n_visual)
                .map(|v| {
                    self.next_token[v]
                        .clone()
                        .unwrap_or_else(|| ProbabilityVector::uniform(self.vocab).unwrap())
                })
                .collect(),
        }
    }

    fn check_intervention(&self, q: &Intervention) -> Result<(), TheoryError> {
        if q.per_visual.len() != self.n_visual {
            return Err(TheoryError::InvalidHistory(format!(
                "intervention has {} visual entries, expected {}",
                q.per_visual.len(),
                self.n_visual
            )));
        }
        for v in self.active_visuals() {
            let qv = &q.per_visual[v];
            if qv.len() != self.vocab {
                return Err(TheoryError::InvalidHistory("intervention length".into()));
            }
            for y in 0..self.vocab {
                if qv.get(y) > 0.0 && self.m(v).get(y) == 0.0 {
                    return Err(TheoryError::AbsoluteContinuityViolation { visual: v, token: y });
                }
            }
        }
        Ok(())
    }

    /// Intervened suffix laws `p̃^q_{t,v}` and their posterior mixture `p^q_{M,t}`.
    fn intervened(&self, q: &Intervention) -> (Vec<Option<Vec<f64>>>, Vec<f64>) {
        let size = self.reference.table.len();
        let tail = self.reference.tail_size();
        let mut laws = vec![None; self.n_visual];
        let mut mixture = vec![0.0; size];
        for v in self.active_visuals() {
            let law = self.masked_suffix[v].as_ref().unwrap();
            let m = self.m(v);
            let qv = &q.per_visual[v];
            let mut table = vec![0.0; size];
            for y in m.support() {
                let scale = qv.get(y) / m.get(y);
                for (j, x) in law.slice(y).iter().enumerate() {
                    table[y * tail + j] = scale * x;
                }
            }
            for (acc, x) in mixture.iter_mut().zip(&table) {
                *acc += self.posterior[v] * x;
            }
            laws[v] = Some(table);
        }
        (laws, mixture)
    }

    /// `I_q(V; Y_{≥t} | h̃_t)` by full enumeration of (v, suffix).
    pub fn mutual_information(&self, q: &Intervention) -> Result<f64, TheoryError> {
        self.check_intervention(q)?;
        let (laws, mixture) = self.intervened(q);
        let mixture = ProbabilityVector::from_weights(mixture)?;
        let mut mi = 0.0;
        for v in self.active_visuals() {
            let law = ProbabilityVector::from_weights(laws[v].clone().unwrap())?;
            mi += self.posterior[v] * kl(&law, &mixture)?;
        }
        Ok(mi)
    }

    /// `E_{V|h̃} E_{Y~m_V}[ψ(V, Y)]`.
    pub fn psi_expectation(&self) -> f64 {
        self.active_visuals()
            .map(|v| self.posterior[v] * self.m(v).expect(self.score(v).scores()))
            .sum()
    }

    /// `G₁(q) = E_V Σ_y (q − m) ψ`.
    pub fn first_order_gain(&self, q: &Intervention) -> f64 {
        self.active_visuals()
            .map(|v| {
                self.posterior[v]
                    * crate::dist::first_order_gain(&q.per_visual[v], self.m(v), self.score(v))
            })
            .sum()
    }

    /// `E_V KL(q_V ‖ m_V)`.
    pub fn expected_local_kl(&self, q: &Intervention) -> Result<f64, TheoryError> {
        let mut acc = 0.0;
        for v in self.active_visuals() {
            acc += self.posterior[v] * kl(&q.per_visual[v], self.m(v))?;
        }
        Ok(acc)
    }

    /// `KL(p^q_{M,t} ‖ p_{M,t})`.
    pub fn reference_shift_kl(&self, q: &Intervention) -> Result<f64, TheoryError> {
        self.check_intervention(q)?;
        let (_, mixture) = self.intervened(q);
        let mixture = ProbabilityVector::from_weights(mixture)?;
        Ok(kl(&mixture, &self.reference.as_distribution())?)
    }

    /// `KL(p_{t,v} ‖ p_{M,t})` (full-history gap).
    pub fn full_history_gap(&self, v: usize) -> Result<f64, TheoryError> {
        let full = self.full_suffix[v]
            .as_ref()
            .ok_or(TheoryError::ZeroProbabilityHistory)?;
        kl(&full.as_distribution(), &self.reference.as_distribution()).map_err(|_| {
            TheoryError::AssumptionViolated(super::Assumption::AbsoluteContinuity)
        })
    }
}

/// Next-token law given the masked history, for one visual state or mixed
/// over the posterior.
pub fn condition_masked(
    world: &WorldModel,
    mh: &MaskedHistory,
    v: VisualState,
) -> Result<ProbabilityVector, TheoryError> {
    let analysis = StepAnalysis::new(world, mh)?;
    match v {
        VisualState::Value(v) => {
            if v >= world.n_visual {
                return Err(TheoryError::InvalidHistory(format!("visual state {v}")));
            }
            analysis.next_token[v]
                .clone()
                .ok_or(TheoryError::ZeroProbabilityHistory)
        }
        VisualState::Marginal => {
            Ok(ProbabilityVector::from_weights(analysis.reference.first_marginal())?)
        }
    }
}

/// Second route for [`condition_masked`]: enumerate every completion of the
/// masked positions explicitly and renormalize.
pub fn condition_masked_enumerated(
    world: &WorldModel,
    mh: &MaskedHistory,
    v: VisualState,
) -> Result<ProbabilityVector, TheoryError> {
    let masked: Vec<usize> = mh.masked.iter().map(|s| s - 1).collect();
    let n_completions = world.vocab.pow(masked.len() as u32);
    let visuals: Vec<usize> = match v {
        VisualState::Value(v) => vec![v],
        VisualState::Marginal => (0..world.n_visual).collect(),
    };
    let mut weights = vec![0.0; world.vocab];
    let mut history_mass = 0.0;
    for &vis in &visuals {
        for c in 0..n_completions {
            let mut prefix = mh.prefix.clone();
            let mut code = c;
            for &pos in &masked {
                prefix[pos] = code % world.vocab;
                code /= world.vocab;
            }
            history_mass += world.prefix_block_mass(vis, &prefix);
            for (y, w) in weights.iter_mut().enumerate() {
                let mut ext = prefix.clone();
                ext.push(y);
                *w += world.prefix_block_mass(vis, &ext);
            }
        }
    }
    if history_mass <= 0.0 {
        return Err(TheoryError::ZeroProbabilityHistory);
    }
    Ok(ProbabilityVector::from_weights(weights)?)
}

/// Downstream score `ψ_t(v, y)`; fails if the direct and closed-form routes disagree.
pub fn psi_score(
    world: &WorldModel,
    mh: &MaskedHistory,
    v: usize,
    y: usize,
) -> Result<f64, TheoryError> {
    let analysis = StepAnalysis::new(world, mh)?;
    let m = analysis.next_token[v]
        .as_ref()
        .ok_or(TheoryError::ZeroProbabilityHistory)?;
    if m.get(y) <= 0.0 {
        return Err(TheoryError::ZeroProbabilityHistory);
    }
    let closed = analysis.score(v).scores()[y];
    let direct = analysis.psi_direct[v].as_ref().unwrap().scores()[y];
    if (closed - direct).abs() > IDENTITY_TOL {
        return Err(TheoryError::PathDisagreement {
            lhs: direct,
            rhs: closed,
        });
    }
    Ok(closed)
}

/// Conditional mutual information under one-step-then-rollback; `None` means the
/// native law, in which case the score-expectation identity is also enforced.
pub fn mi_downstream(
    world: &WorldModel,
    mh: &MaskedHistory,
    intervention: Option<&Intervention>,
) -> Result<f64, TheoryError> {
    let analysis = StepAnalysis::new(world, mh)?;
    match intervention {
        Some(q) => analysis.mutual_information(q),
        None => {
            let mi = analysis.mutual_information(&analysis.native_intervention())?;
            let via_score = analysis.psi_expectation();
            if (mi - via_score).abs() > IDENTITY_TOL {
                return Err(TheoryError::PathDisagreement {
                    lhs: mi,
                    rhs: via_score,
                });
            }
            Ok(mi)
        }
    }
}

/// `Δ_t(q) = I_q − I_native`.
pub fn delta_gain(
    world: &WorldModel,
    mh: &MaskedHistory,
    q: &Intervention,
) -> Result<f64, TheoryError> {
    let analysis = StepAnalysis::new(world, mh)?;
    analysis.delta(q)
}

impl StepAnalysis {
    pub fn delta(&self, q: &Intervention) -> Result<f64, TheoryError> {
        Ok(self.mutual_information(q)? - self.mutual_information(&self.native_intervention())?)
    }

    /// `Δ − [G₁ + E_V KL(q‖m) − KL(p^q_M ‖ p_M)]`.
    pub fn decomposition_residual(&self, q: &Intervention) -> Result<f64, TheoryError> {
        let delta = self.delta(q)?;
        let rhs = self.first_order_gain(q) + self.expected_local_kl(q)? - self.reference_shift_kl(q)?;
        Ok(delta - rhs)
    }
}

/// Residual of the exact first-order decomposition of the gain.
pub fn verify_exact_decomposition(
    world: &WorldModel,
    mh: &MaskedHistory,
    q: &Intervention,
) -> Result<f64, TheoryError> {
    StepAnalysis::new(world, mh)?.decomposition_residual(q)
}
