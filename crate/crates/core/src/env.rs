//! The visual-needle task: a short "image" of vision tokens hides one needle
//! symbol; after a prompt of distractors and a question marker the policy
//! writes a fixed-length chain and then must name the needle's answer token.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::dist::{entropy, ProbabilityVector};
use crate::policy::{forward, sample_token, ForwardOptions, PolicyError, PolicyParams, Temperature};
use crate::rng::substream;

/// Token layout and difficulty of the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskConfig {
    pub n_vision: usize,
    pub n_needles: usize,
    pub n_background: usize,
    pub n_distractor_symbols: usize,
    pub n_distractors: usize,
    pub chain_len: usize,
    /// Needle symbol `i` maps to answer token `answer_base + answer_perm[i]`.
    pub answer_perm: Vec<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_vision: 4,
            n_needles: 4,
            n_background: 4,
            n_distractor_symbols: 16,
            n_distractors: 4,
            chain_len: 9,
            answer_perm: vec![2, 0, 3, 1],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("group size {0} must be at least 2")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TaskConfig {
    pub fn needle_base(&self) -> usize {
        0
    }
    pub fn background_base(&self) -> usize {
        self.n_needles
    }
    pub fn answer_base(&self) -> usize {
        self.background_base() + self.n_background
    }
    pub fn distractor_base(&self) -> usize {
        self.answer_base() + self.n_needles
    }
    pub fn question_marker(&self) -> usize {
        self.distractor_base() + self.n_distractor_symbols
    }
    /// Smallest vocabulary that holds every token class.
    pub fn vocab_needed(&self) -> usize {
        self.question_marker() + 1
    }
    /// Tokens that may appear in the vision prefix.
    pub fn vision_tokens(&self) -> std::ops::Range<usize> {
        0..self.answer_base()
    }
    pub fn answer_tokens(&self) -> std::ops::Range<usize> {
        self.answer_base()..self.answer_base() + self.n_needles
    }
    pub fn prefix_len(&self) -> usize {
        self.n_vision + self.n_distractors + 1
    }
    /// Generated tokens per trajectory: the chain plus the answer.
    pub fn gen_len(&self) -> usize {
        self.chain_len + 1
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.into()));
        if self.n_vision == 0 || self.n_needles == 0 || self.n_background == 0 {
            return bad("vision, needle and background sizes must be positive");
        }
        if self.n_distractors > 0 && self.n_distractor_symbols == 0 {
            return bad("distractors need a nonempty symbol set");
        }
        let mut perm = self.answer_perm.clone();
        perm.sort_unstable();
        if perm != (0..self.n_needles).collect::<Vec<_>>() {
            return bad("answer_perm must be a permutation of the needle symbols");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskInstance {
    pub id: u64,
    pub vision: Vec<usize>,
    /// Distractors followed by the question marker.
    pub prompt: Vec<usize>,
    pub gold: usize,
    pub chain_len: usize,
}

impl TaskInstance {
    pub fn prefix(&self) -> Vec<usize> {
        let mut p = self.vision.clone();
        p.extend_from_slice(&self.prompt);
        p
    }

    pub fn prefix_len(&self) -> usize {
        self.vision.len() + self.prompt.len()
    }

    pub fn vision_positions(&self) -> std::ops::Range<usize> {
        0..self.vision.len()
    }

    pub fn gen_len(&self) -> usize {
        self.chain_len + 1
    }

    /// Sequence position of generated token `j` (1-based).
    pub fn seq_pos(&self, j: usize) -> usize {
        self.prefix_len() + j - 1
    }
}

/// Draws an instance; the needle slot, needle symbol, background and
/// distractors all come from `rng`.
pub fn make_task_instance<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskConfig, id: u64) -> TaskInstance {
    let mut vision: Vec<usize> = (0..cfg.n_vision)
        .map(|_| cfg.background_base() + rng.random_range(0..cfg.n_background))
        .collect();
    let needle = rng.random_range(0..cfg.n_needles);
    let slot = rng.random_range(0..cfg.n_vision);
    vision[slot] = cfg.needle_base() + needle;
    let mut prompt: Vec<usize> = (0..cfg.n_distractors)
        .map(|_| cfg.distractor_base() + rng.random_range(0..cfg.n_distractor_symbols))
        .collect();
    prompt.push(cfg.question_marker());
    TaskInstance {
        id,
        vision,
        prompt,
        gold: gold_answer(cfg, &prompt_free_vision(cfg, slot, needle)),
        chain_len: cfg.chain_len,
    }
}

fn prompt_free_vision(cfg: &TaskConfig, slot: usize, needle: usize) -> Vec<usize> {
    let mut v = vec![cfg.background_base(); cfg.n_vision];
    v[slot] = needle;
    v
}

/// The answer token implied by a vision prefix (first needle symbol found).
pub fn gold_answer(cfg: &TaskConfig, vision: &[usize]) -> usize {
    let needle = vision
        .iter()
        .copied()
        .find(|&t| t < cfg.n_needles)
        .expect("vision prefix contains a needle");
    cfg.answer_base() + cfg.answer_perm[needle]
}

/// Shuffles the distractors (not the marker); the gold answer is unaffected.
pub fn shuffle_distractors<R: Rng + ?Sized>(inst: &TaskInstance, rng: &mut R) -> TaskInstance {
    let mut out = inst.clone();
    let n = out.prompt.len() - 1;
    out.prompt[..n].shuffle(rng);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Generated tokens `y_1..y_T` (shorter when truncated).
    pub tokens: Vec<usize>,
    /// Sampling distributions `P_t`.
    pub dists: Vec<ProbabilityVector>,
    /// `c_t = H(P_t)` in nats.
    pub entropies: Vec<f64>,
    /// `log P_t(y_t)` under the sampling policy.
    pub log_probs: Vec<f64>,
    pub reward: f64,
    pub truncated: bool,
    /// Masked-reference distributions, filled by the trainer when requested.
    pub masked_reference: Option<Vec<ProbabilityVector>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prefix plus generated tokens.
    pub fn sequence(&self, inst: &TaskInstance) -> Vec<usize> {
        let mut s = inst.prefix();
        s.extend_from_slice(&self.tokens);
        s
    }
}

/// 1 iff the answer slot holds the gold token; truncation scores 0.
pub fn reward(inst: &TaskInstance, tokens: &[usize]) -> f64 {
    match tokens.get(inst.chain_len) {
        Some(&t) if t == inst.gold => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: TaskInstance,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    /// Filled by the trainer.
    pub advantages: Vec<f64>,
}

/// Samples one trajectory of at most `max_new` tokens.
pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    inst: &TaskInstance,
    max_new: usize,
    temperature: Temperature,
    rng: &mut R,
) -> Result<Trajectory, EnvError> {
    let mut seq = inst.prefix();
    let n = inst.gen_len().min(max_new);
    let mut traj = Trajectory {
        tokens: Vec::with_capacity(n),
        dists: Vec::with_capacity(n),
        entropies: Vec::with_capacity(n),
        log_probs: Vec::with_capacity(n),
        reward: 0.0,
        truncated: n < inst.gen_len(),
        masked_reference: None,
    };
    for _ in 0..n {
        let cache = forward(params, &seq, ForwardOptions::default())?;
        let logp = cache.log_probs_at(seq.len());
        let dist = ProbabilityVector::from_logits(logp.as_slice().unwrap())
            .expect("finite logits give a distribution");
        let y = sample_token(&dist, rng, temperature);
        traj.entropies.push(entropy(&dist));
        traj.log_probs.push(logp[y]);
        traj.dists.push(dist);
        traj.tokens.push(y);
        seq.push(y);
    }
    traj.reward = if traj.truncated { 0.0 } else { reward(inst, &traj.tokens) };
    Ok(traj)
}

/// `G` trajectories; trajectory `i` draws from the substream keyed by
/// `(seed, "rollout", keys ++ [i])`, so execution order never matters.
pub fn rollout_group(
    params: &PolicyParams,
    inst: &TaskInstance,
    g: usize,
    temperature: Temperature,
    seed: u64,
    keys: &[u64],
) -> Result<RolloutGroup, EnvError> {
    if g < 2 {
        return Err(EnvError::GroupTooSmall(g));
    }
    let trajectories = (0..g)
        .map(|i| {
            let mut ids = keys.to_vec();
            ids.push(i as u64);
            let mut rng = substream(seed, "rollout", &ids);
            generate(params, inst, usize::MAX, temperature, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rewards = trajectories.iter().map(|t| t.reward).collect();
    Ok(RolloutGroup {
        prompt: inst.clone(),
        trajectories,
        rewards,
        advantages: vec![0.0; g],
    })
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    instance_id: u64,
    group_index: usize,
    tokens: &'a [usize],
    reward: f64,
    entropies: &'a [f64],
}

/// One JSON line per trajectory.
pub fn dump_trajectories<W: Write>(groups: &[RolloutGroup], mut out: W) -> Result<(), EnvError> {
    for g in groups {
        for (i, t) in g.trajectories.iter().enumerate() {
            let rec = DumpRecord {
                instance_id: g.prompt.id,
                group_index: i,
                tokens: &t.tokens,
                reward: t.reward,
                entropies: &t.entropies,
            };
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> PolicyParams {
        PolicyParams::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Ignores its input and answers uniformly from the answer alphabet.
    fn uniform_answerer(cfg: &TaskConfig) -> PolicyParams {
        let mut p = PolicyParams::zeros(ModelConfig::default());
        let n = p.num_params();
        let vocab = p.config().vocab;
        for t in cfg.answer_tokens() {
            p.data[n - vocab + t] = 30.0;
        }
        p
    }

    #[test]
    fn layout_fits_default_vocab() {
        let cfg = TaskConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.vocab_needed(), 29);
        assert_eq!(cfg.prefix_len() + cfg.gen_len(), 19);
        let mut bad = cfg.clone();
        bad.answer_perm = vec![0, 0, 1, 2];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn instances_are_deterministic_and_well_formed() {
        let cfg = TaskConfig::default();
        let a = make_task_instance(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 0);
        let b = make_task_instance(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 0);
        assert_eq!(a, b);
        assert_eq!(a.vision.iter().filter(|&&t| t < cfg.n_needles).count(), 1);
        assert_eq!(a.gold, gold_answer(&cfg, &a.vision));
        assert_eq!(*a.prompt.last().unwrap(), cfg.question_marker());
    }

    #[test]
    fn zero_chain_demands_answer_immediately() {
        let cfg = TaskConfig {
            chain_len: 0,
            ..TaskConfig::default()
        };
        let inst = make_task_instance(&mut ChaCha8Rng::seed_from_u64(0), &cfg, 0);
        assert_eq!(inst.gen_len(), 1);
        assert_eq!(reward(&inst, &[inst.gold]), 1.0);
    }

    #[test]
    fn answer_marginal_is_uniform() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for i in 0..1000 {
            let inst = make_task_instance(&mut rng, &cfg, i);
            counts[inst.gold - cfg.answer_base()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.25).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn distractor_shuffle_keeps_gold() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..50 {
            let inst = make_task_instance(&mut rng, &cfg, i);
            let s = shuffle_distractors(&inst, &mut rng);
            assert_eq!(gold_answer(&cfg, &s.vision), inst.gold);
            assert_eq!(s.prompt.last(), inst.prompt.last());
        }
    }

    #[test]
    fn reward_cases() {
        let cfg = TaskConfig::default();
        let inst = make_task_instance(&mut ChaCha8Rng::seed_from_u64(1), &cfg, 0);
        let mut toks = vec![cfg.distractor_base(); cfg.chain_len];
        assert_eq!(reward(&inst, &toks), 0.0);
        toks.push(inst.gold);
        assert_eq!(reward(&inst, &toks), 1.0);
        *toks.last_mut().unwrap() = cfg.answer_base() + (inst.gold + 1 - cfg.answer_base()) % 4;
        assert_eq!(reward(&inst, &toks), 0.0);
    }

    #[test]
    fn truncated_rollout_scores_zero() {
        let cfg = TaskConfig::default();
        let inst = make_task_instance(&mut ChaCha8Rng::seed_from_u64(1), &cfg, 0);
        let p = uniform_answerer(&cfg);
        let t = generate(&p, &inst, 5, Temperature::Value(1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(t.truncated);
        assert_eq!(t.len(), 5);
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn uniform_answering_hits_chance() {
        let cfg = TaskConfig::default();
        let p = uniform_answerer(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        for i in 0..1000 {
            let inst = make_task_instance(&mut rng, &cfg, i);
            total += generate(&p, &inst, usize::MAX, Temperature::Value(1.0), &mut rng).unwrap().reward;
        }
        let mean = total / 1000.0;
        assert!((mean - 0.25).abs() <= 0.125, "{mean}");
    }

    #[test]
    fn greedy_group_is_identical_and_records_are_consistent() {
        let cfg = TaskConfig::default();
        let inst = make_task_instance(&mut ChaCha8Rng::seed_from_u64(4), &cfg, 0);
        let p = model(4);
        let g = rollout_group(&p, &inst, 2, Temperature::Greedy, 0, &[0]).unwrap();
        assert_eq!(g.trajectories[0], g.trajectories[1]);
        let g = rollout_group(&p, &inst, 3, Temperature::Value(1.0), 0, &[0]).unwrap();
        for t in &g.trajectories {
            assert_eq!(t.len(), cfg.gen_len());
            for (j, d) in t.dists.iter().enumerate() {
                assert!((entropy(d) - t.entropies[j]).abs() <= 1e-12);
                assert!((d.get(t.tokens[j]).ln() - t.log_probs[j]).abs() < 1e-9);
            }
            assert!(t.reward == 0.0 || t.reward == 1.0);
        }
        assert!(rollout_group(&p, &inst, 1, Temperature::Greedy, 0, &[0]).is_err());
    }

    #[test]
    fn trajectories_do_not_depend_on_execution_order() {
        let cfg = TaskConfig::default();
        let inst = make_task_instance(&mut ChaCha8Rng::seed_from_u64(5), &cfg, 0);
        let p = model(5);
        let group = rollout_group(&p, &inst, 4, Temperature::Value(1.0), 9, &[1, 2]).unwrap();
        for i in (0..4).rev() {
            let mut rng = substream(9, "rollout", &[1, 2, i as u64]);
            let t = generate(&p, &inst, usize::MAX, Temperature::Value(1.0), &mut rng).unwrap();
            assert_eq!(t, group.trajectories[i]);
        }
    }

    #[test]
    fn dump_writes_one_line_per_trajectory() {
        let cfg = TaskConfig::default();
        let inst = make_task_instance(&mut ChaCha8Rng::seed_from_u64(6), &cfg, 7);
        let g = rollout_group(&model(6), &inst, 3, Temperature::Value(1.0), 0, &[0]).unwrap();
        let mut buf = Vec::new();
        dump_trajectories(&[g], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["instance_id"], 7);
    }
}
