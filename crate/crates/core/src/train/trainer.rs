//! Format warmup, the rollout → objective → update step, metrics and resume.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::env::{make_task_instance, rollout_group, TaskConfig, TaskInstance};
use crate::policy::{
    grad, Adam, Checkpoint, INIT_STD, LossItem, LossSpec, ModelConfig, PolicyParams, Temperature,
};
use crate::rng::substream;

use super::config::{TrainConfig, Variant};
use super::objective::{objective, prepare_refs, PreparedGroup};
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub variant: Variant,
    pub mean_reward: f64,
    pub mean_anchor_kl: f64,
    pub mean_entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub objective: f64,
    /// No group survived the dynamic-sampling filter; parameters unchanged.
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl StepMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub fn task_config(cfg: &TrainConfig) -> TaskConfig {
    TaskConfig {
        chain_len: cfg.chain_len,
        n_distractors: cfg.n_distractors,
        ..TaskConfig::default()
    }
}

/// Supervised targets teaching the answer format: chain position `j` copies
/// distractor `(j − 1) mod D`, and the answer slot is pushed toward a uniform
/// law over the answer alphabet.
pub fn format_targets(task: &TaskConfig, inst: &TaskInstance) -> LossItem {
    let mut tokens = inst.prefix();
    let n_d = inst.prompt.len() - 1;
    let mut targets = Vec::with_capacity(inst.gen_len() + task.n_needles);
    for j in 1..=inst.chain_len {
        let t = if n_d == 0 {
            task.question_marker()
        } else {
            inst.prompt[(j - 1) % n_d]
        };
        targets.push((inst.seq_pos(j), t, 1.0));
        tokens.push(t);
    }
    let answer_pos = inst.seq_pos(inst.gen_len());
    let w = 1.0 / task.n_needles as f64;
    for a in task.answer_tokens() {
        targets.push((answer_pos, a, w));
    }
    LossItem {
        tokens,
        mask: None,
        targets,
    }
}

fn vision_frozen_adam(params: &PolicyParams, task: &TaskConfig, lr: f64, freeze: bool) -> Adam {
    let mut adam = Adam::new(params.num_params(), lr);
    if freeze {
        for t in task.vision_tokens() {
            adam.freeze(params.layout.embedding_row(t));
        }
    }
    adam
}

/// Runs the format warmup in place; returns the final mean loss per instance.
pub fn format_warmup(params: &mut PolicyParams, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let task = task_config(cfg);
    let mut adam = vision_frozen_adam(params, &task, cfg.warmup_lr, cfg.freeze_vision);
    let mut last = f64::NAN;
    for k in 0..cfg.warmup_steps {
        let mut rng = substream(cfg.seed, "warmup", &[k]);
        let items = (0..cfg.warmup_batch)
            .map(|b| format_targets(&task, &make_task_instance(&mut rng, &task, b as u64)))
            .collect();
        let (loss, mut g) = grad(params, &LossSpec { items, param_linear: 0.0 })?;
        let n = cfg.warmup_batch as f64;
        g.data.iter_mut().for_each(|x| *x /= n);
        adam.step(params, &g);
        last = loss / n;
    }
    Ok(last)
}

fn rescale_vision_rows(params: &mut PolicyParams, task: &TaskConfig, factor: f64) {
    for t in task.vision_tokens() {
        let rows = params.layout.embedding_row(t);
        params.data[rows].iter_mut().for_each(|x| *x *= factor);
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub task: TaskConfig,
    pub params: PolicyParams,
    /// π_ref: the policy at RL step 0.
    pub reference: PolicyParams,
    pub adam: Adam,
    /// Next step to run.
    pub step: u64,
    pub wall_clock: bool,
}

impl Trainer {
    /// Seeded initialization followed by the format warmup.
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let task = task_config(&cfg);
        task.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let model = ModelConfig::default();
        if task.vocab_needed() > model.vocab || task.prefix_len() + task.gen_len() > model.max_len {
            return Err(TrainError::Config("task does not fit the model".into()));
        }
        let mut params = PolicyParams::init(model, &mut substream(cfg.seed, "init", &[]));
        rescale_vision_rows(&mut params, &task, cfg.vision_init_std / INIT_STD);
        format_warmup(&mut params, &cfg)?;
        let reference = params.clone();
        let adam = vision_frozen_adam(&params, &task, cfg.lr, cfg.freeze_vision);
        Ok(Self {
            cfg,
            task,
            params,
            reference,
            adam,
            step: 0,
            wall_clock: false,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_echo: self.cfg.to_text(),
            params: self.params.clone(),
            reference: self.reference.clone(),
            adam: self.adam.state.clone(),
            step: self.step,
            seed: self.cfg.seed,
        }
    }

    /// Restores a trainer; `steps` may differ from the saved run, nothing else may.
    pub fn from_checkpoint(ckpt: Checkpoint, steps: Option<u64>) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::from_text(&ckpt.config_echo)?;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let task = task_config(&cfg);
        let mut adam = vision_frozen_adam(&ckpt.params, &task, cfg.lr, cfg.freeze_vision);
        if ckpt.adam.m.len() != ckpt.params.num_params() {
            return Err(TrainError::Config("optimizer state does not match parameters".into()));
        }
        adam.state = ckpt.adam;
        Ok(Self {
            cfg,
            task,
            params: ckpt.params,
            reference: ckpt.reference,
            adam,
            step: ckpt.step,
            wall_clock: false,
        })
    }

    /// Prompts and rollout groups for `step`, keyed so that scheduling never matters.
    pub fn collect(&self, step: u64) -> Result<Vec<PreparedGroup>, TrainError> {
        let cfg = &self.cfg;
        (0..cfg.prompts_per_step as u64)
            .into_par_iter()
            .map(|p| {
                let mut rng = substream(cfg.seed, "prompt", &[step, p]);
                let inst = make_task_instance(&mut rng, &self.task, step * cfg.prompts_per_step as u64 + p);
                let group = rollout_group(
                    &self.params,
                    &inst,
                    cfg.group_size,
                    Temperature::Value(cfg.temperature),
                    cfg.seed,
                    &[step, p],
                )?;
                Ok(PreparedGroup::new(group, cfg))
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepMetrics, TrainError> {
        let start = Instant::now();
        let step = self.step;
        let groups = self.collect(step)?;
        let (mut rsum, mut rn, mut esum, mut en) = (0.0, 0usize, 0.0, 0usize);
        for pg in &groups {
            for t in &pg.group.trajectories {
                rsum += t.reward;
                rn += 1;
                esum += t.entropies.iter().sum::<f64>();
                en += t.entropies.len();
            }
        }
        let refs = prepare_refs(&self.params, &self.reference, &groups)?;
        let metrics = match objective(&self.params, &groups, &refs, &self.cfg) {
            Ok(out) => {
                let mut descent = out.grad.clone();
                descent.data.iter_mut().for_each(|x| *x = -*x);
                self.adam.step(&mut self.params, &descent);
                StepMetrics {
                    step,
                    variant: self.cfg.variant,
                    mean_reward: rsum / rn as f64,
                    mean_anchor_kl: out.mean_anchor_kl,
                    mean_entropy: esum / en.max(1) as f64,
                    clip_fraction: out.clip_fraction,
                    grad_norm: out.grad.norm(),
                    objective: out.value,
                    skipped: false,
                    wall_ms: None,
                }
            }
            Err(TrainError::EmptyBatch) => {
                let probe = TrainConfig {
                    variant: Variant::Grpo,
                    ..self.cfg.clone()
                };
                let kl = objective(&self.params, &groups, &refs, &probe)?.mean_anchor_kl;
                StepMetrics {
                    step,
                    variant: self.cfg.variant,
                    mean_reward: rsum / rn as f64,
                    mean_anchor_kl: kl,
                    mean_entropy: esum / en.max(1) as f64,
                    clip_fraction: 0.0,
                    grad_norm: 0.0,
                    objective: 0.0,
                    skipped: true,
                    wall_ms: None,
                }
            }
            Err(e) => return Err(e),
        };
        self.step += 1;
        Ok(StepMetrics {
            wall_ms: self.wall_clock.then(|| start.elapsed().as_millis() as u64),
            ..metrics
        })
    }

    /// Steps until `cfg.steps`, handing each metrics record to `on_step`.
    pub fn run<F>(&mut self, mut on_step: F) -> Result<(), TrainError>
    where
        F: FnMut(&Self, &StepMetrics) -> Result<(), TrainError>,
    {
        while self.step < self.cfg.steps {
            let m = self.train_step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
