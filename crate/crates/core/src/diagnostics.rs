//! Mechanism measurements on a policy: how much each generated position still
//! depends on the vision prefix, how masking one anchor's vision access
//! propagates downstream, sensitivity to noisy vision embeddings, which token
//! types get picked as anchors, and attention-guided vs random vision masking.
//!
//! "Vision-masked" always means attention-masking every vision key for the
//! text rows, never deleting tokens, so positions line up across passes.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::dist::kl_from_log_probs;
use crate::env::{generate, make_task_instance, EnvError, TaskConfig, TaskInstance, Trajectory};
use crate::policy::{forward, AttentionMaskSpec, ForwardOptions, PolicyError, PolicyParams, Temperature};
use crate::rng::substream;
use crate::train::select_anchors;

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Blocks the given vision keys for every text row.
fn vision_mask(inst: &TaskInstance, seq_len: usize, keys: &[usize]) -> AttentionMaskSpec {
    let first_text_query = inst.vision.len() + 1;
    AttentionMaskSpec::from_pairs(
        (first_text_query..=seq_len).flat_map(|q| keys.iter().map(move |&k| (q, k))),
    )
}

fn all_vision(inst: &TaskInstance) -> Vec<usize> {
    inst.vision_positions().collect()
}

fn log_probs(params: &PolicyParams, seq: &[usize], mask: Option<&AttentionMaskSpec>) -> Result<Array2<f64>> {
    Ok(forward(params, seq, ForwardOptions { mask, embed_noise: None })?.log_probs())
}

/// `KL(p_row ‖ q_row)` at every generated position, clamped at 0.
fn per_position_kl(inst: &TaskInstance, t: usize, p: &Array2<f64>, q: &Array2<f64>) -> Vec<f64> {
    (1..=t)
        .map(|j| {
            let r = inst.seq_pos(j) - 1;
            kl_from_log_probs(p.row(r).as_slice().unwrap(), q.row(r).as_slice().unwrap()).max(0.0)
        })
        .collect()
}

/// Forward mean over `values[j .. j + w']` with `w' = min(w, len − j)`.
pub fn window_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|j| {
            let end = (j + w).min(values.len());
            values[j..end].iter().sum::<f64>() / (end - j) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlProfile {
    pub trajectory_id: u64,
    pub correct: bool,
    /// One value per generated position, nats.
    pub values: Vec<f64>,
}

/// `S(H_t, V)` at every generated position, window-averaged when `w > 1`.
pub fn contrastive_kl_profile(
    params: &PolicyParams,
    inst: &TaskInstance,
    traj: &Trajectory,
    w: usize,
) -> Result<KlProfile> {
    let seq = traj.sequence(inst);
    let full = log_probs(params, &seq, None)?;
    let masked = log_probs(params, &seq, Some(&vision_mask(inst, seq.len(), &all_vision(inst))))?;
    let raw = per_position_kl(inst, traj.len(), &full, &masked);
    Ok(KlProfile {
        trajectory_id: inst.id,
        correct: traj.reward == 1.0,
        values: if w > 1 { window_average(&raw, w) } else { raw },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagationRecord {
    pub trajectory_id: u64,
    /// 0-based index into the anchor list.
    pub anchor_index: usize,
    /// 1-based generated position of the anchor.
    pub anchor_position: usize,
    /// `ΔKL` at the next anchor; absent on the last anchor.
    pub next_anchor: Option<f64>,
    /// Mean `ΔKL` over the next `w` positions; absent when the anchor ends the sequence.
    pub window_mean: Option<f64>,
}

/// `ΔKL = S(H′_t, V) − S(H_t, V)` downstream of anchor `k`, where `H′` blocks
/// the anchor row's access to vision.
pub fn propagation_delta_kl(
    params: &PolicyParams,
    inst: &TaskInstance,
    traj: &Trajectory,
    anchors: &[usize],
    k: usize,
    w: usize,
) -> Result<PropagationRecord> {
    let a = *anchors
        .get(k)
        .ok_or_else(|| DiagnosticsError::InvalidArgument(format!("anchor {k} of {}", anchors.len())))?;
    let seq = traj.sequence(inst);
    let vision = all_vision(inst);
    let full = log_probs(params, &seq, None)?;
    // blocking every vision key already covers the anchor row, so the
    // vision-masked pass is shared by both histories
    let masked = log_probs(params, &seq, Some(&vision_mask(inst, seq.len(), &vision)))?;
    let anchor_block = AttentionMaskSpec::from_pairs(vision.iter().map(|&v| (inst.seq_pos(a), v)));
    let blocked = log_probs(params, &seq, Some(&anchor_block))?;
    let s = per_position_kl(inst, traj.len(), &full, &masked);
    let s_prime = per_position_kl(inst, traj.len(), &blocked, &masked);
    let delta = |j: usize| s_prime[j - 1] - s[j - 1];
    let next_anchor = anchors.get(k + 1).map(|&n| delta(n));
    let end = (a + w).min(traj.len());
    let window_mean = (end > a).then(|| (a + 1..=end).map(delta).sum::<f64>() / (end - a) as f64);
    Ok(PropagationRecord {
        trajectory_id: inst.id,
        anchor_index: k,
        anchor_position: a,
        next_anchor,
        window_mean,
    })
}

/// `KL(π(·|H_t, V) ‖ π(·|H_t, V + ε))` per generated position, `ε ~ N(0, σ²I)`
/// added to the vision embedding rows.
pub fn noise_perturb_kl<R: Rng + ?Sized>(
    params: &PolicyParams,
    inst: &TaskInstance,
    traj: &Trajectory,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DiagnosticsError::InvalidArgument(format!("sigma {sigma}")));
    }
    let seq = traj.sequence(inst);
    let d = params.config().d_model;
    let mut noise = Array2::zeros((seq.len(), d));
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for v in inst.vision_positions() {
            noise.row_mut(v).iter_mut().for_each(|x| *x = normal.sample(rng));
        }
    }
    let clean = log_probs(params, &seq, None)?;
    let noisy = forward(
        params,
        &seq,
        ForwardOptions {
            mask: None,
            embed_noise: Some(&noise),
        },
    )?
    .log_probs();
    Ok(per_position_kl(inst, traj.len(), &clean, &noisy))
}

/// Mean of `values` over the top and bottom `frac` of positions by entropy.
pub fn entropy_split_means(values: &[f64], entropies: &[f64], frac: f64) -> (f64, f64) {
    let n = ((frac * values.len() as f64).floor() as usize).clamp(1, values.len().max(1));
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| entropies[j].total_cmp(&entropies[i]).then(i.cmp(&j)));
    let mean = |idx: &[usize]| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len().max(1) as f64;
    (mean(&order[..n]), mean(&order[order.len() - n..]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationRow {
    pub token_type: usize,
    pub occurrences: usize,
    pub anchor_fraction: f64,
}

/// Fraction of each token type's occurrences that land in the top-`ρ` anchor
/// set, for types seen at least `min_count` times; sorted by fraction, descending.
pub fn anchor_concentration(corpus: &[(Vec<usize>, Vec<f64>)], rho: f64, min_count: usize) -> Vec<ConcentrationRow> {
    let mut counts: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (tokens, entropies) in corpus {
        let anchors = select_anchors(entropies, rho);
        for (j, &t) in tokens.iter().enumerate() {
            let e = counts.entry(t).or_default();
            e.0 += 1;
            if anchors.binary_search(&(j + 1)).is_ok() {
                e.1 += 1;
            }
        }
    }
    let mut rows: Vec<ConcentrationRow> = counts
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count)
        .map(|(token_type, (n, a))| ConcentrationRow {
            token_type,
            occurrences: n,
            anchor_fraction: a as f64 / n as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.anchor_fraction.total_cmp(&a.anchor_fraction).then(a.token_type.cmp(&b.token_type)));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingRecord {
    pub trajectory_id: u64,
    /// Probability of the gold answer at the answer slot, teacher-forced on the chain.
    pub clean: f64,
    /// Same, with the most-attended vision positions at the first anchor masked.
    pub guided: f64,
    /// Same, with an equal number of random vision positions masked.
    pub random: f64,
}

/// Attention-guided vs random masking of a `fraction` of vision positions.
pub fn attention_guided_masking<R: Rng + ?Sized>(
    params: &PolicyParams,
    inst: &TaskInstance,
    traj: &Trajectory,
    anchors: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<MaskingRecord> {
    if traj.len() < inst.gen_len() {
        return Err(DiagnosticsError::InvalidArgument("trajectory has no answer slot".into()));
    }
    let seq = traj.sequence(inst);
    let n_vision = inst.vision.len();
    let n_mask = ((fraction * n_vision as f64).round() as usize).clamp(1, n_vision);
    let answer_row = inst.seq_pos(inst.gen_len()) - 1;
    let cache = forward(params, &seq, ForwardOptions::default())?;
    let gold_prob = |lp: &Array2<f64>| lp[[answer_row, inst.gold]].exp();

    let probe_row = inst.seq_pos(anchors.first().copied().unwrap_or(1)) - 1;
    let layers = params.config().n_layers;
    let mut weight: Vec<(usize, f64)> = inst
        .vision_positions()
        .map(|v| (v, (0..layers).map(|l| cache.attention(l)[[probe_row, v]]).sum::<f64>()))
        .collect();
    weight.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let guided_keys: Vec<usize> = weight[..n_mask].iter().map(|p| p.0).collect();
    let random_keys: Vec<usize> = sample(rng, n_vision, n_mask).into_iter().collect();

    let guided = log_probs(params, &seq, Some(&vision_mask(inst, seq.len(), &guided_keys)))?;
    let random = log_probs(params, &seq, Some(&vision_mask(inst, seq.len(), &random_keys)))?;
    Ok(MaskingRecord {
        trajectory_id: inst.id,
        clean: gold_prob(&cache.log_probs()),
        guided: gold_prob(&guided),
        random: gold_prob(&random),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    /// 1-based generated position.
    pub position: usize,
    pub mean_kl: f64,
    pub count: usize,
    pub stratum: &'static str,
}

/// Per-position means over all profiles and over the correct / incorrect strata.
pub fn aggregate_profiles(profiles: &[KlProfile]) -> Vec<ProfileRow> {
    let mut rows = Vec::new();
    let strata: [(&'static str, fn(&KlProfile) -> bool); 3] =
        [("all", |_| true), ("correct", |p| p.correct), ("incorrect", |p| !p.correct)];
    for (name, keep) in strata {
        let kept: Vec<&KlProfile> = profiles.iter().filter(|p| keep(p)).collect();
        let t = kept.iter().map(|p| p.values.len()).max().unwrap_or(0);
        for j in 0..t {
            let vals: Vec<f64> = kept.iter().filter_map(|p| p.values.get(j).copied()).collect();
            rows.push(ProfileRow {
                position: j + 1,
                mean_kl: vals.iter().sum::<f64>() / vals.len() as f64,
                count: vals.len(),
                stratum: name,
            });
        }
    }
    rows
}

/// Mean profile value over positions in the last third of each trajectory.
pub fn late_third_mean(profiles: &[KlProfile]) -> f64 {
    let vals: Vec<f64> = profiles
        .iter()
        .flat_map(|p| {
            let start = 2 * p.values.len() / 3;
            p.values[start..].iter().copied()
        })
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("position,mean_kl,count,stratum\n");
    for r in rows {
        s.push_str(&format!("{},{:.12e},{},{}\n", r.position, r.mean_kl, r.count, r.stratum));
    }
    s
}

pub fn concentration_csv(rows: &[ConcentrationRow]) -> String {
    let mut s = String::from("token_type,occurrences,anchor_fraction\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.12e}\n", r.token_type, r.occurrences, r.anchor_fraction));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    Profile,
    Propagation,
    Noise,
    Concentration,
    Masking,
}

impl Measurement {
    pub const ALL: [Measurement; 5] = [
        Measurement::Profile,
        Measurement::Propagation,
        Measurement::Noise,
        Measurement::Concentration,
        Measurement::Masking,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Measurement::Profile => "profile",
            Measurement::Propagation => "propagation",
            Measurement::Noise => "noise",
            Measurement::Concentration => "concentration",
            Measurement::Masking => "masking",
        }
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measurement {
    type Err = DiagnosticsError;
    fn from_str(s: &str) -> Result<Self> {
        Measurement::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| DiagnosticsError::InvalidArgument(format!("unknown measurement '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    pub instances: usize,
    pub seed: u64,
    /// Window for the contrastive profile.
    pub profile_window: usize,
    /// Window for the propagation average.
    pub propagation_window: usize,
    pub rho: f64,
    pub min_count: usize,
    pub sigmas: Vec<f64>,
    pub mask_fraction: f64,
    pub temperature: f64,
    pub measures: Vec<Measurement>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            instances: 64,
            seed: 0,
            profile_window: 1,
            propagation_window: 3,
            rho: 0.2,
            min_count: 10,
            sigmas: vec![0.1, 0.3, 1.0],
            mask_fraction: 0.2,
            temperature: 1.0,
            measures: Measurement::ALL.to_vec(),
        }
    }
}

/// Held-out instances (their own substream tag) with one sampled trajectory each.
pub fn sample_corpus(
    params: &PolicyParams,
    task: &TaskConfig,
    cfg: &DiagnoseConfig,
) -> Result<Vec<(TaskInstance, Trajectory)>> {
    (0..cfg.instances as u64)
        .into_par_iter()
        .map(|k| {
            let inst = make_task_instance(&mut substream(cfg.seed, "diagnose", &[k]), task, k);
            let mut rng = substream(cfg.seed, "diagnose-rollout", &[k]);
            let traj = generate(params, &inst, usize::MAX, Temperature::Value(cfg.temperature), &mut rng)?;
            Ok((inst, traj))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSplit {
    pub sigma: f64,
    pub top_entropy_mean_kl: f64,
    pub bottom_entropy_mean_kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiagnoseSummary {
    pub instances: usize,
    pub mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub late_third_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_delta_next_anchor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_delta_window: Option<f64>,
    /// Propagation deltas that came out positive.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_sign_violations: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoiseSplit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking_clean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking_guided: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking_random: Option<f64>,
    pub files: Vec<PathBuf>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct NoiseRecord {
    sigma: f64,
    trajectory_id: u64,
    position: usize,
    entropy: f64,
    kl: f64,
}

/// Runs the requested measurements on a held-out corpus, writing tables and
/// records under `out_dir` plus a `summary.json`.
pub fn run_diagnostics(
    params: &PolicyParams,
    task: &TaskConfig,
    cfg: &DiagnoseConfig,
    out_dir: &Path,
) -> Result<DiagnoseSummary> {
    if cfg.measures.is_empty() {
        return Err(DiagnosticsError::InvalidArgument("no measurements requested".into()));
    }
    fs::create_dir_all(out_dir)?;
    let corpus = sample_corpus(params, task, cfg)?;
    let mut summary = DiagnoseSummary {
        instances: corpus.len(),
        mean_reward: mean(corpus.iter().map(|c| c.1.reward)).unwrap_or(0.0),
        ..Default::default()
    };
    let anchors: Vec<Vec<usize>> = corpus.iter().map(|(_, t)| select_anchors(&t.entropies, cfg.rho)).collect();
    let mut files = Vec::new();

    for m in &cfg.measures {
        match m {
            Measurement::Profile => {
                let profiles = corpus
                    .par_iter()
                    .map(|(i, t)| contrastive_kl_profile(params, i, t, cfg.profile_window))
                    .collect::<Result<Vec<_>>>()?;
                summary.late_third_kl = Some(late_third_mean(&profiles));
                let path = out_dir.join("profile.csv");
                fs::write(&path, profile_csv(&aggregate_profiles(&profiles)))?;
                files.push(path);
            }
            Measurement::Propagation => {
                let records: Vec<PropagationRecord> = corpus
                    .par_iter()
                    .zip(&anchors)
                    .map(|((i, t), a)| {
                        (0..a.len())
                            .map(|k| propagation_delta_kl(params, i, t, a, k, cfg.propagation_window))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect();
                summary.mean_delta_next_anchor = mean(records.iter().filter_map(|r| r.next_anchor));
                summary.mean_delta_window = mean(records.iter().filter_map(|r| r.window_mean));
                summary.delta_sign_violations = Some(
                    records
                        .iter()
                        .flat_map(|r| [r.next_anchor, r.window_mean])
                        .flatten()
                        .filter(|&d| d > 0.0)
                        .count(),
                );
                let path = out_dir.join("propagation.jsonl");
                write_jsonl(&path, &records)?;
                files.push(path);
            }
            Measurement::Noise => {
                let mut records = Vec::new();
                for (s_idx, &sigma) in cfg.sigmas.iter().enumerate() {
                    let kls = corpus
                        .par_iter()
                        .enumerate()
                        .map(|(k, (i, t))| {
                            let mut rng = substream(cfg.seed, "diagnose-noise", &[s_idx as u64, k as u64]);
                            noise_perturb_kl(params, i, t, sigma, &mut rng)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (mut top, mut bottom) = (Vec::new(), Vec::new());
                    for ((i, t), kl) in corpus.iter().zip(&kls) {
                        let (a, b) = entropy_split_means(kl, &t.entropies, 0.2);
                        top.push(a);
                        bottom.push(b);
                        for (j, (&v, &e)) in kl.iter().zip(&t.entropies).enumerate() {
                            records.push(NoiseRecord {
                                sigma,
                                trajectory_id: i.id,
                                position: j + 1,
                                entropy: e,
                                kl: v,
                            });
                        }
                    }
                    summary.noise.push(NoiseSplit {
                        sigma,
                        top_entropy_mean_kl: mean(top).unwrap_or(0.0),
                        bottom_entropy_mean_kl: mean(bottom).unwrap_or(0.0),
                    });
                }
                let path = out_dir.join("noise.jsonl");
                write_jsonl(&path, &records)?;
                files.push(path);
            }
            Measurement::Concentration => {
                let c: Vec<(Vec<usize>, Vec<f64>)> =
                    corpus.iter().map(|(_, t)| (t.tokens.clone(), t.entropies.clone())).collect();
                let path = out_dir.join("concentration.csv");
                fs::write(&path, concentration_csv(&anchor_concentration(&c, cfg.rho, cfg.min_count)))?;
                files.push(path);
            }
            Measurement::Masking => {
                let records = corpus
                    .par_iter()
                    .zip(&anchors)
                    .enumerate()
                    .filter(|(_, ((i, t), _))| t.len() >= i.gen_len())
                    .map(|(k, ((i, t), a))| {
                        let mut rng = substream(cfg.seed, "diagnose-mask", &[k as u64]);
                        attention_guided_masking(params, i, t, a, cfg.mask_fraction, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                summary.masking_clean = mean(records.iter().map(|r| r.clean));
                summary.masking_guided = mean(records.iter().map(|r| r.guided));
                summary.masking_random = mean(records.iter().map(|r| r.random));
                let path = out_dir.join("masking.jsonl");
                write_jsonl(&path, &records)?;
                files.push(path);
            }
        }
    }
    let path = out_dir.join("summary.json");
    files.push(path.clone());
    summary.files = files;
    fs::write(&path, serde_json::to_string_pretty(&summary).map_err(std::io::Error::from)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (PolicyParams, TaskConfig, TaskInstance, Trajectory) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PolicyParams::init(ModelConfig::default(), &mut rng);
        params.data.iter_mut().for_each(|x| *x *= 10.0);
        let task = TaskConfig::default();
        let inst = make_task_instance(&mut rng, &task, 3);
        let traj = generate(&params, &inst, usize::MAX, Temperature::Value(1.0), &mut rng).unwrap();
        (params, task, inst, traj)
    }

    /// Zero attention output: every position sees only its own token.
    fn vision_blind(mut params: PolicyParams) -> PolicyParams {
        for l in 0..params.config().n_layers {
            let r = params.layout.attention_output(l);
            params.data[r].fill(0.0);
        }
        params
    }

    #[test]
    fn blind_policy_has_zero_profile_and_propagation() {
        let (params, _, inst, traj) = setup(1);
        let blind = vision_blind(params);
        let p = contrastive_kl_profile(&blind, &inst, &traj, 1).unwrap();
        assert_eq!(p.values.len(), traj.len());
        assert!(p.values.iter().all(|&v| v == 0.0));
        let anchors = [2, 5];
        for k in 0..2 {
            let r = propagation_delta_kl(&blind, &inst, &traj, &anchors, k, 3).unwrap();
            assert!(r.next_anchor.unwrap_or(0.0).abs() < 1e-15);
            assert!(r.window_mean.unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn profile_is_nonnegative_and_window_one_is_raw() {
        let (params, _, inst, traj) = setup(2);
        let raw = contrastive_kl_profile(&params, &inst, &traj, 1).unwrap();
        assert!(raw.values.iter().all(|&v| v >= 0.0));
        assert!(raw.values.iter().any(|&v| v > 0.0));
        let w3 = contrastive_kl_profile(&params, &inst, &traj, 3).unwrap();
        assert_eq!(w3.values, window_average(&raw.values, 3));
        assert_eq!(window_average(&raw.values, 1), raw.values);
        // deterministic
        assert_eq!(contrastive_kl_profile(&params, &inst, &traj, 1).unwrap(), raw);
    }

    #[test]
    fn last_anchor_has_no_next_field() {
        let (params, _, inst, traj) = setup(3);
        let anchors = [3, 7];
        let r = propagation_delta_kl(&params, &inst, &traj, &anchors, 1, 3).unwrap();
        assert!(r.next_anchor.is_none());
        assert!(r.window_mean.is_some());
        let first = propagation_delta_kl(&params, &inst, &traj, &anchors, 0, 3).unwrap();
        assert!(first.next_anchor.unwrap().is_finite());
        let end = propagation_delta_kl(&params, &inst, &traj, &[traj.len()], 0, 3).unwrap();
        assert!(end.window_mean.is_none());
        assert!(propagation_delta_kl(&params, &inst, &traj, &anchors, 2, 3).is_err());
    }

    #[test]
    fn noise_kl_is_zero_at_zero_sigma_and_nonnegative() {
        let (params, _, inst, traj) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = noise_perturb_kl(&params, &inst, &traj, 0.0, &mut rng).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let n = noise_perturb_kl(&params, &inst, &traj, 0.5, &mut rng).unwrap();
        assert!(n.iter().all(|&v| v >= 0.0) && n.iter().any(|&v| v > 0.0));
        assert!(noise_perturb_kl(&params, &inst, &traj, -1.0, &mut rng).is_err());
    }

    #[test]
    fn entropy_split_example() {
        let (top, bottom) = entropy_split_means(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.5, 0.1, 0.9, 0.3, 0.2], 0.2);
        assert_eq!((top, bottom), (3.0, 2.0));
    }

    #[test]
    fn single_type_corpus_matches_rho() {
        let corpus: Vec<(Vec<usize>, Vec<f64>)> = (0..20)
            .map(|k| (vec![7; 10], (0..10).map(|j| ((j * 7 + k) % 10) as f64).collect()))
            .collect();
        let rows = anchor_concentration(&corpus, 0.2, 10);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].occurrences, 200);
        assert!((rows[0].anchor_fraction - 0.2).abs() < 1e-12);
        // below the minimum count: excluded
        assert!(anchor_concentration(&corpus[..1], 0.2, 11).is_empty());
    }

    proptest! {
        #[test]
        fn concentration_accounting(
            seqs in prop::collection::vec(prop::collection::vec((0usize..5, 0.0f64..2.0), 5..12), 1..10),
            rho in 0.1f64..1.0,
        ) {
            let corpus: Vec<(Vec<usize>, Vec<f64>)> =
                seqs.iter().map(|s| s.iter().cloned().unzip()).collect();
            let rows = anchor_concentration(&corpus, rho, 1);
            let total: usize = corpus.iter().map(|c| c.0.len()).sum();
            let anchors: usize = corpus.iter().map(|c| select_anchors(&c.1, rho).len()).sum();
            let weighted: f64 = rows.iter().map(|r| r.anchor_fraction * r.occurrences as f64).sum();
            prop_assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.anchor_fraction)));
            prop_assert!((weighted - anchors as f64).abs() < 1e-9);
            prop_assert_eq!(rows.iter().map(|r| r.occurrences).sum::<usize>(), total);
            prop_assert!(rows.windows(2).all(|w| w[0].anchor_fraction >= w[1].anchor_fraction));
        }
    }

    #[test]
    fn masking_probabilities_are_valid() {
        let (params, _, inst, traj) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = attention_guided_masking(&params, &inst, &traj, &[2, 6], 0.2, &mut rng).unwrap();
        for p in [r.clean, r.guided, r.random] {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn aggregation_and_late_third() {
        let profiles = vec![
            KlProfile { trajectory_id: 0, correct: true, values: vec![1.0, 2.0, 3.0] },
            KlProfile { trajectory_id: 1, correct: false, values: vec![3.0, 4.0, 5.0] },
        ];
        let rows = aggregate_profiles(&profiles);
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[0], ProfileRow { position: 1, mean_kl: 2.0, count: 2, stratum: "all" });
        assert_eq!(rows[3].stratum, "correct");
        assert_eq!(late_third_mean(&profiles), 4.0);
        assert!(profile_csv(&rows).starts_with("position,mean_kl,count,stratum\n"));
    }

    #[test]
    fn run_writes_requested_files_deterministically() {
        let (params, task, _, _) = setup(6);
        let dir = tempfile::tempdir().unwrap();
        let cfg = DiagnoseConfig { instances: 6, min_count: 2, ..DiagnoseConfig::default() };
        let a = run_diagnostics(&params, &task, &cfg, &dir.path().join("a")).unwrap();
        let b = run_diagnostics(&params, &task, &cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.files.len(), 6);
        for (x, y) in a.files.iter().zip(&b.files) {
            if x.file_name().unwrap() != "summary.json" {
                assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            }
        }
        assert!(a.late_third_kl.unwrap().is_finite());
        let empty = DiagnoseConfig { measures: vec![], ..cfg };
        assert!(run_diagnostics(&params, &task, &empty, dir.path()).is_err());
        assert_eq!("noise".parse::<Measurement>().unwrap(), Measurement::Noise);
        assert!("bogus".parse::<Measurement>().is_err());
    }
}
