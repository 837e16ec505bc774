//! `rapo-lab`: train, verify the theory oracles, run diagnostics, dump rollouts.
//!
//! Exit codes: 0 success, 1 theory violation or runtime failure, 2 usage or
//! config error (including unreadable checkpoints), 3 numeric failure.

mod manifest;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rapo_core::diagnostics::{run_diagnostics, DiagnoseConfig, Measurement};
use rapo_core::env::{dump_trajectories, make_task_instance, rollout_group};
use rapo_core::policy::{load_checkpoint, save_checkpoint, Checkpoint, PolicyError, Temperature};
use rapo_core::rng::substream;
use rapo_core::theory::{run_sweep, Mutation, SweepConfig, MAX_HORIZON, MAX_VISUAL, MAX_VOCAB};
use rapo_core::train::{task_config, TrainConfig, TrainError, Trainer};

use manifest::{config_pairs, RunManifest};

const DEFAULT_OUT_ROOT: &str = "rapo-out";

#[derive(Parser, Debug)]
#[command(name = "rapo-lab", version = manifest::VERSION, about = "Reflection-anchor policy optimization lab")]
struct Cli {
    /// Output directory (default: $RAPO_LAB_OUT/<subcommand>, else ./rapo-out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy with GRPO, RAPO_G or RAPO_D.
    Train(TrainArgs),
    /// Run the seeded theory verification sweep.
    VerifyTheory(VerifyArgs),
    /// Measure visual dependence on a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Dump raw rollout trajectories.
    Rollout(RolloutArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    prompts_per_step: Option<usize>,
}

impl ConfigArgs {
    fn flag_overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("variant", self.variant.clone());
        put("seed", self.seed.map(|x| x.to_string()));
        put("steps", self.steps.map(|x| x.to_string()));
        put("gamma", self.gamma.map(|x| x.to_string()));
        put("rho", self.rho.map(|x| x.to_string()));
        put("window", self.window.map(|x| x.to_string()));
        put("beta", self.beta.map(|x| x.to_string()));
        put("lr", self.lr.map(|x| x.to_string()));
        put("group_size", self.group_size.map(|x| x.to_string()));
        put("prompts_per_step", self.prompts_per_step.map(|x| x.to_string()));
        out
    }

    /// Default, then file, then `--set`, then explicit flags.
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            cfg.set(k, v)?;
        }
        for (k, v) in self.flag_overrides() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn is_untouched(&self) -> bool {
        self.config.is_none() && self.sets.is_empty() && self.flag_overrides().is_empty()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Save a checkpoint every K steps (0 = only the final one).
    #[arg(long, default_value_t = 50)]
    checkpoint_every: u64,
    /// Continue from a checkpoint; only --steps may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Record per-step wall time in the metrics (breaks byte-identical reruns).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Number of seeded worlds.
    #[arg(long, default_value_t = 200)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3, 1e-2])]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = MAX_VOCAB)]
    max_vocab: usize,
    #[arg(long, default_value_t = MAX_HORIZON)]
    max_horizon: usize,
    #[arg(long, default_value_t = MAX_VISUAL)]
    max_visual: usize,
    /// Inject a known bug to confirm the sweep catches it: `none` or `flip-psi-sign`.
    #[arg(long, default_value = "none")]
    mutation: String,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    instances: usize,
    /// Comma-separated: profile, propagation, noise, concentration, masking.
    #[arg(long, value_delimiter = ',')]
    measure: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    propagation_window: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 1.0])]
    sigmas: Vec<f64>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    /// Policy checkpoint; without one a fresh policy is initialized and warmed up.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 4)]
    prompts: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0} theory violation(s); see the report")]
    Violations(usize),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Violations(_) | CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Checkpoint(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss(_) | TrainError::Policy(PolicyError::NonFiniteLoss(_)) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn out_dir(cli_out: &Option<PathBuf>, sub: &str) -> PathBuf {
    match cli_out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os("RAPO_LAB_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
            root.join(sub)
        }
    }
}

/// Runs `work` between manifest creation and finalization.
fn with_manifest<F>(mut m: RunManifest, work: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<(), CliError>,
{
    m.write()?;
    let result = work();
    let code = result.as_ref().err().map_or(0, |e| e.code() as i32);
    m.finish(code)?;
    result
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Config(format!("bad checkpoint {}: {e}", path.display())))
}

fn cmd_train(args: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let (cfg, resume) = match &args.resume {
        Some(path) => {
            let c = &args.config;
            let only_steps = c.config.is_none() && c.sets.is_empty() && c.flag_overrides().iter().all(|(k, _)| *k == "steps");
            if !only_steps {
                return Err(CliError::Config("--resume accepts --steps only; the rest comes from the checkpoint".into()));
            }
            let ckpt = load_ckpt(path)?;
            let mut cfg = TrainConfig::from_text(&ckpt.config_echo)?;
            if let Some(s) = c.steps {
                cfg.steps = s;
            }
            (cfg, Some(ckpt))
        }
        None => (args.config.resolve()?, None),
    };
    let m = RunManifest::new("train", config_pairs(&cfg.to_text()), cfg.seed, out);
    with_manifest(m, || {
        let mut trainer = match resume {
            Some(ckpt) => Trainer::from_checkpoint(ckpt, Some(cfg.steps))?,
            None => Trainer::new(cfg.clone())?,
        };
        trainer.wall_clock = args.wall_clock;
        let ckpt_dir = out.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        let mut metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .append(args.resume.is_some())
            .truncate(args.resume.is_none())
            .open(out.join("metrics.jsonl"))?;
        let every = args.checkpoint_every;
        trainer.run(|t, m| {
            writeln!(metrics, "{}", m.to_json())?;
            if every > 0 && t.step % every == 0 {
                save_checkpoint(&t.checkpoint(), &ckpt_dir.join(format!("step_{:06}.ckpt", t.step)))?;
            }
            Ok(())
        })?;
        metrics.flush()?;
        save_checkpoint(&trainer.checkpoint(), &out.join("final.ckpt")).map_err(TrainError::from)?;
        Ok(())
    })
}

fn cmd_verify(args: &VerifyArgs, out: &Path) -> Result<(), CliError> {
    let caps = [("max-vocab", args.max_vocab, MAX_VOCAB), ("max-horizon", args.max_horizon, MAX_HORIZON), ("max-visual", args.max_visual, MAX_VISUAL)];
    for (name, v, max) in caps {
        if v == 0 || v > max {
            return Err(CliError::Config(format!("--{name} must be in 1..={max}, got {v}")));
        }
    }
    let mutation = match args.mutation.as_str() {
        "none" => Mutation::None,
        "flip-psi-sign" => Mutation::FlipPsiSign,
        other => return Err(CliError::Config(format!("unknown mutation '{other}'"))),
    };
    let cfg = SweepConfig {
        seeds: (args.seed_start..args.seed_start + args.seeds).collect(),
        epsilons: args.epsilons.clone(),
        max_vocab: args.max_vocab,
        max_horizon: args.max_horizon,
        max_visual: args.max_visual,
        mutation,
    };
    let pairs = vec![
        ("seeds".to_string(), args.seeds.to_string()),
        ("seed_start".to_string(), args.seed_start.to_string()),
        ("epsilons".to_string(), format!("{:?}", args.epsilons)),
        ("max_vocab".to_string(), args.max_vocab.to_string()),
        ("max_horizon".to_string(), args.max_horizon.to_string()),
        ("max_visual".to_string(), args.max_visual.to_string()),
        ("mutation".to_string(), args.mutation.clone()),
    ];
    with_manifest(RunManifest::new("verify-theory", pairs, args.seed_start, out), || {
        let summary = run_sweep(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(out.join("report.jsonl"), summary.to_jsonl())?;
        let violations: Vec<_> = summary.violations().collect();
        let brief = serde_json::json!({
            "instances": summary.instances,
            "records": summary.records.len(),
            "skipped_instances": summary.skipped_instances,
            "violations": violations.len(),
        });
        fs::write(out.join("summary.json"), serde_json::to_string_pretty(&brief).map_err(std::io::Error::from)?)?;
        println!("{brief}");
        for v in &violations {
            eprintln!("violation: seed {} {} lhs {:?} rhs {:?}", v.seed, v.id, v.lhs, v.rhs);
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(CliError::Violations(violations.len()))
        }
    })
}

fn cmd_diagnose(args: &DiagnoseArgs, out: &Path) -> Result<(), CliError> {
    if args.measure.is_empty() {
        return Err(CliError::Config(
            "no measurements requested; usage: --measure profile,propagation,noise,concentration,masking".into(),
        ));
    }
    let measures = args
        .measure
        .iter()
        .map(|s| s.parse::<Measurement>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let ckpt = load_ckpt(&args.checkpoint)?;
    let train_cfg = TrainConfig::from_text(&ckpt.config_echo)?;
    let cfg = DiagnoseConfig {
        instances: args.instances,
        seed: args.seed,
        profile_window: args.window,
        propagation_window: args.propagation_window,
        sigmas: args.sigmas.clone(),
        rho: train_cfg.rho,
        measures,
        ..DiagnoseConfig::default()
    };
    let pairs = vec![
        ("checkpoint".to_string(), args.checkpoint.display().to_string()),
        ("instances".to_string(), args.instances.to_string()),
        ("measure".to_string(), args.measure.join(",")),
        ("window".to_string(), args.window.to_string()),
        ("propagation_window".to_string(), args.propagation_window.to_string()),
        ("sigmas".to_string(), format!("{:?}", args.sigmas)),
    ];
    with_manifest(RunManifest::new("diagnose", pairs, args.seed, out), || {
        let summary = run_diagnostics(&ckpt.params, &task_config(&train_cfg), &cfg, out)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{}", serde_json::to_string(&summary).map_err(std::io::Error::from)?);
        Ok(())
    })
}

fn cmd_rollout(args: &RolloutArgs, out: &Path) -> Result<(), CliError> {
    let (cfg, ckpt) = match &args.checkpoint {
        Some(path) => {
            if !args.config.is_untouched() {
                return Err(CliError::Config("config flags conflict with --checkpoint".into()));
            }
            let ckpt = load_ckpt(path)?;
            (TrainConfig::from_text(&ckpt.config_echo)?, Some(ckpt))
        }
        None => (args.config.resolve()?, None),
    };
    if !(args.temperature > 0.0 && args.temperature.is_finite()) {
        return Err(CliError::Config("--temperature must be > 0".into()));
    }
    let mut pairs = config_pairs(&cfg.to_text());
    pairs.push(("prompts".into(), args.prompts.to_string()));
    pairs.push(("rollout_temperature".into(), args.temperature.to_string()));
    with_manifest(RunManifest::new("rollout", pairs, cfg.seed, out), || {
        let params = match ckpt {
            Some(c) => c.params,
            None => Trainer::new(cfg.clone())?.params,
        };
        let task = task_config(&cfg);
        let groups = (0..args.prompts)
            .map(|p| {
                let inst = make_task_instance(&mut substream(cfg.seed, "rollout-prompt", &[p]), &task, p);
                rollout_group(&params, &inst, cfg.group_size, Temperature::Value(args.temperature), cfg.seed, &[u64::MAX, p])
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let file = fs::File::create(out.join("trajectories.jsonl"))?;
        dump_trajectories(&groups, std::io::BufWriter::new(file)).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {n} workers");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &out_dir(&cli.out, "train")),
        Command::VerifyTheory(a) => cmd_verify(a, &out_dir(&cli.out, "verify-theory")),
        Command::Diagnose(a) => cmd_diagnose(a, &out_dir(&cli.out, "diagnose")),
        Command::Rollout(a) => cmd_rollout(a, &out_dir(&cli.out, "rollout")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
