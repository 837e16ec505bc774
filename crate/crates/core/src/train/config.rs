//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "rapo_g")]
    RapoG,
    #[serde(rename = "rapo_d")]
    RapoD,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Grpo => "grpo",
            Variant::RapoG => "rapo_g",
            Variant::RapoD => "rapo_d",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "grpo" => Ok(Variant::Grpo),
            "rapo" | "rapo_g" => Ok(Variant::RapoG),
            "rapo_d" | "dapo" => Ok(Variant::RapoD),
            other => Err(TrainError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Anchor fraction ρ.
    pub rho: f64,
    /// Visual-dependence coefficient γ.
    pub gamma: f64,
    /// Window length w.
    pub window: usize,
    /// Reference-KL coefficient β.
    pub beta: f64,
    /// `None` falls back to the variant default (0.20 everywhere).
    pub clip_low: Option<f64>,
    /// `None` falls back to the variant default (0.28 for RAPO_D, else 0.20).
    pub clip_high: Option<f64>,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub temperature: f64,
    pub warmup_steps: u64,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
    pub chain_len: usize,
    pub n_distractors: usize,
    pub freeze_vision: bool,
    /// Init std of the vision embedding rows; frozen rows need to be salient.
    pub vision_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::RapoG,
            rho: 0.2,
            gamma: 0.01,
            window: 3,
            beta: 0.02,
            clip_low: None,
            clip_high: None,
            group_size: 5,
            prompts_per_step: 16,
            lr: 1e-3,
            steps: 300,
            seed: 0,
            temperature: 1.0,
            warmup_steps: 400,
            warmup_lr: 1e-2,
            warmup_batch: 16,
            chain_len: 9,
            n_distractors: 4,
            freeze_vision: true,
            vision_init_std: 0.6,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "rho",
    "gamma",
    "window",
    "beta",
    "clip",
    "clip_low",
    "clip_high",
    "group_size",
    "prompts_per_step",
    "lr",
    "steps",
    "seed",
    "temperature",
    "warmup_steps",
    "warmup_lr",
    "warmup_batch",
    "chain_len",
    "n_distractors",
    "freeze_vision",
    "vision_init_std",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("bad value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub fn clip(&self) -> (f64, f64) {
        let high_default = if self.variant == Variant::RapoD { 0.28 } else { 0.20 };
        (self.clip_low.unwrap_or(0.20), self.clip_high.unwrap_or(high_default))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim();
        match key.trim() {
            "variant" => self.variant = value.parse()?,
            "rho" => self.rho = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "clip" => {
                let c: f64 = parse(key, value)?;
                self.clip_low = Some(c);
                self.clip_high = Some(c);
            }
            "clip_low" => self.clip_low = Some(parse(key, value)?),
            "clip_high" => self.clip_high = Some(parse(key, value)?),
            "group_size" => self.group_size = parse(key, value)?,
            "prompts_per_step" => self.prompts_per_step = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "warmup_lr" => self.warmup_lr = parse(key, value)?,
            "warmup_batch" => self.warmup_batch = parse(key, value)?,
            "chain_len" => self.chain_len = parse(key, value)?,
            "n_distractors" => self.n_distractors = parse(key, value)?,
            "freeze_vision" => self.freeze_vision = parse(key, value)?,
            "vision_init_std" => self.vision_init_std = parse(key, value)?,
            other => return Err(TrainError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must be in (0, 1], got {}", self.rho));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.window < 1 {
            return bad("window must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        let (lo, hi) = self.clip();
        if !(lo > 0.0 && lo < 1.0 && hi > 0.0 && hi.is_finite()) {
            return bad(format!("clip range ({lo}, {hi}) invalid"));
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2".into());
        }
        if self.prompts_per_step < 1 {
            return bad("prompts_per_step must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return bad("learning rates must be finite and >= 0".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0".into());
        }
        if !(self.vision_init_std >= 0.0 && self.vision_init_std.is_finite()) {
            return bad("vision_init_std must be finite and >= 0".into());
        }
        if self.warmup_batch < 1 {
            return bad("warmup_batch must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let (lo, hi) = self.clip();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("variant", self.variant.to_string());
        put("rho", format!("{:?}", self.rho));
        put("gamma", format!("{:?}", self.gamma));
        put("window", self.window.to_string());
        put("beta", format!("{:?}", self.beta));
        put("clip_low", format!("{lo:?}"));
        put("clip_high", format!("{hi:?}"));
        put("group_size", self.group_size.to_string());
        put("prompts_per_step", self.prompts_per_step.to_string());
        put("lr", format!("{:?}", self.lr));
        put("steps", self.steps.to_string());
        put("seed", self.seed.to_string());
        put("temperature", format!("{:?}", self.temperature));
        put("warmup_steps", self.warmup_steps.to_string());
        put("warmup_lr", format!("{:?}", self.warmup_lr));
        put("warmup_batch", self.warmup_batch.to_string());
        put("chain_len", self.chain_len.to_string());
        put("n_distractors", self.n_distractors.to_string());
        put("freeze_vision", self.freeze_vision.to_string());
        put("vision_init_std", format!("{:?}", self.vision_init_std));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.clip(), (0.2, 0.2));
        let d = TrainConfig {
            variant: Variant::RapoD,
            ..c
        };
        assert_eq!(d.clip(), (0.2, 0.28));
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("variant = rapo_d\ngamma = 0.1 # comment\n\nrho=1.0\nseed = 7").unwrap();
        assert_eq!(c.variant, Variant::RapoD);
        assert_eq!(c.gamma, 0.1);
        assert_eq!(c.rho, 1.0);
        assert_eq!(c.seed, 7);
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.clip(), c.clip());
    }

    #[test]
    fn invalid_input_is_rejected() {
        assert!(TrainConfig::from_text("rho = 0").is_err());
        assert!(TrainConfig::from_text("gamma = -1").is_err());
        assert!(TrainConfig::from_text("window = 0").is_err());
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("rho 0.2").is_err());
        assert!(TrainConfig::from_text("variant = ppo").is_err());
        assert!(TrainConfig::from_text("group_size = 1").is_err());
    }

    #[test]
    fn every_listed_key_is_settable() {
        let mut c = TrainConfig::default();
        for k in CONFIG_KEYS {
            let v = match *k {
                "variant" => "grpo",
                "freeze_vision" => "false",
                "rho" | "gamma" | "beta" | "clip" | "clip_low" | "clip_high" | "lr" | "warmup_lr"
                | "temperature" | "vision_init_std" => "0.5",
                _ => "3",
            };
            c.set(k, v).unwrap();
        }
    }
}
