//! The flat run configuration: task, model and training keys in one
//! `key = value` namespace.

use std::fs;
use std::path::Path;

use amoe::kv::{self, KeyValue};
use amoe::synthdata::TaskConfig;
use amoe::trainpipe::TrainConfig;
use amoe::{ModelConfig, Stage, Variant};
use anyhow::{bail, Context, Result};

/// File name of the resolved config written next to every output.
pub const CONFIG_FILE: &str = "config.txt";

/// Training keys. Everything not listed here comes from [`TrainConfig::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    /// Model initialization and batch shuffling.
    pub seed: u64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let one = TrainConfig::new(Stage::One);
        let two = TrainConfig::new(Stage::Two);
        Self {
            seed: two.seed,
            steps_stage1: one.steps,
            steps_stage2: two.steps,
            lr_stage1: one.adam.lr,
            lr_stage2: two.adam.lr,
            batch_size: two.batch_size,
            eval_every: two.eval_every,
            eval_samples: two.eval_samples,
            clip_norm: two.clip_norm,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .ok()
        .with_context(|| format!("{key}: cannot parse {value:?}"))
}

impl TrainSettings {
    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("steps_stage1", self.steps_stage1.to_string()),
            ("steps_stage2", self.steps_stage2.to_string()),
            ("lr_stage1", self.lr_stage1.to_string()),
            ("lr_stage2", self.lr_stage2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "steps_stage1" => self.steps_stage1 = parse(key, value)?,
            "steps_stage2" => self.steps_stage2 = parse(key, value)?,
            "lr_stage1" => self.lr_stage1 = parse(key, value)?,
            "lr_stage2" => self.lr_stage2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    /// `vocab_size` as written by the user, checked against the task.
    explicit_vocab: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        let model = ModelConfig::new(task.vocab().size());
        Self {
            task,
            model,
            train: TrainSettings::default(),
            explicit_vocab: None,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `--set` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("in --set {o}"))?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let pairs = kv::split_lines(text).map_err(|(line, msg)| anyhow::anyhow!("line {line}: {msg}"))?;
        for (line, k, v) in pairs {
            self.set(&k, &v).with_context(|| format!("line {line}"))?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "vocab_size" {
            self.explicit_vocab = Some(parse(key, value)?);
            return Ok(());
        }
        if self.train.set(key, value)? || self.task.set_kv(key, value)? || self.model.set_kv(key, value)? {
            return Ok(());
        }
        bail!("unknown config key `{key}`")
    }

    /// Derives the vocabulary size from the task and validates everything.
    pub fn resolve(&mut self) -> Result<()> {
        self.task.validate()?;
        let vocab = self.task.vocab().size();
        if let Some(v) = self.explicit_vocab {
            if v != vocab {
                bail!("vocab_size = {v} does not match the {vocab} tokens implied by the task settings");
            }
        }
        self.model.vocab_size = vocab;
        if self.model.adapter.variant == Variant::LoraOnly && self.model.adapter.n_experts != 1 {
            bail!(
                "variant = lora uses a single expert; set n_experts = 1 (got {})",
                self.model.adapter.n_experts
            );
        }
        if self.model.max_seq < self.task.max_rendered_len() {
            bail!(
                "max_seq = {} is shorter than the longest rendered sample ({})",
                self.model.max_seq,
                self.task.max_rendered_len()
            );
        }
        self.model.validate()?;
        self.train_config(Stage::One).validate()?;
        self.train_config(Stage::Two).validate()?;
        Ok(())
    }

    /// The same settings with another adapter variant; LoRA gets one expert.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut out = self.clone();
        out.model.adapter.variant = variant;
        if variant == Variant::LoraOnly {
            out.model.adapter.n_experts = 1;
        }
        out
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let mut tc = TrainConfig::new(stage);
        let t = &self.train;
        let (steps, lr) = match stage {
            Stage::One => (t.steps_stage1, t.lr_stage1),
            Stage::Two => (t.steps_stage2, t.lr_stage2),
        };
        tc.steps = steps;
        tc.adam.lr = lr;
        tc.seed = t.seed;
        tc.batch_size = t.batch_size;
        tc.eval_every = t.eval_every;
        tc.eval_samples = t.eval_samples;
        tc.clip_norm = t.clip_norm;
        tc
    }

    /// Every key with its resolved value, task first.
    pub fn render(&self) -> String {
        let mut pairs = self.task.to_kv();
        pairs.extend(self.model.to_kv());
        pairs.extend(self.train.to_kv());
        kv::render(&pairs)
    }

    /// Writes the resolved config into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}
