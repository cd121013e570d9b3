//! Training configuration and its flat `key = value` text form.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::str::FromStr;

use crate::error::{contract, Result};
use crate::harness::corpus::{CorpusSpec, DurationLaw};
use crate::numerics::AdamWConfig;

/// Architecture widths of the toy model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub key_width: usize,
    pub duration_filters: usize,
    pub noise_width: usize,
    pub speaker_width: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 2,
            blocks: 4,
            ffn: 64,
            flow_layers: 4,
            flow_hidden: 16,
            key_width: 8,
            duration_filters: 32,
            noise_width: 2,
            speaker_width: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps_main: usize,
    pub steps_duration: usize,
    /// Instances per optimizer step.
    pub batch_size: usize,
    /// Main-phase steps between alignment evaluations.
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
    /// Annealed noise in the alignment search; off forces scale 0.
    pub alignment_noise: bool,
    /// Attention block inside the flows; off zeroes and freezes it.
    pub transformer: bool,
    /// Adversarial duration training; off trains a deterministic
    /// predictor with the MSE term only.
    pub adversarial: bool,
    /// Whether flows and the duration generator also see the speaker vector.
    pub speaker_conditioning: bool,
    /// Standard deviation of Gaussian jitter added to frames in the main phase.
    pub jitter: f64,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps_main: 3000,
            steps_duration: 1000,
            batch_size: 4,
            eval_every: 250,
            optimizer: AdamWConfig::default(),
            alignment_noise: true,
            transformer: true,
            adversarial: true,
            speaker_conditioning: true,
            jitter: 0.05,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_main == 0 || self.steps_duration == 0 {
            return Err(contract("step counts must be positive"));
        }
        if self.steps_duration > self.steps_main {
            return Err(contract(
                "the duration phase must not be longer than the main phase",
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(contract("batch_size and eval_every must be positive"));
        }
        let o = &self.optimizer;
        let probabilities = [o.beta1, o.beta2];
        if !(o.lr > 0.0
            && o.eps > 0.0
            && o.weight_decay >= 0.0
            && o.epoch_decay > 0.0
            && o.epoch_decay <= 1.0)
            || probabilities.iter().any(|b| !(0.0..1.0).contains(b))
        {
            return Err(contract("optimizer settings out of range"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(contract("jitter must be finite and non-negative"));
        }
        let d = &self.dims;
        if [
            d.hidden,
            d.heads,
            d.blocks,
            d.ffn,
            d.flow_layers,
            d.flow_hidden,
            d.key_width,
            d.duration_filters,
        ]
        .contains(&0)
        {
            return Err(contract("model widths must be positive"));
        }
        Ok(())
    }
}

/// Everything a training run needs: model, optimizer and corpus settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

/// Every accepted key with its meaning, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed of every random stream in the run"),
    (
        "steps_main",
        "main-phase optimizer steps (encoder and flows)",
    ),
    ("steps_duration", "duration-phase steps; at most steps_main"),
    ("batch_size", "instances per optimizer step"),
    (
        "eval_every",
        "main-phase steps between alignment evaluations",
    ),
    ("lr", "AdamW learning rate"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("weight_decay", "decoupled weight decay"),
    ("eps", "AdamW denominator epsilon"),
    (
        "epoch_decay",
        "learning-rate factor applied once per pass over the data",
    ),
    (
        "alignment_noise",
        "true: annealed alignment noise; false: noise scale forced to 0",
    ),
    (
        "transformer",
        "true: attention block in the flows; false: bypassed and frozen",
    ),
    (
        "adversarial",
        "true: adversarial stochastic duration model; false: deterministic, MSE only",
    ),
    (
        "speaker_conditioning",
        "condition flows and duration generator on the speaker vector",
    ),
    (
        "jitter",
        "std of Gaussian jitter added to frames during the main phase",
    ),
    ("hidden", "text encoder width H"),
    ("heads", "attention heads per encoder block"),
    (
        "blocks",
        "encoder blocks; the speaker vector enters the third",
    ),
    ("ffn", "encoder feed-forward width"),
    ("flow_layers", "coupling layers in the flow stack"),
    ("flow_hidden", "coupling network width"),
    ("key_width", "query/key width of the flow attention"),
    (
        "duration_filters",
        "conv width of duration generator and discriminator",
    ),
    ("noise_width", "width Z of the duration noise z_d"),
    ("speaker_width", "speaker embedding width E"),
    ("corpus.vocab", "vocabulary size V"),
    ("corpus.channels", "frame channels C; must be even"),
    ("corpus.speakers", "number of speakers"),
    ("corpus.min_tokens", "shortest token sequence"),
    ("corpus.max_tokens", "longest token sequence"),
    ("corpus.instances", "training instances"),
    ("corpus.held_out", "held-out evaluation instances"),
    (
        "corpus.laws",
        "per-token duration ranges as min-max,min-max,...; empty for the default pattern",
    ),
    ("corpus.noise", "observation noise std"),
    ("corpus.prototype_scale", "std of prototype coordinates"),
    ("corpus.speaker_scale", "std of per-speaker frame offsets"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| contract(format!("invalid value {value:?} for key {key}")))
}

fn parse_laws(value: &str) -> Result<Vec<DurationLaw>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            let (lo, hi) = part
                .trim()
                .split_once('-')
                .ok_or_else(|| contract(format!("duration law {part:?} is not min-max")))?;
            Ok(DurationLaw {
                min: parse("corpus.laws", lo.trim())?,
                max: parse("corpus.laws", hi.trim())?,
            })
        })
        .collect()
}

impl ExperimentConfig {
    fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        let o = &t.optimizer;
        let d = &t.dims;
        let c = &self.corpus;
        match key {
            "seed" => t.seed.to_string(),
            "steps_main" => t.steps_main.to_string(),
            "steps_duration" => t.steps_duration.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "lr" => format!("{:?}", o.lr),
            "beta1" => format!("{:?}", o.beta1),
            "beta2" => format!("{:?}", o.beta2),
            "weight_decay" => format!("{:?}", o.weight_decay),
            "eps" => format!("{:?}", o.eps),
            "epoch_decay" => format!("{:?}", o.epoch_decay),
            "alignment_noise" => t.alignment_noise.to_string(),
            "transformer" => t.transformer.to_string(),
            "adversarial" => t.adversarial.to_string(),
            "speaker_conditioning" => t.speaker_conditioning.to_string(),
            "jitter" => format!("{:?}", t.jitter),
            "hidden" => d.hidden.to_string(),
            "heads" => d.heads.to_string(),
            "blocks" => d.blocks.to_string(),
            "ffn" => d.ffn.to_string(),
            "flow_layers" => d.flow_layers.to_string(),
            "flow_hidden" => d.flow_hidden.to_string(),
            "key_width" => d.key_width.to_string(),
            "duration_filters" => d.duration_filters.to_string(),
            "noise_width" => d.noise_width.to_string(),
            "speaker_width" => d.speaker_width.to_string(),
            "corpus.vocab" => c.vocab.to_string(),
            "corpus.channels" => c.channels.to_string(),
            "corpus.speakers" => c.speakers.to_string(),
            "corpus.min_tokens" => c.min_tokens.to_string(),
            "corpus.max_tokens" => c.max_tokens.to_string(),
            "corpus.instances" => c.instances.to_string(),
            "corpus.held_out" => c.held_out.to_string(),
            "corpus.laws" => c
                .laws
                .iter()
                .map(|l| format!("{}-{}", l.min, l.max))
                .collect::<Vec<_>>()
                .join(","),
            "corpus.noise" => format!("{:?}", c.noise),
            "corpus.prototype_scale" => format!("{:?}", c.prototype_scale),
            "corpus.speaker_scale" => format!("{:?}", c.speaker_scale),
            _ => unreachable!("key table and serializer disagree on {key}"),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let c = &mut self.corpus;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "steps_main" => t.steps_main = parse(key, v)?,
            "steps_duration" => t.steps_duration = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "lr" => t.optimizer.lr = parse(key, v)?,
            "beta1" => t.optimizer.beta1 = parse(key, v)?,
            "beta2" => t.optimizer.beta2 = parse(key, v)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "eps" => t.optimizer.eps = parse(key, v)?,
            "epoch_decay" => t.optimizer.epoch_decay = parse(key, v)?,
            "alignment_noise" => t.alignment_noise = parse(key, v)?,
            "transformer" => t.transformer = parse(key, v)?,
            "adversarial" => t.adversarial = parse(key, v)?,
            "speaker_conditioning" => t.speaker_conditioning = parse(key, v)?,
            "jitter" => t.jitter = parse(key, v)?,
            "hidden" => t.dims.hidden = parse(key, v)?,
            "heads" => t.dims.heads = parse(key, v)?,
            "blocks" => t.dims.blocks = parse(key, v)?,
            "ffn" => t.dims.ffn = parse(key, v)?,
            "flow_layers" => t.dims.flow_layers = parse(key, v)?,
            "flow_hidden" => t.dims.flow_hidden = parse(key, v)?,
            "key_width" => t.dims.key_width = parse(key, v)?,
            "duration_filters" => t.dims.duration_filters = parse(key, v)?,
            "noise_width" => t.dims.noise_width = parse(key, v)?,
            "speaker_width" => t.dims.speaker_width = parse(key, v)?,
            "corpus.vocab" => c.vocab = parse(key, v)?,
            "corpus.channels" => c.channels = parse(key, v)?,
            "corpus.speakers" => c.speakers = parse(key, v)?,
            "corpus.min_tokens" => c.min_tokens = parse(key, v)?,
            "corpus.max_tokens" => c.max_tokens = parse(key, v)?,
            "corpus.instances" => c.instances = parse(key, v)?,
            "corpus.held_out" => c.held_out = parse(key, v)?,
            "corpus.laws" => c.laws = parse_laws(v)?,
            "corpus.noise" => c.noise = parse(key, v)?,
            "corpus.prototype_scale" => c.prototype_scale = parse(key, v)?,
            "corpus.speaker_scale" => c.speaker_scale = parse(key, v)?,
            _ => return Err(contract(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| contract(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(contract(format!("line {}: key {key} given twice", n + 1)));
            }
            config
                .set(key, value.trim())
                .map_err(|e| contract(format!("line {}: {e}", n + 1)))?;
            seen.push(key);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.corpus.validate()?;
        if !self.corpus.channels.is_multiple_of(2) {
            return Err(contract(
                "corpus.channels must be even for the coupling flows",
            ));
        }
        Ok(())
    }
}
