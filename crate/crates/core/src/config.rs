//! Model and training configuration, flat `key = value` text files and
//! presets.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stmixer_tensor::AdamWConfig;

use crate::backbone::BackboneKind;
use crate::decoder::{DecoderConfig, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::longterm::LongTermConfig;
use crate::losses::LossWeights;
use crate::mixer::MixStrategy;
use crate::sampler::{SamplingMode, TemporalMode};
use crate::synthdata::{DatasetSpec, GeneratorConfig, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Short,
    Long,
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Self::Short),
            "long" => Ok(Self::Long),
            _ => Err(Error::config(format!("unknown phase `{s}`"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Short => "short",
            Self::Long => "long",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetLayout {
    /// Independent clips.
    Clips,
    /// Videos of `clips_per_video` consecutive clips.
    LongVideos,
}

impl FromStr for DatasetLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clips" => Ok(Self::Clips),
            "long_videos" => Ok(Self::LongVideos),
            _ => Err(Error::config(format!("unknown dataset layout `{s}`"))),
        }
    }
}

impl std::fmt::Display for DatasetLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Clips => "clips",
            Self::LongVideos => "long_videos",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub backbone_width: usize,
    pub dim: usize,
    pub queries: usize,
    pub stages: usize,
    pub attention_heads: usize,
    pub groups: usize,
    pub points: usize,
    pub out_points: usize,
    pub out_frames: usize,
    pub sampling: SamplingMode,
    pub temporal: TemporalMode,
    pub strategy: MixStrategy,
    pub ffn_hidden: usize,
    pub long_k: usize,
    pub long_window: usize,
    pub long_layers: usize,
    pub long_heads: usize,
    pub slot_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Hierarchical,
            backbone_width: 8,
            dim: 32,
            queries: 8,
            stages: 3,
            attention_heads: 4,
            groups: 4,
            points: 8,
            out_points: 32,
            out_frames: 32,
            sampling: SamplingMode::Adaptive,
            temporal: TemporalMode::Copy,
            strategy: MixStrategy::Dual,
            ffn_hidden: 64,
            long_k: 3,
            long_window: 4,
            long_layers: 3,
            long_heads: 4,
            slot_embedding: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: GeneratorConfig,
    pub phase: Phase,
    pub layout: DatasetLayout,
    pub data_seed: u64,
    /// Clips, or videos for the long-video layout.
    pub train_count: usize,
    pub eval_seed: u64,
    pub eval_count: usize,
    pub clips_per_video: usize,
    pub seed: u64,
    pub steps: usize,
    /// Clips whose gradients are summed per optimizer step.
    pub accumulate: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossWeights,
    /// Steps between train-set mAP evaluations; 0 disables them.
    pub eval_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Every key accepted in a config file, in echo order.
pub const KEYS: &[&str] = &[
    "phase",
    "seed",
    "steps",
    "accumulate",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "grad_clip",
    "eval_every",
    "threshold",
    "loss.cls",
    "loss.l1",
    "loss.giou",
    "loss.act",
    "data.layout",
    "data.seed",
    "data.train_count",
    "data.eval_seed",
    "data.eval_count",
    "data.clips_per_video",
    "data.frames",
    "data.height",
    "data.width",
    "data.min_actors",
    "data.max_actors",
    "data.min_size",
    "data.max_size",
    "data.near_factor",
    "data.noise",
    "data.identities",
    "model.backbone",
    "model.backbone_width",
    "model.dim",
    "model.queries",
    "model.stages",
    "model.attention_heads",
    "model.groups",
    "model.points",
    "model.out_points",
    "model.out_frames",
    "model.sampling",
    "model.temporal",
    "model.strategy",
    "model.ffn_hidden",
    "model.long_k",
    "model.long_window",
    "model.long_layers",
    "model.long_heads",
    "model.slot_embedding",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e: Error| Error::config(format!("`{key}`: {e}")))
}

impl TrainConfig {
    /// Small from-scratch setup for a single CPU core.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            data: GeneratorConfig::default(),
            phase: Phase::Short,
            layout: DatasetLayout::Clips,
            data_seed: 1,
            train_count: 16,
            eval_seed: 2,
            eval_count: 16,
            clips_per_video: 6,
            seed: 0,
            steps: 500,
            accumulate: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            loss: LossWeights::default(),
            eval_every: 100,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Reference hyperparameters of the full-size detector. Not trainable
    /// on a CPU; kept as a record of the reference setting.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.model.dim = 256;
        c.model.queries = 100;
        c.model.stages = 6;
        c.model.points = 32;
        c.model.out_points = 128;
        c.model.out_frames = 32;
        c.model.ffn_hidden = 2048;
        c.model.attention_heads = 8;
        c.model.long_k = 5;
        c.model.long_window = 60;
        c.model.long_heads = 8;
        c.model.slot_embedding = false;
        c.lr = 2e-5;
        c.accumulate = 16;
        c.grad_clip = 0.0;
        c
    }

    /// Adaptive versus fixed-grid comparison on a held-out set; `seed`
    /// selects the initialization and both datasets.
    pub fn ablation(seed: u64) -> Self {
        let mut c = Self::desk();
        c.seed = seed;
        c.data_seed = 100 + 2 * seed;
        c.eval_seed = 101 + 2 * seed;
        c.train_count = 128;
        c.eval_count = 32;
        c.steps = 900;
        c.eval_every = 0;
        c
    }

    /// Long-video data for the long-term comparison.
    pub fn long_probe(seed: u64) -> Self {
        let mut c = Self::desk();
        c.seed = seed;
        c.data_seed = 200 + 2 * seed;
        c.eval_seed = 201 + 2 * seed;
        c.layout = DatasetLayout::LongVideos;
        c.train_count = 16;
        c.eval_count = 8;
        c.clips_per_video = 8;
        c.steps = 900;
        c.eval_every = 0;
        c
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "ablation" => Ok(Self::ablation(0)),
            "long_probe" => Ok(Self::long_probe(0)),
            _ => Err(Error::config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "phase" => self.phase = parse_enum(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "accumulate" => self.accumulate = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "loss.cls" => self.loss.cls = parse(key, v)?,
            "loss.l1" => self.loss.l1 = parse(key, v)?,
            "loss.giou" => self.loss.giou = parse(key, v)?,
            "loss.act" => self.loss.act = parse(key, v)?,
            "data.layout" => self.layout = parse_enum(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.train_count" => self.train_count = parse(key, v)?,
            "data.eval_seed" => self.eval_seed = parse(key, v)?,
            "data.eval_count" => self.eval_count = parse(key, v)?,
            "data.clips_per_video" => self.clips_per_video = parse(key, v)?,
            "data.frames" => d.frames = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.min_actors" => d.min_actors = parse(key, v)?,
            "data.max_actors" => d.max_actors = parse(key, v)?,
            "data.min_size" => d.min_size = parse(key, v)?,
            "data.max_size" => d.max_size = parse(key, v)?,
            "data.near_factor" => d.near_factor = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.identities" => d.identities = parse(key, v)?,
            "model.backbone" => m.backbone = parse_enum(key, v)?,
            "model.backbone_width" => m.backbone_width = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.queries" => m.queries = parse(key, v)?,
            "model.stages" => m.stages = parse(key, v)?,
            "model.attention_heads" => m.attention_heads = parse(key, v)?,
            "model.groups" => m.groups = parse(key, v)?,
            "model.points" => m.points = parse(key, v)?,
            "model.out_points" => m.out_points = parse(key, v)?,
            "model.out_frames" => m.out_frames = parse(key, v)?,
            "model.sampling" => m.sampling = parse_enum(key, v)?,
            "model.temporal" => m.temporal = parse_enum(key, v)?,
            "model.strategy" => m.strategy = parse_enum(key, v)?,
            "model.ffn_hidden" => m.ffn_hidden = parse(key, v)?,
            "model.long_k" => m.long_k = parse(key, v)?,
            "model.long_window" => m.long_window = parse(key, v)?,
            "model.long_layers" => m.long_layers = parse(key, v)?,
            "model.long_heads" => m.long_heads = parse(key, v)?,
            "model.slot_embedding" => m.slot_embedding = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, d) = (&self.model, &self.data);
        Some(match key {
            "phase" => self.phase.to_string(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "accumulate" => self.accumulate.to_string(),
            "lr" => format!("{:?}", self.lr),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "eps" => format!("{:?}", self.eps),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "eval_every" => self.eval_every.to_string(),
            "threshold" => format!("{:?}", self.threshold),
            "loss.cls" => format!("{:?}", self.loss.cls),
            "loss.l1" => format!("{:?}", self.loss.l1),
            "loss.giou" => format!("{:?}", self.loss.giou),
            "loss.act" => format!("{:?}", self.loss.act),
            "data.layout" => self.layout.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.train_count" => self.train_count.to_string(),
            "data.eval_seed" => self.eval_seed.to_string(),
            "data.eval_count" => self.eval_count.to_string(),
            "data.clips_per_video" => self.clips_per_video.to_string(),
            "data.frames" => d.frames.to_string(),
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.min_actors" => d.min_actors.to_string(),
            "data.max_actors" => d.max_actors.to_string(),
            "data.min_size" => format!("{:?}", d.min_size),
            "data.max_size" => format!("{:?}", d.max_size),
            "data.near_factor" => format!("{:?}", d.near_factor),
            "data.noise" => format!("{:?}", d.noise),
            "data.identities" => d.identities.to_string(),
            "model.backbone" => m.backbone.to_string(),
            "model.backbone_width" => m.backbone_width.to_string(),
            "model.dim" => m.dim.to_string(),
            "model.queries" => m.queries.to_string(),
            "model.stages" => m.stages.to_string(),
            "model.attention_heads" => m.attention_heads.to_string(),
            "model.groups" => m.groups.to_string(),
            "model.points" => m.points.to_string(),
            "model.out_points" => m.out_points.to_string(),
            "model.out_frames" => m.out_frames.to_string(),
            "model.sampling" => m.sampling.to_string(),
            "model.temporal" => m.temporal.to_string(),
            "model.strategy" => m.strategy.to_string(),
            "model.ffn_hidden" => m.ffn_hidden.to_string(),
            "model.long_k" => m.long_k.to_string(),
            "model.long_window" => m.long_window.to_string(),
            "model.long_layers" => m.long_layers.to_string(),
            "model.long_heads" => m.long_heads.to_string(),
            "model.slot_embedding" => m.slot_embedding.to_string(),
            _ => return None,
        })
    }

    /// Canonical `key = value` text covering every key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Parses `key = value` lines over a base config. A `preset = name`
    /// line, if present, must come first and selects the base.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut first = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if !first {
                    return Err(Error::config("`preset` must be the first entry"));
                }
                cfg = Self::by_name(value)?;
            } else {
                cfg.set(key, value)
                    .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
            }
            first = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let m = &self.model;
        let positive = [
            ("model.backbone_width", m.backbone_width),
            ("model.dim", m.dim),
            ("model.queries", m.queries),
            ("model.stages", m.stages),
            ("model.attention_heads", m.attention_heads),
            ("model.groups", m.groups),
            ("model.points", m.points),
            ("model.out_points", m.out_points),
            ("model.out_frames", m.out_frames),
            ("model.ffn_hidden", m.ffn_hidden),
            ("model.long_k", m.long_k),
            ("model.long_layers", m.long_layers),
            ("model.long_heads", m.long_heads),
            ("accumulate", self.accumulate),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("`{k}` must be positive")));
        }
        if m.dim % m.groups != 0 || m.dim % m.attention_heads != 0 || (2 * m.dim) % m.long_heads != 0 {
            return Err(Error::config(
                "model.dim must be divisible by groups and attention heads, 2·dim by long heads",
            ));
        }
        if m.long_k > m.queries {
            return Err(Error::config("model.long_k cannot exceed model.queries"));
        }
        if m.long_window < 2 || m.long_window % 2 != 0 {
            return Err(Error::config("model.long_window must be even and at least 2"));
        }
        if self.data.height % 32 != 0 || self.data.width % 32 != 0 {
            return Err(Error::config("frame height and width must be multiples of 32"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("lr must be positive, weight_decay and grad_clip non-negative"));
        }
        if self.layout == DatasetLayout::LongVideos && self.clips_per_video == 0 {
            return Err(Error::config("data.clips_per_video must be positive"));
        }
        Ok(())
    }

    pub fn decoder(&self) -> DecoderConfig {
        let m = &self.model;
        DecoderConfig {
            dim: m.dim,
            queries: m.queries,
            stages: m.stages,
            attention_heads: m.attention_heads,
            groups: m.groups,
            points: m.points,
            frames: self.data.frames,
            out_points: m.out_points,
            out_frames: m.out_frames,
            sampling: m.sampling,
            temporal: m.temporal,
            strategy: m.strategy,
            ffn_hidden: m.ffn_hidden,
            classes: NUM_CLASSES,
            frame: (self.data.width, self.data.height),
        }
    }

    pub fn longterm(&self) -> LongTermConfig {
        let m = &self.model;
        LongTermConfig {
            dim: 2 * m.dim,
            k: m.long_k,
            window: m.long_window,
            layers: m.long_layers,
            heads: m.long_heads,
            hidden: m.ffn_hidden,
            classes: NUM_CLASSES,
            slot_embedding: m.slot_embedding,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Checks that clips drawn with `data` fit a model trained under this
    /// config; the error lists every mismatched field.
    pub fn check_data(&self, data: &GeneratorConfig) -> Result<()> {
        let pairs = [
            ("data.frames", self.data.frames, data.frames),
            ("data.height", self.data.height, data.height),
            ("data.width", self.data.width, data.width),
        ];
        let bad: Vec<String> = pairs
            .iter()
            .filter(|(_, a, b)| a != b)
            .map(|(k, a, b)| format!("{k} (model {a}, data {b})"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("data does not fit the model: {}", bad.join(", "))))
        }
    }

    pub fn train_spec(&self) -> DatasetSpec {
        self.spec(self.data_seed, self.train_count)
    }

    pub fn eval_spec(&self) -> DatasetSpec {
        self.spec(self.eval_seed, self.eval_count)
    }

    fn spec(&self, seed: u64, count: usize) -> DatasetSpec {
        match self.layout {
            DatasetLayout::Clips => DatasetSpec::clips(seed, count, self.data.clone()),
            DatasetLayout::LongVideos => {
                DatasetSpec::long_videos(seed, count, self.clips_per_video, self.data.clone())
            }
        }
    }
}
