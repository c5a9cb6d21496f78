//! Run configuration: TOML with `[model]`, `[train]`, `[data]` and `[kb]`
//! sections. Every key is optional and falls back to the library defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use kbsg_core::config::{ImageConfig, ModelConfig};
use kbsg_core::graphgen::LossWeights;
use kbsg_core::model::ProposalConfig;
use kbsg_core::scene::LabelSpace;
use kbsg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub memory_dim: usize,
    pub embed_dim: usize,
    pub fact_hidden: usize,
    pub attention_hidden: usize,
    pub memory_passes: usize,
    pub refine_iters: usize,
    pub cluster_iou: f64,
    pub kb: bool,
    pub gan: bool,
    pub out_res: usize,
    pub start_res: usize,
    pub noise_channels: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub layout_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let i = m.image;
        Self {
            feature_dim: m.feature_dim,
            memory_dim: m.memory_dim,
            embed_dim: m.embed_dim,
            fact_hidden: m.fact_hidden,
            attention_hidden: m.attention_hidden,
            memory_passes: m.memory_passes,
            refine_iters: m.refine_iters,
            cluster_iou: m.cluster_iou,
            kb: m.kb,
            gan: m.gan,
            out_res: i.out_res,
            start_res: i.start_res,
            noise_channels: i.noise_channels,
            gen_channels: i.gen_channels,
            disc_channels: i.disc_channels,
            layout_dim: i.layout_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr_main: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_pretrain: f64,
    pub batch_pretrain: usize,
    pub pretrain_steps: usize,
    pub w_pred: f64,
    pub w_obj: f64,
    pub w_reg: f64,
    pub gan_weight: f64,
    pub lambda_pixel: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Write a checkpoint every this many joint steps (0: only at the end).
    pub save_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            steps: t.steps,
            batch: t.batch,
            lr_main: t.lr_main,
            lr_decay: t.lr_decay,
            milestones: t.milestones,
            lr_pretrain: t.lr_pretrain,
            batch_pretrain: t.batch_pretrain,
            pretrain_steps: t.pretrain_steps,
            w_pred: t.weights.pred,
            w_obj: t.weights.obj,
            w_reg: t.weights.reg,
            gan_weight: t.gan_weight,
            lambda_pixel: t.lambda_pixel,
            weight_decay: t.weight_decay,
            dropout: t.dropout,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `scenes.jsonl` and `labels.json`.
    pub dir: PathBuf,
    /// Relative jitter of the stub proposals.
    pub jitter: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            jitter: ProposalConfig::default().jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbSection {
    /// Triples file; defaults to `kb.tsv` in the data directory.
    pub triples: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub top_k: usize,
}

impl Default for KbSection {
    fn default() -> Self {
        Self {
            triples: None,
            word_vectors: None,
            top_k: kbsg_core::kb::DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub kb: KbSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based; `None` for errors that are not tied to a location.
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().trim().to_string(),
        })?;
        cfg.train_config().validate().map_err(|e| ConfigError {
            line: None,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Canonical TOML rendering, used as the snapshot in run manifests.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves relative paths against `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data.dir);
        if let Some(p) = self.kb.triples.as_mut() {
            join(p);
        }
        if let Some(p) = self.kb.word_vectors.as_mut() {
            join(p);
        }
    }

    pub fn triples_path(&self) -> PathBuf {
        self.kb.triples.clone().unwrap_or_else(|| self.data.dir.join("kb.tsv"))
    }

    /// Model architecture for a dataset with the given label space.
    pub fn model_config(&self, labels: &LabelSpace) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            feature_dim: m.feature_dim,
            memory_dim: m.memory_dim,
            embed_dim: m.embed_dim,
            fact_hidden: m.fact_hidden,
            attention_hidden: m.attention_hidden,
            top_k: self.kb.top_k,
            memory_passes: m.memory_passes,
            refine_iters: m.refine_iters,
            num_classes: labels.num_classes(),
            num_predicates: labels.num_predicates(),
            cluster_iou: m.cluster_iou,
            kb: m.kb,
            gan: m.gan,
            image: ImageConfig {
                out_res: m.out_res,
                start_res: m.start_res,
                noise_channels: m.noise_channels,
                gen_channels: m.gen_channels,
                disc_channels: m.disc_channels,
                layout_dim: m.layout_dim,
                lambda_pixel: self.train.lambda_pixel,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr_pretrain: t.lr_pretrain,
            batch_pretrain: t.batch_pretrain,
            pretrain_steps: t.pretrain_steps,
            lr_main: t.lr_main,
            lr_decay: t.lr_decay,
            milestones: t.milestones.clone(),
            steps: t.steps,
            batch: t.batch,
            weights: LossWeights {
                pred: t.w_pred,
                obj: t.w_obj,
                reg: t.w_reg,
            },
            gan_weight: t.gan_weight,
            lambda_pixel: t.lambda_pixel,
            weight_decay: t.weight_decay,
            dropout: t.dropout,
            seed: t.seed,
        }
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            jitter: self.data.jitter,
            seed: self.train.seed,
        }
    }
}
