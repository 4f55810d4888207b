//! Run configuration: a line-oriented `key = value` file with `#` comments.

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::fusion::{format_schedule, parse_schedule, FusionConfig, FusionMode, ModelConfig};
use crate::gnn::GnnConfig;
use crate::plm::PlmConfig;
use crate::protein::{Level, Task};

/// Cutoffs accepted without a warning.
pub const STANDARD_CUTOFFS: [f64; 4] = [4.0, 6.0, 8.0, 10.0];

/// Every recognized key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "task",
    "mode",
    "level",
    "cutoff",
    "lr",
    "batch_size",
    "epochs",
    "dropout",
    "gnn_layers",
    "plm_layers",
    "hidden_dim",
    "plm_dim",
    "plm_heads",
    "plm_ffn",
    "fusion_heads",
    "schedule",
    "rbf_count",
    "seqdist_dim",
    "num_classes",
    "ligand_dim",
    "gaussian_noise",
    "euler_noise",
    "noise_sigma",
    "max_len",
    "freeze_plm",
    "embedding_dim",
    "embeddings",
    "train",
    "val",
    "test",
    "checkpoint",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub mode: FusionMode,
    pub level: Level,
    pub cutoff: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub gnn_layers: usize,
    pub plm_layers: usize,
    pub hidden_dim: usize,
    pub plm_dim: usize,
    pub plm_heads: usize,
    pub plm_ffn: usize,
    pub fusion_heads: usize,
    /// `None` selects the default schedule.
    pub schedule: Option<Vec<(usize, usize)>>,
    pub rbf_count: usize,
    pub seqdist_dim: usize,
    pub num_classes: usize,
    pub ligand_dim: usize,
    pub gaussian_noise: bool,
    pub euler_noise: bool,
    pub noise_sigma: f64,
    pub max_len: usize,
    pub freeze_plm: bool,
    /// Width of precomputed embeddings; 0 trains the sequence encoder.
    pub embedding_dim: usize,
    /// Directory holding `<record id>.bhem` files.
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: Task::Mqa,
            mode: FusionMode::None,
            level: Level::Base,
            cutoff: 10.0,
            lr: 1e-3,
            batch_size: 4,
            epochs: 100,
            dropout: 0.0,
            gnn_layers: 2,
            plm_layers: 2,
            hidden_dim: 16,
            plm_dim: 16,
            plm_heads: 2,
            plm_ffn: 32,
            fusion_heads: 2,
            schedule: None,
            rbf_count: 8,
            seqdist_dim: 4,
            num_classes: 8,
            ligand_dim: 8,
            gaussian_noise: false,
            euler_noise: false,
            noise_sigma: 0.02,
            max_len: crate::plm::DEFAULT_MAX_LEN,
            freeze_plm: false,
            embedding_dim: 0,
            embeddings: None,
            train: None,
            val: None,
            test: None,
            checkpoint: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "task" => self.task = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "mode" => self.mode = v.parse()?,
            "level" => self.level = v.parse()?,
            "cutoff" => self.cutoff = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "gnn_layers" => self.gnn_layers = num(key, v)?,
            "plm_layers" => self.plm_layers = num(key, v)?,
            "hidden_dim" => self.hidden_dim = num(key, v)?,
            "plm_dim" => self.plm_dim = num(key, v)?,
            "plm_heads" => self.plm_heads = num(key, v)?,
            "plm_ffn" => self.plm_ffn = num(key, v)?,
            "fusion_heads" => self.fusion_heads = num(key, v)?,
            "schedule" => {
                self.schedule = if v == "default" {
                    None
                } else {
                    Some(parse_schedule(v)?)
                };
            }
            "rbf_count" => self.rbf_count = num(key, v)?,
            "seqdist_dim" => self.seqdist_dim = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "ligand_dim" => self.ligand_dim = num(key, v)?,
            "gaussian_noise" => self.gaussian_noise = boolean(key, v)?,
            "euler_noise" => self.euler_noise = boolean(key, v)?,
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            "freeze_plm" => self.freeze_plm = boolean(key, v)?,
            "embedding_dim" => self.embedding_dim = num(key, v)?,
            "embeddings" => self.embeddings = path(v),
            "train" => self.train = path(v),
            "val" => self.val = path(v),
            "test" => self.test = path(v),
            "checkpoint" => self.checkpoint = path(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "task" => self.task.to_string(),
            "mode" => self.mode.to_string(),
            "level" => self.level.to_string(),
            "cutoff" => self.cutoff.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "dropout" => self.dropout.to_string(),
            "gnn_layers" => self.gnn_layers.to_string(),
            "plm_layers" => self.plm_layers.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "plm_dim" => self.plm_dim.to_string(),
            "plm_heads" => self.plm_heads.to_string(),
            "plm_ffn" => self.plm_ffn.to_string(),
            "fusion_heads" => self.fusion_heads.to_string(),
            "schedule" => self
                .schedule
                .as_ref()
                .map_or("default".to_string(), |s| format_schedule(s)),
            "rbf_count" => self.rbf_count.to_string(),
            "seqdist_dim" => self.seqdist_dim.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "ligand_dim" => self.ligand_dim.to_string(),
            "gaussian_noise" => self.gaussian_noise.to_string(),
            "euler_noise" => self.euler_noise.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "max_len" => self.max_len.to_string(),
            "freeze_plm" => self.freeze_plm.to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "embeddings" => show_path(&self.embeddings),
            "train" => show_path(&self.train),
            "val" => show_path(&self.val),
            "test" => show_path(&self.test),
            "checkpoint" => show_path(&self.checkpoint),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in [`KEYS`] order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Range checks; a nonstandard cutoff only warns.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return Err(Error::Config(format!(
                "lr must lie in (0, 1), got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::Config(format!(
                "cutoff must be positive, got {}",
                self.cutoff
            )));
        }
        if !STANDARD_CUTOFFS.contains(&self.cutoff) {
            warn!(
                "cutoff {} is outside the usual {{4, 6, 8, 10}}",
                self.cutoff
            );
        }
        if self.embeddings.is_some() != (self.embedding_dim > 0) {
            return Err(Error::Config(
                "embeddings and embedding_dim must be set together".into(),
            ));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            task: self.task,
            num_classes: self.num_classes,
            plm: PlmConfig {
                d_model: self.plm_dim,
                num_layers: self.plm_layers,
                num_heads: self.plm_heads,
                ffn_dim: self.plm_ffn,
                max_len: self.max_len,
                dropout_p: self.dropout,
                ..PlmConfig::default()
            },
            gnn: GnnConfig {
                hidden_dim: self.hidden_dim,
                num_layers: self.gnn_layers,
                rbf_count: self.rbf_count,
                cutoff: self.cutoff,
                level: self.level,
                seqdist_dim: self.seqdist_dim,
                gaussian_noise: self.gaussian_noise,
                euler_noise: self.euler_noise,
                noise_sigma: self.noise_sigma,
                dropout_p: self.dropout,
            },
            fusion: FusionConfig {
                mode: self.mode,
                num_heads: self.fusion_heads,
                schedule: self.schedule.clone(),
            },
            precomputed_dim: (self.embedding_dim > 0).then_some(self.embedding_dim),
            ligand_dim: self.ligand_dim,
            head_dropout: self.dropout,
        }
    }
}
