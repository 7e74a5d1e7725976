//! `key = value` configuration.
//!
//! Keys are namespaced (`model.*`, `data.*`, `pretrain.*`, `finetune.*`,
//! `train.*`). Unknown keys, duplicate keys and unparsable values are errors
//! naming the key. `#` starts a comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::aggregate::ImamConfig;
use crate::error::{Error, Result};
use crate::pointbranch::PointBranchConfig;
use crate::viewbranch::ViewCnnConfig;

use super::model::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PretrainPoint,
    PretrainView,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainPoint => "pretrain_point",
            Phase::PretrainView => "pretrain_view",
            Phase::Finetune => "finetune",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_point" => Ok(Phase::PretrainPoint),
            "pretrain_view" => Ok(Phase::PretrainView),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::config(format!(
                "unknown phase `{s}` (pretrain_point|pretrain_view|finetune)"
            ))),
        }
    }
}

/// Optimization settings of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, lr)` pairs with strictly increasing thresholds; the
    /// first threshold is 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Backbones are frozen for epochs `< freeze_backbones_until`.
    pub freeze_backbones_until: usize,
    pub seed: u64,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
}

impl TrainConfig {
    /// Learning rate at a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(t, _)| *t <= epoch)
            .last()
            .map_or(self.lr_schedule[0].1, |&(_, lr)| lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        check_schedule(&self.lr_schedule)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

fn check_schedule(s: &[(usize, f64)]) -> Result<()> {
    if s.is_empty() || s[0].0 != 0 {
        return Err(Error::config("lr_schedule must start at epoch 0"));
    }
    if s.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::config("lr_schedule thresholds must be strictly increasing"));
    }
    if s.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
        return Err(Error::config("lr_schedule rates must be finite and non-negative"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub point_dim: usize,
    pub edge_widths: Vec<usize>,
    pub knn_k: usize,
    pub view_widths: Vec<usize>,
    pub desc_dim: usize,
    pub fuse_hidden: usize,
    pub share_imam: bool,
    pub ablation: Variant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub points: usize,
    pub views: usize,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PhaseSettings,
    pub finetune: PhaseSettings,
    pub freeze_backbones_until: usize,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig {
                dim: 512,
                heads: 4,
                mlp_hidden: 128,
                blocks: 1,
                point_dim: 1024,
                edge_widths: vec![64, 64, 128],
                knn_k: 10,
                view_widths: vec![16, 32, 64],
                desc_dim: 512,
                fuse_hidden: 512,
                share_imam: false,
                ablation: Variant::Full,
            },
            data: DataConfig {
                points: 1024,
                views: 12,
                resolution: 32,
            },
            pretrain: PhaseSettings {
                epochs: 20,
                batch_size: 16,
                lr_schedule: vec![(0, 0.01)],
                weight_decay: 1e-3,
                momentum: 0.9,
            },
            finetune: PhaseSettings {
                epochs: 30,
                batch_size: 16,
                lr_schedule: vec![(0, 0.01), (10, 0.001)],
                weight_decay: 1e-5,
                momentum: 0.9,
            },
            freeze_backbones_until: 10,
            arcface_margin: 0.5,
            arcface_scale: 64.0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "model.dim",
    "model.heads",
    "model.mlp_hidden",
    "model.blocks",
    "model.point_dim",
    "model.edge_widths",
    "model.knn_k",
    "model.view_widths",
    "model.desc_dim",
    "model.fuse_hidden",
    "model.share_imam",
    "model.ablation",
    "data.points",
    "data.views",
    "data.resolution",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr_schedule",
    "pretrain.weight_decay",
    "pretrain.momentum",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.lr_schedule",
    "finetune.weight_decay",
    "finetune.momentum",
    "finetune.freeze_backbones_until",
    "finetune.arcface_margin",
    "finetune.arcface_scale",
    "train.seed",
];

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value `{v}` for key `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn parse_schedule(key: &str, v: &str) -> Result<Vec<(usize, f64)>> {
    v.split(',')
        .map(|pair| {
            let (t, lr) = pair
                .split_once(':')
                .ok_or_else(|| Error::config(format!("`{key}` entries must be epoch:lr, got `{pair}`")))?;
            Ok((parse_value(key, t.trim())?, parse_value(key, lr.trim())?))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn schedule_text(s: &[(usize, f64)]) -> String {
    s.iter().map(|(t, lr)| format!("{t}:{lr}")).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.dim" => m.dim = parse_value(key, v)?,
            "model.heads" => m.heads = parse_value(key, v)?,
            "model.mlp_hidden" => m.mlp_hidden = parse_value(key, v)?,
            "model.blocks" => m.blocks = parse_value(key, v)?,
            "model.point_dim" => m.point_dim = parse_value(key, v)?,
            "model.edge_widths" => m.edge_widths = parse_list(key, v)?,
            "model.knn_k" => m.knn_k = parse_value(key, v)?,
            "model.view_widths" => m.view_widths = parse_list(key, v)?,
            "model.desc_dim" => m.desc_dim = parse_value(key, v)?,
            "model.fuse_hidden" => m.fuse_hidden = parse_value(key, v)?,
            "model.share_imam" => m.share_imam = parse_value(key, v)?,
            "model.ablation" => m.ablation = v.parse()?,
            "data.points" => self.data.points = parse_value(key, v)?,
            "data.views" => self.data.views = parse_value(key, v)?,
            "data.resolution" => self.data.resolution = parse_value(key, v)?,
            "finetune.freeze_backbones_until" => self.freeze_backbones_until = parse_value(key, v)?,
            "finetune.arcface_margin" => self.arcface_margin = parse_value(key, v)?,
            "finetune.arcface_scale" => self.arcface_scale = parse_value(key, v)?,
            "train.seed" => self.seed = parse_value(key, v)?,
            _ => {
                let (ns, field) = key.split_once('.').unwrap_or((key, ""));
                let p = match ns {
                    "pretrain" => &mut self.pretrain,
                    "finetune" => &mut self.finetune,
                    _ => return Err(Error::config(format!("unknown config key `{key}`"))),
                };
                match field {
                    "epochs" => p.epochs = parse_value(key, v)?,
                    "batch_size" => p.batch_size = parse_value(key, v)?,
                    "lr_schedule" => p.lr_schedule = parse_schedule(key, v)?,
                    "weight_decay" => p.weight_decay = parse_value(key, v)?,
                    "momentum" => p.momentum = parse_value(key, v)?,
                    _ => return Err(Error::config(format!("unknown config key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Parses a config on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) && KEYS.contains(&k) {
                return Err(Error::config(format!("duplicate config key `{k}`")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Every key with its current value, in a stable order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "model.dim" => m.dim.to_string(),
                "model.heads" => m.heads.to_string(),
                "model.mlp_hidden" => m.mlp_hidden.to_string(),
                "model.blocks" => m.blocks.to_string(),
                "model.point_dim" => m.point_dim.to_string(),
                "model.edge_widths" => join(&m.edge_widths),
                "model.knn_k" => m.knn_k.to_string(),
                "model.view_widths" => join(&m.view_widths),
                "model.desc_dim" => m.desc_dim.to_string(),
                "model.fuse_hidden" => m.fuse_hidden.to_string(),
                "model.share_imam" => m.share_imam.to_string(),
                "model.ablation" => m.ablation.name().to_string(),
                "data.points" => self.data.points.to_string(),
                "data.views" => self.data.views.to_string(),
                "data.resolution" => self.data.resolution.to_string(),
                "finetune.freeze_backbones_until" => self.freeze_backbones_until.to_string(),
                "finetune.arcface_margin" => self.arcface_margin.to_string(),
                "finetune.arcface_scale" => self.arcface_scale.to_string(),
                "train.seed" => self.seed.to_string(),
                k => {
                    let (ns, field) = k.split_once('.').unwrap();
                    let p = if ns == "pretrain" { &self.pretrain } else { &self.finetune };
                    match field {
                        "epochs" => p.epochs.to_string(),
                        "batch_size" => p.batch_size.to_string(),
                        "lr_schedule" => schedule_text(&p.lr_schedule),
                        "weight_decay" => p.weight_decay.to_string(),
                        "momentum" => p.momentum.to_string(),
                        _ => unreachable!("key list out of sync: {k}"),
                    }
                }
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for phase in [Phase::PretrainPoint, Phase::Finetune] {
            self.train_config(phase).validate()?;
        }
        let m = &self.model;
        if m.dim == 0 || m.heads == 0 || !m.dim.is_multiple_of(m.heads) {
            return Err(Error::config(format!(
                "model.heads ({}) must divide model.dim ({})",
                m.heads, m.dim
            )));
        }
        if m.view_widths.is_empty() || m.edge_widths.is_empty() {
            return Err(Error::config("backbone width lists must be non-empty"));
        }
        if self.data.views == 0 || 360 % self.data.views != 0 {
            return Err(Error::config(format!("data.views ({}) must divide 360", self.data.views)));
        }
        if !self.data.resolution.is_multiple_of(1 << m.view_widths.len()) {
            return Err(Error::config(format!(
                "data.resolution ({}) must be divisible by 2^{}",
                self.data.resolution,
                m.view_widths.len()
            )));
        }
        if self.data.points < 2 {
            return Err(Error::config("data.points must be at least 2"));
        }
        Ok(())
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let p = match phase {
            Phase::Finetune => &self.finetune,
            _ => &self.pretrain,
        };
        TrainConfig {
            phase,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr_schedule: p.lr_schedule.clone(),
            weight_decay: p.weight_decay,
            momentum: p.momentum,
            freeze_backbones_until: match phase {
                Phase::Finetune => self.freeze_backbones_until,
                _ => 0,
            },
            seed: self.seed,
            arcface_margin: self.arcface_margin,
            arcface_scale: self.arcface_scale,
        }
    }

    pub fn point_branch(&self) -> PointBranchConfig {
        PointBranchConfig {
            edge_widths: self.model.edge_widths.clone(),
            knn_k: self.model.knn_k,
            out_dim: self.model.point_dim,
        }
    }

    pub fn view_cnn(&self) -> ViewCnnConfig {
        ViewCnnConfig {
            widths: self.model.view_widths.clone(),
            input_size: self.data.resolution,
        }
    }

    /// Aggregator settings for a token set of at most `max_tokens` items.
    pub fn aggregator(&self, max_tokens: usize) -> ImamConfig {
        ImamConfig {
            input_dim: *self.model.view_widths.last().unwrap_or(&0),
            dim: self.model.dim,
            heads: self.model.heads,
            mlp_hidden: self.model.mlp_hidden,
            blocks: self.model.blocks,
            max_tokens,
        }
    }
}
