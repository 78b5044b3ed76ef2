use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneKind, HeadKind};
use crate::codebook::AttachMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Prompt offset tuning on a frozen backbone.
    Poet,
    /// Fine-tune backbone and classifier in every session.
    Ft,
    /// Frozen backbone, classifier only.
    Fe,
    /// Frozen backbone, new classifier rows only.
    FeFrozen,
}

impl Method {
    pub fn uses_prompts(self) -> bool {
        self == Method::Poet
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Poet => "poet",
            Method::Ft => "ft",
            Method::Fe => "fe",
            Method::FeFrozen => "fe-frozen",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    Fixed,
    /// Append `expand_r` prompts at the start of every incremental session.
    Expand,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    /// Initial `η` of the cosine head.
    pub cosine_scale: f64,
    pub pool_mode: PoolMode,
    /// Prompts in the initial pool; 0 means one per frame.
    pub pool_size: usize,
    pub expand_r: usize,
    pub attach: AttachMode,
    pub sorting: bool,
    pub coupled: bool,
    pub clustering: bool,
    pub qa_update: bool,
    pub lambda: f64,
    /// Plain cross-entropy training of the backbone before prompts exist.
    pub pretrain: Schedule,
    /// Joint training of backbone and prompts on the base classes.
    pub base: Schedule,
    pub session: Schedule,
    /// Query adaptor learning rate in incremental sessions.
    pub adaptor_lr: f64,
    /// Maximum global gradient norm per update; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Poet,
            backbone: BackboneConfig::default(),
            head: HeadKind::Linear,
            cosine_scale: 10.0,
            pool_mode: PoolMode::Fixed,
            pool_size: 0,
            expand_r: 4,
            attach: AttachMode::Add,
            sorting: true,
            coupled: true,
            clustering: true,
            qa_update: true,
            lambda: 0.1,
            pretrain: Schedule {
                epochs: 12,
                lr: 0.1,
                batch: 16,
            },
            base: Schedule {
                epochs: 6,
                lr: 0.1,
                batch: 16,
            },
            session: Schedule {
                epochs: 5,
                lr: 0.1,
                batch: 10,
            },
            adaptor_lr: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    /// Large-body-skeleton reference schedule.
    pub fn ntu_reference() -> Self {
        TrainConfig {
            backbone: BackboneConfig {
                kind: BackboneKind::Gcn,
                layer_channels: vec![64, 64, 64, 64, 128, 128, 128, 128, 256, 256],
                attach_after_layer: 1,
                embed_dim: 64,
                dropout: 0.0,
            },
            expand_r: 6,
            pretrain: Schedule {
                epochs: 50,
                lr: 0.1,
                batch: 64,
            },
            base: Schedule {
                epochs: 50,
                lr: 0.1,
                batch: 64,
            },
            session: Schedule {
                epochs: 5,
                lr: 0.1,
                batch: 25,
            },
            ..TrainConfig::default()
        }
    }

    /// Hand-gesture reference schedule.
    pub fn shrec_reference() -> Self {
        TrainConfig {
            backbone: BackboneConfig {
                kind: BackboneKind::GraphTransformer,
                layer_channels: vec![128, 128, 128],
                attach_after_layer: 1,
                embed_dim: 128,
                dropout: 0.2,
            },
            expand_r: 2,
            pretrain: Schedule {
                epochs: 300,
                lr: 0.001,
                batch: 32,
            },
            base: Schedule {
                epochs: 300,
                lr: 0.001,
                batch: 32,
            },
            session: Schedule {
                epochs: 30,
                lr: 0.01,
                batch: 10,
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head == HeadKind::Cosine {
            positive("cosine_scale", self.cosine_scale)?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be finite and non-negative, got {}", self.lambda)));
        }
        for (name, s) in [("pretrain", &self.pretrain), ("base", &self.base), ("session", &self.session)] {
            positive(&format!("{name}.lr"), s.lr)?;
            if s.batch == 0 {
                return Err(Error::config(format!("{name}.batch"), "must be at least 1"));
            }
        }
        if self.session.epochs == 0 {
            return Err(Error::config("session.epochs", "must be at least 1"));
        }
        if self.pretrain.epochs + self.base.epochs == 0 {
            return Err(Error::config("base.epochs", "base session needs at least one epoch"));
        }
        if !(self.adaptor_lr >= 0.0 && self.adaptor_lr.is_finite()) {
            return Err(Error::config("adaptor_lr", "must be finite and non-negative"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("grad_clip", "must be finite and non-negative"));
        }
        if self.pool_mode == PoolMode::Expand && self.expand_r == 0 {
            return Err(Error::config("expand_r", "expand mode needs at least one new prompt per session"));
        }
        Ok(())
    }

    /// Checks settings that depend on the clip length.
    pub fn validate_for(&self, time_steps: usize) -> Result<()> {
        self.validate()?;
        if self.method.uses_prompts() {
            if self.pool_size != 0 && self.pool_size < time_steps {
                return Err(Error::config(
                    "pool_size",
                    format!("{} prompts cannot fill {time_steps} frames; use 0 or at least {time_steps}", self.pool_size),
                ));
            }
            if self.pool_mode == PoolMode::Expand && self.expand_r > time_steps {
                return Err(Error::config("expand_r", format!("must not exceed the {time_steps} frames")));
            }
        }
        Ok(())
    }

    pub fn initial_pool_size(&self, time_steps: usize) -> usize {
        if self.pool_size == 0 {
            time_steps
        } else {
            self.pool_size
        }
    }
}
