use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{joint_major, AttentionProjections};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttachMode {
    /// `x_e + P_T`.
    Add,
    /// Frames of `x_e` and `P_T` stacked, then a learned `T x 2T` frame remap.
    ConcatTemporal,
    /// Channels of `x_e` and `P_T` stacked, then a learned `2C x C` remap.
    ConcatFeature,
    /// `x_e` attends over the prompt frames of each joint; output added residually.
    CrossAttention,
    /// The first selected prompt frame added to every frame of `x_e`.
    AddSingle,
}

/// An attachment operator together with any learned remap parameters.
#[derive(Clone, Debug)]
pub enum Attachment {
    Add,
    AddSingle { time_steps: usize, joints: usize },
    ConcatTemporal { remap: ParamId, time_steps: usize },
    ConcatFeature { remap: ParamId },
    CrossAttention { proj: AttentionProjections, time_steps: usize, joints: usize },
}

impl Attachment {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, mode: AttachMode, time_steps: usize, joints: usize, width: usize, rng: &mut R) -> Self {
        match mode {
            AttachMode::Add => Attachment::Add,
            AttachMode::AddSingle => Attachment::AddSingle { time_steps, joints },
            AttachMode::ConcatTemporal => {
                let mut init = Tensor::zeros(time_steps, 2 * time_steps);
                for t in 0..time_steps {
                    init.set(t, t, 1.0);
                    init.set(t, time_steps + t, 1.0);
                }
                let remap = store.add("codebook.attach.temporal", ParamGroup::Attach, init);
                Attachment::ConcatTemporal { remap, time_steps }
            }
            AttachMode::ConcatFeature => {
                let mut init = Tensor::zeros(2 * width, width);
                for c in 0..width {
                    init.set(c, c, 1.0);
                    init.set(width + c, c, 1.0);
                }
                let remap = store.add("codebook.attach.feature", ParamGroup::Attach, init);
                Attachment::ConcatFeature { remap }
            }
            AttachMode::CrossAttention => Attachment::CrossAttention {
                proj: AttentionProjections::new(store, "codebook.attach.cross", ParamGroup::Attach, width, rng),
                time_steps,
                joints,
            },
        }
    }

    pub fn mode(&self) -> AttachMode {
        match self {
            Attachment::Add => AttachMode::Add,
            Attachment::AddSingle { .. } => AttachMode::AddSingle,
            Attachment::ConcatTemporal { .. } => AttachMode::ConcatTemporal,
            Attachment::ConcatFeature { .. } => AttachMode::ConcatFeature,
            Attachment::CrossAttention { .. } => AttachMode::CrossAttention,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Attachment::Add | Attachment::AddSingle { .. } => Vec::new(),
            Attachment::ConcatTemporal { remap, .. } | Attachment::ConcatFeature { remap } => vec![*remap],
            Attachment::CrossAttention { proj, .. } => proj.params(),
        }
    }

    /// Combines a `(T * J) x C` embedding with same-shaped prompts.
    pub fn apply(&self, g: &mut Graph<'_>, embedding: Var, prompts: Var) -> Result<Var> {
        let shape = g.tape.value(embedding).shape();
        if g.tape.value(prompts).shape() != shape {
            let p = g.tape.value(prompts).shape();
            return Err(Error::contract(format!(
                "prompts have shape {}x{}, embedding {}x{}",
                p.0, p.1, shape.0, shape.1
            )));
        }
        let (rows, cols) = shape;
        Ok(match self {
            Attachment::Add => g.tape.add(embedding, prompts),
            Attachment::AddSingle { time_steps, joints } => {
                if rows != time_steps * joints {
                    return Err(Error::contract("embedding does not match the prompt frame layout"));
                }
                let first_frame: Vec<usize> = (0..rows).map(|r| r % joints).collect();
                let broadcast = g.tape.gather_rows(prompts, Arc::new(first_frame));
                g.tape.add(embedding, broadcast)
            }
            Attachment::ConcatTemporal { remap, time_steps } => {
                if rows % time_steps != 0 {
                    return Err(Error::contract("embedding does not match the prompt frame layout"));
                }
                let frame_width = rows / time_steps * cols;
                let stacked = g.tape.concat_rows(&[embedding, prompts]);
                let frames = g.tape.reshape(stacked, 2 * time_steps, frame_width);
                let a = g.param(*remap);
                let mixed = g.tape.matmul(a, frames);
                g.tape.reshape(mixed, rows, cols)
            }
            Attachment::ConcatFeature { remap } => {
                let stacked = g.tape.concat_cols(embedding, prompts);
                let w = g.param(*remap);
                if g.tape.value(w).shape() != (2 * cols, cols) {
                    return Err(Error::contract("feature remap does not match the embedding width"));
                }
                g.tape.matmul(stacked, w)
            }
            Attachment::CrossAttention { proj, time_steps, joints } => {
                if rows != time_steps * joints {
                    return Err(Error::contract("embedding does not match the prompt frame layout"));
                }
                let (fwd, inv) = joint_major(*time_steps, *joints);
                let xq = g.tape.gather_rows(embedding, fwd.clone());
                let pk = g.tape.gather_rows(prompts, fwd);
                let att = proj.attend(g, xq, pk, *time_steps, *time_steps);
                let att = g.tape.gather_rows(att, inv);
                g.tape.add(embedding, att)
            }
        })
    }
}
