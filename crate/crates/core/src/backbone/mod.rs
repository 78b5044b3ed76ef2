//! Graph backbones `f = f_c ∘ f_g ∘ f_e` with an explicit split between the input
//! embedding `f_e` and the feature extractor `f_g`.
//!
//! Two block families share one interface: a spatio-temporal graph convolution
//! ([`GcnBlock`]) and a spatial-then-temporal self-attention block
//! ([`AttentionBlock`]). `f_e` is every layer up to and including
//! `attach_after_layer`; prompts are attached to its output.

mod attention;
mod gcn;
mod head;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionBlock, AttentionProjections, InputEmbedding};
pub(crate) use attention::joint_major;
pub use gcn::GcnBlock;
pub use head::{ClassifierHead, HeadKind};

use crate::autograd::Var;
use crate::data::{SkeletonSequence, SkeletonTopology};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Gcn,
    GraphTransformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output width of every layer.
    pub layer_channels: Vec<usize>,
    #[serde(default = "default_attach")]
    pub attach_after_layer: usize,
    /// Width of the prompted embedding; must equal the channel width at the split.
    pub embed_dim: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_attach() -> usize {
    1
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Gcn,
            layer_channels: vec![16, 16, 32],
            attach_after_layer: 1,
            embed_dim: 16,
            dropout: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let layers = self.layer_channels.len();
        if layers < 2 {
            return Err(Error::config("backbone.layer_channels", "need at least two layers"));
        }
        if self.layer_channels.contains(&0) {
            return Err(Error::config("backbone.layer_channels", "channel widths must be positive"));
        }
        if self.attach_after_layer < 1 || self.attach_after_layer >= layers {
            return Err(Error::config(
                "backbone.attach_after_layer",
                format!("must lie in [1, {layers}) for {layers} layers"),
            ));
        }
        if self.embed_dim != self.layer_channels[self.attach_after_layer - 1] {
            return Err(Error::config(
                "backbone.embed_dim",
                format!(
                    "{} does not match the width {} of layer {}",
                    self.embed_dim,
                    self.layer_channels[self.attach_after_layer - 1],
                    self.attach_after_layer
                ),
            ));
        }
        if self.kind == BackboneKind::GraphTransformer && self.layer_channels.iter().any(|&c| c != self.embed_dim) {
            return Err(Error::config(
                "backbone.layer_channels",
                "graph-transformer layers must all have width embed_dim",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("backbone.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_channels.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Gcn(GcnBlock),
    Embedding(InputEmbedding),
    Attention(AttentionBlock),
}

impl Layer {
    fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &LayerContext) -> Var {
        match self {
            Layer::Gcn(b) => b.forward(g, x, &ctx.adjacency),
            Layer::Embedding(e) => e.forward(g, x, &ctx.positional),
            Layer::Attention(a) => a.forward(g, x, ctx.time_steps, ctx.joints),
        }
    }

    fn params(&self) -> Vec<ParamId> {
        match self {
            Layer::Gcn(b) => b.params(),
            Layer::Embedding(e) => e.params(),
            Layer::Attention(a) => a.params(),
        }
    }

    fn remap(&self, map: &impl Fn(ParamId) -> ParamId) -> Layer {
        match self {
            Layer::Gcn(b) => Layer::Gcn(b.remap(map)),
            Layer::Embedding(e) => Layer::Embedding(e.remap(map)),
            Layer::Attention(a) => Layer::Attention(a.remap(map)),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerContext {
    time_steps: usize,
    joints: usize,
    adjacency: Arc<Tensor>,
    positional: Arc<Tensor>,
}

/// Input embedding and feature extractor of a backbone. The classifier head is a
/// separate [`ClassifierHead`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    ctx: LayerContext,
    layers: Vec<Layer>,
}

/// Uniform fan-in initialisation `U(-b, b)` with `b = sqrt(6 / fan_in)`, which keeps
/// activation variance roughly constant through rectified layers.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(fan_in: usize, rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(rows, cols, -bound, bound, rng)
}

/// Fixed sinusoidal frame encoding, repeated over joints: `(T * J) x C`.
fn temporal_encoding(time_steps: usize, joints: usize, channels: usize) -> Tensor {
    let mut pe = Tensor::zeros(time_steps * joints, channels);
    for t in 0..time_steps {
        for c in 0..channels {
            let rate = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / channels as f64);
            let v = if c % 2 == 0 { (t as f64 * rate).sin() } else { (t as f64 * rate).cos() };
            for j in 0..joints {
                pe.set(t * joints + j, c, v);
            }
        }
    }
    pe
}

impl Backbone {
    /// Registers fresh parameters under `prefix`. Layers before the split go to
    /// `groups.0`, the rest to `groups.1`.
    pub fn new<R: Rng + ?Sized>(
        config: &BackboneConfig,
        topology: &SkeletonTopology,
        time_steps: usize,
        store: &mut ParamStore,
        prefix: &str,
        groups: (ParamGroup, ParamGroup),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if time_steps == 0 {
            return Err(Error::config("frames", "must be at least 1"));
        }
        let joints = topology.joint_count();
        let ctx = LayerContext {
            time_steps,
            joints,
            adjacency: Arc::new(topology.normalized_adjacency()),
            positional: Arc::new(temporal_encoding(time_steps, joints, config.embed_dim)),
        };
        let mut layers = Vec::with_capacity(config.layer_channels.len());
        for (i, &c_out) in config.layer_channels.iter().enumerate() {
            let group = if i < config.attach_after_layer { groups.0 } else { groups.1 };
            let name = format!("{prefix}.layer{i}");
            let layer = match (config.kind, i) {
                (BackboneKind::Gcn, _) => {
                    let c_in = if i == 0 { 3 } else { config.layer_channels[i - 1] };
                    Layer::Gcn(GcnBlock::new(store, &name, group, c_in, c_out, rng))
                }
                (BackboneKind::GraphTransformer, 0) => Layer::Embedding(InputEmbedding::new(store, &name, group, 3, c_out, rng)),
                (BackboneKind::GraphTransformer, _) => Layer::Attention(AttentionBlock::new(store, &name, group, c_out, rng)),
            };
            layers.push(layer);
        }
        Ok(Backbone {
            config: config.clone(),
            ctx,
            layers,
        })
    }

    /// Registers a copy of every parameter under `prefix` and `groups`, returning a
    /// backbone bound to the copies.
    pub fn replicate(&self, store: &mut ParamStore, prefix: &str, groups: (ParamGroup, ParamGroup)) -> Backbone {
        let mut mapping = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let group = if i < self.config.attach_after_layer { groups.0 } else { groups.1 };
            for id in layer.params() {
                let src = store.get(id);
                let suffix = src.name.split_once(".layer").map_or(src.name.clone(), |(_, s)| format!("layer{s}"));
                let value = src.value.clone();
                let new = store.add(format!("{prefix}.{suffix}"), group, value);
                mapping.push((id, new));
            }
        }
        let map = |id: ParamId| mapping.iter().find(|(a, _)| *a == id).map(|(_, b)| *b).expect("mapped param");
        Backbone {
            config: self.config.clone(),
            ctx: self.ctx.clone(),
            layers: self.layers.iter().map(|l| l.remap(&map)).collect(),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn time_steps(&self) -> usize {
        self.ctx.time_steps
    }

    pub fn joints(&self) -> usize {
        self.ctx.joints
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    /// Places the clip's coordinates on the graph after checking its shape.
    pub fn input(&self, g: &mut Graph<'_>, x: &SkeletonSequence) -> Result<Var> {
        if x.time_steps() != self.ctx.time_steps || x.joints() != self.ctx.joints {
            return Err(Error::contract(format!(
                "input has {} frames x {} joints, backbone expects {} x {}",
                x.time_steps(),
                x.joints(),
                self.ctx.time_steps,
                self.ctx.joints
            )));
        }
        Ok(g.input(x.frames().clone()))
    }

    /// `f_e`: `(T * J) x 3` coordinates to a `(T * J) x C_e` embedding.
    pub fn embed(&self, g: &mut Graph<'_>, x: &SkeletonSequence) -> Result<Var> {
        let input = self.input(g, x)?;
        Ok(self.embed_var(g, input))
    }

    pub fn embed_var(&self, g: &mut Graph<'_>, mut h: Var) -> Var {
        for layer in &self.layers[..self.config.attach_after_layer] {
            h = layer.forward(g, h, &self.ctx);
        }
        h
    }

    /// `f_g` followed by global mean pooling over frames and joints: `1 x C_out`.
    pub fn extract(&self, g: &mut Graph<'_>, embedding: Var) -> Result<Var> {
        let (rows, cols) = g.tape.value(embedding).shape();
        if (rows, cols) != (self.ctx.time_steps * self.ctx.joints, self.config.embed_dim) {
            return Err(Error::contract(format!(
                "embedding has shape {rows}x{cols}, expected {}x{}",
                self.ctx.time_steps * self.ctx.joints,
                self.config.embed_dim
            )));
        }
        if !g.tape.value(embedding).all_finite() {
            return Err(Error::contract("embedding contains non-finite values"));
        }
        let mut h = embedding;
        for layer in &self.layers[self.config.attach_after_layer..] {
            h = layer.forward(g, h, &self.ctx);
        }
        Ok(g.tape.mean_rows(h))
    }

    /// Pooled features of an unprompted forward pass.
    pub fn features(&self, g: &mut Graph<'_>, x: &SkeletonSequence) -> Result<Var> {
        let e = self.embed(g, x)?;
        self.extract(g, e)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_generate, SynthParams};

    fn sample(t: usize, topo: &SkeletonTopology) -> SkeletonSequence {
        let p = SynthParams {
            class_count: 2,
            per_class_train: 1,
            per_class_test: 0,
            time_steps: t,
            ..SynthParams::default()
        };
        synth_generate(topo, &p).unwrap().train.remove(0)
    }

    #[test]
    fn ntu_scale_embedding_shape() {
        let topo = SkeletonTopology::body25();
        let cfg = BackboneConfig {
            layer_channels: vec![64, 64, 128],
            embed_dim: 64,
            ..BackboneConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&cfg, &topo, 64, &mut store, "main", (ParamGroup::Embed, ParamGroup::Extract), &mut rng).unwrap();
        let x = sample(64, &topo);
        let mut g = Graph::new(&store, false);
        let e = bb.embed(&mut g, &x).unwrap();
        assert_eq!(g.tape.value(e).shape(), (64 * 25, 64));
        assert!(g.tape.value(e).all_finite());
        let f = bb.extract(&mut g, e).unwrap();
        assert_eq!(g.tape.value(f).shape(), (1, 128));
    }

    #[test]
    fn zero_input_zero_weights_give_zero_embedding() {
        let topo = SkeletonTopology::chain(4).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&BackboneConfig::default(), &topo, 5, &mut store, "m", (ParamGroup::Embed, ParamGroup::Extract), &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.rows(), p.value.cols());
        }
        let x = SkeletonSequence::new(5, 4, Tensor::zeros(20, 3), 0).unwrap();
        let mut g = Graph::new(&store, false);
        let e = bb.embed(&mut g, &x).unwrap();
        assert!(g.tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_pure() {
        let topo = SkeletonTopology::chain(6).unwrap();
        for kind in [BackboneKind::Gcn, BackboneKind::GraphTransformer] {
            let cfg = BackboneConfig {
                kind,
                layer_channels: vec![8, 8, 8],
                embed_dim: 8,
                ..BackboneConfig::default()
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let bb = Backbone::new(&cfg, &topo, 4, &mut store, "m", (ParamGroup::Embed, ParamGroup::Extract), &mut rng).unwrap();
            let x = sample(4, &topo);
            let run = || {
                let mut g = Graph::new(&store, false);
                let f = bb.features(&mut g, &x).unwrap();
                g.tape.value(f).clone()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&BackboneConfig::default(), &topo, 4, &mut store, "m", (ParamGroup::Embed, ParamGroup::Extract), &mut rng).unwrap();
        let x = SkeletonSequence::new(5, 3, Tensor::zeros(15, 3), 0).unwrap();
        let mut g = Graph::new(&store, false);
        assert!(matches!(bb.embed(&mut g, &x), Err(Error::Contract(_))));
        let bad = g.input(Tensor::zeros(4 * 3, 7));
        assert!(matches!(bb.extract(&mut g, bad), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation_names_keys() {
        let bad_attach = BackboneConfig {
            attach_after_layer: 3,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad_attach.validate(), Err(Error::Config { key, .. }) if key == "backbone.attach_after_layer"));
        let bad_dim = BackboneConfig {
            embed_dim: 32,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad_dim.validate(), Err(Error::Config { key, .. }) if key == "backbone.embed_dim"));
        let bad_gt = BackboneConfig {
            kind: BackboneKind::GraphTransformer,
            ..BackboneConfig::default()
        };
        assert!(bad_gt.validate().is_err());
    }

    #[test]
    fn replicate_copies_values_into_new_groups() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&BackboneConfig::default(), &topo, 4, &mut store, "main", (ParamGroup::Embed, ParamGroup::Extract), &mut rng).unwrap();
        let n = store.len();
        let q = bb.replicate(&mut store, "query", (ParamGroup::QueryEmbed, ParamGroup::QueryExtract));
        assert_eq!(store.len(), 2 * n);
        for (a, b) in bb.params().into_iter().zip(q.params()) {
            assert_eq!(store.value(a), store.value(b));
            assert!(store.get(b).name.starts_with("query.layer"));
        }
        assert_eq!(store.get(q.params()[0]).group, ParamGroup::QueryEmbed);
        assert_eq!(store.get(*q.params().last().unwrap()).group, ParamGroup::QueryExtract);
    }
}
