//! Named parameter storage, per-forward binding onto a tape, and SGD updates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Functional role of a parameter tensor. Freezing and learning rates are
/// decided per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Main-model input embedding layers (up to the prompt attachment point).
    Embed,
    /// Main-model graph feature extractor.
    Extract,
    Classifier,
    /// Learnable scale of the cosine classifier.
    ClassifierScale,
    Pool,
    Keys,
    QueryAdaptor,
    QueryEmbed,
    QueryExtract,
    /// Remapping layers of the non-additive attachment operators.
    Attach,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Embed,
        ParamGroup::Extract,
        ParamGroup::Classifier,
        ParamGroup::ClassifierScale,
        ParamGroup::Pool,
        ParamGroup::Keys,
        ParamGroup::QueryAdaptor,
        ParamGroup::QueryEmbed,
        ParamGroup::QueryExtract,
        ParamGroup::Attach,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embed => "embed",
            ParamGroup::Extract => "extract",
            ParamGroup::Classifier => "classifier",
            ParamGroup::ClassifierScale => "classifier-scale",
            ParamGroup::Pool => "pool",
            ParamGroup::Keys => "keys",
            ParamGroup::QueryAdaptor => "query-adaptor",
            ParamGroup::QueryEmbed => "query-embed",
            ParamGroup::QueryExtract => "query-extract",
            ParamGroup::Attach => "attach",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown parameter group `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// Whole tensor excluded from updates.
    pub frozen: bool,
    /// Rows whose gradient is zeroed before every update. Empty means none.
    pub frozen_rows: Vec<bool>,
}

impl Param {
    pub fn trainable(&self) -> bool {
        !self.frozen && !(self.frozen_rows.len() == self.value.rows() && self.frozen_rows.iter().all(|&f| f))
    }

    pub fn row_frozen(&self, r: usize) -> bool {
        self.frozen || self.frozen_rows.get(r).copied().unwrap_or(false)
    }
}

/// Flat registry of every parameter tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            group,
            value,
            frozen: false,
            frozen_rows: Vec::new(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    /// Snapshot of all tensors of one group, keyed by name.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Rounds every parameter to the nearest `f32`, so that a 32-bit checkpoint of
    /// the store reproduces it exactly.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// A tape plus the mapping from parameters to their leaf nodes for one forward pass.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'s> Graph<'s> {
    /// `track = false` builds an inference graph where no parameter requires a gradient.
    pub fn new(store: &'s ParamStore, track: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Leaf node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), self.track && p.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn backward(&self, loss: Var) -> ParamGrads {
        let mut grads = self.tape.backward(loss);
        self.collect(&mut grads)
    }

    fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        let entries = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        ParamGrads { entries }
    }
}

/// Per-parameter gradients, indexed like the store. `None` means no gradient reached
/// the parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    entries: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            entries: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.iter_mut().flatten() {
            t.scale_in_place(s);
        }
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id).map_or(0.0, Tensor::norm)
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so that the global norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

/// Plain stochastic gradient descent with one learning rate per parameter group.
/// Frozen tensors and frozen rows are never touched.
pub fn sgd_step(store: &mut ParamStore, grads: &ParamGrads, lr: impl Fn(ParamGroup) -> f64) {
    for (i, p) in store.params.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let Some(g) = grads.entries.get(i).and_then(Option::as_ref) else {
            continue;
        };
        let rate = lr(p.group);
        if rate == 0.0 {
            continue;
        }
        let cols = p.value.cols();
        for r in 0..p.value.rows() {
            if p.frozen_rows.get(r).copied().unwrap_or(false) {
                continue;
            }
            let row = p.value.row_mut(r);
            for (v, d) in row.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                *v -= rate * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_skips_frozen_rows_and_tensors() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Classifier, Tensor::filled(2, 1, 1.0));
        let b = store.add("b", ParamGroup::Embed, Tensor::filled(1, 1, 1.0));
        store.get_mut(a).frozen_rows = vec![true, false];
        store.get_mut(b).frozen = true;

        let mut g = Graph::new(&store, true);
        let va = g.param(a);
        let vb = g.param(b);
        let s = g.tape.sum_all(va);
        let t = g.tape.sum_all(vb);
        let l = g.tape.add(s, t);
        let grads = g.backward(l);
        assert!(grads.get(b).is_none(), "frozen tensor must not receive gradients");

        sgd_step(&mut store, &grads, |_| 0.5);
        assert_eq!(store.value(a).data(), &[1.0, 0.5]);
        assert_eq!(store.value(b).data(), &[1.0]);
    }

    #[test]
    fn group_names_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(g.as_str().parse::<ParamGroup>().unwrap(), g);
        }
    }
}
