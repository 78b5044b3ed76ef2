//! Prompt pool with paired keys, the query function, ordered top-T selection,
//! straight-through gathering, attachment to the input embedding, the clustering
//! loss, order-preserving pool expansion and collapse diagnostics.

mod attach;
mod diagnostics;

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attach::{AttachMode, Attachment};
pub use diagnostics::{collapse_diagnostics, CollapseReport, SelectionRecord};

use crate::autograd::Var;
use crate::backbone::{fan_in_uniform, Backbone};
use crate::data::SkeletonSequence;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Prompt indices in selection order together with the similarities they were
/// ranked by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderedSelection {
    pub order: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Switches that change how prompts are selected and coupled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectOptions {
    pub sorting: bool,
    pub coupled: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            sorting: true,
            coupled: true,
        }
    }
}

/// Ranks `similarities` and returns `t` indices.
///
/// With `sorting`, indices are in descending similarity with ties broken by ascending
/// index; without it the same top-`t` set is returned in ascending index order.
/// Indices in `forced_tail` are excluded from ranking and appended, ascending, as
/// the last `forced_tail.len()` positions.
pub fn ordered_select(similarities: &[f64], t: usize, sorting: bool, forced_tail: Option<Range<usize>>) -> Result<Vec<usize>> {
    let m = similarities.len();
    let tail = forced_tail.unwrap_or(m..m);
    if tail.end > m || tail.start > tail.end {
        return Err(Error::contract(format!("forced tail {tail:?} outside a pool of {m}")));
    }
    if t == 0 || t > m {
        return Err(Error::contract(format!("cannot select {t} of {m} prompts")));
    }
    if tail.len() > t {
        return Err(Error::contract(format!("forced tail of {} exceeds selection length {t}", tail.len())));
    }
    if let Some(i) = similarities.iter().position(|v| v.is_nan()) {
        return Err(Error::Degenerate(format!("similarity {i} is NaN")));
    }
    let head_len = t - tail.len();
    let mut ranked: Vec<usize> = (0..m).filter(|i| !tail.contains(i)).collect();
    ranked.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    ranked.truncate(head_len);
    if !sorting {
        ranked.sort_unstable();
    }
    ranked.extend(tail);
    Ok(ranked)
}

/// Plain value of the clustering loss `-λ Σ γ_i` over the selected similarities.
pub fn clustering_loss_value(selected_similarities: &[f64], lambda: f64) -> f64 {
    -lambda * selected_similarities.iter().sum::<f64>()
}

fn zero_row(t: &Tensor) -> Option<usize> {
    (0..t.rows()).find(|&r| t.row(r).iter().all(|&v| v == 0.0))
}

/// Learnable prompt pool `P` (`M` prompts of `J x C_e`) with keys `K` (`M x C_e`), a
/// frozen query backbone and a trainable query adaptor.
#[derive(Clone, Debug)]
pub struct PromptCodebook {
    pool: ParamId,
    keys: ParamId,
    adaptor_weight: ParamId,
    adaptor_bias: ParamId,
    /// `1 x D` offset subtracted from the query backbone output. Never trained.
    query_center: ParamId,
    query: Backbone,
    attachment: Attachment,
    length: usize,
    joints: usize,
    embed_dim: usize,
    forced_tail: Option<Range<usize>>,
}

/// Result of one prompted forward pass up to the attached embedding.
pub struct PromptedEmbedding {
    pub embedding: Var,
    /// `1 x M` similarities.
    pub gamma: Var,
    /// `T x 1` similarities of the selected keys, in selection order.
    pub selected_gamma: Var,
    pub selection: OrderedSelection,
}

impl PromptCodebook {
    /// Registers a pool of `pool_size` prompts for `main`, copies `main` into a frozen
    /// query backbone, and initialises prompts and keys from `U(0, 1)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, main: &Backbone, pool_size: usize, attach: AttachMode, rng: &mut R) -> Result<Self> {
        let length = main.time_steps();
        let joints = main.joints();
        let embed_dim = main.embed_dim();
        if pool_size < length {
            return Err(Error::config(
                "pool_size",
                format!("pool of {pool_size} prompts cannot fill a sequence of {length} frames"),
            ));
        }
        let query = main.replicate(store, "query", (ParamGroup::QueryEmbed, ParamGroup::QueryExtract));
        for id in query.params() {
            store.get_mut(id).frozen = true;
        }
        let pool = store.add("codebook.pool", ParamGroup::Pool, Tensor::uniform(pool_size, joints * embed_dim, 0.0, 1.0, rng));
        let keys = store.add("codebook.keys", ParamGroup::Keys, Tensor::uniform(pool_size, embed_dim, 0.0, 1.0, rng));
        let d = main.feature_dim();
        let adaptor_weight = store.add("codebook.adaptor.w", ParamGroup::QueryAdaptor, fan_in_uniform(d, d, embed_dim, rng));
        let adaptor_bias = store.add("codebook.adaptor.b", ParamGroup::QueryAdaptor, Tensor::zeros(1, embed_dim));
        let query_center = store.add("codebook.query.center", ParamGroup::QueryExtract, Tensor::zeros(1, d));
        store.get_mut(query_center).frozen = true;
        let attachment = Attachment::new(store, attach, length, joints, embed_dim, rng);
        Ok(PromptCodebook {
            pool,
            keys,
            adaptor_weight,
            adaptor_bias,
            query_center,
            query,
            attachment,
            length,
            joints,
            embed_dim,
            forced_tail: None,
        })
    }

    pub fn pool(&self) -> ParamId {
        self.pool
    }

    pub fn keys(&self) -> ParamId {
        self.keys
    }

    pub fn adaptor(&self) -> (ParamId, ParamId) {
        (self.adaptor_weight, self.adaptor_bias)
    }

    pub fn query_center(&self) -> ParamId {
        self.query_center
    }

    /// Sets the query offset to the mean query backbone output over `data`.
    pub fn center_queries(&self, store: &mut ParamStore, data: &[SkeletonSequence]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::contract("query centering needs at least one clip"));
        }
        let mut sum = Tensor::zeros(1, self.query.feature_dim());
        for x in data {
            let mut g = Graph::new(store, false);
            let f = self.query.features(&mut g, x)?;
            sum.add_assign(g.tape.value(f));
        }
        sum.scale_in_place(1.0 / data.len() as f64);
        store.get_mut(self.query_center).value = sum;
        Ok(())
    }

    pub fn query_backbone(&self) -> &Backbone {
        &self.query
    }

    pub fn attachment(&self) -> &Attachment {
        &self.attachment
    }

    pub fn pool_size(&self, store: &ParamStore) -> usize {
        store.value(self.pool).rows()
    }

    /// Number of prompts per selection, equal to the frame count.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn forced_tail(&self) -> Option<Range<usize>> {
        self.forced_tail.clone()
    }

    /// Restores expansion state when rebuilding a codebook from a checkpoint.
    pub fn set_forced_tail(&mut self, tail: Option<Range<usize>>) {
        self.forced_tail = tail;
    }

    /// Pooled output of the frozen query backbone minus the query offset. Constant for
    /// a given clip, so callers may compute it once and reuse it.
    pub fn query_features(&self, store: &ParamStore, x: &SkeletonSequence) -> Result<Tensor> {
        let mut g = Graph::new(store, false);
        let f = self.query.features(&mut g, x)?;
        let mut f = g.tape.value(f).clone();
        for (v, c) in f.data_mut().iter_mut().zip(store.value(self.query_center).data()) {
            *v -= c;
        }
        Ok(f)
    }

    /// Query vector `q = f_QA(features)`, `1 x C_e`.
    pub fn query_from_features(&self, g: &mut Graph<'_>, features: &Tensor) -> Result<Var> {
        let w = g.param(self.adaptor_weight);
        let (d, c) = g.tape.value(w).shape();
        if features.shape() != (1, d) {
            return Err(Error::contract(format!(
                "query features have shape {}x{}, adaptor expects 1x{d}",
                features.rows(),
                features.cols()
            )));
        }
        if c != self.embed_dim {
            return Err(Error::contract(format!("adaptor maps to {c}, embedding width is {}", self.embed_dim)));
        }
        let b = g.param(self.adaptor_bias);
        let f = g.input(features.clone());
        let q = g.tape.matmul(f, w);
        Ok(g.tape.add_row(q, b))
    }

    pub fn query(&self, g: &mut Graph<'_>, x: &SkeletonSequence) -> Result<Var> {
        let features = self.query_features(g.store(), x)?;
        self.query_from_features(g, &features)
    }

    /// Cosine similarity between `q` and every key, `1 x M`.
    pub fn similarities(&self, g: &mut Graph<'_>, q: Var) -> Result<Var> {
        if g.tape.value(q).norm() == 0.0 {
            return Err(Error::Degenerate("query vector has zero norm".into()));
        }
        let k = g.param(self.keys);
        if let Some(r) = zero_row(g.tape.value(k)) {
            return Err(Error::Degenerate(format!("key {r} has zero norm")));
        }
        let nq = g.tape.row_normalize(q);
        let nk = g.tape.row_normalize(k);
        Ok(g.tape.matmul_nt(nq, nk))
    }

    /// Ranks the pool for one similarity row, honouring the expansion tail.
    pub fn select(&self, gamma: &[f64], sorting: bool) -> Result<Vec<usize>> {
        ordered_select(gamma, self.length, sorting, self.forced_tail.clone())
    }

    /// Similarities of the selected keys, `T x 1`, in selection order.
    pub fn selected_similarities(&self, g: &mut Graph<'_>, gamma: Var, order: &[usize]) -> Var {
        let m = g.tape.value(gamma).cols();
        let column = g.tape.reshape(gamma, m, 1);
        g.tape.gather_rows(column, Arc::new(order.to_vec()))
    }

    /// Prompts of the selection stacked frame by frame, `(T * J) x C_e`. With
    /// `coupled`, slot `j` is scaled by `γ_j - stop_grad(γ_j) + 1`, which is exactly one
    /// in value but passes the cross-entropy gradient on to keys and adaptor.
    pub fn gather(&self, g: &mut Graph<'_>, order: &[usize], selected_gamma: Var, coupled: bool) -> Result<Var> {
        let pool = g.param(self.pool);
        let m = g.tape.value(pool).rows();
        if let Some(&bad) = order.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("prompt index {bad} outside a pool of {m}")));
        }
        if order.len() != self.length {
            return Err(Error::contract(format!("selection has {} prompts, expected {}", order.len(), self.length)));
        }
        let mut prompts = g.tape.gather_rows(pool, Arc::new(order.to_vec()));
        if coupled {
            let frozen = g.tape.detach(selected_gamma);
            let delta = g.tape.sub(selected_gamma, frozen);
            let factor = g.tape.add_const(delta, 1.0);
            prompts = g.tape.mul_rows(prompts, factor);
        }
        Ok(g.tape.reshape(prompts, self.length * self.joints, self.embed_dim))
    }

    pub fn attach(&self, g: &mut Graph<'_>, embedding: Var, prompts: Var) -> Result<Var> {
        self.attachment.apply(g, embedding, prompts)
    }

    /// `-λ Σ γ` over the selected similarities.
    pub fn clustering_loss(&self, g: &mut Graph<'_>, selected_gamma: Var, lambda: f64) -> Var {
        let s = g.tape.sum_all(selected_gamma);
        g.tape.scale(s, -lambda)
    }

    /// Query, select, gather and attach for one clip whose embedding `x_e` is already
    /// on the graph.
    pub fn prompt(&self, g: &mut Graph<'_>, embedding: Var, query_features: &Tensor, opts: SelectOptions) -> Result<PromptedEmbedding> {
        let q = self.query_from_features(g, query_features)?;
        let gamma = self.similarities(g, q)?;
        let similarities = g.tape.value(gamma).data().to_vec();
        let order = self.select(&similarities, opts.sorting)?;
        let selected_gamma = self.selected_similarities(g, gamma, &order);
        let prompts = self.gather(g, &order, selected_gamma, opts.coupled)?;
        let embedding = self.attach(g, embedding, prompts)?;
        Ok(PromptedEmbedding {
            embedding,
            gamma,
            selected_gamma,
            selection: OrderedSelection { order, similarities },
        })
    }

    /// Appends `r` prompts drawn from `U(0, 1)` with keys set to the mean of the
    /// existing keys, freezes every existing prompt, and forces the new indices into
    /// the last `r` positions of later selections.
    pub fn expand_pool<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, r: usize, rng: &mut R) -> Result<()> {
        if r == 0 {
            return Err(Error::contract("pool expansion needs at least one new prompt"));
        }
        if r > self.length {
            return Err(Error::config(
                "expand_r",
                format!("{r} new prompts do not fit a sequence of {} frames", self.length),
            ));
        }
        let old = self.pool_size(store);
        let fresh = Tensor::uniform(r, self.joints * self.embed_dim, 0.0, 1.0, rng);
        let pool = store.get_mut(self.pool);
        pool.value.append_rows(&fresh);
        pool.frozen_rows = (0..old + r).map(|i| i < old).collect();

        let keys = store.get_mut(self.keys);
        let mean = keys.value.mean_row();
        for _ in 0..r {
            keys.value.append_rows(&mean);
        }
        if !keys.frozen_rows.is_empty() {
            keys.frozen_rows.resize(old + r, false);
        }
        self.forced_tail = Some(old..old + r);
        Ok(())
    }
}
