use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fan_in_uniform;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    /// Linear head whose pre-existing rows receive no updates in incremental sessions.
    LinearFrozenOld,
    /// `η · cos(w_c, f)` with a learnable scale `η`.
    Cosine,
}

/// Classifier `f_c` over every class seen so far. Row `i` of the weight is the
/// `i`-th class in introduction order.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    kind: HeadKind,
    weight: ParamId,
    /// `K x 1`, linear kinds only.
    bias: Option<ParamId>,
    /// `1 x 1`, cosine kind only.
    scale: Option<ParamId>,
    /// `1 x D` feature offset of the linear kinds, subtracted before the product.
    /// Never receives gradients.
    center: Option<ParamId>,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, kind: HeadKind, classes: usize, feature_dim: usize, cosine_scale: f64, rng: &mut R) -> Result<Self> {
        if classes == 0 {
            return Err(Error::contract("classifier needs at least one class"));
        }
        let weight = store.add(format!("{prefix}.weight"), ParamGroup::Classifier, fan_in_uniform(feature_dim, classes, feature_dim, rng));
        let center = match kind {
            HeadKind::Cosine => None,
            _ => Some(store.add(format!("{prefix}.center"), ParamGroup::Classifier, Tensor::zeros(1, feature_dim))),
        };
        let (bias, scale) = match kind {
            HeadKind::Cosine => {
                if !(cosine_scale > 0.0 && cosine_scale.is_finite()) {
                    return Err(Error::config("cosine_scale", "must be positive and finite"));
                }
                let s = store.add(format!("{prefix}.scale"), ParamGroup::ClassifierScale, Tensor::filled(1, 1, cosine_scale));
                (None, Some(s))
            }
            _ => (Some(store.add(format!("{prefix}.bias"), ParamGroup::Classifier, Tensor::zeros(classes, 1))), None),
        };
        Ok(ClassifierHead {
            kind,
            weight,
            bias,
            scale,
            center,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn scale(&self) -> Option<ParamId> {
        self.scale
    }

    pub fn center(&self) -> Option<ParamId> {
        self.center
    }

    /// Trainable parameters.
    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).chain(self.scale).collect()
    }

    pub fn class_count(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    /// `1 x K` logits of a `1 x D` pooled feature.
    pub fn logits(&self, g: &mut Graph<'_>, feature: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let (k, d) = g.tape.value(w).shape();
        let f = g.tape.value(feature);
        if f.shape() != (1, d) {
            return Err(Error::contract(format!("feature has shape {}x{}, classifier expects 1x{d}", f.rows(), f.cols())));
        }
        match self.kind {
            HeadKind::Cosine => {
                if f.norm() == 0.0 {
                    return Err(Error::Degenerate("pooled feature has zero norm".into()));
                }
                if let Some(r) = (0..k).find(|&r| g.tape.value(w).row(r).iter().all(|&v| v == 0.0)) {
                    return Err(Error::Degenerate(format!("classifier row {r} has zero norm")));
                }
                let nf = g.tape.row_normalize(feature);
                let nw = g.tape.row_normalize(w);
                let cos = g.tape.matmul_nt(nf, nw);
                let eta = g.param(self.scale.expect("cosine head has a scale"));
                Ok(g.tape.scale_by(cos, eta))
            }
            _ => {
                let b = g.param(self.bias.expect("linear head has a bias"));
                if g.tape.value(b).rows() != k {
                    return Err(Error::contract("classifier bias rows do not match weight rows"));
                }
                let c = g.input(g.store().value(self.center.expect("linear head has a center")).clone());
                let centered = g.tape.sub(feature, c);
                let z = g.tape.matmul_nt(centered, w);
                let b = g.tape.reshape(b, 1, k);
                Ok(g.tape.add(z, b))
            }
        }
    }

    /// Moves the feature offset of a linear head to `mean`, adjusting the bias so every
    /// logit keeps its value. The cosine head has no offset.
    pub fn set_center(&self, store: &mut ParamStore, mean: &Tensor) {
        let (Some(center), Some(bias)) = (self.center, self.bias) else { return };
        let shift = mean.data().iter().zip(store.value(center).data()).map(|(m, c)| m - c).collect();
        let shift = Tensor::from_vec(1, mean.cols(), shift);
        let delta = store.value(self.weight).matmul_nt(&shift);
        store.get_mut(bias).value.add_assign(&delta);
        store.get_mut(center).value = mean.clone();
    }

    /// Appends `n` rows, each the mean of the existing rows. Frozen-row masks grow with
    /// the new rows unfrozen.
    pub fn expand(&self, store: &mut ParamStore, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::contract("classifier expansion needs at least one new class"));
        }
        for id in std::iter::once(self.weight).chain(self.bias) {
            let p = store.get_mut(id);
            let mean = p.value.mean_row();
            let old = p.value.rows();
            for _ in 0..n {
                p.value.append_rows(&mean);
            }
            if !p.frozen_rows.is_empty() {
                p.frozen_rows.resize(old + n, false);
            }
        }
        Ok(())
    }

    /// Zeroes future updates of the first `old` rows.
    pub fn freeze_old_rows(&self, store: &mut ParamStore, old: usize) {
        for id in std::iter::once(self.weight).chain(self.bias) {
            let p = store.get_mut(id);
            let rows = p.value.rows();
            p.frozen_rows = (0..rows).map(|r| r < old).collect();
        }
    }
}
