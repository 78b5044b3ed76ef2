use std::sync::Arc;

use rand::Rng;

use super::fan_in_uniform;
use crate::autograd::Var;
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-joint linear lift of the coordinates plus a fixed temporal encoding.
#[derive(Clone, Debug)]
pub struct InputEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl InputEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: ParamGroup, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        InputEmbedding {
            weight: store.add(format!("{name}.w"), group, fan_in_uniform(c_in, c_in, c_out, rng)),
            bias: store.add(format!("{name}.b"), group, Tensor::zeros(1, c_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, positional: &Arc<Tensor>) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.tape.matmul(x, w);
        let h = g.tape.add_row(h, b);
        let pe = g.tape.constant(positional.as_ref().clone());
        let h = g.tape.add(h, pe);
        g.tape.relu(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn remap(&self, map: &impl Fn(ParamId) -> ParamId) -> Self {
        InputEmbedding {
            weight: map(self.weight),
            bias: map(self.bias),
        }
    }
}

/// Query, key, value and output projections of one single-head attention.
#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

impl AttentionProjections {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize, rng: &mut R) -> Self {
        let mut mk = |s: &str| store.add(format!("{name}.{s}"), group, fan_in_uniform(width, width, width, rng));
        AttentionProjections {
            q: mk("wq"),
            k: mk("wk"),
            v: mk("wv"),
            o: mk("wo"),
        }
    }

    /// Attention of `queries` over `context`, grouped in blocks of `nq` query rows and
    /// `nk` context rows. Returns the projected output, `queries`-shaped.
    pub fn attend(&self, g: &mut Graph<'_>, queries: Var, context: Var, nq: usize, nk: usize) -> Var {
        let width = g.tape.value(queries).cols();
        let (wq, wk, wv, wo) = (g.param(self.q), g.param(self.k), g.param(self.v), g.param(self.o));
        let q = g.tape.matmul(queries, wq);
        let k = g.tape.matmul(context, wk);
        let v = g.tape.matmul(context, wv);
        let s = g.tape.block_scores(q, k, nq, nk);
        let s = g.tape.scale(s, 1.0 / (width as f64).sqrt());
        let a = g.tape.row_softmax(s);
        let o = g.tape.block_apply(a, v, nq, nk);
        g.tape.matmul(o, wo)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.q, self.k, self.v, self.o]
    }

    pub fn remap(&self, map: &impl Fn(ParamId) -> ParamId) -> Self {
        AttentionProjections {
            q: map(self.q),
            k: map(self.k),
            v: map(self.v),
            o: map(self.o),
        }
    }
}

/// Frame-major to joint-major row permutation: output row `j * T + t` is input row
/// `t * J + j`. Also returns the inverse.
pub(crate) fn joint_major(time_steps: usize, joints: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let mut fwd = Vec::with_capacity(time_steps * joints);
    for j in 0..joints {
        for t in 0..time_steps {
            fwd.push(t * joints + j);
        }
    }
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    (Arc::new(fwd), Arc::new(inv))
}

/// Spatial self-attention among the joints of each frame, then temporal
/// self-attention along each joint's trajectory, both residual:
/// `H = X + SA(X)`, `Y = relu(H + TA(H))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub spatial: AttentionProjections,
    pub temporal: AttentionProjections,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize, rng: &mut R) -> Self {
        AttentionBlock {
            spatial: AttentionProjections::new(store, &format!("{name}.spatial"), group, width, rng),
            temporal: AttentionProjections::new(store, &format!("{name}.temporal"), group, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, time_steps: usize, joints: usize) -> Var {
        let sa = self.spatial.attend(g, x, x, joints, joints);
        let h = g.tape.add(x, sa);
        let (fwd, inv) = joint_major(time_steps, joints);
        let hp = g.tape.gather_rows(h, fwd);
        let ta = self.temporal.attend(g, hp, hp, time_steps, time_steps);
        let ta = g.tape.gather_rows(ta, inv);
        let y = g.tape.add(h, ta);
        g.tape.relu(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.spatial.params();
        v.extend(self.temporal.params());
        v
    }

    pub fn remap(&self, map: &impl Fn(ParamId) -> ParamId) -> Self {
        AttentionBlock {
            spatial: self.spatial.remap(map),
            temporal: self.temporal.remap(map),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_major_permutation_round_trips() {
        let (fwd, inv) = joint_major(3, 2);
        assert_eq!(*fwd, vec![0, 2, 4, 1, 3, 5]);
        for i in 0..6 {
            assert_eq!(fwd[inv[i]], i);
        }
    }
}
