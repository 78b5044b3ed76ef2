use std::sync::Arc;

use rand::Rng;

use super::fan_in_uniform;
use crate::autograd::Var;
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Spatio-temporal graph convolution:
/// `relu(TCN_3(Â · X · W_s + b_s))` where `Â` is the normalized joint adjacency
/// applied per frame and `TCN_3` a kernel-3 temporal convolution with zero padding.
#[derive(Clone, Debug)]
pub struct GcnBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub temporal_w: [ParamId; 3],
    pub temporal_b: ParamId,
}

impl GcnBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: ParamGroup, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let spatial_w = store.add(format!("{name}.spatial_w"), group, fan_in_uniform(c_in, c_in, c_out, rng));
        let spatial_b = store.add(format!("{name}.spatial_b"), group, Tensor::zeros(1, c_out));
        let temporal_w = [0, 1, 2].map(|k| store.add(format!("{name}.temporal_w{k}"), group, fan_in_uniform(3 * c_out, c_out, c_out, rng)));
        let temporal_b = store.add(format!("{name}.temporal_b"), group, Tensor::zeros(1, c_out));
        GcnBlock {
            c_in,
            c_out,
            spatial_w,
            spatial_b,
            temporal_w,
            temporal_b,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, adjacency: &Arc<Tensor>) -> Var {
        let joints = adjacency.rows();
        let mixed = g.tape.frame_mix(x, adjacency.clone());
        let w = g.param(self.spatial_w);
        let b = g.param(self.spatial_b);
        let h = g.tape.matmul(mixed, w);
        let h = g.tape.add_row(h, b);
        let mut acc: Option<Var> = None;
        for (k, &wk) in self.temporal_w.iter().enumerate() {
            let shifted = g.tape.time_shift(h, k as isize - 1, joints);
            let wk = g.param(wk);
            let term = g.tape.matmul(shifted, wk);
            acc = Some(match acc {
                Some(a) => g.tape.add(a, term),
                None => term,
            });
        }
        let tb = g.param(self.temporal_b);
        let y = g.tape.add_row(acc.expect("three taps"), tb);
        g.tape.relu(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.spatial_w, self.spatial_b];
        v.extend(self.temporal_w);
        v.push(self.temporal_b);
        v
    }

    pub fn remap(&self, map: &impl Fn(ParamId) -> ParamId) -> Self {
        GcnBlock {
            c_in: self.c_in,
            c_out: self.c_out,
            spatial_w: map(self.spatial_w),
            spatial_b: map(self.spatial_b),
            temporal_w: self.temporal_w.map(map),
            temporal_b: map(self.temporal_b),
        }
    }
}
