//! Skeleton sequences, joint topologies and the few-shot class-incremental protocol.

mod loader;
mod protocol;
mod synth;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use loader::{load_dataset_dir, load_skeleton_file, write_skeleton_file, DatasetManifest, ManifestClass, SkeletonFormat};
pub use protocol::{make_protocol, ClassOrder, ContinualProtocol, ProtocolSpec, SessionSpec};
pub use synth::{synth_generate, SynthParams};

/// One action clip: `T` frames of `J` joints with 3-D coordinates.
///
/// Coordinates are stored as a `(T * J) x 3` tensor with frame-major rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    time_steps: usize,
    joints: usize,
    frames: Tensor,
    pub class_id: usize,
    pub subject_id: Option<i64>,
}

impl SkeletonSequence {
    pub fn new(time_steps: usize, joints: usize, frames: Tensor, class_id: usize) -> Result<Self> {
        if time_steps == 0 || joints == 0 {
            return Err(Error::contract("skeleton sequence needs T >= 1 and J >= 1"));
        }
        if frames.shape() != (time_steps * joints, 3) {
            return Err(Error::contract(format!(
                "frame tensor has shape {:?}, expected ({}, 3)",
                frames.shape(),
                time_steps * joints
            )));
        }
        if !frames.all_finite() {
            return Err(Error::contract("skeleton coordinates must be finite"));
        }
        Ok(SkeletonSequence {
            time_steps,
            joints,
            frames,
            class_id,
            subject_id: None,
        })
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Coordinates as `(T * J) x 3`.
    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn coord(&self, t: usize, j: usize) -> [f64; 3] {
        let r = self.frames.row(t * self.joints + j);
        [r[0], r[1], r[2]]
    }
}

/// Undirected joint graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    /// Validates endpoints, self-loops and connectivity.
    pub fn new(joint_count: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::config("topology.joints", "must be at least 1"));
        }
        for &(a, b) in &edges {
            if a >= joint_count || b >= joint_count {
                return Err(Error::config(
                    "topology.edges",
                    format!("edge ({a}, {b}) out of range for {joint_count} joints"),
                ));
            }
            if a == b {
                return Err(Error::config("topology.edges", format!("self-loop at joint {a}")));
            }
        }
        let topo = SkeletonTopology { joint_count, edges };
        if !topo.is_connected() {
            return Err(Error::config("topology.edges", "joint graph is not connected"));
        }
        Ok(topo)
    }

    /// Joints `0 - 1 - ... - (n-1)`.
    pub fn chain(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|j| (j - 1, j)).collect())
    }

    /// The 25-joint Kinect v2 body skeleton.
    pub fn body25() -> Self {
        const EDGES: [(usize, usize); 24] = [
            (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
            (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
            (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
        ];
        Self::new(25, EDGES.iter().map(|&(a, b)| (a - 1, b - 1)).collect()).expect("static topology")
    }

    /// 22-joint hand: wrist, palm, then four joints per finger from thumb to pinky.
    pub fn hand22() -> Self {
        let mut edges = vec![(0, 1), (0, 2)];
        for (finger, root) in [(2, 0), (6, 1), (10, 1), (14, 1), (18, 1)] {
            if finger != 2 {
                edges.push((root, finger));
            }
            for k in 0..3 {
                edges.push((finger + k, finger + k + 1));
            }
        }
        Self::new(22, edges).expect("static topology")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joint_count];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Breadth-first order from joint 0 with each joint's parent (`None` for the root).
    pub fn bfs_tree(&self) -> Vec<(usize, Option<usize>)> {
        let adj = self.neighbours();
        let mut seen = vec![false; self.joint_count];
        let mut order = Vec::with_capacity(self.joint_count);
        let mut queue = VecDeque::from([(0usize, None)]);
        seen[0] = true;
        while let Some((j, parent)) = queue.pop_front() {
            order.push((j, parent));
            for &n in &adj[j] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back((n, Some(j)));
                }
            }
        }
        order
    }

    fn is_connected(&self) -> bool {
        self.bfs_tree().len() == self.joint_count
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` as a `J x J` tensor.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.joint_count;
        let mut a = Tensor::identity(n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>()).collect();
        for i in 0..n {
            for j in 0..n {
                let v = a.at(i, j) / (deg[i] * deg[j]).sqrt();
                a.set(i, j, v);
            }
        }
        a
    }
}

/// Train and test pools of a benchmark. All sequences share `(T, J)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub time_steps: usize,
    pub joints: usize,
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
}

impl SplitDataset {
    pub fn new(time_steps: usize, joints: usize, train: Vec<SkeletonSequence>, test: Vec<SkeletonSequence>) -> Result<Self> {
        for s in train.iter().chain(&test) {
            if s.time_steps() != time_steps || s.joints() != joints {
                return Err(Error::contract(format!(
                    "sequence of shape {}x{} in a {time_steps}x{joints} benchmark",
                    s.time_steps(),
                    s.joints()
                )));
            }
        }
        Ok(SplitDataset {
            time_steps,
            joints,
            train,
            test,
        })
    }

    /// Sorted distinct class ids over both splits.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.train.iter().chain(&self.test).map(|s| s.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn test_for<'a>(&'a self, classes: &'a [usize]) -> impl Iterator<Item = &'a SkeletonSequence> + 'a {
        self.test.iter().filter(move |s| classes.contains(&s.class_id))
    }
}
