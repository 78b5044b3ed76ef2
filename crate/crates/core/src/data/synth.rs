//! Deterministic synthetic action benchmark.
//!
//! Every class is a periodic motion primitive: joint `j` oscillates around a shared
//! rest pose with class amplitude `a_c`, frequency `ω_c` and a per-joint phase
//! `φ_{c,j}`. Phases are propagated along the joint tree so neighbouring joints move
//! coherently. Each sample adds i.i.d. Gaussian coordinate noise and, optionally, a
//! random temporal phase offset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, SkeletonTopology, SplitDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub class_count: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub time_steps: usize,
    pub noise_sigma: f64,
    /// Half-width of the uniform per-sample phase offset, in radians. Zero keeps
    /// every clean sample of a class identical.
    #[serde(default)]
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            class_count: 10,
            per_class_train: 30,
            per_class_test: 20,
            time_steps: 16,
            noise_sigma: 0.3,
            phase_jitter: 0.0,
            seed: 0,
        }
    }
}

struct ClassMotion {
    amplitude: f64,
    omega: f64,
    phase: Vec<f64>,
}

/// Generates train and test pools for `class_count` synthetic classes.
pub fn synth_generate(topology: &SkeletonTopology, params: &SynthParams) -> Result<SplitDataset> {
    if params.class_count < 2 {
        return Err(Error::config("class_count", "must be at least 2"));
    }
    if params.time_steps < 2 {
        return Err(Error::config("time_steps", "must be at least 2"));
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma", "must be finite and non-negative"));
    }
    if !(params.phase_jitter >= 0.0 && params.phase_jitter.is_finite()) {
        return Err(Error::config("phase_jitter", "must be finite and non-negative"));
    }
    if params.per_class_train == 0 {
        return Err(Error::config("per_class_train", "must be at least 1"));
    }
    // Re-validate in case the topology was deserialized without going through `new`.
    let topology = SkeletonTopology::new(topology.joint_count(), topology.edges().to_vec())?;

    let joints = topology.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let rest: Vec<[f64; 3]> = (0..joints)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();

    let tree = topology.bfs_tree();
    let step = Normal::new(0.0, 1.0).expect("unit normal");
    // Frequencies are spread over a fixed band so no two classes share one exactly.
    let band = (0.25, 1.25);
    let motions: Vec<ClassMotion> = (0..params.class_count)
        .map(|c| {
            let slot = (c as f64 + rng.random_range(0.2..0.8)) / params.class_count as f64;
            let omega = band.0 + (band.1 - band.0) * slot;
            let amplitude = rng.random_range(0.5..=1.5);
            let mut phase = vec![0.0; joints];
            for &(j, parent) in &tree {
                phase[j] = match parent {
                    None => rng.random_range(0.0..2.0 * PI),
                    Some(p) => phase[p] + step.sample(&mut rng),
                };
            }
            ClassMotion {
                amplitude,
                omega,
                phase,
            }
        })
        .collect();

    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let t_len = params.time_steps;
    let sample = |class: usize, rng: &mut ChaCha8Rng| -> Result<SkeletonSequence> {
        let m = &motions[class];
        let offset = if params.phase_jitter > 0.0 {
            rng.random_range(-params.phase_jitter..=params.phase_jitter)
        } else {
            0.0
        };
        let mut data = Vec::with_capacity(t_len * joints * 3);
        for t in 0..t_len {
            for j in 0..joints {
                for (d, rest_d) in rest[j].iter().enumerate() {
                    let axis = d as f64 * 2.0 * PI / 3.0;
                    let clean = rest_d + m.amplitude * (m.omega * t as f64 + m.phase[j] + axis + offset).sin();
                    let eps = if params.noise_sigma > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    data.push(clean + eps);
                }
            }
        }
        SkeletonSequence::new(t_len, joints, Tensor::from_vec(t_len * joints, 3, data), class)
    };

    let mut train = Vec::with_capacity(params.class_count * params.per_class_train);
    for c in 0..params.class_count {
        for _ in 0..params.per_class_train {
            train.push(sample(c, &mut rng)?);
        }
    }
    let mut test = Vec::with_capacity(params.class_count * params.per_class_test);
    for c in 0..params.class_count {
        for _ in 0..params.per_class_test {
            test.push(sample(c, &mut rng)?);
        }
    }
    SplitDataset::new(t_len, joints, train, test)
}
