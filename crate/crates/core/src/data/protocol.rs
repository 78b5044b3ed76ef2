//! Base session plus N-way F-shot incremental sessions.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, SplitDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub classes: Vec<usize>,
    pub shots: usize,
}

/// Session 0 is the base session; `sessions[i]` is user session `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinualProtocol {
    pub base_classes: Vec<usize>,
    pub sessions: Vec<SessionSpec>,
    pub seed: u64,
}

impl ContinualProtocol {
    /// Checks pairwise disjointness and a uniform way count across incremental sessions.
    pub fn validate(&self) -> Result<()> {
        if self.base_classes.is_empty() {
            return Err(Error::Protocol("base session has no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for (t, classes) in self.all_sessions().enumerate() {
            for &c in classes {
                if !seen.insert(c) {
                    return Err(Error::Protocol(format!("class {c} appears again in session {t}")));
                }
            }
        }
        if let Some(first) = self.sessions.first() {
            for (i, s) in self.sessions.iter().enumerate() {
                if s.classes.len() != first.classes.len() || s.classes.is_empty() || s.shots == 0 {
                    return Err(Error::Protocol(format!(
                        "session {} must have {} classes and at least one shot",
                        i + 1,
                        first.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Classes introduced in session `t` (0 = base).
    pub fn session_classes(&self, t: usize) -> &[usize] {
        if t == 0 {
            &self.base_classes
        } else {
            &self.sessions[t - 1].classes
        }
    }

    fn all_sessions(&self) -> impl Iterator<Item = &[usize]> {
        std::iter::once(self.base_classes.as_slice()).chain(self.sessions.iter().map(|s| s.classes.as_slice()))
    }

    /// Every class introduced in sessions `0..=t`, in introduction order.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.all_sessions().take(t + 1).flatten().copied().collect()
    }

    /// Introducing session of `class`, if any.
    pub fn session_of(&self, class: usize) -> Option<usize> {
        self.all_sessions().position(|s| s.contains(&class))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassOrder {
    /// `"default"`: ascending class id.
    Named(String),
    Explicit(Vec<usize>),
}

impl Default for ClassOrder {
    fn default() -> Self {
        ClassOrder::Named("default".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub base_classes: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
    #[serde(default)]
    pub class_order: ClassOrder,
    #[serde(default)]
    pub seed: u64,
}

/// Splits `dataset` into a base session with all of its training samples and
/// `sessions` incremental sessions of exactly `ways * shots` samples each.
///
/// Returns the protocol and one training subset per session (index 0 = base).
pub fn make_protocol(dataset: &SplitDataset, spec: &ProtocolSpec) -> Result<(ContinualProtocol, Vec<Vec<SkeletonSequence>>)> {
    let available = dataset.class_ids();
    let order: Vec<usize> = match &spec.class_order {
        ClassOrder::Named(name) if name == "default" => available.clone(),
        ClassOrder::Named(name) => {
            return Err(Error::config("protocol.class_order", format!("unknown order `{name}`; use \"default\" or a list")))
        }
        ClassOrder::Explicit(list) => {
            let mut uniq = list.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() != list.len() {
                return Err(Error::config("protocol.class_order", "class order contains duplicates"));
            }
            if let Some(c) = list.iter().find(|c| !available.contains(c)) {
                return Err(Error::config("protocol.class_order", format!("class {c} not in dataset")));
            }
            list.clone()
        }
    };
    if spec.base_classes == 0 {
        return Err(Error::config("protocol.base_classes", "must be at least 1"));
    }
    if spec.sessions > 0 && (spec.ways == 0 || spec.shots == 0) {
        return Err(Error::config("protocol.ways", "ways and shots must be at least 1"));
    }
    let needed = spec.base_classes + spec.sessions * spec.ways;
    if needed > order.len() {
        return Err(Error::config(
            "protocol.sessions",
            format!("protocol needs {needed} classes but only {} are available", order.len()),
        ));
    }

    let base_classes = order[..spec.base_classes].to_vec();
    let sessions: Vec<SessionSpec> = (0..spec.sessions)
        .map(|i| {
            let start = spec.base_classes + i * spec.ways;
            SessionSpec {
                classes: order[start..start + spec.ways].to_vec(),
                shots: spec.shots,
            }
        })
        .collect();
    let protocol = ContinualProtocol {
        base_classes,
        sessions,
        seed: spec.seed,
    };
    protocol.validate()?;

    let mut subsets = Vec::with_capacity(spec.sessions + 1);
    subsets.push(
        dataset
            .train
            .iter()
            .filter(|s| protocol.base_classes.contains(&s.class_id))
            .cloned()
            .collect::<Vec<_>>(),
    );
    if subsets[0].is_empty() {
        return Err(Error::config("protocol.base_classes", "base session has no training samples"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for s in &protocol.sessions {
        let mut chosen = Vec::with_capacity(s.classes.len() * s.shots);
        for &c in &s.classes {
            let pool: Vec<&SkeletonSequence> = dataset.train.iter().filter(|x| x.class_id == c).collect();
            if pool.len() < s.shots {
                return Err(Error::config(
                    "protocol.shots",
                    format!("class {c} has {} training samples, fewer than {} shots", pool.len(), s.shots),
                ));
            }
            let mut picks = sample(&mut rng, pool.len(), s.shots).into_vec();
            picks.sort_unstable();
            chosen.extend(picks.into_iter().map(|i| pool[i].clone()));
        }
        subsets.push(chosen);
    }
    Ok((protocol, subsets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SkeletonTopology, SynthParams};

    fn dataset(classes: usize, per_class: usize) -> SplitDataset {
        let p = SynthParams {
            class_count: classes,
            per_class_train: per_class,
            per_class_test: 1,
            time_steps: 2,
            noise_sigma: 0.1,
            ..SynthParams::default()
        };
        synth_generate(&SkeletonTopology::chain(2).unwrap(), &p).unwrap()
    }

    fn spec(base: usize, sessions: usize, ways: usize, shots: usize, seed: u64) -> ProtocolSpec {
        ProtocolSpec {
            base_classes: base,
            sessions,
            ways,
            shots,
            class_order: ClassOrder::default(),
            seed,
        }
    }

    #[test]
    fn ntu_shaped_protocol() {
        let ds = dataset(60, 6);
        let (p, subsets) = make_protocol(&ds, &spec(40, 4, 5, 5, 0)).unwrap();
        assert_eq!(p.base_classes, (0..40).collect::<Vec<_>>());
        let mut covered = Vec::new();
        for (i, s) in p.sessions.iter().enumerate() {
            assert_eq!(s.classes.len(), 5);
            assert_eq!(subsets[i + 1].len(), 25);
            assert!(subsets[i + 1].iter().all(|x| s.classes.contains(&x.class_id)));
            covered.extend_from_slice(&s.classes);
        }
        assert_eq!(covered, (40..60).collect::<Vec<_>>());
        assert_eq!(subsets[0].len(), 40 * 6);
    }

    #[test]
    fn zero_sessions_is_base_only() {
        let ds = dataset(4, 2);
        let (p, subsets) = make_protocol(&ds, &spec(4, 0, 0, 0, 0)).unwrap();
        assert!(p.sessions.is_empty());
        assert_eq!(subsets.len(), 1);
    }

    #[test]
    fn shot_selection_depends_on_seed_only() {
        let ds = dataset(6, 12);
        let pick = |seed| {
            let (_, subsets) = make_protocol(&ds, &spec(2, 2, 2, 5, seed)).unwrap();
            subsets[1..].to_vec()
        };
        assert_eq!(pick(1), pick(1));
        assert_ne!(pick(1), pick(2));
    }

    #[test]
    fn explicit_class_order() {
        let ds = dataset(6, 3);
        let s = ProtocolSpec {
            class_order: ClassOrder::Explicit(vec![5, 4, 3, 2, 1, 0]),
            ..spec(2, 2, 2, 2, 0)
        };
        let (p, _) = make_protocol(&ds, &s).unwrap();
        assert_eq!(p.base_classes, vec![5, 4]);
        assert_eq!(p.sessions[1].classes, vec![1, 0]);
    }

    #[test]
    fn insufficient_classes_or_shots() {
        let ds = dataset(6, 3);
        assert!(matches!(make_protocol(&ds, &spec(4, 2, 2, 2, 0)), Err(Error::Config { .. })));
        assert!(matches!(make_protocol(&ds, &spec(2, 2, 2, 4, 0)), Err(Error::Config { .. })));
    }

    #[test]
    fn overlapping_sessions_fail_validation() {
        let p = ContinualProtocol {
            base_classes: vec![0, 1],
            sessions: vec![SessionSpec { classes: vec![1, 2], shots: 1 }],
            seed: 0,
        };
        assert!(matches!(p.validate(), Err(Error::Protocol(_))));
    }
}
