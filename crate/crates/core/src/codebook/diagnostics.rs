use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged selection. `step` counts optimisation steps within the session;
/// evaluation-time selections use `step = None`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub session: usize,
    pub step: Option<usize>,
    pub sample_index: usize,
    pub order: Vec<usize>,
}

/// Usage statistics of a prompt pool over a selection log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub pool_size: usize,
    pub positions: usize,
    pub selections: usize,
    /// `order[i][p]`: how often prompt `i` was selected at position `p`.
    pub order: Vec<Vec<u64>>,
    pub usage: Vec<u64>,
    pub unused: Vec<usize>,
    /// Shannon entropy in bits of each prompt's position distribution; 0 for unused prompts.
    pub entropy: Vec<f64>,
}

impl CollapseReport {
    /// Mean position entropy over the prompts that were used at least once.
    pub fn mean_entropy(&self) -> f64 {
        let used: Vec<f64> = self.usage.iter().zip(&self.entropy).filter(|(u, _)| **u > 0).map(|(_, e)| *e).collect();
        if used.is_empty() {
            0.0
        } else {
            used.iter().sum::<f64>() / used.len() as f64
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.order.iter().enumerate().all(|(i, row)| row.iter().enumerate().all(|(p, &n)| n == 0 || i == p))
    }
}

/// Order matrix, usage counts, unused set and per-prompt position entropy of a
/// non-empty selection log over a pool of `pool_size` prompts.
pub fn collapse_diagnostics<'a>(log: impl IntoIterator<Item = &'a [usize]>, pool_size: usize) -> Result<CollapseReport> {
    let mut order: Vec<Vec<u64>> = vec![Vec::new(); pool_size];
    let mut positions = None;
    let mut selections = 0;
    for sel in log {
        let len = *positions.get_or_insert(sel.len());
        if sel.len() != len {
            return Err(Error::contract(format!("selection of length {} in a log of length {len}", sel.len())));
        }
        if selections == 0 {
            for row in &mut order {
                row.resize(len, 0);
            }
        }
        for (p, &i) in sel.iter().enumerate() {
            if i >= pool_size {
                return Err(Error::contract(format!("prompt index {i} outside a pool of {pool_size}")));
            }
            order[i][p] += 1;
        }
        selections += 1;
    }
    let Some(positions) = positions else {
        return Err(Error::contract("no selection data"));
    };
    let usage: Vec<u64> = order.iter().map(|r| r.iter().sum()).collect();
    let unused = usage.iter().enumerate().filter(|(_, &u)| u == 0).map(|(i, _)| i).collect();
    let entropy = order
        .iter()
        .zip(&usage)
        .map(|(row, &total)| {
            if total == 0 {
                return 0.0;
            }
            row.iter()
                .filter(|&&n| n > 0)
                .map(|&n| {
                    let p = n as f64 / total as f64;
                    -p * p.log2()
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    Ok(CollapseReport {
        pool_size,
        positions,
        selections,
        order,
        usage,
        unused,
        entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_swapped_selection() {
        let log = [vec![1usize, 0]];
        let r = collapse_diagnostics(log.iter().map(Vec::as_slice), 2).unwrap();
        assert_eq!(r.order, vec![vec![0, 1], vec![1, 0]]);
        assert!(r.unused.is_empty());
        assert!(!r.is_diagonal());
    }

    #[test]
    fn identity_selections_are_diagonal() {
        let log: Vec<Vec<usize>> = (0..5).map(|_| (0..4).collect()).collect();
        let r = collapse_diagnostics(log.iter().map(Vec::as_slice), 4).unwrap();
        assert!(r.is_diagonal());
        assert!(r.entropy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn unused_prompts_and_entropy() {
        let log = [vec![0usize, 1], vec![1, 0]];
        let r = collapse_diagnostics(log.iter().map(Vec::as_slice), 4).unwrap();
        assert_eq!(r.unused, vec![2, 3]);
        assert_eq!(r.usage, vec![2, 2, 0, 0]);
        assert!((r.entropy[0] - 1.0).abs() < 1e-12);
        assert!((r.mean_entropy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_invalid_logs() {
        assert!(collapse_diagnostics(std::iter::empty::<&[usize]>(), 3).is_err());
        let log = [vec![0usize, 5]];
        assert!(collapse_diagnostics(log.iter().map(Vec::as_slice), 3).is_err());
    }

    mod props {
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        use super::super::collapse_diagnostics;

        /// Logs of injective selections of `t` out of `m` prompts.
        fn log() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
            (1usize..12, 0usize..4, 1usize..20, any::<u64>()).prop_map(|(t, extra, n, seed)| {
                let m = t + extra;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sels = (0..n)
                    .map(|_| {
                        let mut all: Vec<usize> = (0..m).collect();
                        all.shuffle(&mut rng);
                        all.truncate(t);
                        all
                    })
                    .collect();
                (m, sels)
            })
        }

        proptest! {
            #[test]
            fn counts_are_consistent((m, sels) in log()) {
                let r = collapse_diagnostics(sels.iter().map(Vec::as_slice), m).unwrap();
                let t = sels[0].len();
                // Every position is filled exactly once per selection.
                for p in 0..t {
                    prop_assert_eq!(r.order.iter().map(|row| row[p]).sum::<u64>(), sels.len() as u64);
                }
                prop_assert_eq!(r.usage.iter().sum::<u64>(), (sels.len() * t) as u64);
                for i in 0..m {
                    let used = sels.iter().any(|s| s.contains(&i));
                    prop_assert_eq!(r.unused.contains(&i), !used);
                    prop_assert!(r.entropy[i] >= 0.0 && r.entropy[i] <= (t as f64).log2() + 1e-12);
                }
            }

            #[test]
            fn identity_order_is_diagonal_with_zero_entropy(t in 1usize..16, n in 1usize..10) {
                let sels: Vec<Vec<usize>> = vec![(0..t).collect(); n];
                let r = collapse_diagnostics(sels.iter().map(Vec::as_slice), t).unwrap();
                prop_assert!(r.is_diagonal());
                prop_assert_eq!(r.mean_entropy(), 0.0);
            }
        }
    }
}
