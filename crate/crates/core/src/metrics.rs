//! Accuracy, harmonic mean, backward forgetting and confusion matrices.
//!
//! Every percentage is kept unrounded; [`format_pct`] rounds to one decimal for
//! emission.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracies of one evaluation, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub avg: f64,
    /// Over classes of earlier sessions; `None` when there are none.
    pub old: Option<f64>,
    /// Over classes of the current session.
    pub new: f64,
    pub old_count: usize,
    pub new_count: usize,
    pub per_class: BTreeMap<usize, f64>,
}

fn pct(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// `class_sessions` maps each class to the session that introduced it.
pub fn compute_accuracies(predictions: &[usize], labels: &[usize], class_sessions: &BTreeMap<usize, usize>, current: usize) -> Result<Accuracies> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut old = (0, 0);
    let mut new = (0, 0);
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        let Some(&session) = class_sessions.get(&y) else {
            return Err(Error::contract(format!("unknown class id {y}")));
        };
        if !class_sessions.contains_key(&p) {
            return Err(Error::contract(format!("unknown predicted class id {p}")));
        }
        let hit = usize::from(p == y);
        let bucket = match session.cmp(&current) {
            std::cmp::Ordering::Less => &mut old,
            std::cmp::Ordering::Equal => &mut new,
            std::cmp::Ordering::Greater => return Err(Error::contract(format!("class {y} is not seen by session {current}"))),
        };
        bucket.0 += hit;
        bucket.1 += 1;
        let c = per_class.entry(y).or_default();
        c.0 += hit;
        c.1 += 1;
    }
    if new.1 == 0 {
        return Err(Error::contract(format!("session {current} has no test samples")));
    }
    Ok(Accuracies {
        avg: pct(old.0 + new.0, old.1 + new.1),
        old: (old.1 > 0).then(|| pct(old.0, old.1)),
        new: pct(new.0, new.1),
        old_count: old.1,
        new_count: new.1,
        per_class: per_class.into_iter().map(|(c, (h, n))| (c, pct(h, n))).collect(),
    })
}

/// `2 o n / (o + n)`, and 0 when both are 0.
pub fn harmonic_mean(old: f64, new: f64) -> f64 {
    if old + new == 0.0 {
        0.0
    } else {
        2.0 * old * new / (old + new)
    }
}

/// Lower-triangular table `a[l][j]`: accuracy on task `j`'s classes after training
/// task `l`. Tasks are numbered from 1; task 1 is the base session.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistory {
    rows: Vec<Vec<f64>>,
}

impl AccuracyHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends row `l = tasks() + 1`, which must hold exactly `l` entries.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::contract(format!("history row {} needs {} entries, got {}", self.rows.len() + 1, self.rows.len() + 1, row.len())));
        }
        if row.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::contract("history entries must lie in [0, 100]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, l: usize, j: usize) -> Option<f64> {
        self.rows.get(l.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Average forgetting after task `k`:
/// `F_k = 1/(k-1) Σ_{j<k} [max_{j≤l<k} a[l][j] - a[k][j]]`.
pub fn bwf(history: &AccuracyHistory, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract(format!("forgetting needs at least two tasks, got k = {k}")));
    }
    if history.tasks() < k {
        return Err(Error::contract(format!("history has {} tasks, k = {k}", history.tasks())));
    }
    let mut total = 0.0;
    for j in 1..k {
        let peak = (j..k).map(|l| history.get(l, j).expect("lower triangle")).fold(f64::NEG_INFINITY, f64::max);
        total += peak - history.get(k, j).expect("lower triangle");
    }
    Ok(total / (k - 1) as f64)
}

/// Rows are true classes and columns predictions, both in `seen_classes` order.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], seen_classes: &[usize]) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::contract("predictions and labels differ in length"));
    }
    let pos: BTreeMap<usize, usize> = seen_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut m = vec![vec![0u64; seen_classes.len()]; seen_classes.len()];
    for (&p, &y) in predictions.iter().zip(labels) {
        let (Some(&r), Some(&c)) = (pos.get(&y), pos.get(&p)) else {
            return Err(Error::contract(format!("class {y} or {p} is not among the seen classes")));
        };
        m[r][c] += 1;
    }
    Ok(m)
}

/// Evaluation after one session, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub avg: f64,
    pub old: Option<f64>,
    pub new: f64,
    pub a_hm: Option<f64>,
    pub bwf: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
    pub classes: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    pub wall_seconds: f64,
}

/// One-decimal rendering used for tables and CSV files.
pub fn format_pct(x: f64) -> String {
    format!("{x:.1}")
}

pub fn format_opt(x: Option<f64>) -> String {
    x.map(format_pct).unwrap_or_default()
}
