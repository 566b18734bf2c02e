//! Confusion matrices, per-participant F1 grids and group aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Group, Roster};
use crate::{CoreError, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.get(c, c)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_classes()).map(|p| self.get(class, p)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// One-vs-rest `(tp, fp, fn)` for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64) {
        let c = self.num_classes();
        let tp = self.get(class, class);
        let fp = (0..c).map(|t| self.get(t, class)).sum::<u64>() - tp;
        let fn_ = self.support(class) - tp;
        (tp, fp, fn_)
    }

    /// Each row divided by its support; rows without support stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        let c = self.num_classes();
        (0..c)
            .map(|t| {
                let s = self.support(t);
                (0..c)
                    .map(|p| {
                        if s == 0 {
                            0.0
                        } else {
                            self.get(t, p) as f64 / s as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// `true,pred,count` with one row per cell, classes by name.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true,pred,count\n");
        for t in 0..self.num_classes() {
            for p in 0..self.num_classes() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    self.classes[t],
                    self.classes[p],
                    self.get(t, p)
                ));
            }
        }
        out
    }
}

pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    classes: &[String],
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(CoreError::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let c = classes.len();
    let mut counts = vec![0u64; c * c];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= c || t >= c {
            return Err(CoreError::invalid(format!(
                "class {} outside 0..{c}",
                p.max(t)
            )));
        }
        counts[t * c + p] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

/// `2TP / (2TP + FP + FN)`, NaN when the denominator is zero.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        f64::NAN
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Participants × classes F1 values, one-vs-rest within each participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Grid {
    pub participants: Vec<String>,
    pub classes: Vec<String>,
    values: Vec<f64>,
    counts: Vec<(u64, u64, u64)>,
}

impl F1Grid {
    pub fn get(&self, participant: usize, class: usize) -> f64 {
        self.values[participant * self.classes.len() + class]
    }

    /// `(tp, fp, fn)` behind a cell.
    pub fn counts(&self, participant: usize, class: usize) -> (u64, u64, u64) {
        self.counts[participant * self.classes.len() + class]
    }

    pub fn row(&self, participant: usize) -> &[f64] {
        let c = self.classes.len();
        &self.values[participant * c..(participant + 1) * c]
    }

    /// Header `participant,<class>...`; empty cells are written `NaN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("participant");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, p) in self.participants.iter().enumerate() {
            out.push_str(p);
            for v in self.row(i) {
                if v.is_nan() {
                    out.push_str(",NaN");
                } else {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Rows follow `participants`; every id in `participant_ids` must be among them.
pub fn f1_grid(
    predictions: &[usize],
    truths: &[usize],
    participant_ids: &[&str],
    participants: &[String],
    classes: &[String],
) -> Result<F1Grid> {
    if predictions.len() != truths.len() || truths.len() != participant_ids.len() {
        return Err(CoreError::invalid(
            "predictions, truths and participant ids must align",
        ));
    }
    let c = classes.len();
    let row_of: BTreeMap<&str, usize> = participants
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let mut counts = vec![(0u64, 0u64, 0u64); participants.len() * c];
    for ((&p, &t), &pid) in predictions.iter().zip(truths).zip(participant_ids) {
        let row = *row_of
            .get(pid)
            .ok_or_else(|| CoreError::UnknownParticipant(pid.to_string()))?;
        if p >= c || t >= c {
            return Err(CoreError::invalid(format!(
                "class {} outside 0..{c}",
                p.max(t)
            )));
        }
        if p == t {
            counts[row * c + t].0 += 1;
        } else {
            counts[row * c + p].1 += 1;
            counts[row * c + t].2 += 1;
        }
    }
    let values = counts
        .iter()
        .map(|&(tp, fp, fn_)| f1(tp, fp, fn_))
        .collect();
    Ok(F1Grid {
        participants: participants.to_vec(),
        classes: classes.to_vec(),
        values,
        counts,
    })
}

/// Mean of the non-NaN cells of each group's participants. Groups without
/// rows in the grid are omitted; a group whose cells are all NaN is an error.
pub fn group_mean_f1(grid: &F1Grid, roster: &Roster) -> Result<BTreeMap<Group, f64>> {
    let mut acc: BTreeMap<Group, (f64, usize, usize)> = BTreeMap::new();
    for (i, p) in grid.participants.iter().enumerate() {
        let g = roster.group_of(p)?;
        let e = acc.entry(g).or_default();
        e.2 += 1;
        for &v in grid.row(i) {
            if !v.is_nan() {
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(g, (sum, n, _))| {
            if n == 0 {
                Err(CoreError::invalid(format!(
                    "every F1 cell of group {g} is NaN"
                )))
            } else {
                Ok((g, sum / n as f64))
            }
        })
        .collect()
}
