use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ActionLabel, Group, PairedSample, Roster};
use crate::{seeds, CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Segments are assigned independently, stratified by (group, label).
    #[default]
    Segment,
    /// Whole participants are assigned, stratified by group.
    Participant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [7.0, 2.0, 1.0],
            seed: 0,
            mode: SplitMode::Segment,
        }
    }
}

/// Indices into the sample list, ascending within each part.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.valid, &self.test]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

pub fn split_dataset(
    samples: &[PairedSample],
    roster: &Roster,
    cfg: &SplitConfig,
) -> Result<DatasetSplit> {
    let keys = samples
        .iter()
        .map(|s| {
            Ok((
                s.participant().to_string(),
                roster.group_of(s.participant())?,
                s.label(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    split_keys(&keys, cfg)
}

/// Splits items described by `(participant, group, label)`.
pub fn split_keys(
    keys: &[(String, Group, ActionLabel)],
    cfg: &SplitConfig,
) -> Result<DatasetSplit> {
    if keys.is_empty() {
        return Err(CoreError::EmptyInput("no samples to split"));
    }
    if keys.len() < MIN_SPLIT_SAMPLES {
        return Err(CoreError::invalid(format!(
            "{} samples; a split needs at least {MIN_SPLIT_SAMPLES}",
            keys.len()
        )));
    }
    if cfg.ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || cfg.ratios.iter().sum::<f64>() <= 0.0
    {
        return Err(CoreError::config(format!(
            "split ratios {:?} must be non-negative with a positive sum",
            cfg.ratios
        )));
    }
    let total: f64 = cfg.ratios.iter().sum();
    let fractions = cfg.ratios.map(|r| r / total);

    // units are what gets shuffled and assigned: single samples or whole participants
    let mut strata: BTreeMap<(Group, Option<ActionLabel>), Vec<Vec<usize>>> = BTreeMap::new();
    match cfg.mode {
        SplitMode::Segment => {
            for (i, (_, g, l)) in keys.iter().enumerate() {
                strata.entry((*g, Some(*l))).or_default().push(vec![i]);
            }
        }
        SplitMode::Participant => {
            let mut by_participant: BTreeMap<&str, (Group, Vec<usize>)> = BTreeMap::new();
            for (i, (p, g, _)) in keys.iter().enumerate() {
                by_participant
                    .entry(p)
                    .or_insert_with(|| (*g, Vec::new()))
                    .1
                    .push(i);
            }
            for (_, (g, idx)) in by_participant {
                strata.entry((g, None)).or_default().push(idx);
            }
        }
    }

    let mut rng = seeds::rng(cfg.seed, &[0x5b17]);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    let mut expected = [0.0f64; 3];
    let mut assigned = [0usize; 3];
    for (_, mut units) in strata {
        units.shuffle(&mut rng);
        let n = units.len();
        for (e, f) in expected.iter_mut().zip(fractions) {
            *e += n as f64 * f;
        }
        let counts = allocate(n, &expected, &assigned);
        let mut it = units.into_iter();
        for part in 0..3 {
            assigned[part] += counts[part];
            for unit in it.by_ref().take(counts[part]) {
                out[part].extend(unit);
            }
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    let [train, valid, test] = out;
    Ok(DatasetSplit { train, valid, test })
}

/// Largest-remainder allocation of `n` units that steers the running totals
/// towards `expected`, keeping at least one unit per part when `n >= 3` and
/// the part has a positive target.
fn allocate(n: usize, expected: &[f64; 3], assigned: &[usize; 3]) -> [usize; 3] {
    let target: Vec<f64> = (0..3)
        .map(|i| (expected[i] - assigned[i] as f64).max(0.0))
        .collect();
    let scale = if target.iter().sum::<f64>() > 0.0 {
        n as f64 / target.iter().sum::<f64>()
    } else {
        0.0
    };
    let target: Vec<f64> = target.iter().map(|t| t * scale).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = target[i].floor() as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = target[a] - target[a].floor();
        let fb = target[b] - target[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if counts[i] == 0 && expected[i] > 0.0 {
                let donor = (0..3)
                    .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                    .unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}
