use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// The nine activities of daily living, indexed 1..=9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ActionLabel {
    LiftCupHandle = 1,
    HairBrush = 2,
    BrushTeeth = 3,
    Remotecon = 4,
    MovingCan = 5,
    Writing = 6,
    FoldingPaper = 7,
    FoldUpTower = 8,
    WashFace = 9,
}

pub const DEFAULT_MERGE_PAIRS: [(ActionLabel, ActionLabel); 2] = [
    (ActionLabel::HairBrush, ActionLabel::BrushTeeth),
    (ActionLabel::FoldingPaper, ActionLabel::FoldUpTower),
];

impl ActionLabel {
    pub const ALL: [ActionLabel; 9] = [
        ActionLabel::LiftCupHandle,
        ActionLabel::HairBrush,
        ActionLabel::BrushTeeth,
        ActionLabel::Remotecon,
        ActionLabel::MovingCan,
        ActionLabel::Writing,
        ActionLabel::FoldingPaper,
        ActionLabel::FoldUpTower,
        ActionLabel::WashFace,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Zero-based position in [`ActionLabel::ALL`].
    pub fn ordinal(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(index: u8) -> Result<Self> {
        match index {
            1..=9 => Ok(Self::ALL[index as usize - 1]),
            _ => Err(CoreError::invalid(format!(
                "action label {index} outside 1..=9"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionLabel::LiftCupHandle => "LiftCupHandle",
            ActionLabel::HairBrush => "HairBrush",
            ActionLabel::BrushTeeth => "BrushTeeth",
            ActionLabel::Remotecon => "Remotecon",
            ActionLabel::MovingCan => "MovingCan",
            ActionLabel::Writing => "Writing",
            ActionLabel::FoldingPaper => "FoldingPaper",
            ActionLabel::FoldUpTower => "FoldUpTower",
            ActionLabel::WashFace => "WashFace",
        }
    }
}

impl From<ActionLabel> for u8 {
    fn from(l: ActionLabel) -> u8 {
        l.index()
    }
}

impl TryFrom<u8> for ActionLabel {
    type Error = CoreError;
    fn try_from(v: u8) -> Result<Self> {
        ActionLabel::from_index(v)
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepts either the numeric index or the name.
impl FromStr for ActionLabel {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<u8>() {
            return ActionLabel::from_index(i);
        }
        ActionLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::invalid(format!("unknown action label {s:?}")))
    }
}

/// Surjective map from the nine action labels onto contiguous class indices.
///
/// Classes are numbered in order of their smallest member label, so the
/// identity map sends label `i` to class `i - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    class_of: [usize; 9],
    names: Vec<String>,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl LabelMap {
    pub fn identity() -> Self {
        Self::from_groups(ActionLabel::ALL.iter().map(|&l| vec![l]).collect())
    }

    fn from_groups(mut groups: Vec<Vec<ActionLabel>>) -> Self {
        for g in &mut groups {
            g.sort();
        }
        groups.sort_by_key(|g| g[0]);
        let mut class_of = [0; 9];
        let mut names = Vec::with_capacity(groups.len());
        for (c, g) in groups.iter().enumerate() {
            for l in g {
                class_of[l.ordinal()] = c;
            }
            names.push(g.iter().map(|l| l.name()).collect::<Vec<_>>().join("+"));
        }
        LabelMap { class_of, names }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// Zero-based class index of `label`.
    pub fn class_of(&self, label: ActionLabel) -> usize {
        self.class_of[label.ordinal()]
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn members(&self, class: usize) -> Vec<ActionLabel> {
        ActionLabel::ALL
            .into_iter()
            .filter(|&l| self.class_of(l) == class)
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.num_classes() == 9
    }

    /// Mapping table with one row per original label; class indices are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,label_name,class,class_name\n");
        for l in ActionLabel::ALL {
            let c = self.class_of(l);
            out.push_str(&format!(
                "{},{},{},{}\n",
                l.index(),
                l.name(),
                c + 1,
                self.names[c]
            ));
        }
        out
    }

    /// Parses the table written by [`LabelMap::to_csv`]. Every label must
    /// appear exactly once and class numbers must be contiguous from 1.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("label,label_name,class,class_name") {
            return Err(CoreError::invalid(
                "label map header must be label,label_name,class,class_name",
            ));
        }
        let mut class_of: [Option<usize>; 9] = [None; 9];
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(CoreError::invalid(format!(
                    "label map row {line:?} needs 4 columns"
                )));
            }
            let label: ActionLabel = cols[0].parse()?;
            let class: usize = cols[2]
                .trim()
                .parse()
                .ok()
                .filter(|&c| c >= 1)
                .ok_or_else(|| CoreError::invalid(format!("bad class number {:?}", cols[2])))?;
            if class_of[label.ordinal()].replace(class - 1).is_some() {
                return Err(CoreError::invalid(format!("label {label} listed twice")));
            }
        }
        let mut groups: Vec<Vec<ActionLabel>> = Vec::new();
        for l in ActionLabel::ALL {
            let c = class_of[l.ordinal()]
                .ok_or_else(|| CoreError::invalid(format!("label {l} missing from map")))?;
            if c > groups.len() {
                return Err(CoreError::invalid(
                    "class numbers must be contiguous and ordered by smallest label",
                ));
            }
            if c == groups.len() {
                groups.push(Vec::new());
            }
            groups[c].push(l);
        }
        Ok(LabelMap::from_groups(groups))
    }
}

/// Merges the classes containing each pair. A label may appear in at most one
/// pair; applying the same pairs to an already merged map changes nothing.
pub fn merge_labels(map: &LabelMap, pairs: &[(ActionLabel, ActionLabel)]) -> Result<LabelMap> {
    let mut seen = [false; 9];
    for &(a, b) in pairs {
        if a == b {
            return Err(CoreError::invalid(format!(
                "merge pair ({a}, {b}) names one label twice"
            )));
        }
        for l in [a, b] {
            if std::mem::replace(&mut seen[l.ordinal()], true) {
                return Err(CoreError::OverlappingMerge(l.index()));
            }
        }
    }
    // union-find over the existing classes
    let mut parent: Vec<usize> = (0..map.num_classes()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            x = p[x];
        }
        x
    }
    for &(a, b) in pairs {
        let (ra, rb) = (
            find(&mut parent, map.class_of(a)),
            find(&mut parent, map.class_of(b)),
        );
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<ActionLabel>> = Vec::new();
    let mut slot = vec![usize::MAX; map.num_classes()];
    for l in ActionLabel::ALL {
        let r = find(&mut parent, map.class_of(l));
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(l);
    }
    Ok(LabelMap::from_groups(groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActionLabel::*;

    #[test]
    fn index_name_bijection() {
        for (i, l) in ActionLabel::ALL.into_iter().enumerate() {
            assert_eq!(l.index() as usize, i + 1);
            assert_eq!(ActionLabel::from_index(l.index()).unwrap(), l);
            assert_eq!(l.name().parse::<ActionLabel>().unwrap(), l);
            assert_eq!(l.index().to_string().parse::<ActionLabel>().unwrap(), l);
        }
        assert!(ActionLabel::from_index(0).is_err());
        assert!(ActionLabel::from_index(10).is_err());
        assert!("Juggling".parse::<ActionLabel>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let id = LabelMap::identity();
        assert_eq!(LabelMap::from_csv(&id.to_csv()).unwrap(), id);
        let m = merge_labels(&id, &DEFAULT_MERGE_PAIRS).unwrap();
        assert_eq!(LabelMap::from_csv(&m.to_csv()).unwrap(), m);
        let short: String = id
            .to_csv()
            .lines()
            .take(5)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(LabelMap::from_csv(&short).is_err());
        assert!(LabelMap::from_csv(&id.to_csv().replace(",9,WashFace", ",11,WashFace")).is_err());
        assert!(LabelMap::from_csv("a,b\n").is_err());
    }

    #[test]
    fn default_merge_gives_seven_contiguous_classes() {
        let m = merge_labels(&LabelMap::identity(), &DEFAULT_MERGE_PAIRS).unwrap();
        assert_eq!(m.num_classes(), 7);
        assert_eq!(m.class_of(HairBrush), m.class_of(BrushTeeth));
        assert_eq!(m.class_of(FoldingPaper), m.class_of(FoldUpTower));
        assert_eq!(m.class_of(LiftCupHandle), 0);
        assert_eq!(m.class_name(0), "LiftCupHandle");
        let mut used: Vec<usize> = ActionLabel::ALL.iter().map(|&l| m.class_of(l)).collect();
        used.dedup();
        assert_eq!(used, (0..7).collect::<Vec<_>>());
        assert_eq!(m.class_name(m.class_of(HairBrush)), "HairBrush+BrushTeeth");
        assert_eq!(
            m.class_name(m.class_of(FoldUpTower)),
            "FoldingPaper+FoldUpTower"
        );
        assert_eq!(m.members(1), vec![HairBrush, BrushTeeth]);
    }

    #[test]
    fn empty_merge_is_identity_and_merge_is_idempotent() {
        let id = LabelMap::identity();
        assert_eq!(merge_labels(&id, &[]).unwrap(), id);
        let once = merge_labels(&id, &DEFAULT_MERGE_PAIRS).unwrap();
        let twice = merge_labels(&once, &DEFAULT_MERGE_PAIRS).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn overlapping_pairs_are_rejected() {
        let err = merge_labels(
            &LabelMap::identity(),
            &[(HairBrush, BrushTeeth), (BrushTeeth, Remotecon)],
        );
        assert!(matches!(err, Err(CoreError::OverlappingMerge(3))));
        assert!(merge_labels(&LabelMap::identity(), &[(Writing, Writing)]).is_err());
    }

    #[test]
    fn mapping_table_lists_every_label() {
        let m = merge_labels(&LabelMap::identity(), &DEFAULT_MERGE_PAIRS).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 10);
        assert!(csv.contains("3,BrushTeeth,2,HairBrush+BrushTeeth"));
        assert!(csv.contains("9,WashFace,7,WashFace"));
    }
}
