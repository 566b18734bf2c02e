use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    ND,
    Stroke,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::ND, Group::Stroke];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::ND => "ND",
            Group::Stroke => "Stroke",
        })
    }
}

impl std::str::FromStr for Group {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ND" | "nd" => Ok(Group::ND),
            "Stroke" | "stroke" => Ok(Group::Stroke),
            _ => Err(CoreError::invalid(format!("unknown group {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    L,
    R,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

/// One row of the participant metadata table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantMeta {
    pub id: String,
    pub group: Group,
    pub handedness: Side,
    pub affected_side: Option<Side>,
    pub gender: Option<Gender>,
    pub age: u32,
    pub onset_months: Option<u32>,
    /// Modified Ashworth Scale grades as recorded, e.g. `G1/G0`.
    pub mas: Option<String>,
}

impl ParticipantMeta {
    pub fn validate(&self) -> Result<()> {
        let stroke = self.group == Group::Stroke;
        if self.id.is_empty() {
            return Err(CoreError::invalid("participant id is empty"));
        }
        if self.affected_side.is_some() != stroke || self.onset_months.is_some() != stroke {
            return Err(CoreError::invalid(format!(
                "participant {}: affected side and onset must be given exactly for Stroke participants",
                self.id
            )));
        }
        Ok(())
    }
}

/// Participant metadata keyed by id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Roster {
    by_id: BTreeMap<String, ParticipantMeta>,
}

impl Roster {
    pub fn new(participants: impl IntoIterator<Item = ParticipantMeta>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for p in participants {
            p.validate()?;
            let id = p.id.clone();
            if by_id.insert(id.clone(), p).is_some() {
                return Err(CoreError::invalid(format!("duplicate participant {id}")));
            }
        }
        Ok(Roster { by_id })
    }

    pub fn get(&self, id: &str) -> Result<&ParticipantMeta> {
        self.by_id
            .get(id)
            .ok_or_else(|| CoreError::UnknownParticipant(id.to_string()))
    }

    pub fn group_of(&self, id: &str) -> Result<Group> {
        self.get(id).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParticipantMeta> {
        self.by_id.values()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

pub fn read_participants_csv(reader: impl Read, source_name: &str) -> Result<Roster> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ParticipantMeta>() {
        let row = rec.map_err(|e| CoreError::Parse {
            source_name: source_name.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Roster::new(rows)
}

pub fn write_participants_csv(roster: &Roster, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in roster.iter() {
        w.serialize(p)
            .map_err(|e| CoreError::invalid(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| CoreError::io(Path::new("<participants>"), e))?;
    Ok(())
}
