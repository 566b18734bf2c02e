use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ActionLabel;
use crate::{CoreError, Result};

/// Recording identifier shared by the IMU and skeleton files of one segment,
/// written as `<participant>_<session>_<label>_<seq>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordingId {
    pub participant: String,
    pub session: String,
    pub label: ActionLabel,
    pub seq: u32,
}

impl RecordingId {
    pub fn new(participant: &str, session: &str, label: ActionLabel, seq: u32) -> Result<Self> {
        for (what, v) in [("participant", participant), ("session", session)] {
            if v.is_empty() || v.contains(['_', '/', '\\']) {
                return Err(CoreError::invalid(format!(
                    "{what} {v:?} must be non-empty without '_' or path separators"
                )));
            }
        }
        Ok(RecordingId {
            participant: participant.to_string(),
            session: session.to_string(),
            label,
            seq,
        })
    }

    /// Parses the file stem of `path`.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        path.file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CoreError::invalid(format!("{}: no usable file name", path.display())))?
            .parse()
    }
}

impl fmt::Display for RecordingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_{}_{}_{:03}",
            self.participant,
            self.session,
            self.label.index(),
            self.seq
        )
    }
}

impl FromStr for RecordingId {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('_').collect();
        let bad = || {
            CoreError::invalid(format!(
                "recording id {s:?} does not match <participant>_<session>_<label>_<seq>"
            ))
        };
        if parts.len() != 4 {
            return Err(bad());
        }
        let label = parts[2]
            .parse::<u8>()
            .map_err(|_| bad())
            .and_then(ActionLabel::from_index)?;
        let seq = parts[3].parse::<u32>().map_err(|_| bad())?;
        RecordingId::new(parts[0], parts[1], label, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_display() {
        let id = RecordingId::new("Stroke03", "s12", ActionLabel::Writing, 7).unwrap();
        assert_eq!(id.to_string(), "Stroke03_s12_6_007");
        assert_eq!(id.to_string().parse::<RecordingId>().unwrap(), id);
    }

    #[test]
    fn rejects_malformed_ids() {
        for bad in [
            "ND01_s1_3",
            "ND01_s1_10_1",
            "ND01_s1_3_x",
            "_s1_3_1",
            "a_b_c_d_e",
        ] {
            assert!(bad.parse::<RecordingId>().is_err(), "{bad}");
        }
        assert!(RecordingId::new("ND_01", "s1", ActionLabel::Writing, 0).is_err());
    }
}
