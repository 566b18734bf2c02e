use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use super::{ActionLabel, RecordingId};
use crate::{CoreError, Real, Result};

pub const NUM_KEYPOINTS: usize = 53;

/// `(x, y, confidence)` for every keypoint of one video frame.
pub type Frame = [[Real; 3]; NUM_KEYPOINTS];

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub id: RecordingId,
    frames: Vec<Frame>,
}

impl SkeletonSequence {
    pub fn new(id: RecordingId, frames: Vec<Frame>) -> Result<Self> {
        validate_frames(&frames, &id.to_string())?;
        Ok(SkeletonSequence { id, frames })
    }

    pub fn participant(&self) -> &str {
        &self.id.participant
    }

    pub fn label(&self) -> ActionLabel {
        self.id.label
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Replaces the frames, keeping the id. The new frames are validated.
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self> {
        SkeletonSequence::new(self.id.clone(), frames)
    }
}

fn validate_frames(frames: &[Frame], source_name: &str) -> Result<()> {
    if frames.is_empty() {
        return Err(CoreError::invalid(format!(
            "{source_name}: sequence has no frames"
        )));
    }
    for (t, frame) in frames.iter().enumerate() {
        for (k, &[x, y, c]) in frame.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(CoreError::ConfidenceRange {
                    source_name: source_name.to_string(),
                    frame: t,
                    keypoint: k,
                    value: c as f64,
                });
            }
            if !x.is_finite() || !y.is_finite() {
                return Err(CoreError::invalid(format!(
                    "{source_name}: frame {t} keypoint {k} has non-finite coordinates"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawSequence {
    participant: String,
    label: RawLabel,
    frames: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Index(u8),
    Name(String),
}

/// Parses a skeleton JSON document. The recording id comes from the file
/// name and must agree with the participant and label stored inside.
pub fn parse_skeleton_json(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let id = RecordingId::from_path(path)?;
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_skeleton_json(BufReader::new(f), id, &path.display().to_string())
}

pub fn read_skeleton_json(
    reader: impl Read,
    id: RecordingId,
    source_name: &str,
) -> Result<SkeletonSequence> {
    let raw: RawSequence = serde_json::from_reader(reader).map_err(|e| CoreError::Parse {
        source_name: source_name.to_string(),
        line: e.line() as u64,
        msg: e.to_string(),
    })?;
    let label = match raw.label {
        RawLabel::Index(i) => ActionLabel::from_index(i)?,
        RawLabel::Name(s) => s.parse()?,
    };
    if raw.participant != id.participant || label != id.label {
        return Err(CoreError::invalid(format!(
            "{source_name}: document says participant {} label {}, file name says {}",
            raw.participant,
            label.index(),
            id
        )));
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (t, kps) in raw.frames.iter().enumerate() {
        if kps.len() != NUM_KEYPOINTS {
            return Err(CoreError::KeypointCount {
                source_name: source_name.to_string(),
                frame: t,
                found: kps.len(),
                expected: NUM_KEYPOINTS,
            });
        }
        let mut frame = [[0.0; 3]; NUM_KEYPOINTS];
        for (k, triple) in kps.iter().enumerate() {
            if triple.len() != 3 {
                return Err(CoreError::invalid(format!(
                    "{source_name}: frame {t} keypoint {k} has {} values, expected (x, y, confidence)",
                    triple.len()
                )));
            }
            frame[k] = [triple[0] as Real, triple[1] as Real, triple[2] as Real];
        }
        frames.push(frame);
    }
    validate_frames(&frames, source_name)?;
    Ok(SkeletonSequence { id, frames })
}

struct FramesRef<'a>(&'a [Frame]);
struct FrameRef<'a>(&'a Frame);

impl Serialize for FramesRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for f in self.0 {
            seq.serialize_element(&FrameRef(f))?;
        }
        seq.end()
    }
}

impl Serialize for FrameRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(NUM_KEYPOINTS))?;
        for kp in self.0 {
            seq.serialize_element(kp)?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct Document<'a> {
    participant: &'a str,
    label: u8,
    frames: FramesRef<'a>,
}

pub fn write_skeleton_json(seq: &SkeletonSequence, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let doc = Document {
        participant: seq.participant(),
        label: seq.label().index(),
        frames: FramesRef(&seq.frames),
    };
    serde_json::to_writer(&mut w, &doc).map_err(|e| CoreError::invalid(e.to_string()))?;
    w.flush()
        .map_err(|e| CoreError::io(format!("<skeleton {}>", seq.id), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id() -> RecordingId {
        "Stroke02_s3_7_004".parse().unwrap()
    }

    fn doc(frames: &str) -> String {
        format!(r#"{{"participant":"Stroke02","label":7,"frames":{frames}}}"#)
    }

    fn frame_json(n: usize, c: f64) -> String {
        let kps: Vec<String> = (0..n).map(|k| format!("[{k}.5,{},{c}]", k * 2)).collect();
        format!("[{}]", kps.join(","))
    }

    #[test]
    fn single_frame_parses() {
        let text = doc(&format!("[{}]", frame_json(53, 0.9)));
        let seq = read_skeleton_json(text.as_bytes(), id(), "s.json").unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.frames()[0][52], [52.5, 104.0, 0.9]);
    }

    #[test]
    fn keypoint_count_is_checked() {
        let text = doc(&format!(
            "[{},{}]",
            frame_json(53, 0.5),
            frame_json(17, 0.5)
        ));
        match read_skeleton_json(text.as_bytes(), id(), "s.json") {
            Err(CoreError::KeypointCount { frame, found, .. }) => {
                assert_eq!((frame, found), (1, 17))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn confidence_range_is_checked() {
        let text = doc(&format!("[{}]", frame_json(53, 1.5)));
        assert!(matches!(
            read_skeleton_json(text.as_bytes(), id(), "s.json"),
            Err(CoreError::ConfidenceRange { frame: 0, .. })
        ));
    }

    #[test]
    fn document_must_agree_with_file_name() {
        let text = format!(
            r#"{{"participant":"ND01","label":7,"frames":[{}]}}"#,
            frame_json(53, 0.5)
        );
        assert!(read_skeleton_json(text.as_bytes(), id(), "s.json").is_err());
        let text = format!(
            r#"{{"participant":"Stroke02","label":"FoldingPaper","frames":[{}]}}"#,
            frame_json(53, 0.5)
        );
        assert!(read_skeleton_json(text.as_bytes(), id(), "s.json").is_ok());
    }

    #[test]
    fn write_then_read_is_exact() {
        let frames: Vec<Frame> = (0..5)
            .map(|t| {
                let mut f = [[0.0; 3]; NUM_KEYPOINTS];
                for (k, kp) in f.iter_mut().enumerate() {
                    *kp = [
                        t as Real * 1.25 + k as Real / 7.0,
                        300.0 - k as Real,
                        (k % 10) as Real / 10.0,
                    ];
                }
                f
            })
            .collect();
        let seq = SkeletonSequence::new(id(), frames).unwrap();
        let mut buf = Vec::new();
        write_skeleton_json(&seq, &mut buf).unwrap();
        let back = read_skeleton_json(&buf[..], id(), "s.json").unwrap();
        assert_eq!(back, seq);
    }
}
