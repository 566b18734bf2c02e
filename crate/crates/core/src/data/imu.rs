use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ActionLabel, RecordingId};
use crate::{CoreError, Real, Result};

pub const IMU_CHANNELS: usize = 12;

pub const IMU_HEADER: [&str; IMU_CHANNELS + 1] = [
    "t", "lacc_x", "lacc_y", "lacc_z", "lgyr_x", "lgyr_y", "lgyr_z", "racc_x", "racc_y", "racc_z",
    "rgyr_x", "rgyr_y", "rgyr_z",
];

/// Two wrist sensors × (accelerometer, gyroscope) × 3 axes for one action.
///
/// Channel order: LH-acc xyz, LH-gyr xyz, RH-acc xyz, RH-gyr xyz.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuSegment {
    pub id: RecordingId,
    samples: Vec<Real>,
}

impl ImuSegment {
    pub fn new(id: RecordingId, samples: Vec<Real>) -> Result<Self> {
        if samples.is_empty() || samples.len() % IMU_CHANNELS != 0 {
            return Err(CoreError::invalid(format!(
                "{id}: {} values do not form a non-empty T x {IMU_CHANNELS} matrix",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::invalid(format!(
                "{id}: non-finite value at step {} channel {}",
                i / IMU_CHANNELS,
                i % IMU_CHANNELS
            )));
        }
        Ok(ImuSegment { id, samples })
    }

    pub fn participant(&self) -> &str {
        &self.id.participant
    }

    pub fn label(&self) -> ActionLabel {
        self.id.label
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.samples.len() / IMU_CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Row-major `T x 12` values.
    pub fn samples(&self) -> &[Real] {
        &self.samples
    }

    pub fn row(&self, t: usize) -> &[Real] {
        &self.samples[t * IMU_CHANNELS..(t + 1) * IMU_CHANNELS]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = Real> + '_ {
        self.samples.iter().skip(c).step_by(IMU_CHANNELS).copied()
    }

    pub(crate) fn with_samples(&self, samples: Vec<Real>) -> Result<Self> {
        ImuSegment::new(self.id.clone(), samples)
    }
}

/// Parses an IMU CSV; participant and label come from the file name.
pub fn parse_imu_csv(path: impl AsRef<Path>) -> Result<ImuSegment> {
    let path = path.as_ref();
    let id = RecordingId::from_path(path)?;
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_imu_csv(BufReader::new(f), id, &path.display().to_string())
}

pub fn read_imu_csv(reader: impl Read, id: RecordingId, source_name: &str) -> Result<ImuSegment> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let parse_err = |line: u64, msg: String| CoreError::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            parse_err(
                e.position().map_or(0, |p| p.line()),
                format!("malformed row: {e}"),
            )
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != IMU_HEADER.len() {
            return Err(CoreError::ColumnCount {
                source_name: source_name.to_string(),
                line,
                expected: IMU_HEADER.len(),
                found: record.len(),
            });
        }
        if first {
            first = false;
            if record.iter().map(str::trim).ne(IMU_HEADER.iter().copied()) {
                return Err(parse_err(
                    line,
                    format!("header must be {}", IMU_HEADER.join(",")),
                ));
            }
            continue;
        }
        for (col, cell) in record.iter().enumerate() {
            let v: Real = cell.trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("non-numeric cell {cell:?} in column {}", IMU_HEADER[col]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite cell in column {}", IMU_HEADER[col]),
                ));
            }
            if col > 0 {
                samples.push(v);
            }
        }
    }
    if first {
        return Err(parse_err(1, "missing header".into()));
    }
    if samples.is_empty() {
        return Err(parse_err(2, "no samples".into()));
    }
    ImuSegment::new(id, samples)
}

/// Writes the segment with `t` = step index. Values use the shortest
/// representation that parses back to the same number.
pub fn write_imu_csv(seg: &ImuSegment, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let io = |e| CoreError::io(format!("<imu {}>", seg.id), e);
    writeln!(w, "{}", IMU_HEADER.join(",")).map_err(io)?;
    for t in 0..seg.len() {
        write!(w, "{t}").map_err(io)?;
        for v in seg.row(t) {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
