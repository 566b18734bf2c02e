use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    parse_imu_csv, parse_skeleton_json, read_participants_csv, write_imu_csv,
    write_participants_csv, write_skeleton_json, ActionLabel, ImuSegment, RecordingId, Roster,
    SkeletonSequence,
};
use crate::{CoreError, Result};

/// One action performance seen by both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub imu: ImuSegment,
    pub skeleton: SkeletonSequence,
}

impl PairedSample {
    pub fn new(imu: ImuSegment, skeleton: SkeletonSequence) -> Result<Self> {
        if imu.participant() != skeleton.participant() || imu.label() != skeleton.label() {
            return Err(CoreError::invalid(format!(
                "cannot pair IMU {} with skeleton {}: participant or label differ",
                imu.id, skeleton.id
            )));
        }
        Ok(PairedSample { imu, skeleton })
    }

    pub fn id(&self) -> &RecordingId {
        &self.imu.id
    }

    pub fn participant(&self) -> &str {
        self.imu.participant()
    }

    pub fn label(&self) -> ActionLabel {
        self.imu.label()
    }
}

/// A directory of paired recordings:
///
/// ```text
/// dir/participants.csv
/// dir/imu/<participant>_<session>_<label>_<seq>.csv
/// dir/skeleton/<participant>_<session>_<label>_<seq>.json
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub roster: Roster,
    /// Sorted by recording id.
    pub samples: Vec<PairedSample>,
}

pub const PARTICIPANTS_FILE: &str = "participants.csv";
pub const IMU_DIR: &str = "imu";
pub const SKELETON_DIR: &str = "skeleton";

impl Corpus {
    pub fn new(roster: Roster, mut samples: Vec<PairedSample>) -> Result<Self> {
        for s in &samples {
            roster.get(s.participant())?;
        }
        samples.sort_by(|a, b| a.id().cmp(b.id()));
        if let Some(w) = samples.windows(2).find(|w| w[0].id() == w[1].id()) {
            return Err(CoreError::invalid(format!(
                "duplicate recording {}",
                w[0].id()
            )));
        }
        Ok(Corpus { roster, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Files the corpus is loaded from, sorted, relative to `dir`.
    pub fn files(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = vec![PathBuf::from(PARTICIPANTS_FILE)];
        for (sub, ext) in [(IMU_DIR, "csv"), (SKELETON_DIR, "json")] {
            for p in list(&dir.join(sub), ext)? {
                out.push(Path::new(sub).join(p.file_name().unwrap()));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = dir.join(PARTICIPANTS_FILE);
        let f = File::open(&meta).map_err(|e| CoreError::io(&meta, e))?;
        let roster = read_participants_csv(f, &meta.display().to_string())?;

        let index = |sub: &str, ext: &str| -> Result<BTreeMap<RecordingId, PathBuf>> {
            let mut m = BTreeMap::new();
            for p in list(&dir.join(sub), ext)? {
                m.insert(RecordingId::from_path(&p)?, p);
            }
            Ok(m)
        };
        let imu = index(IMU_DIR, "csv")?;
        let skel = index(SKELETON_DIR, "json")?;
        if let Some(id) = imu.keys().find(|k| !skel.contains_key(*k)) {
            return Err(CoreError::invalid(format!(
                "IMU recording {id} has no skeleton file"
            )));
        }
        if let Some(id) = skel.keys().find(|k| !imu.contains_key(*k)) {
            return Err(CoreError::invalid(format!(
                "skeleton recording {id} has no IMU file"
            )));
        }
        let samples = imu
            .into_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(id, ipath)| {
                PairedSample::new(parse_imu_csv(ipath)?, parse_skeleton_json(&skel[&id])?)
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(roster, samples)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in [IMU_DIR, SKELETON_DIR] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
        }
        let create = |p: PathBuf| {
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| CoreError::io(&p, e))
        };
        write_participants_csv(&self.roster, create(dir.join(PARTICIPANTS_FILE))?)?;
        self.samples.par_iter().try_for_each(|s| {
            write_imu_csv(
                &s.imu,
                create(dir.join(IMU_DIR).join(format!("{}.csv", s.id())))?,
            )?;
            write_skeleton_json(
                &s.skeleton,
                create(dir.join(SKELETON_DIR).join(format!("{}.json", s.id())))?,
            )
        })
    }
}

fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| CoreError::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
