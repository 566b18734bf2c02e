//! Segments, labels, participants, splits and the on-disk formats.

mod corpus;
mod imu;
mod labels;
mod participant;
mod recording;
mod skeleton;
mod split;

pub use corpus::{Corpus, PairedSample};
pub use imu::{parse_imu_csv, read_imu_csv, write_imu_csv, ImuSegment, IMU_CHANNELS, IMU_HEADER};
pub use labels::{merge_labels, ActionLabel, LabelMap, DEFAULT_MERGE_PAIRS};
pub use participant::{
    read_participants_csv, write_participants_csv, Gender, Group, ParticipantMeta, Roster, Side,
};
pub use recording::RecordingId;
pub use skeleton::{
    parse_skeleton_json, read_skeleton_json, write_skeleton_json, Frame, SkeletonSequence,
    NUM_KEYPOINTS,
};
pub use split::{split_dataset, DatasetSplit, SplitConfig, SplitMode};
