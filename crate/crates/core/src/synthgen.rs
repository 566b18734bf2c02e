//! Deterministic synthetic stand-in for the clinical recordings.
//!
//! Every label gets an IMU motif (a few sinusoids per channel on top of an
//! offset) and a pair of wrist paths (closed splines through anchor poses).
//! Samples add participant style, tempo/phase jitter and group-scaled noise.
//! Coupled labels copy their partner's motif and differ only by a small
//! perturbation on a few IMU channels and in hand shape.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    merge_labels, ActionLabel, Corpus, Frame, Gender, Group, ImuSegment, LabelMap, PairedSample,
    ParticipantMeta, RecordingId, Roster, Side, SkeletonSequence, IMU_CHANNELS, NUM_KEYPOINTS,
};
use crate::skeleton_pipeline::keypoints;
use crate::{seeds, CoreError, Real, Result};

/// Normal distribution clamped to `[min, max]`, in samples or frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

impl LengthDist {
    pub fn at(&self, z: f64) -> usize {
        let v = (self.mean + self.std * z).round();
        (v.max(0.0) as usize).clamp(self.min, self.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLengths {
    pub imu: LengthDist,
    pub skeleton: LengthDist,
}

impl GroupLengths {
    pub fn nd() -> Self {
        GroupLengths {
            imu: LengthDist {
                mean: 414.0,
                std: 237.0,
                min: 151,
                max: 2386,
            },
            skeleton: LengthDist {
                mean: 411.0,
                std: 235.0,
                min: 100,
                max: 2852,
            },
        }
    }

    pub fn stroke() -> Self {
        GroupLengths {
            imu: LengthDist {
                mean: 904.0,
                std: 649.0,
                min: 155,
                max: 4343,
            },
            skeleton: LengthDist {
                mean: 570.0,
                std: 519.0,
                min: 90,
                max: 5464,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub nd: usize,
    pub stroke: usize,
    pub sessions: usize,
    /// Segments per label per session.
    pub repeats: usize,
    pub noise_nd: f64,
    pub noise_stroke: f64,
    pub couplings: Vec<(ActionLabel, ActionLabel)>,
    /// Amplitude of the extra motif that tells a coupled label from its partner.
    pub coupling_gap: f64,
    /// IMU channels that carry that extra motif.
    pub coupled_channels: usize,
    pub nd_lengths: GroupLengths,
    pub stroke_lengths: GroupLengths,
    /// Every IMU segment must hold at least this many samples.
    pub min_imu_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            nd: 8,
            stroke: 4,
            sessions: 8,
            repeats: 1,
            noise_nd: 0.3,
            noise_stroke: 1.0,
            couplings: vec![
                (ActionLabel::HairBrush, ActionLabel::BrushTeeth),
                (ActionLabel::FoldingPaper, ActionLabel::FoldUpTower),
            ],
            coupling_gap: 0.6,
            coupled_channels: 3,
            nd_lengths: GroupLengths::nd(),
            stroke_lengths: GroupLengths::stroke(),
            min_imu_len: 120,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nd + self.stroke == 0 || self.sessions == 0 || self.repeats == 0 {
            return Err(CoreError::config(
                "need at least one participant, session and repeat",
            ));
        }
        if self.nd > 99 || self.stroke > 99 || self.sessions > 999 || self.repeats > 999 {
            return Err(CoreError::config(
                "at most 99 participants per group and 999 sessions or repeats",
            ));
        }
        for n in [self.noise_nd, self.noise_stroke, self.coupling_gap] {
            if !(n.is_finite() && n >= 0.0) {
                return Err(CoreError::config(
                    "noise scales and coupling gap must be finite and non-negative",
                ));
            }
        }
        if self.coupled_channels == 0 || self.coupled_channels > IMU_CHANNELS {
            return Err(CoreError::config(format!(
                "coupled channels must be in 1..={IMU_CHANNELS}"
            )));
        }
        merge_labels(&LabelMap::identity(), &self.couplings)?;
        for (name, g) in [("ND", &self.nd_lengths), ("Stroke", &self.stroke_lengths)] {
            for (m, d) in [("imu", &g.imu), ("skeleton", &g.skeleton)] {
                if !(d.mean.is_finite() && d.std.is_finite() && d.std >= 0.0)
                    || d.min > d.max
                    || d.min == 0
                {
                    return Err(CoreError::config(format!(
                        "{name} {m} length distribution is unsatisfiable"
                    )));
                }
            }
            if g.imu.min < self.min_imu_len {
                return Err(CoreError::config(format!(
                    "{name} IMU lengths clamp at {} which is below the required {}",
                    g.imu.min, self.min_imu_len
                )));
            }
        }
        Ok(())
    }

    pub fn noise(&self, group: Group) -> f64 {
        match group {
            Group::ND => self.noise_nd,
            Group::Stroke => self.noise_stroke,
        }
    }

    pub fn lengths(&self, group: Group) -> &GroupLengths {
        match group {
            Group::ND => &self.nd_lengths,
            Group::Stroke => &self.stroke_lengths,
        }
    }

    pub fn participant_ids(&self) -> Vec<(String, Group)> {
        let nd = (1..=self.nd).map(|i| (format!("ND{i:02}"), Group::ND));
        let st = (1..=self.stroke).map(|i| (format!("ST{i:02}"), Group::Stroke));
        nd.chain(st).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinusoid {
    pub amp: f64,
    /// Cycles per 100 samples.
    pub freq: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMotif {
    pub offset: f64,
    pub parts: Vec<Sinusoid>,
}

impl ChannelMotif {
    fn value(&self, t: f64, phase_jitter: &[f64]) -> f64 {
        self.offset
            + self
                .parts
                .iter()
                .zip(phase_jitter.iter().chain(std::iter::repeat(&0.0)))
                .map(|(s, j)| s.amp * (2.0 * PI * s.freq * t / 100.0 + s.phase + j).sin())
                .sum::<f64>()
    }
}

/// Closed path through four anchor points in body units (shoulder widths,
/// origin at the shoulder midpoint, y pointing down).
#[derive(Clone, Debug, PartialEq)]
pub struct WristPath {
    pub anchors: [[f64; 2]; 4],
    /// Loops per 100 frames.
    pub rate: f64,
}

impl WristPath {
    /// Closed Catmull-Rom spline at loop position `u` (any real; wraps).
    pub fn at(&self, u: f64) -> [f64; 2] {
        let s = u.rem_euclid(1.0) * 4.0;
        let i = (s.floor() as usize).min(3);
        let f = s - i as f64;
        let p = |k: usize| self.anchors[(i + k + 3) % 4];
        let (p0, p1, p2, p3) = (p(0), p(1), p(2), p(3));
        std::array::from_fn(|d| {
            0.5 * (2.0 * p1[d]
                + (-p0[d] + p2[d]) * f
                + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * f * f
                + (-p0[d] + 3.0 * p1[d] - 3.0 * p2[d] + p3[d]) * f * f * f)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelPrototype {
    pub imu: Vec<ChannelMotif>,
    /// Left then right wrist.
    pub wrists: [WristPath; 2],
    /// 0 = fist, 1 = flat hand.
    pub openness: f64,
    pub spread: f64,
}

/// Motifs for all nine labels, indexed by [`ActionLabel::ordinal`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub labels: Vec<LabelPrototype>,
}

impl Prototypes {
    pub fn get(&self, label: ActionLabel) -> &LabelPrototype {
        &self.labels[label.ordinal()]
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn fresh_motif(rng: &mut ChaCha8Rng) -> ChannelMotif {
    let n = rng.gen_range(2..=4);
    ChannelMotif {
        offset: rng.gen_range(-1.0..1.0),
        parts: (0..n)
            .map(|_| Sinusoid {
                amp: rng.gen_range(0.3..1.0),
                freq: rng.gen_range(0.5..3.0),
                phase: rng.gen_range(0.0..2.0 * PI),
            })
            .collect(),
    }
}

fn fresh_path(rng: &mut ChaCha8Rng, side: f64, active: bool) -> WristPath {
    let (center, reach) = if active {
        (
            [side * rng.gen_range(-0.2..1.0), rng.gen_range(0.3..1.6)],
            0.45,
        )
    } else {
        // resting hand near the hip
        ([side * 0.45, 1.5], 0.05)
    };
    WristPath {
        anchors: std::array::from_fn(|_| {
            [
                center[0] + rng.gen_range(-reach..reach),
                center[1] + rng.gen_range(-reach..reach),
            ]
        }),
        rate: rng.gen_range(0.4..1.2),
    }
}

/// Label motifs drawn from the generator seed.
pub fn prototypes(cfg: &GenConfig) -> Prototypes {
    let mut rng = seeds::rng(cfg.seed, &[seeds::hash_str("prototypes")]);
    let mut labels: Vec<LabelPrototype> = ActionLabel::ALL
        .iter()
        .map(|_| {
            let imu = (0..IMU_CHANNELS).map(|_| fresh_motif(&mut rng)).collect();
            let (left, right) = match rng.gen_range(0..3) {
                0 => (true, true),
                1 => (false, true),
                _ => (true, false),
            };
            LabelPrototype {
                imu,
                wrists: [
                    fresh_path(&mut rng, 1.0, left),
                    fresh_path(&mut rng, -1.0, right),
                ],
                openness: rng.gen_range(0.0..1.0),
                spread: rng.gen_range(0.15..0.35),
            }
        })
        .collect();
    for &(a, b) in &cfg.couplings {
        let mut p = labels[a.ordinal()].clone();
        for c in sample(&mut rng, IMU_CHANNELS, cfg.coupled_channels).into_iter() {
            let extra = fresh_motif(&mut rng);
            p.imu[c].offset += cfg.coupling_gap * extra.offset;
            p.imu[c]
                .parts
                .extend(extra.parts.into_iter().map(|s| Sinusoid {
                    amp: s.amp * cfg.coupling_gap,
                    ..s
                }));
        }
        p.openness = if p.openness > 0.5 {
            p.openness - 0.3
        } else {
            p.openness + 0.3
        };
        labels[b.ordinal()] = p;
    }
    Prototypes { labels }
}

/// Per-participant habits shared by all of their recordings.
#[derive(Clone, Debug, PartialEq)]
struct Style {
    imu_gain: [f64; IMU_CHANNELS],
    amp: f64,
    tempo: f64,
    body_scale: f64,
    body_shift: [f64; 2],
}

impl Style {
    fn new(seed: u64, participant: &str) -> Self {
        let mut rng = seeds::rng(
            seed,
            &[seeds::hash_str("style"), seeds::hash_str(participant)],
        );
        Style {
            imu_gain: std::array::from_fn(|_| 1.0 + 0.08 * normal(&mut rng)),
            amp: 1.0 + 0.08 * normal(&mut rng),
            tempo: 1.0 + 0.05 * normal(&mut rng),
            body_scale: 1.0 + 0.08 * normal(&mut rng),
            body_shift: [25.0 * normal(&mut rng), 15.0 * normal(&mut rng)],
        }
    }
}

fn roster(cfg: &GenConfig) -> Result<Roster> {
    let metas = cfg.participant_ids().into_iter().map(|(id, group)| {
        let mut rng = seeds::rng(cfg.seed, &[seeds::hash_str("meta"), seeds::hash_str(&id)]);
        let side = |r: &mut ChaCha8Rng| if r.gen_bool(0.85) { Side::R } else { Side::L };
        let stroke = group == Group::Stroke;
        let handedness = side(&mut rng);
        let gender = Some(if rng.gen_bool(0.5) {
            Gender::F
        } else {
            Gender::M
        });
        let age = if stroke {
            rng.gen_range(45..80)
        } else {
            rng.gen_range(22..60)
        };
        ParticipantMeta {
            id,
            group,
            handedness,
            affected_side: stroke.then(|| if rng.gen_bool(0.5) { Side::L } else { Side::R }),
            gender,
            age,
            onset_months: stroke.then(|| rng.gen_range(2..120)),
            mas: stroke.then(|| format!("G{}/G{}", rng.gen_range(0..3), rng.gen_range(0..2))),
        }
    });
    Roster::new(metas)
}

fn round_to(v: f64, step: f64) -> Real {
    ((v / step).round() * step) as Real
}

struct SampleSpec<'a> {
    id: RecordingId,
    group: Group,
    style: &'a Style,
    proto: &'a LabelPrototype,
}

fn imu_samples(spec: &SampleSpec, len: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Real> {
    const RHO: f64 = 0.98;
    let tempo = spec.style.tempo * (1.0 + 0.05 * normal(rng));
    let amp = spec.style.amp * (1.0 + 0.1 * normal(rng));
    let t0: f64 = rng.gen_range(0.0..1000.0);
    let jitter: Vec<Vec<f64>> = spec
        .proto
        .imu
        .iter()
        .map(|m| m.parts.iter().map(|_| 0.1 * normal(rng)).collect())
        .collect();
    let offsets: Vec<f64> = (0..IMU_CHANNELS)
        .map(|_| 0.5 * sigma * normal(rng))
        .collect();
    let mut ar: Vec<f64> = (0..IMU_CHANNELS)
        .map(|_| 0.5 * sigma * normal(rng))
        .collect();
    let innov = 0.5 * sigma * (1.0 - RHO * RHO).sqrt();
    let mut out = Vec::with_capacity(len * IMU_CHANNELS);
    for t in 0..len {
        let time = tempo * (t as f64 + t0);
        for c in 0..IMU_CHANNELS {
            ar[c] = RHO * ar[c] + innov * normal(rng);
            let clean = spec.style.imu_gain[c] * amp * spec.proto.imu[c].value(time, &jitter[c]);
            let v = clean + offsets[c] + ar[c] + sigma * normal(rng);
            out.push(v as Real);
        }
    }
    out
}

/// Shoulder width in pixels before participant scaling.
const BODY_UNIT: f64 = 150.0;
const IMAGE_CENTER: [f64; 2] = [320.0, 190.0];
/// Lengths of the four bones of every finger in body units.
const FINGER_BONES: [f64; 4] = [0.07, 0.05, 0.035, 0.03];

fn rotate(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

fn hand(
    points: &mut [[f64; 2]],
    wrist: [f64; 2],
    elbow: [f64; 2],
    openness: f64,
    spread: f64,
    side: f64,
    unit: f64,
) {
    let d = [wrist[0] - elbow[0], wrist[1] - elbow[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
    let dir = [d[0] / n, d[1] / n];
    let curl = (1.0 - openness) * 0.7;
    points[0] = wrist;
    for finger in 0..5 {
        let mut a = side * (finger as f64 - 2.0) * spread * (0.6 + openness);
        let mut p = wrist;
        for (j, bone) in FINGER_BONES.iter().enumerate() {
            let v = rotate(dir, a);
            p = [p[0] + v[0] * bone * unit, p[1] + v[1] * bone * unit];
            points[1 + finger * 4 + j] = p;
            a += side * curl;
        }
    }
}

fn skeleton_frames(spec: &SampleSpec, len: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Frame> {
    use keypoints::*;
    let unit = BODY_UNIT * spec.style.body_scale * (1.0 + 0.03 * normal(rng));
    let center = [
        IMAGE_CENTER[0] + spec.style.body_shift[0] + 5.0 * normal(rng),
        IMAGE_CENTER[1] + spec.style.body_shift[1] + 5.0 * normal(rng),
    ];
    let tempo = spec.style.tempo * (1.0 + 0.05 * normal(rng));
    let f0: f64 = rng.gen_range(0.0..1000.0);
    let jitter_px = 8.0 * sigma;
    let wobble_std = 0.04 * sigma;
    let mut wobble = [[0.0f64; 2]; 2];
    let to_px = |p: [f64; 2]| [center[0] + p[0] * unit, center[1] + p[1] * unit];
    let mut frames = Vec::with_capacity(len);
    for f in 0..len {
        let mut pts = [[0.0f64; 2]; NUM_KEYPOINTS];
        let sway = 0.03 * (2.0 * PI * tempo * (f as f64 + f0) / 250.0).sin();
        let head = |dx: f64, dy: f64| to_px([dx + sway, dy]);
        pts[NOSE] = head(0.0, -0.55);
        pts[LEFT_EYE] = head(0.08, -0.62);
        pts[RIGHT_EYE] = head(-0.08, -0.62);
        pts[LEFT_EAR] = head(0.18, -0.58);
        pts[RIGHT_EAR] = head(-0.18, -0.58);
        let shoulders = [[0.5, 0.0], [-0.5, 0.0]];
        pts[LEFT_SHOULDER] = to_px(shoulders[0]);
        pts[RIGHT_SHOULDER] = to_px(shoulders[1]);
        for (w, side) in [(0usize, 1.0f64), (1, -1.0)] {
            for d in 0..2 {
                wobble[w][d] =
                    0.95 * wobble[w][d] + wobble_std * (1.0 - 0.95f64 * 0.95).sqrt() * normal(rng);
            }
            let path = &spec.proto.wrists[w];
            let u = path.rate * tempo * (f as f64 + f0) / 100.0;
            let p = path.at(u);
            let wrist = [p[0] + wobble[w][0], p[1] + wobble[w][1]];
            let s = shoulders[w];
            let mid = [(s[0] + wrist[0]) / 2.0, (s[1] + wrist[1]) / 2.0];
            let d = [wrist[0] - s[0], wrist[1] - s[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
            let mut n = [d[1] / len, -d[0] / len];
            if n[0] * side < 0.0 {
                n = [-n[0], -n[1]];
            }
            let bend = 0.05 + 0.3 * (1.0 - len / 1.6).max(0.0);
            let elbow = [mid[0] + n[0] * bend, mid[1] + n[1] * bend];
            let (wi, ei, hi) = if w == 0 {
                (LEFT_WRIST, LEFT_ELBOW, LEFT_HAND)
            } else {
                (RIGHT_WRIST, RIGHT_ELBOW, RIGHT_HAND)
            };
            let wrist_px = to_px(wrist);
            let elbow_px = to_px(elbow);
            pts[wi] = wrist_px;
            pts[ei] = elbow_px;
            hand(
                &mut pts[hi..hi + HAND_POINTS],
                wrist_px,
                elbow_px,
                spec.proto.openness,
                spec.proto.spread,
                side,
                unit,
            );
        }
        let frame: Frame = std::array::from_fn(|k| {
            let conf: f64 = if rng.gen_bool(0.02) {
                rng.gen_range(0.0..0.3)
            } else {
                rng.gen_range(0.75..1.0)
            };
            [
                round_to(pts[k][0] + jitter_px * normal(rng), 1e-3),
                round_to(pts[k][1] + jitter_px * normal(rng), 1e-3),
                round_to(conf, 1e-4),
            ]
        });
        frames.push(frame);
    }
    frames
}

fn sample_rng(cfg: &GenConfig, id: &RecordingId) -> ChaCha8Rng {
    seeds::rng(
        cfg.seed,
        &[
            seeds::hash_str("sample"),
            seeds::hash_str(&id.participant),
            seeds::hash_str(&id.session),
            id.label.index() as u64,
            id.seq as u64,
        ],
    )
}

/// `(imu, skeleton)` lengths; one normal draw feeds both so long IMU
/// recordings come with long skeleton clips.
fn draw_lengths(lengths: &GroupLengths, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let z = normal(rng);
    (lengths.imu.at(z), lengths.skeleton.at(z))
}

/// Lengths the generator gives recording `id` of a `group` participant.
pub fn segment_lengths(cfg: &GenConfig, group: Group, id: &RecordingId) -> (usize, usize) {
    draw_lengths(cfg.lengths(group), &mut sample_rng(cfg, id))
}

fn generate_sample(cfg: &GenConfig, spec: &SampleSpec) -> Result<PairedSample> {
    let id = &spec.id;
    let mut rng = sample_rng(cfg, id);
    let sigma = cfg.noise(spec.group);
    let (imu_len, skel_len) = draw_lengths(cfg.lengths(spec.group), &mut rng);
    let imu = ImuSegment::new(id.clone(), imu_samples(spec, imu_len, sigma, &mut rng))?;
    let skeleton =
        SkeletonSequence::new(id.clone(), skeleton_frames(spec, skel_len, sigma, &mut rng))?;
    PairedSample::new(imu, skeleton)
}

/// Builds the whole corpus in memory; write it with [`Corpus::write`].
pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let roster = roster(cfg)?;
    let protos = prototypes(cfg);
    let styles: Vec<(String, Group, Style)> = cfg
        .participant_ids()
        .into_iter()
        .map(|(id, g)| {
            let s = Style::new(cfg.seed, &id);
            (id, g, s)
        })
        .collect();
    let mut specs = Vec::new();
    for (pid, group, style) in &styles {
        for s in 1..=cfg.sessions {
            for label in ActionLabel::ALL {
                for seq in 1..=cfg.repeats {
                    specs.push(SampleSpec {
                        id: RecordingId::new(pid, &format!("s{s}"), label, seq as u32)?,
                        group: *group,
                        style,
                        proto: protos.get(label),
                    });
                }
            }
        }
    }
    let samples = specs
        .par_iter()
        .map(|spec| generate_sample(cfg, spec))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(roster, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LengthStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

pub fn length_stats(lengths: &[usize]) -> Option<LengthStats> {
    if lengths.is_empty() {
        return None;
    }
    let mut v = lengths.to_vec();
    v.sort_unstable();
    let n = v.len();
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    };
    Some(LengthStats {
        n,
        mean,
        std: var.sqrt(),
        min: v[0],
        median,
        max: v[n - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthRow {
    pub group: Group,
    pub modality: &'static str,
    #[serde(flatten)]
    pub stats: LengthStats,
}

/// Segment length statistics per group and modality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusReport {
    pub segments: usize,
    pub participants: usize,
    pub rows: Vec<LengthRow>,
}

pub const REPORT_COLUMNS: [&str; 8] =
    ["group", "modality", "n", "mean", "std", "min", "med", "max"];

impl CorpusReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let s = &r.stats;
            out.push_str(&format!(
                "{},{},{},{:.2},{:.2},{},{},{}\n",
                r.group, r.modality, s.n, s.mean, s.std, s.min, s.median, s.max
            ));
        }
        out
    }
}

impl fmt::Display for CorpusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} segments from {} participants",
            self.segments, self.participants
        )?;
        writeln!(
            f,
            "{:<7} {:<9} {:>6} {:>9} {:>9} {:>6} {:>8} {:>6}",
            "group", "modality", "n", "mean", "std", "min", "med", "max"
        )?;
        for r in &self.rows {
            let s = &r.stats;
            writeln!(
                f,
                "{:<7} {:<9} {:>6} {:>9.2} {:>9.2} {:>6} {:>8.1} {:>6}",
                r.group.to_string(),
                r.modality,
                s.n,
                s.mean,
                s.std,
                s.min,
                s.median,
                s.max
            )?;
        }
        Ok(())
    }
}

pub fn describe(corpus: &Corpus) -> Result<CorpusReport> {
    if corpus.is_empty() {
        return Err(CoreError::EmptyInput("corpus"));
    }
    let mut rows = Vec::new();
    for group in Group::ALL {
        let mut imu = Vec::new();
        let mut skel = Vec::new();
        for s in &corpus.samples {
            if corpus.roster.group_of(s.participant())? == group {
                imu.push(s.imu.len());
                skel.push(s.skeleton.len());
            }
        }
        for (modality, lengths) in [("imu", imu), ("skeleton", skel)] {
            if let Some(stats) = length_stats(&lengths) {
                rows.push(LengthRow {
                    group,
                    modality,
                    stats,
                });
            }
        }
    }
    Ok(CorpusReport {
        segments: corpus.len(),
        participants: corpus.roster.len(),
        rows,
    })
}
