//! z-score normalization, `[T, 4, 3]` image layout and sliding windows.

use serde::{Deserialize, Serialize};

use crate::data::{ImuSegment, RecordingId, IMU_CHANNELS};
use crate::tensor::Tensor;
use crate::{CoreError, Real, Result};

/// Image columns: LH-acc, LH-gyr, RH-acc, RH-gyr.
pub const IMAGE_COLUMNS: usize = 4;
pub const AXES: usize = 3;

pub const ACC_CHANNELS: [usize; 6] = [0, 1, 2, 6, 7, 8];
pub const GYR_CHANNELS: [usize; 6] = [3, 4, 5, 9, 10, 11];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScope {
    /// Statistics from the segment being normalized.
    #[default]
    Segment,
    /// Statistics pooled over every segment passed in together.
    Corpus,
}

impl std::str::FromStr for NormScope {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(NormScope::Segment),
            "corpus" => Ok(NormScope::Corpus),
            _ => Err(CoreError::config(format!(
                "norm scope {s:?} is not segment or corpus"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuPipelineConfig {
    pub window: usize,
    pub stride: usize,
    pub norm_scope: NormScope,
    pub eps: Real,
    /// Reflect-pad segments shorter than the window instead of failing.
    pub pad_short: bool,
}

impl Default for ImuPipelineConfig {
    fn default() -> Self {
        ImuPipelineConfig {
            window: 120,
            stride: 60,
            norm_scope: NormScope::Segment,
            eps: 1e-8,
            pad_short: false,
        }
    }
}

impl ImuPipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(CoreError::config("window and stride must be at least 1"));
        }
        if !(self.eps >= 0.0) {
            return Err(CoreError::config("eps must be non-negative"));
        }
        Ok(())
    }
}

/// Pooled mean and population std for (accelerometer, gyroscope).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub mean: [Real; 2],
    pub std: [Real; 2],
}

pub fn modality_stats<'a>(segs: impl IntoIterator<Item = &'a ImuSegment>) -> Result<ModalityStats> {
    let mut n = 0usize;
    let mut sum = [0.0 as Real; 2];
    let segs: Vec<&ImuSegment> = segs.into_iter().collect();
    for s in &segs {
        n += s.len();
        for t in 0..s.len() {
            let row = s.row(t);
            for (m, chans) in [ACC_CHANNELS, GYR_CHANNELS].iter().enumerate() {
                sum[m] += chans.iter().map(|&c| row[c]).sum::<Real>();
            }
        }
    }
    if n < 2 {
        return Err(CoreError::DegenerateSegment { len: n });
    }
    let count = (n * 6) as Real;
    let mean = sum.map(|s| s / count);
    let mut sq = [0.0 as Real; 2];
    for s in &segs {
        for t in 0..s.len() {
            let row = s.row(t);
            for (m, chans) in [ACC_CHANNELS, GYR_CHANNELS].iter().enumerate() {
                sq[m] += chans
                    .iter()
                    .map(|&c| (row[c] - mean[m]).powi(2))
                    .sum::<Real>();
            }
        }
    }
    Ok(ModalityStats {
        mean,
        std: sq.map(|s| (s / count).sqrt()),
    })
}

pub fn apply_stats(seg: &ImuSegment, stats: &ModalityStats, eps: Real) -> Result<ImuSegment> {
    let mut out = seg.samples().to_vec();
    for row in out.chunks_mut(IMU_CHANNELS) {
        for (m, chans) in [ACC_CHANNELS, GYR_CHANNELS].iter().enumerate() {
            for &c in chans {
                row[c] = (row[c] - stats.mean[m]) / (stats.std[m] + eps);
            }
        }
    }
    seg.with_samples(out)
}

/// Per-segment, per-modality z-score: one (mean, std) pair for the
/// accelerometer and one for the gyroscope, pooled over both wrists, all axes
/// and all steps.
pub fn zscore_normalize(seg: &ImuSegment, eps: Real) -> Result<ImuSegment> {
    let stats = modality_stats([seg])?;
    apply_stats(seg, &stats, eps)
}

/// `[T, 12] -> [T, 4, 3]`. The channel order already groups axes by column,
/// so this is a reshape.
pub fn to_image(seg: &ImuSegment) -> Tensor {
    Tensor::new([seg.len(), IMAGE_COLUMNS, AXES], seg.samples().to_vec())
        .expect("segment is T x 12")
}

/// Inverse of [`to_image`].
pub fn from_image(img: &Tensor) -> Result<Vec<Real>> {
    match img.shape() {
        [_, IMAGE_COLUMNS, AXES] => Ok(img.data().to_vec()),
        s => Err(CoreError::invalid(format!(
            "IMU image must be [T, 4, 3], got {s:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindowImage {
    /// `[window, 4, 3]`
    pub pixels: Tensor,
    pub source: RecordingId,
    pub start: usize,
}

/// `1 + floor((t - w) / s)` when `t >= w`.
pub fn window_count(t: usize, w: usize, s: usize) -> Option<usize> {
    (w >= 1 && s >= 1 && t >= w).then(|| 1 + (t - w) / s)
}

/// Reflects past the last row (edge row not repeated) until `len` rows exist.
pub fn reflect_pad(img: &Tensor, len: usize) -> Result<Tensor> {
    let t = img.shape()[0];
    if t == 0 {
        return Err(CoreError::EmptyInput("cannot pad an empty image"));
    }
    let row = img.numel() / t;
    let mut data = Vec::with_capacity(len * row);
    for i in 0..len {
        let src = if t == 1 {
            0
        } else {
            let p = i % (2 * (t - 1));
            if p < t {
                p
            } else {
                2 * (t - 1) - p
            }
        };
        data.extend_from_slice(&img.data()[src * row..(src + 1) * row]);
    }
    let mut shape = img.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::new(shape, data)?)
}

pub fn sliding_window(
    img: &Tensor,
    source: &RecordingId,
    window: usize,
    stride: usize,
    pad_short: bool,
) -> Result<Vec<ImuWindowImage>> {
    if window == 0 || stride == 0 {
        return Err(CoreError::config("window and stride must be at least 1"));
    }
    let t = img.shape()[0];
    if t < window {
        if !pad_short {
            return Err(CoreError::SegmentTooShort { len: t, window });
        }
        let padded = reflect_pad(img, window)?;
        return sliding_window(&padded, source, window, stride, false);
    }
    let row = img.numel() / t;
    let mut shape = img.shape().to_vec();
    shape[0] = window;
    let n = window_count(t, window, stride).expect("t >= window");
    (0..n)
        .map(|i| {
            let start = i * stride;
            let pixels = Tensor::new(
                shape.clone(),
                img.data()[start * row..(start + window) * row].to_vec(),
            )?;
            Ok(ImuWindowImage {
                pixels,
                source: source.clone(),
                start,
            })
        })
        .collect()
}

/// Normalize, lay out and window every segment. With corpus scope the
/// statistics are pooled over `segs`.
pub fn preprocess_imu(
    segs: &[&ImuSegment],
    cfg: &ImuPipelineConfig,
) -> Result<Vec<Vec<ImuWindowImage>>> {
    cfg.validate()?;
    let corpus_stats = match cfg.norm_scope {
        NormScope::Corpus => Some(modality_stats(segs.iter().copied())?),
        NormScope::Segment => None,
    };
    segs.iter()
        .map(|s| {
            let norm = match &corpus_stats {
                Some(st) => apply_stats(s, st, cfg.eps)?,
                None => zscore_normalize(s, cfg.eps)?,
            };
            sliding_window(
                &to_image(&norm),
                &s.id,
                cfg.window,
                cfg.stride,
                cfg.pad_short,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id() -> RecordingId {
        "ND01_s1_1_001".parse().unwrap()
    }

    fn seg(t: usize, f: impl Fn(usize, usize) -> Real) -> ImuSegment {
        let data = (0..t * 12).map(|i| f(i / 12, i % 12)).collect();
        ImuSegment::new(id(), data).unwrap()
    }

    #[test]
    fn constant_segment_normalizes_to_zero() {
        let s = zscore_normalize(&seg(10, |_, _| 3.5), 1e-8).unwrap();
        assert!(s.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_case_against_direct_formula() {
        // accelerometer values 1..=12 over two steps, gyroscope all 5
        let s = seg(2, |t, c| {
            if ACC_CHANNELS.contains(&c) {
                (t * 6 + ACC_CHANNELS.iter().position(|&a| a == c).unwrap() + 1) as Real
            } else {
                5.0
            }
        });
        let out = zscore_normalize(&s, 1e-8).unwrap();
        let mean = 6.5;
        let std = ((1..=12).map(|v| (v as Real - mean).powi(2)).sum::<Real>() / 12.0).sqrt();
        for t in 0..2 {
            for (j, &c) in ACC_CHANNELS.iter().enumerate() {
                let v = (t * 6 + j + 1) as Real;
                assert!((out.row(t)[c] - (v - mean) / (std + 1e-8)).abs() < 1e-12);
            }
            for &c in &GYR_CHANNELS {
                assert_eq!(out.row(t)[c], 0.0);
            }
        }
    }

    #[test]
    fn pooled_statistics_after_normalization() {
        let s = seg(50, |t, c| {
            ((t * 7 + c * 3) as Real).sin() * (c + 1) as Real + c as Real
        });
        let out = zscore_normalize(&s, 1e-8).unwrap();
        let st = modality_stats([&out]).unwrap();
        for m in 0..2 {
            assert!(st.mean[m].abs() < 1e-12);
            assert!((st.std[m] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_is_degenerate() {
        assert!(matches!(
            zscore_normalize(&seg(1, |_, _| 1.0), 1e-8),
            Err(CoreError::DegenerateSegment { len: 1 })
        ));
    }

    #[test]
    fn image_layout_and_roundtrip() {
        let s = seg(414, |t, c| (t * 100 + c) as Real);
        let img = to_image(&s);
        assert_eq!(img.shape(), &[414, 4, 3]);
        assert_eq!(img.at(&[7, 0, 2]), s.row(7)[2]);
        assert_eq!(img.at(&[7, 1, 0]), s.row(7)[3]);
        assert_eq!(img.at(&[7, 3, 2]), s.row(7)[11]);
        assert_eq!(from_image(&img).unwrap(), s.samples());
    }

    #[test]
    fn window_examples() {
        let img = to_image(&seg(414, |t, _| t as Real));
        let w = sliding_window(&img, &id(), 120, 60, false).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[4].start, 240);
        assert_eq!(w[4].pixels.at(&[0, 0, 0]), 240.0);
        assert_eq!(w[4].pixels.shape(), &[120, 4, 3]);
        let exact = to_image(&seg(120, |t, _| t as Real));
        for s in [1, 7, 60, 500] {
            assert_eq!(
                sliding_window(&exact, &id(), 120, s, false).unwrap().len(),
                1
            );
        }
        let short = to_image(&seg(119, |t, _| t as Real));
        assert!(matches!(
            sliding_window(&short, &id(), 120, 60, false),
            Err(CoreError::SegmentTooShort {
                len: 119,
                window: 120
            })
        ));
    }

    #[test]
    fn reflect_padding() {
        let img = to_image(&seg(4, |t, _| t as Real));
        let w = sliding_window(&img, &id(), 9, 3, true).unwrap();
        assert_eq!(w.len(), 1);
        let rows: Vec<Real> = (0..9).map(|t| w[0].pixels.at(&[t, 0, 0])).collect();
        assert_eq!(rows, vec![0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn corpus_scope_pools_statistics() {
        let a = seg(10, |_, _| 0.0);
        let b = seg(10, |_, _| 2.0);
        let cfg = ImuPipelineConfig {
            window: 10,
            stride: 5,
            norm_scope: NormScope::Corpus,
            ..Default::default()
        };
        let out = preprocess_imu(&[&a, &b], &cfg).unwrap();
        assert!((out[0][0].pixels.data()[0] + 1.0).abs() < 1e-6);
        assert!((out[1][0].pixels.data()[0] - 1.0).abs() < 1e-6);
        let seg_scope = preprocess_imu(
            &[&a, &b],
            &ImuPipelineConfig {
                norm_scope: NormScope::Segment,
                ..cfg
            },
        )
        .unwrap();
        assert!(seg_scope[1][0].pixels.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(t in 1usize..600, w in 1usize..200, s in 1usize..100) {
            let naive = (0..t).filter(|&start| start % s == 0 && start + w <= t).count();
            match window_count(t, w, s) {
                Some(n) => prop_assert_eq!(n, naive),
                None => prop_assert!(t < w && naive == 0),
            }
        }

        #[test]
        fn windows_are_contiguous_slices(t in 20usize..200, w in 1usize..20, s in 1usize..30) {
            let img = to_image(&seg(t, |r, c| (r * 12 + c) as Real));
            let wins = sliding_window(&img, &id(), w, s, false).unwrap();
            for (i, win) in wins.iter().enumerate() {
                prop_assert_eq!(win.start, i * s);
                prop_assert_eq!(win.pixels.data(), &img.data()[i * s * 12..(i * s + w) * 12]);
            }
            let covered = (wins.len() - 1) * s + w;
            prop_assert!(covered <= t && t - covered < s);
        }

        #[test]
        fn zscore_is_idempotent(vals in prop::collection::vec(-100.0f64..100.0, 24..240)) {
            let t = vals.len() / 12;
            let s = ImuSegment::new(id(), vals[..t * 12].iter().map(|&v| v as Real).collect()).unwrap();
            let once = zscore_normalize(&s, 1e-8).unwrap();
            let twice = zscore_normalize(&once, 1e-8).unwrap();
            for (a, b) in once.samples().iter().zip(twice.samples()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
