//! Keypoint normalization, frame sampling, flip/crop augmentation and
//! Gaussian heatmap volumes `[K, T, H, W]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, SkeletonSequence, NUM_KEYPOINTS};
use crate::tensor::Tensor;
use crate::{CoreError, Real, Result};

/// Keypoint layout: upper body followed by two 21-point hands.
///
/// | index  | keypoint                         |
/// |--------|----------------------------------|
/// | 0      | nose                             |
/// | 1, 2   | left eye, right eye              |
/// | 3, 4   | left ear, right ear              |
/// | 5, 6   | left shoulder, right shoulder    |
/// | 7, 8   | left elbow, right elbow          |
/// | 9, 10  | left wrist, right wrist          |
/// | 11..32 | left hand (wrist root, 4 joints per finger thumb..pinky) |
/// | 32..53 | right hand, same order           |
pub mod keypoints {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HAND: usize = 11;
    pub const RIGHT_HAND: usize = 32;
    pub const HAND_POINTS: usize = 21;
}

/// Index of the mirror-image keypoint.
pub const fn mirror_index(k: usize) -> usize {
    use keypoints::*;
    match k {
        NOSE => NOSE,
        1..=10 => {
            if k % 2 == 1 {
                k + 1
            } else {
                k - 1
            }
        }
        _ if k < RIGHT_HAND => k + HAND_POINTS,
        _ => k - HAND_POINTS,
    }
}

pub fn symmetry_table() -> [usize; NUM_KEYPOINTS] {
    std::array::from_fn(mirror_index)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FramePolicy {
    /// `round(t (T - 1) / (T_out - 1))`
    #[default]
    Uniform,
    /// First frame of each of `T_out` equal sub-segments.
    FirstOfSubsegment,
    /// A random frame of each sub-segment.
    RandomOfSubsegment,
}

impl std::str::FromStr for FramePolicy {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(FramePolicy::Uniform),
            "first" | "first-of-subsegment" => Ok(FramePolicy::FirstOfSubsegment),
            "random" | "random-of-subsegment" => Ok(FramePolicy::RandomOfSubsegment),
            _ => Err(CoreError::config(format!("unknown frame policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPipelineConfig {
    pub grid: usize,
    pub sigma: Real,
    /// Use `2 sigma^2` in the exponent instead of `2 sigma`.
    pub sigma_squared: bool,
    pub frames: usize,
    /// Bounding-box padding as a fraction of its extent on each side.
    pub bbox_pad: Real,
    /// Keypoints at or below this confidence do not shape the bounding box.
    pub conf_threshold: Real,
}

impl Default for SkeletonPipelineConfig {
    fn default() -> Self {
        SkeletonPipelineConfig {
            grid: 56,
            sigma: 0.6,
            sigma_squared: false,
            frames: 48,
            bbox_pad: 0.1,
            conf_threshold: 0.3,
        }
    }
}

impl SkeletonPipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(CoreError::config("grid must be at least 2"));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::config("sigma must be positive"));
        }
        if self.frames == 0 {
            return Err(CoreError::config("frames must be at least 1"));
        }
        if !(self.bbox_pad >= 0.0) {
            return Err(CoreError::config("bbox padding must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Probability of a horizontal flip.
    pub flip_prob: Real,
    /// Side of the random square crop as a fraction of the grid; 1 disables cropping.
    pub crop: Real,
    pub policy: FramePolicy,
    /// Draw flip and crop independently for every frame instead of once per clip.
    pub per_frame: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            flip_prob: 0.5,
            crop: 0.9,
            policy: FramePolicy::Uniform,
            per_frame: false,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        AugmentationSpec {
            flip_prob: 0.0,
            crop: 1.0,
            policy: FramePolicy::Uniform,
            per_frame: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::config("flip probability must be in [0, 1]"));
        }
        if !(self.crop > 0.0 && self.crop <= 1.0) {
            return Err(CoreError::config("crop fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// `[53, T, H, W]` Gaussian keypoint maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapVolume {
    pub values: Tensor,
    pub sigma: Real,
    pub grid: usize,
}

/// Maps coordinates into `[0, 1]` using the bounding box of confident
/// keypoints over the whole sequence, padded on each side. Axes are scaled
/// independently. Falls back to all keypoints when none are confident.
pub fn normalize_unit(
    seq: &SkeletonSequence,
    pad: Real,
    conf_threshold: Real,
) -> Result<SkeletonSequence> {
    let bbox = |thr: Option<Real>| {
        let mut lo = [Real::INFINITY; 2];
        let mut hi = [Real::NEG_INFINITY; 2];
        for f in seq.frames() {
            for kp in f {
                if thr.map_or(true, |t| kp[2] > t) {
                    for a in 0..2 {
                        lo[a] = lo[a].min(kp[a]);
                        hi[a] = hi[a].max(kp[a]);
                    }
                }
            }
        }
        lo[0].is_finite().then_some((lo, hi))
    };
    let (lo, hi) = bbox(Some(conf_threshold))
        .or_else(|| bbox(None))
        .expect("sequence has frames");
    let mut origin = [0.0; 2];
    let mut extent = [0.0; 2];
    for a in 0..2 {
        let span = if hi[a] - lo[a] > 1e-9 {
            hi[a] - lo[a]
        } else {
            1.0
        };
        origin[a] = lo[a] - pad * span;
        extent[a] = span * (1.0 + 2.0 * pad);
    }
    let frames = seq
        .frames()
        .iter()
        .map(|f| f.map(|[x, y, c]| [(x - origin[0]) / extent[0], (y - origin[1]) / extent[1], c]))
        .collect();
    seq.with_frames(frames)
}

/// Unit-box coordinates scaled to `[0, grid - 1]`.
pub fn normalize_to_grid(
    seq: &SkeletonSequence,
    cfg: &SkeletonPipelineConfig,
) -> Result<SkeletonSequence> {
    let unit = normalize_unit(seq, cfg.bbox_pad, cfg.conf_threshold)?;
    let s = (cfg.grid - 1) as Real;
    unit.with_frames(
        unit.frames()
            .iter()
            .map(|f| f.map(|[x, y, c]| [x * s, y * s, c]))
            .collect(),
    )
}

fn exponent_denominator(sigma: Real, sigma_squared: bool) -> Real {
    if sigma_squared {
        2.0 * sigma * sigma
    } else {
        2.0 * sigma
    }
}

/// Writes the `[53, H, W]` maps of one frame into `out`.
/// `out[k, r, c] = exp(-((c - x_k)^2 + (r - y_k)^2) / (2 sigma)) * c_k`.
fn heatmap_into(frame: &Frame, denom: Real, h: usize, w: usize, out: &mut [Real]) {
    let mut gx = vec![0.0; w];
    let mut gy = vec![0.0; h];
    for (k, &[x, y, c]) in frame.iter().enumerate() {
        let slice = &mut out[k * h * w..(k + 1) * h * w];
        if c == 0.0 {
            slice.fill(0.0);
            continue;
        }
        for (col, g) in gx.iter_mut().enumerate() {
            *g = (-(col as Real - x).powi(2) / denom).exp();
        }
        for (row, g) in gy.iter_mut().enumerate() {
            *g = (-(row as Real - y).powi(2) / denom).exp() * c;
        }
        for (row, line) in slice.chunks_mut(w).enumerate() {
            for (v, g) in line.iter_mut().zip(&gx) {
                *v = gy[row] * g;
            }
        }
    }
}

pub fn keypoint_heatmap(frame: &Frame, sigma: Real, h: usize, w: usize) -> Result<Tensor> {
    keypoint_heatmap_with(frame, sigma, false, h, w)
}

pub fn keypoint_heatmap_with(
    frame: &Frame,
    sigma: Real,
    sigma_squared: bool,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(CoreError::config(format!("sigma {sigma} must be positive")));
    }
    let mut out = vec![0.0; NUM_KEYPOINTS * h * w];
    heatmap_into(
        frame,
        exponent_denominator(sigma, sigma_squared),
        h,
        w,
        &mut out,
    );
    Ok(Tensor::new([NUM_KEYPOINTS, h, w], out)?)
}

pub fn stack_volume(
    seq: &SkeletonSequence,
    sigma: Real,
    sigma_squared: bool,
    h: usize,
    w: usize,
) -> Result<HeatmapVolume> {
    if !(sigma > 0.0) {
        return Err(CoreError::config(format!("sigma {sigma} must be positive")));
    }
    let t = seq.len();
    let denom = exponent_denominator(sigma, sigma_squared);
    let mut data = vec![0.0; NUM_KEYPOINTS * t * h * w];
    let mut frame_buf = vec![0.0; NUM_KEYPOINTS * h * w];
    for (ti, frame) in seq.frames().iter().enumerate() {
        heatmap_into(frame, denom, h, w, &mut frame_buf);
        for k in 0..NUM_KEYPOINTS {
            let dst = (k * t + ti) * h * w;
            data[dst..dst + h * w].copy_from_slice(&frame_buf[k * h * w..(k + 1) * h * w]);
        }
    }
    Ok(HeatmapVolume {
        values: Tensor::new([NUM_KEYPOINTS, t, h, w], data)?,
        sigma,
        grid: h,
    })
}

/// Frame indices chosen by `policy`.
pub fn sample_indices(
    t: usize,
    t_out: usize,
    policy: FramePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if t_out < 1 {
        return Err(CoreError::config("frames out must be at least 1"));
    }
    if t < 1 {
        return Err(CoreError::EmptyInput("sequence has no frames"));
    }
    Ok(match policy {
        FramePolicy::Uniform if t_out == 1 => vec![0],
        FramePolicy::Uniform => (0..t_out)
            .map(|i| ((i * (t - 1)) as f64 / (t_out - 1) as f64).round() as usize)
            .collect(),
        FramePolicy::FirstOfSubsegment | FramePolicy::RandomOfSubsegment => (0..t_out)
            .map(|b| {
                let start = b * t / t_out;
                let end = (b + 1) * t / t_out;
                if end <= start {
                    start.min(t - 1)
                } else if policy == FramePolicy::FirstOfSubsegment {
                    start
                } else {
                    rng.gen_range(start..end)
                }
            })
            .collect(),
    })
}

pub fn sample_frames(
    seq: &SkeletonSequence,
    t_out: usize,
    policy: FramePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<SkeletonSequence> {
    let idx = sample_indices(seq.len(), t_out, policy, rng)?;
    seq.with_frames(idx.into_iter().map(|i| seq.frames()[i]).collect())
}

fn flip_frame(f: &Frame, grid: usize) -> Frame {
    let right = (grid - 1) as Real;
    std::array::from_fn(|k| {
        let [x, y, c] = f[mirror_index(k)];
        [right - x, y, c]
    })
}

/// Mirrors grid coordinates `x -> (grid - 1) - x` and swaps left/right keypoints.
pub fn flip_horizontal(seq: &SkeletonSequence, grid: usize) -> Result<SkeletonSequence> {
    seq.with_frames(seq.frames().iter().map(|f| flip_frame(f, grid)).collect())
}

/// Axis-aligned region in grid units; `w` and `h` are spans, so the full grid
/// is `{0, 0, grid - 1, grid - 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x0: Real,
    pub y0: Real,
    pub w: Real,
    pub h: Real,
}

impl CropRegion {
    pub fn full(grid: usize) -> Self {
        let s = (grid - 1) as Real;
        CropRegion {
            x0: 0.0,
            y0: 0.0,
            w: s,
            h: s,
        }
    }

    fn check(&self, grid: usize) -> Result<()> {
        let s = (grid - 1) as Real + 1e-9;
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(CoreError::invalid(format!("empty crop region {self:?}")));
        }
        if self.x0 < 0.0 || self.y0 < 0.0 || self.x0 + self.w > s || self.y0 + self.h > s {
            return Err(CoreError::invalid(format!(
                "crop region {self:?} exceeds the {grid}x{grid} grid"
            )));
        }
        Ok(())
    }
}

fn crop_frame(f: &Frame, r: &CropRegion, grid: usize) -> Frame {
    let s = (grid - 1) as Real;
    f.map(|[x, y, c]| {
        let inside = x >= r.x0 && x <= r.x0 + r.w && y >= r.y0 && y <= r.y0 + r.h;
        [
            (x - r.x0) * s / r.w,
            (y - r.y0) * s / r.h,
            if inside { c } else { 0.0 },
        ]
    })
}

/// Maps `region` onto the full grid; keypoints outside get confidence 0.
pub fn crop(seq: &SkeletonSequence, region: &CropRegion, grid: usize) -> Result<SkeletonSequence> {
    region.check(grid)?;
    seq.with_frames(
        seq.frames()
            .iter()
            .map(|f| crop_frame(f, region, grid))
            .collect(),
    )
}

fn random_region(frac: Real, grid: usize, rng: &mut ChaCha8Rng) -> CropRegion {
    let s = (grid - 1) as Real;
    let side = frac * s;
    let slack = s - side;
    CropRegion {
        x0: rng.gen::<Real>() * slack,
        y0: rng.gen::<Real>() * slack,
        w: side,
        h: side,
    }
}

/// Samples `cfg.frames` frames and applies flip/crop; the input must already
/// be in grid coordinates. Without `aug` the clip is sampled uniformly and
/// left untouched.
pub fn augment(
    seq: &SkeletonSequence,
    cfg: &SkeletonPipelineConfig,
    aug: Option<&AugmentationSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<SkeletonSequence> {
    let Some(aug) = aug else {
        return sample_frames(seq, cfg.frames, FramePolicy::Uniform, rng);
    };
    aug.validate()?;
    let sampled = sample_frames(seq, cfg.frames, aug.policy, rng)?;
    let draw = |rng: &mut ChaCha8Rng| {
        let flip = aug.flip_prob > 0.0 && rng.gen::<Real>() < aug.flip_prob;
        let region = (aug.crop < 1.0).then(|| random_region(aug.crop, cfg.grid, rng));
        (flip, region)
    };
    let clip = draw(rng);
    let frames = sampled
        .frames()
        .iter()
        .map(|f| {
            let (flip, region) = if aug.per_frame { draw(rng) } else { clip };
            let mut f = if flip { flip_frame(f, cfg.grid) } else { *f };
            if let Some(r) = region {
                f = crop_frame(&f, &r, cfg.grid);
            }
            f
        })
        .collect();
    sampled.with_frames(frames)
}

/// Grid-space clip to `[53, frames, grid, grid]` volume.
pub fn render(
    grid_seq: &SkeletonSequence,
    cfg: &SkeletonPipelineConfig,
    aug: Option<&AugmentationSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let clip = augment(grid_seq, cfg, aug, rng)?;
    Ok(stack_volume(&clip, cfg.sigma, cfg.sigma_squared, cfg.grid, cfg.grid)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn id() -> crate::data::RecordingId {
        "ND01_s1_2_001".parse().unwrap()
    }

    fn frame_with(f: impl Fn(usize) -> [Real; 3]) -> Frame {
        std::array::from_fn(f)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn heatmap_closed_forms() {
        let f = frame_with(|k| [(k % 7) as Real + 3.0, (k % 5) as Real + 2.0, 0.8]);
        let h = keypoint_heatmap(&f, 0.6, 16, 16).unwrap();
        for k in 0..NUM_KEYPOINTS {
            let (x, y) = (f[k][0] as usize, f[k][1] as usize);
            assert!((h.at(&[k, y, x]) - 0.8).abs() < 1e-12);
            // squared distance 2 sigma = 1.2 is not on the lattice; check the exponent directly
            let d2 = 1.0;
            let expect = (-(d2) / 1.2 as Real).exp() * 0.8;
            assert!((h.at(&[k, y, x + 1]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn squared_distance_two_sigma_gives_inverse_e() {
        // sigma = 1: squared distance 2 at a diagonal neighbour
        let f = frame_with(|_| [5.0, 5.0, 0.7]);
        let h = keypoint_heatmap(&f, 1.0, 12, 12).unwrap();
        assert!((h.at(&[0, 6, 6]) - 0.7 * (-1.0 as Real).exp()).abs() < 1e-12);
        let sq = keypoint_heatmap_with(&f, 1.0, true, 12, 12).unwrap();
        assert_eq!(h, sq);
    }

    #[test]
    fn zero_confidence_map_is_zero_and_sigma_must_be_positive() {
        let f = frame_with(|k| [3.0, 3.0, if k == 4 { 0.0 } else { 1.0 }]);
        let h = keypoint_heatmap(&f, 0.6, 8, 8).unwrap();
        assert!(h.data()[4 * 64..5 * 64].iter().all(|&v| v == 0.0));
        assert!(keypoint_heatmap(&f, 0.0, 8, 8).is_err());
        assert!(keypoint_heatmap(&f, -1.0, 8, 8).is_err());
    }

    #[test]
    fn volume_shape_and_slices() {
        let frames: Vec<Frame> = (0..48)
            .map(|t| frame_with(|k| [(t % 50) as Real, (k % 50) as Real, 1.0]))
            .collect();
        let seq = SkeletonSequence::new(id(), frames).unwrap();
        let v = stack_volume(&seq, 0.6, false, 56, 56).unwrap();
        assert_eq!(v.values.shape(), &[53, 48, 56, 56]);
        let one = keypoint_heatmap(&seq.frames()[7], 0.6, 56, 56).unwrap();
        for k in [0, 20, 52] {
            let a = &v.values.data()[(k * 48 + 7) * 3136..(k * 48 + 8) * 3136];
            assert_eq!(a, &one.data()[k * 3136..(k + 1) * 3136]);
        }
    }

    #[test]
    fn sampling_examples() {
        let mut r = rng();
        assert_eq!(
            sample_indices(10, 5, FramePolicy::FirstOfSubsegment, &mut r).unwrap(),
            vec![0, 2, 4, 6, 8]
        );
        assert_eq!(
            sample_indices(7, 7, FramePolicy::Uniform, &mut r).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        assert_eq!(
            sample_indices(1, 4, FramePolicy::Uniform, &mut r).unwrap(),
            vec![0; 4]
        );
        assert_eq!(
            sample_indices(1, 4, FramePolicy::RandomOfSubsegment, &mut r).unwrap(),
            vec![0; 4]
        );
        assert_eq!(
            sample_indices(3, 6, FramePolicy::FirstOfSubsegment, &mut r).unwrap(),
            vec![0, 0, 1, 1, 2, 2]
        );
        assert!(sample_indices(5, 0, FramePolicy::Uniform, &mut r).is_err());
        for _ in 0..20 {
            let idx = sample_indices(100, 10, FramePolicy::RandomOfSubsegment, &mut r).unwrap();
            for (b, i) in idx.into_iter().enumerate() {
                assert!((b * 10..b * 10 + 10).contains(&i));
            }
        }
    }

    #[test]
    fn symmetry_table_is_an_involution_pairing_sides() {
        use keypoints::*;
        let t = symmetry_table();
        assert_eq!(t[LEFT_WRIST], RIGHT_WRIST);
        assert_eq!(t[RIGHT_ELBOW], LEFT_ELBOW);
        assert_eq!(t[NOSE], NOSE);
        assert_eq!(t[LEFT_HAND], RIGHT_HAND);
        assert_eq!(t[LEFT_HAND + 20], RIGHT_HAND + 20);
        for k in 0..NUM_KEYPOINTS {
            assert_eq!(t[t[k]], k);
        }
    }

    #[test]
    fn flip_examples() {
        let frames = vec![frame_with(|k| [k as Real * 0.25, k as Real, 0.5])];
        let seq = SkeletonSequence::new(id(), frames).unwrap();
        let once = flip_horizontal(&seq, 16).unwrap();
        assert_eq!(flip_horizontal(&once, 16).unwrap(), seq);
        let odd =
            SkeletonSequence::new(id(), vec![frame_with(|k| [k as Real * 0.3, 1.0, 0.5])]).unwrap();
        let back = flip_horizontal(&flip_horizontal(&odd, 16).unwrap(), 16).unwrap();
        for (a, b) in back.frames()[0].iter().zip(&odd.frames()[0]) {
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
        assert_eq!(
            once.frames()[0][keypoints::RIGHT_WRIST],
            [15.0 - seq.frames()[0][keypoints::LEFT_WRIST][0], 9.0, 0.5]
        );
        let centered = SkeletonSequence::new(id(), vec![frame_with(|_| [7.5, 3.0, 1.0])]).unwrap();
        assert_eq!(flip_horizontal(&centered, 16).unwrap(), centered);
    }

    #[test]
    fn crop_examples() {
        let seq = SkeletonSequence::new(id(), vec![frame_with(|k| [(k % 16) as Real, 4.0, 1.0])])
            .unwrap();
        assert_eq!(crop(&seq, &CropRegion::full(16), 16).unwrap(), seq);
        let half = CropRegion {
            x0: 0.0,
            y0: 0.0,
            w: 7.5,
            h: 15.0,
        };
        let c = crop(&seq, &half, 16).unwrap();
        for k in 0..NUM_KEYPOINTS {
            let x = (k % 16) as Real;
            assert_eq!(c.frames()[0][k][0], 2.0 * x);
            assert_eq!(c.frames()[0][k][2], if x <= 7.5 { 1.0 } else { 0.0 });
        }
        assert!(crop(
            &seq,
            &CropRegion {
                x0: 0.0,
                y0: 0.0,
                w: 0.0,
                h: 3.0
            },
            16
        )
        .is_err());
        assert!(crop(
            &seq,
            &CropRegion {
                x0: 10.0,
                y0: 0.0,
                w: 8.0,
                h: 3.0
            },
            16
        )
        .is_err());
    }

    #[test]
    fn normalization_fills_the_padded_box() {
        let frames: Vec<Frame> = (0..3)
            .map(|t| {
                frame_with(|k| {
                    [
                        100.0 + k as Real * 2.0 + t as Real,
                        50.0 + k as Real,
                        if k == 52 { 0.0 } else { 0.9 },
                    ]
                })
            })
            .collect();
        let seq = SkeletonSequence::new(id(), frames).unwrap();
        let cfg = SkeletonPipelineConfig {
            grid: 11,
            ..Default::default()
        };
        let g = normalize_to_grid(&seq, &cfg).unwrap();
        let xs: Vec<Real> = g
            .frames()
            .iter()
            .flat_map(|f| f[..52].iter().map(|kp| kp[0]))
            .collect();
        let min = xs.iter().cloned().fold(Real::INFINITY, Real::min);
        let max = xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        assert!((min - 10.0 * 0.1 / 1.2).abs() < 1e-9);
        assert!((max - 10.0 * 1.1 / 1.2).abs() < 1e-9);
    }

    #[test]
    fn augmentation_preserves_shapes() {
        let frames: Vec<Frame> = (0..30)
            .map(|t| frame_with(|k| [(t + k) as Real % 15.0, k as Real % 15.0, 0.9]))
            .collect();
        let seq = SkeletonSequence::new(id(), frames).unwrap();
        let cfg = SkeletonPipelineConfig {
            grid: 16,
            frames: 8,
            ..Default::default()
        };
        for seed in 0..10 {
            for per_frame in [false, true] {
                let aug = AugmentationSpec {
                    per_frame,
                    policy: FramePolicy::RandomOfSubsegment,
                    ..Default::default()
                };
                let v =
                    render(&seq, &cfg, Some(&aug), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                assert_eq!(v.shape(), &[53, 8, 16, 16]);
            }
        }
    }

    proptest! {
        #[test]
        fn heatmap_bounded_and_peaks_at_keypoint(x in 0.0f64..15.0, y in 0.0f64..15.0, c in 0.0f64..=1.0, sigma in 0.2f64..3.0) {
            let f = frame_with(|_| [x as Real, y as Real, c as Real]);
            let h = keypoint_heatmap(&f, sigma as Real, 16, 16).unwrap();
            let slice = &h.data()[..256];
            prop_assert!(slice.iter().all(|&v| v >= 0.0 && v <= c as Real + 1e-15));
            if c > 0.0 {
                let (arg, _) = slice.iter().enumerate().fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                let (r, col) = ((arg / 16) as f64, (arg % 16) as f64);
                prop_assert!((col - x).abs() <= 0.5 + 1e-9 && (r - y).abs() <= 0.5 + 1e-9);
            }
        }

        #[test]
        fn volume_is_frame_local(perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let frames: Vec<Frame> = (0..5).map(|t| frame_with(|k| [(t * 3 + k) as Real % 9.0, k as Real % 9.0, 0.5])).collect();
            let mut order: Vec<usize> = (0..5).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let a = SkeletonSequence::new(id(), frames.clone()).unwrap();
            let b = SkeletonSequence::new(id(), order.iter().map(|&i| frames[i]).collect()).unwrap();
            let va = stack_volume(&a, 0.6, false, 10, 10).unwrap().values;
            let vb = stack_volume(&b, 0.6, false, 10, 10).unwrap().values;
            for k in 0..NUM_KEYPOINTS {
                for (t, &src) in order.iter().enumerate() {
                    prop_assert_eq!(&vb.data()[(k * 5 + t) * 100..(k * 5 + t + 1) * 100], &va.data()[(k * 5 + src) * 100..(k * 5 + src + 1) * 100]);
                }
            }
        }

        #[test]
        fn volume_sum_is_monotone_in_confidence(c1 in 0.0f64..0.5, extra in 0.0f64..0.5) {
            let at = |c: f64| SkeletonSequence::new(id(), vec![frame_with(|k| [(k % 8) as Real, 3.0, c as Real])]).unwrap();
            let s1: Real = stack_volume(&at(c1), 0.6, false, 8, 8).unwrap().values.data().iter().sum();
            let s2: Real = stack_volume(&at(c1 + extra), 0.6, false, 8, 8).unwrap().values.data().iter().sum();
            prop_assert!(s2 >= s1);
        }
    }
}
