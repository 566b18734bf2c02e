//! Multivariate dynamic time warping and the label-merge analysis built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActionLabel, ImuSegment, SkeletonSequence, IMU_CHANNELS, NUM_KEYPOINTS};
use crate::imu_pipeline::zscore_normalize;
use crate::skeleton_pipeline::normalize_unit;
use crate::{CoreError, Real, Result};

/// Series are resampled to this length before pairwise comparison.
pub const DEFAULT_RESAMPLE: usize = 64;
/// Merge threshold as a fraction of the mean cross-label distance.
pub const DEFAULT_MERGE_THRESHOLD: Real = 0.75;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Mean over channels of the per-channel DTW.
    #[default]
    Matched,
    /// Sum over all `C^2` channel pairs, divided by `C`.
    Cross,
}

impl std::str::FromStr for ChannelMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(ChannelMode::Matched),
            "cross" => Ok(ChannelMode::Cross),
            _ => Err(CoreError::config(format!(
                "channel mode {s:?} is not matched or cross"
            ))),
        }
    }
}

/// Squared-difference DTW with `D(0,0) = 0` and infinite borders.
pub fn dtw_1d(a: &[Real], b: &[Real]) -> Result<Real> {
    dtw_1d_banded(a, b, None)
}

/// With a band, cells with `|p - q| > max(band, |n - m|)` are skipped.
pub fn dtw_1d_banded(a: &[Real], b: &[Real], band: Option<usize>) -> Result<Real> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::EmptyInput("DTW needs non-empty series"));
    }
    let (n, m) = (a.len(), b.len());
    let w = band.map(|w| w.max(n.abs_diff(m)));
    let mut prev = vec![Real::INFINITY; m + 1];
    let mut cur = vec![Real::INFINITY; m + 1];
    prev[0] = 0.0;
    for p in 1..=n {
        cur.fill(Real::INFINITY);
        let (lo, hi) = match w {
            Some(w) => (p.saturating_sub(w).max(1), (p + w).min(m)),
            None => (1, m),
        };
        for q in lo..=hi {
            let d = a[p - 1] - b[q - 1];
            cur[q] = prev[q].min(cur[q - 1]).min(prev[q - 1]) + d * d;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Channel-major multichannel series.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSeries {
    channels: usize,
    len: usize,
    data: Vec<Real>,
}

impl MultiSeries {
    pub fn new(channels: usize, len: usize, data: Vec<Real>) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(CoreError::EmptyInput(
                "series needs at least one channel and one step",
            ));
        }
        if data.len() != channels * len {
            return Err(CoreError::invalid(format!(
                "{} values for {channels} channels x {len} steps",
                data.len()
            )));
        }
        Ok(MultiSeries {
            channels,
            len,
            data,
        })
    }

    /// From rows of `channels` values per time step.
    pub fn from_rows(channels: usize, rows: &[Real]) -> Result<Self> {
        if channels == 0 || rows.len() % channels != 0 {
            return Err(CoreError::invalid("row data does not divide into channels"));
        }
        let len = rows.len() / channels;
        let mut data = vec![0.0; rows.len()];
        for t in 0..len {
            for c in 0..channels {
                data[c * len + t] = rows[t * channels + c];
            }
        }
        MultiSeries::new(channels, len, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[Real] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    /// Linear interpolation of every channel onto `n` evenly spaced points.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::config("resample length must be at least 1"));
        }
        let mut data = Vec::with_capacity(self.channels * n);
        for c in 0..self.channels {
            let src = self.channel(c);
            for i in 0..n {
                let pos = if n == 1 {
                    0.0
                } else {
                    i as f64 * (self.len - 1) as f64 / (n - 1) as f64
                };
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(self.len - 1);
                let f = (pos - lo as f64) as Real;
                data.push(src[lo] * (1.0 - f) + src[hi] * f);
            }
        }
        MultiSeries::new(self.channels, n, data)
    }
}

/// Channels are accumulated in ascending order (pairs row-major in cross
/// mode) before the division by `C`.
pub fn multivariate_dtw(
    a: &MultiSeries,
    b: &MultiSeries,
    mode: ChannelMode,
    band: Option<usize>,
) -> Result<Real> {
    if a.channels != b.channels {
        return Err(CoreError::invalid(format!(
            "channel counts differ: {} vs {}",
            a.channels, b.channels
        )));
    }
    let c = a.channels;
    let mut total = 0.0;
    match mode {
        ChannelMode::Matched => {
            for i in 0..c {
                total += dtw_1d_banded(a.channel(i), b.channel(i), band)?;
            }
        }
        ChannelMode::Cross => {
            for i in 0..c {
                for j in 0..c {
                    total += dtw_1d_banded(a.channel(i), b.channel(j), band)?;
                }
            }
        }
    }
    Ok(total / c as Real)
}

/// The 12 z-scored channels.
pub fn imu_series(seg: &ImuSegment, eps: Real) -> Result<MultiSeries> {
    MultiSeries::from_rows(IMU_CHANNELS, zscore_normalize(seg, eps)?.samples())
}

/// The 106 bounding-box normalized coordinates (x then y per keypoint).
pub fn skeleton_series(
    seq: &SkeletonSequence,
    pad: Real,
    conf_threshold: Real,
) -> Result<MultiSeries> {
    let unit = normalize_unit(seq, pad, conf_threshold)?;
    let rows: Vec<Real> = unit
        .frames()
        .iter()
        .flat_map(|f| f.iter().flat_map(|kp| [kp[0], kp[1]]))
        .collect();
    MultiSeries::from_rows(2 * NUM_KEYPOINTS, &rows)
}

/// Symmetric matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwMatrix {
    pub ids: Vec<String>,
    pub mode: ChannelMode,
    values: Vec<Real>,
}

impl DtwMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Real {
        self.values[i * self.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.len() {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// All unordered pairs, computed in parallel; the result does not depend on scheduling.
pub fn pairwise_matrix(
    series: &[MultiSeries],
    ids: &[String],
    mode: ChannelMode,
    band: Option<usize>,
) -> Result<DtwMatrix> {
    let n = series.len();
    if n < 2 {
        return Err(CoreError::invalid(
            "a DTW matrix needs at least two segments",
        ));
    }
    if ids.len() != n {
        return Err(CoreError::invalid("one id per series is required"));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| multivariate_dtw(&series[i], &series[j], mode, band))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; n * n];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        values[i * n + j] = d;
        values[j * n + i] = d;
    }
    Ok(DtwMatrix {
        ids: ids.to_vec(),
        mode,
        values,
    })
}

/// Mean DTW per label pair. Within-label entries average off-diagonal pairs
/// and are NaN for a label with a single segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSimilarity {
    pub labels: Vec<ActionLabel>,
    values: Vec<Real>,
}

impl LabelSimilarity {
    pub fn get(&self, a: ActionLabel, b: ActionLabel) -> Option<Real> {
        let i = self.labels.iter().position(|&l| l == a)?;
        let j = self.labels.iter().position(|&l| l == b)?;
        Some(self.values[i * self.labels.len() + j])
    }

    /// Cross-label pairs `(a, b, mean)` with `a < b`.
    pub fn cross_pairs(&self) -> Vec<(ActionLabel, ActionLabel, Real)> {
        let n = self.labels.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| (self.labels[i], self.labels[j], self.values[i * n + j]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label_a,label_b,mean_dtw\n");
        let n = self.labels.len();
        for i in 0..n {
            for j in i..n {
                out.push_str(&format!(
                    "{},{},{}\n",
                    self.labels[i].index(),
                    self.labels[j].index(),
                    self.values[i * n + j]
                ));
            }
        }
        out
    }
}

pub fn label_similarity_summary(
    matrix: &DtwMatrix,
    labels: &[ActionLabel],
) -> Result<LabelSimilarity> {
    if labels.len() != matrix.len() {
        return Err(CoreError::invalid(format!(
            "{} labels for a {}-segment matrix",
            labels.len(),
            matrix.len()
        )));
    }
    let mut present: Vec<ActionLabel> = labels.to_vec();
    present.sort();
    present.dedup();
    let l = present.len();
    let slot = |lab: ActionLabel| present.binary_search(&lab).unwrap();
    let mut sum = vec![0.0; l * l];
    let mut count = vec![0usize; l * l];
    let n = matrix.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (slot(labels[i]), slot(labels[j]));
            let (a, b) = (a.min(b), a.max(b));
            sum[a * l + b] += matrix.get(i, j);
            count[a * l + b] += 1;
        }
    }
    let mut values = vec![Real::NAN; l * l];
    for a in 0..l {
        for b in a..l {
            if count[a * l + b] > 0 {
                let m = sum[a * l + b] / count[a * l + b] as Real;
                values[a * l + b] = m;
                values[b * l + a] = m;
            }
        }
    }
    Ok(LabelSimilarity {
        labels: present,
        values,
    })
}

/// Label pairs whose mean DTW is at most `threshold` times the mean over all
/// cross-label pairs, taken greedily from the most similar while no label is
/// used twice. Sorted ascending by DTW.
pub fn suggest_merges(
    summary: &LabelSimilarity,
    threshold: Real,
) -> Vec<(ActionLabel, ActionLabel, Real)> {
    let mut pairs: Vec<_> = summary
        .cross_pairs()
        .into_iter()
        .filter(|p| p.2.is_finite())
        .collect();
    if pairs.is_empty() || !(threshold > 0.0) {
        return Vec::new();
    }
    let global = pairs.iter().map(|p| p.2).sum::<Real>() / pairs.len() as Real;
    pairs.sort_by(|x, y| x.2.total_cmp(&y.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut used = Vec::new();
    let mut out = Vec::new();
    for (a, b, d) in pairs {
        if d > threshold * global {
            break;
        }
        if used.contains(&a) || used.contains(&b) {
            continue;
        }
        used.extend([a, b]);
        out.push((a, b, d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ActionLabel::*;

    fn brute(a: &[Real], b: &[Real]) -> Real {
        let (n, m) = (a.len(), b.len());
        let mut d = vec![vec![Real::INFINITY; m + 1]; n + 1];
        d[0][0] = 0.0;
        for p in 1..=n {
            for q in 1..=m {
                let c = (a[p - 1] - b[q - 1]) * (a[p - 1] - b[q - 1]);
                d[p][q] = d[p - 1][q].min(d[p][q - 1]).min(d[p - 1][q - 1]) + c;
            }
        }
        d[n][m]
    }

    #[test]
    fn hand_examples() {
        assert_eq!(dtw_1d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(dtw_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!(dtw_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn two_channel_modes_against_enumeration() {
        let a = MultiSeries::from_rows(2, &[0.0, 1.0, 1.0, 2.0, 0.0, 3.0]).unwrap();
        let b = MultiSeries::from_rows(2, &[1.0, 0.0, 2.0, 2.0]).unwrap();
        let ch = |s: &MultiSeries, c: usize| s.channel(c).to_vec();
        let matched = (brute(&ch(&a, 0), &ch(&b, 0)) + brute(&ch(&a, 1), &ch(&b, 1))) / 2.0;
        let mut cross = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                cross += brute(&ch(&a, i), &ch(&b, j));
            }
        }
        cross /= 2.0;
        assert_eq!(
            multivariate_dtw(&a, &b, ChannelMode::Matched, None).unwrap(),
            matched
        );
        assert_eq!(
            multivariate_dtw(&a, &b, ChannelMode::Cross, None).unwrap(),
            cross
        );
        assert_ne!(matched, cross);
        let c3 = MultiSeries::from_rows(3, &[0.0; 6]).unwrap();
        assert!(multivariate_dtw(&a, &c3, ChannelMode::Matched, None).is_err());
    }

    #[test]
    fn single_channel_modes_agree() {
        let a = MultiSeries::from_rows(1, &[0.0, 2.0, 1.0]).unwrap();
        let b = MultiSeries::from_rows(1, &[1.0, 1.0]).unwrap();
        let d = dtw_1d(a.channel(0), b.channel(0)).unwrap();
        assert_eq!(
            multivariate_dtw(&a, &b, ChannelMode::Matched, None).unwrap(),
            d
        );
        assert_eq!(
            multivariate_dtw(&a, &b, ChannelMode::Cross, None).unwrap(),
            d
        );
    }

    #[test]
    fn wide_band_equals_unbanded_and_resample_keeps_endpoints() {
        let a: Vec<Real> = (0..30).map(|i| (i as Real * 0.4).sin()).collect();
        let b: Vec<Real> = (0..25).map(|i| (i as Real * 0.5).cos()).collect();
        assert_eq!(
            dtw_1d_banded(&a, &b, Some(100)).unwrap(),
            dtw_1d(&a, &b).unwrap()
        );
        assert!(dtw_1d_banded(&a, &b, Some(2)).unwrap() >= dtw_1d(&a, &b).unwrap());
        let s = MultiSeries::from_rows(1, &a).unwrap().resample(10).unwrap();
        assert_eq!(s.channel(0)[0], a[0]);
        assert!((s.channel(0)[9] - a[29]).abs() < 1e-12);
    }

    fn toy_set() -> (Vec<MultiSeries>, Vec<String>) {
        let s = |v: &[Real]| MultiSeries::from_rows(2, v).unwrap();
        let set = vec![
            s(&[0.0, 1.0, 1.0, 2.0]),
            s(&[0.0, 1.0, 1.0, 2.0]),
            s(&[3.0, 0.0, 2.0, 1.0, 0.0, 0.0]),
        ];
        (set, vec!["a".into(), "b".into(), "c".into()])
    }

    #[test]
    fn pairwise_matches_direct_calls() {
        let (set, ids) = toy_set();
        let m = pairwise_matrix(&set, &ids, ChannelMode::Matched, None).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
                if i != j {
                    assert_eq!(
                        m.get(i, j),
                        multivariate_dtw(&set[i], &set[j], ChannelMode::Matched, None).unwrap()
                    );
                }
            }
        }
        assert_eq!(m.get(0, 1), 0.0);
        assert!(pairwise_matrix(&set[..1], &ids[..1], ChannelMode::Matched, None).is_err());
        assert_eq!(m.to_csv().lines().count(), 4);
    }

    #[test]
    fn summary_and_merges() {
        let (set, ids) = toy_set();
        let m = pairwise_matrix(&set, &ids, ChannelMode::Matched, None).unwrap();
        let s = label_similarity_summary(&m, &[HairBrush, BrushTeeth, Writing]).unwrap();
        assert_eq!(s.get(HairBrush, BrushTeeth), Some(0.0));
        assert!(s.get(Writing, Writing).unwrap().is_nan());
        assert_eq!(suggest_merges(&s, 0.5), vec![(HairBrush, BrushTeeth, 0.0)]);
        assert!(suggest_merges(&s, 0.0).is_empty());
    }

    #[test]
    fn greedy_merge_keeps_lower_of_overlapping_pairs() {
        let labels = vec![HairBrush, BrushTeeth, Remotecon, MovingCan];
        let n = 4;
        let d = [
            [0.0, 1.0, 2.0, 9.0],
            [1.0, 0.0, 1.5, 9.0],
            [2.0, 1.5, 0.0, 9.0],
            [9.0, 9.0, 9.0, 0.0],
        ];
        let m = DtwMatrix {
            ids: (0..n).map(|i| i.to_string()).collect(),
            mode: ChannelMode::Matched,
            values: d.iter().flatten().copied().collect(),
        };
        let s = label_similarity_summary(&m, &labels).unwrap();
        // global mean = (1 + 2 + 9 + 1.5 + 9 + 9) / 6 = 5.25
        assert_eq!(suggest_merges(&s, 0.5), vec![(HairBrush, BrushTeeth, 1.0)]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            a in prop::collection::vec(-5.0f64..5.0, 1..11),
            b in prop::collection::vec(-5.0f64..5.0, 1..11),
        ) {
            let (a, b): (Vec<Real>, Vec<Real>) = (a.iter().map(|&v| v as Real).collect(), b.iter().map(|&v| v as Real).collect());
            let d = dtw_1d(&a, &b).unwrap();
            prop_assert_eq!(d, brute(&a, &b));
            prop_assert_eq!(d, dtw_1d(&b, &a).unwrap());
            prop_assert!(d >= 0.0);
            prop_assert_eq!(dtw_1d(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn parallel_equals_serial(vals in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2..12), 2..6)) {
            let set: Vec<MultiSeries> = vals.iter().map(|v| MultiSeries::from_rows(1, &v.iter().map(|&x| x as Real).collect::<Vec<_>>()).unwrap()).collect();
            let ids: Vec<String> = (0..set.len()).map(|i| i.to_string()).collect();
            let m = pairwise_matrix(&set, &ids, ChannelMode::Cross, None).unwrap();
            for i in 0..set.len() {
                for j in 0..set.len() {
                    let serial = if i == j { 0.0 } else { multivariate_dtw(&set[i], &set[j], ChannelMode::Cross, None).unwrap() };
                    prop_assert_eq!(m.get(i, j).to_bits(), serial.to_bits());
                }
            }
        }
    }
}
