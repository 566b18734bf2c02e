//! Pretrain each branch with a throwaway classifier, then freeze both and fit
//! the fusion head on their concatenated representations.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActionLabel, LabelMap, PairedSample, RecordingId, SkeletonSequence};
use crate::evaluation::{confusion, ConfusionMatrix};
use crate::imu_pipeline::preprocess_imu;
use crate::models::{
    concat_features, ClassifierHead, EnsembleModel, ImuBranch, ModelConfig, SkeletonBranch,
};
use crate::skeleton_pipeline::{normalize_to_grid, render, AugmentationSpec};
use crate::tensor::{
    adam_step, AdamConfig, AdamState, Bound, Gradients, Graph, ParamStore, Tensor,
};
use crate::{seeds, CoreError, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Imu,
    Skeleton,
    Head,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Imu, Phase::Skeleton, Phase::Head];

    fn tag(self) -> u64 {
        seeds::hash_str(&self.to_string())
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Imu => "imu",
            Phase::Skeleton => "skeleton",
            Phase::Head => "head",
        })
    }
}

impl FromStr for Phase {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imu" => Ok(Phase::Imu),
            "skeleton" | "skel" => Ok(Phase::Skeleton),
            "head" => Ok(Phase::Head),
            _ => Err(CoreError::config(format!(
                "unknown phase {s:?} (imu, skeleton, head)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr: Real,
    pub epochs: usize,
    pub seed: u64,
    pub class_count: usize,
    pub weight_decay: Real,
    /// Skeleton phase only.
    pub augmentation: AugmentationSpec,
    /// Randomly reassigns training labels among training segments (a control run).
    pub shuffle_labels: bool,
}

impl TrainConfig {
    pub fn defaults(phase: Phase, class_count: usize) -> Self {
        let (batch_size, lr, epochs) = match phase {
            Phase::Imu => (32, 1e-5, 40),
            Phase::Skeleton => (32, 1e-4, 100),
            Phase::Head => (32, 1e-3, 10),
        };
        TrainConfig {
            phase,
            batch_size,
            lr,
            epochs,
            seed: 0,
            class_count,
            weight_decay: 0.0,
            augmentation: AugmentationSpec::default(),
            shuffle_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::config("batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(CoreError::config(
                "learning rate and weight decay must be finite and non-negative",
            ));
        }
        if self.class_count < 2 {
            return Err(CoreError::config("at least two classes are needed"));
        }
        self.augmentation.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::with_lr(self.lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: Phase,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub test: Option<TestMetrics>,
    /// Kept out of the JSON so that replayed runs serialize identically.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunRecord {
    fn new(cfg: &TrainConfig) -> Self {
        RunRecord {
            phase: cfg.phase,
            config: cfg.clone(),
            epochs: Vec::new(),
            test: None,
            wall_seconds: 0.0,
        }
    }
}

/// One segment ready for the models: normalized IMU windows and the skeleton
/// in grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSegment {
    pub id: RecordingId,
    pub windows: Vec<Tensor>,
    pub skeleton: SkeletonSequence,
}

impl PreparedSegment {
    pub fn label(&self) -> ActionLabel {
        self.id.label
    }

    pub fn participant(&self) -> &str {
        &self.id.participant
    }

    pub fn window_refs(&self) -> Vec<&Tensor> {
        self.windows.iter().collect()
    }
}

pub fn prepare(samples: &[&PairedSample], cfg: &ModelConfig) -> Result<Vec<PreparedSegment>> {
    cfg.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let windows = preprocess_imu(&[&s.imu], &cfg.imu)?
                .pop()
                .unwrap_or_default();
            if windows.is_empty() {
                return Err(CoreError::SegmentTooShort {
                    len: s.imu.len(),
                    window: cfg.imu.window,
                });
            }
            Ok(PreparedSegment {
                id: s.id().clone(),
                windows: windows.into_iter().map(|w| w.pixels).collect(),
                skeleton: normalize_to_grid(&s.skeleton, &cfg.skel)?,
            })
        })
        .collect()
}

fn check_phase(cfg: &TrainConfig, phase: Phase, labels: &LabelMap) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != phase {
        return Err(CoreError::config(format!(
            "config is for phase {}, not {phase}",
            cfg.phase
        )));
    }
    if cfg.class_count != labels.num_classes() {
        return Err(CoreError::config(format!(
            "class count {} does not match the label map's {}",
            cfg.class_count,
            labels.num_classes()
        )));
    }
    Ok(())
}

/// Per-segment training targets; fails when a class has no segment.
fn targets(train: &[PreparedSegment], labels: &LabelMap, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let mut y: Vec<usize> = train.iter().map(|s| labels.class_of(s.label())).collect();
    for c in 0..labels.num_classes() {
        if !y.contains(&c) {
            return Err(CoreError::invalid(format!(
                "class {} has no training segment",
                labels.class_name(c)
            )));
        }
    }
    if cfg.shuffle_labels {
        y.shuffle(&mut seeds::rng(
            cfg.seed,
            &[seeds::hash_str("shuffle-labels")],
        ));
    }
    Ok(y)
}

fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(
        cfg.seed,
        &[cfg.phase.tag(), seeds::hash_str("order"), epoch as u64],
    ));
    order
}

fn step_rng(cfg: &TrainConfig, epoch: usize, step: usize) -> ChaCha8Rng {
    seeds::rng(
        cfg.seed,
        &[
            cfg.phase.tag(),
            seeds::hash_str("dropout"),
            epoch as u64,
            step as u64,
        ],
    )
}

fn apply(
    store: &mut ParamStore,
    bound: &Bound,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<()> {
    let g: Vec<Tensor> = bound
        .vars()
        .iter()
        .zip(store.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    adam_step(store.tensors_mut(), &g, state)?;
    Ok(())
}

fn correct(logits: &Tensor, y: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(y)
        .filter(|(row, &t)| argmax(row) == t)
        .count()
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Default)]
struct Running {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl Running {
    fn add(&mut self, batch_loss: Real, correct: usize, n: usize) {
        self.loss += batch_loss as f64 * n as f64;
        self.correct += correct;
        self.seen += n;
    }

    fn finish(&self, epoch: usize, valid: Option<Evaluation>) -> EpochRecord {
        EpochRecord {
            epoch: epoch + 1,
            train_loss: self.loss / self.seen.max(1) as f64,
            train_accuracy: self.correct as f64 / self.seen.max(1) as f64,
            valid_loss: valid.as_ref().map(|v| v.loss),
            valid_accuracy: valid.as_ref().map(|v| v.accuracy),
        }
    }
}

pub struct ImuRun {
    pub branch: ImuBranch,
    pub stub: ClassifierHead,
    pub record: RunRecord,
}

pub struct SkeletonRun {
    pub branch: SkeletonBranch,
    pub stub: ClassifierHead,
    pub record: RunRecord,
}

pub enum UnimodalRun {
    Imu(ImuRun),
    Skeleton(SkeletonRun),
}

impl UnimodalRun {
    pub fn record(&self) -> &RunRecord {
        match self {
            UnimodalRun::Imu(r) => &r.record,
            UnimodalRun::Skeleton(r) => &r.record,
        }
    }
}

/// Pretrains the branch named by `cfg.phase`.
pub fn train_unimodal(
    model: &ModelConfig,
    train: &[PreparedSegment],
    valid: &[PreparedSegment],
    labels: &LabelMap,
    cfg: &TrainConfig,
) -> Result<UnimodalRun> {
    match cfg.phase {
        Phase::Imu => train_imu(model, train, valid, labels, cfg).map(UnimodalRun::Imu),
        Phase::Skeleton => {
            train_skeleton(model, train, valid, labels, cfg).map(UnimodalRun::Skeleton)
        }
        Phase::Head => Err(CoreError::config(
            "the head phase needs trained branches; use train_head",
        )),
    }
}

pub fn imu_window_probs(
    branch: &ImuBranch,
    stub: &ClassifierHead,
    seg: &PreparedSegment,
) -> Result<Tensor> {
    stub.probs(&branch.embed(&seg.window_refs())?)
}

pub fn train_imu(
    model: &ModelConfig,
    train: &[PreparedSegment],
    valid: &[PreparedSegment],
    labels: &LabelMap,
    cfg: &TrainConfig,
) -> Result<ImuRun> {
    let start = Instant::now();
    check_phase(cfg, Phase::Imu, labels)?;
    let y = targets(train, labels, cfg)?;
    let mut branch = ImuBranch::new(model, cfg.seed)?;
    let mut stub = ClassifierHead::new(branch.dim(), cfg.class_count, cfg.seed, "imu-stub");
    let items: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(s, seg)| (0..seg.windows.len()).map(move |w| (s, w)))
        .collect();
    let mut opt_b = AdamState::new(branch.store.tensors(), cfg.adam());
    let mut opt_s = AdamState::new(stub.store.tensors(), cfg.adam());
    let mut record = RunRecord::new(cfg);
    for epoch in 0..cfg.epochs {
        let mut run = Running::default();
        for (step, batch) in epoch_order(items.len(), cfg, epoch)
            .chunks(cfg.batch_size)
            .enumerate()
        {
            let windows: Vec<&Tensor> = batch
                .iter()
                .map(|&i| &train[items[i].0].windows[items[i].1])
                .collect();
            let targets: Vec<usize> = batch.iter().map(|&i| y[items[i].0]).collect();
            let tokens = branch.tokens(&windows)?;
            let mut rng = step_rng(cfg, epoch, step);
            let mut g = Graph::new();
            let pb = branch.store.bind(&mut g, true);
            let ps = stub.store.bind(&mut g, true);
            let x = g.constant(tokens);
            let f = branch.forward(&mut g, &pb, x, Some(&mut rng))?;
            let logits = stub.forward(&mut g, &ps, f)?;
            let loss = g.cross_entropy(logits, &targets)?;
            run.add(
                g.value(loss).item(),
                correct(g.value(logits), &targets),
                targets.len(),
            );
            let grads = g.backward(loss)?;
            apply(&mut branch.store, &pb, &grads, &mut opt_b)?;
            apply(&mut stub.store, &ps, &grads, &mut opt_s)?;
        }
        let v = (!valid.is_empty())
            .then(|| {
                evaluate_with(valid, labels, Aggregation::MeanSoftmax, |s| {
                    imu_window_probs(&branch, &stub, s)
                })
            })
            .transpose()?;
        record.epochs.push(run.finish(epoch, v));
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok(ImuRun {
        branch,
        stub,
        record,
    })
}

fn eval_volume(model: &ModelConfig, seg: &PreparedSegment) -> Result<Tensor> {
    // uniform sampling draws nothing from the generator
    render(&seg.skeleton, &model.skel, None, &mut seeds::rng(0, &[]))
}

pub fn skeleton_probs(
    model: &ModelConfig,
    branch: &SkeletonBranch,
    stub: &ClassifierHead,
    seg: &PreparedSegment,
) -> Result<Tensor> {
    let v = eval_volume(model, seg)?;
    stub.probs(&branch.embed(&[&v])?)
}

pub fn train_skeleton(
    model: &ModelConfig,
    train: &[PreparedSegment],
    valid: &[PreparedSegment],
    labels: &LabelMap,
    cfg: &TrainConfig,
) -> Result<SkeletonRun> {
    let start = Instant::now();
    check_phase(cfg, Phase::Skeleton, labels)?;
    let y = targets(train, labels, cfg)?;
    let mut branch = SkeletonBranch::new(model, cfg.seed)?;
    let mut stub = ClassifierHead::new(branch.dim(), cfg.class_count, cfg.seed, "skel-stub");
    let mut opt_b = AdamState::new(branch.store.tensors(), cfg.adam());
    let mut opt_s = AdamState::new(stub.store.tensors(), cfg.adam());
    let mut record = RunRecord::new(cfg);
    for epoch in 0..cfg.epochs {
        let mut run = Running::default();
        for (step, batch) in epoch_order(train.len(), cfg, epoch)
            .chunks(cfg.batch_size)
            .enumerate()
        {
            let volumes = batch
                .par_iter()
                .map(|&i| {
                    let mut r = seeds::rng(
                        cfg.seed,
                        &[seeds::hash_str("augment"), epoch as u64, i as u64],
                    );
                    render(
                        &train[i].skeleton,
                        &model.skel,
                        Some(&cfg.augmentation),
                        &mut r,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let x = branch.batch(&volumes.iter().collect::<Vec<_>>())?;
            drop(volumes);
            let mut rng = step_rng(cfg, epoch, step);
            let mut g = Graph::new();
            let pb = branch.store.bind(&mut g, true);
            let ps = stub.store.bind(&mut g, true);
            let x = g.constant(x);
            let f = branch.forward(&mut g, &pb, x, Some(&mut rng))?;
            let logits = stub.forward(&mut g, &ps, f)?;
            let loss = g.cross_entropy(logits, &targets)?;
            run.add(
                g.value(loss).item(),
                correct(g.value(logits), &targets),
                targets.len(),
            );
            let grads = g.backward(loss)?;
            apply(&mut branch.store, &pb, &grads, &mut opt_b)?;
            apply(&mut stub.store, &ps, &grads, &mut opt_s)?;
        }
        let v = (!valid.is_empty())
            .then(|| {
                evaluate_with(valid, labels, Aggregation::MeanSoftmax, |s| {
                    skeleton_probs(model, &branch, &stub, s)
                })
            })
            .transpose()?;
        record.epochs.push(run.finish(epoch, v));
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok(SkeletonRun {
        branch,
        stub,
        record,
    })
}

/// Frozen-branch features `[W, D_imu + D_skel]` for every window of `seg`.
pub fn fused_features(model: &EnsembleModel, seg: &PreparedSegment) -> Result<Tensor> {
    let imu = model.imu.embed(&seg.window_refs())?;
    let v = eval_volume(&model.cfg, seg)?;
    let skel = model.skel.embed(&[&v])?;
    let rows = Tensor::new(
        [seg.windows.len(), skel.numel()],
        skel.data()
            .iter()
            .copied()
            .cycle()
            .take(seg.windows.len() * skel.numel())
            .collect(),
    )?;
    concat_features(&imu, &rows)
}

/// Fits a fresh fusion head on top of the two frozen branches.
pub fn train_head(
    model: &ModelConfig,
    imu: &ImuBranch,
    skel: &SkeletonBranch,
    train: &[PreparedSegment],
    valid: &[PreparedSegment],
    labels: &LabelMap,
    cfg: &TrainConfig,
) -> Result<(EnsembleModel, RunRecord)> {
    let start = Instant::now();
    check_phase(cfg, Phase::Head, labels)?;
    if imu.dim() != model.imu_vit.embed_dim || skel.dim() != model.skel_vit.embed_dim {
        return Err(CoreError::invalid(format!(
            "branch widths {} and {} do not match the head config ({} and {})",
            imu.dim(),
            skel.dim(),
            model.imu_vit.embed_dim,
            model.skel_vit.embed_dim
        )));
    }
    let y = targets(train, labels, cfg)?;
    let mut ens_cfg = model.clone();
    ens_cfg.classes = cfg.class_count;
    let mut ensemble = EnsembleModel {
        cfg: ens_cfg,
        imu: imu.clone(),
        skel: skel.clone(),
        head: ClassifierHead::new(imu.dim() + skel.dim(), cfg.class_count, cfg.seed, "head"),
    };
    let feats: Vec<Tensor> = train
        .par_iter()
        .map(|s| fused_features(&ensemble, s))
        .collect::<Result<_>>()?;
    let width = imu.dim() + skel.dim();
    let items: Vec<(usize, usize)> = feats
        .iter()
        .enumerate()
        .flat_map(|(s, f)| (0..f.shape()[0]).map(move |w| (s, w)))
        .collect();
    let mut opt = AdamState::new(ensemble.head.store.tensors(), cfg.adam());
    let mut record = RunRecord::new(cfg);
    for epoch in 0..cfg.epochs {
        let mut run = Running::default();
        for batch in epoch_order(items.len(), cfg, epoch).chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * width);
            for &i in batch {
                let (s, w) = items[i];
                data.extend_from_slice(&feats[s].data()[w * width..(w + 1) * width]);
            }
            let targets: Vec<usize> = batch.iter().map(|&i| y[items[i].0]).collect();
            let mut g = Graph::new();
            let ph = ensemble.head.store.bind(&mut g, true);
            let x = g.constant(Tensor::new([batch.len(), width], data)?);
            let logits = ensemble.head.forward(&mut g, &ph, x)?;
            let loss = g.cross_entropy(logits, &targets)?;
            run.add(
                g.value(loss).item(),
                correct(g.value(logits), &targets),
                targets.len(),
            );
            let grads = g.backward(loss)?;
            apply(&mut ensemble.head.store, &ph, &grads, &mut opt)?;
        }
        let v = (!valid.is_empty())
            .then(|| evaluate(&ensemble, valid, labels, Aggregation::MeanSoftmax))
            .transpose()?;
        record.epochs.push(run.finish(epoch, v));
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok((ensemble, record))
}

/// How window probabilities become a prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Argmax of the mean softmax over the segment's windows.
    #[default]
    MeanSoftmax,
    /// Most frequent window argmax; ties go to the higher mean probability, then the lower class.
    MajorityVote,
    /// Every window is scored on its own.
    WindowLevel,
}

impl FromStr for Aggregation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-softmax" | "mean" => Ok(Aggregation::MeanSoftmax),
            "majority-vote" | "vote" => Ok(Aggregation::MajorityVote),
            "window-level" | "window" => Ok(Aggregation::WindowLevel),
            _ => Err(CoreError::config(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub participant: String,
    /// Set for window-level scoring.
    pub window: Option<usize>,
    pub truth: usize,
    pub pred: usize,
    pub probs: Vec<Real>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn confusion(&self, labels: &LabelMap) -> Result<ConfusionMatrix> {
        let p: Vec<usize> = self.predictions.iter().map(|p| p.pred).collect();
        let t: Vec<usize> = self.predictions.iter().map(|p| p.truth).collect();
        confusion(&p, &t, labels.class_names())
    }

    pub fn to_csv(&self, labels: &LabelMap) -> String {
        let mut out = String::from("id,participant,window,truth,pred");
        for name in labels.class_names() {
            out.push_str(&format!(",p_{name}"));
        }
        out.push('\n');
        for p in &self.predictions {
            let window = p.window.map(|w| w.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}",
                p.id,
                p.participant,
                window,
                labels.class_name(p.truth),
                labels.class_name(p.pred)
            ));
            for v in &p.probs {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `(window index, prediction, probabilities)` for a `[W, C]` probability table.
pub fn aggregate(
    window_probs: &Tensor,
    agg: Aggregation,
) -> Result<Vec<(Option<usize>, usize, Vec<Real>)>> {
    let s = window_probs.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(CoreError::invalid(format!(
            "window probabilities {s:?} are empty"
        )));
    }
    let (w, c) = (s[0], s[1]);
    let rows: Vec<&[Real]> = window_probs.data().chunks(c).collect();
    if agg == Aggregation::WindowLevel {
        return Ok(rows
            .iter()
            .enumerate()
            .map(|(i, r)| (Some(i), argmax(r), r.to_vec()))
            .collect());
    }
    let mut mean = vec![0.0 as Real; c];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= w as Real);
    let pred = match agg {
        Aggregation::MeanSoftmax => argmax(&mean),
        _ => {
            let mut votes = vec![0usize; c];
            for r in &rows {
                votes[argmax(r)] += 1;
            }
            let mut best = 0;
            for k in 1..c {
                if votes[k] > votes[best] || (votes[k] == votes[best] && mean[k] > mean[best]) {
                    best = k;
                }
            }
            best
        }
    };
    Ok(vec![(None, pred, mean)])
}

/// Scores `segs` with `window_probs`, which maps a segment to `[W, C]` class
/// probabilities. Loss is the mean of `-ln p(true)` over the scored units.
pub fn evaluate_with<F>(
    segs: &[PreparedSegment],
    labels: &LabelMap,
    agg: Aggregation,
    window_probs: F,
) -> Result<Evaluation>
where
    F: Fn(&PreparedSegment) -> Result<Tensor> + Sync,
{
    if segs.is_empty() {
        return Err(CoreError::EmptyInput("evaluation segments"));
    }
    let per_seg = segs
        .par_iter()
        .map(|seg| {
            if seg.windows.is_empty() {
                return Err(CoreError::invalid(format!(
                    "segment {} has no windows",
                    seg.id
                )));
            }
            let probs = window_probs(seg)?;
            if probs.shape().get(1) != Some(&labels.num_classes()) {
                return Err(CoreError::invalid(format!(
                    "scorer produced {:?} for {} classes",
                    probs.shape(),
                    labels.num_classes()
                )));
            }
            let truth = labels.class_of(seg.label());
            Ok(aggregate(&probs, agg)?
                .into_iter()
                .map(|(window, pred, probs)| Prediction {
                    id: seg.id.to_string(),
                    participant: seg.participant().to_string(),
                    window,
                    truth,
                    pred,
                    probs,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<Prediction> = per_seg.into_iter().flatten().collect();
    let n = predictions.len() as f64;
    // summed in sorted order so the result does not depend on segment order
    let mut terms: Vec<f64> = predictions
        .iter()
        .map(|p| -(p.probs[p.truth] as f64).max(f64::MIN_POSITIVE).ln())
        .collect();
    terms.sort_by(f64::total_cmp);
    let loss = terms.iter().sum::<f64>() / n;
    let accuracy = predictions.iter().filter(|p| p.pred == p.truth).count() as f64 / n;
    Ok(Evaluation {
        loss,
        accuracy,
        predictions,
    })
}

pub fn evaluate(
    model: &EnsembleModel,
    segs: &[PreparedSegment],
    labels: &LabelMap,
    agg: Aggregation,
) -> Result<Evaluation> {
    if model.classes() != labels.num_classes() {
        return Err(CoreError::invalid(format!(
            "model has {} classes, label map {}",
            model.classes(),
            labels.num_classes()
        )));
    }
    evaluate_with(segs, labels, agg, |seg| {
        model.head.probs(&fused_features(model, seg)?)
    })
}

/// Per-phase settings for a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub imu: TrainConfig,
    pub skeleton: TrainConfig,
    pub head: TrainConfig,
}

impl PipelineConfig {
    pub fn defaults(class_count: usize, seed: u64) -> Self {
        let mk = |p| TrainConfig {
            seed,
            ..TrainConfig::defaults(p, class_count)
        };
        PipelineConfig {
            imu: mk(Phase::Imu),
            skeleton: mk(Phase::Skeleton),
            head: mk(Phase::Head),
        }
    }

    /// Five epochs per phase with learning rates raised to suit
    /// [`ModelConfig::small`].
    pub fn small(class_count: usize, seed: u64) -> Self {
        let mut c = Self::defaults(class_count, seed);
        for (t, lr) in [
            (&mut c.imu, 2e-3),
            (&mut c.skeleton, 1e-3),
            (&mut c.head, 1e-3),
        ] {
            t.epochs = 5;
            t.lr = lr;
        }
        c
    }
}

pub struct PipelineRun {
    pub model: EnsembleModel,
    pub imu: RunRecord,
    pub skeleton: RunRecord,
    pub head: RunRecord,
}

/// Both pretraining phases followed by the head phase.
pub fn train_pipeline(
    model: &ModelConfig,
    train: &[PreparedSegment],
    valid: &[PreparedSegment],
    labels: &LabelMap,
    cfg: &PipelineConfig,
) -> Result<PipelineRun> {
    let imu = train_imu(model, train, valid, labels, &cfg.imu)?;
    let skel = train_skeleton(model, train, valid, labels, &cfg.skeleton)?;
    let (ensemble, head) = train_head(
        model,
        &imu.branch,
        &skel.branch,
        train,
        valid,
        labels,
        &cfg.head,
    )?;
    Ok(PipelineRun {
        model: ensemble,
        imu: imu.record,
        skeleton: skel.record,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{merge_labels, DEFAULT_MERGE_PAIRS};
    use crate::models::Cnn3dConfig;
    use crate::synthgen::{generate, GenConfig};
    use proptest::prelude::*;

    fn tiny_model() -> ModelConfig {
        let mut c = ModelConfig::small();
        c.imu_vit.depth = 1;
        c.imu_vit.embed_dim = 16;
        c.imu_vit.heads = 2;
        c.skel.grid = 8;
        c.skel.frames = 4;
        c.cnn =
            Cnn3dConfig::from_lists(&[4, 4, 4, 4, 1], &[1, 2, 1, 1, 1], &[2, 1, 1, 1, 1]).unwrap();
        c.skel_vit.depth = 1;
        c.skel_vit.embed_dim = 16;
        c.skel_vit.heads = 2;
        c
    }

    fn corpus_segments(model: &ModelConfig) -> Vec<PreparedSegment> {
        let cfg = GenConfig {
            nd: 2,
            stroke: 0,
            sessions: 2,
            ..GenConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let refs: Vec<&PairedSample> = corpus.samples.iter().collect();
        prepare(&refs, model).unwrap()
    }

    fn quick(phase: Phase, classes: usize, epochs: usize, lr: Real) -> TrainConfig {
        TrainConfig {
            epochs,
            lr,
            seed: 3,
            ..TrainConfig::defaults(phase, classes)
        }
    }

    #[test]
    fn defaults_per_phase() {
        let d = |p| {
            let c = TrainConfig::defaults(p, 9);
            (c.batch_size, c.lr, c.epochs)
        };
        assert_eq!(d(Phase::Imu), (32, 1e-5, 40));
        assert_eq!(d(Phase::Skeleton), (32, 1e-4, 100));
        assert_eq!(d(Phase::Head), (32, 1e-3, 10));
        assert_eq!("skeleton".parse::<Phase>().unwrap(), Phase::Skeleton);
        assert!("both".parse::<Phase>().is_err());
    }

    #[test]
    fn imu_pretraining_learns_and_is_deterministic() {
        let model = tiny_model();
        let segs = corpus_segments(&model);
        let labels = LabelMap::identity();
        let cfg = quick(Phase::Imu, 9, 2, 3e-3);
        let a = train_imu(&model, &segs, &segs[..9], &labels, &cfg).unwrap();
        assert_eq!(a.record.epochs.len(), 2);
        assert!(
            a.record.epochs[1].train_loss < a.record.epochs[0].train_loss,
            "{:?}",
            a.record.epochs
        );
        let b = train_imu(&model, &segs, &segs[..9], &labels, &cfg).unwrap();
        assert_eq!(a.record.epochs, b.record.epochs);
        assert_eq!(a.branch.store.digest(), b.branch.store.digest());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let model = tiny_model();
        let segs = corpus_segments(&model);
        let labels = LabelMap::identity();
        let fresh = ImuBranch::new(&model, 3).unwrap();
        let run = train_imu(&model, &segs, &[], &labels, &quick(Phase::Imu, 9, 1, 0.0)).unwrap();
        assert_eq!(run.branch.store.digest(), fresh.store.digest());
        let fresh = SkeletonBranch::new(&model, 3).unwrap();
        let run = train_skeleton(
            &model,
            &segs,
            &[],
            &labels,
            &quick(Phase::Skeleton, 9, 1, 0.0),
        )
        .unwrap();
        assert_eq!(run.branch.store.digest(), fresh.store.digest());
    }

    #[test]
    fn head_training_freezes_branches_and_emits_merged_classes() {
        let model = tiny_model();
        let segs = corpus_segments(&model);
        let merged = merge_labels(&LabelMap::identity(), &DEFAULT_MERGE_PAIRS).unwrap();
        let imu = ImuBranch::new(&model, 1).unwrap();
        let skel = SkeletonBranch::new(&model, 2).unwrap();
        let before = (imu.store.digest(), skel.store.digest());
        let (ens, rec) = train_head(
            &model,
            &imu,
            &skel,
            &segs,
            &segs[..5],
            &merged,
            &quick(Phase::Head, 7, 2, 1e-2),
        )
        .unwrap();
        assert_eq!((imu.store.digest(), skel.store.digest()), before);
        assert_eq!((ens.imu.store.digest(), ens.skel.store.digest()), before);
        assert_eq!(ens.classes(), 7);
        assert_eq!(rec.epochs.len(), 2);
        let e = evaluate(&ens, &segs[..4], &merged, Aggregation::MeanSoftmax).unwrap();
        assert!(e.predictions.iter().all(|p| p.probs.len() == 7));
        // wrong phase and wrong class count are rejected
        assert!(train_head(
            &model,
            &imu,
            &skel,
            &segs,
            &[],
            &merged,
            &quick(Phase::Imu, 7, 1, 1e-2)
        )
        .is_err());
        assert!(train_head(
            &model,
            &imu,
            &skel,
            &segs,
            &[],
            &merged,
            &quick(Phase::Head, 9, 1, 1e-2)
        )
        .is_err());
        let mut wide = model.clone();
        wide.imu_vit.embed_dim = 32;
        assert!(train_head(
            &wide,
            &imu,
            &skel,
            &segs,
            &[],
            &merged,
            &quick(Phase::Head, 7, 1, 1e-2)
        )
        .is_err());
    }

    #[test]
    fn empty_class_is_rejected() {
        let model = tiny_model();
        let segs: Vec<PreparedSegment> = corpus_segments(&model)
            .into_iter()
            .filter(|s| s.label() != ActionLabel::Writing)
            .collect();
        let err = train_imu(
            &model,
            &segs,
            &[],
            &LabelMap::identity(),
            &quick(Phase::Imu, 9, 1, 1e-3),
        );
        assert!(err.is_err());
    }

    #[test]
    fn shuffled_labels_are_a_permutation() {
        let model = tiny_model();
        let segs = corpus_segments(&model);
        let labels = LabelMap::identity();
        let mut cfg = quick(Phase::Imu, 9, 1, 1e-3);
        let plain = targets(&segs, &labels, &cfg).unwrap();
        cfg.shuffle_labels = true;
        let shuffled = targets(&segs, &labels, &cfg).unwrap();
        assert_ne!(plain, shuffled);
        let (mut a, mut b) = (plain, shuffled);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    fn constant_scorer(
        class: usize,
        c: usize,
    ) -> impl Fn(&PreparedSegment) -> Result<Tensor> + Sync {
        move |seg: &PreparedSegment| {
            let mut row = vec![0.02 as Real; c];
            row[class] = 1.0 - 0.02 * (c - 1) as Real;
            let data = row
                .iter()
                .copied()
                .cycle()
                .take(c * seg.windows.len())
                .collect();
            Ok(Tensor::new([seg.windows.len(), c], data)?)
        }
    }

    #[test]
    fn constant_model_accuracy() {
        let model = tiny_model();
        let segs = corpus_segments(&model);
        let labels = LabelMap::identity();
        let ones: Vec<PreparedSegment> = segs
            .iter()
            .filter(|s| s.label() == ActionLabel::LiftCupHandle)
            .cloned()
            .collect();
        let e = evaluate_with(
            &ones,
            &labels,
            Aggregation::MeanSoftmax,
            constant_scorer(0, 9),
        )
        .unwrap();
        assert_eq!(e.accuracy, 1.0);
        let e = evaluate_with(
            &segs,
            &labels,
            Aggregation::MeanSoftmax,
            constant_scorer(0, 9),
        )
        .unwrap();
        assert!((e.accuracy - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(
            e.confusion(&labels).unwrap().trace() as f64 / segs.len() as f64,
            e.accuracy
        );
        let mut reversed = segs.clone();
        reversed.reverse();
        let r = evaluate_with(
            &reversed,
            &labels,
            Aggregation::MeanSoftmax,
            constant_scorer(0, 9),
        )
        .unwrap();
        assert_eq!((r.accuracy, r.loss), (e.accuracy, e.loss));
    }

    #[test]
    fn single_window_aggregation_is_identity() {
        let p = Tensor::new([1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        for agg in [Aggregation::MeanSoftmax, Aggregation::MajorityVote] {
            let out = aggregate(&p, agg).unwrap();
            assert_eq!(out, vec![(None, 1, vec![0.2, 0.5, 0.3])]);
        }
        assert!(aggregate(&Tensor::zeros([0, 3]), Aggregation::MeanSoftmax).is_err());
    }

    #[test]
    fn split_votes_by_hand() {
        // two windows vote 0 weakly, one votes 2 strongly
        let p = Tensor::new([3, 3], vec![0.4, 0.3, 0.3, 0.4, 0.3, 0.3, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(aggregate(&p, Aggregation::MeanSoftmax).unwrap()[0].1, 2);
        assert_eq!(aggregate(&p, Aggregation::MajorityVote).unwrap()[0].1, 0);
        let w = aggregate(&p, Aggregation::WindowLevel).unwrap();
        assert_eq!(w.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0, 0, 2]);
    }

    proptest! {
        #[test]
        fn mean_softmax_matches_enumeration(w in 1usize..6, c in 2usize..6, seed in 0u64..1000) {
            let raw = Tensor::uniform([w, c], 0.01, 1.0, &mut seeds::rng(seed, &[]));
            let mut data = raw.into_data();
            for row in data.chunks_mut(c) {
                let s: Real = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let p = Tensor::new([w, c], data.clone()).unwrap();
            // oracle: class with the largest column sum, first on ties
            let mut best = (0, Real::NEG_INFINITY);
            for k in 0..c {
                let s: Real = (0..w).map(|i| data[i * c + k]).sum();
                if s > best.1 {
                    best = (k, s);
                }
            }
            prop_assert_eq!(aggregate(&p, Aggregation::MeanSoftmax).unwrap()[0].1, best.0);
        }
    }
}
