use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rehab_core::data::{
    merge_labels, read_participants_csv, split_dataset, ActionLabel, Corpus, Group, LabelMap, PairedSample,
    SplitConfig, SplitMode, DEFAULT_MERGE_PAIRS,
};
use rehab_core::dtw::{imu_series, label_similarity_summary, pairwise_matrix, skeleton_series, suggest_merges, ChannelMode};
use rehab_core::evaluation::{f1_grid, group_mean_f1};
use rehab_core::imu_pipeline::{preprocess_imu, ImuPipelineConfig, NormScope};
use rehab_core::models::{fill_store, EnsembleModel, ImuBranch, ModelConfig, SkeletonBranch, IMU_PREFIX, SKELETON_PREFIX};
use rehab_core::seeds;
use rehab_core::skeleton_pipeline::{normalize_to_grid, render, AugmentationSpec, FramePolicy, SkeletonPipelineConfig};
use rehab_core::synthgen::{describe as describe_corpus, generate, GenConfig};
use rehab_core::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use rehab_core::training::{
    evaluate, prepare, train_head, train_imu, train_skeleton, Aggregation, PipelineConfig, PreparedSegment, RunRecord,
};
use serde::Serialize;
use serde_json::json;

use crate::cli::*;
use crate::error::{CliError, CliResult};
use crate::manifest::Inputs;

pub const STUB_PREFIX: &str = "stub.";
pub const IMU_CKPT: &str = "imu.ckpt";
pub const SKELETON_CKPT: &str = "skeleton.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const MODEL_CONFIG: &str = "model.txt";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLIT_FILE: &str = "split.json";

/// What a command reports back for its manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Inputs,
    pub timings: BTreeMap<String, f64>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write(path, s)
}

fn read(path: &Path, inputs: &mut Inputs) -> CliResult<String> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    inputs.file(path)?;
    Ok(text)
}

fn load_corpus(dir: &Path, inputs: &mut Inputs) -> CliResult<Corpus> {
    if !dir.is_dir() {
        return Err(CliError::io(dir, "not a directory"));
    }
    let files = Corpus::files(dir)?;
    inputs.files_under(dir, &files)?;
    Ok(Corpus::load(dir)?)
}

pub fn parse_pair(s: &str) -> CliResult<(ActionLabel, ActionLabel)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| CliError::invalid(format!("label pair {s:?} is not A:B")))?;
    Ok((a.parse()?, b.parse()?))
}

fn group_filter(g: GroupArg) -> Option<Group> {
    match g {
        GroupArg::All => None,
        GroupArg::Nd => Some(Group::ND),
        GroupArg::Stroke => Some(Group::Stroke),
    }
}

fn in_group(corpus: &Corpus, s: &PairedSample, g: Option<Group>) -> CliResult<bool> {
    Ok(match g {
        None => true,
        Some(g) => corpus.roster.group_of(s.participant())? == g,
    })
}

pub fn synth(a: &SynthArgs, out: &Path) -> CliResult<Outcome> {
    let couplings = if a.no_couple {
        Vec::new()
    } else if a.couple.is_empty() {
        GenConfig::default().couplings
    } else {
        a.couple.iter().map(|p| parse_pair(p)).collect::<CliResult<_>>()?
    };
    let cfg = GenConfig {
        seed: a.seed,
        nd: a.nd,
        stroke: a.stroke,
        sessions: a.sessions,
        repeats: a.repeats,
        noise_nd: a.noise_nd,
        noise_stroke: a.noise_stroke,
        couplings,
        coupling_gap: a.coupling_gap,
        coupled_channels: a.coupled_channels,
        min_imu_len: a.min_imu_len,
        ..GenConfig::default()
    };
    cfg.validate()?;
    let corpus = generate(&cfg)?;
    corpus.write(out)?;
    println!("wrote {} segments from {} participants", corpus.len(), corpus.roster.len());
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("serializable"),
        seed: Some(cfg.seed),
        ..Outcome::default()
    })
}

pub fn describe(a: &DescribeArgs, out: Option<&Path>) -> CliResult<Outcome> {
    let mut inputs = Inputs::default();
    let corpus = load_corpus(&a.data, &mut inputs)?;
    let report = describe_corpus(&corpus)?;
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{report}");
    }
    if let Some(out) = out {
        write(&out.join("describe.csv"), report.to_csv())?;
    }
    Ok(Outcome {
        config: json!({ "data": a.data }),
        inputs,
        ..Outcome::default()
    })
}

pub fn preprocess_imu_cmd(a: &PreprocessImuArgs, out: &Path) -> CliResult<Outcome> {
    let cfg = ImuPipelineConfig {
        window: a.window,
        stride: a.stride,
        norm_scope: match a.norm_scope {
            NormScopeArg::Segment => NormScope::Segment,
            NormScopeArg::Corpus => NormScope::Corpus,
        },
        eps: a.eps,
        pad_short: a.pad_short,
    };
    cfg.validate()?;
    let mut inputs = Inputs::default();
    let corpus = load_corpus(&a.input, &mut inputs)?;
    let segs: Vec<_> = corpus.samples.iter().map(|s| &s.imu).collect();
    let windows = preprocess_imu(&segs, &cfg)?;
    let mut index = String::from("name,id,participant,label,start\n");
    let mut named = Vec::new();
    for (seg, ws) in segs.iter().zip(&windows) {
        for w in ws {
            let name = format!("{}/{}", w.source, w.start);
            index.push_str(&format!(
                "{name},{},{},{},{}\n",
                w.source,
                seg.participant(),
                seg.label().index(),
                w.start
            ));
            named.push((name, &w.pixels));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    save_checkpoint(out.join("imu_windows.ckpt"), named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    write(&out.join("imu_windows.csv"), index)?;
    println!("{} windows from {} segments", named.len(), segs.len());
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("serializable"),
        inputs,
        ..Outcome::default()
    })
}

fn augmentation(a: &AugmentArgs) -> CliResult<AugmentationSpec> {
    let spec = AugmentationSpec {
        flip_prob: a.flip_prob,
        crop: a.crop,
        policy: match a.policy {
            PolicyArg::Uniform => FramePolicy::Uniform,
            PolicyArg::FirstOfSubsegment => FramePolicy::FirstOfSubsegment,
            PolicyArg::RandomOfSubsegment => FramePolicy::RandomOfSubsegment,
        },
        per_frame: a.per_frame,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn preprocess_skel_cmd(a: &PreprocessSkelArgs, out: &Path) -> CliResult<Outcome> {
    let cfg = SkeletonPipelineConfig {
        grid: a.grid,
        sigma: a.sigma,
        sigma_squared: a.sigma_squared,
        frames: a.frames,
        bbox_pad: a.bbox_pad,
        conf_threshold: a.conf_threshold,
    };
    cfg.validate()?;
    let aug = if a.no_augment { None } else { Some(augmentation(&a.augment)?) };
    let mut inputs = Inputs::default();
    let corpus = load_corpus(&a.input, &mut inputs)?;
    for p in &a.participant {
        corpus.roster.get(p)?;
    }
    let picked: Vec<&PairedSample> = corpus
        .samples
        .iter()
        .filter(|s| a.participant.is_empty() || a.participant.iter().any(|p| p == s.participant()))
        .collect();
    let dir = out.join("volumes");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    picked.par_iter().try_for_each(|s| -> CliResult<()> {
        let id = s.id().to_string();
        let grid = normalize_to_grid(&s.skeleton, &cfg)?;
        let mut rng = seeds::rng(a.seed, &[seeds::hash_str(&id)]);
        let v = render(&grid, &cfg, aug.as_ref(), &mut rng)?;
        save_checkpoint(dir.join(format!("{id}.ckpt")), [("volume", &v)])?;
        Ok(())
    })?;
    println!("{} volumes of [53, {}, {}, {}]", picked.len(), cfg.frames, cfg.grid, cfg.grid);
    Ok(Outcome {
        config: json!({ "pipeline": cfg, "augmentation": aug, "participants": a.participant }),
        seed: Some(a.seed),
        inputs,
        ..Outcome::default()
    })
}

/// Preset, then `--set` overrides.
pub fn model_config(m: &ModelArgs) -> CliResult<ModelConfig> {
    let base = match m.preset {
        Preset::Default => ModelConfig::default(),
        Preset::Small => ModelConfig::small(),
    };
    if m.set.is_empty() {
        return Ok(base);
    }
    let mut text = String::new();
    for kv in &m.set {
        if !kv.contains('=') {
            return Err(CliError::invalid(format!("--set {kv:?} is not key=value")));
        }
        text.push_str(kv);
        text.push('\n');
    }
    Ok(ModelConfig::from_text_over(&base, &text)?)
}

fn split_config(s: &SplitArgs) -> CliResult<SplitConfig> {
    let parts: Vec<f64> = s
        .split_ratios
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::invalid(format!("split ratios {:?} are not three numbers", s.split_ratios)))?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| CliError::invalid(format!("split ratios {:?} are not three numbers", s.split_ratios)))?;
    Ok(SplitConfig {
        ratios,
        seed: s.split_seed,
        mode: match s.split_mode {
            SplitModeArg::Segment => SplitMode::Segment,
            SplitModeArg::Participant => SplitMode::Participant,
        },
    })
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct SplitFile {
    config: SplitConfig,
    train: Vec<String>,
    valid: Vec<String>,
    test: Vec<String>,
}

fn branch_store(prefix: &str, branch: &ParamStore, stub: &ParamStore) -> ParamStore {
    let mut all = ParamStore::new();
    all.extend_prefixed(prefix, branch);
    all.extend_prefixed(STUB_PREFIX, stub);
    all
}

fn save_store(path: &Path, store: &ParamStore) -> CliResult<()> {
    save_checkpoint(path, store.iter())?;
    Ok(())
}

fn record_json(path: &Path, r: &RunRecord, timings: &mut BTreeMap<String, f64>) -> CliResult<()> {
    timings.insert(r.phase.to_string(), r.wall_seconds);
    write_json(path, r)
}

fn load_into(store: &mut ParamStore, prefix: &str, path: &Path, inputs: &mut Inputs) -> CliResult<()> {
    let tensors = load_checkpoint(path)?;
    inputs.file(path)?;
    fill_store(store, prefix, &tensors).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn train(a: &TrainArgs, out: &Path) -> CliResult<Outcome> {
    let mut inputs = Inputs::default();
    let mut cfg = model_config(&a.model)?;
    let labels = match &a.labels {
        Some(p) => LabelMap::from_csv(&read(p, &mut inputs)?)?,
        None => LabelMap::identity(),
    };
    cfg.classes = labels.num_classes();
    cfg.validate()?;
    let split_cfg = split_config(&a.split)?;

    let mut pc = match a.model.preset {
        Preset::Default => PipelineConfig::defaults(cfg.classes, a.seed),
        Preset::Small => PipelineConfig::small(cfg.classes, a.seed),
    };
    for t in [&mut pc.imu, &mut pc.skeleton, &mut pc.head] {
        if let Some(b) = a.batch_size {
            t.batch_size = b;
        }
        if let Some(w) = a.weight_decay {
            t.weight_decay = w;
        }
        t.shuffle_labels = a.shuffle_labels;
    }
    for (t, epochs, lr) in [
        (&mut pc.imu, a.imu_epochs, a.imu_lr),
        (&mut pc.skeleton, a.skeleton_epochs, a.skeleton_lr),
        (&mut pc.head, a.head_epochs, a.head_lr),
    ] {
        if let Some(e) = epochs {
            t.epochs = e;
        }
        if let Some(l) = lr {
            t.lr = l;
        }
    }
    pc.skeleton.augmentation = augmentation(&a.augment)?;
    for t in [&pc.imu, &pc.skeleton, &pc.head] {
        t.validate()?;
    }
    let (want_imu, want_skel, want_head) = match a.phase {
        PhaseArg::All => (true, true, true),
        PhaseArg::Imu => (true, false, false),
        PhaseArg::Skeleton => (false, true, false),
        PhaseArg::Head => (false, false, true),
    };
    if a.phase == PhaseArg::Head && (a.imu_checkpoint.is_none() || a.skeleton_checkpoint.is_none()) {
        return Err(CliError::invalid("--phase head needs --imu-checkpoint and --skeleton-checkpoint"));
    }

    let corpus = load_corpus(&a.data, &mut inputs)?;
    let split = split_dataset(&corpus.samples, &corpus.roster, &split_cfg)?;
    let group = group_filter(a.group);
    let pick = |idx: &[usize]| -> CliResult<Vec<&PairedSample>> {
        let mut v = Vec::new();
        for &i in idx {
            let s = &corpus.samples[i];
            if in_group(&corpus, s, group)? {
                v.push(s);
            }
        }
        Ok(v)
    };
    let train_set = prepare(&pick(&split.train)?, &cfg)?;
    let valid_set = prepare(&pick(&split.valid)?, &cfg)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| corpus.samples[i].id().to_string()).collect::<Vec<_>>();
    let split_file = SplitFile {
        config: split_cfg.clone(),
        train: ids(&split.train),
        valid: ids(&split.valid),
        test: ids(&split.test),
    };
    drop(corpus);

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join(MODEL_CONFIG), cfg.to_text())?;
    write(&out.join(LABELS_FILE), labels.to_csv())?;
    write_json(&out.join(SPLIT_FILE), &split_file)?;

    let mut timings = BTreeMap::new();
    let imu_branch = if want_imu {
        let run = train_imu(&cfg, &train_set, &valid_set, &labels, &pc.imu)?;
        save_store(&out.join(IMU_CKPT), &branch_store(IMU_PREFIX, &run.branch.store, &run.stub.store))?;
        record_json(&out.join("imu_record.json"), &run.record, &mut timings)?;
        report_epochs(&run.record);
        run.branch
    } else {
        let mut b = ImuBranch::new(&cfg, a.seed)?;
        if let Some(p) = &a.imu_checkpoint {
            load_into(&mut b.store, IMU_PREFIX, p, &mut inputs)?;
        }
        b
    };
    let skel_branch = if want_skel {
        let run = train_skeleton(&cfg, &train_set, &valid_set, &labels, &pc.skeleton)?;
        save_store(&out.join(SKELETON_CKPT), &branch_store(SKELETON_PREFIX, &run.branch.store, &run.stub.store))?;
        record_json(&out.join("skeleton_record.json"), &run.record, &mut timings)?;
        report_epochs(&run.record);
        run.branch
    } else {
        let mut b = SkeletonBranch::new(&cfg, a.seed)?;
        if let Some(p) = &a.skeleton_checkpoint {
            load_into(&mut b.store, SKELETON_PREFIX, p, &mut inputs)?;
        }
        b
    };
    if want_head {
        let (model, record) = train_head(&cfg, &imu_branch, &skel_branch, &train_set, &valid_set, &labels, &pc.head)?;
        model.save(&out.join(MODEL_CKPT))?;
        record_json(&out.join("head_record.json"), &record, &mut timings)?;
        report_epochs(&record);
    }
    Ok(Outcome {
        config: json!({
            "phase": format!("{:?}", a.phase).to_lowercase(),
            "group": format!("{:?}", a.group).to_lowercase(),
            "model": cfg,
            "training": pc,
            "split": split_cfg,
            "classes": labels.class_names(),
        }),
        seed: Some(a.seed),
        inputs,
        timings,
    })
}

fn report_epochs(r: &RunRecord) {
    for e in &r.epochs {
        match e.valid_accuracy {
            Some(v) => println!("{} epoch {}: loss {:.4} train acc {:.3} valid acc {:.3}", r.phase, e.epoch, e.train_loss, e.train_accuracy, v),
            None => println!("{} epoch {}: loss {:.4} train acc {:.3}", r.phase, e.epoch, e.train_loss, e.train_accuracy),
        }
    }
}

pub fn eval(a: &EvalArgs, out: &Path) -> CliResult<Outcome> {
    let mut inputs = Inputs::default();
    let cfg = ModelConfig::from_text(&read(&a.run.join(MODEL_CONFIG), &mut inputs)?)?;
    let labels = LabelMap::from_csv(&read(&a.run.join(LABELS_FILE), &mut inputs)?)?;
    let split: SplitFile = serde_json::from_str(&read(&a.run.join(SPLIT_FILE), &mut inputs)?)
        .map_err(|e| CliError::invalid(format!("{}: {e}", a.run.join(SPLIT_FILE).display())))?;
    let ckpt = a.run.join(MODEL_CKPT);
    inputs.file(&ckpt)?;
    let model = EnsembleModel::load(&ckpt, &cfg)?;
    let corpus = load_corpus(&a.data, &mut inputs)?;
    let wanted: BTreeSet<&str> = match a.part {
        PartArg::Train => &split.train,
        PartArg::Valid => &split.valid,
        PartArg::Test => &split.test,
    }
    .iter()
    .map(String::as_str)
    .collect();
    let group = group_filter(a.group);
    let mut picked = Vec::new();
    let mut found = 0;
    for s in &corpus.samples {
        if wanted.contains(s.id().to_string().as_str()) {
            found += 1;
            if in_group(&corpus, s, group)? {
                picked.push(s);
            }
        }
    }
    if found != wanted.len() {
        return Err(CliError::invalid(format!(
            "{} of the {} split segments are missing from {}",
            wanted.len() - found,
            wanted.len(),
            a.data.display()
        )));
    }
    let segs: Vec<PreparedSegment> = prepare(&picked, &cfg)?;
    let agg = match a.aggregation {
        AggregationArg::MeanSoftmax => Aggregation::MeanSoftmax,
        AggregationArg::MajorityVote => Aggregation::MajorityVote,
        AggregationArg::WindowLevel => Aggregation::WindowLevel,
    };
    let e = evaluate(&model, &segs, &labels, agg)?;
    write(&out.join("predictions.csv"), e.to_csv(&labels))?;
    write(&out.join("confusion.csv"), e.confusion(&labels)?.to_csv())?;
    let metrics = json!({
        "part": format!("{:?}", a.part).to_lowercase(),
        "group": format!("{:?}", a.group).to_lowercase(),
        "aggregation": agg,
        "segments": segs.len(),
        "scored": e.predictions.len(),
        "loss": e.loss,
        "accuracy": e.accuracy,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("accuracy {:.4} loss {:.4} over {} units", e.accuracy, e.loss, e.predictions.len());
    Ok(Outcome {
        config: metrics,
        inputs,
        ..Outcome::default()
    })
}

/// `(participant, truth, pred)` rows and class names of a predictions file.
pub fn read_predictions(text: &str) -> CliResult<(Vec<String>, Vec<(String, usize, usize)>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header.len() < 7 || header[..5] != ["id", "participant", "window", "truth", "pred"] {
        return Err(CliError::invalid("predictions header must start with id,participant,window,truth,pred"));
    }
    let classes: Vec<String> = header[5..]
        .iter()
        .map(|h| h.strip_prefix("p_").map(str::to_string))
        .collect::<Option<_>>()
        .ok_or_else(|| CliError::invalid("probability columns must be named p_<class>"))?;
    let class_of = |name: &str| {
        classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::invalid(format!("class {name:?} has no probability column")))
    };
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(CliError::invalid(format!("prediction row {line:?} has {} columns", cols.len())));
        }
        rows.push((cols[1].to_string(), class_of(cols[3])?, class_of(cols[4])?));
    }
    Ok((classes, rows))
}

pub fn f1(a: &F1Args, out: &Path) -> CliResult<Outcome> {
    let mut inputs = Inputs::default();
    let (classes, rows) = read_predictions(&read(&a.predictions, &mut inputs)?)?;
    let roster = read_participants_csv(read(&a.participants, &mut inputs)?.as_bytes(), &a.participants.display().to_string())?;
    let present: BTreeSet<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let participants: Vec<String> = roster.iter().map(|p| p.id.clone()).filter(|p| present.contains(p.as_str())).collect();
    let preds: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let truths: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let ids: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let grid = f1_grid(&preds, &truths, &ids, &participants, &classes)?;
    let means = group_mean_f1(&grid, &roster)?;
    write(&out.join("f1_grid.csv"), grid.to_csv())?;
    let means_json: BTreeMap<String, f64> = means.iter().map(|(g, v)| (g.to_string(), *v)).collect();
    write_json(&out.join("group_f1.json"), &means_json)?;
    if a.plot_data {
        let mut long = String::from("participant,group,class,f1,tp,fp,fn\n");
        for (i, p) in grid.participants.iter().enumerate() {
            let g = roster.group_of(p)?;
            for (c, name) in grid.classes.iter().enumerate() {
                let (tp, fp, fn_) = grid.counts(i, c);
                long.push_str(&format!("{p},{g},{name},{},{tp},{fp},{fn_}\n", grid.get(i, c)));
            }
        }
        write(&out.join("f1_long.csv"), long)?;
    }
    for (g, v) in &means_json {
        println!("{g} mean F1 {v:.4}");
    }
    Ok(Outcome {
        config: json!({ "classes": classes, "participants": participants, "plot_data": a.plot_data }),
        inputs,
        ..Outcome::default()
    })
}

fn session_number(session: &str) -> Option<usize> {
    session.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().ok()
}

pub fn dtw(a: &DtwArgs, out: &Path) -> CliResult<Outcome> {
    let mut inputs = Inputs::default();
    let corpus = load_corpus(&a.data, &mut inputs)?;
    let group = group_filter(a.group);
    let mut picked = Vec::new();
    for s in &corpus.samples {
        if !in_group(&corpus, s, group)? {
            continue;
        }
        if a.max_session > 0 {
            let n = session_number(&s.id().session)
                .ok_or_else(|| CliError::invalid(format!("session {:?} has no number", s.id().session)))?;
            if n > a.max_session {
                continue;
            }
        }
        picked.push(s);
    }
    let mode = match a.mode {
        ChannelModeArg::Matched => ChannelMode::Matched,
        ChannelModeArg::Cross => ChannelMode::Cross,
    };
    let skel = SkeletonPipelineConfig::default();
    let series = picked
        .par_iter()
        .map(|s| {
            let m = match a.modality {
                ModalityArg::Imu => imu_series(&s.imu, 1e-8)?,
                ModalityArg::Skeleton => skeleton_series(&s.skeleton, skel.bbox_pad, skel.conf_threshold)?,
            };
            if a.resample > 0 {
                m.resample(a.resample)
            } else {
                Ok(m)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = picked.iter().map(|s| s.id().to_string()).collect();
    let labels: Vec<ActionLabel> = picked.iter().map(|s| s.label()).collect();
    let matrix = pairwise_matrix(&series, &ids, mode, a.band)?;
    let sim = label_similarity_summary(&matrix, &labels)?;
    let merges = suggest_merges(&sim, a.threshold);
    write(&out.join("matrix.csv"), matrix.to_csv())?;
    write(&out.join("labels.csv"), sim.to_csv())?;
    let mut m = String::from("label_a,label_b,name_a,name_b,dtw\n");
    for (x, y, d) in &merges {
        m.push_str(&format!("{},{},{x},{y},{d}\n", x.index(), y.index()));
        println!("merge {}:{} ({x} + {y}) at {d:.4}", x.index(), y.index());
    }
    write(&out.join("merges.csv"), m)?;
    if a.plot_data {
        let mut long = String::from("id_a,id_b,label_a,label_b,dtw\n");
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                long.push_str(&format!(
                    "{},{},{},{},{}\n",
                    ids[i],
                    ids[j],
                    labels[i].index(),
                    labels[j].index(),
                    matrix.get(i, j)
                ));
            }
        }
        write(&out.join("matrix_long.csv"), long)?;
    }
    Ok(Outcome {
        config: json!({
            "modality": format!("{:?}", a.modality).to_lowercase(),
            "mode": mode,
            "band": a.band,
            "resample": a.resample,
            "threshold": a.threshold,
            "group": format!("{:?}", a.group).to_lowercase(),
            "max_session": a.max_session,
            "segments": ids.len(),
        }),
        inputs,
        ..Outcome::default()
    })
}

pub fn read_merges(text: &str) -> CliResult<Vec<(ActionLabel, ActionLabel)>> {
    let mut lines = text.lines();
    if !lines.next().unwrap_or("").starts_with("label_a,label_b") {
        return Err(CliError::invalid("merges file header must start with label_a,label_b"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut cols = l.split(',');
            let a = cols.next().unwrap_or("").parse()?;
            let b = cols.next().unwrap_or("").parse()?;
            Ok((a, b))
        })
        .collect()
}

pub fn merge(a: &MergeArgs, out: &Path) -> CliResult<Outcome> {
    let mut inputs = Inputs::default();
    let base = match &a.base {
        Some(p) => LabelMap::from_csv(&read(p, &mut inputs)?)?,
        None => LabelMap::identity(),
    };
    let mut pairs = a.pair.iter().map(|p| parse_pair(p)).collect::<CliResult<Vec<_>>>()?;
    if let Some(p) = &a.from_dtw {
        pairs.extend(read_merges(&read(p, &mut inputs)?)?);
    }
    if pairs.is_empty() && a.from_dtw.is_none() {
        pairs = DEFAULT_MERGE_PAIRS.to_vec();
    }
    let map = merge_labels(&base, &pairs)?;
    write(&out.join("label_map.csv"), map.to_csv())?;
    println!("{} classes: {}", map.num_classes(), map.class_names().join(", "));
    Ok(Outcome {
        config: json!({
            "pairs": pairs.iter().map(|(x, y)| format!("{}:{}", x.index(), y.index())).collect::<Vec<_>>(),
            "classes": map.class_names(),
        }),
        inputs,
        ..Outcome::default()
    })
}

/// Output directory of a command, if it writes one.
pub fn out_dir(cmd: &Command) -> Option<&PathBuf> {
    match cmd {
        Command::Synth(a) => Some(&a.out),
        Command::PreprocessImu(a) => Some(&a.out),
        Command::PreprocessSkel(a) => Some(&a.out),
        Command::Train(a) => Some(&a.out),
        Command::Eval(a) => Some(&a.out),
        Command::Dtw(a) => Some(&a.out),
        Command::F1(a) => Some(&a.out),
        Command::MergeLabels(a) => Some(&a.out),
        Command::Describe(a) => a.out.as_ref(),
        Command::Replay(a) => Some(&a.out),
    }
}

pub fn run(cmd: &Command, out: &Path) -> CliResult<Outcome> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::PreprocessImu(a) => preprocess_imu_cmd(a, out),
        Command::PreprocessSkel(a) => preprocess_skel_cmd(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Dtw(a) => dtw(a, out),
        Command::F1(a) => f1(a, out),
        Command::MergeLabels(a) => merge(a, out),
        Command::Describe(a) => describe(a, Some(out)),
        Command::Replay(_) => Err(CliError::invalid("replay cannot be nested")),
    }
}
