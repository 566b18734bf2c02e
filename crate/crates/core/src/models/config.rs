use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::imu_pipeline::{ImuPipelineConfig, AXES, IMAGE_COLUMNS};
use crate::skeleton_pipeline::SkeletonPipelineConfig;
use crate::{CoreError, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// `[rows, cols]` of one patch.
    pub patch: [usize; 2],
    pub mlp_ratio: usize,
    pub dropout: Real,
}

impl VitConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(CoreError::config(format!(
                "{what}: embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch[0] == 0 || self.patch[1] == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::config(format!(
                "{what}: patch and mlp_ratio must be positive"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config(format!(
                "{what}: dropout must be in [0, 1)"
            )));
        }
        Ok(())
    }

    /// Token count for an `[h, w, c]` input, or an error if the patches do not tile it.
    pub fn num_tokens(&self, input: [usize; 3]) -> Result<usize> {
        let [ph, pw] = self.patch;
        if input[0] % ph != 0 || input[1] % pw != 0 || input[0] == 0 || input[1] == 0 {
            return Err(CoreError::config(format!(
                "{ph}x{pw} patches do not tile a {}x{} input",
                input[0], input[1]
            )));
        }
        Ok((input[0] / ph) * (input[1] / pw))
    }
}

/// One stage of the 3D-CNN. Stages 1-4 are residual blocks of two 3x3x3
/// convolutions; stage 5 is a 1x1x1 convolution to a single channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub time_stride: usize,
    pub space_stride: usize,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cnn3dConfig {
    pub stages: Vec<StageSpec>,
}

impl Cnn3dConfig {
    pub fn from_lists(channels: &[usize], time: &[usize], space: &[usize]) -> Result<Self> {
        if channels.len() != 5 || time.len() != 5 || space.len() != 5 {
            return Err(CoreError::config("the 3D-CNN has exactly 5 stages"));
        }
        let stages = (0..5)
            .map(|i| StageSpec {
                channels: channels[i],
                time_stride: time[i],
                space_stride: space[i],
                residual: i < 4,
            })
            .collect();
        let cfg = Cnn3dConfig { stages };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 5 {
            return Err(CoreError::config("the 3D-CNN has exactly 5 stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.time_stride == 0 || s.space_stride == 0 {
                return Err(CoreError::config(format!(
                    "stage {}: channels and strides must be positive",
                    i + 1
                )));
            }
            if s.residual != (i < 4) {
                return Err(CoreError::config("stages 1-4 are residual, stage 5 is not"));
            }
        }
        let last = &self.stages[4];
        if last.channels != 1 || last.time_stride != 1 || last.space_stride != 1 {
            return Err(CoreError::config(
                "stage 5 maps to 1 channel with unit stride",
            ));
        }
        Ok(())
    }

    /// `[t, h, w]` after every stage for a `[t, h, w]` input (3x3x3 kernels, padding 1).
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut e = input;
        if e.iter().any(|&v| v == 0) {
            return Err(CoreError::config(format!(
                "3D-CNN input {input:?} is empty"
            )));
        }
        for s in &self.stages[..4] {
            e = [
                (e[0] - 1) / s.time_stride + 1,
                (e[1] - 1) / s.space_stride + 1,
                (e[2] - 1) / s.space_stride + 1,
            ];
        }
        Ok(e)
    }
}

/// Every dimension of the two-branch ensemble and its preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub imu: ImuPipelineConfig,
    pub imu_vit: VitConfig,
    pub skel: SkeletonPipelineConfig,
    pub cnn: Cnn3dConfig,
    pub skel_vit: VitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 9,
            imu: ImuPipelineConfig::default(),
            imu_vit: VitConfig {
                depth: 6,
                heads: 8,
                embed_dim: 256,
                patch: [4, 4],
                mlp_ratio: 4,
                dropout: 0.1,
            },
            skel: SkeletonPipelineConfig::default(),
            cnn: Cnn3dConfig::from_lists(&[32, 64, 64, 32, 1], &[1, 2, 1, 2, 1], &[2, 1, 2, 1, 1])
                .unwrap(),
            skel_vit: VitConfig {
                depth: 2,
                heads: 8,
                embed_dim: 256,
                patch: [2, 2],
                mlp_ratio: 4,
                dropout: 0.1,
            },
        }
    }
}

impl ModelConfig {
    /// Small dimensions for tests and desk-scale runs: 32-wide branches,
    /// a 16x16 grid with 8 frames and a narrow 3D-CNN.
    pub fn small() -> Self {
        let mut c = ModelConfig::default();
        c.imu_vit.embed_dim = 32;
        c.imu_vit.heads = 4;
        c.imu_vit.mlp_ratio = 2;
        c.skel_vit.embed_dim = 32;
        c.skel_vit.heads = 4;
        c.skel_vit.mlp_ratio = 2;
        c.skel.grid = 16;
        c.skel.frames = 8;
        c.skel.sigma = 0.6;
        c.cnn = Cnn3dConfig::from_lists(&[8, 16, 16, 8, 1], &[1, 2, 1, 2, 1], &[2, 1, 1, 1, 1])
            .unwrap();
        c
    }

    pub fn imu_input(&self) -> [usize; 3] {
        [self.imu.window, IMAGE_COLUMNS, AXES]
    }

    /// Extent of the gray map fed to the skeleton ViT, as `[h, w, 1]`.
    pub fn skel_map(&self) -> Result<[usize; 3]> {
        let [_, h, w] =
            self.cnn
                .output_extent([self.skel.frames, self.skel.grid, self.skel.grid])?;
        Ok([h, w, 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::config("at least two classes are needed"));
        }
        self.imu.validate()?;
        self.skel.validate()?;
        self.cnn.validate()?;
        self.imu_vit.validate("imu.vit")?;
        self.skel_vit.validate("skel.vit")?;
        self.imu_vit.num_tokens(self.imu_input())?;
        self.skel_vit.num_tokens(self.skel_map()?)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# model configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: Vec<usize>| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let stage = |f: fn(&StageSpec) -> usize| list(self.cnn.stages.iter().map(f).collect());
        let vit = |v: &VitConfig| {
            [
                v.depth.to_string(),
                v.heads.to_string(),
                v.embed_dim.to_string(),
                format!("{}x{}", v.patch[0], v.patch[1]),
                v.mlp_ratio.to_string(),
                v.dropout.to_string(),
            ]
        };
        let [id, ih, ie, ip, im, idr] = vit(&self.imu_vit);
        let [sd, sh, se, sp, sm, sdr] = vit(&self.skel_vit);
        vec![
            ("classes", self.classes.to_string()),
            ("imu.window", self.imu.window.to_string()),
            ("imu.stride", self.imu.stride.to_string()),
            (
                "imu.norm_scope",
                format!("{:?}", self.imu.norm_scope).to_lowercase(),
            ),
            ("imu.eps", self.imu.eps.to_string()),
            ("imu.pad_short", self.imu.pad_short.to_string()),
            ("imu.vit.depth", id),
            ("imu.vit.heads", ih),
            ("imu.vit.embed_dim", ie),
            ("imu.vit.patch", ip),
            ("imu.vit.mlp_ratio", im),
            ("imu.vit.dropout", idr),
            ("skel.grid", self.skel.grid.to_string()),
            ("skel.sigma", self.skel.sigma.to_string()),
            ("skel.sigma_squared", self.skel.sigma_squared.to_string()),
            ("skel.frames", self.skel.frames.to_string()),
            ("skel.bbox_pad", self.skel.bbox_pad.to_string()),
            ("skel.conf_threshold", self.skel.conf_threshold.to_string()),
            ("skel.cnn.channels", stage(|s| s.channels)),
            ("skel.cnn.time_stride", stage(|s| s.time_stride)),
            ("skel.cnn.space_stride", stage(|s| s.space_stride)),
            ("skel.vit.depth", sd),
            ("skel.vit.heads", sh),
            ("skel.vit.embed_dim", se),
            ("skel.vit.patch", sp),
            ("skel.vit.mlp_ratio", sm),
            ("skel.vit.dropout", sdr),
        ]
    }

    /// Parses `key = value` lines over `base`; `#` starts a comment. Unknown
    /// keys are rejected.
    pub fn from_text_over(base: &ModelConfig, text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut c = base.clone();
        let mut channels: Vec<usize> = c.cnn.stages.iter().map(|s| s.channels).collect();
        let mut time: Vec<usize> = c.cnn.stages.iter().map(|s| s.time_stride).collect();
        let mut space: Vec<usize> = c.cnn.stages.iter().map(|s| s.space_stride).collect();
        for (k, v) in &kv {
            match k.as_str() {
                "classes" => c.classes = num(k, v)?,
                "imu.window" => c.imu.window = num(k, v)?,
                "imu.stride" => c.imu.stride = num(k, v)?,
                "imu.norm_scope" => c.imu.norm_scope = v.parse()?,
                "imu.eps" => c.imu.eps = num(k, v)?,
                "imu.pad_short" => c.imu.pad_short = num(k, v)?,
                "imu.vit.depth" => c.imu_vit.depth = num(k, v)?,
                "imu.vit.heads" => c.imu_vit.heads = num(k, v)?,
                "imu.vit.embed_dim" => c.imu_vit.embed_dim = num(k, v)?,
                "imu.vit.patch" => c.imu_vit.patch = patch(k, v)?,
                "imu.vit.mlp_ratio" => c.imu_vit.mlp_ratio = num(k, v)?,
                "imu.vit.dropout" => c.imu_vit.dropout = num(k, v)?,
                "skel.grid" => c.skel.grid = num(k, v)?,
                "skel.sigma" => c.skel.sigma = num(k, v)?,
                "skel.sigma_squared" => c.skel.sigma_squared = num(k, v)?,
                "skel.frames" => c.skel.frames = num(k, v)?,
                "skel.bbox_pad" => c.skel.bbox_pad = num(k, v)?,
                "skel.conf_threshold" => c.skel.conf_threshold = num(k, v)?,
                "skel.cnn.channels" => channels = list(k, v)?,
                "skel.cnn.time_stride" => time = list(k, v)?,
                "skel.cnn.space_stride" => space = list(k, v)?,
                "skel.vit.depth" => c.skel_vit.depth = num(k, v)?,
                "skel.vit.heads" => c.skel_vit.heads = num(k, v)?,
                "skel.vit.embed_dim" => c.skel_vit.embed_dim = num(k, v)?,
                "skel.vit.patch" => c.skel_vit.patch = patch(k, v)?,
                "skel.vit.mlp_ratio" => c.skel_vit.mlp_ratio = num(k, v)?,
                "skel.vit.dropout" => c.skel_vit.dropout = num(k, v)?,
                _ => return Err(CoreError::config(format!("unknown model config key {k:?}"))),
            }
        }
        c.cnn = Cnn3dConfig::from_lists(&channels, &time, &space)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_over(&ModelConfig::default(), text)
    }
}

/// `key = value` lines in file order; later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CoreError::Parse {
            source_name: "config".into(),
            line: i as u64 + 1,
            msg: format!("expected key = value, got {raw:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::config(format!("{k}: cannot parse {v:?}")))
}

fn list(k: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(k, x.trim())).collect()
}

fn patch(k: &str, v: &str) -> Result<[usize; 2]> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| CoreError::config(format!("{k}: expected RxC, got {v:?}")))?;
    Ok([num(k, a.trim())?, num(k, b.trim())?])
}
