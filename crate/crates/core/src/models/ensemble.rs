use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::cnn3d::Cnn3d;
use super::config::ModelConfig;
use super::layers::{stack, Init, LayerNorm, Linear};
use super::vit::{patchify, patchify_var, Vit};
use crate::data::NUM_KEYPOINTS;
use crate::seeds;
use crate::tensor::{load_checkpoint, save_checkpoint, Bound, Graph, ParamStore, Tensor, Var};
use crate::{CoreError, Result};

pub const IMU_PREFIX: &str = "imu.";
pub const SKELETON_PREFIX: &str = "skel.";
pub const HEAD_PREFIX: &str = "head.";

/// Inference batches are cut to this many items to bound memory.
const EVAL_CHUNK: usize = 64;

fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    seeds::rng(seed, &[seeds::hash_str(name)])
}

/// ViT over `[window, 4, 3]` IMU images.
#[derive(Clone, Debug)]
pub struct ImuBranch {
    pub store: ParamStore,
    pub vit: Vit,
}

impl ImuBranch {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, "imu");
        let vit = Vit::new(
            &mut Init::new(&mut store, &mut rng).scope("vit"),
            &cfg.imu_vit,
            cfg.imu_input(),
        )?;
        Ok(ImuBranch { store, vit })
    }

    pub fn dim(&self) -> usize {
        self.vit.cfg.embed_dim
    }

    /// Patch tokens `[B, N, P]` for a batch of window images.
    pub fn tokens(&self, windows: &[&Tensor]) -> Result<Tensor> {
        let patches = windows
            .iter()
            .map(|w| {
                if w.shape() != self.vit.input {
                    return Err(CoreError::invalid(format!(
                        "IMU window {:?} does not match {:?}",
                        w.shape(),
                        self.vit.input
                    )));
                }
                patchify(w, self.vit.cfg.patch)
            })
            .collect::<Result<Vec<_>>>()?;
        stack(&patches.iter().collect::<Vec<_>>())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.vit.forward(g, p, tokens, rng)
    }

    /// Evaluation-mode representations `[B, D]`.
    pub fn embed(&self, windows: &[&Tensor]) -> Result<Tensor> {
        embed_chunks(windows, self.dim(), |chunk| {
            let t = self.tokens(chunk)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let x = g.constant(t);
            let y = self.forward(&mut g, &p, x, None)?;
            Ok(g.value(y).clone())
        })
    }
}

/// 3D-CNN over heatmap volumes followed by a ViT over the resulting gray map.
#[derive(Clone, Debug)]
pub struct SkeletonBranch {
    pub store: ParamStore,
    pub cnn: Cnn3d,
    pub vit: Vit,
    /// `[K, T, H, W]` of one input volume.
    pub volume: [usize; 4],
}

impl SkeletonBranch {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, "skel");
        let mut init = Init::new(&mut store, &mut rng);
        let cnn = Cnn3d::new(&mut init.scope("cnn"), &cfg.cnn, NUM_KEYPOINTS)?;
        let vit = Vit::new(&mut init.scope("vit"), &cfg.skel_vit, cfg.skel_map()?)?;
        let volume = [NUM_KEYPOINTS, cfg.skel.frames, cfg.skel.grid, cfg.skel.grid];
        Ok(SkeletonBranch {
            store,
            cnn,
            vit,
            volume,
        })
    }

    pub fn dim(&self) -> usize {
        self.vit.cfg.embed_dim
    }

    pub fn batch(&self, volumes: &[&Tensor]) -> Result<Tensor> {
        if let Some(v) = volumes.iter().find(|v| v.shape() != self.volume) {
            return Err(CoreError::invalid(format!(
                "heatmap volume {:?} does not match {:?}",
                v.shape(),
                self.volume
            )));
        }
        stack(volumes)
    }

    /// `volumes: [B, K, T, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        volumes: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let map = self.cnn.forward(g, p, volumes)?;
        let s = g.shape(map).to_vec();
        let map = g.reshape(map, &[s[0], s[1], s[2], 1])?;
        let tokens = patchify_var(g, map, self.vit.cfg.patch)?;
        self.vit.forward(g, p, tokens, rng)
    }

    pub fn embed(&self, volumes: &[&Tensor]) -> Result<Tensor> {
        embed_chunks(volumes, self.dim(), |chunk| {
            let t = self.batch(chunk)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let x = g.constant(t);
            let y = self.forward(&mut g, &p, x, None)?;
            Ok(g.value(y).clone())
        })
    }
}

fn embed_chunks<F>(items: &[&Tensor], dim: usize, f: F) -> Result<Tensor>
where
    F: Fn(&[&Tensor]) -> Result<Tensor>,
{
    let mut data = Vec::with_capacity(items.len() * dim);
    for chunk in items.chunks(EVAL_CHUNK) {
        data.extend_from_slice(f(chunk)?.data());
    }
    Ok(Tensor::new([items.len(), dim], data)?)
}

/// Layer norm then a linear map to class logits. Used both as the fusion head
/// over concatenated branch outputs and as the throwaway classifier during
/// single-branch pretraining.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub store: ParamStore,
    norm: LayerNorm,
    fc: Linear,
}

impl ClassifierHead {
    pub fn new(inputs: usize, classes: usize, seed: u64, name: &str) -> Self {
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, name);
        let mut init = Init::new(&mut store, &mut rng);
        let norm = LayerNorm::new(&mut init, "norm", inputs);
        let fc = Linear::new(&mut init, "fc", inputs, classes);
        ClassifierHead { store, norm, fc }
    }

    pub fn inputs(&self) -> usize {
        self.fc.inputs
    }

    pub fn classes(&self) -> usize {
        self.fc.outputs
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let n = self.norm.forward(g, p, features)?;
        self.fc.forward(g, p, n)
    }

    /// Class probabilities `[B, C]` for fixed features `[B, inputs]`.
    pub fn probs(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(features.clone());
        let l = self.forward(&mut g, &p, x)?;
        let y = g.softmax(l)?;
        Ok(g.value(y).clone())
    }
}

/// Concatenates `[B, a]` and `[B, b]` feature rows.
pub fn concat_features(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(CoreError::invalid(format!(
            "cannot join features {sa:?} and {sb:?}"
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for (ra, rb) in a
        .data()
        .chunks(sa[1].max(1))
        .zip(b.data().chunks(sb[1].max(1)))
    {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Ok(Tensor::new([sa[0], sa[1] + sb[1]], data)?)
}

/// Copies the tensors named `prefix + name` into `store`. Every slot must be
/// filled with a matching shape; other names under `prefix` are rejected and
/// names outside it are ignored.
pub fn fill_store(
    store: &mut ParamStore,
    prefix: &str,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let Some(rest) = name.strip_prefix(prefix) else {
            continue;
        };
        let i = store
            .names()
            .iter()
            .position(|n| n == rest)
            .ok_or_else(|| CoreError::invalid(format!("unexpected checkpoint tensor {name}")))?;
        let slot = &mut store.tensors_mut()[i];
        if slot.shape() != t.shape() {
            return Err(CoreError::invalid(format!(
                "{name}: checkpoint shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
        seen[i] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(CoreError::invalid(format!(
            "checkpoint lacks {prefix}{}",
            store.names()[i]
        ))),
        None => Ok(()),
    }
}

/// IMU branch, skeleton branch and fusion head.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub cfg: ModelConfig,
    pub imu: ImuBranch,
    pub skel: SkeletonBranch,
    pub head: ClassifierHead,
}

impl EnsembleModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let imu = ImuBranch::new(cfg, seed)?;
        let skel = SkeletonBranch::new(cfg, seed)?;
        let head = ClassifierHead::new(imu.dim() + skel.dim(), cfg.classes, seed, "head");
        Ok(EnsembleModel {
            cfg: cfg.clone(),
            imu,
            skel,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Every tensor under its component prefix.
    pub fn params(&self) -> ParamStore {
        let mut all = ParamStore::new();
        all.extend_prefixed(IMU_PREFIX, &self.imu.store);
        all.extend_prefixed(SKELETON_PREFIX, &self.skel.store);
        all.extend_prefixed(HEAD_PREFIX, &self.head.store);
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let all = self.params();
        save_checkpoint(path, all.iter())?;
        Ok(())
    }

    /// Builds the architecture for `cfg` and fills it from a checkpoint. Every
    /// tensor must be present with a matching shape and no extra names may occur.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let mut m = EnsembleModel::new(cfg, 0)?;
        let loaded = load_checkpoint(path)?;
        m.assign(loaded)?;
        Ok(m)
    }

    pub fn assign(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if let Some((name, _)) = tensors.iter().find(|(n, _)| {
            ![IMU_PREFIX, SKELETON_PREFIX, HEAD_PREFIX]
                .iter()
                .any(|p| n.starts_with(p))
        }) {
            return Err(CoreError::invalid(format!(
                "unexpected checkpoint tensor {name}"
            )));
        }
        fill_store(&mut self.imu.store, IMU_PREFIX, &tensors)?;
        fill_store(&mut self.skel.store, SKELETON_PREFIX, &tensors)?;
        fill_store(&mut self.head.store, HEAD_PREFIX, &tensors)
    }

    /// Fused class probabilities `[W, C]` for IMU windows that all share one
    /// skeleton volume.
    pub fn window_probs(&self, windows: &[&Tensor], volume: &Tensor) -> Result<Tensor> {
        let imu = self.imu.embed(windows)?;
        let skel = self.skel.embed(&[volume])?;
        let skel_rows = Tensor::new(
            [windows.len(), skel.numel()],
            skel.data()
                .iter()
                .copied()
                .cycle()
                .take(windows.len() * skel.numel())
                .collect(),
        )?;
        self.head.probs(&concat_features(&imu, &skel_rows)?)
    }

    /// End-to-end logits on one graph, for gradient checks and fine-tuning.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: [&Bound; 3],
        tokens: Var,
        volumes: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let [pi, ps, ph] = bound;
        let a = self.imu.forward(g, pi, tokens, rng.as_deref_mut())?;
        let b = self.skel.forward(g, ps, volumes, rng)?;
        let f = g.concat(&[a, b], 1)?;
        self.head.forward(g, ph, f)
    }
}
