use rand_chacha::ChaCha8Rng;

use super::config::VitConfig;
use super::layers::{Init, LayerNorm, Linear};
use crate::tensor::{kernels, Bound, Graph, ParamId, Tensor, Var};
use crate::{CoreError, Result};

const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm Vision Transformer over patch tokens with a learned class token.
/// The output is the final-normalized class token, `[B, embed_dim]`.
#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    /// `[h, w, c]` of one input image.
    pub input: [usize; 3],
    pub tokens: usize,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Vit {
    pub fn new(init: &mut Init, cfg: &VitConfig, input: [usize; 3]) -> Result<Self> {
        cfg.validate("vit")?;
        let tokens = cfg.num_tokens(input)?;
        let d = cfg.embed_dim;
        let patch_len = cfg.patch[0] * cfg.patch[1] * input[2];
        let embed = Linear::new(init, "embed", patch_len, d);
        let cls = init.randn("cls", &[1, d], TOKEN_INIT_STD as _);
        let pos = init.randn("pos", &[tokens + 1, d], TOKEN_INIT_STD as _);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut s = init.scope(&format!("block{i}"));
                Block {
                    ln1: LayerNorm::new(&mut s, "ln1", d),
                    qkv: Linear::new(&mut s, "qkv", d, 3 * d),
                    proj: Linear::new(&mut s, "proj", d, d),
                    ln2: LayerNorm::new(&mut s, "ln2", d),
                    fc1: Linear::new(&mut s, "fc1", d, d * cfg.mlp_ratio),
                    fc2: Linear::new(&mut s, "fc2", d * cfg.mlp_ratio, d),
                }
            })
            .collect();
        let norm = LayerNorm::new(init, "norm", d);
        Ok(Vit {
            cfg: cfg.clone(),
            input,
            tokens,
            embed,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cfg.patch[0] * self.cfg.patch[1] * self.input[2]
    }

    /// `x: [B, N, patch_len]` patch tokens. Dropout is applied only when `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.tokens || shape[2] != self.patch_len() {
            return Err(CoreError::invalid(format!(
                "vit expects [B, {}, {}] tokens, got {shape:?}",
                self.tokens,
                self.patch_len()
            )));
        }
        let b = shape[0];
        let d = self.cfg.embed_dim;
        let tok = self.embed.forward(g, p, x)?;
        let cls = g.expand(p[self.cls], b)?;
        let mut h = g.concat(&[cls, tok], 1)?;
        h = g.add_broadcast(h, p[self.pos])?;
        for blk in &self.blocks {
            let n = blk.ln1.forward(g, p, h)?;
            let a = self.attend(g, p, blk, n, b)?;
            let a = self.drop(g, a, rng.as_deref_mut())?;
            h = g.add(h, a)?;
            let n = blk.ln2.forward(g, p, h)?;
            let m = blk.fc1.forward(g, p, n)?;
            let m = g.gelu(m)?;
            let m = blk.fc2.forward(g, p, m)?;
            let m = self.drop(g, m, rng.as_deref_mut())?;
            h = g.add(h, m)?;
        }
        let h = self.norm.forward(g, p, h)?;
        let c = g.narrow(h, 1, 0, 1)?;
        Ok(g.reshape(c, &[b, d])?)
    }

    fn drop(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => Ok(g.dropout(x, self.cfg.dropout, r)?),
            _ => Ok(x),
        }
    }

    fn attend(&self, g: &mut Graph, p: &Bound, blk: &Block, x: Var, b: usize) -> Result<Var> {
        let (heads, d) = (self.cfg.heads, self.cfg.embed_dim);
        let (l, dh) = (self.tokens + 1, d / heads);
        let qkv = blk.qkv.forward(g, p, x)?;
        let qkv = g.reshape(qkv, &[b, l, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, b * heads, l, dh])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = g.narrow(qkv, 0, i, 1)?;
            *part = g.reshape(s, &[b * heads, l, dh])?;
        }
        let o = g.attention(parts[0], parts[1], parts[2])?;
        let o = g.reshape(o, &[b, heads, l, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, l, d])?;
        blk.proj.forward(g, p, o)
    }
}

/// Splits an `[h, w, c]` image into `[(h/ph)*(w/pw), ph*pw*c]` row-major patches.
pub fn patchify(img: &Tensor, patch: [usize; 2]) -> Result<Tensor> {
    let s = img.shape();
    let [ph, pw] = patch;
    if s.len() != 3 || ph == 0 || pw == 0 || s[0] % ph != 0 || s[1] % pw != 0 {
        return Err(CoreError::invalid(format!(
            "cannot cut {s:?} into {ph}x{pw} patches"
        )));
    }
    let split = [s[0] / ph, ph, s[1] / pw, pw, s[2]];
    let (_, data) = kernels::permute(img.data(), &split, &[0, 2, 1, 3, 4]);
    Ok(Tensor::new([split[0] * split[2], ph * pw * s[2]], data)?)
}

/// Inverse of [`patchify`] for an image of extent `[h, w, c]`.
pub fn unpatchify(patches: &Tensor, patch: [usize; 2], image: [usize; 3]) -> Result<Tensor> {
    let [ph, pw] = patch;
    let [h, w, c] = image;
    if ph == 0
        || pw == 0
        || h % ph != 0
        || w % pw != 0
        || patches.shape() != [(h / ph) * (w / pw), ph * pw * c]
    {
        return Err(CoreError::invalid(format!(
            "patches {:?} do not form a {image:?} image",
            patches.shape()
        )));
    }
    let split = [h / ph, w / pw, ph, pw, c];
    let (_, data) = kernels::permute(patches.data(), &split, &[0, 2, 1, 3, 4]);
    Ok(Tensor::new([h, w, c], data)?)
}

/// Graph version of [`patchify`] for a batch `x: [B, h, w, c]`.
pub fn patchify_var(g: &mut Graph, x: Var, patch: [usize; 2]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [ph, pw] = patch;
    if s.len() != 4 || ph == 0 || pw == 0 || s[1] % ph != 0 || s[2] % pw != 0 {
        return Err(CoreError::invalid(format!(
            "cannot cut {s:?} into {ph}x{pw} patches"
        )));
    }
    let (b, gh, gw, c) = (s[0], s[1] / ph, s[2] / pw, s[3]);
    let x = g.reshape(x, &[b, gh, ph, gw, pw, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(x, &[b, gh * gw, ph * pw * c])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::tensor::ParamStore;
    use proptest::prelude::*;

    fn small() -> VitConfig {
        VitConfig {
            depth: 2,
            heads: 2,
            embed_dim: 8,
            patch: [2, 2],
            mlp_ratio: 2,
            dropout: 0.1,
        }
    }

    #[test]
    fn patchify_by_hand() {
        // 4x2 single-channel image, 2x2 patches: two patches stacked vertically
        let img = Tensor::new([4, 2, 1], (0..8).map(|v| v as f64 as _).collect()).unwrap();
        let p = patchify(&img, [2, 2]).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let img = Tensor::new([2, 4, 1], (0..8).map(|v| v as f64 as _).collect()).unwrap();
        let p = patchify(&img, [2, 2]).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        assert!(patchify(&img, [3, 2]).is_err());
    }

    proptest! {
        #[test]
        fn patchify_roundtrip_and_graph_agrees(gh in 1usize..4, gw in 1usize..4, ph in 1usize..4, pw in 1usize..4, c in 1usize..4, seed in 0u64..100) {
            let shape = [gh * ph, gw * pw, c];
            let img = Tensor::randn(shape.to_vec(), 1.0, &mut seeds::rng(seed, &[]));
            let p = patchify(&img, [ph, pw]).unwrap();
            prop_assert_eq!(&unpatchify(&p, [ph, pw], shape).unwrap(), &img);
            let mut g = Graph::new();
            let x = g.constant(img.clone().reshape(vec![1, shape[0], shape[1], c]).unwrap());
            let y = patchify_var(&mut g, x, [ph, pw]).unwrap();
            prop_assert_eq!(g.value(y).data(), p.data());
        }
    }

    #[test]
    fn output_shape_and_dropout_only_in_training() {
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(1, &[]);
        let vit = Vit::new(&mut Init::new(&mut store, &mut rng), &small(), [4, 6, 3]).unwrap();
        assert_eq!(vit.tokens, 6);
        let x = Tensor::randn([3, 6, 12], 1.0, &mut rng);
        let run = |drop: Option<u64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let mut r = drop.map(|s| seeds::rng(s, &[]));
            let y = vit.forward(&mut g, &p, xv, r.as_mut()).unwrap();
            g.value(y).clone()
        };
        let eval = run(None);
        assert_eq!(eval.shape(), &[3, 8]);
        assert_eq!(eval, run(None));
        assert_eq!(run(Some(4)), run(Some(4)));
        assert_ne!(eval, run(Some(4)));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let bad = g.constant(Tensor::zeros([3, 5, 12]));
        assert!(vit.forward(&mut g, &p, bad, None).is_err());
    }

    #[test]
    fn depth_zero_is_normalized_class_token() {
        let mut cfg = small();
        cfg.depth = 0;
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(2, &[]);
        let vit = Vit::new(&mut Init::new(&mut store, &mut rng), &cfg, [2, 2, 1]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(Tensor::randn([2, 1, 4], 1.0, &mut rng));
        let y = vit.forward(&mut g, &p, xv, None).unwrap();
        let cls = store.by_name("cls").unwrap().data();
        let pos = &store.by_name("pos").unwrap().data()[..8];
        let z: Vec<f64> = cls.iter().zip(pos).map(|(a, b)| (a + b) as f64).collect();
        let mean = z.iter().sum::<f64>() / 8.0;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let want: Vec<f64> = z.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        for row in g.value(y).data().chunks(8) {
            for (a, b) in row.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_is_permutation_invariant_for_the_class_token() {
        // without positional terms the class token output ignores token order
        let cfg = small();
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(3, &[]);
        let vit = Vit::new(&mut Init::new(&mut store, &mut rng), &cfg, [2, 4, 1]).unwrap();
        let pos = store.names().iter().position(|n| n == "pos").unwrap();
        store.tensors_mut()[pos] = Tensor::zeros([3, 8]);
        let x = Tensor::randn([1, 2, 4], 1.0, &mut rng);
        let mut swapped = x.data()[4..].to_vec();
        swapped.extend_from_slice(&x.data()[..4]);
        let swapped = Tensor::new([1, 2, 4], swapped).unwrap();
        let out = |t: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let v = g.constant(t.clone());
            let y = vit.forward(&mut g, &p, v, None).unwrap();
            g.value(y).clone()
        };
        assert!(out(&x).max_abs_diff(&out(&swapped)).unwrap() < 1e-10);
    }
}
