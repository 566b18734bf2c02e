use super::config::Cnn3dConfig;
use super::layers::{Conv3d, Init};
use crate::tensor::{Bound, Graph, Var};
use crate::{CoreError, Result};

#[derive(Clone, Debug)]
struct Residual {
    a: Conv3d,
    b: Conv3d,
    shortcut: Option<Conv3d>,
}

/// Four residual stages and a 1x1x1 projection to one channel, averaged over
/// time into a gray `[B, H', W']` map.
#[derive(Clone, Debug)]
pub struct Cnn3d {
    pub cfg: Cnn3dConfig,
    pub in_channels: usize,
    blocks: Vec<Residual>,
    head: Conv3d,
}

impl Cnn3d {
    pub fn new(init: &mut Init, cfg: &Cnn3dConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut c = in_channels;
        let mut blocks = Vec::new();
        for (i, st) in cfg.stages[..4].iter().enumerate() {
            let mut s = init.scope(&format!("stage{}", i + 1));
            let stride = [st.time_stride, st.space_stride, st.space_stride];
            let a = Conv3d::new(&mut s, "conv_a", c, st.channels, 3, stride);
            let b = Conv3d::new(&mut s, "conv_b", st.channels, st.channels, 3, [1; 3]);
            let shortcut = (c != st.channels || stride != [1; 3])
                .then(|| Conv3d::new(&mut s, "shortcut", c, st.channels, 1, stride));
            blocks.push(Residual { a, b, shortcut });
            c = st.channels;
        }
        let head = Conv3d::new(&mut init.scope("stage5"), "proj", c, 1, 1, [1; 3]);
        Ok(Cnn3d {
            cfg: cfg.clone(),
            in_channels,
            blocks,
            head,
        })
    }

    /// `x: [B, K, T, H, W]` heatmap volumes.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(CoreError::invalid(format!(
                "3D-CNN expects [B, {}, T, H, W], got {s:?}",
                self.in_channels
            )));
        }
        let mut h = x;
        for blk in &self.blocks {
            let a = blk.a.forward(g, p, h)?;
            let a = g.relu(a)?;
            let y = blk.b.forward(g, p, a)?;
            let sc = match &blk.shortcut {
                Some(c) => c.forward(g, p, h)?,
                None => h,
            };
            let y = g.add(y, sc)?;
            h = g.relu(y)?;
        }
        let y = self.head.forward(g, p, h)?;
        let ys = g.shape(y).to_vec();
        let y = g.reshape(y, &[ys[0], ys[2], ys[3], ys[4]])?;
        Ok(g.mean_axis(y, 1)?)
    }
}
