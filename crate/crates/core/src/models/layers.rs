use rand_chacha::ChaCha8Rng;

use crate::tensor::{Bound, Conv3dSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Real, Result};

/// Registers parameters under a dotted name prefix while drawing initial
/// values from one generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.insert(format!("{}{name}", self.prefix), value)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: Real) -> ParamId {
        let t = Tensor::randn(shape.to_vec(), std, self.rng);
        self.param(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        let mut s = init.scope(name);
        let w = s.randn("w", &[inputs, outputs], 1.0 / (inputs as Real).sqrt());
        let b = s.param("b", Tensor::zeros([outputs]));
        Linear {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.w], Some(p[self.b]))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: Real = 1e-5;

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        let gain = s.param("gain", Tensor::ones([dim]));
        let bias = s.param("bias", Tensor::zeros([dim]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    /// Cubic kernel of side `k` with "same" padding and He-normal weights.
    pub fn new(
        init: &mut Init,
        name: &str,
        inputs: usize,
        outputs: usize,
        k: usize,
        stride: [usize; 3],
    ) -> Self {
        let mut s = init.scope(name);
        let fan_in = inputs * k * k * k;
        let w = s.randn(
            "w",
            &[outputs, inputs, k, k, k],
            (2.0 / fan_in as Real).sqrt(),
        );
        let b = s.param("b", Tensor::zeros([outputs]));
        let pad = k / 2;
        Conv3d {
            w,
            b,
            spec: Conv3dSpec {
                stride,
                padding: [pad; 3],
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv3d(x, p[self.w], p[self.b], self.spec)?)
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(crate::CoreError::EmptyInput("batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(crate::CoreError::invalid(format!(
                "batch items differ in shape: {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}
