use rand::Rng;

use crate::kernels::{self, Conv3dGeom};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride and zero-padding of a 3D convolution, ordered (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Real>,
    },
    Dropout {
        x: Var,
        mask: Vec<Real>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv3dGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Operations append nodes; [`Graph::backward`] walks them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn add_assign(dst: &mut [Real], src: &[Real]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(TensorError::shape("linear", &sx, sw));
        }
        let (inp, outp) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / inp.max(1);
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(TensorError::shape("linear bias", self.shape(b), &[outp]));
            }
        }
        let mut out = vec![0.0; rows * outp];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(outp) {
                row.copy_from_slice(self.data(b));
            }
        }
        kernels::gemm(
            rows,
            inp,
            outp,
            self.data(x),
            false,
            self.data(w),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = outp;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        self.record("bmm", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.record("add", value, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape("add_broadcast", sa, sb));
        }
        let bd = self.data(b);
        let tile = bd.len().max(1);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_exact_mut(tile) {
            add_assign(chunk, bd);
        }
        let value = Tensor::from_parts(sa.to_vec(), out);
        self.record("add_broadcast", value, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.record("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var> {
        let out: Vec<Real> = self.data(a).iter().map(|x| x * s).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.record("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<Real> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.record("relu", value, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<Real> = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.record("gelu", value, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = match shape.last() {
            Some(&c) if c > 0 => c,
            _ => return Err(TensorError::EmptyAxis { op: "softmax" }),
        };
        let mut out = vec![0.0; self.value(a).numel()];
        kernels::softmax_rows(self.data(a), cols, &mut out);
        self.record(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax(a),
            &[a],
        )
    }

    /// Layer normalization over the last axis with elementwise affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = match shape.last() {
            Some(&d) if d > 0 => d,
            _ => return Err(TensorError::EmptyAxis { op: "layer_norm" }),
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape("layer_norm", self.shape(gain), &[d]));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.data(x), d, eps);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.record(
            "layer_norm",
            Tensor::from_parts(shape, out),
            op,
            &[x, gain, bias],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.record("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let (out_shape, out) = kernels::permute(self.data(x), &shape, perm);
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        self.record("permute", Tensor::from_parts(out_shape, out), op, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::invalid("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(TensorError::invalid("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", s, &first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.record("concat", Tensor::from_parts(shape, out), op, inputs)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.record(
            "narrow",
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            &[x],
        )
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        self.record(
            "expand",
            Tensor::from_parts(shape, out),
            Op::Expand(x),
            &[x],
        )
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("mean_axis", "axis out of range"));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_axis" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                add_assign(dst, &src[(o * len + l) * inner..(o * len + l + 1) * inner]);
            }
            for d in dst.iter_mut() {
                *d /= len as Real;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.record(
            "mean_axis",
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis { x, axis },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: Real = self.data(x).iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s: Real = self.data(x).iter().sum::<Real>() / n as Real;
        self.record("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; `logits` is `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if c == 0 || b == 0 {
            return Err(TensorError::EmptyAxis {
                op: "cross_entropy",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; b * c];
        kernels::softmax_rows(x, c, &mut probs);
        let loss = x
            .chunks_exact(c)
            .zip(labels)
            .map(|(row, &l)| kernels::log_sum_exp(row) - row[l])
            .sum::<Real>()
            / b as Real;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: Real, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p = {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Real> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < p as f64 {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<Real> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.record("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// 3D convolution of `x: [N, C, T, H, W]` with `w: [O, C, kt, kh, kw]` and bias `b: [O]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(TensorError::shape("conv3d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(TensorError::shape("conv3d bias", self.shape(b), &[sw[0]]));
        }
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] =
                Conv3dGeom::out_extent(sx[2 + i], sw[2 + i], spec.stride[i], spec.padding[i])
                    .ok_or_else(|| {
                        TensorError::invalid(
                            "conv3d",
                            format!("input {sx:?} too small for kernel {sw:?} / {spec:?}"),
                        )
                    })?;
        }
        let geom = Conv3dGeom {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sw[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride: spec.stride,
            padding: spec.padding,
            output,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![0.0; rows * cols];
        let o = geom.out_channels;
        let mut out = vec![0.0; geom.batch * o * cols];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        for n in 0..geom.batch {
            kernels::im2col(
                &xd[n * geom.input_len()..(n + 1) * geom.input_len()],
                &geom,
                &mut col,
            );
            let dst = &mut out[n * o * cols..(n + 1) * o * cols];
            for (ch, row) in dst.chunks_exact_mut(cols).enumerate() {
                row.fill(bd[ch]);
            }
            kernels::gemm(o, rows, cols, wd, false, &col, false, dst, true);
        }
        let shape = vec![geom.batch, o, output[0], output[1], output[2]];
        self.record(
            "conv3d",
            Tensor::from_parts(shape, out),
            Op::Conv3d { x, w, b, geom },
            &[x, w, b],
        )
    }

    /// Scaled dot-product attention for `q, k, v: [heads, L, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.attention_with_weights(q, k, v)?.0)
    }

    /// Like [`Graph::attention`] but also returns the `[heads, L, L]` weight matrix.
    pub fn attention_with_weights(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(TensorError::shape("attention", &sq, self.shape(k)));
        }
        let d = sq[2];
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "attention" });
        }
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (d as Real).sqrt())?;
        let weights = self.softmax(scores)?;
        let out = self.bmm(weights, v, false)?;
        Ok((out, weights))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                "loss must hold exactly one value",
            ));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Real>>], v: Var, contrib: Vec<Real>) {
        match &mut grads[v.0] {
            Some(g) => add_assign(g, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.data(*b), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(*a), true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (inp, outp) = (sw[0], sw[1]);
                let rows = g.len() / outp.max(1);
                if rg(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    kernels::gemm(
                        rows,
                        outp,
                        inp,
                        g,
                        false,
                        self.data(*w),
                        true,
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; inp * outp];
                    kernels::gemm(
                        inp,
                        rows,
                        outp,
                        self.data(*x),
                        true,
                        g,
                        false,
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut db = vec![0.0; outp];
                    for row in g.chunks_exact(outp) {
                        add_assign(&mut db, row);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        // trans_b: C = A·Bsᵀ so dA = G·Bs; otherwise dA = G·Bᵀ
                        kernels::gemm(
                            m,
                            n,
                            k,
                            gt,
                            false,
                            bt,
                            !*trans_b,
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let dst = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            kernels::gemm(n, m, k, gt, true, at, false, dst, false);
                        } else {
                            kernels::gemm(k, m, n, at, true, gt, false, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddBroadcast(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    let tile = self.value(*b).numel().max(1);
                    let mut db = vec![0.0; tile];
                    for chunk in g.chunks_exact(tile) {
                        add_assign(&mut db, chunk);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let da = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let db = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let da = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let da = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().unwrap();
                    let mut da = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(da.chunks_exact_mut(cols))
                    {
                        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gd = self.data(*gain);
                if rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((acc, gv), xv) in dg.iter_mut().zip(gr).zip(xr) {
                            *acc += gv * xv;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if rg(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        add_assign(&mut db, gr);
                    }
                    self.accumulate(grads, *bias, db);
                }
                if rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (((gr, xr), dr), r) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .zip(rstd)
                    {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_x = 0.0;
                        for ((gv, gain_v), xv) in gr.iter().zip(gd).zip(xr) {
                            let dyh = gv * gain_v;
                            mean_dy += dyh;
                            mean_dy_x += dyh * xv;
                        }
                        mean_dy /= d as Real;
                        mean_dy_x /= d as Real;
                        for (((o, gv), gain_v), xv) in dr.iter_mut().zip(gr).zip(gd).zip(xr) {
                            *o = r * (gv * gain_v - mean_dy - xv * mean_dy_x);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Permute { x, perm } => {
                if rg(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, dx) = kernels::permute(g, node.value.shape(), &inv);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if rg(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if rg(*x) {
                    let src_shape = self.shape(*x);
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for o in 0..outer {
                        let base = (o * src_shape[*axis] + start) * inner;
                        dx[base..base + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Expand(x) => {
                if rg(*x) {
                    let tile = self.value(*x).numel().max(1);
                    let mut dx = vec![0.0; tile];
                    for chunk in g.chunks_exact(tile) {
                        add_assign(&mut dx, chunk);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MeanAxis { x, axis } => {
                if rg(*x) {
                    let shape = self.shape(*x);
                    let len = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, gv) in dst.iter_mut().zip(gr) {
                                *d = gv / len as Real;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let n = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![g[0] / n as Real; n]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as Real;
                    let mut dl: Vec<Real> = probs.iter().map(|p| p * scale).collect();
                    for (row, &l) in labels.iter().enumerate() {
                        dl[row * c + l] -= scale;
                    }
                    self.accumulate(grads, *logits, dl);
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    self.accumulate(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let o = geom.out_channels;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut col = vec![0.0; rows * cols];
                let mut dw = rg(*w).then(|| vec![0.0; o * rows]);
                let mut dx = rg(*x).then(|| vec![0.0; xd.len()]);
                if rg(*b) {
                    let mut db = vec![0.0; o];
                    for (idx, chunk) in g.chunks_exact(cols).enumerate() {
                        db[idx % o] += chunk.iter().sum::<Real>();
                    }
                    self.accumulate(grads, *b, db);
                }
                for n in 0..geom.batch {
                    let gn = &g[n * o * cols..(n + 1) * o * cols];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(
                            &xd[n * geom.input_len()..(n + 1) * geom.input_len()],
                            geom,
                            &mut col,
                        );
                        kernels::gemm(o, cols, rows, gn, false, &col, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm(rows, o, cols, wd, true, gn, false, &mut col, false);
                        kernels::col2im_add(
                            &col,
                            geom,
                            &mut dx[n * geom.input_len()..(n + 1) * geom.input_len()],
                        );
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }
}
