//! Slice-level numeric kernels shared by the graph ops.
//!
//! These work on raw row-major buffers and know nothing about gradients.

use crate::Real;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the buffer `a` holds a row-major `k×m` matrix; with
/// `trans_b` the buffer `b` holds a row-major `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    c: &mut [Real],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access to the buffers:
    // the largest offset read from `a` is (m-1)*rsa + (k-1)*csa < m*k, and
    // likewise for `b` and `c`.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
}

/// Numerically stable softmax over consecutive rows of length `cols`.
pub fn softmax_rows(x: &[Real], cols: usize, out: &mut [Real]) {
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp(row: &[Real]) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<Real>().ln()
}

/// Per-row normalization statistics: returns `(xhat, rstd)` where
/// `xhat = (x - mean) * rstd` and `rstd = 1 / sqrt(var + eps)`.
pub fn normalize_rows(x: &[Real], cols: usize, eps: Real) -> (Vec<Real>, Vec<Real>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (row, dst) in x.chunks_exact(cols).zip(xhat.chunks_exact_mut(cols)) {
        let mean = row.iter().sum::<Real>() / cols as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
        let r = 1.0 / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: Real) -> Real {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[Real], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_step = step[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < numel {
        if inner_step == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_step]));
        }
        // advance the outer multi-index
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Geometry of a 3D convolution over `[N, C, T, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    /// Output extent for one axis, or `None` if the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }
}

/// Unfolds one sample `[C, T, H, W]` into a `[C*kt*kh*kw, To*Ho*Wo]` matrix.
pub fn im2col(x: &[Real], g: &Conv3dGeom, col: &mut [Real]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [t_out, h_out, w_out] = g.output;
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * t_in * h_in * w_in..(c + 1) * t_in * h_in * w_in];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for ot in 0..t_out {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oh in 0..h_out {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            let row_ok =
                                it >= 0 && (it as usize) < t_in && ih >= 0 && (ih as usize) < h_in;
                            for ow in 0..w_out {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                dst[p] = if row_ok && iw >= 0 && (iw as usize) < w_in {
                                    xc[(it as usize * h_in + ih as usize) * w_in + iw as usize]
                                } else {
                                    0.0
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into `[C, T, H, W]`.
pub fn col2im_add(col: &[Real], g: &Conv3dGeom, dx: &mut [Real]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [t_out, h_out, w_out] = g.output;
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &mut dx[c * t_in * h_in * w_in..(c + 1) * t_in * h_in * w_in];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for ot in 0..t_out {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oh in 0..h_out {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            let row_ok =
                                it >= 0 && (it as usize) < t_in && ih >= 0 && (ih as usize) < h_in;
                            for ow in 0..w_out {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if row_ok && iw >= 0 && (iw as usize) < w_in {
                                    xc[(it as usize * h_in + ih as usize) * w_in + iw as usize] +=
                                        src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[Real], b: &[Real]) -> Vec<Real> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[Real]) -> Vec<Real> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_all_transpose_modes_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<Real> = (0..m * k).map(|v| v as Real * 0.5 - 1.0).collect();
        let b: Vec<Real> = (0..k * n).map(|v| (v as Real).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn permute_transposes_matrix() {
        let (shape, out) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip_rank4() {
        let shape = [2, 3, 4, 5];
        let data: Vec<Real> = (0..120).map(|v| v as Real).collect();
        let perm = [2, 0, 3, 1];
        let (s1, p1) = permute(&data, &shape, &perm);
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let (s2, p2) = permute(&p1, &s1, &inv);
        assert_eq!(s2, shape.to_vec());
        assert_eq!(p2, data);
    }

    #[test]
    fn im2col_identity_kernel_copies_input() {
        let g = Conv3dGeom {
            batch: 1,
            in_channels: 2,
            out_channels: 1,
            input: [2, 2, 3],
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            output: [2, 2, 3],
        };
        let x: Vec<Real> = (0..24).map(|v| v as Real).collect();
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(&x, &g, &mut col);
        assert_eq!(col, x);
        let mut back = vec![0.0; 24];
        col2im_add(&col, &g, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(Conv3dGeom::out_extent(56, 3, 2, 1), Some(28));
        assert_eq!(Conv3dGeom::out_extent(48, 3, 2, 1), Some(24));
        assert_eq!(Conv3dGeom::out_extent(1, 3, 1, 0), None);
    }
}
