//! Slice-level forward and backward math for the heavier primitives.

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), where `a` is
/// `m x k` after the optional transpose and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row/column-major views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        self.len + 2 * self.pad + 1 - self.kernel
    }
}

/// Returns `(output [B, C_out, L_out], im2col buffer)`.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>) {
    let lo = d.out_len();
    let rows = d.c_in * d.kernel;
    let ncol = d.batch * lo;
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let xrow = &x[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
            for k in 0..d.kernel {
                let dst = &mut cols[(ci * d.kernel + k) * ncol + b * lo..][..lo];
                for (t, v) in dst.iter_mut().enumerate() {
                    let src = t + k;
                    if src >= d.pad && src - d.pad < d.len {
                        *v = xrow[src - d.pad];
                    }
                }
            }
        }
    }
    let mut out_mat = vec![0.0; d.c_out * ncol];
    gemm(d.c_out, rows, ncol, w, false, &cols, false, &mut out_mat, false);
    let mut out = vec![0.0; d.batch * d.c_out * lo];
    for co in 0..d.c_out {
        for b in 0..d.batch {
            out[(b * d.c_out + co) * lo..][..lo]
                .copy_from_slice(&out_mat[co * ncol + b * lo..][..lo]);
        }
    }
    (out, cols)
}

/// Returns `(dx, dw)`.
pub(crate) fn conv1d_backward(
    dout: &[f64],
    cols: &[f64],
    w: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let lo = d.out_len();
    let rows = d.c_in * d.kernel;
    let ncol = d.batch * lo;
    let mut dout_mat = vec![0.0; d.c_out * ncol];
    for co in 0..d.c_out {
        for b in 0..d.batch {
            dout_mat[co * ncol + b * lo..][..lo]
                .copy_from_slice(&dout[(b * d.c_out + co) * lo..][..lo]);
        }
    }
    let mut dw = vec![0.0; d.c_out * rows];
    gemm(d.c_out, ncol, rows, &dout_mat, false, cols, true, &mut dw, false);
    let mut dcols = vec![0.0; rows * ncol];
    gemm(rows, d.c_out, ncol, w, true, &dout_mat, false, &mut dcols, false);
    let mut dx = vec![0.0; d.batch * d.c_in * d.len];
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let dxrow = &mut dx[(b * d.c_in + ci) * d.len..][..d.len];
            for k in 0..d.kernel {
                let src = &dcols[(ci * d.kernel + k) * ncol + b * lo..][..lo];
                for (t, &g) in src.iter().enumerate() {
                    let p = t + k;
                    if p >= d.pad && p - d.pad < d.len {
                        dxrow[p - d.pad] += g;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping max pooling along the last axis (floor mode).
/// Returns `(output, argmax flat indices into x)`.
pub(crate) fn maxpool1d_forward(
    x: &[f64],
    outer: usize,
    len: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let lo = len / size;
    let mut out = Vec::with_capacity(outer * lo);
    let mut arg = Vec::with_capacity(outer * lo);
    for r in 0..outer {
        let base = r * len;
        for t in 0..lo {
            let start = base + t * size;
            let mut best = start;
            for i in start + 1..start + size {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// Per-channel statistics over batch and length for `[B, C, L]` input.
pub(crate) struct BnForward {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn batchnorm_train_forward(
    x: &[f64],
    batch: usize,
    ch: usize,
    len: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> BnForward {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for b in 0..batch {
        for c in 0..ch {
            for &v in &x[(b * ch + c) * len..][..len] {
                mean[c] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for b in 0..batch {
        for c in 0..ch {
            for &v in &x[(b * ch + c) * len..][..len] {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            for i in off..off + len {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    BnForward {
        out,
        xhat,
        mean,
        var,
        inv_std,
    }
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_train_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch: usize,
    ch: usize,
    len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            for i in off..off + len {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
            let k = gamma[c] * inv_std[c] / n;
            for i in off..off + len {
                dx[i] = k * (n * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_sliding_dot_product() {
        let d = ConvDims {
            batch: 1,
            c_in: 1,
            len: 4,
            c_out: 1,
            kernel: 2,
            pad: 0,
        };
        let (y, _) = conv1d_forward(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], d);
        assert_eq!(y, vec![3.0, 5.0, 7.0]);
        let same = ConvDims { kernel: 3, pad: 1, ..d };
        let (y, _) = conv1d_forward(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 1.0], same);
        assert_eq!(y, vec![3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn maxpool_floor_mode() {
        let (y, arg) = maxpool1d_forward(&[1.0, 3.0, 2.0, 0.0, 9.0], 1, 5, 2);
        assert_eq!(y, vec![3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }
}
