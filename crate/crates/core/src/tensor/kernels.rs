//! Forward and adjoint kernels on raw buffers. The tape in `graph` and the
//! online branch's Gauss-Newton solver both build on these.

use super::Tensor;
use crate::error::{dim_err, Result};

pub fn transpose(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {m}x{k} · {k2}x{n}"));
    }
    Tensor::new([m, n], gemm(a.data(), b.data(), m, k, n))
}

/// Numerically stabilized softmax over each row of an `r×c` buffer.
pub fn softmax_rows(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    Tensor::new([r, c], softmax_rows(x.data(), r, c))
}

/// Per-row normalization statistics, kept for the backward pass.
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layernorm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    n: usize,
    d: usize,
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let mut out = vec![0.0; n * d];
    let mut normalized = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = (var + eps).sqrt();
        // eps = 0 on a constant row: the centered values are all zero anyway.
        let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv_std[i] = is;
        for j in 0..d {
            let z = (row[j] - mean) * is;
            normalized[i * d + j] = z;
            out[i * d + j] = z * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if gain.len() != d || bias.len() != d {
        return Err(dim_err!("layernorm affine params must have length {d}"));
    }
    let (out, _) = layernorm_forward(x.data(), gain.data(), bias.data(), n, d, eps);
    Tensor::new([n, d], out)
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(dim_err!("conv2d input must be C×H×W, got {input:?}")),
        };
        let (c_out, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(dim_err!("conv2d kernel must be O×C×kh×kw, got {kernel:?}")),
        };
        if kc != c_in {
            return Err(dim_err!("conv2d channel mismatch: input {c_in}, kernel {kc}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let extent = |n: usize, k: usize| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| dim_err!("conv2d kernel {k} exceeds padded extent {}", n + 2 * pad))?;
            if span % stride != 0 {
                return Err(dim_err!(
                    "conv2d output extent ({n}+2·{pad}−{k})/{stride}+1 is not integral"
                ));
            }
            Ok(span / stride + 1)
        };
        let out_h = extent(h, kh)?;
        let out_w = extent(w, kw)?;
        Ok(Self { c_in, h, w, c_out, kh, kw, stride, pad, out_h, out_w })
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate sampled by output `o` and kernel tap `k`, if inside the input.
    #[inline]
    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    }
}

/// Unfolds the zero-padded input into a `(C·kh·kw) × (H'·W')` column matrix.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.rows() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki, g.h) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source(ox, kj, g.w) {
                            dst[oy * g.out_w + ox] = input[(c * g.h + y) * g.w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki, g.h) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source(ox, kj, g.w) {
                            out[(c * g.h + y) * g.w + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = im2col(input, g);
    gemm(kernel, &cols, g.c_out, g.rows(), g.positions())
}

/// Adjoint of the convolution with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let kt = transpose(kernel, g.c_out, g.rows());
    let dcols = gemm(&kt, grad_out, g.rows(), g.c_out, g.positions());
    col2im(&dcols, g)
}

/// Adjoint of the convolution with respect to its kernel.
pub fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = im2col(input, g);
    let cols_t = transpose(&cols, g.rows(), g.positions());
    gemm(grad_out, &cols_t, g.c_out, g.positions(), g.rows())
}

/// Zero-padded cross-correlation of a `C_in×H×W` input with a `C_out×C_in×kh×kw` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    Tensor::new([g.c_out, g.out_h, g.out_w], conv2d_forward(input.data(), kernel.data(), &g))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let b = Tensor::from_rows(&[vec![1.5, -2.0], vec![3.0, 4.25]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros([2, 3]);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let z = softmax(&Tensor::zeros([1, 4])).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let t = softmax(&Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((t.data()[0] - 0.25).abs() < 1e-15 && (t.data()[1] - 0.75).abs() < 1e-15);
        let big = softmax(&Tensor::new([1, 2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_closed_forms() {
        let ones = Tensor::full([2], 1.0);
        let zeros = Tensor::zeros([2]);
        let c = layernorm(&Tensor::full([1, 2], 7.0), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let x = Tensor::new([1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(layernorm(&x, &ones, &zeros, 0.0).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn conv_simple_cases() {
        let x = Tensor::from_fn([1, 3, 3], |i| i as f64);
        let id = conv2d(&x, &Tensor::full([1, 1, 1, 1], 1.0), 1, 0).unwrap();
        assert_eq!(id, x);
        let ones = conv2d(&Tensor::full([1, 3, 3], 1.0), &Tensor::full([1, 1, 2, 2], 1.0), 1, 0).unwrap();
        assert_eq!(ones.shape(), &[1, 2, 2]);
        assert!(ones.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_rejects_fractional_extent() {
        let x = Tensor::zeros([1, 4, 4]);
        let k = Tensor::zeros([1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 2, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), 1, 1).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1e3) >= 0.0 && sigmoid(-1e3) < 1e-300);
        assert_eq!(sigmoid(1e3), 1.0);
    }
}
