//! Straight-line reference implementations on nested `Vec`s, used as oracles
//! by the integration tests. Nothing here touches the tape.

#![allow(dead_code)]

pub use trtr::init::uniform;
use trtr::init::{seeded, SeedRng};
use trtr::tensor::{Tensor, TransformerWeights};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> SeedRng {
    seeded(seed)
}

pub fn mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn param(w: &TransformerWeights, name: &str) -> Mat {
    mat(w.get(name).unwrap())
}

pub fn vector(w: &TransformerWeights, name: &str) -> Vec<f64> {
    w.get(name).unwrap().data().to_vec()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax(a: &Mat) -> Mat {
    a.iter().map(|r| softmax_row(r)).collect()
}

pub fn layernorm(a: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + bias[j]).collect()
        })
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

pub struct HeadOracle {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

/// Multi-head attention returning the output and the per-head maps.
pub fn mha(xq: &Mat, xkv: &Mat, pq: &Mat, pk: &Mat, heads: &[HeadOracle], wo: &Mat) -> (Mat, Vec<Mat>) {
    let mut concat: Mat = vec![Vec::new(); xq.len()];
    let mut maps = Vec::new();
    for h in heads {
        let q = mm(&add(xq, pq), &h.wq);
        let k = mm(&add(xkv, pk), &h.wk);
        let v = mm(xkv, &h.wv);
        let dh = q[0].len() as f64;
        let logits = map(&mm(&q, &tr(&k)), |x| x / dh.sqrt());
        let a = softmax(&logits);
        let o = mm(&a, &v);
        for (row, part) in concat.iter_mut().zip(o) {
            row.extend(part);
        }
        maps.push(a);
    }
    (mm(&concat, wo), maps)
}

pub fn mha_from(w: &TransformerWeights, prefix: &str, n_heads: usize) -> (Vec<HeadOracle>, Mat) {
    let heads = (0..n_heads)
        .map(|m| HeadOracle {
            wq: param(w, &format!("{prefix}.head{m}.wq")),
            wk: param(w, &format!("{prefix}.head{m}.wk")),
            wv: param(w, &format!("{prefix}.head{m}.wv")),
        })
        .collect();
    (heads, param(w, &format!("{prefix}.wo")))
}

pub fn norm_from(w: &TransformerWeights, prefix: &str, x: &Mat) -> Mat {
    layernorm(x, &vector(w, &format!("{prefix}.gain")), &vector(w, &format!("{prefix}.bias")), 1e-5)
}

pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64], gain: &[f64], bias: &[f64]) -> Mat {
    let h = map(&add_row(&mm(x, w1), b1), relu);
    let o = add_row(&mm(&h, w2), b2);
    layernorm(&add(&o, x), gain, bias, 1e-5)
}

pub fn ffn_from(w: &TransformerWeights, prefix: &str, norm: &str, x: &Mat) -> Mat {
    ffn(
        x,
        &param(w, &format!("{prefix}.w1")),
        &vector(w, &format!("{prefix}.b1")),
        &param(w, &format!("{prefix}.w2")),
        &vector(w, &format!("{prefix}.b2")),
        &vector(w, &format!("{norm}.gain")),
        &vector(w, &format!("{norm}.bias")),
    )
}

pub fn encoder_layer(w: &TransformerWeights, layer: usize, heads: usize, x: &Mat, pe: &Mat) -> Mat {
    let p = format!("encoder.{layer}");
    let (hs, wo) = mha_from(w, &format!("{p}.self_attn"), heads);
    let (a, _) = mha(x, x, pe, pe, &hs, &wo);
    let y = norm_from(w, &format!("{p}.norm1"), &add(&a, x));
    ffn_from(w, &format!("{p}.ffn"), &format!("{p}.norm2"), &y)
}

pub fn decoder_layer(w: &TransformerWeights, layer: usize, heads: usize, x: &Mat, pe: &Mat, mem: &Mat, mem_pe: &Mat) -> Mat {
    let p = format!("decoder.{layer}");
    let (hs, wo) = mha_from(w, &format!("{p}.self_attn"), heads);
    let (a, _) = mha(x, x, pe, pe, &hs, &wo);
    let y = norm_from(w, &format!("{p}.norm1"), &add(&a, x));
    let (hc, woc) = mha_from(w, &format!("{p}.cross_attn"), heads);
    let (c, _) = mha(&y, mem, pe, mem_pe, &hc, &woc);
    let z = norm_from(w, &format!("{p}.norm2"), &add(&c, &y));
    ffn_from(w, &format!("{p}.ffn"), &format!("{p}.norm3"), &z)
}

/// `d×h×w` map as an `hw×d` token matrix.
pub fn tokens(map: &Tensor) -> Mat {
    let (d, h, w) = map.dims3().unwrap();
    (0..h * w).map(|p| (0..d).map(|c| map.data()[c * h * w + p]).collect()).collect()
}

/// Six-loop zero-padded convolution.
pub fn conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = input.dims3().unwrap();
    let ks = kernel.shape();
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (x * stride + j) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += input.at(&[c, iy as usize, ix as usize]) * kernel.at(&[o, c, i, j]);
                            }
                        }
                    }
                }
                out.set(&[o, y, x], s);
            }
        }
    }
    out
}

/// Sinusoidal table for unmasked positions, written out per entry.
pub fn positional(h: usize, w: usize, d: usize, masked: &[bool]) -> Mat {
    let half = d / 2;
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            (0..d)
                .map(|c| {
                    if masked[p] {
                        return 0.0;
                    }
                    let (pos, k) = if c < half { (y, c) } else { (x, c - half) };
                    let f = 10_000f64.powf(-((2 * (k / 2)) as f64) / half as f64);
                    if k % 2 == 0 {
                        (pos * f).sin()
                    } else {
                        (pos * f).cos()
                    }
                })
                .collect()
        })
        .collect()
}
