//! Independent brute-force oracles shared by the integration suites.
#![allow(dead_code)]

pub mod tasks;

use pretext::tensor::{Init, Tape, Tensor, Var};
use pretext::Result;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape, Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Contracts `out` with a fixed random tensor so vector-valued ops can be
/// grad-checked through a scalar.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(tape.shape(out), seed);
    let wv = tape.constant(&w)?;
    let p = tape.mul(out, wv)?;
    tape.sum_all(p)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Direct nested-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [f, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * w[((fi * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

/// Transposed convolution by explicit scatter: every input pixel stamps the
/// kernel onto the (cropped) output grid.
pub fn naive_conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [_, f, kh, kw] = ws;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x[((s * c + ch) * h + iy) * wd + ix];
                    for fi in 0..f {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((s * f + fi) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w[((ch * f + fi) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

pub fn naive_pool(x: &[f64], xs: [usize; 4], k: usize, stride: usize, max: bool) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let vals: Vec<f64> = (0..k)
                    .flat_map(|ky| (0..k).map(move |kx| (ky, kx)))
                    .map(|(ky, kx)| x[p * h * w + (oy * stride + ky) * w + ox * stride + kx])
                    .collect();
                out.push(if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    out
}

pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `-ln softmax([q·k⁺, q·k₁, ...] / τ)[0]` written out directly.
pub fn naive_info_nce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut logits = vec![dot(q, pos) / tau];
    logits.extend(negs.iter().map(|k| dot(q, k) / tau));
    -naive_softmax(&logits)[0].ln()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
