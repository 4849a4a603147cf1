//! Matrix product, 2-D convolution (im2col), transposed convolution and pooling.

use super::ops::PoolKind;
use super::tape::{Node, Op, Tape, Var};
use crate::error::{shape_err, Result};

/// `c[m,n] += a[m,k] · b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
fn gemm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
fn gemm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Unfolds one `[c, h, w]` sample into `[c·kh·kw, oh·ow]` columns.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.kh * g.kw * cols];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c, h, w]` sample.
fn col2im(col: &[f64], g: &Geometry, x: &mut [f64]) {
    let cols = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output size of a convolution along one axis, if the kernel fits.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output size of a transposed convolution along one axis.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.node(ia).shape, &self.node(ib).shape);
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul expects rank-2 operands, got {sa:?} and {sb:?}"));
        }
        if sa[1] != sb[0] {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.node(ia).value, &self.node(ib).value, &mut out, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul", vec![m, n], out, Op::MatMul(ia, ib), rg)
    }

    fn conv_check(&self, x: usize, w: usize, b: Option<usize>, channel_axis: usize, out_axis: usize) -> Result<()> {
        let (sx, sw) = (&self.node(x).shape, &self.node(w).shape);
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err(format!("convolution expects [N,C,H,W] input and rank-4 weight, got {sx:?}, {sw:?}"));
        }
        if sw[channel_axis] != sx[1] {
            return shape_err(format!("channel mismatch: input {sx:?}, weight {sw:?}"));
        }
        if let Some(b) = b {
            if self.node(b).shape != [sw[out_axis]] {
                return shape_err(format!("bias {:?} does not match {} output channels", self.node(b).shape, sw[out_axis]));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` weights, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        self.conv_check(ix, iw, ib, 1, 0)?;
        let (sx, sw) = (self.node(ix).shape.clone(), self.node(iw).shape.clone());
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (Some(oh), Some(ow)) = (conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)) else {
            return shape_err(format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad}, stride {stride})"));
        };
        let geo = Geometry { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let ckk = c * kh * kw;
        let (xv, wv) = (&self.node(ix).value, &self.node(iw).value);
        let mut out = vec![0.0; n * f * oh * ow];
        for s in 0..n {
            let col = im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geo);
            let dst = &mut out[s * f * oh * ow..(s + 1) * f * oh * ow];
            gemm(wv, &col, dst, f, ckk, oh * ow);
            if let Some(ib) = ib {
                let bv = &self.node(ib).value;
                for (fi, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[fi]);
                }
            }
        }
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        self.push("conv2d", vec![n, f, oh, ow], out, Op::Conv2d { x: ix, w: iw, b: ib, stride, pad }, rg)
    }

    /// Transposed convolution: `[N,C,H,W]` input, `[C,F,kh,kw]` weights,
    /// output side `(H−1)·stride − 2·pad + kh`. It is the input-gradient of
    /// [`Tape::conv2d`] applied as a forward map.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        self.conv_check(ix, iw, ib, 0, 1)?;
        let (sx, sw) = (self.node(ix).shape.clone(), self.node(iw).shape.clone());
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[1], sw[2], sw[3]);
        let (Some(oh), Some(ow)) = (
            conv_transpose_out_size(h, kh, stride, pad),
            conv_transpose_out_size(wd, kw, stride, pad),
        ) else {
            return shape_err(format!("transposed convolution of {h}x{wd} with {kh}x{kw}, pad {pad} has empty output"));
        };
        // geometry of the forward convolution this operator transposes
        let geo = Geometry { c: f, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
        let fkk = f * kh * kw;
        let (xv, wv) = (&self.node(ix).value, &self.node(iw).value);
        let mut out = vec![0.0; n * f * oh * ow];
        for s in 0..n {
            let mut col = vec![0.0; fkk * h * wd];
            gemm_at(wv, &xv[s * c * h * wd..(s + 1) * c * h * wd], &mut col, fkk, c, h * wd);
            let dst = &mut out[s * f * oh * ow..(s + 1) * f * oh * ow];
            col2im(&col, &geo, dst);
            if let Some(ib) = ib {
                let bv = &self.node(ib).value;
                for (fi, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[fi]);
                }
            }
        }
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        self.push(
            "conv_transpose2d",
            vec![n, f, oh, ow],
            out,
            Op::ConvTranspose2d { x: ix, w: iw, b: ib, stride, pad },
            rg,
        )
    }

    /// Windowed max or mean over `[N,C,H,W]`.
    pub fn pool2d(&mut self, kind: PoolKind, x: Var, k: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.node(ix).shape.clone();
        if sx.len() != 4 {
            return shape_err(format!("pool2d expects [N,C,H,W], got {sx:?}"));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (Some(oh), Some(ow)) = (conv_out_size(h, k, stride, 0), conv_out_size(w, k, stride, 0)) else {
            return shape_err(format!("pool window {k} larger than input {h}x{w}"));
        };
        if k == 0 {
            return shape_err("pool window must be positive");
        }
        let xv = &self.node(ix).value;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; out.len()];
        }
        let inv = 1.0 / (k * k) as f64;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (plane * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = usize::MAX;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let src = base + (oy * stride + ky) * w + ox * stride + kx;
                                    if at == usize::MAX || xv[src] > best {
                                        best = xv[src];
                                        at = src;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax[o] = at;
                        }
                        PoolKind::Avg => {
                            let mut acc = 0.0;
                            for ky in 0..k {
                                let row = base + (oy * stride + ky) * w + ox * stride;
                                acc += xv[row..row + k].iter().sum::<f64>();
                            }
                            out[o] = acc * inv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(ix);
        let shape = vec![n, c, oh, ow];
        match kind {
            PoolKind::Max => self.push("max_pool2d", shape, out, Op::MaxPool { x: ix, argmax }, rg),
            PoolKind::Avg => self.push("avg_pool2d", shape, out, Op::AvgPool { x: ix, k, stride }, rg),
        }
    }
}

pub(crate) fn matmul_backward(nodes: &[Node], a: usize, b: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let (na, nb) = (&nodes[a], &nodes[b]);
    let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
    let mut res = Vec::new();
    if na.requires_grad {
        let mut da = vec![0.0; m * k];
        gemm_bt(g, &nb.value, &mut da, m, n, k);
        res.push((a, da));
    }
    if nb.requires_grad {
        let mut db = vec![0.0; k * n];
        gemm_at(&na.value, g, &mut db, k, m, n);
        res.push((b, db));
    }
    res
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    nodes: &[Node],
    out: &Node,
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    g: &[f64],
) -> Vec<(usize, Vec<f64>)> {
    let (nx, nw) = (&nodes[x], &nodes[w]);
    let (n, c, h, wd) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
    let (f, kh, kw) = (nw.shape[0], nw.shape[2], nw.shape[3]);
    let (oh, ow) = (out.shape[2], out.shape[3]);
    let geo = Geometry { c, h, w: wd, kh, kw, stride, pad, oh, ow };
    let ckk = c * kh * kw;
    let plane = oh * ow;
    let mut dx = nx.requires_grad.then(|| vec![0.0; nx.value.len()]);
    let mut dw = nw.requires_grad.then(|| vec![0.0; nw.value.len()]);
    for s in 0..n {
        let gs = &g[s * f * plane..(s + 1) * f * plane];
        let xs = &nx.value[s * c * h * wd..(s + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            let col = im2col(xs, &geo);
            gemm_bt(gs, &col, dw, f, plane, ckk);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcol = vec![0.0; ckk * plane];
            gemm_at(&nw.value, gs, &mut dcol, ckk, f, plane);
            col2im(&dcol, &geo, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
        }
    }
    let mut res = Vec::new();
    if let Some(dx) = dx {
        res.push((x, dx));
    }
    if let Some(dw) = dw {
        res.push((w, dw));
    }
    if let Some(b) = b.filter(|&b| nodes[b].requires_grad) {
        res.push((b, bias_grad(g, n, f, plane)));
    }
    res
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    nodes: &[Node],
    out: &Node,
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    g: &[f64],
) -> Vec<(usize, Vec<f64>)> {
    let (nx, nw) = (&nodes[x], &nodes[w]);
    let (n, c, h, wd) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
    let (f, kh, kw) = (nw.shape[1], nw.shape[2], nw.shape[3]);
    let (oh, ow) = (out.shape[2], out.shape[3]);
    let geo = Geometry { c: f, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
    let fkk = f * kh * kw;
    let plane = h * wd;
    let mut dx = nx.requires_grad.then(|| vec![0.0; nx.value.len()]);
    let mut dw = nw.requires_grad.then(|| vec![0.0; nw.value.len()]);
    for s in 0..n {
        let gcol = im2col(&g[s * f * oh * ow..(s + 1) * f * oh * ow], &geo);
        if let Some(dx) = dx.as_mut() {
            gemm(&nw.value, &gcol, &mut dx[s * c * plane..(s + 1) * c * plane], c, fkk, plane);
        }
        if let Some(dw) = dw.as_mut() {
            gemm_bt(&nx.value[s * c * plane..(s + 1) * c * plane], &gcol, dw, c, plane, fkk);
        }
    }
    let mut res = Vec::new();
    if let Some(dx) = dx {
        res.push((x, dx));
    }
    if let Some(dw) = dw {
        res.push((w, dw));
    }
    if let Some(b) = b.filter(|&b| nodes[b].requires_grad) {
        res.push((b, bias_grad(g, n, f, oh * ow)));
    }
    res
}

fn bias_grad(g: &[f64], n: usize, f: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; f];
    for s in 0..n {
        for (fi, d) in db.iter_mut().enumerate() {
            let off = (s * f + fi) * plane;
            *d += g[off..off + plane].iter().sum::<f64>();
        }
    }
    db
}

pub(crate) fn avg_pool_backward(in_shape: &[usize], out_shape: &[usize], k: usize, stride: usize, g: &[f64]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for plane in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                    dx[row..row + k].iter_mut().for_each(|d| *d += gv);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tensor};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sums() {
        let mut tape = Tape::new(Precision::Double);
        let i2 = tape.constant(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(&t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
        let ones = tape.constant(&t(&[2, 1], vec![1.0, 1.0])).unwrap();
        let r = tape.matmul(m, ones).unwrap();
        assert_eq!(tape.value(r), &[3.0, 7.0]);
        assert!(tape.matmul(ones, ones).is_err());
        let v = tape.constant(&t(&[2], vec![1.0, 1.0])).unwrap();
        assert!(tape.matmul(v, m).is_err());
    }

    #[test]
    fn conv_sum_of_ones() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(&t(&[1, 1, 3, 3], vec![1.0; 9])).unwrap();
        let w = tape.constant(&t(&[1, 1, 2, 2], vec![1.0; 4])).unwrap();
        let b = tape.constant(&t(&[1], vec![0.0])).unwrap();
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[4.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new(Precision::Double);
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let x = tape.constant(&t(&[1, 1, 3, 4], data.clone())).unwrap();
        let w = tape.constant(&t(&[1, 1, 1, 1], vec![1.0])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
        let yt = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(yt), data.as_slice());
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::default();
        let x = tape.constant(&t(&[1, 2, 3, 3], vec![0.0; 18])).unwrap();
        let w = tape.constant(&t(&[1, 1, 2, 2], vec![0.0; 4])).unwrap();
        assert!(tape.conv2d(x, w, None, 1, 0).is_err(), "channel mismatch");
        let w5 = tape.constant(&t(&[1, 2, 5, 5], vec![0.0; 50])).unwrap();
        assert!(tape.conv2d(x, w5, None, 1, 0).is_err(), "kernel too large");
        assert!(tape.conv2d(x, w5, None, 1, 1).is_ok());
    }

    #[test]
    fn transposed_block_broadcast() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.constant(&t(&[1, 1, 2, 2], vec![1.0; 4])).unwrap();
        let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y), &expect);
    }

    #[test]
    fn pooling() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = tape.pool2d(PoolKind::Max, x, 2, 2).unwrap();
        assert_eq!(tape.value(m), &[4.0]);
        let c = tape.constant(&t(&[1, 2, 4, 4], vec![0.7; 32])).unwrap();
        let a = tape.pool2d(PoolKind::Avg, c, 2, 2).unwrap();
        assert!(tape.value(a).iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(tape.pool2d(PoolKind::Max, x, 3, 1).is_err());
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_index() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.leaf(&t(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]), true).unwrap();
        let m = tape.pool2d(PoolKind::Max, x, 2, 2).unwrap();
        let l = tape.sum_all(m).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
