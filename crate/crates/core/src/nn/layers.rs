//! Forward layers and their exact reverse-mode gradients.
//!
//! Layers operate on single items (channels x height x width); the batch
//! dimension is handled by callers. Every forward returns a context with
//! everything backward needs; backward recomputes im2col buffers instead of
//! storing them.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

fn shape_err(context: &str, expected: String, got: String) -> Error {
    Error::Shape {
        context: context.into(),
        expected,
        got,
    }
}

// ---------------------------------------------------------------------------
// Convolution (3x3 pad 1 stride {1,2}, or 1x1 stride 1)
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ConvCtx<S> {
    pub input: Tensor<S>,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
}

fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    cols: &mut [S],
) {
    // cols is (c_in * 9) x (h_out * w_out), kernel 3x3, pad 1.
    let n = h_out * w_out;
    for c in 0..c_in {
        let x_c = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * n..(c * 9 + ky * 3 + kx + 1) * n];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = S::ZERO;
                        }
                        continue;
                    }
                    let src_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *v = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(
    dcols: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    dx: &mut [S],
) {
    let n = h_out * w_out;
    for c in 0..c_in {
        let dx_c = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[(c * 9 + ky * 3 + kx) * n..(c * 9 + ky * 3 + kx + 1) * n];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dx_c[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * w_out..(oy + 1) * w_out];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with weight (c_out, c_in, k, k) where k is 1 or 3.
/// Kernel 3 uses pad 1 and stride 1 or 2; kernel 1 uses stride 1, no pad.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
) -> Result<(Tensor<S>, ConvCtx<S>)> {
    let (c_out, c_in, k) = match weight.shape() {
        [o, i, kh, kw] if kh == kw && (*kh == 1 || *kh == 3) => (*o, *i, *kh),
        other => {
            return Err(shape_err(
                "conv2d",
                "(c_out, c_in, k, k) with k in {1,3}".into(),
                format!("{other:?}"),
            ))
        }
    };
    let (cx, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(shape_err(
                "conv2d input",
                "(c, h, w)".into(),
                format!("{other:?}"),
            ))
        }
    };
    if cx != c_in {
        return Err(shape_err(
            "conv2d input channels",
            format!("{c_in}"),
            format!("{cx}"),
        ));
    }
    if k == 1 && stride != 1 {
        return Err(Error::contract("1x1 convolution supports stride 1 only"));
    }
    let (h_out, w_out) = if k == 3 {
        ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1)
    } else {
        (h, w)
    };
    let n = h_out * w_out;
    let kdim = c_in * k * k;
    let mut y = Tensor::zeros(&[c_out, h_out, w_out]);
    if k == 3 {
        let mut cols = vec![S::ZERO; kdim * n];
        im2col(x.data(), c_in, h, w, h_out, w_out, stride, &mut cols);
        gemm_nn(c_out, kdim, n, S::ONE, weight.data(), &cols, S::ZERO, y.data_mut());
    } else {
        gemm_nn(c_out, kdim, n, S::ONE, weight.data(), x.data(), S::ZERO, y.data_mut());
    }
    for o in 0..c_out {
        let bo = bias.data()[o];
        for v in &mut y.data_mut()[o * n..(o + 1) * n] {
            *v += bo;
        }
    }
    let ctx = ConvCtx {
        input: x.clone(),
        h_out,
        w_out,
        stride,
    };
    Ok((y, ctx))
}

/// Returns (d_input, d_weight, d_bias).
pub fn conv2d_backward<S: Scalar>(
    ctx: &ConvCtx<S>,
    weight: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [c_out, c_in, k, _] = *weight.shape() else {
        unreachable!()
    };
    let [_, h, w] = *ctx.input.shape() else {
        unreachable!()
    };
    let n = ctx.h_out * ctx.w_out;
    let kdim = c_in * k * k;

    let mut db = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        let mut acc = S::ZERO;
        for &v in &dy.data()[o * n..(o + 1) * n] {
            acc += v;
        }
        db.data_mut()[o] = acc;
    }

    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = Tensor::zeros(ctx.input.shape());
    if k == 3 {
        let mut cols = vec![S::ZERO; kdim * n];
        im2col(
            ctx.input.data(),
            c_in,
            h,
            w,
            ctx.h_out,
            ctx.w_out,
            ctx.stride,
            &mut cols,
        );
        gemm_nt(c_out, n, kdim, S::ONE, dy.data(), &cols, S::ZERO, dw.data_mut());
        let mut dcols = vec![S::ZERO; kdim * n];
        gemm_tn(kdim, c_out, n, S::ONE, weight.data(), dy.data(), S::ZERO, &mut dcols);
        col2im_add(
            &dcols,
            c_in,
            h,
            w,
            ctx.h_out,
            ctx.w_out,
            ctx.stride,
            dx.data_mut(),
        );
    } else {
        gemm_nt(c_out, n, kdim, S::ONE, dy.data(), ctx.input.data(), S::ZERO, dw.data_mut());
        gemm_tn(kdim, c_out, n, S::ONE, weight.data(), dy.data(), S::ZERO, dx.data_mut());
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
pub struct GroupNormCtx<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    pub groups: usize,
}

pub fn group_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
) -> Result<(Tensor<S>, GroupNormCtx<S>)> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(shape_err(
                "group_norm input",
                "(c, h, w)".into(),
                format!("{other:?}"),
            ))
        }
    };
    if groups == 0 || c % groups != 0 {
        return Err(Error::contract(format!(
            "group count {groups} must divide channel count {c}"
        )));
    }
    let cpg = c / groups;
    let gsz = cpg * h * w;
    let eps = S::from_f64(GROUP_NORM_EPS);
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let src = &x.data()[g * gsz..(g + 1) * gsz];
        let mut mean = S::ZERO;
        for &v in src {
            mean += v;
        }
        mean = mean / S::from_f64(gsz as f64);
        let mut var = S::ZERO;
        for &v in src {
            let d = v - mean;
            var += d * d;
        }
        var = var / S::from_f64(gsz as f64);
        let istd = S::ONE / (var + eps).sqrt();
        inv_std.push(istd);
        for (dst, &v) in xhat.data_mut()[g * gsz..(g + 1) * gsz].iter_mut().zip(src) {
            *dst = (v - mean) * istd;
        }
    }
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let ga = gamma.data()[ch];
        let be = beta.data()[ch];
        for (dst, &v) in y.data_mut()[ch * hw..(ch + 1) * hw]
            .iter_mut()
            .zip(&xhat.data()[ch * hw..(ch + 1) * hw])
        {
            *dst = ga * v + be;
        }
    }
    Ok((
        y,
        GroupNormCtx {
            xhat,
            inv_std,
            groups,
        },
    ))
}

/// Returns (d_input, d_gamma, d_beta).
pub fn group_norm_backward<S: Scalar>(
    ctx: &GroupNormCtx<S>,
    gamma: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [c, h, w] = *ctx.xhat.shape() else {
        unreachable!()
    };
    let hw = h * w;
    let groups = ctx.groups;
    let cpg = c / groups;
    let gsz = cpg * hw;

    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut dg = S::ZERO;
        let mut db = S::ZERO;
        for (d, xh) in dy.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .zip(&ctx.xhat.data()[ch * hw..(ch + 1) * hw])
        {
            dg += *d * *xh;
            db += *d;
        }
        dgamma.data_mut()[ch] = dg;
        dbeta.data_mut()[ch] = db;
    }

    let mut dx = Tensor::zeros(ctx.xhat.shape());
    let inv_gsz = S::from_f64(1.0 / gsz as f64);
    for g in 0..groups {
        let istd = ctx.inv_std[g];
        // dxhat within the group, plus its mean and its xhat-weighted mean
        let mut sum_dxhat = S::ZERO;
        let mut sum_dxhat_xhat = S::ZERO;
        for ch in g * cpg..(g + 1) * cpg {
            let ga = gamma.data()[ch];
            for (d, xh) in dy.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .zip(&ctx.xhat.data()[ch * hw..(ch + 1) * hw])
            {
                let dxh = *d * ga;
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * *xh;
            }
        }
        let mean_dxhat = sum_dxhat * inv_gsz;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_gsz;
        let base = g * gsz;
        for ch in g * cpg..(g + 1) * cpg {
            let ga = gamma.data()[ch];
            for i in ch * hw..(ch + 1) * hw {
                let dxh = dy.data()[i] * ga;
                let xh = ctx.xhat.data()[i];
                dx.data_mut()[i] = istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
            }
        }
        let _ = base;
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SiluCtx<S> {
    pub input: Tensor<S>,
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

pub fn silu_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, SiluCtx<S>) {
    let y = x.map(|v| v * sigmoid(v));
    (y, SiluCtx { input: x.clone() })
}

pub fn silu_backward<S: Scalar>(ctx: &SiluCtx<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(ctx.input.shape());
    for ((dst, &x), &d) in dx
        .data_mut()
        .iter_mut()
        .zip(ctx.input.data())
        .zip(dy.data())
    {
        let s = sigmoid(x);
        *dst = d * s * (S::ONE + x * (S::ONE - s));
    }
    dx
}

// ---------------------------------------------------------------------------
// Linear (vector in, vector out)
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct LinearCtx<S> {
    pub input: Tensor<S>,
}

pub fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(Tensor<S>, LinearCtx<S>)> {
    let [out_dim, in_dim] = *weight.shape() else {
        return Err(shape_err(
            "linear weight",
            "(out, in)".into(),
            format!("{:?}", weight.shape()),
        ));
    };
    if x.numel() != in_dim {
        return Err(shape_err(
            "linear input",
            format!("{in_dim}"),
            format!("{}", x.numel()),
        ));
    }
    let mut y = Tensor::zeros(&[out_dim]);
    for o in 0..out_dim {
        let row = &weight.data()[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias.data()[o];
        for (&wv, &xv) in row.iter().zip(x.data()) {
            acc += wv * xv;
        }
        y.data_mut()[o] = acc;
    }
    Ok((y, LinearCtx { input: x.clone() }))
}

/// Returns (d_input, d_weight, d_bias). d_input = W^T * dy.
pub fn linear_backward<S: Scalar>(
    ctx: &LinearCtx<S>,
    weight: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [out_dim, in_dim] = *weight.shape() else {
        unreachable!()
    };
    let mut dx = Tensor::zeros(ctx.input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let db = Tensor::from_vec(&[out_dim], dy.data().to_vec()).expect("dy shape");
    for o in 0..out_dim {
        let d = dy.data()[o];
        let wrow = &weight.data()[o * in_dim..(o + 1) * in_dim];
        let dwrow = &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            dwrow[i] = d * ctx.input.data()[i];
        }
        for (dst, &wv) in dx.data_mut().iter_mut().zip(wrow) {
            *dst += d * wv;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Nearest-neighbor x2 upsample
// ---------------------------------------------------------------------------

pub fn upsample_nearest2_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [c, h, w] = *x.shape() else {
        return Err(shape_err(
            "upsample input",
            "(c, h, w)".into(),
            format!("{:?}", x.shape()),
        ));
    };
    let mut y = Tensor::zeros(&[c, h * 2, w * 2]);
    for ch in 0..c {
        for iy in 0..h {
            let src = &x.data()[ch * h * w + iy * w..ch * h * w + (iy + 1) * w];
            for dy_row in 0..2 {
                let oy = iy * 2 + dy_row;
                let dst =
                    &mut y.data_mut()[ch * h * w * 4 + oy * w * 2..ch * h * w * 4 + (oy + 1) * w * 2];
                for (ix, &v) in src.iter().enumerate() {
                    dst[ix * 2] = v;
                    dst[ix * 2 + 1] = v;
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest2_backward<S: Scalar>(dy: &Tensor<S>, in_shape: &[usize]) -> Tensor<S> {
    let [c, h, w] = *in_shape else { unreachable!() };
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        for oy in 0..h * 2 {
            let iy = oy / 2;
            let src = &dy.data()[ch * h * w * 4 + oy * w * 2..ch * h * w * 4 + (oy + 1) * w * 2];
            let dst = &mut dx.data_mut()[ch * h * w + iy * w..ch * h * w + (iy + 1) * w];
            for (ox, &v) in src.iter().enumerate() {
                dst[ox / 2] += v;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Self-attention (token attention over spatial positions, residual inside)
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AttentionCtx<S> {
    pub gn: GroupNormCtx<S>,
    pub tokens: Tensor<S>,   // (n, c), tokens of the normalized input
    pub q: Tensor<S>,        // (n, c)
    pub k: Tensor<S>,        // (n, c)
    pub v: Tensor<S>,        // (n, c)
    pub attn: Vec<Tensor<S>>, // per head (n, n)
    pub heads: usize,
    pub spatial: (usize, usize),
}

pub struct AttentionParams<'a, S> {
    pub gn_scale: &'a Tensor<S>,
    pub gn_shift: &'a Tensor<S>,
    pub groups: usize,
    pub wq: &'a Tensor<S>,
    pub bq: &'a Tensor<S>,
    pub wk: &'a Tensor<S>,
    pub bk: &'a Tensor<S>,
    pub wv: &'a Tensor<S>,
    pub bv: &'a Tensor<S>,
    pub wo: &'a Tensor<S>,
    pub bo: &'a Tensor<S>,
}

#[derive(Debug)]
pub struct AttentionGrads<S> {
    pub gn_scale: Tensor<S>,
    pub gn_shift: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

fn chw_to_tokens<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [c, h, w] = *x.shape() else { unreachable!() };
    let n = h * w;
    let mut tokens = Tensor::zeros(&[n, c]);
    for ch in 0..c {
        for i in 0..n {
            tokens.data_mut()[i * c + ch] = x.data()[ch * n + i];
        }
    }
    tokens
}

fn tokens_to_chw<S: Scalar>(tokens: &Tensor<S>, c: usize, h: usize, w: usize) -> Tensor<S> {
    let n = h * w;
    let mut x = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..n {
            x.data_mut()[ch * n + i] = tokens.data()[i * c + ch];
        }
    }
    x
}

/// y(n x out) = x(n x in) * W(out x in)^T + b, for token matrices.
fn tokens_linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let [n, in_dim] = *x.shape() else { unreachable!() };
    let [out_dim, _] = *w.shape() else { unreachable!() };
    let mut y = Tensor::zeros(&[n, out_dim]);
    gemm_nt(n, in_dim, out_dim, S::ONE, x.data(), w.data(), S::ZERO, y.data_mut());
    for row in 0..n {
        for (o, &bv) in b.data().iter().enumerate() {
            y.data_mut()[row * out_dim + o] += bv;
        }
    }
    y
}

fn head_slice<S: Scalar>(m: &Tensor<S>, head: usize, d: usize) -> Tensor<S> {
    let [n, c] = *m.shape() else { unreachable!() };
    let mut out = Tensor::zeros(&[n, d]);
    for row in 0..n {
        out.data_mut()[row * d..(row + 1) * d]
            .copy_from_slice(&m.data()[row * c + head * d..row * c + (head + 1) * d]);
    }
    out
}

fn head_scatter_add<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, head: usize, d: usize) {
    let [n, c] = *dst.shape() else { unreachable!() };
    let _ = n;
    for row in 0..src.shape()[0] {
        for j in 0..d {
            dst.data_mut()[row * c + head * d + j] += src.data()[row * d + j];
        }
    }
}

/// Pre-norm residual attention module:
/// out = x + W_o * softmax(QK^T / sqrt(d)) V over spatial tokens of the
/// group-normalized input.
pub fn attention_forward<S: Scalar>(
    x: &Tensor<S>,
    p: &AttentionParams<'_, S>,
    heads: usize,
) -> Result<(Tensor<S>, AttentionCtx<S>)> {
    let [c, h, w] = *x.shape() else {
        return Err(shape_err(
            "attention input",
            "(c, h, w)".into(),
            format!("{:?}", x.shape()),
        ));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::contract(format!(
            "head count {heads} must divide channel count {c}"
        )));
    }
    let n = h * w;
    let d = c / heads;
    let scale = S::from_f64(1.0 / (d as f64).sqrt());

    let (normed, gn_ctx) = group_norm_forward(x, p.gn_scale, p.gn_shift, p.groups)?;
    let tokens = chw_to_tokens(&normed);
    let q = tokens_linear(&tokens, p.wq, p.bq);
    let k = tokens_linear(&tokens, p.wk, p.bk);
    let v = tokens_linear(&tokens, p.wv, p.bv);

    let mut concat = Tensor::zeros(&[n, c]);
    let mut attn_all = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = head_slice(&q, hd, d);
        let kh = head_slice(&k, hd, d);
        let vh = head_slice(&v, hd, d);
        let mut scores = Tensor::zeros(&[n, n]);
        gemm_nt(n, d, n, scale, qh.data(), kh.data(), S::ZERO, scores.data_mut());
        // rowwise softmax
        for row in 0..n {
            let r = &mut scores.data_mut()[row * n..(row + 1) * n];
            let mut mx = r[0];
            for &v in r.iter() {
                mx = mx.max(v);
            }
            let mut sum = S::ZERO;
            for v in r.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in r.iter_mut() {
                *v = *v / sum;
            }
        }
        let mut oh = Tensor::zeros(&[n, d]);
        gemm_nn(n, n, d, S::ONE, scores.data(), vh.data(), S::ZERO, oh.data_mut());
        head_scatter_add(&mut concat, &oh, hd, d);
        attn_all.push(scores);
    }

    let proj = tokens_linear(&concat, p.wo, p.bo);
    let mut y = tokens_to_chw(&proj, c, h, w);
    y.add_assign(x);

    Ok((
        y,
        AttentionCtx {
            gn: gn_ctx,
            tokens,
            q,
            k,
            v,
            attn: attn_all,
            heads,
            spatial: (h, w),
        },
    ))
}

/// Returns (d_input, parameter grads).
pub fn attention_backward<S: Scalar>(
    ctx: &AttentionCtx<S>,
    p: &AttentionParams<'_, S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, AttentionGrads<S>) {
    let [n, c] = *ctx.tokens.shape() else {
        unreachable!()
    };
    let (h, w) = ctx.spatial;
    let heads = ctx.heads;
    let d = c / heads;
    let scale = S::from_f64(1.0 / (d as f64).sqrt());

    let d_out_tokens = chw_to_tokens(dy);

    // Rebuild the concatenated head output O for dWo (cheap gemm per head).
    let mut concat = Tensor::zeros(&[n, c]);
    for hd in 0..heads {
        let vh = head_slice(&ctx.v, hd, d);
        let mut oh = Tensor::zeros(&[n, d]);
        gemm_nn(n, n, d, S::ONE, ctx.attn[hd].data(), vh.data(), S::ZERO, oh.data_mut());
        head_scatter_add(&mut concat, &oh, hd, d);
    }

    // proj = concat * Wo^T + bo
    let mut dwo = Tensor::zeros(&[c, c]);
    gemm_tn(c, n, c, S::ONE, d_out_tokens.data(), concat.data(), S::ZERO, dwo.data_mut());
    let mut dbo = Tensor::zeros(&[c]);
    for row in 0..n {
        for o in 0..c {
            dbo.data_mut()[o] += d_out_tokens.data()[row * c + o];
        }
    }
    let mut d_concat = Tensor::zeros(&[n, c]);
    gemm_nn(n, c, c, S::ONE, d_out_tokens.data(), p.wo.data(), S::ZERO, d_concat.data_mut());

    let mut dq = Tensor::zeros(&[n, c]);
    let mut dk = Tensor::zeros(&[n, c]);
    let mut dv = Tensor::zeros(&[n, c]);
    for hd in 0..heads {
        let attn = &ctx.attn[hd];
        let qh = head_slice(&ctx.q, hd, d);
        let kh = head_slice(&ctx.k, hd, d);
        let vh = head_slice(&ctx.v, hd, d);
        let doh = head_slice(&d_concat, hd, d);

        // dV_h = A^T dO_h
        let mut dvh = Tensor::zeros(&[n, d]);
        gemm_tn(n, n, d, S::ONE, attn.data(), doh.data(), S::ZERO, dvh.data_mut());
        // dA = dO_h V_h^T
        let mut da = Tensor::zeros(&[n, n]);
        gemm_nt(n, d, n, S::ONE, doh.data(), vh.data(), S::ZERO, da.data_mut());
        // softmax backward: dS = A * (dA - rowsum(dA * A))
        let mut ds = Tensor::zeros(&[n, n]);
        for row in 0..n {
            let a_row = &attn.data()[row * n..(row + 1) * n];
            let da_row = &da.data()[row * n..(row + 1) * n];
            let mut dot = S::ZERO;
            for (&a, &g) in a_row.iter().zip(da_row) {
                dot += a * g;
            }
            for (j, dst) in ds.data_mut()[row * n..(row + 1) * n].iter_mut().enumerate() {
                *dst = a_row[j] * (da_row[j] - dot);
            }
        }
        // dQ_h = scale * dS K_h ; dK_h = scale * dS^T Q_h
        let mut dqh = Tensor::zeros(&[n, d]);
        gemm_nn(n, n, d, scale, ds.data(), kh.data(), S::ZERO, dqh.data_mut());
        let mut dkh = Tensor::zeros(&[n, d]);
        gemm_tn(n, n, d, scale, ds.data(), qh.data(), S::ZERO, dkh.data_mut());

        head_scatter_add(&mut dq, &dqh, hd, d);
        head_scatter_add(&mut dk, &dkh, hd, d);
        head_scatter_add(&mut dv, &dvh, hd, d);
    }

    // Q = X Wq^T + bq and likewise for K, V, where X is the normalized input;
    // the raw input flows through the residual instead.
    let mut d_tokens = Tensor::zeros(&[n, c]);
    let mut grads = AttentionGrads {
        gn_scale: Tensor::zeros(&[c]),
        gn_shift: Tensor::zeros(&[c]),
        wq: Tensor::zeros(&[c, c]),
        bq: Tensor::zeros(&[c]),
        wk: Tensor::zeros(&[c, c]),
        bk: Tensor::zeros(&[c]),
        wv: Tensor::zeros(&[c, c]),
        bv: Tensor::zeros(&[c]),
        wo: dwo,
        bo: dbo,
    };
    for (dmat, wmat, gw, gb) in [
        (&dq, p.wq, &mut grads.wq, &mut grads.bq),
        (&dk, p.wk, &mut grads.wk, &mut grads.bk),
        (&dv, p.wv, &mut grads.wv, &mut grads.bv),
    ] {
        gemm_tn(c, n, c, S::ONE, dmat.data(), ctx.tokens.data(), S::ZERO, gw.data_mut());
        for row in 0..n {
            for o in 0..c {
                gb.data_mut()[o] += dmat.data()[row * c + o];
            }
        }
        let mut dx_part = Tensor::zeros(&[n, c]);
        gemm_nn(n, c, c, S::ONE, dmat.data(), wmat.data(), S::ZERO, dx_part.data_mut());
        d_tokens.add_assign(&dx_part);
    }

    let d_normed = tokens_to_chw(&d_tokens, c, h, w);
    let (dx_gn, dg, db) = group_norm_backward(&ctx.gn, p.gn_scale, &d_normed);
    grads.gn_scale = dg;
    grads.gn_shift = db;
    let mut dx = dx_gn;
    dx.add_assign(dy);

    (dx, grads)
}

// ---------------------------------------------------------------------------
// Sinusoidal time embedding (deterministic in t, no parameters)
// ---------------------------------------------------------------------------

pub fn time_embedding<S: Scalar>(t: usize, dim: usize) -> Result<Tensor<S>> {
    if dim < 4 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "time embedding dim must be an even number >= 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    let t = t as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp();
        out.data_mut()[i] = S::from_f64((t * freq).sin());
        out.data_mut()[half + i] = S::from_f64((t * freq).cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_at_zero_is_zero() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1]);
        let (y, _) = silu_forward(&x);
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn group_norm_constant_input_gives_shift() {
        // Zero variance: normalized output is 0, so y = beta.
        let x = Tensor::<f64>::filled(&[4, 2, 2], 3.7);
        let gamma = Tensor::filled(&[4], 2.0);
        let beta = Tensor::filled(&[4], 0.25);
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 2).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn conv3x3_identity_kernel_passes_input_through() {
        // Center tap 1, rest 0: interior equals input thanks to zero padding.
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1]);
        let x = Tensor::from_vec(
            &[1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let (y, _) = conv2d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data(), x.data());

        // Direct convolution oracle with an arbitrary kernel.
        let w = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![0.5, -1.0, 0.25, 0.0, 2.0, -0.5, 1.5, 0.75, -0.25],
        )
        .unwrap();
        let (y, _) = conv2d_forward(&x, &w, &b, 1).unwrap();
        let mut want = vec![0.0; 9];
        for oy in 0..3_isize {
            for ox in 0..3_isize {
                let mut acc = 0.0;
                for ky in 0..3_isize {
                    for kx in 0..3_isize {
                        let iy = oy + ky - 1;
                        let ix = ox + kx - 1;
                        if iy >= 0 && iy < 3 && ix >= 0 && ix < 3 {
                            acc += w.data()[(ky * 3 + kx) as usize]
                                * x.data()[(iy * 3 + ix) as usize];
                        }
                    }
                }
                want[(oy * 3 + ox) as usize] = acc;
            }
        }
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_mismatch_is_structured_error() {
        let w = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::zeros(&[4, 8, 8]);
        let err = conv2d_forward(&x, &w, &b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "unhelpful error: {msg}");
    }

    #[test]
    fn linear_input_grad_is_w_transpose_dy() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let (_, ctx) = linear_forward(&x, &w, &b).unwrap();
        let dy = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let (dx, _, _) = linear_backward(&ctx, &w, &dy);
        assert_eq!(dx.data(), &[1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let w = Tensor::<f64>::filled(&[2, 2, 3, 3], 0.3);
        let b = Tensor::filled(&[2], 0.1);
        let x = Tensor::filled(&[2, 4, 4], 0.7);
        let (y, ctx) = conv2d_forward(&x, &w, &b, 1).unwrap();
        let dy = Tensor::zeros(y.shape());
        let (dx, dw, db) = conv2d_backward(&ctx, &w, &dy);
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 1.0);
        assert_eq!(y.data()[5], 1.0);
        let dy = Tensor::filled(&[1, 4, 4], 1.0);
        let dx = upsample_nearest2_backward(&dy, &[1, 2, 2]);
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn time_embedding_is_deterministic_and_bounded() {
        let a = time_embedding::<f64>(25, 16).unwrap();
        let b = time_embedding::<f64>(25, 16).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(time_embedding::<f64>(1, 7).is_err());
    }
}
