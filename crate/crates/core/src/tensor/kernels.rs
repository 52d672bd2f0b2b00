//! Forward and backward kernels on raw buffers. The tape in `graph` owns the
//! bookkeeping; these functions only do arithmetic.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4-d input and weight, got {x:?} and {w:?}"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight expects {}", x[1], w[1]),
            ));
        }
        let ho = conv_output_extent(x[2], w[2], stride, pad);
        let wo = conv_output_extent(x[3], w[3], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} does not fit input {}x{} with pad {pad}, stride {stride}", w[2], w[3], x[2], x[3]),
            ));
        };
        Ok(ConvGeom {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-sample im2col buffers needed by backward.
pub(crate) fn conv2d_forward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
) -> (Vec<F>, Vec<F>) {
    let (k, p) = (g.patch(), g.positions());
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * p;
    let mut cols = vec![F::zero(); g.batch * k * p];
    let mut out = vec![F::zero(); g.batch * out_sample];
    for b in 0..g.batch {
        let col = &mut cols[b * k * p..(b + 1) * k * p];
        im2col(g, &x[b * in_sample..(b + 1) * in_sample], col);
        F::gemm(
            g.c_out,
            k,
            p,
            F::one(),
            w,
            k as isize,
            1,
            col,
            p as isize,
            1,
            F::zero(),
            &mut out[b * out_sample..(b + 1) * out_sample],
            p as isize,
            1,
        );
    }
    (out, cols)
}

pub(crate) fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    w: &[F],
    cols: &[F],
    dout: &[F],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let (k, p) = (g.patch(), g.positions());
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * p;
    let mut dw = want_dw.then(|| vec![F::zero(); g.c_out * k]);
    let mut dx = want_dx.then(|| vec![F::zero(); g.batch * in_sample]);
    let mut dcols = if want_dx { vec![F::zero(); k * p] } else { Vec::new() };
    for b in 0..g.batch {
        let dout_b = &dout[b * out_sample..(b + 1) * out_sample];
        let col = &cols[b * k * p..(b + 1) * k * p];
        if let Some(dw) = dw.as_mut() {
            // dW[o, r] += Σ_p dout[o, p] · cols[r, p]
            F::gemm(
                g.c_out,
                p,
                k,
                F::one(),
                dout_b,
                p as isize,
                1,
                col,
                1,
                p as isize,
                F::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[r, p] = Σ_o W[o, r] · dout[o, p]
            F::gemm(
                k,
                g.c_out,
                p,
                F::one(),
                w,
                1,
                k as isize,
                dout_b,
                p as isize,
                1,
                F::zero(),
                &mut dcols,
                p as isize,
                1,
            );
            col2im(g, &dcols, &mut dx[b * in_sample..(b + 1) * in_sample]);
        }
    }
    (dx, dw)
}

/// Max pooling; returns the output and the flat input index of each maximum.
pub(crate) fn max_pool_forward<F: Real>(
    x: &Tensor<F>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("max_pool2d", format!("expected 4-d input, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (Some(ho), Some(wo)) = (
        conv_output_extent(h, size, stride, 0),
        conv_output_extent(w, size, stride, 0),
    ) else {
        return Err(Error::dim(
            "max_pool2d",
            format!("window {size} does not fit {h}x{w}"),
        ));
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        // first maximum wins on ties
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([b, c, ho, wo], out)?, arg))
}

/// `y[b, o] = Σ_i x[b, i]·w[o, i] + bias[o]`.
pub(crate) fn dense_forward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::dim(
            "dense",
            format!("input {xs:?} incompatible with weight {ws:?}"),
        ));
    }
    let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
    let mut y = vec![F::zero(); batch * outp];
    if let Some(bias) = bias {
        if bias.shape() != [outp] {
            return Err(Error::dim(
                "dense",
                format!("bias {:?} for {outp} outputs", bias.shape()),
            ));
        }
        for row in y.chunks_mut(outp) {
            row.copy_from_slice(bias.data());
        }
    }
    F::gemm(
        batch,
        inp,
        outp,
        F::one(),
        x.data(),
        inp as isize,
        1,
        w.data(),
        1,
        inp as isize,
        F::one(),
        &mut y,
        outp as isize,
        1,
    );
    Tensor::new([batch, outp], y)
}

pub(crate) fn dense_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, inp, outp) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut dx = vec![F::zero(); batch * inp];
    F::gemm(
        batch,
        outp,
        inp,
        F::one(),
        dy.data(),
        outp as isize,
        1,
        w.data(),
        inp as isize,
        1,
        F::zero(),
        &mut dx,
        inp as isize,
        1,
    );
    let mut dw = vec![F::zero(); outp * inp];
    F::gemm(
        outp,
        batch,
        inp,
        F::one(),
        dy.data(),
        1,
        outp as isize,
        x.data(),
        inp as isize,
        1,
        F::zero(),
        &mut dw,
        inp as isize,
        1,
    );
    let mut db = vec![F::zero(); outp];
    for row in dy.data().chunks(outp) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (
        Tensor { shape: vec![batch, inp], data: dx },
        Tensor { shape: vec![outp, inp], data: dw },
        Tensor { shape: vec![outp], data: db },
    )
}

/// Row-wise numerically stable softmax of a `[batch, classes]` tensor.
pub(crate) fn softmax_rows<F: Real>(logits: &Tensor<F>) -> Vec<F> {
    let classes = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(classes) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}
