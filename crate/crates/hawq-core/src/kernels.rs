//! Inner loops for matmul and 2-D convolution.
//!
//! Every kernel computes each output element with a sequential inner loop in
//! a fixed index order, so results are bit-identical whether or not rayon
//! splits the outer loop across threads.

use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] · B[k,n], row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row_job = |i: usize, out_row: &mut [f64]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

/// Y[n,co,oy,ox] = Σ_{ci,ky,kx} X[n,ci,oy+ky-p,ox+kx-p] · K[co,ci,ky,kx]
pub(crate) fn conv_forward(x: &[f64], k: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.batch * d.c_out * oh * ow];
    let plane_job = |plane: usize, out_plane: &mut [f64]| {
        let (bn, co) = (plane / d.c_out, plane % d.c_out);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..d.c_in {
                    for ky in 0..d.kh {
                        let iy = (oy + ky).wrapping_sub(d.pad);
                        if iy >= d.h {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox + kx).wrapping_sub(d.pad);
                            if ix >= d.w {
                                continue;
                            }
                            acc += x[((bn * d.c_in + ci) * d.h + iy) * d.w + ix]
                                * k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        }
                    }
                }
                out_plane[oy * ow + ox] = acc;
            }
        }
    };
    let work = d.batch * d.c_out * oh * ow * d.c_in * d.kh * d.kw;
    if work >= PAR_FLOP_THRESHOLD && d.batch * d.c_out > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(p, chunk)| plane_job(p, chunk));
    } else {
        for (p, chunk) in out.chunks_mut(oh * ow).enumerate() {
            plane_job(p, chunk);
        }
    }
    out
}

/// Adjoint of `conv_forward` in its first argument:
/// dX[n,ci,iy,ix] += Σ G[n,co,oy,ox] · K[co,ci,ky,kx] over the forward index map.
pub(crate) fn conv_grad_input(g: &[f64], k: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.batch * d.c_in * d.h * d.w];
    let batch_job = |bn: usize, dx: &mut [f64]| {
        for co in 0..d.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((bn * d.c_out + co) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..d.c_in {
                        for ky in 0..d.kh {
                            let iy = (oy + ky).wrapping_sub(d.pad);
                            if iy >= d.h {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox + kx).wrapping_sub(d.pad);
                                if ix >= d.w {
                                    continue;
                                }
                                dx[(ci * d.h + iy) * d.w + ix] +=
                                    gv * k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = d.batch * d.c_out * oh * ow * d.c_in * d.kh * d.kw;
    if work >= PAR_FLOP_THRESHOLD && d.batch > 1 {
        out.par_chunks_mut(d.c_in * d.h * d.w)
            .enumerate()
            .for_each(|(bn, dx)| batch_job(bn, dx));
    } else {
        for (bn, dx) in out.chunks_mut(d.c_in * d.h * d.w).enumerate() {
            batch_job(bn, dx);
        }
    }
    out
}

/// Adjoint of `conv_forward` in its second argument:
/// dK[co,ci,ky,kx] = Σ_{n,oy,ox} X[n,ci,oy+ky-p,ox+kx-p] · G[n,co,oy,ox]
pub(crate) fn conv_grad_kernel(x: &[f64], g: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.c_out * d.c_in * d.kh * d.kw];
    let co_job = |co: usize, dk: &mut [f64]| {
        for ci in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0;
                    for bn in 0..d.batch {
                        for oy in 0..oh {
                            let iy = (oy + ky).wrapping_sub(d.pad);
                            if iy >= d.h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox + kx).wrapping_sub(d.pad);
                                if ix >= d.w {
                                    continue;
                                }
                                acc += x[((bn * d.c_in + ci) * d.h + iy) * d.w + ix]
                                    * g[((bn * d.c_out + co) * oh + oy) * ow + ox];
                            }
                        }
                    }
                    dk[(ci * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    };
    let work = d.batch * d.c_out * oh * ow * d.c_in * d.kh * d.kw;
    if work >= PAR_FLOP_THRESHOLD && d.c_out > 1 {
        out.par_chunks_mut(d.c_in * d.kh * d.kw)
            .enumerate()
            .for_each(|(co, dk)| co_job(co, dk));
    } else {
        for (co, dk) in out.chunks_mut(d.c_in * d.kh * d.kw).enumerate() {
            co_job(co, dk);
        }
    }
    out
}
