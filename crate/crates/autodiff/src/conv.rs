//! im2col / col2im helpers shared by the convolution ops.
//!
//! Column buffers are laid out `[C * kh * kw, N * Ho * Wo]` so a whole
//! minibatch goes through one gemm.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Writes the patches of `batch` images into `cols`.
pub(crate) fn im2col<F: Real>(g: &Geometry, batch: usize, images: &[F], cols: &mut [F]) {
    let p = g.positions();
    let ld = batch * p;
    for n in 0..batch {
        let img = &images[n * g.image_len()..(n + 1) * g.image_len()];
        for c in 0..g.channels {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * ld + n * p..row * ld + (n + 1) * p];
                    for oh in 0..g.out_h {
                        let src_row = c * g.height * g.width + (oh * g.stride + ki) * g.width + kj;
                        for ow in 0..g.out_w {
                            dst[oh * g.out_w + ow] = img[src_row + ow * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto `batch` images (adjoint of [`im2col`]).
pub(crate) fn col2im<F: Real>(g: &Geometry, batch: usize, cols: &[F], images: &mut [F]) {
    let p = g.positions();
    let ld = batch * p;
    for n in 0..batch {
        let img = &mut images[n * g.image_len()..(n + 1) * g.image_len()];
        for c in 0..g.channels {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * ld + n * p..row * ld + (n + 1) * p];
                    for oh in 0..g.out_h {
                        let dst_row = c * g.height * g.width + (oh * g.stride + ki) * g.width + kj;
                        for ow in 0..g.out_w {
                            img[dst_row + ow * g.stride] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` -> `[C, N * P]`
pub(crate) fn to_channel_major<F: Real>(src: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = &src[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(s);
        }
    }
    out
}

/// `[C, N * P]` -> `[N, C, P]`
pub(crate) fn to_batch_major<F: Real>(src: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = &src[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(s);
        }
    }
    out
}
