//! im2col convolution kernels over NCHW buffers.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols_width(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `[C·KH·KW, N·OH·OW]` matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let width = g.cols_width();
    let mut cols = vec![T::zero(); g.patch() * width];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[ni * l..(ni + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the input grid.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let width = g.cols_width();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * width..(row + 1) * width];
                for ni in 0..g.n {
                    let dst = &mut dx[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[ni * l..(ni + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dst[iy as usize * g.w + ix as usize];
                                *d = *d + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let l = g.out_h() * g.out_w();
    let width = g.cols_width();
    let cols = im2col(g, x);
    let mut tmp = vec![T::zero(); g.out_c * width];
    T::gemm(g.out_c, g.patch(), width, weight, false, &cols, false, &mut tmp, false);
    let mut out = vec![T::zero(); g.n * g.out_c * l];
    for o in 0..g.out_c {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for ni in 0..g.n {
            let src = &tmp[o * width + ni * l..o * width + (ni + 1) * l];
            let dst = &mut out[(ni * g.out_c + o) * l..(ni * g.out_c + o + 1) * l];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let l = g.out_h() * g.out_w();
    let width = g.cols_width();
    // [N, O, L] -> [O, N·L]
    let mut dy_t = vec![T::zero(); g.out_c * width];
    for ni in 0..g.n {
        for o in 0..g.out_c {
            dy_t[o * width + ni * l..o * width + (ni + 1) * l]
                .copy_from_slice(&dy[(ni * g.out_c + o) * l..(ni * g.out_c + o + 1) * l]);
        }
    }
    let db = need.2.then(|| {
        (0..g.out_c)
            .map(|o| dy_t[o * width..(o + 1) * width].iter().copied().sum())
            .collect()
    });
    let dw = need.1.then(|| {
        let cols = im2col(g, x);
        let mut dw = vec![T::zero(); g.out_c * g.patch()];
        T::gemm(g.out_c, width, g.patch(), &dy_t, false, &cols, true, &mut dw, false);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * width];
        T::gemm(g.patch(), g.out_c, width, weight, true, &dy_t, false, &mut dcols, false);
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        col2im(g, &dcols, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}
