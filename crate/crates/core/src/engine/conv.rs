use crate::engine::Element;

/// Geometry of a batched 2-D convolution, NCHW input and OIHW kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
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

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output side length of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

/// Range of output columns `ow` whose input column `ow*stride + kj - pad`
/// lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `C x H x W` image into rows of a `(C*KH*KW) x ld` column
/// matrix, writing `HO*WO` entries per row starting at column `off`.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + ho * wo];
                let (lo, hi) = valid_cols(g, kj, wo);
                for oh in 0..ho {
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    let ih = (oh * g.stride + ki).wrapping_sub(g.pad);
                    if ih >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &xc[ih * g.w..(ih + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column block back into an image.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + ho * wo];
                let (lo, hi) = valid_cols(g, kj, wo);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki).wrapping_sub(g.pad);
                    if ih >= g.h {
                        continue;
                    }
                    let line = &src[oh * wo + lo..oh * wo + hi];
                    let dst = &mut dxc[ih * g.w + first..];
                    if g.stride == 1 {
                        dst[..hi - lo].iter_mut().zip(line).for_each(|(d, s)| *d += *s);
                    } else {
                        dst.iter_mut().step_by(g.stride).zip(line).for_each(|(d, s)| *d += *s);
                    }
                }
            }
        }
    }
}

/// Samples unfolded together so each GEMM has at least this many columns.
const MIN_GEMM_COLS: usize = 256;

/// Number of samples per batched GEMM.
pub(crate) fn chunk_len(g: &ConvGeom) -> usize {
    MIN_GEMM_COLS.div_ceil(g.out_plane().max(1)).clamp(1, g.n.max(1))
}
