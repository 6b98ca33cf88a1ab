//! im2col-based 2-D convolution kernels shared by the shared-kernel and
//! per-sample-kernel graph operations.

use super::Scalar;
use crate::{Error, Result};

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride: (stride, stride), padding: (padding, padding) }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 0)
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [N,C,H,W] and kernel [K,C,kh,kw], got {input:?} and {kernel:?}"),
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (k, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel has {kc} input channels but input has {c}"),
            ));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * spec.padding.0, w + 2 * spec.padding.1);
        if ph < kh || pw < kw || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {ph}x{pw} is smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh: (ph - kh) / spec.stride.0 + 1,
            ow: (pw - kw) / spec.stride.1 + 1,
            spec,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.k * self.out_area()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.oh, self.ow]
    }
}

/// Unfolds one sample `[C,H,W]` into `[C·kh·kw, oh·ow]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let area = g.out_area();
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `[C·kh·kw, oh·ow]` back onto a `[C,H,W]` gradient, accumulating.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx_out: &mut [T]) {
    let area = g.out_area();
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    for ci in 0..g.c {
        let plane = &mut dx_out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `kernel_stride` is 0 when all samples share one
/// kernel and `K·C·kh·kw` when each sample carries its own.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    kernels: &[T],
    kernel_stride: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_plane()];
    let mut cols = vec![T::zero(); g.col_rows() * g.out_area()];
    for s in 0..g.n {
        im2col(&x[s * g.in_plane()..(s + 1) * g.in_plane()], g, &mut cols);
        let w = &kernels[s * kernel_stride..];
        T::gemm(
            g.k,
            g.col_rows(),
            g.out_area(),
            w,
            false,
            &cols,
            false,
            &mut out[s * g.out_plane()..(s + 1) * g.out_plane()],
            false,
        );
    }
    out
}

/// Backward convolution. Accumulates into `dx` and `dw` when present.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    kernels: &[T],
    kernel_stride: usize,
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let rows = g.col_rows();
    let area = g.out_area();
    let kernel_len = g.k * rows;
    let mut cols = vec![T::zero(); rows * area];
    let mut dcols = vec![T::zero(); rows * area];
    for s in 0..g.n {
        let go = &dout[s * g.out_plane()..(s + 1) * g.out_plane()];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[s * g.in_plane()..(s + 1) * g.in_plane()], g, &mut cols);
            let off = s * kernel_stride;
            // dW (K × rows) += dOut (K × area) · colsᵀ
            T::gemm(g.k, area, rows, go, false, &cols, true, &mut dw[off..off + kernel_len], true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let w = &kernels[s * kernel_stride..s * kernel_stride + kernel_len];
            // dcols (rows × area) = Wᵀ · dOut
            T::gemm(rows, g.k, area, w, true, go, false, &mut dcols, false);
            col2im(&dcols, g, &mut dx[s * g.in_plane()..(s + 1) * g.in_plane()]);
        }
    }
}
