//! im2col / col2im helpers shared by `conv2d` and `conv_transpose2d`.

use super::Real;

/// Geometry of a square-kernel convolution mapping an `in_h x in_w` image
/// onto an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output size of a forward convolution, `None` if the kernel does not
    /// fit the padded input.
    pub fn forward(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(ConvGeometry {
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint is the transposed
    /// convolution from `in_h x in_w` with the given output padding.
    /// The returned geometry's `in_*` is the large (upsampled) side.
    pub fn transposed(
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Option<Self> {
        if stride == 0 || output_pad >= stride || in_h == 0 || in_w == 0 {
            return None;
        }
        let big_h = ((in_h - 1) * stride + kernel + output_pad).checked_sub(2 * pad)?;
        let big_w = ((in_w - 1) * stride + kernel + output_pad).checked_sub(2 * pad)?;
        let g = Self::forward(big_h, big_w, kernel, stride, pad)?;
        (g.out_h == in_h && g.out_w == in_w).then_some(g)
    }

    pub fn patch(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }
}

/// Unfolds `[n, c, in_h, in_w]` into `[c * k * k, n * out_h * out_w]`.
pub(crate) fn im2col<T: Real>(x: &[T], n: usize, c: usize, g: &ConvGeometry) -> Vec<T> {
    let cols_w = n * g.out_pixels();
    let mut cols = vec![T::zero(); c * g.patch() * cols_w];
    for ch in 0..c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ch * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for img in 0..n {
                    let src = &x[(img * c + ch) * g.in_pixels()..(img * c + ch + 1) * g.in_pixels()];
                    let dst = &mut dst_row[img * g.out_pixels()..(img + 1) * g.out_pixels()];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[n, c, in_h, in_w]`.
pub(crate) fn col2im<T: Real>(cols: &[T], n: usize, c: usize, g: &ConvGeometry) -> Vec<T> {
    let cols_w = n * g.out_pixels();
    let mut x = vec![T::zero(); n * c * g.in_pixels()];
    for ch in 0..c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ch * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                for img in 0..n {
                    let dst = &mut x[(img * c + ch) * g.in_pixels()..(img * c + ch + 1) * g.in_pixels()];
                    let src = &src_row[img * g.out_pixels()..(img + 1) * g.out_pixels()];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` -> `[c, n * p]`
pub(crate) fn batch_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            out[ch * n * p + img * p..ch * n * p + (img + 1) * p]
                .copy_from_slice(&x[(img * c + ch) * p..(img * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c, n * p]` -> `[n, c, p]`
pub(crate) fn channel_major_to_batch<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            out[(img * c + ch) * p..(img * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + img * p..ch * n * p + (img + 1) * p]);
        }
    }
    out
}
