//! im2col / col2im lowering for 2-D convolutions.

/// Geometry of a square-kernel convolution over a `(channels, height, width)`
/// input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output extent of the forward convolution, `None` if the kernel does
    /// not fit.
    pub fn out_dims(&self) -> Option<(usize, usize)> {
        let h = self.height + 2 * self.pad;
        let w = self.width + 2 * self.pad;
        if self.stride == 0 || self.kernel == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds `input` (`channels * height * width`) into a
/// `(channels*k*k, out_h*out_w)` matrix.
pub(crate) fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_dims().expect("invalid conv geometry");
    let k = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &input[(c * g.height + iy as usize) * g.width..];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back onto
/// `output` (`channels * height * width`).
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], output: &mut [f64]) {
    let (oh, ow) = g.out_dims().expect("invalid conv geometry");
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            output[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
