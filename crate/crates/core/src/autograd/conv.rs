use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Float};

/// Shapes of one 2-d convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width] = input;
        let [out_channels, kc, kernel_h, kernel_w] = kernel;
        if kc != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_channels} channels, kernel expects {kc}"),
            ));
        }
        let out_h = conv_out_extent("conv2d", height, kernel_h, stride, pad)?;
        let out_w = conv_out_extent("conv2d", width, kernel_w, stride, pad)?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Length of one unrolled patch: `c * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate of patch element `(ky, kx)` at output `(oy, ox)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    /// Output columns `ox` whose tap `kx` lands inside the image, as a
    /// half-open range.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        // Need 0 <= ox*stride + kx - pad < width.
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.width + self.pad > kx {
            ((self.width + self.pad - kx - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unroll an NCHW batch into a `patch_len × (batch·positions)` matrix.
/// Rows are ordered channel-major `(c, ky, kx)`; columns are `(n, oy, ox)`.
pub fn im2col<F: Float>(input: &[F], geo: &ConvGeometry) -> Vec<F> {
    let cols = geo.batch * geo.positions();
    let mut out = vec![F::zero(); geo.patch_len() * cols];
    let plane = geo.height * geo.width;
    for c in 0..geo.in_channels {
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ky) * geo.kernel_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let (lo, hi) = geo.valid_ox(kx);
                for n in 0..geo.batch {
                    let src = &input[(n * geo.in_channels + c) * plane..][..plane];
                    for oy in 0..geo.out_h {
                        let Some(y) = (oy * geo.stride + ky).checked_sub(geo.pad) else {
                            continue;
                        };
                        if y >= geo.height {
                            continue;
                        }
                        let base = n * geo.positions() + oy * geo.out_w;
                        let src_row = &src[y * geo.width..][..geo.width];
                        let d = &mut dst[base + lo..base + hi];
                        if geo.stride == 1 {
                            let x0 = lo + kx - geo.pad;
                            d.copy_from_slice(&src_row[x0..x0 + (hi - lo)]);
                        } else {
                            for (i, v) in d.iter_mut().enumerate() {
                                *v = src_row[(lo + i) * geo.stride + kx - geo.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into an NCHW batch.
pub fn col2im<F: Float>(cols: &[F], geo: &ConvGeometry) -> Vec<F> {
    let ncols = geo.batch * geo.positions();
    let plane = geo.height * geo.width;
    let mut out = vec![F::zero(); geo.batch * geo.in_channels * plane];
    for c in 0..geo.in_channels {
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ky) * geo.kernel_w + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = geo.valid_ox(kx);
                for n in 0..geo.batch {
                    let dst = &mut out[(n * geo.in_channels + c) * plane..][..plane];
                    for oy in 0..geo.out_h {
                        let Some(y) = (oy * geo.stride + ky).checked_sub(geo.pad) else {
                            continue;
                        };
                        if y >= geo.height {
                            continue;
                        }
                        let base = n * geo.positions() + oy * geo.out_w;
                        let dst_row = &mut dst[y * geo.width..][..geo.width];
                        for (i, &v) in src[base + lo..base + hi].iter().enumerate() {
                            dst_row[(lo + i) * geo.stride + kx - geo.pad] += v;
                        }
                    }
                }
            }
        }
    }
    out
}
