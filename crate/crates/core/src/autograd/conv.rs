//! im2col / col2im kernels shared by convolution and transposed convolution.

/// Geometry of a square-kernel 2-d convolution over one image plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rejects geometries whose strided windows do not tile the padded input.
    pub fn is_valid(&self) -> bool {
        self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
            && self.stride > 0
    }
}

/// Unfolds `image` (C×H×W) into `cols` ((C·k·k) × (Ho·Wo)).
pub fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_line = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `image`.
pub fn col2im(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let plane = ho * wo;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_line = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
