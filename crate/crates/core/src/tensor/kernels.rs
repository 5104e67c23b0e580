//! Raw numeric kernels: GEMM and im2col convolution helpers.

/// A row-major matrix view, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// Logical rows and cols after any transposition.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef { data, rows, cols, transposed: false }
    }

    /// Transposed view of a stored `rows x cols` matrix.
    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, transposed: !self.transposed }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            // stored as cols x rows
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b`, with `out` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation on `[C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size, or `None` when the kernel exceeds the padded input
    /// or the stride is zero.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        if self.stride == 0 {
            return None;
        }
        let ph = self.in_h + 2 * self.padding;
        let pw = self.in_w + 2 * self.padding;
        if self.kernel_h > ph || self.kernel_w > pw {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub(crate) fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Unrolls one `[C, H, W]` image into a `[C*kh*kw, Ho*Wo]` column matrix.
    pub(crate) fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = self.output_hw().expect("validated geometry");
        let n_out = oh * ow;
        debug_assert_eq!(cols.len(), self.patch_len() * n_out);
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            dst[oi * ow + oj] =
                                if ii >= 0 && jj >= 0 && (ii as usize) < self.in_h && (jj as usize) < self.in_w {
                                    plane[ii as usize * self.in_w + jj as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds columns back into an image.
    pub(crate) fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = self.output_hw().expect("validated geometry");
        let n_out = oh * ow;
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.in_channels {
            let base = c * self.in_h * self.in_w;
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        if ii < 0 || ii as usize >= self.in_h {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            if jj < 0 || jj as usize >= self.in_w {
                                continue;
                            }
                            image[base + ii as usize * self.in_w + jj as usize] += src[oi * ow + oj];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 4];
        // a * a^T = [[14, 32], [32, 77]]
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&a, 2, 3).t(), 0.0, &mut out);
        assert_eq!(out, [14.0, 32.0, 32.0, 77.0]);
        let mut out = [0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut out);
        assert_eq!(out, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn output_hw_formula() {
        let g = ConvGeometry {
            in_channels: 1,
            in_h: 28,
            in_w: 28,
            out_channels: 32,
            kernel_h: 4,
            kernel_w: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(g.output_hw(), Some((14, 14)));
        let too_big = ConvGeometry { kernel_h: 31, ..g };
        assert_eq!(too_big.output_hw(), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            in_channels: 2,
            in_h: 5,
            in_w: 4,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
        };
        let (oh, ow) = g.output_hw().unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * oh * ow).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        g.im2col(&x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&c, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
