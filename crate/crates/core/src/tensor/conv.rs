use super::TensorError;
use crate::scalar::Scalar;

/// Resolved shapes of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Validates an input `[B, C, H, W]` against a kernel `[O, C, kh, kw]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (&[batch, in_channels, height, width], &[out_channels, kc, kernel_h, kernel_w]) =
            (input, kernel)
        else {
            return Err(TensorError::Conv(format!(
                "expected input [B,C,H,W] and kernel [O,C,kh,kw], got {input:?} and {kernel:?}"
            )));
        };
        if kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Conv("stride must be positive".into()));
        }
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if kernel_h == 0 || kernel_w == 0 || kernel_h > padded_h || kernel_w > padded_w {
            return Err(TensorError::Conv(format!(
                "kernel {kernel_h}x{kernel_w} does not fit padded input {padded_h}x{padded_w}"
            )));
        }
        if !(padded_h - kernel_h).is_multiple_of(stride)
            || !(padded_w - kernel_w).is_multiple_of(stride)
        {
            return Err(TensorError::Conv(format!(
                "non-integral output size: ({height}+2*{padding}-{kernel_h})/{stride} or \
                 ({width}+2*{padding}-{kernel_w})/{stride}"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Rows of the unfolded patch matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded patch matrix: `B * H' * W'`.
    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Calls `f(col_row, col_col, input_index)` for every patch entry that
    /// lands inside the (unpadded) input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ohw = self.out_h * self.out_w;
        let positions = self.positions();
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    for b in 0..self.batch {
                        let plane = (b * self.in_channels + c) * self.height * self.width;
                        for oy in 0..self.out_h {
                            let y = (oy * self.stride + ki) as isize - self.padding as isize;
                            if y < 0 || y >= self.height as isize {
                                continue;
                            }
                            let base = plane + y as usize * self.width;
                            for ox in 0..self.out_w {
                                let x = (ox * self.stride + kj) as isize - self.padding as isize;
                                if x < 0 || x >= self.width as isize {
                                    continue;
                                }
                                let col = b * ohw + oy * self.out_w + ox;
                                f(row * positions, col, base + x as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `[C*kh*kw, B*H'*W']` patch matrix.
    pub(crate) fn im2col<S: Scalar>(&self, input: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.patch_len() * self.positions()];
        self.for_each_tap(|row_off, col, idx| cols[row_off + col] = input[idx]);
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back.
    pub(crate) fn col2im<S: Scalar>(&self, cols: &[S], grad_input: &mut [S]) {
        self.for_each_tap(|row_off, col, idx| grad_input[idx] += cols[row_off + col]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_arithmetic() {
        let g = ConvGeometry::new(&[2, 3, 16, 16], &[8, 3, 4, 4], 2, 1).unwrap();
        assert_eq!(g.output_shape(), [2, 8, 8, 8]);
        let g = ConvGeometry::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 1, 0).unwrap();
        assert_eq!(g.output_shape(), [1, 1, 3, 3]);
    }

    #[test]
    fn rejects_non_integral_output() {
        let err = ConvGeometry::new(&[1, 1, 16, 16], &[1, 1, 3, 3], 2, 1).unwrap_err();
        assert!(err.to_string().contains("non-integral"), "{err}");
    }

    #[test]
    fn rejects_oversized_kernel() {
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 1).is_ok());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new(&[2, 2, 5, 4], &[1, 2, 3, 2], 1, 1).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let cols = g.im2col(&x);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
