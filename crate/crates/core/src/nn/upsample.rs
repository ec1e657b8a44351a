use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nearest-neighbour 2x upsampling of `[C, H, W]`, cropped to
/// `rows × cols` (which lets odd spatial sizes round-trip through stride-2
/// encoders).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Upsample {
    pub rows: usize,
    pub cols: usize,
}

impl Upsample {
    fn dims(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        match *input.shape() {
            [c, h, w] if self.rows <= 2 * h && self.cols <= 2 * w => Ok((c, h, w)),
            _ => Err(Error::shape(
                "upsample input (2x must cover the target)",
                &[0, self.rows.div_ceil(2), self.cols.div_ceil(2)],
                input.shape(),
            )),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.dims(input)?;
        let x = input.data();
        let mut out = Vec::with_capacity(c * self.rows * self.cols);
        for ci in 0..c {
            for i in 0..self.rows {
                let src = &x[(ci * h + i / 2) * w..(ci * h + i / 2 + 1) * w];
                out.extend((0..self.cols).map(|j| src[j / 2]));
            }
        }
        Tensor::new(&[c, self.rows, self.cols], out)
    }

    pub fn backward(&self, input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        upstream.expect_shape("upsample upstream gradient", &[c, self.rows, self.cols])?;
        let g = upstream.data();
        let mut dx = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    dx[(ci * h + i / 2) * w + j / 2] += g[(ci * self.rows + i) * self.cols + j];
                }
            }
        }
        Tensor::new(input_shape, dx)
    }
}
