use rand::Rng;

use super::{Activation, LayerParams, ParamGrads};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::tensor::Tensor;

/// 2D convolution over `[C, H, W]` inputs with square kernels and
/// symmetric zero padding. Weights are `[C_out, C_in, K, K]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

/// What the reverse pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    input_shape: [usize; 3],
    cols: Vec<f64>,
    output: Tensor,
}

impl ConvCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Conv2d {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, name: &str, rng: &mut R) -> LayerParams {
        let k2 = self.kernel * self.kernel;
        LayerParams::glorot(
            name,
            &self.weight_shape(),
            self.out_channels,
            self.in_channels * k2,
            self.out_channels * k2,
            rng,
        )
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.kernel > ph || self.kernel > pw || self.stride == 0 {
            return Err(Error::shape(
                "conv2d kernel vs padded input",
                &[self.kernel, self.kernel],
                &[ph, pw],
            ));
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    fn check(&self, input: &Tensor, params: &LayerParams) -> Result<[usize; 3]> {
        params
            .weights
            .expect_shape("conv2d weights", &self.weight_shape())?;
        params.biases.expect_shape("conv2d biases", &[self.out_channels])?;
        match *input.shape() {
            [c, h, w] if c == self.in_channels => Ok([c, h, w]),
            _ => Err(Error::shape(
                "conv2d input [C_in, H, W]",
                &[self.in_channels, 0, 0],
                input.shape(),
            )),
        }
    }

    /// Unfolds the padded input into `[C_in*K*K, H'*W']`.
    fn im2col(&self, input: &[f64], [c, h, w]: [usize; 3], ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel;
        let npos = ho * wo;
        let mut cols = vec![0.0; c * k * k * npos];
        for ci in 0..c {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[oi * wo + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], [c, h, w]: [usize; 3], ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel;
        let npos = ho * wo;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = ci * h * w + ii as usize * w;
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                out[base + jj as usize] += src[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &Tensor, params: &LayerParams) -> Result<Tensor> {
        Ok(self.forward_cached(input, params)?.output)
    }

    pub fn forward_cached(&self, input: &Tensor, params: &LayerParams) -> Result<ConvCache> {
        let shape = self.check(input, params)?;
        let (ho, wo) = self.output_hw(shape[1], shape[2])?;
        let cols = self.im2col(input.data(), shape, ho, wo);
        let npos = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![0.0; self.out_channels * npos];
        for (co, b) in params.biases.data().iter().enumerate() {
            out[co * npos..(co + 1) * npos].fill(*b);
        }
        gemm(
            Op::N,
            Op::N,
            self.out_channels,
            npos,
            kdim,
            1.0,
            params.weights.data(),
            &cols,
            1.0,
            &mut out,
        );
        let act = self.activation;
        out.iter_mut().for_each(|v| *v = act.apply(*v));
        Ok(ConvCache {
            input_shape: shape,
            cols,
            output: Tensor::new(&[self.out_channels, ho, wo], out)?,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward_cached(
        &self,
        params: &LayerParams,
        cache: &ConvCache,
        upstream: &Tensor,
        grads: &mut ParamGrads,
    ) -> Result<Tensor> {
        upstream.expect_shape("conv2d upstream gradient", cache.output.shape())?;
        let [_, ho, wo] = [cache.output.shape()[0], cache.output.shape()[1], cache.output.shape()[2]];
        let npos = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let act = self.activation;
        let dpre: Vec<f64> = upstream
            .data()
            .iter()
            .zip(cache.output.data())
            .map(|(g, y)| g * act.derivative_from_output(*y))
            .collect();
        gemm(
            Op::N,
            Op::T,
            self.out_channels,
            kdim,
            npos,
            1.0,
            &dpre,
            &cache.cols,
            1.0,
            &mut grads.weights,
        );
        for co in 0..self.out_channels {
            grads.biases[co] += dpre[co * npos..(co + 1) * npos].iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kdim * npos];
        gemm(
            Op::T,
            Op::N,
            kdim,
            npos,
            self.out_channels,
            1.0,
            params.weights.data(),
            &dpre,
            0.0,
            &mut dcols,
        );
        let dx = self.col2im(&dcols, cache.input_shape, ho, wo);
        Tensor::new(&cache.input_shape, dx)
    }
}

pub fn conv2d_forward(conv: &Conv2d, input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    conv.forward(input, params)
}

/// Recomputes the forward pass, writes parameter gradients into
/// `params.grads` and returns the input gradient.
pub fn conv2d_backward(
    conv: &Conv2d,
    input: &Tensor,
    params: &mut LayerParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    let cache = conv.forward_cached(input, params)?;
    let mut grads = std::mem::replace(&mut params.grads, ParamGrads { weights: vec![], biases: vec![] });
    let out = conv.backward_cached(params, &cache, upstream, &mut grads);
    params.grads = grads;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, act: Activation) -> Conv2d {
        Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding,
            activation: act,
        }
    }

    /// Direct summation, no unfolding.
    fn naive_conv(c: &Conv2d, x: &Tensor, p: &LayerParams) -> Tensor {
        let [ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let (ho, wo) = c.output_hw(h, w).unwrap();
        let k = c.kernel;
        let mut out = vec![0.0; c.out_channels * ho * wo];
        for co in 0..c.out_channels {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut s = p.biases.data()[co];
                    for cc in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * c.stride + ki) as isize - c.padding as isize;
                                let jj = (oj * c.stride + kj) as isize - c.padding as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += p.weights.data()[((co * ci + cc) * k + ki) * k + kj]
                                        * x.data()[(cc * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oi) * wo + oj] = c.activation.apply(s);
                }
            }
        }
        Tensor::new(&[c.out_channels, ho, wo], out).unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let c = conv(1, 1, 3, 1, 0, Linear);
        let p = LayerParams::zeros("c", &c.weight_shape(), 1);
        let y = c.forward(&Tensor::filled(&[1, 3, 3], 1.0), &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let c = conv(1, 1, 3, 1, 1, Linear);
        let mut p = LayerParams::zeros("c", &c.weight_shape(), 1);
        p.weights.data_mut()[4] = 1.0;
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(c.forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let c = conv(1, 1, 3, 1, 0, Linear);
        let p = LayerParams::new("c", Tensor::filled(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]));
        let y = c.forward(&Tensor::filled(&[1, 4, 4], 1.0), &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[9.0; 4]);
    }

    #[test]
    fn output_shape_formula() {
        let c = conv(1, 2, 3, 2, 1, Relu);
        assert_eq!(c.output_hw(45, 62).unwrap(), (23, 31));
        assert_eq!(c.output_hw(23, 31).unwrap(), (12, 16));
        assert_eq!(c.output_hw(180, 250).unwrap(), (90, 125));
        let big = conv(1, 1, 5, 1, 0, Linear);
        assert!(big.output_hw(3, 3).is_err());
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let c = conv(2, 3, 3, stride, pad, Elu);
            let p = c.init_params("c", &mut rng);
            let x = Tensor::new(&[2, 7, 6], (0..84).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let fast = c.forward(&x, &p).unwrap();
            let slow = naive_conv(&c, &x, &p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let c = conv(2, 1, 3, 1, 1, Linear);
        let p = LayerParams::zeros("c", &c.weight_shape(), 1);
        let err = c.forward(&Tensor::zeros(&[1, 4, 4]), &p).unwrap_err().to_string();
        assert!(err.contains("[2, 0, 0]") && err.contains("[1, 4, 4]"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = conv(1, 2, 3, 1, 1, Relu);
        let mut p = c.init_params("c", &mut rng);
        let x = Tensor::filled(&[1, 4, 4], 0.5);
        let dx = conv2d_backward(&c, &x, &mut p, &Tensor::zeros(&[2, 4, 4])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(p.grads.weights.iter().chain(&p.grads.biases).all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_weight_gradient_is_inner_product() {
        let c = conv(1, 1, 1, 1, 0, Linear);
        let mut p = LayerParams::new("c", Tensor::filled(&[1, 1, 1, 1], 0.7), Tensor::zeros(&[1]));
        let x = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let up = Tensor::new(&[1, 2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5]).unwrap();
        conv2d_backward(&c, &x, &mut p, &up).unwrap();
        let expected: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert!((p.grads.weights[0] - expected).abs() < 1e-14);
        assert!((p.grads.biases[0] - up.data().iter().sum::<f64>()).abs() < 1e-14);
    }

    #[test]
    fn upstream_shape_checked() {
        let c = conv(1, 1, 3, 1, 1, Linear);
        let mut p = LayerParams::zeros("c", &c.weight_shape(), 1);
        assert!(conv2d_backward(&c, &Tensor::zeros(&[1, 4, 4]), &mut p, &Tensor::zeros(&[1, 3, 3])).is_err());
    }
}
