use rand::Rng;

use super::{Activation, LayerParams, ParamGrads};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::tensor::Tensor;

/// Fully connected layer, weights `[out, in]`. Any input shape whose
/// element count equals `inputs` is accepted and treated as flat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Tensor,
    output: Tensor,
}

impl DenseCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Dense {
    pub fn init_params<R: Rng + ?Sized>(&self, name: &str, rng: &mut R) -> LayerParams {
        LayerParams::glorot(
            name,
            &[self.outputs, self.inputs],
            self.outputs,
            self.inputs,
            self.outputs,
            rng,
        )
    }

    fn check(&self, input: &Tensor, params: &LayerParams) -> Result<()> {
        params
            .weights
            .expect_shape("dense weights", &[self.outputs, self.inputs])?;
        params.biases.expect_shape("dense biases", &[self.outputs])?;
        if input.len() != self.inputs {
            return Err(Error::shape("dense input", &[self.inputs], input.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, params: &LayerParams) -> Result<Tensor> {
        self.check(input, params)?;
        let w = params.weights.data();
        let x = input.data();
        let out = params
            .biases
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| {
                self.activation
                    .apply(b + dot(&w[o * self.inputs..(o + 1) * self.inputs], x))
            })
            .collect();
        Tensor::new(&[self.outputs], out)
    }

    pub fn forward_cached(&self, input: &Tensor, params: &LayerParams) -> Result<DenseCache> {
        let output = self.forward(input, params)?;
        Ok(DenseCache {
            input: input.clone(),
            output,
        })
    }

    pub fn backward_cached(
        &self,
        params: &LayerParams,
        cache: &DenseCache,
        upstream: &Tensor,
        grads: &mut ParamGrads,
    ) -> Result<Tensor> {
        upstream.expect_shape("dense upstream gradient", &[self.outputs])?;
        let x = cache.input.data();
        let w = params.weights.data();
        let mut dx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let d = upstream.data()[o] * self.activation.derivative_from_output(cache.output.data()[o]);
            if d == 0.0 {
                continue;
            }
            grads.biases[o] += d;
            let gw = &mut grads.weights[o * self.inputs..(o + 1) * self.inputs];
            let wr = &w[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                gw[i] += d * x[i];
                dx[i] += d * wr[i];
            }
        }
        Tensor::new(cache.input.shape(), dx)
    }
}

pub fn dense_forward(dense: &Dense, input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    dense.forward(input, params)
}

pub fn dense_backward(
    dense: &Dense,
    input: &Tensor,
    params: &mut LayerParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    let cache = dense.forward_cached(input, params)?;
    let mut grads = std::mem::replace(&mut params.grads, ParamGrads { weights: vec![], biases: vec![] });
    let out = dense.backward_cached(params, &cache, upstream, &mut grads);
    params.grads = grads;
    out
}
