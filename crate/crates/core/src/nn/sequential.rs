use super::{
    adam_step, AdamConfig, Conv2d, ConvCache, Dense, DenseCache, LayerParams, ParamGrads, Upsample,
};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Node {
    Conv(Conv2d, LayerParams),
    Dense(Dense, LayerParams),
    Reshape(Vec<usize>),
    Upsample(Upsample),
}

impl Node {
    pub fn params(&self) -> Option<&LayerParams> {
        match self {
            Node::Conv(_, p) | Node::Dense(_, p) => Some(p),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LayerParams> {
        match self {
            Node::Conv(_, p) | Node::Dense(_, p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum NodeCache {
    Conv(ConvCache),
    Dense(DenseCache),
    Shape(Vec<usize>),
}

/// Forward caches of a [`Sequential`] pass, in node order.
#[derive(Clone, Debug)]
pub struct SequentialCache {
    nodes: Vec<NodeCache>,
}

/// A feed-forward chain of nodes evaluated in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub nodes: Vec<Node>,
}

impl Sequential {
    pub fn new(nodes: Vec<Node>) -> Self {
        Sequential { nodes }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for node in &self.nodes {
            x = match node {
                Node::Conv(c, p) => c.forward(&x, p)?,
                Node::Dense(d, p) => d.forward(&x, p)?,
                Node::Reshape(shape) => x.reshape(shape)?,
                Node::Upsample(u) => u.forward(&x)?,
            };
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, SequentialCache)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            match node {
                Node::Conv(c, p) => {
                    let cache = c.forward_cached(&x, p)?;
                    x = cache.output().clone();
                    caches.push(NodeCache::Conv(cache));
                }
                Node::Dense(d, p) => {
                    let cache = d.forward_cached(&x, p)?;
                    x = cache.output().clone();
                    caches.push(NodeCache::Dense(cache));
                }
                Node::Reshape(shape) => {
                    caches.push(NodeCache::Shape(x.shape().to_vec()));
                    x = x.reshape(shape)?;
                }
                Node::Upsample(u) => {
                    caches.push(NodeCache::Shape(x.shape().to_vec()));
                    x = u.forward(&x)?;
                }
            }
        }
        Ok((x, SequentialCache { nodes: caches }))
    }

    /// Reverse pass. `grads` holds one entry per parameterized node (see
    /// [`Sequential::zero_grads`]); gradients are accumulated into it.
    pub fn backward(
        &self,
        cache: &SequentialCache,
        upstream: &Tensor,
        grads: &mut [ParamGrads],
    ) -> Result<Tensor> {
        let mut g = upstream.clone();
        let mut slot = grads.len();
        for (node, c) in self.nodes.iter().zip(&cache.nodes).rev() {
            g = match (node, c) {
                (Node::Conv(conv, p), NodeCache::Conv(cc)) => {
                    slot -= 1;
                    conv.backward_cached(p, cc, &g, &mut grads[slot])?
                }
                (Node::Dense(d, p), NodeCache::Dense(dc)) => {
                    slot -= 1;
                    d.backward_cached(p, dc, &g, &mut grads[slot])?
                }
                (Node::Reshape(_), NodeCache::Shape(shape)) => g.reshape(shape)?,
                (Node::Upsample(u), NodeCache::Shape(shape)) => u.backward(shape, &g)?,
                _ => unreachable!("cache does not belong to this network"),
            };
        }
        Ok(g)
    }

    pub fn params(&self) -> impl Iterator<Item = &LayerParams> {
        self.nodes.iter().filter_map(Node::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.nodes.iter_mut().filter_map(Node::params_mut)
    }

    pub fn zero_grads(&self) -> Vec<ParamGrads> {
        self.params().map(ParamGrads::zeros_like).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map(LayerParams::parameter_count).sum()
    }

    /// Adds `scale * grads` into each layer's accumulator and takes one
    /// Adam step.
    pub fn apply_gradients(&mut self, grads: &[ParamGrads], scale: f64, adam: &AdamConfig) -> Result<()> {
        for (p, g) in self.params_mut().zip(grads) {
            for (a, b) in p.grads.weights.iter_mut().zip(&g.weights) {
                *a += scale * b;
            }
            for (a, b) in p.grads.biases.iter_mut().zip(&g.biases) {
                *a += scale * b;
            }
            adam_step(p, adam)?;
        }
        Ok(())
    }
}
