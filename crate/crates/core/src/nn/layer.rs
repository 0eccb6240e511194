use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Identity,
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow for large `v`.
#[inline]
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Softplus => softplus(v),
            Activation::Identity => v,
        }
    }

    /// Derivative given the pre-activation and the already computed output.
    #[inline]
    pub fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Softplus => sigmoid(pre),
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `y = act(x · Wᵀ + b)`; weights are `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    pub pre: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weight: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 2] {
        [self.weight.data(), &self.bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.data_mut(), &mut self.bias]
    }
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape {
                op: "DenseLayer::new",
                left: weights.shape(),
                right: (bias.len(), 1),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// He-style uniform init (std `sqrt(2 / fan_in)`), zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weights: Matrix::from_vec(out_dim, in_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    /// Weight block then bias block.
    pub fn blocks(&self) -> [&[f64]; 2] {
        [self.weights.data(), &self.bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.data_mut(), &mut self.bias]
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &Matrix) -> Result<LayerCache> {
        if input.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "dense_forward",
                left: input.shape(),
                right: self.weights.shape(),
            });
        }
        let mut pre = input.matmul_transposed(&self.weights)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let act = self.activation;
        let output = pre.map(|v| act.apply(v));
        Ok(LayerCache {
            input: input.clone(),
            pre,
            output,
        })
    }

    /// Returns `(input_grad, param_grads)` for `upstream = dL/d(output)`.
    pub fn backward(&self, cache: &LayerCache, upstream: &Matrix) -> Result<(Matrix, LayerGrads)> {
        if upstream.shape() != cache.output.shape() {
            return Err(Error::Shape {
                op: "dense_backward",
                left: upstream.shape(),
                right: cache.output.shape(),
            });
        }
        let act = self.activation;
        let mut d_pre = upstream.clone();
        for ((g, &p), &o) in d_pre
            .data_mut()
            .iter_mut()
            .zip(cache.pre.data())
            .zip(cache.output.data())
        {
            *g *= act.derivative(p, o);
        }
        let weight = d_pre.transposed_matmul(&cache.input)?;
        let bias = d_pre.column_sums();
        let input_grad = d_pre.matmul(&self.weights)?;
        Ok((input_grad, LayerGrads { weight, bias }))
    }
}

/// A feed-forward chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    layers: Vec<DenseLayer>,
}

impl Stack {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "Stack::new",
                    left: pair[0].weights.shape(),
                    right: pair[1].weights.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Builds `dims[0] → dims[1] → …` with one activation per layer.
    pub fn he_uniform<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert_eq!(
            dims.len(),
            activations.len() + 1,
            "one activation per layer"
        );
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| DenseLayer::he_uniform(d[0], d[1], a, rng))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Matrix) -> Result<Vec<LayerCache>> {
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = caches.last().map_or(input, |c| &c.output);
            let c = l.forward_cached(x)?;
            caches.push(c);
        }
        Ok(caches)
    }

    pub fn backward(
        &self,
        caches: &[LayerCache],
        upstream: &Matrix,
    ) -> Result<(Matrix, Vec<LayerGrads>)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (l, c) in self.layers.iter().zip(caches).rev() {
            let (gi, lg) = l.backward(c, &g)?;
            grads.push(lg);
            g = gi;
        }
        grads.reverse();
        Ok((g, grads))
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.blocks()).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.blocks_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: &[f64], rows: usize, cols: usize, b: &[f64], a: Activation) -> DenseLayer {
        DenseLayer::new(
            Matrix::from_vec(rows, cols, w.to_vec()).unwrap(),
            b.to_vec(),
            a,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let l = DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let l = layer(&[1.0], 1, 1, &[-2.0], Activation::Relu);
        let y = l
            .forward(&Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let l = layer(&[0.0], 1, 1, &[0.0], Activation::Sigmoid);
        let y = l
            .forward(&Matrix::from_vec(1, 1, vec![5.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let l = layer(&[1.0, 2.0], 1, 2, &[0.0], Activation::Identity);
        let err = l.forward(&Matrix::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn linear_derivative() {
        let w = 0.7;
        let l = layer(&[w], 1, 1, &[0.0], Activation::Identity);
        let c = l
            .forward_cached(&Matrix::from_vec(1, 1, vec![3.0]).unwrap())
            .unwrap();
        let (gi, g) = l
            .backward(&c, &Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(g.weight.data(), &[3.0]);
        assert_eq!(g.bias, vec![1.0]);
        assert_eq!(gi.data(), &[w]);
    }

    #[test]
    fn dead_relu_blocks_all_gradients() {
        let l = layer(&[1.0, 1.0], 1, 2, &[-5.0], Activation::Relu);
        let c = l
            .forward_cached(&Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        let (gi, g) = l
            .backward(&c, &Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.bias, vec![0.0]);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let l = layer(&[1.0], 1, 1, &[0.0], Activation::Identity);
        let c = l.forward_cached(&Matrix::zeros(2, 1)).unwrap();
        assert!(l.backward(&c, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Stack::he_uniform(
            &[5, 7, 3],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        let x = Matrix::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let a = s.forward(&x).unwrap();
        let b = s.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
