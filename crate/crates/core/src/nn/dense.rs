use rand::Rng;

use super::gemm::{matmul, MatRef};
use super::{glorot_fill, Activation, NnError};
use crate::tensor::Tensor;

/// Fully connected layer `y = act(W·x + b)` with `W` of shape `[D_out × D_in]`.
///
/// Accepts a single vector `[D_in]` or a batch of column vectors `[D_in × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Vec<f64>,
    output: Vec<f64>,
    n: usize,
    rank: usize,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self, NnError> {
        if weight.rank() != 2 {
            return Err(NnError::Rank {
                layer: "dense",
                what: "weight",
                expected: "2",
                actual: weight.rank(),
            });
        }
        if bias.dims() != [weight.dims()[0]] {
            return Err(NnError::Shape {
                layer: "dense",
                dim: "bias length (D_out)",
                expected: weight.dims()[0],
                actual: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
            activation,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        glorot_fill(layer.weight.values_mut(), in_dim, out_dim, rng);
        layer
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, DenseCache), NnError> {
        let (d_in, n) = match input.dims() {
            [d] => (*d, 1),
            [d, n] => (*d, *n),
            _ => {
                return Err(NnError::Rank {
                    layer: "dense",
                    what: "input",
                    expected: "1 or 2",
                    actual: input.rank(),
                })
            }
        };
        if d_in != self.in_dim() {
            return Err(NnError::Shape {
                layer: "dense",
                dim: "input features (D_in)",
                expected: self.in_dim(),
                actual: d_in,
            });
        }
        let d_out = self.out_dim();
        let mut out = vec![0.0; d_out * n];
        matmul(
            MatRef::row_major(self.weight.values(), d_out, d_in),
            MatRef::row_major(input.values(), d_in, n),
            &mut out,
            false,
        );
        for (row, b) in out.chunks_exact_mut(n).zip(self.bias.values()) {
            row.iter_mut().for_each(|v| *v = self.activation.apply(*v + b));
        }
        let dims = if input.rank() == 1 {
            vec![d_out]
        } else {
            vec![d_out, n]
        };
        let cache = DenseCache {
            input: input.values().to_vec(),
            output: out.clone(),
            n,
            rank: input.rank(),
        };
        Ok((Tensor::from_raw(dims, out), cache))
    }

    pub fn backward(&self, cache: &DenseCache, upstream: &Tensor) -> Result<DenseGrads, NnError> {
        let (d_in, d_out, n) = (self.in_dim(), self.out_dim(), cache.n);
        if cache.input.len() != d_in * n || cache.output.len() != d_out * n {
            return Err(NnError::CacheMismatch {
                expected: "dense cache for this layer's shape",
                found: "dense cache of another shape",
            });
        }
        if upstream.len() != d_out * n {
            return Err(NnError::Shape {
                layer: "dense",
                dim: "upstream gradient length (D_out·N)",
                expected: d_out * n,
                actual: upstream.len(),
            });
        }
        let dz: Vec<f64> = upstream
            .values()
            .iter()
            .zip(&cache.output)
            .map(|(g, y)| g * self.activation.derivative_from_output(*y))
            .collect();
        let dz_m = MatRef::row_major(&dz, d_out, n);

        let mut d_weight = vec![0.0; d_out * d_in];
        matmul(dz_m, MatRef::row_major(&cache.input, d_in, n).t(), &mut d_weight, false);
        let d_bias: Vec<f64> = dz.chunks_exact(n).map(|r| r.iter().sum()).collect();
        let mut d_input = vec![0.0; d_in * n];
        matmul(
            MatRef::row_major(self.weight.values(), d_out, d_in).t(),
            dz_m,
            &mut d_input,
            false,
        );
        let input_dims = if cache.rank == 1 {
            vec![d_in]
        } else {
            vec![d_in, n]
        };
        Ok(DenseGrads {
            weight: Tensor::from_raw(vec![d_out, d_in], d_weight),
            bias: Tensor::from_raw(vec![d_out], d_bias),
            input: Tensor::from_raw(input_dims, d_input),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.values_mut()[i * 3 + i] = 1.0;
        }
        let layer = Dense::new(w, Tensor::zeros(&[3]), Activation::Identity).unwrap();
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().values(), x.values());
    }

    #[test]
    fn hand_evaluated_affine() {
        let layer = Dense::new(
            Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(vec![1], vec![3.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let out = layer.forward(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(out.values(), &[6.0]);
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let layer = Dense::new(
            Tensor::new(vec![2, 2], vec![-1.0, -2.0, -0.5, -3.0]).unwrap(),
            Tensor::new(vec![2], vec![-0.1, -0.2]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let out = layer.forward(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let layer = Dense::zeros(3, 2, Activation::Identity);
        let err = layer.forward(&Tensor::zeros(&[4])).unwrap_err();
        assert!(err.to_string().contains("D_in"), "{err}");
    }
}
