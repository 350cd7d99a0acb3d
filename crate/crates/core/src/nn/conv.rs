use rand::Rng;

use super::gemm::{matmul, MatRef};
use super::{glorot_fill, seq_dims, NnError};
use crate::tensor::Tensor;

/// One-dimensional convolution along the time axis, valid padding, stride 1.
///
/// `kernel` is `[C_out × C_in × K]`, `bias` is `[C_out]`. Inputs are either a
/// single sequence `[C_in × T]` or a batch `[C_in × N × T]`; the output keeps the
/// input's rank with `T' = T − K + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    kernel: Tensor,
    bias: Tensor,
}

/// State saved by [`Conv1d::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    n: usize,
    t_in: usize,
    rank: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

impl Conv1d {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self, NnError> {
        if kernel.rank() != 3 {
            return Err(NnError::Rank {
                layer: "conv1d",
                what: "kernel",
                expected: "3",
                actual: kernel.rank(),
            });
        }
        if bias.dims() != [kernel.dims()[0]] {
            return Err(NnError::Shape {
                layer: "conv1d",
                dim: "bias length (C_out)",
                expected: kernel.dims()[0],
                actual: bias.len(),
            });
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[out_channels, in_channels, kernel_size]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    /// Glorot-uniform kernel, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, kernel_size);
        glorot_fill(
            layer.kernel.values_mut(),
            in_channels * kernel_size,
            out_channels * kernel_size,
            rng,
        );
        layer
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel_size: usize) -> usize {
        out_channels * in_channels * kernel_size + out_channels
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor {
        &mut self.kernel
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.kernel, &mut self.bias]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, ConvCache), NnError> {
        let (c_in, n, t_in) = seq_dims(input, "conv1d")?;
        if c_in != self.in_channels() {
            return Err(NnError::Shape {
                layer: "conv1d",
                dim: "input channels (C_in)",
                expected: self.in_channels(),
                actual: c_in,
            });
        }
        let k = self.kernel_size();
        if t_in < k {
            return Err(NnError::WindowTooShort { length: t_in, kernel: k });
        }
        let t_out = t_in - k + 1;
        let c_out = self.out_channels();
        let x = input.values();

        let ck = c_in * k;
        let width = n * t_out;
        let mut cols = vec![0.0; ck * width];
        for ci in 0..c_in {
            for kk in 0..k {
                let row = &mut cols[(ci * k + kk) * width..(ci * k + kk + 1) * width];
                for s in 0..n {
                    let src = &x[ci * n * t_in + s * t_in + kk..][..t_out];
                    row[s * t_out..(s + 1) * t_out].copy_from_slice(src);
                }
            }
        }

        let mut out = vec![0.0; c_out * width];
        matmul(
            MatRef::row_major(self.kernel.values(), c_out, ck),
            MatRef::row_major(&cols, ck, width),
            &mut out,
            false,
        );
        for (row, b) in out.chunks_exact_mut(width).zip(self.bias.values()) {
            row.iter_mut().for_each(|v| *v += b);
        }

        let dims = if input.rank() == 2 {
            vec![c_out, t_out]
        } else {
            vec![c_out, n, t_out]
        };
        let cache = ConvCache {
            cols,
            n,
            t_in,
            rank: input.rank(),
        };
        Ok((Tensor::from_raw(dims, out), cache))
    }

    pub fn backward(&self, cache: &ConvCache, upstream: &Tensor) -> Result<ConvGrads, NnError> {
        let (c_out, k, c_in) = (self.out_channels(), self.kernel_size(), self.in_channels());
        let (n, t_in) = (cache.n, cache.t_in);
        let t_out = t_in - k + 1;
        let width = n * t_out;
        let ck = c_in * k;
        if cache.cols.len() != ck * width {
            return Err(NnError::CacheMismatch {
                expected: "conv1d cache for this layer's shape",
                found: "conv1d cache of another shape",
            });
        }
        if upstream.len() != c_out * width {
            return Err(NnError::Shape {
                layer: "conv1d",
                dim: "upstream gradient length (C_out·N·T')",
                expected: c_out * width,
                actual: upstream.len(),
            });
        }
        let dy = upstream.values();

        let mut d_kernel = vec![0.0; c_out * ck];
        matmul(
            MatRef::row_major(dy, c_out, width),
            MatRef::row_major(&cache.cols, ck, width).t(),
            &mut d_kernel,
            false,
        );
        let d_bias: Vec<f64> = dy.chunks_exact(width).map(|row| row.iter().sum()).collect();

        let mut d_cols = vec![0.0; ck * width];
        matmul(
            MatRef::row_major(self.kernel.values(), c_out, ck).t(),
            MatRef::row_major(dy, c_out, width),
            &mut d_cols,
            false,
        );
        let mut d_input = vec![0.0; c_in * n * t_in];
        for ci in 0..c_in {
            for kk in 0..k {
                let row = &d_cols[(ci * k + kk) * width..(ci * k + kk + 1) * width];
                for s in 0..n {
                    let dst = &mut d_input[ci * n * t_in + s * t_in + kk..][..t_out];
                    for (d, g) in dst.iter_mut().zip(&row[s * t_out..(s + 1) * t_out]) {
                        *d += g;
                    }
                }
            }
        }

        let input_dims = if cache.rank == 2 {
            vec![c_in, t_in]
        } else {
            vec![c_in, n, t_in]
        };
        Ok(ConvGrads {
            kernel: Tensor::from_raw(self.kernel.dims().to_vec(), d_kernel),
            bias: Tensor::from_raw(vec![c_out], d_bias),
            input: Tensor::from_raw(input_dims, d_input),
        })
    }
}
