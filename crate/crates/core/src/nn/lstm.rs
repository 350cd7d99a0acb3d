use rand::Rng;

use super::gemm::{matmul, MatRef};
use super::{glorot_fill, seq_dims, NnError};
use crate::tensor::Tensor;

/// Long short-term memory layer.
///
/// Weights are stacked by gate in the fixed order input, forget, cell, output:
/// `w_ih` is `[4H × C_in]`, `w_hh` is `[4H × H]`, `bias` is `[4H]`. The checkpoint
/// format relies on this order.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmOutput {
    /// `[H × T]` for a single sequence, `[H × N × T]` for a batch.
    pub hidden: Tensor,
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Vec<f64>,
    n: usize,
    t: usize,
    rank: usize,
    // per step, [H × N]; index 0 holds the initial state
    hs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    // per step, activated gates [4H × N] and tanh(c_t) [H × N]
    gates: Vec<Vec<f64>>,
    tanh_c: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn new(w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Result<Self, NnError> {
        for (what, t) in [("w_ih", &w_ih), ("w_hh", &w_hh)] {
            if t.rank() != 2 {
                return Err(NnError::Rank {
                    layer: "lstm",
                    what,
                    expected: "2",
                    actual: t.rank(),
                });
            }
        }
        let rows = w_ih.dims()[0];
        if !rows.is_multiple_of(4) {
            return Err(NnError::Shape {
                layer: "lstm",
                dim: "w_ih rows (4H)",
                expected: rows.next_multiple_of(4),
                actual: rows,
            });
        }
        let h = rows / 4;
        if w_hh.dims() != [4 * h, h] {
            return Err(NnError::Shape {
                layer: "lstm",
                dim: "w_hh elements (4H·H)",
                expected: 4 * h * h,
                actual: w_hh.len(),
            });
        }
        if bias.dims() != [4 * h] {
            return Err(NnError::Shape {
                layer: "lstm",
                dim: "bias length (4H)",
                expected: 4 * h,
                actual: bias.len(),
            });
        }
        Ok(Self { w_ih, w_hh, bias })
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, in_channels]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Glorot-uniform weights, zero bias except the forget gate, which starts at `forget_bias`.
    pub fn glorot<R: Rng + ?Sized>(
        in_channels: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(in_channels, hidden);
        glorot_fill(layer.w_ih.values_mut(), in_channels, 4 * hidden, rng);
        glorot_fill(layer.w_hh.values_mut(), hidden, 4 * hidden, rng);
        layer.bias.values_mut()[hidden..2 * hidden].fill(forget_bias);
        layer
    }

    pub fn param_count(in_channels: usize, hidden: usize) -> usize {
        4 * hidden * (in_channels + hidden) + 4 * hidden
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.dims()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.w_ih.dims()[1]
    }

    pub fn w_ih(&self) -> &Tensor {
        &self.w_ih
    }

    pub fn w_hh(&self) -> &Tensor {
        &self.w_hh
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn w_ih_mut(&mut self) -> &mut Tensor {
        &mut self.w_ih
    }

    pub fn w_hh_mut(&mut self) -> &mut Tensor {
        &mut self.w_hh
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    pub fn forward(
        &self,
        input: &Tensor,
        h0: Option<&Tensor>,
        c0: Option<&Tensor>,
    ) -> Result<LstmOutput, NnError> {
        Ok(self.forward_cached(input, h0, c0)?.0)
    }

    pub fn forward_cached(
        &self,
        input: &Tensor,
        h0: Option<&Tensor>,
        c0: Option<&Tensor>,
    ) -> Result<(LstmOutput, LstmCache), NnError> {
        let (c_in, n, t_len) = seq_dims(input, "lstm")?;
        if c_in != self.in_channels() {
            return Err(NnError::Shape {
                layer: "lstm",
                dim: "input channels (C_in)",
                expected: self.in_channels(),
                actual: c_in,
            });
        }
        let h = self.hidden_size();
        let state = |s: Option<&Tensor>, dim: &'static str| -> Result<Vec<f64>, NnError> {
            match s {
                None => Ok(vec![0.0; h * n]),
                Some(t) if t.len() == h * n => Ok(t.values().to_vec()),
                Some(t) => Err(NnError::Shape {
                    layer: "lstm",
                    dim,
                    expected: h * n,
                    actual: t.len(),
                }),
            }
        };
        let h_init = state(h0, "initial hidden state length (H·N)")?;
        let c_init = state(c0, "initial cell state length (H·N)")?;

        let x = input.values();
        let mut hs = Vec::with_capacity(t_len + 1);
        let mut cs = Vec::with_capacity(t_len + 1);
        let mut gates = Vec::with_capacity(t_len);
        let mut tanh_c = Vec::with_capacity(t_len);
        hs.push(h_init);
        cs.push(c_init);

        let w_ih = MatRef::row_major(self.w_ih.values(), 4 * h, c_in);
        let w_hh = MatRef::row_major(self.w_hh.values(), 4 * h, h);
        let hn = h * n;
        for t in 0..t_len {
            let mut z = vec![0.0; 4 * hn];
            let x_t = MatRef::strided(&x[t..], c_in, n, n * t_len, t_len);
            matmul(w_ih, x_t, &mut z, false);
            matmul(w_hh, MatRef::row_major(&hs[t], h, n), &mut z, true);
            for (row, b) in z.chunks_exact_mut(n).zip(self.bias.values()) {
                row.iter_mut().for_each(|v| *v += b);
            }
            let (ifo_a, rest) = z.split_at_mut(2 * hn);
            let (g_a, o_a) = rest.split_at_mut(hn);
            ifo_a.iter_mut().for_each(|v| *v = sigmoid(*v));
            g_a.iter_mut().for_each(|v| *v = v.tanh());
            o_a.iter_mut().for_each(|v| *v = sigmoid(*v));

            let c_prev = &cs[t];
            let mut c_new = vec![0.0; hn];
            let mut tc = vec![0.0; hn];
            let mut h_new = vec![0.0; hn];
            for idx in 0..hn {
                let (ig, fg, gg, og) = (z[idx], z[hn + idx], z[2 * hn + idx], z[3 * hn + idx]);
                let c = fg * c_prev[idx] + ig * gg;
                let th = c.tanh();
                c_new[idx] = c;
                tc[idx] = th;
                h_new[idx] = og * th;
            }
            gates.push(z);
            tanh_c.push(tc);
            cs.push(c_new);
            hs.push(h_new);
        }

        let mut hidden = vec![0.0; hn * t_len];
        for (t, h_t) in hs[1..].iter().enumerate() {
            for (idx, v) in h_t.iter().enumerate() {
                hidden[idx * t_len + t] = *v;
            }
        }
        let (hidden_dims, state_dims) = if input.rank() == 2 {
            (vec![h, t_len], vec![h])
        } else {
            (vec![h, n, t_len], vec![h, n])
        };
        let output = LstmOutput {
            hidden: Tensor::from_raw(hidden_dims, hidden),
            h: Tensor::from_raw(state_dims.clone(), hs[t_len].clone()),
            c: Tensor::from_raw(state_dims, cs[t_len].clone()),
        };
        let cache = LstmCache {
            x: x.to_vec(),
            n,
            t: t_len,
            rank: input.rank(),
            hs,
            cs,
            gates,
            tanh_c,
        };
        Ok((output, cache))
    }

    /// Backpropagation through time given the gradient on the hidden sequence.
    pub fn backward(&self, cache: &LstmCache, d_hidden: &Tensor) -> Result<LstmGrads, NnError> {
        let h = self.hidden_size();
        let c_in = self.in_channels();
        let (n, t_len) = (cache.n, cache.t);
        let hn = h * n;
        if cache.x.len() != c_in * n * t_len || cache.hs.first().map(Vec::len) != Some(hn) {
            return Err(NnError::CacheMismatch {
                expected: "lstm cache for this layer's shape",
                found: "lstm cache of another shape",
            });
        }
        if d_hidden.len() != hn * t_len {
            return Err(NnError::Shape {
                layer: "lstm",
                dim: "upstream gradient length (H·N·T)",
                expected: hn * t_len,
                actual: d_hidden.len(),
            });
        }
        let up = d_hidden.values();

        let mut d_w_ih = vec![0.0; 4 * h * c_in];
        let mut d_w_hh = vec![0.0; 4 * h * h];
        let mut d_bias = vec![0.0; 4 * h];
        let mut d_input = vec![0.0; c_in * n * t_len];
        let mut dh_next = vec![0.0; hn];
        let mut dc_next = vec![0.0; hn];
        let mut dz = vec![0.0; 4 * hn];
        let mut dx_t = vec![0.0; c_in * n];

        for t in (0..t_len).rev() {
            let a = &cache.gates[t];
            let tc = &cache.tanh_c[t];
            let c_prev = &cache.cs[t];
            for idx in 0..hn {
                let dh = up[idx * t_len + t] + dh_next[idx];
                let (ig, fg, gg, og) = (a[idx], a[hn + idx], a[2 * hn + idx], a[3 * hn + idx]);
                let th = tc[idx];
                let d_o = dh * th;
                let dc = dc_next[idx] + dh * og * (1.0 - th * th);
                let d_i = dc * gg;
                let d_g = dc * ig;
                let d_f = dc * c_prev[idx];
                dc_next[idx] = dc * fg;
                dz[idx] = d_i * ig * (1.0 - ig);
                dz[hn + idx] = d_f * fg * (1.0 - fg);
                dz[2 * hn + idx] = d_g * (1.0 - gg * gg);
                dz[3 * hn + idx] = d_o * og * (1.0 - og);
            }
            let dz_m = MatRef::row_major(&dz, 4 * h, n);
            let x_t = MatRef::strided(&cache.x[t..], c_in, n, n * t_len, t_len);
            matmul(dz_m, x_t.t(), &mut d_w_ih, true);
            matmul(dz_m, MatRef::row_major(&cache.hs[t], h, n).t(), &mut d_w_hh, true);
            for (db, row) in d_bias.iter_mut().zip(dz.chunks_exact(n)) {
                *db += row.iter().sum::<f64>();
            }
            matmul(
                MatRef::row_major(self.w_ih.values(), 4 * h, c_in).t(),
                dz_m,
                &mut dx_t,
                false,
            );
            for (idx, v) in dx_t.iter().enumerate() {
                d_input[idx * t_len + t] = *v;
            }
            matmul(
                MatRef::row_major(self.w_hh.values(), 4 * h, h).t(),
                dz_m,
                &mut dh_next,
                false,
            );
        }

        let input_dims = if cache.rank == 2 {
            vec![c_in, t_len]
        } else {
            vec![c_in, n, t_len]
        };
        Ok(LstmGrads {
            w_ih: Tensor::from_raw(self.w_ih.dims().to_vec(), d_w_ih),
            w_hh: Tensor::from_raw(self.w_hh.dims().to_vec(), d_w_hh),
            bias: Tensor::from_raw(vec![4 * h], d_bias),
            input: Tensor::from_raw(input_dims, d_input),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line single-step gate equations, written independently of the layer.
    fn one_step_oracle(w_ih: &[f64], w_hh: &[f64], b: &[f64], x: &[f64], h0: &[f64], c0: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = h0.len();
        let c = x.len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pre = |row: usize| -> f64 {
            let mut s = b[row];
            for j in 0..c {
                s += w_ih[row * c + j] * x[j];
            }
            for j in 0..h {
                s += w_hh[row * h + j] * h0[j];
            }
            s
        };
        let mut h1 = vec![0.0; h];
        let mut c1 = vec![0.0; h];
        for u in 0..h {
            let i = sig(pre(u));
            let f = sig(pre(h + u));
            let g = pre(2 * h + u).tanh();
            let o = sig(pre(3 * h + u));
            c1[u] = f * c0[u] + i * g;
            h1[u] = o * c1[u].tanh();
        }
        (h1, c1)
    }

    #[test]
    fn zero_parameters_give_zero_hidden_states() {
        let lstm = Lstm::zeros(3, 4);
        let input = Tensor::new(vec![3, 5], (0..15).map(|v| v as f64 - 7.0).collect()).unwrap();
        let out = lstm.forward(&input, None, None).unwrap();
        assert!(out.hidden.values().iter().all(|&v| v == 0.0));
        assert!(out.c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lstm = Lstm::glorot(3, 4, 1.0, &mut rng);
        let x = [0.4, -1.2, 0.7];
        let h0 = [0.1, -0.2, 0.3, 0.05];
        let c0 = [0.5, 0.0, -0.4, 0.9];
        let out = lstm
            .forward(
                &Tensor::new(vec![3, 1], x.to_vec()).unwrap(),
                Some(&Tensor::new(vec![4], h0.to_vec()).unwrap()),
                Some(&Tensor::new(vec![4], c0.to_vec()).unwrap()),
            )
            .unwrap();
        let (h1, c1) = one_step_oracle(
            lstm.w_ih().values(),
            lstm.w_hh().values(),
            lstm.bias().values(),
            &x,
            &h0,
            &c0,
        );
        for (a, b) in out.h.values().iter().zip(&h1) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in out.c.values().iter().zip(&c1) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(out.hidden.values(), out.h.values());
    }

    #[test]
    fn output_shape_and_final_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lstm = Lstm::glorot(2, 3, 1.0, &mut rng);
        let input = Tensor::new(vec![2, 6], (0..12).map(|v| (v as f64).cos()).collect()).unwrap();
        let out = lstm.forward(&input, None, None).unwrap();
        assert_eq!(out.hidden.dims(), &[3, 6]);
        for u in 0..3 {
            assert_eq!(out.hidden.values()[u * 6 + 5], out.h.values()[u]);
        }
    }

    #[test]
    fn forget_bias_is_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = Lstm::glorot(2, 3, 1.0, &mut rng);
        let b = lstm.bias().values();
        assert!(b[..3].iter().all(|&v| v == 0.0));
        assert!(b[3..6].iter().all(|&v| v == 1.0));
        assert!(b[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_state_shape() {
        let lstm = Lstm::zeros(2, 3);
        let err = lstm
            .forward(&Tensor::zeros(&[2, 4]), Some(&Tensor::zeros(&[2])), None)
            .unwrap_err();
        assert!(err.to_string().contains("hidden state"), "{err}");
    }
}
