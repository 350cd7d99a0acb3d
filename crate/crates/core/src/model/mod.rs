//! The dual-branch discharge model: a grid-shared conv stack over each grid's
//! 7-day history, mean-pooled across grids, an LSTM stack over the pooled
//! sequence, a target-day branch, and a dense head. CNN-only and LSTM-only
//! baselines drop one of the two sequence blocks.

mod arch;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use arch::{ArchSpec, ConvSpec, FreezeMask, ParamGroup, Variant};
pub use checkpoint::{
    load_checkpoint, read_records, save_checkpoint, CheckpointError, ParamRecord, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::data::{WindowedSample, CHANNELS, WINDOW};
use crate::nn::{relative_error, Activation, Conv1d, ConvCache, Dense, DenseCache, Lstm, LstmCache, NnError};
use crate::tensor::Tensor;

pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("unknown parameter group `{0}` (expected conv, lstm, target_branch or head)")]
    UnknownGroup(String),
    #[error("bad sample batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    seed: u64,
    conv: Vec<Conv1d>,
    lstm: Vec<Lstm>,
    target_branch: Dense,
    head: Vec<Dense>,
}

/// Builds a model with seeded Glorot-uniform weights, drawn in parameter order.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<Model, ModelError> {
    Model::build(arch, seed)
}

/// Forward state of one batch, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ModelCache {
    batch: usize,
    grids: usize,
    conv: Vec<(ConvCache, Vec<f64>)>,
    lstm: Vec<LstmCache>,
    steps: usize,
    target_branch: DenseCache,
    head: Vec<DenseCache>,
}

impl Model {
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = arch.widths();
        let mut c_in = CHANNELS;
        let conv = arch
            .conv
            .iter()
            .map(|c| {
                let layer = Conv1d::glorot(c_in, c.out_channels, c.kernel, &mut rng);
                c_in = c.out_channels;
                layer
            })
            .collect();
        let mut h_in = w.conv_channels;
        let lstm = arch
            .lstm
            .iter()
            .map(|&h| {
                let layer = Lstm::glorot(h_in, h, LSTM_FORGET_BIAS, &mut rng);
                h_in = h;
                layer
            })
            .collect();
        let target_branch = Dense::glorot(CHANNELS, arch.target_branch_units, Activation::Relu, &mut rng);
        let mut d_in = w.head_in;
        let last = arch.head.len() - 1;
        let head = arch
            .head
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                let layer = Dense::glorot(d_in, d, act, &mut rng);
                d_in = d;
                layer
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            seed,
            conv,
            lstm,
            target_branch,
            head,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter names in canonical order, e.g. `conv.0.kernel`, `lstm.0.w_hh`, `head.1.bias`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv.len() {
            names.push(format!("conv.{i}.kernel"));
            names.push(format!("conv.{i}.bias"));
        }
        for i in 0..self.lstm.len() {
            names.push(format!("lstm.{i}.w_ih"));
            names.push(format!("lstm.{i}.w_hh"));
            names.push(format!("lstm.{i}.bias"));
        }
        names.push("target_branch.weight".into());
        names.push("target_branch.bias".into());
        for i in 0..self.head.len() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        names
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::Conv; 2 * self.conv.len()];
        groups.extend(std::iter::repeat_n(ParamGroup::Lstm, 3 * self.lstm.len()));
        groups.extend([ParamGroup::TargetBranch; 2]);
        groups.extend(std::iter::repeat_n(ParamGroup::Head, 2 * self.head.len()));
        groups
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.conv {
            out.extend([c.kernel(), c.bias()]);
        }
        for l in &self.lstm {
            out.extend([l.w_ih(), l.w_hh(), l.bias()]);
        }
        out.extend([self.target_branch.weight(), self.target_branch.bias()]);
        for d in &self.head {
            out.extend([d.weight(), d.bias()]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.conv {
            out.extend(c.tensors_mut());
        }
        for l in &mut self.lstm {
            out.extend(l.tensors_mut());
        }
        out.extend(self.target_branch.tensors_mut());
        for d in &mut self.head {
            out.extend(d.tensors_mut());
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.param_names().into_iter().zip(self.tensors()).collect()
    }

    /// Single normalized discharge prediction.
    pub fn forward(&self, sample: &WindowedSample) -> Result<f64, ModelError> {
        Ok(self.forward_batch(&[sample])?[0])
    }

    pub fn forward_batch(&self, batch: &[&WindowedSample]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_cached(batch)?.0)
    }

    /// Forward pass over a batch drawn from one watershed (equal grid counts).
    pub fn forward_cached(&self, batch: &[&WindowedSample]) -> Result<(Vec<f64>, ModelCache), ModelError> {
        let (b, l) = batch_dims(batch)?;
        let bl = b * l;

        // Sequence block input, [C × N × 7].
        let mut seq = if self.conv.is_empty() {
            let mut x = vec![0.0; CHANNELS * b * WINDOW];
            let scale = 1.0 / l as f64;
            for (s, sample) in batch.iter().enumerate() {
                let h = sample.history.values();
                for g in 0..l {
                    for c in 0..CHANNELS {
                        let src = &h[(g * CHANNELS + c) * WINDOW..][..WINDOW];
                        let dst = &mut x[(c * b + s) * WINDOW..][..WINDOW];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * scale);
                    }
                }
            }
            Tensor::from_raw(vec![CHANNELS, b, WINDOW], x)
        } else {
            let mut x = vec![0.0; CHANNELS * bl * WINDOW];
            for (s, sample) in batch.iter().enumerate() {
                let h = sample.history.values();
                for g in 0..l {
                    for c in 0..CHANNELS {
                        x[(c * bl + s * l + g) * WINDOW..][..WINDOW]
                            .copy_from_slice(&h[(g * CHANNELS + c) * WINDOW..][..WINDOW]);
                    }
                }
            }
            Tensor::from_raw(vec![CHANNELS, bl, WINDOW], x)
        };

        let mut conv_caches = Vec::with_capacity(self.conv.len());
        for layer in &self.conv {
            let (mut out, cache) = layer.forward_cached(&seq)?;
            out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            conv_caches.push((cache, out.values().to_vec()));
            seq = out;
        }
        let steps = seq.dims()[2];
        if !self.conv.is_empty() {
            seq = mean_over_grids(&seq, b, l);
        }

        let mut lstm_caches = Vec::with_capacity(self.lstm.len());
        let sequence_out = if self.lstm.is_empty() {
            // [C × B × T'] to [C·T' × B]
            let c = seq.dims()[0];
            let v = seq.values();
            let mut flat = vec![0.0; c * steps * b];
            for ci in 0..c {
                for s in 0..b {
                    for t in 0..steps {
                        flat[(ci * steps + t) * b + s] = v[(ci * b + s) * steps + t];
                    }
                }
            }
            flat
        } else {
            for layer in &self.lstm {
                let (out, cache) = layer.forward_cached(&seq, None, None)?;
                lstm_caches.push(cache);
                seq = out.hidden;
            }
            let h = seq.dims()[0];
            let v = seq.values();
            let mut last = vec![0.0; h * b];
            for hi in 0..h {
                for s in 0..b {
                    last[hi * b + s] = v[(hi * b + s) * steps + steps - 1];
                }
            }
            last
        };

        let mut tb_in = vec![0.0; CHANNELS * bl];
        for (s, sample) in batch.iter().enumerate() {
            let td = sample.target_day.values();
            for g in 0..l {
                for c in 0..CHANNELS {
                    tb_in[c * bl + s * l + g] = td[g * CHANNELS + c];
                }
            }
        }
        let (tb_out, tb_cache) = self
            .target_branch
            .forward_cached(&Tensor::from_raw(vec![CHANNELS, bl], tb_in))?;
        let tb_mean = mean_columns_over_grids(tb_out.values(), self.arch.target_branch_units, b, l);

        let mut x = sequence_out;
        x.extend_from_slice(&tb_mean);
        let mut act = Tensor::from_raw(vec![x.len() / b, b], x);
        let mut head_caches = Vec::with_capacity(self.head.len());
        for layer in &self.head {
            let (out, cache) = layer.forward_cached(&act)?;
            head_caches.push(cache);
            act = out;
        }
        let cache = ModelCache {
            batch: b,
            grids: l,
            conv: conv_caches,
            lstm: lstm_caches,
            steps,
            target_branch: tb_cache,
            head: head_caches,
        };
        Ok((act.into_values(), cache))
    }

    /// Gradients of `Σ_b d_pred[b] · pred[b]` with respect to every parameter,
    /// in canonical order. Frozen groups are skipped and reported as `None`.
    pub fn backward(
        &self,
        cache: &ModelCache,
        d_pred: &[f64],
        frozen: &FreezeMask,
    ) -> Result<Vec<Option<Tensor>>, ModelError> {
        let (b, l) = (cache.batch, cache.grids);
        if d_pred.len() != b {
            return Err(ModelError::Batch(format!("{} output gradients for a batch of {b}", d_pred.len())));
        }
        if cache.conv.len() != self.conv.len() || cache.lstm.len() != self.lstm.len() || cache.head.len() != self.head.len()
        {
            return Err(ModelError::Batch("forward cache belongs to a different architecture".into()));
        }
        let conv_live = !self.conv.is_empty() && !frozen.contains(ParamGroup::Conv);
        let lstm_live = !frozen.contains(ParamGroup::Lstm);
        let tb_live = !frozen.contains(ParamGroup::TargetBranch);
        let head_live = !frozen.contains(ParamGroup::Head);

        let mut head_grads = vec![None; 2 * self.head.len()];
        let mut upstream = Tensor::from_raw(vec![1, b], d_pred.to_vec());
        for (i, layer) in self.head.iter().enumerate().rev() {
            let g = layer.backward(&cache.head[i], &upstream)?;
            if head_live {
                head_grads[2 * i] = Some(g.weight);
                head_grads[2 * i + 1] = Some(g.bias);
            }
            upstream = g.input;
        }
        let d_concat = upstream.into_values();
        let units = self.arch.target_branch_units;
        let seq_width = d_concat.len() / b - units;
        let (d_seq, d_tb) = d_concat.split_at(seq_width * b);

        let mut tb_grads = vec![None, None];
        if tb_live {
            let mut d_tb_out = vec![0.0; units * b * l];
            let scale = 1.0 / l as f64;
            for u in 0..units {
                for s in 0..b {
                    let v = d_tb[u * b + s] * scale;
                    d_tb_out[(u * b + s) * l..][..l].fill(v);
                }
            }
            let g = self
                .target_branch
                .backward(&cache.target_branch, &Tensor::from_raw(vec![units, b * l], d_tb_out))?;
            tb_grads = vec![Some(g.weight), Some(g.bias)];
        }

        let steps = cache.steps;
        let mut lstm_grads = vec![None; 3 * self.lstm.len()];
        let mut d_feat: Option<Vec<f64>> = None;
        if self.lstm.is_empty() {
            let c = seq_width / steps;
            let mut d = vec![0.0; c * b * steps];
            for ci in 0..c {
                for s in 0..b {
                    for t in 0..steps {
                        d[(ci * b + s) * steps + t] = d_seq[(ci * steps + t) * b + s];
                    }
                }
            }
            d_feat = Some(d);
        } else if lstm_live || conv_live {
            let h = seq_width;
            let mut d_hidden = vec![0.0; h * b * steps];
            for hi in 0..h {
                for s in 0..b {
                    d_hidden[(hi * b + s) * steps + steps - 1] = d_seq[hi * b + s];
                }
            }
            let mut upstream = Tensor::from_raw(vec![h, b, steps], d_hidden);
            for (i, layer) in self.lstm.iter().enumerate().rev() {
                let g = layer.backward(&cache.lstm[i], &upstream)?;
                if lstm_live {
                    lstm_grads[3 * i] = Some(g.w_ih);
                    lstm_grads[3 * i + 1] = Some(g.w_hh);
                    lstm_grads[3 * i + 2] = Some(g.bias);
                }
                upstream = g.input;
            }
            d_feat = Some(upstream.into_values());
        }

        let mut conv_grads = vec![None; 2 * self.conv.len()];
        if let (true, Some(d_feat)) = (conv_live, d_feat) {
            let c = self.conv.last().expect("non-empty").out_channels();
            let bl = b * l;
            let scale = 1.0 / l as f64;
            let mut d_out = vec![0.0; c * bl * steps];
            for ci in 0..c {
                for s in 0..b {
                    let src = &d_feat[(ci * b + s) * steps..][..steps];
                    for g in 0..l {
                        let dst = &mut d_out[(ci * bl + s * l + g) * steps..][..steps];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d = v * scale);
                    }
                }
            }
            let mut upstream = d_out;
            for (i, layer) in self.conv.iter().enumerate().rev() {
                let (conv_cache, activated) = &cache.conv[i];
                for (d, y) in upstream.iter_mut().zip(activated) {
                    *d *= Activation::Relu.derivative_from_output(*y);
                }
                let dims = vec![layer.out_channels(), bl, activated.len() / (layer.out_channels() * bl)];
                let g = layer.backward(conv_cache, &Tensor::from_raw(dims, upstream))?;
                conv_grads[2 * i] = Some(g.kernel);
                conv_grads[2 * i + 1] = Some(g.bias);
                upstream = g.input.into_values();
            }
        }

        let mut grads = conv_grads;
        grads.extend(lstm_grads);
        grads.extend(tb_grads);
        grads.extend(head_grads);
        Ok(grads)
    }
}

fn batch_dims(batch: &[&WindowedSample]) -> Result<(usize, usize), ModelError> {
    let first = batch.first().ok_or_else(|| ModelError::Batch("empty batch".into()))?;
    let l = first.grid_count();
    for s in batch {
        if s.history.dims() != [l, CHANNELS, WINDOW] || s.target_day.dims() != [l, CHANNELS] {
            return Err(ModelError::Batch(format!(
                "expected history [{l}, {CHANNELS}, {WINDOW}] and target_day [{l}, {CHANNELS}], got {:?} and {:?}",
                s.history.dims(),
                s.target_day.dims()
            )));
        }
    }
    if l == 0 {
        return Err(ModelError::Batch("samples have no grids".into()));
    }
    Ok((batch.len(), l))
}

/// `[C × (B·L) × T]` to `[C × B × T]` by averaging each sample's grids.
fn mean_over_grids(x: &Tensor, b: usize, l: usize) -> Tensor {
    let (c, t) = (x.dims()[0], x.dims()[2]);
    let v = x.values();
    let scale = 1.0 / l as f64;
    let mut out = vec![0.0; c * b * t];
    for ci in 0..c {
        for s in 0..b {
            let dst = &mut out[(ci * b + s) * t..][..t];
            for g in 0..l {
                let src = &v[(ci * b * l + s * l + g) * t..][..t];
                dst.iter_mut().zip(src).for_each(|(d, y)| *d += y);
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
    }
    Tensor::from_raw(vec![c, b, t], out)
}

/// `[U × (B·L)]` to `[U × B]`, flattened.
fn mean_columns_over_grids(v: &[f64], units: usize, b: usize, l: usize) -> Vec<f64> {
    let scale = 1.0 / l as f64;
    (0..units * b)
        .map(|i| v[i * l..(i + 1) * l].iter().sum::<f64>() * scale)
        .collect()
}

/// Maximum relative error between [`Model::backward`] and central differences of
/// `Σ forward_batch(batch)` over every parameter.
pub fn model_grad_check(model: &Model, batch: &[&WindowedSample], epsilon: f64) -> Result<f64, ModelError> {
    let (preds, cache) = model.forward_cached(batch)?;
    let analytic = model.backward(&cache, &vec![1.0; preds.len()], &FreezeMask::none())?;
    let mut probe = model.clone();
    let loss = |m: &Model| -> Result<f64, ModelError> { Ok(m.forward_batch(batch)?.iter().sum()) };
    let mut worst = 0.0_f64;
    for (ti, grad) in analytic.iter().enumerate() {
        let grad = grad.as_ref().expect("nothing frozen");
        for j in 0..grad.len() {
            let original = probe.tensors()[ti].values()[j];
            probe.tensors_mut()[ti].values_mut()[j] = original + epsilon;
            let plus = loss(&probe)?;
            probe.tensors_mut()[ti].values_mut()[j] = original - epsilon;
            let minus = loss(&probe)?;
            probe.tensors_mut()[ti].values_mut()[j] = original;
            worst = worst.max(relative_error(grad.values()[j], (plus - minus) / (2.0 * epsilon)));
        }
    }
    Ok(worst)
}
