use rand::Rng;

use super::params::{init_rng, BoundParams, ParamStore};
use crate::autograd::{window_output_len, BatchStats, Graph, Var};
use crate::error::{RamError, Result};
use crate::tensor::Tensor;

fn kaiming_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = init_rng(seed, name);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn rename(layer: &str, err: RamError) -> RamError {
    match err {
        RamError::Layer { message, .. } => RamError::layer(layer, message),
        RamError::ShapeMismatch { op, left, right } => RamError::ShapeMismatch {
            op: format!("{layer} ({op})"),
            left,
            right,
        },
        other => other,
    }
}

/// 2-D convolution; parameters `{name}.weight` (out x in x k x k) and `{name}.bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            window_output_len(h, self.kernel, self.stride, self.padding)?,
            window_output_len(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let wname = format!("{}.weight", self.name);
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        store.insert_param(&wname, kaiming_uniform(seed, &wname, &shape, fan_in));
        store.insert_param(format!("{}.bias", self.name), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        let w = params.var(&format!("{}.weight", self.name))?;
        let b = params.var(&format!("{}.bias", self.name))?;
        g.conv2d(x, w, b, self.stride, self.padding)
            .map_err(|e| rename(&self.name, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolLayer {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            window_output_len(h, self.kernel, self.stride, 0)?,
            window_output_len(w, self.kernel, self.stride, 0)?,
        ))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, layer: &str) -> Result<Var> {
        g.max_pool2d(x, self.kernel, self.stride)
            .map_err(|e| rename(layer, e))
    }
}

/// Fully connected layer; `{name}.weight` is out x in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FcLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FcLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        FcLayer {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let wname = format!("{}.weight", self.name);
        store.insert_param(
            &wname,
            kaiming_uniform(seed, &wname, &[self.out_dim, self.in_dim], self.in_dim),
        );
        store.insert_param(format!("{}.bias", self.name), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        let w = params.var(&format!("{}.weight", self.name))?;
        let b = params.var(&format!("{}.bias", self.name))?;
        g.linear(x, w, b).map_err(|e| rename(&self.name, e))
    }
}

/// Batch normalization; `{name}.gamma`/`{name}.beta` are trainable,
/// `{name}.running_mean`/`{name}.running_var` are buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn init(&self, store: &mut ParamStore) {
        let c = [self.channels];
        store.insert_param(format!("{}.gamma", self.name), Tensor::ones(&c));
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(&c));
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&c));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(&c));
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        store: &ParamStore,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = params.var(&format!("{}.gamma", self.name))?;
        let beta = params.var(&format!("{}.beta", self.name))?;
        if training {
            let (y, stats) = g
                .batch_norm_train(x, gamma, beta, self.eps)
                .map_err(|e| rename(&self.name, e))?;
            Ok((y, Some(stats)))
        } else {
            let mean = store.buffer(&format!("{}.running_mean", self.name))?;
            let var = store.buffer(&format!("{}.running_var", self.name))?;
            let y = g
                .batch_norm_eval(x, gamma, beta, mean.data(), var.data(), self.eps)
                .map_err(|e| rename(&self.name, e))?;
            Ok((y, None))
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`, using the
    /// unbiased batch variance.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let mean = store.buffer_mut(&format!("{}.running_mean", self.name))?;
        for (r, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        let var = store.buffer_mut(&format!("{}.running_var", self.name))?;
        for (r, &b) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b * correction;
        }
        Ok(())
    }
}
