use rand::Rng;

use crate::error::{NnError, Result};
use crate::math::{axpy_f64, dot_f64, sum_f64};
use crate::tensor::Tensor;

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        slope: f32,
    },
    Relu,
    Sigmoid,
    Tanh,
    BatchNorm {
        features: usize,
        epsilon: f32,
        momentum: f32,
    },
    Flatten,
}

/// Forward-pass mode. Train mode uses batch statistics in batch norm and
/// updates the running statistics; eval mode reads the running statistics
/// and never mutates state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Tanh => "tanh",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(NnError::InvalidSpec("dense dims must be > 0".into()));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err(NnError::InvalidSpec("conv2d channels must be > 0".into()));
                }
                if kernel < 1 || stride < 1 {
                    return Err(NnError::InvalidSpec(
                        "conv2d kernel and stride must be >= 1".into(),
                    ));
                }
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(NnError::InvalidSpec(format!(
                        "leaky_relu slope must be in (0,1), got {slope}"
                    )));
                }
            }
            LayerSpec::BatchNorm {
                features, epsilon, ..
            } => {
                if features == 0 {
                    return Err(NnError::InvalidSpec("batch_norm features must be > 0".into()));
                }
                if !(epsilon > 0.0) {
                    return Err(NnError::InvalidSpec(format!(
                        "batch_norm epsilon must be > 0, got {epsilon}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, or a descriptive error.
    pub fn output_shape(&self, layer_index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |message: String| NnError::ShapeMismatch {
            layer: format!("layer {layer_index} ({})", self.kind_name()),
            message,
        };
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if input.len() != 2 || input[1] != in_dim {
                    return Err(mismatch(format!(
                        "expected input (batch, {in_dim}), got {input:?}"
                    )));
                }
                Ok(vec![input[0], out_dim])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[1] != in_channels {
                    return Err(mismatch(format!(
                        "expected input (batch, {in_channels}, h, w), got {input:?}"
                    )));
                }
                let (h, w) = (input[2], input[3]);
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(mismatch(format!(
                        "kernel {kernel} larger than padded input {h}x{w}+2*{padding}"
                    )));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![input[0], out_channels, ho, wo])
            }
            LayerSpec::BatchNorm { features, .. } => {
                let ok = (input.len() == 2 && input[1] == features)
                    || (input.len() == 4 && input[1] == features);
                if !ok {
                    return Err(mismatch(format!(
                        "expected (batch, {features}) or (batch, {features}, h, w), got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return Err(mismatch(format!(
                        "expected batched input, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            _ => {
                if input.is_empty() {
                    return Err(mismatch("empty input shape".into()));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Ordered collection of named parameter tensors.
///
/// Names are `layer{i}.{role}` with roles `weight`, `bias`, `gamma`, `beta`,
/// `running_mean`, `running_var`. Running statistics are state, not trainable
/// parameters; [`NetworkParams::is_trainable`] tells them apart.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    entries: Vec<(String, Tensor)>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(NnError::InvalidSpec(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with("running_mean") && !name.ends_with("running_var")
    }

    /// Element-wise accumulate; shapes and names must line up.
    pub fn add_assign(&mut self, other: &NetworkParams) -> Result<()> {
        if self.len() != other.len() {
            return Err(NnError::InvalidSpec(
                "parameter collections differ in entry count".into(),
            ));
        }
        for ((name_a, t), (name_b, o)) in self.entries.iter_mut().zip(&other.entries) {
            if name_a != name_b {
                return Err(NnError::InvalidSpec(format!(
                    "parameter name mismatch: `{name_a}` vs `{name_b}`"
                )));
            }
            t.add_assign(o)?;
        }
        Ok(())
    }
}

/// Per-layer activation cache recorded by a train-mode forward pass.
#[derive(Debug)]
enum LayerCache {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    LeakyRelu { input: Tensor },
    Relu { input: Tensor },
    Sigmoid { output: Tensor },
    Tanh { output: Tensor },
    BatchNorm { x_hat: Tensor, inv_std: Vec<f64> },
    Flatten { in_shape: Vec<usize> },
}

/// Activations captured by [`Network::forward_train`], consumed by
/// [`Network::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    output_shape: Vec<usize>,
}

/// A fixed sequential stack of layers plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    params: NetworkParams,
}

fn param_name(layer: usize, role: &str) -> String {
    format!("layer{layer}.{role}")
}

impl Network {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut params = NetworkParams::new();
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            match *spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt() as f32;
                    let mut w = vec![0.0f32; out_dim * in_dim];
                    for v in &mut w {
                        *v = rng.random_range(-limit..limit);
                    }
                    params.push(param_name(i, "weight"), Tensor::new(vec![out_dim, in_dim], w)?)?;
                    params.push(param_name(i, "bias"), Tensor::zeros(vec![out_dim]))?;
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let mut w = vec![0.0f32; out_channels * in_channels * kernel * kernel];
                    for v in &mut w {
                        *v = rng.random_range(-limit..limit);
                    }
                    params.push(
                        param_name(i, "weight"),
                        Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?,
                    )?;
                    params.push(param_name(i, "bias"), Tensor::zeros(vec![out_channels]))?;
                }
                LayerSpec::BatchNorm { features, .. } => {
                    params.push(param_name(i, "gamma"), Tensor::filled(vec![features], 1.0))?;
                    params.push(param_name(i, "beta"), Tensor::zeros(vec![features]))?;
                    params.push(
                        param_name(i, "running_mean"),
                        Tensor::zeros(vec![features]),
                    )?;
                    params.push(
                        param_name(i, "running_var"),
                        Tensor::filled(vec![features], 1.0),
                    )?;
                }
                _ => {}
            }
        }
        Ok(Self { specs, params })
    }

    /// Reassembles a network from existing parameters (deserialization path).
    pub fn from_parts(specs: Vec<LayerSpec>, params: NetworkParams) -> Result<Self> {
        let mut rng = NoRng;
        let reference = Network::new(specs.clone(), &mut rng)?;
        if reference.params.len() != params.len() {
            return Err(NnError::InvalidSpec(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((en, et), (gn, gt)) in reference.params.entries.iter().zip(&params.entries) {
            if en != gn || et.shape() != gt.shape() {
                return Err(NnError::InvalidSpec(format!(
                    "parameter `{gn}` {:?} does not match expected `{en}` {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Self { specs, params })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| NetworkParams::is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Output shape for a given input shape without running the network.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (i, spec) in self.specs.iter().enumerate() {
            shape = spec.output_shape(i, &shape)?;
        }
        Ok(shape)
    }

    /// Forward pass. Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => Ok(self.forward_train(input)?.0),
            Mode::Eval => self.forward_eval(input),
        }
    }

    /// Eval-mode forward pass; `&self` guarantees no state is modified.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            x = self.layer_forward(i, spec, x, Mode::Eval, None)?.0;
        }
        Ok(x)
    }

    /// Train-mode forward pass returning the activation cache needed by
    /// [`Network::backward`].
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut x = input.clone();
        let mut layers = Vec::with_capacity(self.specs.len());
        let specs = self.specs.clone();
        for (i, spec) in specs.iter().enumerate() {
            let (out, cache) = self.layer_forward(i, spec, x, Mode::Train, Some(&mut layers))?;
            debug_assert!(cache.is_none());
            x = out;
        }
        let output_shape = x.shape().to_vec();
        Ok((x, ForwardCache { layers, output_shape }))
    }

    /// Backward pass over a cached forward. Returns per-parameter gradients
    /// (trainable entries only, in parameter order) and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Tensor) -> Result<(NetworkParams, Tensor)> {
        if cache.layers.len() != self.specs.len() {
            return Err(NnError::MismatchedBackward(format!(
                "cache covers {} layers, network has {}",
                cache.layers.len(),
                self.specs.len()
            )));
        }
        if output_grad.shape() != cache.output_shape.as_slice() {
            return Err(NnError::MismatchedBackward(format!(
                "output grad shape {:?} does not match cached output {:?}",
                output_grad.shape(),
                cache.output_shape
            )));
        }
        let mut grad = output_grad.clone();
        let mut rev_entries: Vec<(String, Tensor)> = Vec::new();
        for (i, spec) in self.specs.iter().enumerate().rev() {
            let layer_cache = &cache.layers[i];
            grad = self.layer_backward(i, spec, layer_cache, grad, &mut rev_entries)?;
        }
        rev_entries.reverse();
        let mut grads = NetworkParams::new();
        for (name, t) in rev_entries {
            grads.push(name, t)?;
        }
        Ok((grads, grad))
    }

    fn layer_forward(
        &mut self,
        index: usize,
        spec: &LayerSpec,
        input: Tensor,
        mode: Mode,
        caches: Option<&mut Vec<LayerCache>>,
    ) -> Result<(Tensor, Option<LayerCache>)> {
        let out_shape = spec.output_shape(index, input.shape())?;
        let mut record = |c: LayerCache, caches: Option<&mut Vec<LayerCache>>| {
            if let Some(v) = caches {
                v.push(c);
                None
            } else {
                Some(c)
            }
        };
        match *spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let batch = input.shape()[0];
                let w = self
                    .params
                    .get(&param_name(index, "weight"))
                    .expect("dense weight");
                let b = self.params.get(&param_name(index, "bias")).expect("dense bias");
                let wd = w.data();
                let bd = b.data();
                let xd = input.data();
                let mut out = vec![0.0f32; batch * out_dim];
                for bi in 0..batch {
                    let row = &xd[bi * in_dim..(bi + 1) * in_dim];
                    let out_row = &mut out[bi * out_dim..(bi + 1) * out_dim];
                    for (o, slot) in out_row.iter_mut().enumerate() {
                        let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                        *slot = (dot_f64(row, wrow) + bd[o] as f64) as f32;
                    }
                }
                let cache = record(LayerCache::Dense { input }, caches);
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (batch, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let weight = self
                    .params
                    .get(&param_name(index, "weight"))
                    .expect("conv weight")
                    .data()
                    .to_vec();
                let bias = self
                    .params
                    .get(&param_name(index, "bias"))
                    .expect("conv bias")
                    .data()
                    .to_vec();
                let xd = input.data();
                let mut out = vec![0.0f32; batch * out_channels * ho * wo];
                for bi in 0..batch {
                    for co in 0..out_channels {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = bias[co] as f64;
                                for ci in 0..in_channels {
                                    let in_plane = &xd[(bi * in_channels + ci) * h * w..];
                                    let w_plane =
                                        &weight[((co * in_channels) + ci) * kernel * kernel..];
                                    for ky in 0..kernel {
                                        let iy = oy * stride + ky;
                                        if iy < padding || iy >= h + padding {
                                            continue;
                                        }
                                        let iy = iy - padding;
                                        for kx in 0..kernel {
                                            let ix = ox * stride + kx;
                                            if ix < padding || ix >= w + padding {
                                                continue;
                                            }
                                            let ix = ix - padding;
                                            acc += in_plane[iy * w + ix] as f64
                                                * w_plane[ky * kernel + kx] as f64;
                                        }
                                    }
                                }
                                out[((bi * out_channels + co) * ho + oy) * wo + ox] = acc as f32;
                            }
                        }
                    }
                }
                let cache = record(LayerCache::Conv2d { input }, caches);
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::LeakyRelu { slope } => {
                let out: Vec<f32> = input
                    .data()
                    .iter()
                    .map(|&v| if v >= 0.0 { v } else { slope * v })
                    .collect();
                let cache = record(LayerCache::LeakyRelu { input }, caches);
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::Relu => {
                let out: Vec<f32> = input
                    .data()
                    .iter()
                    .map(|&v| if v >= 0.0 { v } else { 0.0 })
                    .collect();
                let cache = record(LayerCache::Relu { input }, caches);
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::Sigmoid => {
                let out: Vec<f32> = input
                    .data()
                    .iter()
                    .map(|&v| 1.0 / (1.0 + (-v).exp()))
                    .collect();
                let out = Tensor::new(out_shape, out)?;
                let cache = record(LayerCache::Sigmoid { output: out.clone() }, caches);
                Ok((out, cache))
            }
            LayerSpec::Tanh => {
                let out: Vec<f32> = input.data().iter().map(|&v| v.tanh()).collect();
                let out = Tensor::new(out_shape, out)?;
                let cache = record(LayerCache::Tanh { output: out.clone() }, caches);
                Ok((out, cache))
            }
            LayerSpec::BatchNorm {
                features,
                epsilon,
                momentum,
            } => {
                let gamma = self
                    .params
                    .get(&param_name(index, "gamma"))
                    .expect("bn gamma")
                    .data()
                    .to_vec();
                let beta = self
                    .params
                    .get(&param_name(index, "beta"))
                    .expect("bn beta")
                    .data()
                    .to_vec();
                let (groups, stride_info) = bn_layout(input.shape());
                let xd = input.data();
                match mode {
                    Mode::Eval => {
                        let rm = self
                            .params
                            .get(&param_name(index, "running_mean"))
                            .expect("bn mean")
                            .data()
                            .to_vec();
                        let rv = self
                            .params
                            .get(&param_name(index, "running_var"))
                            .expect("bn var")
                            .data()
                            .to_vec();
                        let mut out = vec![0.0f32; xd.len()];
                        for f in 0..features {
                            let inv = 1.0 / ((rv[f] as f64 + epsilon as f64).sqrt());
                            let m = rm[f] as f64;
                            for_each_feature(xd.len(), f, groups, stride_info, |idx| {
                                let xh = (xd[idx] as f64 - m) * inv;
                                out[idx] = (gamma[f] as f64 * xh + beta[f] as f64) as f32;
                            });
                        }
                        Ok((Tensor::new(out_shape, out)?, None))
                    }
                    Mode::Train => {
                        let n = (xd.len() / features) as f64;
                        let mut out = vec![0.0f32; xd.len()];
                        let mut x_hat = vec![0.0f32; xd.len()];
                        let mut inv_stds = vec![0.0f64; features];
                        let mut batch_means = vec![0.0f64; features];
                        let mut batch_vars = vec![0.0f64; features];
                        for f in 0..features {
                            let mut sum = 0.0f64;
                            for_each_feature(xd.len(), f, groups, stride_info, |idx| {
                                sum += xd[idx] as f64;
                            });
                            let mean = sum / n;
                            let mut var_sum = 0.0f64;
                            for_each_feature(xd.len(), f, groups, stride_info, |idx| {
                                let d = xd[idx] as f64 - mean;
                                var_sum += d * d;
                            });
                            let var = var_sum / n;
                            let inv = 1.0 / ((var + epsilon as f64).sqrt());
                            for_each_feature(xd.len(), f, groups, stride_info, |idx| {
                                let xh = (xd[idx] as f64 - mean) * inv;
                                x_hat[idx] = xh as f32;
                                out[idx] = (gamma[f] as f64 * xh + beta[f] as f64) as f32;
                            });
                            inv_stds[f] = inv;
                            batch_means[f] = mean;
                            batch_vars[f] = var;
                        }
                        {
                            let rm = self
                                .params
                                .get_mut(&param_name(index, "running_mean"))
                                .expect("bn mean");
                            for (f, v) in rm.data_mut().iter_mut().enumerate() {
                                *v = (momentum as f64 * *v as f64
                                    + (1.0 - momentum as f64) * batch_means[f])
                                    as f32;
                            }
                        }
                        {
                            let rv = self
                                .params
                                .get_mut(&param_name(index, "running_var"))
                                .expect("bn var");
                            for (f, v) in rv.data_mut().iter_mut().enumerate() {
                                *v = (momentum as f64 * *v as f64
                                    + (1.0 - momentum as f64) * batch_vars[f])
                                    as f32;
                            }
                        }
                        let cache = record(
                            LayerCache::BatchNorm {
                                x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
                                inv_std: inv_stds,
                            },
                            caches,
                        );
                        Ok((Tensor::new(out_shape, out)?, cache))
                    }
                }
            }
            LayerSpec::Flatten => {
                let in_shape = input.shape().to_vec();
                let out = input.reshaped(out_shape)?;
                let cache = record(LayerCache::Flatten { in_shape }, caches);
                Ok((out, cache))
            }
        }
    }

    fn layer_backward(
        &self,
        index: usize,
        spec: &LayerSpec,
        cache: &LayerCache,
        grad: Tensor,
        rev_entries: &mut Vec<(String, Tensor)>,
    ) -> Result<Tensor> {
        let bad_cache = || {
            NnError::MismatchedBackward(format!(
                "cache entry for layer {index} does not match spec `{}`",
                spec.kind_name()
            ))
        };
        match *spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let input = match cache {
                    LayerCache::Dense { input } => input,
                    _ => return Err(bad_cache()),
                };
                let batch = input.shape()[0];
                let w = self
                    .params
                    .get(&param_name(index, "weight"))
                    .expect("dense weight")
                    .data();
                let xd = input.data();
                let gd = grad.data();
                // dW
                let mut dw = vec![0.0f64; out_dim * in_dim];
                let mut db = vec![0.0f64; out_dim];
                for bi in 0..batch {
                    let grow = &gd[bi * out_dim..(bi + 1) * out_dim];
                    let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
                    for (o, &g) in grow.iter().enumerate() {
                        db[o] += g as f64;
                        axpy_f64(&mut dw[o * in_dim..(o + 1) * in_dim], g as f64, xrow);
                    }
                }
                // dX
                let mut dx = vec![0.0f64; batch * in_dim];
                for bi in 0..batch {
                    let grow = &gd[bi * out_dim..(bi + 1) * out_dim];
                    let drow = &mut dx[bi * in_dim..(bi + 1) * in_dim];
                    for (o, &g) in grow.iter().enumerate() {
                        axpy_f64(drow, g as f64, &w[o * in_dim..(o + 1) * in_dim]);
                    }
                }
                rev_entries.push((
                    param_name(index, "bias"),
                    Tensor::new(vec![out_dim], db.iter().map(|&v| v as f32).collect())?,
                ));
                rev_entries.push((
                    param_name(index, "weight"),
                    Tensor::new(
                        vec![out_dim, in_dim],
                        dw.iter().map(|&v| v as f32).collect(),
                    )?,
                ));
                Tensor::new(
                    input.shape().to_vec(),
                    dx.iter().map(|&v| v as f32).collect(),
                )
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let input = match cache {
                    LayerCache::Conv2d { input } => input,
                    _ => return Err(bad_cache()),
                };
                let (batch, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
                let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
                let weight = self
                    .params
                    .get(&param_name(index, "weight"))
                    .expect("conv weight")
                    .data();
                let xd = input.data();
                let gd = grad.data();
                let mut dw = vec![0.0f64; out_channels * in_channels * kernel * kernel];
                let mut db = vec![0.0f64; out_channels];
                let mut dx = vec![0.0f64; xd.len()];
                for bi in 0..batch {
                    for co in 0..out_channels {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gd[((bi * out_channels + co) * ho + oy) * wo + ox] as f64;
                                db[co] += g;
                                for ci in 0..in_channels {
                                    let in_base = (bi * in_channels + ci) * h * w;
                                    let w_base = ((co * in_channels) + ci) * kernel * kernel;
                                    for ky in 0..kernel {
                                        let iy = oy * stride + ky;
                                        if iy < padding || iy >= h + padding {
                                            continue;
                                        }
                                        let iy = iy - padding;
                                        for kx in 0..kernel {
                                            let ix = ox * stride + kx;
                                            if ix < padding || ix >= w + padding {
                                                continue;
                                            }
                                            let ix = ix - padding;
                                            dw[w_base + ky * kernel + kx] +=
                                                g * xd[in_base + iy * w + ix] as f64;
                                            dx[in_base + iy * w + ix] +=
                                                g * weight[w_base + ky * kernel + kx] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                rev_entries.push((
                    param_name(index, "bias"),
                    Tensor::new(vec![out_channels], db.iter().map(|&v| v as f32).collect())?,
                ));
                rev_entries.push((
                    param_name(index, "weight"),
                    Tensor::new(
                        vec![out_channels, in_channels, kernel, kernel],
                        dw.iter().map(|&v| v as f32).collect(),
                    )?,
                ));
                Tensor::new(
                    input.shape().to_vec(),
                    dx.iter().map(|&v| v as f32).collect(),
                )
            }
            LayerSpec::LeakyRelu { slope } => {
                let input = match cache {
                    LayerCache::LeakyRelu { input } => input,
                    _ => return Err(bad_cache()),
                };
                // Subgradient at exactly 0 is the positive-branch slope 1.0.
                let out: Vec<f32> = input
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
                    .collect();
                Tensor::new(input.shape().to_vec(), out)
            }
            LayerSpec::Relu => {
                let input = match cache {
                    LayerCache::Relu { input } => input,
                    _ => return Err(bad_cache()),
                };
                let out: Vec<f32> = input
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x >= 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(input.shape().to_vec(), out)
            }
            LayerSpec::Sigmoid => {
                let output = match cache {
                    LayerCache::Sigmoid { output } => output,
                    _ => return Err(bad_cache()),
                };
                let out: Vec<f32> = output
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                Tensor::new(output.shape().to_vec(), out)
            }
            LayerSpec::Tanh => {
                let output = match cache {
                    LayerCache::Tanh { output } => output,
                    _ => return Err(bad_cache()),
                };
                let out: Vec<f32> = output
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                Tensor::new(output.shape().to_vec(), out)
            }
            LayerSpec::BatchNorm { features, .. } => {
                let (x_hat, inv_std) = match cache {
                    LayerCache::BatchNorm { x_hat, inv_std } => (x_hat, inv_std),
                    _ => return Err(bad_cache()),
                };
                let gamma = self
                    .params
                    .get(&param_name(index, "gamma"))
                    .expect("bn gamma")
                    .data();
                let (groups, stride_info) = bn_layout(x_hat.shape());
                let xh = x_hat.data();
                let gd = grad.data();
                let n = (xh.len() / features) as f64;
                let mut dgamma = vec![0.0f64; features];
                let mut dbeta = vec![0.0f64; features];
                let mut dx = vec![0.0f32; xh.len()];
                for f in 0..features {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for_each_feature(xh.len(), f, groups, stride_info, |idx| {
                        sum_dy += gd[idx] as f64;
                        sum_dy_xhat += gd[idx] as f64 * xh[idx] as f64;
                    });
                    dbeta[f] = sum_dy;
                    dgamma[f] = sum_dy_xhat;
                    let scale = gamma[f] as f64 * inv_std[f] / n;
                    for_each_feature(xh.len(), f, groups, stride_info, |idx| {
                        let v = scale
                            * (n * gd[idx] as f64 - sum_dy - xh[idx] as f64 * sum_dy_xhat);
                        dx[idx] = v as f32;
                    });
                }
                rev_entries.push((
                    param_name(index, "beta"),
                    Tensor::new(vec![features], dbeta.iter().map(|&v| v as f32).collect())?,
                ));
                rev_entries.push((
                    param_name(index, "gamma"),
                    Tensor::new(vec![features], dgamma.iter().map(|&v| v as f32).collect())?,
                ));
                Tensor::new(x_hat.shape().to_vec(), dx)
            }
            LayerSpec::Flatten => {
                let in_shape = match cache {
                    LayerCache::Flatten { in_shape } => in_shape,
                    _ => return Err(bad_cache()),
                };
                grad.reshaped(in_shape.clone())
            }
        }
    }
}

/// Mean of all output values; convenience for scalar losses over a tensor.
pub fn mean_value(t: &Tensor) -> f64 {
    sum_f64(t.data()) / t.len() as f64
}

/// Batch-norm layout helper: number of (batch, spatial) groups and the
/// spatial extent per feature.
fn bn_layout(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 4 {
        (shape[0], shape[2] * shape[3])
    } else {
        (shape[0], 1)
    }
}

#[inline]
fn for_each_feature(
    total: usize,
    feature: usize,
    groups: usize,
    spatial: usize,
    mut f: impl FnMut(usize),
) {
    let features = total / (groups * spatial);
    for g in 0..groups {
        let base = (g * features + feature) * spatial;
        for s in 0..spatial {
            f(base + s);
        }
    }
}

/// Rng stand-in for code paths that must not draw random numbers.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
}
