//! Layer graphs used for the classifier, its quantized copy and the generator body.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::quant::{QuantState, SteResiduals};
use crate::tensor::{Real, Tensor};

/// Denominator guard for batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Tanh,
    AvgPool {
        size: usize,
    },
    Flatten,
    /// Reshape each sample to `shape`.
    Reshape {
        shape: Vec<usize>,
    },
    Upsample {
        factor: usize,
    },
}

impl LayerSpec {
    /// Per-sample output shape, or an error when `input` does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || shape_err(format!("{self:?} cannot consume per-sample shape {input:?}"));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return bad();
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad } => {
                if input.len() != 3 || input[0] != *in_channels || *stride == 0 {
                    return bad();
                }
                let (hp, wp) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if *kernel > hp || *kernel > wp || (hp - kernel) % stride != 0 || (wp - kernel) % stride != 0 {
                    return bad();
                }
                Ok(vec![*out_channels, (hp - kernel) / stride + 1, (wp - kernel) / stride + 1])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.is_empty() || input[0] != *channels {
                    return bad();
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::AvgPool { size } => {
                if input.len() != 3 || *size == 0 || !input[1].is_multiple_of(*size) || !input[2].is_multiple_of(*size)
                {
                    return bad();
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad();
                }
                Ok(shape.clone())
            }
            LayerSpec::Upsample { factor } => {
                if input.len() != 3 || *factor == 0 {
                    return bad();
                }
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Tanh)
    }
}

/// What a trainable tensor is, for optimizer rules such as weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnAffine,
}

/// Running mean and biased variance of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T: Real = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], T::one()) }
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + momentum * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Real = f32> {
    pub spec: LayerSpec,
    /// Dense: `[w, b]`; conv: `[w]`; batchnorm: `[gamma, beta]`.
    pub params: Vec<Tensor<T>>,
    pub running: Option<BnRunning<T>>,
}

/// Output of [`batchnorm_forward`].
pub struct BnOutput {
    pub y: Var,
    pub batch_mean: Var,
    pub batch_var: Var,
}

fn bn_apply<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BnMode,
    running: &BnRunning<T>,
) -> Result<BnOutput> {
    let n = tape.shape(x)[0];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let rows: Vec<usize> = (0..n).collect();
    let batch_mean = tape.channel_mean(x, &rows)?;
    let batch_var = tape.channel_var(x, &rows)?;
    let stats = match mode {
        BnMode::Train => None,
        BnMode::Eval => Some((running.mean.data(), running.var.data())),
    };
    let y = tape.batch_norm(x, gamma, beta, stats, T::of(BN_EPS))?;
    Ok(BnOutput { y, batch_mean, batch_var })
}

/// Batch normalization of `x[N, C, ...]`.
///
/// Train mode normalizes with the batch's biased statistics and folds them
/// into `running` with the given momentum; eval mode normalizes with
/// `running`. Batch statistics are returned in both modes.
pub fn batchnorm_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BnMode,
    running: &mut BnRunning<T>,
    momentum: T,
) -> Result<BnOutput> {
    let out = bn_apply(tape, x, gamma, beta, mode, running)?;
    if mode == BnMode::Train {
        let (m, v) = (tape.value(out.batch_mean).clone(), tape.value(out.batch_var).clone());
        running.update(m.data(), v.data(), momentum);
    }
    Ok(out)
}

/// Forward-pass switches.
pub struct ForwardOptions<'a, T: Real> {
    pub mode: BnMode,
    /// Record parameters as gradient leaves.
    pub trainable: bool,
    /// Fake-quantize weights and activations.
    pub quant: Option<&'a QuantState<T>>,
    /// Pin quantization residuals (gradient verification only).
    pub residuals: Option<&'a mut SteResiduals<T>>,
}

impl<'a, T: Real> ForwardOptions<'a, T> {
    pub fn eval() -> Self {
        Self { mode: BnMode::Eval, trainable: false, quant: None, residuals: None }
    }

    pub fn train() -> Self {
        Self { mode: BnMode::Train, trainable: true, quant: None, residuals: None }
    }

    pub fn trainable(mut self, flag: bool) -> Self {
        self.trainable = flag;
        self
    }

    pub fn quantized(mut self, q: &'a QuantState<T>) -> Self {
        self.quant = Some(q);
        self
    }
}

/// Everything a forward pass exposes to losses and calibration.
pub struct ForwardPass {
    pub output: Var,
    /// Parameter vars per layer, aligned with `Layer::params`.
    pub params: Vec<Vec<Var>>,
    /// Input of each BN layer, in order.
    pub bn_inputs: Vec<Var>,
    /// Batch mean and biased variance at each BN layer input.
    pub bn_stats: Vec<(Var, Var)>,
    /// Values at each activation-quantization point, before quantization.
    pub activations: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    /// Builds a network with He-normal weights, zero biases, unit BN scale
    /// and default running statistics (mean 0, variance 1).
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let next = spec.output_shape(&shape)?;
            let (params, running) = match spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let w = he_normal(&[*outputs, *inputs], *inputs, rng);
                    (vec![w, Tensor::zeros(&[*outputs])], None)
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    (vec![he_normal(&[*out_channels, *in_channels, *kernel, *kernel], fan_in, rng)], None)
                }
                LayerSpec::BatchNorm { channels } => (
                    vec![Tensor::full(&[*channels], T::one()), Tensor::zeros(&[*channels])],
                    Some(BnRunning::new(*channels)),
                ),
                _ => (Vec::new(), None),
            };
            layers.push(Layer { spec: spec.clone(), params, running });
            shape = next;
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers })
    }

    /// Re-checks layer compatibility and parameter shapes (used after loading).
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let expected: Vec<Vec<usize>> = match &layer.spec {
                LayerSpec::Dense { inputs, outputs } => vec![vec![*outputs, *inputs], vec![*outputs]],
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    vec![vec![*out_channels, *in_channels, *kernel, *kernel]]
                }
                LayerSpec::BatchNorm { channels } => vec![vec![*channels], vec![*channels]],
                _ => vec![],
            };
            let got: Vec<Vec<usize>> = layer.params.iter().map(|p| p.shape().to_vec()).collect();
            if got != expected {
                return shape_err(format!("{:?}: parameter shapes {got:?}", layer.spec));
            }
            if let LayerSpec::BatchNorm { channels } = layer.spec {
                match &layer.running {
                    Some(r) if r.mean.shape() == [channels] && r.var.shape() == [channels] => {}
                    _ => return shape_err("batchnorm layer without matching running statistics"),
                }
            }
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.spec.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    /// Number of BN layers, `L`.
    pub fn bn_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.running.is_some()).count()
    }

    /// Channel count of each BN layer.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l.spec {
                LayerSpec::BatchNorm { channels } => Some(channels),
                _ => None,
            })
            .collect()
    }

    pub fn bn_running(&self) -> Vec<&BnRunning<T>> {
        self.layers.iter().filter_map(|l| l.running.as_ref()).collect()
    }

    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.spec.has_weights()).count()
    }

    /// Activation-quantization points: the network input, then the output of
    /// every activation function.
    pub fn activation_point_count(&self) -> usize {
        1 + self.layers.iter().filter(|l| l.spec.is_activation()).count()
    }

    /// For each activation point, the ordinal of the next weight layer it feeds.
    pub fn activation_feeds(&self) -> Vec<Option<usize>> {
        let mut feeds = Vec::new();
        let mut pending = vec![0usize];
        let mut weight_ordinal = 0;
        let mut point = 1;
        let mut resolved: Vec<(usize, usize)> = Vec::new();
        for l in &self.layers {
            if l.spec.has_weights() {
                for p in pending.drain(..) {
                    resolved.push((p, weight_ordinal));
                }
                weight_ordinal += 1;
            }
            if l.spec.is_activation() {
                pending.push(point);
                point += 1;
            }
        }
        feeds.resize(point, None);
        for (p, w) in resolved {
            feeds[p] = Some(w);
        }
        feeds
    }

    pub fn params(&self) -> Vec<(ParamRole, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (i, p) in l.params.iter().enumerate() {
                out.push((role_of(&l.spec, i), p));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let spec = l.spec.clone();
            for (i, p) in l.params.iter_mut().enumerate() {
                out.push((role_of(&spec, i), p));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Copies the gradients of `pass` into each parameter's gradient slot.
    pub fn store_grads(&mut self, pass: &ForwardPass, grads: &crate::autodiff::Gradients<T>) -> Result<()> {
        for (layer, vars) in self.layers.iter_mut().zip(&pass.params) {
            for (p, &v) in layer.params.iter_mut().zip(vars) {
                p.set_grad(grads.get_or_zero(v).into_data())?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.params.iter_mut().for_each(Tensor::zero_grad);
        }
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l.params.iter().map(Tensor::cast).collect(),
                    running: l.running.as_ref().map(|r| BnRunning { mean: r.mean.cast(), var: r.var.cast() }),
                })
                .collect(),
        }
    }

    /// Runs the network on `input` (`[N, ...input_shape]`).
    ///
    /// Running statistics are never touched here; see [`Network::train_forward`].
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mut opts: ForwardOptions<'_, T>) -> Result<ForwardPass> {
        let in_shape = tape.shape(input).to_vec();
        if in_shape.len() != self.input_shape.len() + 1 || in_shape[1..] != self.input_shape[..] {
            return shape_err(format!("network expects [N, {:?}], got {:?}", self.input_shape, in_shape));
        }
        let weight_layers = self.weight_layer_count();
        let feeds = self.activation_feeds();
        let mut act_point = 0usize;
        let mut weight_ordinal = 0usize;
        let mut pass = ForwardPass {
            output: input,
            params: Vec::with_capacity(self.layers.len()),
            bn_inputs: Vec::new(),
            bn_stats: Vec::new(),
            activations: Vec::new(),
        };

        let mut x = input;
        pass.activations.push(x);
        if let Some(q) = opts.quant {
            x = q.quantize_activation(tape, x, act_point, opts.residuals.as_deref_mut())?;
        }
        act_point += 1;

        for layer in &self.layers {
            let vars: Vec<Var> = layer
                .params
                .iter()
                .map(|p| if opts.trainable { tape.param(p) } else { tape.constant(p.clone()) })
                .collect();
            let n = tape.shape(x)[0];
            x = match &layer.spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let mut w = vars[0];
                    if let Some(q) = opts.quant {
                        let bits = q.policy.weight_bits_for(weight_ordinal, weight_layers);
                        w = crate::quant::fake_quantize_weights(tape, w, bits, opts.residuals.as_deref_mut())?;
                    }
                    weight_ordinal += 1;
                    match layer.spec {
                        LayerSpec::Dense { .. } => tape.dense(x, w, vars[1])?,
                        LayerSpec::Conv2d { stride, pad, .. } => tape.conv2d(x, w, stride, pad)?,
                        _ => unreachable!(),
                    }
                }
                LayerSpec::BatchNorm { .. } => {
                    let running = layer.running.as_ref().expect("batchnorm has running stats");
                    pass.bn_inputs.push(x);
                    let out = bn_apply(tape, x, vars[0], vars[1], opts.mode, running)?;
                    pass.bn_stats.push((out.batch_mean, out.batch_var));
                    out.y
                }
                LayerSpec::Relu | LayerSpec::Tanh => {
                    let y = if layer.spec == LayerSpec::Relu { tape.relu(x) } else { tape.tanh(x) };
                    pass.activations.push(y);
                    let y = match opts.quant {
                        Some(q) if feeds[act_point].is_some() => {
                            q.quantize_activation(tape, y, act_point, opts.residuals.as_deref_mut())?
                        }
                        _ => y,
                    };
                    act_point += 1;
                    y
                }
                LayerSpec::AvgPool { size } => tape.avg_pool(x, *size)?,
                LayerSpec::Upsample { factor } => tape.upsample(x, *factor)?,
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                    let per = layer.spec.output_shape(&tape.shape(x)[1..])?;
                    let mut shape = vec![n];
                    shape.extend(per);
                    tape.reshape(x, &shape)?
                }
            };
            pass.params.push(vars);
        }
        pass.output = x;
        Ok(pass)
    }

    /// Train-mode forward that also folds batch statistics into the running
    /// statistics with `momentum`.
    pub fn train_forward(&mut self, tape: &mut Tape<T>, input: Var, momentum: T) -> Result<ForwardPass> {
        let pass = self.forward(tape, input, ForwardOptions::train())?;
        let mut stats = pass.bn_stats.iter();
        for layer in &mut self.layers {
            if let Some(running) = layer.running.as_mut() {
                let (m, v) = stats.next().expect("one stats pair per BN layer");
                running.update(tape.value(*m).data(), tape.value(*v).data(), momentum);
            }
        }
        Ok(pass)
    }

    /// Eval-mode logits for a batch, no gradients.
    pub fn predict_logits(&self, input: &Tensor<T>, quant: Option<&QuantState<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut opts = ForwardOptions::eval();
        opts.quant = quant;
        let pass = self.forward(&mut tape, x, opts)?;
        Ok(tape.value(pass.output).clone())
    }
}

fn role_of(spec: &LayerSpec, index: usize) -> ParamRole {
    match (spec, index) {
        (LayerSpec::BatchNorm { .. }, _) => ParamRole::BnAffine,
        (LayerSpec::Dense { .. }, 1) => ParamRole::Bias,
        _ => ParamRole::Weight,
    }
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// Row-wise argmax with ties resolved toward the smaller index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
