//! Classifier pretraining and the alternating generator / quantized-model loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bns::{
    build_class_centroids, collect_running_stats, deep_layer_start, BnRunningStats, ClassCentroids, DistortionParams,
};
use crate::data::{extract_calibration, CalibrationSet, Dataset};
use crate::error::{Error, Result};
use crate::generator::{generate, generator_total_loss, sample_labels, GeneratorConfig, GeneratorNet, LossWeights};
use crate::nn::{argmax_rows, ForwardOptions, ForwardPass, LayerSpec, Network};
use crate::optim::{Adam, NesterovSgd};
use crate::quant::{calibrate, QuantPolicy, QuantState, SteResiduals};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 · factor^⌊epoch / every⌋`.
    Step { every: usize, factor: f64 },
    /// `lr0 · ½(1 + cos(π · epoch / total))`.
    Cosine,
}

pub fn lr_schedule(kind: LrSchedule, lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    match kind {
        LrSchedule::Step { every, factor } => lr0 * factor.powi((epoch / every.max(1)) as i32),
        LrSchedule::Cosine => {
            if total_epochs == 0 {
                return lr0;
            }
            let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Optimization settings of the data-free quantization loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_quantized: f64,
    pub generator_schedule: LrSchedule,
    pub quantized_schedule: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Fraction of each quantized-model batch drawn (with replacement) from the calibration set.
    pub mix_ratio: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub generator_channels: usize,
    pub weights: LossWeights,
    pub distortion: DistortionParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            total_epochs: 60,
            steps_per_epoch: 25,
            batch_size: 64,
            lr_generator: 1e-3,
            lr_quantized: 1e-3,
            generator_schedule: LrSchedule::Step { every: 100, factor: 0.1 },
            quantized_schedule: LrSchedule::Cosine,
            weight_decay: 1e-4,
            momentum: 0.9,
            mix_ratio: 0.25,
            seed: 0,
            latent_dim: 64,
            generator_channels: 16,
            weights: LossWeights::default(),
            distortion: DistortionParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.distortion.validate()?;
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio {} is outside [0, 1]", self.mix_ratio)));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_quantized", self.lr_quantized),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a non-negative number")));
            }
        }
        Ok(())
    }

    fn generator_config(&self, teacher: &Network<f32>) -> Result<GeneratorConfig> {
        let out_shape: [usize; 3] =
            teacher.input_shape.as_slice().try_into().map_err(|_| {
                Error::Config(format!("generator needs a [C, H, W] input, got {:?}", teacher.input_shape))
            })?;
        Ok(GeneratorConfig {
            latent_dim: self.latent_dim,
            num_classes: num_classes(teacher)?,
            out_shape,
            base_channels: self.generator_channels,
        })
    }
}

/// Which parts of the method are switched on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub synthetic: bool,
    pub cbns: bool,
    pub dbns: bool,
    pub predict_labels: bool,
    /// Calibration classes `0..n`; `None` uses every class, `Some(0)` none.
    pub classes: Option<usize>,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { synthetic: true, cbns: true, dbns: true, predict_labels: false, classes: None }
    }
}

impl Ablation {
    pub fn weights(&self, w: LossWeights) -> LossWeights {
        LossWeights {
            alpha3: if self.dbns { w.alpha3 } else { 0.0 },
            alpha4: if self.cbns { w.alpha4 } else { 0.0 },
            ..w
        }
    }
}

fn num_classes<T: Real>(model: &Network<T>) -> Result<usize> {
    match model.output_shape().as_slice() {
        [k] if *k >= 2 => Ok(*k),
        s => Err(Error::Invalid(format!("classifier must output [classes], got {s:?}"))),
    }
}

/// Value of the quantized model's objective and its parts.
pub struct QuantizedLoss<T> {
    pub total: Var,
    pub ce: T,
    pub kd: T,
    pub pass: ForwardPass,
}

/// `CE(Q(x), y) + α5 · KL(F(x) ‖ Q(x))` with `Q` fake-quantized, BN in
/// eval mode and the teacher detached.
#[allow(clippy::too_many_arguments)]
pub fn quantized_model_loss<T: Real>(
    tape: &mut Tape<T>,
    q: &Network<T>,
    quant: &QuantState<T>,
    teacher: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    alpha5: f64,
    residuals: Option<&mut SteResiduals<T>>,
) -> Result<QuantizedLoss<T>> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let teacher_logits = teacher.predict_logits(images, None)?;
    let x = tape.constant(images.clone());
    let mut opts = ForwardOptions::eval().trainable(true).quantized(quant);
    opts.residuals = residuals;
    let pass = q.forward(tape, x, opts)?;
    let t = tape.constant(teacher_logits);
    let ce = tape.softmax_cross_entropy(pass.output, labels)?;
    let kd = tape.kl_divergence(pass.output, t)?;
    let weighted = tape.scale(kd, T::of(alpha5));
    let total = tape.add(ce, weighted)?;
    Ok(QuantizedLoss { total, ce: tape.value(ce).item(), kd: tape.value(kd).item(), pass })
}

/// Top-1 accuracy with eval-mode BN and, when given, active quantizers.
pub fn evaluate(model: &Network<f32>, quant: Option<&QuantState<f32>>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(256) {
        let logits = model.predict_logits(&data.images.select_rows(chunk)?, quant)?;
        correct += argmax_rows(&logits).iter().zip(chunk).filter(|(p, &i)| **p == data.labels[i]).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Full-precision classifier training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Conv widths; every two convolutions are followed by a 2×2 average pool.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 8, 16, 16, 32, 32],
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("classifier widths must be non-empty and positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pretraining batch_size must be at least 2".into()));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a non-negative number")));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum {} is outside (0, 1]", self.bn_momentum)));
        }
        Ok(())
    }
}

/// Conv-BN-ReLU blocks, a 2×2 average pool after every second block, then
/// one dense head. Every BN layer sits on a convolution, so `L = widths.len()`.
pub fn classifier_specs(input: [usize; 3], widths: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
    let [mut c, mut h, mut w] = input;
    let mut specs = Vec::new();
    for (i, &width) in widths.iter().enumerate() {
        specs.push(LayerSpec::Conv2d { in_channels: c, out_channels: width, kernel: 3, stride: 1, pad: 1 });
        specs.push(LayerSpec::BatchNorm { channels: width });
        specs.push(LayerSpec::Relu);
        c = width;
        if i % 2 == 1 && h % 2 == 0 && w % 2 == 0 && h > 2 {
            specs.push(LayerSpec::AvgPool { size: 2 });
            h /= 2;
            w /= 2;
        }
    }
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Dense { inputs: c * h * w, outputs: num_classes });
    Ok(specs)
}

/// Trains a float classifier with SGD and a cosine schedule, then replaces
/// each BN layer's running statistics by the exact training-set statistics.
pub fn pretrain_classifier(train: &Dataset, cfg: &PretrainConfig) -> Result<(Network<f32>, Vec<f64>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shape: [usize; 3] = train.images.shape()[1..]
        .try_into()
        .map_err(|_| Error::Shape(format!("expected [N, C, H, W] images, got {:?}", train.images.shape())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = classifier_specs(shape, &cfg.widths, train.num_classes)?;
    let mut net = Network::<f32>::new(&shape, &specs, &mut rng)?;
    let mut opt = NesterovSgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = lr_schedule(LrSchedule::Cosine, cfg.lr, epoch, cfg.epochs);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let mut tape = Tape::new();
            let x = tape.constant(train.images.select_rows(chunk)?);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let pass = net.train_forward(&mut tape, x, cfg.bn_momentum as f32)?;
            let loss = tape.softmax_cross_entropy(pass.output, &labels)?;
            total += tape.value(loss).item() as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            net.store_grads(&pass, &grads)?;
            opt.step(net.params_mut());
        }
        losses.push(total / batches.max(1) as f64);
    }
    let mut tape = Tape::new();
    let x = tape.constant(train.images.clone());
    net.train_forward(&mut tape, x, 1.0)?;
    net.zero_grads();
    Ok((net, losses))
}

/// Teacher-side state shared by every step of the loop.
pub struct FddaContext<'a> {
    pub teacher: &'a Network<f32>,
    pub running: BnRunningStats<f32>,
    pub centroids: ClassCentroids<f32>,
    pub calib: CalibrationSet,
    pub num_classes: usize,
    pub weights: LossWeights,
    pub synthetic: bool,
}

impl<'a> FddaContext<'a> {
    pub fn new(
        teacher: &'a Network<f32>,
        calib: CalibrationSet,
        cfg: &TrainConfig,
        ablation: &Ablation,
    ) -> Result<Self> {
        let running = collect_running_stats(teacher)?;
        let nc = num_classes(teacher)?;
        let k = deep_layer_start(running.layers.len());
        let centroids = build_class_centroids(teacher, &calib, k, nc)?;
        Ok(Self {
            teacher,
            running,
            centroids,
            calib,
            num_classes: nc,
            weights: ablation.weights(cfg.weights),
            synthetic: ablation.synthetic,
        })
    }
}

/// One Adam step of the generator on its objective; returns the loss.
pub fn generator_step(
    g: &mut GeneratorNet<f32>,
    ctx: &FddaContext<'_>,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let labels = sample_labels(ctx.num_classes, cfg.batch_size, rng);
    let z = g.sample_noise(labels.len(), rng);
    let mut tape = Tape::new();
    let pass = g.forward(&mut tape, &labels, z, true)?;
    let loss = generator_total_loss(
        &mut tape,
        pass.images,
        &labels,
        ctx.teacher,
        &ctx.running,
        &ctx.centroids,
        &ctx.weights,
        &cfg.distortion,
        rng,
    )?;
    let value = tape.value(loss.total).item() as f64;
    let grads = tape.backward(loss.total)?;
    g.store_grads(&pass, &grads)?;
    opt.step(g.params_mut());
    Ok(value)
}

/// Adam updates of the generator alone; returns the mean loss per epoch.
pub fn warmup_generator(
    g: &mut GeneratorNet<f32>,
    ctx: &FddaContext<'_>,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        opt.lr = lr_schedule(cfg.generator_schedule, cfg.lr_generator, epoch, cfg.warmup_epochs + cfg.total_epochs);
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            total += generator_step(g, ctx, cfg, opt, rng)?;
        }
        out.push(total / cfg.steps_per_epoch as f64);
    }
    Ok(out)
}

/// Builds one quantized-model batch: `round(mix_ratio · batch)` calibration
/// samples drawn with replacement, the rest synthetic when the generator is on.
pub fn quantized_batch(
    g: &GeneratorNet<f32>,
    ctx: &FddaContext<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Tensor<f32>, Vec<usize>)>> {
    let n_cal = if ctx.calib.is_empty() { 0 } else { (cfg.mix_ratio * cfg.batch_size as f64).round() as usize };
    let n_syn = if ctx.synthetic { cfg.batch_size - n_cal } else { 0 };
    if n_cal + n_syn == 0 {
        return Ok(None);
    }
    let mut parts = Vec::new();
    let mut labels = Vec::with_capacity(n_cal + n_syn);
    if n_syn > 0 {
        let l = sample_labels(ctx.num_classes, n_syn, rng);
        parts.push(generate(g, &l, rng)?);
        labels.extend(l);
    }
    if n_cal > 0 {
        let idx: Vec<usize> = (0..n_cal).map(|_| rng.random_range(0..ctx.calib.len())).collect();
        parts.push(ctx.calib.images()?.select_rows(&idx)?);
        labels.extend(idx.iter().map(|&i| ctx.calib.items()[i].label));
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Some((Tensor::concat_rows(&refs)?, labels)))
}

/// Per-step losses of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub generator_losses: Vec<f64>,
    pub quantized_losses: Vec<f64>,
    /// The quantized model had no data to train on.
    pub quantized_noop: bool,
}

impl EpochMetrics {
    fn mean(v: &[f64]) -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_generator_loss(&self) -> Option<f64> {
        Self::mean(&self.generator_losses)
    }

    pub fn mean_quantized_loss(&self) -> Option<f64> {
        Self::mean(&self.quantized_losses)
    }
}

/// Optimizer state carried across epochs.
pub struct Optimizers {
    pub generator: Adam,
    pub quantized: NesterovSgd,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            generator: Adam::new(cfg.lr_generator),
            quantized: NesterovSgd::new(cfg.lr_quantized, cfg.momentum, cfg.weight_decay),
        }
    }
}

/// One epoch: per step a generator update, then a quantized-model update on
/// a fresh batch. `epoch` counts from the end of warm-up.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    g: &mut GeneratorNet<f32>,
    q: &mut Network<f32>,
    quant: &QuantState<f32>,
    ctx: &FddaContext<'_>,
    cfg: &TrainConfig,
    epoch: usize,
    opts: &mut Optimizers,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    opts.generator.lr = lr_schedule(
        cfg.generator_schedule,
        cfg.lr_generator,
        cfg.warmup_epochs + epoch,
        cfg.warmup_epochs + cfg.total_epochs,
    );
    opts.quantized.lr = lr_schedule(cfg.quantized_schedule, cfg.lr_quantized, epoch, cfg.total_epochs);
    let mut m = EpochMetrics::default();
    for _ in 0..cfg.steps_per_epoch {
        if ctx.synthetic {
            m.generator_losses.push(generator_step(g, ctx, cfg, &mut opts.generator, rng)?);
        }
        let Some((images, labels)) = quantized_batch(g, ctx, cfg, rng)? else {
            m.quantized_noop = true;
            continue;
        };
        let mut tape = Tape::new();
        let loss = quantized_model_loss(&mut tape, q, quant, ctx.teacher, &images, &labels, ctx.weights.alpha5, None)?;
        m.quantized_losses.push(tape.value(loss.total).item() as f64);
        let pass = loss.pass;
        let grads = tape.backward(loss.total)?;
        q.store_grads(&pass, &grads)?;
        opts.quantized.step(q.params_mut());
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "lossG")]
    pub loss_g: Option<f64>,
    #[serde(rename = "lossQ")]
    pub loss_q: Option<f64>,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FddaReport {
    pub config: TrainConfig,
    pub policy: QuantPolicy,
    pub ablation: Ablation,
    pub bn_layers: usize,
    pub deep_layer_start: usize,
    pub calibration_classes: Vec<usize>,
    pub float_acc: f64,
    pub warmup_loss_g: Vec<f64>,
    pub per_epoch: Vec<EpochRecord>,
    /// Accuracy after the last epoch.
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub notes: Vec<String>,
}

pub struct FddaOutcome {
    pub quantized: Network<f32>,
    /// Highest test accuracy seen at the end of any epoch.
    pub best: Network<f32>,
    pub quant: QuantState<f32>,
    pub generator: GeneratorNet<f32>,
    pub centroids: ClassCentroids<f32>,
    pub report: FddaReport,
}

/// Quantizes `teacher` without its training data: calibration images (if
/// any), a warmed-up generator and alternating updates. Test accuracy is
/// measured after every epoch.
pub fn run_fdda(
    teacher: &Network<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    policy: QuantPolicy,
    ablation: &Ablation,
) -> Result<FddaOutcome> {
    cfg.validate()?;
    policy.validate()?;
    teacher.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut notes = Vec::new();

    let calib = match ablation.classes {
        Some(0) => CalibrationSet::default(),
        Some(n) => extract_calibration(train, Some(&(0..n).collect::<Vec<_>>()))?,
        None => extract_calibration(train, None)?,
    };
    let calib = if ablation.predict_labels {
        let predicted = calib.with_predicted_labels(teacher)?;
        if predicted.len() < calib.len() {
            notes.push(format!(
                "{} calibration image(s) dropped: predicted class already taken",
                calib.len() - predicted.len()
            ));
        }
        predicted
    } else {
        calib
    };
    if calib.is_empty() && !ablation.synthetic {
        return Err(Error::Config("no calibration images and no synthetic data: nothing to quantize with".into()));
    }
    let ctx = FddaContext::new(teacher, calib, cfg, ablation)?;
    let mut g = GeneratorNet::<f32>::new(cfg.generator_config(teacher)?, &mut rng)?;
    let mut opts = Optimizers::new(cfg);

    let warmup = if ablation.synthetic {
        warmup_generator(&mut g, &ctx, cfg, &mut opts.generator, &mut rng)?
    } else {
        Vec::new()
    };

    let mut q = teacher.clone();
    let calibration_data = if ctx.calib.is_empty() {
        notes.push("activation bounds calibrated on a synthetic batch".into());
        let labels = sample_labels(ctx.num_classes, cfg.batch_size, &mut rng);
        generate(&g, &labels, &mut rng)?
    } else {
        ctx.calib.images()?
    };
    let quant = calibrate(&q, &calibration_data, policy)?;

    let float_acc = evaluate(teacher, None, test)?;
    let mut per_epoch = Vec::with_capacity(cfg.total_epochs);
    let mut best = (evaluate(&q, Some(&quant), test)?, 0usize, q.clone());
    let mut noop_reported = false;
    for epoch in 0..cfg.total_epochs {
        let m = train_epoch(&mut g, &mut q, &quant, &ctx, cfg, epoch, &mut opts, &mut rng)?;
        if m.quantized_noop && !noop_reported {
            notes.push(
                "quantized model had no training data (mix_ratio 0, generator off); its updates were skipped".into(),
            );
            noop_reported = true;
        }
        let acc = evaluate(&q, Some(&quant), test)?;
        if acc > best.0 || per_epoch.is_empty() && acc >= best.0 {
            best = (acc, epoch + 1, q.clone());
        }
        per_epoch.push(EpochRecord {
            epoch: epoch + 1,
            loss_g: m.mean_generator_loss(),
            loss_q: m.mean_quantized_loss(),
            acc,
        });
    }
    let final_acc = per_epoch.last().map_or(best.0, |r| r.acc);
    let report = FddaReport {
        config: cfg.clone(),
        policy,
        ablation: ablation.clone(),
        bn_layers: ctx.running.layers.len(),
        deep_layer_start: ctx.centroids.k,
        calibration_classes: ctx.calib.labels(),
        float_acc,
        warmup_loss_g: warmup,
        per_epoch,
        final_acc,
        best_acc: best.0,
        best_epoch: best.1,
        notes,
    };
    Ok(FddaOutcome { quantized: q, best: best.2, quant, generator: g, centroids: ctx.centroids, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToyDatasetSpec};

    #[test]
    fn schedules() {
        let step = LrSchedule::Step { every: 100, factor: 0.1 };
        assert_eq!(lr_schedule(step, 1e-3, 0, 350), 1e-3);
        assert!((lr_schedule(step, 1e-3, 250, 350) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(step, 1e-3, 99, 350) - 1e-3).abs() < 1e-18);
        assert_eq!(lr_schedule(LrSchedule::Cosine, 0.1, 0, 60), 0.1);
        assert!(lr_schedule(LrSchedule::Cosine, 0.1, 60, 60).abs() < 1e-17);
        assert!((lr_schedule(LrSchedule::Cosine, 0.1, 30, 60) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn classifier_has_six_conv_bn_layers() {
        let specs = classifier_specs([1, 16, 16], &[8, 8, 16, 16, 32, 32], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f32>::new(&[1, 16, 16], &specs, &mut rng).unwrap();
        assert_eq!(net.bn_layer_count(), 6);
        assert_eq!(net.output_shape(), vec![8]);
        assert_eq!(deep_layer_start(net.bn_layer_count()), 1);
    }

    fn tiny_setup() -> (Dataset, Dataset, Network<f32>) {
        let spec =
            ToyDatasetSpec { num_classes: 3, image_size: [1, 8, 8], samples_per_class: 10, ..Default::default() };
        let (train, test) = make_toy_dataset(&spec).unwrap();
        let cfg = PretrainConfig { widths: vec![2, 2], epochs: 2, batch_size: 8, ..Default::default() };
        let (f, _) = pretrain_classifier(&train, &cfg).unwrap();
        (train, test, f)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            warmup_epochs: 1,
            total_epochs: 2,
            steps_per_epoch: 2,
            batch_size: 6,
            latent_dim: 4,
            generator_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn quantized_loss_identity_case() {
        let (train, _, f) = tiny_setup();
        let images = train.images.select_rows(&[0, 1, 2]).unwrap();
        let quant = calibrate(&f, &images, QuantPolicy::uniform(8)).unwrap();
        let labels = predict_labels_for(&f, &images);
        // Q without quantizers equals F: the distillation term vanishes.
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = f.forward(&mut tape, x, ForwardOptions::eval()).unwrap();
        let t = tape.constant(f.predict_logits(&images, None).unwrap());
        let kd = tape.kl_divergence(pass.output, t).unwrap();
        assert!(tape.value(kd).item().abs() < 1e-6);

        let mut tape = Tape::new();
        let l0 = quantized_model_loss(&mut tape, &f, &quant, &f, &images, &labels, 0.0, None).unwrap();
        assert_eq!(tape.value(l0.total).item(), l0.ce);
        let l20 = quantized_model_loss(&mut tape, &f, &quant, &f, &images, &labels, 20.0, None).unwrap();
        assert!((tape.value(l20.total).item() - (l20.ce + 20.0 * l20.kd)).abs() < 1e-5);
        assert!(quantized_model_loss(&mut tape, &f, &quant, &f, &images.select_rows(&[]).unwrap(), &[], 20.0, None)
            .is_err());
    }

    fn predict_labels_for(f: &Network<f32>, images: &Tensor<f32>) -> Vec<usize> {
        argmax_rows(&f.predict_logits(images, None).unwrap())
    }

    #[test]
    fn fdda_is_deterministic_and_leaves_teacher_alone() {
        let (train, test, f) = tiny_setup();
        let before = f.clone();
        let a = run_fdda(&f, &train, &test, &tiny_cfg(), QuantPolicy::default(), &Ablation::default()).unwrap();
        let b = run_fdda(&f, &train, &test, &tiny_cfg(), QuantPolicy::default(), &Ablation::default()).unwrap();
        assert_eq!(f, before);
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.report.per_epoch.len(), 2);
        assert!(a.report.per_epoch.iter().all(|r| r.loss_g.unwrap().is_finite() && r.loss_q.unwrap().is_finite()));
    }

    #[test]
    fn null_update_changes_nothing() {
        let (train, test, f) = tiny_setup();
        let zero = LossWeights { alpha1: 0.0, alpha2: 0.0, alpha3: 0.0, alpha4: 0.0, alpha5: 0.0 };
        let cfg = TrainConfig { lr_generator: 0.0, lr_quantized: 0.0, weights: zero, ..tiny_cfg() };
        let out = run_fdda(&f, &train, &test, &cfg, QuantPolicy::default(), &Ablation::default()).unwrap();
        let strip = |n: &Network<f32>| {
            let mut n = n.clone();
            n.zero_grads();
            n
        };
        assert_eq!(strip(&out.quantized), strip(&f));
    }

    #[test]
    fn calibration_only_arms() {
        let (train, test, f) = tiny_setup();
        let ablation = Ablation { synthetic: false, ..Default::default() };
        let out = run_fdda(&f, &train, &test, &tiny_cfg(), QuantPolicy::default(), &ablation).unwrap();
        assert!(out.report.per_epoch.iter().all(|r| r.loss_g.is_none() && r.loss_q.is_some()));

        let cfg = TrainConfig { mix_ratio: 0.0, ..tiny_cfg() };
        let out = run_fdda(&f, &train, &test, &cfg, QuantPolicy::default(), &ablation).unwrap();
        assert!(out.report.notes.iter().any(|n| n.contains("no training data")));

        let none = Ablation { synthetic: false, classes: Some(0), ..Default::default() };
        assert!(run_fdda(&f, &train, &test, &tiny_cfg(), QuantPolicy::default(), &none).is_err());
    }
}
