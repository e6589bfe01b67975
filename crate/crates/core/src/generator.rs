//! Label-conditioned generator and its data-synthesis objective.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::bns::{
    bns_loss, cbns_loss, dbns_loss, per_class_batch_stats, BnRunningStats, ClassCentroids, DistortionParams,
};
use crate::error::{shape_err, Error, Result};
use crate::nn::{argmax_rows, ForwardOptions, ForwardPass, LayerSpec, Network, ParamRole};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// `[C, H, W]`; `H` and `W` must be divisible by 4.
    pub out_shape: [usize; 3],
    pub base_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { latent_dim: 64, num_classes: 8, out_shape: [1, 16, 16], base_channels: 16 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.out_shape;
        if self.latent_dim == 0 || self.num_classes == 0 || self.base_channels < 2 || c == 0 {
            return Err(Error::Config(format!("degenerate generator configuration {self:?}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("generator output {:?} needs H, W divisible by 4", self.out_shape)));
        }
        Ok(())
    }

    /// Dense → reshape → BN → (upsample, conv, BN, ReLU) × 2 → conv → tanh.
    pub fn body_specs(&self) -> Vec<LayerSpec> {
        let [c, h, w] = self.out_shape;
        let b = self.base_channels;
        let half = b / 2;
        let conv = |i, o| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride: 1, pad: 1 };
        vec![
            LayerSpec::Dense { inputs: self.latent_dim, outputs: b * (h / 4) * (w / 4) },
            LayerSpec::Reshape { shape: vec![b, h / 4, w / 4] },
            LayerSpec::BatchNorm { channels: b },
            LayerSpec::Upsample { factor: 2 },
            conv(b, b),
            LayerSpec::BatchNorm { channels: b },
            LayerSpec::Relu,
            LayerSpec::Upsample { factor: 2 },
            conv(b, half),
            LayerSpec::BatchNorm { channels: half },
            LayerSpec::Relu,
            conv(half, c),
            LayerSpec::Tanh,
        ]
    }
}

/// `G(z | y)`: the label embedding multiplies the noise elementwise before the body.
///
/// The body's BN layers always normalize with batch statistics; their
/// running statistics are never used.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet<T: Real = f32> {
    pub config: GeneratorConfig,
    /// `[num_classes, latent_dim]`.
    pub embedding: Tensor<T>,
    pub body: Network<T>,
}

/// Vars of one generator pass.
pub struct GeneratorPass {
    pub images: Var,
    pub embedding: Var,
    pub body: ForwardPass,
}

impl<T: Real> GeneratorNet<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let embedding =
            Tensor::from_fn(&[config.num_classes, config.latent_dim], |_| T::of(StandardNormal.sample(rng)));
        let body = Network::new(&[config.latent_dim], &config.body_specs(), rng)?;
        Ok(Self { config, embedding, body })
    }

    pub fn cast<U: Real>(&self) -> GeneratorNet<U> {
        GeneratorNet { config: self.config.clone(), embedding: self.embedding.cast(), body: self.body.cast() }
    }

    /// Records `G(z | labels)` on `tape`; `z` is `[B, latent_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        labels: &[usize],
        z: Tensor<T>,
        trainable: bool,
    ) -> Result<GeneratorPass> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Label { label: bad, classes: self.config.num_classes });
        }
        if z.shape() != [labels.len(), self.config.latent_dim] {
            return shape_err(format!("noise {:?} for {} labels", z.shape(), labels.len()));
        }
        let table = if trainable { tape.param(&self.embedding) } else { tape.constant(self.embedding.clone()) };
        let emb = tape.gather(table, labels)?;
        let z = tape.constant(z);
        let h = tape.mul(emb, z)?;
        let body = self.body.forward(tape, h, ForwardOptions::train().trainable(trainable))?;
        Ok(GeneratorPass { images: body.output, embedding: table, body })
    }

    pub fn sample_noise(&self, batch: usize, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(&[batch, self.config.latent_dim], |_| T::of(StandardNormal.sample(rng)))
    }

    pub fn store_grads(&mut self, pass: &GeneratorPass, grads: &Gradients<T>) -> Result<()> {
        self.embedding.set_grad(grads.get_or_zero(pass.embedding).into_data())?;
        self.body.store_grads(&pass.body, grads)
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor<T>)> {
        let mut out = vec![(ParamRole::Weight, &mut self.embedding)];
        out.extend(self.body.params_mut());
        out
    }

    pub fn params(&self) -> Vec<(ParamRole, &Tensor<T>)> {
        let mut out = vec![(ParamRole::Weight, &self.embedding)];
        out.extend(self.body.params());
        out
    }
}

/// Draws `z ~ N(0, I)` and returns `G(z | labels)` as `[B, C, H, W]`.
pub fn generate<T: Real>(g: &GeneratorNet<T>, labels: &[usize], rng: &mut impl Rng) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let z = g.sample_noise(labels.len(), rng);
    let mut tape = Tape::new();
    let pass = g.forward(&mut tape, labels, z, false)?;
    Ok(tape.value(pass.images).clone())
}

/// Batch labels over `0..num_classes`: every class once when the batch is
/// large enough, the rest uniform, then shuffled.
pub fn sample_labels(num_classes: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    if num_classes == 0 {
        return Vec::new();
    }
    let mut labels: Vec<usize> = if batch >= num_classes { (0..num_classes).collect() } else { Vec::new() };
    while labels.len() < batch {
        labels.push(rng.random_range(0..num_classes));
    }
    labels.shuffle(rng);
    labels
}

/// Argmax of `model`'s eval-mode logits; ties go to the smaller class.
pub fn predict_labels<T: Real>(model: &Network<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.predict_logits(images, None)?))
}

/// Trade-offs of the generator objective (`alpha1..alpha4`) and of the
/// distillation term in the quantized model's objective (`alpha5`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 0.5, alpha2: 0.2, alpha3: 0.9, alpha4: 0.05, alpha5: 20.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
            ("alpha5", self.alpha5),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("{name} = {a} must be a non-negative number")));
            }
        }
        Ok(())
    }

    /// `α1·ce + α2·bns + α3·dbns + α4·cbns`.
    pub fn combine(&self, ce: f64, bns: f64, dbns: f64, cbns: f64) -> f64 {
        self.alpha1 * ce + self.alpha2 * bns + self.alpha3 * dbns + self.alpha4 * cbns
    }
}

/// The generator objective and its parts.
pub struct GeneratorLoss<T> {
    pub total: Var,
    pub ce: T,
    pub bns: T,
    pub dbns: T,
    pub cbns: T,
    /// Per-class D-BNS and C-BNS values for classes with a centroid.
    pub dbns_per_class: BTreeMap<usize, T>,
    pub cbns_per_class: BTreeMap<usize, T>,
    /// Classes in the batch whose centroid terms were omitted.
    pub skipped: usize,
}

/// Runs the frozen teacher on `images` and builds the weighted objective.
///
/// The teacher normalizes with its running statistics while the batch
/// statistics are measured at its BN inputs. Terms whose weight is zero
/// are not built, and D-BNS draws from `rng` only when it is.
#[allow(clippy::too_many_arguments)]
pub fn generator_total_loss<T: Real>(
    tape: &mut Tape<T>,
    images: Var,
    labels: &[usize],
    teacher: &Network<T>,
    running: &BnRunningStats<T>,
    centroids: &ClassCentroids<T>,
    w: &LossWeights,
    d: &DistortionParams,
    rng: &mut impl Rng,
) -> Result<GeneratorLoss<T>> {
    w.validate()?;
    let pass = teacher.forward(tape, images, ForwardOptions::eval())?;
    let ce = tape.softmax_cross_entropy(pass.output, labels)?;
    let bns = bns_loss(tape, &pass.bn_stats, running)?;
    let mut out = GeneratorLoss {
        total: ce,
        ce: tape.value(ce).item(),
        bns: tape.value(bns).item(),
        dbns: T::zero(),
        cbns: T::zero(),
        dbns_per_class: BTreeMap::new(),
        cbns_per_class: BTreeMap::new(),
        skipped: 0,
    };
    let mut terms = vec![tape.scale(ce, T::of(w.alpha1)), tape.scale(bns, T::of(w.alpha2))];
    if (w.alpha3 > 0.0 || w.alpha4 > 0.0) && !centroids.centroids.is_empty() {
        let stats = per_class_batch_stats(tape, &pass.bn_inputs, labels, centroids.k)?;
        if w.alpha3 > 0.0 {
            let l = dbns_loss(tape, &stats, centroids, d, rng)?;
            out.dbns = tape.value(l.loss).item();
            out.skipped = l.skipped;
            out.dbns_per_class = l.per_class;
            terms.push(tape.scale(l.loss, T::of(w.alpha3)));
        }
        if w.alpha4 > 0.0 {
            let l = cbns_loss(tape, &stats, centroids)?;
            out.cbns = tape.value(l.loss).item();
            out.skipped = l.skipped;
            out.cbns_per_class = l.per_class;
            terms.push(tape.scale(l.loss, T::of(w.alpha4)));
        }
    }
    out.total = tape.add_all(&terms)?;
    Ok(out)
}
