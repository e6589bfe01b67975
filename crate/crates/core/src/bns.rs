//! Batch-normalization statistics at three granularities and the losses
//! that align synthetic data with them.
//!
//! Layers are numbered `1..=L` in order of appearance. The coarse loss
//! covers every layer; the class-centroid losses cover the deep layers
//! `K..=L` only.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{channel_moments, Tape, Var};
use crate::data::CalibrationSet;
use crate::error::{shape_err, Error, Result};
use crate::nn::{ForwardOptions, Network};
use crate::tensor::{Real, Tensor};

/// Per-channel mean and biased variance of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStat<T: Real = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Running statistics of every BN layer of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunningStats<T: Real = f32> {
    pub layers: Vec<BnStat<T>>,
}

/// Statistics of a single image's pre-normalization activations.
#[derive(Clone, Debug, PartialEq)]
pub struct PerImageBns<T: Real = f32> {
    pub layers: Vec<BnStat<T>>,
}

/// Per-class alignment targets for layers `K..=L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCentroids<T: Real = f32> {
    /// First deep layer (1-based).
    pub k: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    /// Class → statistics for layers `k..=num_layers`.
    pub centroids: BTreeMap<usize, Vec<BnStat<T>>>,
}

impl<T: Real> ClassCentroids<T> {
    pub fn empty(k: usize, num_layers: usize, num_classes: usize) -> Self {
        Self { k, num_layers, num_classes, centroids: BTreeMap::new() }
    }

    pub fn available_classes(&self) -> BTreeSet<usize> {
        self.centroids.keys().copied().collect()
    }

    pub fn is_available(&self, class: usize) -> bool {
        self.centroids.contains_key(&class)
    }

    /// Copy with `class` marked unavailable.
    pub fn without(&self, class: usize) -> Self {
        let mut c = self.clone();
        c.centroids.remove(&class);
        c
    }

    pub fn cast<U: Real>(&self) -> ClassCentroids<U> {
        ClassCentroids {
            k: self.k,
            num_layers: self.num_layers,
            num_classes: self.num_classes,
            centroids: self
                .centroids
                .iter()
                .map(|(&c, v)| (c, v.iter().map(|s| BnStat { mean: s.mean.cast(), var: s.var.cast() }).collect()))
                .collect(),
        }
    }
}

/// Standard deviations of the Gaussian centroid distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionParams {
    pub mean_std: f64,
    pub var_std: f64,
}

impl Default for DistortionParams {
    fn default() -> Self {
        Self { mean_std: 0.5, var_std: 1.0 }
    }
}

impl DistortionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_std >= 0.0 && self.var_std >= 0.0) {
            return Err(Error::Config(format!(
                "distortion standard deviations must be non-negative, got {} and {}",
                self.mean_std, self.var_std
            )));
        }
        Ok(())
    }
}

/// First deep layer: `max(1, ceil(L/2) − 2)`.
pub fn deep_layer_start(num_layers: usize) -> usize {
    (num_layers.div_ceil(2)).saturating_sub(2).max(1)
}

pub fn collect_running_stats<T: Real>(model: &Network<T>) -> Result<BnRunningStats<T>> {
    let layers: Vec<BnStat<T>> =
        model.bn_running().into_iter().map(|r| BnStat { mean: r.mean.clone(), var: r.var.clone() }).collect();
    if layers.is_empty() {
        return Err(Error::Invalid("model has no batch-normalization layers".into()));
    }
    Ok(BnRunningStats { layers })
}

/// Per-image statistics of every sample in `images`, from one eval-mode pass.
pub fn per_image_bns_batch<T: Real>(model: &Network<T>, images: &Tensor<T>) -> Result<Vec<PerImageBns<T>>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = model.forward(&mut tape, x, ForwardOptions::eval())?;
    let mut out: Vec<PerImageBns<T>> = (0..n).map(|_| PerImageBns { layers: Vec::new() }).collect();
    for &input in &pass.bn_inputs {
        let v = tape.value(input);
        let c = v.shape()[1];
        let s = v.numel() / (n * c);
        for (i, img) in out.iter_mut().enumerate() {
            let (m, var) = channel_moments(v.data(), n, c, s, &[i]);
            img.layers.push(BnStat { mean: Tensor::new(vec![c], m)?, var: Tensor::new(vec![c], var)? });
        }
    }
    Ok(out)
}

/// Statistics of one image (`[1, C, H, W]`) at every BN layer input.
pub fn per_image_bns<T: Real>(model: &Network<T>, image: &Tensor<T>) -> Result<PerImageBns<T>> {
    if image.shape().first() != Some(&1) {
        return Err(Error::Invalid(format!("per-image statistics need a batch of one, got {:?}", image.shape())));
    }
    Ok(per_image_bns_batch(model, image)?.remove(0))
}

/// Uses each calibration image's deep-layer statistics as its class centroid.
pub fn build_class_centroids<T: Real>(
    model: &Network<T>,
    calib: &CalibrationSet,
    k: usize,
    num_classes: usize,
) -> Result<ClassCentroids<T>> {
    let num_layers = model.bn_layer_count();
    if k == 0 || k > num_layers {
        return Err(Error::Invalid(format!("deep-layer start {k} outside 1..={num_layers}")));
    }
    let mut out = ClassCentroids::empty(k, num_layers, num_classes);
    if calib.is_empty() {
        return Ok(out);
    }
    let mut seen = BTreeSet::new();
    for item in calib.items() {
        if !seen.insert(item.label) {
            return Err(Error::Invalid(format!("class {} appears twice in the calibration set", item.label)));
        }
        if item.label >= num_classes {
            return Err(Error::Label { label: item.label, classes: num_classes });
        }
    }
    let images: Tensor<T> = calib.images()?.cast();
    let stats = per_image_bns_batch(model, &images)?;
    for (item, s) in calib.items().iter().zip(stats) {
        out.centroids.insert(item.label, s.layers[k - 1..].to_vec());
    }
    Ok(out)
}

/// Batch statistics of a synthetic batch restricted to each class, deep layers only.
pub struct ClassBatchStats {
    pub k: usize,
    /// Class → `(mean, var)` vars for layers `k..=L`.
    pub per_class: BTreeMap<usize, Vec<(Var, Var)>>,
}

pub fn per_class_batch_stats<T: Real>(
    tape: &mut Tape<T>,
    bn_inputs: &[Var],
    labels: &[usize],
    k: usize,
) -> Result<ClassBatchStats> {
    if k == 0 || k > bn_inputs.len() {
        return Err(Error::Invalid(format!("deep-layer start {k} outside 1..={}", bn_inputs.len())));
    }
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        rows.entry(l).or_default().push(i);
    }
    let mut per_class = BTreeMap::new();
    for (class, r) in rows {
        let mut layers = Vec::with_capacity(bn_inputs.len() - k + 1);
        for &input in &bn_inputs[k - 1..] {
            layers.push((tape.channel_mean(input, &r)?, tape.channel_var(input, &r)?));
        }
        per_class.insert(class, layers);
    }
    Ok(ClassBatchStats { k, per_class })
}

/// Coarse alignment: `Σ_l ‖μ_l − μ_l^F‖² + ‖σ²_l − σ²_l^F‖²` over all layers.
pub fn bns_loss<T: Real>(tape: &mut Tape<T>, batch_stats: &[(Var, Var)], running: &BnRunningStats<T>) -> Result<Var> {
    if batch_stats.len() != running.layers.len() {
        return shape_err(format!(
            "{} layers of batch statistics against {} running layers",
            batch_stats.len(),
            running.layers.len()
        ));
    }
    let mut terms = Vec::with_capacity(2 * batch_stats.len());
    for (&(m, v), r) in batch_stats.iter().zip(&running.layers) {
        terms.push(tape.sq_dist(m, r.mean.data())?);
        terms.push(tape.sq_dist(v, r.var.data())?);
    }
    tape.add_all(&terms)
}

/// Result of a class-centroid alignment loss.
pub struct AlignmentLoss<T> {
    pub loss: Var,
    /// Value contributed by each aligned class.
    pub per_class: BTreeMap<usize, T>,
    /// Classes present in the batch but without a centroid.
    pub skipped: usize,
}

fn centroid_loss<T: Real>(
    tape: &mut Tape<T>,
    stats: &ClassBatchStats,
    centroids: &ClassCentroids<T>,
    mut target: impl FnMut(usize, &BnStat<T>) -> (Vec<T>, Vec<T>),
) -> Result<AlignmentLoss<T>> {
    if stats.k != centroids.k {
        return Err(Error::Invalid(format!(
            "batch statistics start at layer {} but centroids at {}",
            stats.k, centroids.k
        )));
    }
    let mut class_terms = Vec::new();
    let mut per_class = BTreeMap::new();
    let mut skipped = 0;
    for (&class, layers) in &stats.per_class {
        let Some(centre) = centroids.centroids.get(&class) else {
            skipped += 1;
            continue;
        };
        if centre.len() != layers.len() {
            return shape_err(format!(
                "centroid of class {class} has {} layers, batch has {}",
                centre.len(),
                layers.len()
            ));
        }
        let mut terms = Vec::with_capacity(2 * layers.len());
        for (&(m, v), c) in layers.iter().zip(centre) {
            let (tm, tv) = target(class, c);
            terms.push(tape.sq_dist(m, &tm)?);
            terms.push(tape.sq_dist(v, &tv)?);
        }
        let class_total = tape.add_all(&terms)?;
        per_class.insert(class, tape.value(class_total).item());
        class_terms.push(class_total);
    }
    let loss = tape.add_all(&class_terms)?;
    Ok(AlignmentLoss { loss, per_class, skipped })
}

/// Centroid alignment over layers `K..=L` for every class with a centroid.
pub fn cbns_loss<T: Real>(
    tape: &mut Tape<T>,
    stats: &ClassBatchStats,
    centroids: &ClassCentroids<T>,
) -> Result<AlignmentLoss<T>> {
    centroid_loss(tape, stats, centroids, |_, c| (c.mean.data().to_vec(), c.var.data().to_vec()))
}

/// Centroid alignment against Gaussian-distorted centroids, resampled per call.
///
/// One seed is drawn from `rng` per call and each class derives its own
/// noise stream from it, so a class's targets do not depend on which other
/// classes are aligned.
pub fn dbns_loss<T: Real>(
    tape: &mut Tape<T>,
    stats: &ClassBatchStats,
    centroids: &ClassCentroids<T>,
    d: &DistortionParams,
    rng: &mut impl Rng,
) -> Result<AlignmentLoss<T>> {
    d.validate()?;
    let base: u64 = rng.random();
    let mean_noise = Normal::new(0.0, d.mean_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let var_noise = Normal::new(0.0, d.var_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut streams: BTreeMap<usize, ChaCha8Rng> = BTreeMap::new();
    centroid_loss(tape, stats, centroids, |class, c| {
        let r = streams
            .entry(class)
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(base ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let tm = c.mean.data().iter().map(|&v| v + T::of(mean_noise.sample(r))).collect();
        let tv = c.var.data().iter().map(|&v| v + T::of(var_noise.sample(r))).collect();
        (tm, tv)
    })
}
