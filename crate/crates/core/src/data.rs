//! Toy labeled image data and the one-image-per-class calibration set.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Network};
use crate::tensor::Tensor;

/// Parameters of the synthetic classification task.
///
/// Each class is a fixed pattern: a Gaussian blob at a class-specific
/// position plus a linear gradient at a class-specific orientation. Every
/// sample adds a sub-pixel shift, a contrast factor, a brightness offset and
/// pixel noise, all scaled by `noise_std`. Pixels are clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub image_size: [usize; 3],
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self { num_classes: 8, image_size: [1, 16, 16], samples_per_class: 100, noise_std: 0.45, seed: 7 }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_size;
        if self.num_classes < 2 {
            return Err(Error::Config("toy dataset needs at least 2 classes".into()));
        }
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::Shape(format!("toy image size {:?} is too small", self.image_size)));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("toy dataset needs at least 2 samples per class".into()));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std {} must be non-negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Labeled images, `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }
}

fn class_pattern(class: usize, num_classes: usize, h: usize, w: usize, dy: f64, dx: f64) -> Vec<f64> {
    let side = h.min(w) as f64;
    let phi = 2.0 * PI * class as f64 / num_classes as f64;
    let theta = PI * class as f64 / num_classes as f64 + 0.3;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (by, bx) = (cy + 0.3 * side * phi.sin() + dy, cx + 0.3 * side * phi.cos() + dx);
    let sigma = 0.15 * side;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let blob = (-((fy - by).powi(2) + (fx - bx).powi(2)) / (2.0 * sigma * sigma)).exp();
            let grad = ((fx - cx) * theta.cos() + (fy - cy) * theta.sin()) / (side / 2.0);
            out.push(1.2 * blob + 0.6 * grad - 0.4);
        }
    }
    out
}

/// Builds the toy task and splits each class 80/20 by sample index.
pub fn make_toy_dataset(spec: &ToyDatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let [c, h, w] = spec.image_size;
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise_std;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n_train = spec.samples_per_class * 4 / 5;
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            let dy = 3.0 * sigma * rng.random_range(-1.0..=1.0);
            let dx = 3.0 * sigma * rng.random_range(-1.0..=1.0);
            let contrast = 1.0 + sigma.min(0.9) * rng.random_range(-1.0..=1.0);
            let brightness = 0.5 * sigma * unit.sample(&mut rng);
            let pattern = class_pattern(class, spec.num_classes, h, w, dy, dx);
            let mut img = Vec::with_capacity(c * plane);
            for ch in 0..c {
                let gain = 1.0 - 0.2 * ch as f64;
                for &p in &pattern {
                    let v = 0.5 * contrast * gain * p + brightness + sigma * unit.sample(&mut rng);
                    img.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
            if i < n_train {
                train_x.extend(img);
                train_y.push(class);
            } else {
                test_x.extend(img);
                test_y.push(class);
            }
        }
    }
    let train = Dataset {
        images: Tensor::new(vec![train_y.len(), c, h, w], train_x)?,
        labels: train_y,
        num_classes: spec.num_classes,
    };
    let test = Dataset {
        images: Tensor::new(vec![test_y.len(), c, h, w], test_x)?,
        labels: test_y,
        num_classes: spec.num_classes,
    };
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationItem {
    /// `[C, H, W]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Label came from the full-precision model's prediction.
    pub predicted: bool,
}

/// Real labeled images, at most one per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationSet {
    items: Vec<CalibrationItem>,
}

impl CalibrationSet {
    pub fn new(items: Vec<CalibrationItem>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for it in &items {
            if !seen.insert(it.label) {
                return Err(Error::Invalid(format!("class {} appears twice in the calibration set", it.label)));
            }
        }
        if let Some(first) = items.first() {
            if items.iter().any(|it| it.image.shape() != first.image.shape()) {
                return Err(Error::Shape("calibration images differ in shape".into()));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[CalibrationItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn available_classes(&self) -> BTreeSet<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Stacks the images into `[N, C, H, W]`.
    pub fn images(&self) -> Result<Tensor<f32>> {
        let first = self.items.first().ok_or(Error::EmptyBatch)?;
        let mut shape = vec![self.items.len()];
        shape.extend_from_slice(first.image.shape());
        let data = self.items.iter().flat_map(|i| i.image.data().iter().copied()).collect();
        Tensor::new(shape, data)
    }

    /// Replaces every label by the model's argmax prediction. When two
    /// images are predicted as the same class only the first is kept.
    pub fn with_predicted_labels(&self, model: &Network<f32>) -> Result<Self> {
        if self.is_empty() {
            return Ok(self.clone());
        }
        let logits = model.predict_logits(&self.images()?, None)?;
        let mut seen = BTreeSet::new();
        let items = self
            .items
            .iter()
            .zip(argmax_rows(&logits))
            .filter(|(_, p)| seen.insert(*p))
            .map(|(it, p)| CalibrationItem { image: it.image.clone(), label: p, predicted: true })
            .collect();
        Self::new(items)
    }
}

/// Takes the first training sample of each requested class (all classes by default).
pub fn extract_calibration(train: &Dataset, classes: Option<&[usize]>) -> Result<CalibrationSet> {
    let wanted: Vec<usize> = match classes {
        Some(c) => c.to_vec(),
        None => (0..train.num_classes).collect(),
    };
    let per = train.images.numel() / train.len().max(1);
    let sample_shape = train.images.shape()[1..].to_vec();
    let mut items = Vec::with_capacity(wanted.len());
    for class in wanted {
        let idx = train
            .labels
            .iter()
            .position(|&l| l == class)
            .ok_or_else(|| Error::Invalid(format!("class {class} has no training sample")))?;
        let image = Tensor::new(sample_shape.clone(), train.images.data()[idx * per..(idx + 1) * per].to_vec())?;
        items.push(CalibrationItem { image, label: class, predicted: false });
    }
    CalibrationSet::new(items)
}
