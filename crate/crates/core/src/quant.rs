//! Asymmetric uniform quantization: layer-wise for activations, channel-wise
//! for weights, with a clipped straight-through gradient for fine-tuning.
//!
//! The quantizer has no zero-point: `q = round(clip(x, l, u) / s)` and
//! `x̄ = q·s` with `s = (u − l) / (2^b − 1)`. Ties round half away from zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardOptions, Network};
use crate::tensor::{Real, Tensor};

/// Widening applied to a degenerate `l = u` range.
pub const DEGENERATE_WIDEN: f64 = 1e-3;

pub fn compute_scale<T: Real>(bits: u32, lower: T, upper: T) -> Result<T> {
    if upper.partial_cmp(&lower) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Invalid(format!("quantizer upper bound {upper:?} must exceed lower bound {lower:?}")));
    }
    if bits == 0 || bits > 30 {
        return Err(Error::Invalid(format!("unsupported bit-width {bits}")));
    }
    Ok((upper - lower) / T::of(((1u64 << bits) - 1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams<T: Real = f32> {
    pub bits: u32,
    pub lower: T,
    pub upper: T,
    pub scale: T,
}

impl<T: Real> QuantParams<T> {
    pub fn new(bits: u32, lower: T, upper: T) -> Result<Self> {
        if bits < 2 {
            return Err(Error::Invalid(format!("bit-width {bits} below 2")));
        }
        let scale = compute_scale(bits, lower, upper)?;
        Ok(Self { bits, lower, upper, scale })
    }

    /// Bounds from an observed `[min, max]`, widened when degenerate.
    pub fn from_range(bits: u32, min: T, max: T) -> Result<Self> {
        if min < max {
            Self::new(bits, min, max)
        } else {
            let w = T::of(DEGENERATE_WIDEN);
            Self::new(bits, min - w, max + w)
        }
    }

    pub fn cast<U: Real>(&self) -> QuantParams<U> {
        QuantParams {
            bits: self.bits,
            lower: U::of(self.lower.to_f64()),
            upper: U::of(self.upper.to_f64()),
            scale: U::of(self.scale.to_f64()),
        }
    }

    fn bounds(&self) -> (T, T, T) {
        (self.lower, self.upper, self.scale)
    }
}

/// `round(clip(x, l, u) / s)`.
pub fn quantize<T: Real>(x: T, q: &QuantParams<T>) -> i64 {
    (x.max(q.lower).min(q.upper) / q.scale).round().to_f64() as i64
}

pub fn quantize_tensor<T: Real>(x: &Tensor<T>, q: &QuantParams<T>) -> Vec<i64> {
    x.data().iter().map(|&v| quantize(v, q)).collect()
}

/// `q·s`.
pub fn dequantize<T: Real>(qv: i64, q: &QuantParams<T>) -> T {
    T::of(qv as f64) * q.scale
}

/// Forward value of fake quantization, without a tape.
pub fn fake_quantize_value<T: Real>(x: T, q: &QuantParams<T>) -> T {
    (x.max(q.lower).min(q.upper) / q.scale).round() * q.scale
}

/// Fake-quantizes `x` with a clipped straight-through gradient.
pub fn fake_quantize_ste<T: Real>(tape: &mut Tape<T>, x: Var, q: &QuantParams<T>) -> Result<Var> {
    Ok(tape.fake_quant(x, &[q.bounds()], None)?.0)
}

/// Per-output-channel parameters sharing one bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuantParams<T: Real = f32> {
    pub bits: u32,
    pub channels: Vec<QuantParams<T>>,
}

impl<T: Real> ChannelQuantParams<T> {
    /// Min/max bounds of each slice along the leading axis of `w`.
    pub fn from_weights(w: &Tensor<T>, bits: u32) -> Result<Self> {
        let o = *w.shape().first().ok_or_else(|| Error::Invalid("scalar weight".into()))?;
        if o == 0 || w.numel() == 0 {
            return Err(Error::Invalid("weight tensor without output channels".into()));
        }
        let per = w.numel() / o;
        let channels = w
            .data()
            .chunks(per)
            .map(|ch| {
                let lo = ch.iter().copied().fold(ch[0], T::min);
                let hi = ch.iter().copied().fold(ch[0], T::max);
                QuantParams::from_range(bits, lo, hi)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bits, channels })
    }
}

/// Fake-quantizes every output channel of `w` against its own min/max.
pub fn quantize_weights_per_channel<T: Real>(w: &Tensor<T>, bits: u32) -> Result<(Tensor<T>, ChannelQuantParams<T>)> {
    let params = ChannelQuantParams::from_weights(w, bits)?;
    let per = w.numel() / params.channels.len();
    let data = w.data().iter().enumerate().map(|(i, &v)| fake_quantize_value(v, &params.channels[i / per])).collect();
    Ok((Tensor::new(w.shape().to_vec(), data)?, params))
}

/// Quantization residuals pinned across repeated forward passes.
///
/// Recording captures `fq(x) − clip(x)` for every fake-quantization call;
/// replay adds the captured residuals back to `clip(x)`. The replayed
/// function is differentiable and its exact gradient is the STE gradient,
/// which is what finite-difference checks need.
#[derive(Clone, Debug, Default)]
pub struct SteResiduals<T> {
    entries: Vec<Vec<T>>,
    cursor: usize,
    replay: bool,
}

impl<T: Real> SteResiduals<T> {
    pub fn recording() -> Self {
        Self { entries: Vec::new(), cursor: 0, replay: false }
    }

    /// Switches to replay, rewinding to the first entry.
    pub fn rewind_for_replay(&mut self) {
        self.replay = true;
        self.cursor = 0;
    }

    fn apply(&mut self, tape: &mut Tape<T>, x: Var, bounds: &[(T, T, T)]) -> Result<Var> {
        if self.replay {
            let r = self
                .entries
                .get(self.cursor)
                .ok_or_else(|| Error::Invalid("more quantizers than recorded residuals".into()))?;
            self.cursor += 1;
            Ok(tape.fake_quant(x, bounds, Some(r))?.0)
        } else {
            let (y, r) = tape.fake_quant(x, bounds, None)?;
            self.entries.push(r);
            Ok(y)
        }
    }
}

pub(crate) fn fake_quantize_weights<T: Real>(
    tape: &mut Tape<T>,
    w: Var,
    bits: u32,
    residuals: Option<&mut SteResiduals<T>>,
) -> Result<Var> {
    let params = ChannelQuantParams::from_weights(tape.value(w), bits)?;
    let bounds: Vec<_> = params.channels.iter().map(QuantParams::bounds).collect();
    match residuals {
        Some(r) => r.apply(tape, w, &bounds),
        None => Ok(tape.fake_quant(w, &bounds, None)?.0),
    }
}

/// Bit-widths for weights and activations. Batch-norm parameters are never quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantPolicy {
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub first_layer_bits: u32,
    pub last_layer_bits: u32,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self { weight_bits: 4, activation_bits: 4, first_layer_bits: 4, last_layer_bits: 4 }
    }
}

impl QuantPolicy {
    pub fn uniform(bits: u32) -> Self {
        Self { weight_bits: bits, activation_bits: bits, first_layer_bits: bits, last_layer_bits: bits }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("weight_bits", self.weight_bits),
            ("activation_bits", self.activation_bits),
            ("first_layer_bits", self.first_layer_bits),
            ("last_layer_bits", self.last_layer_bits),
        ] {
            if !(2..=8).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} is outside [2, 8]")));
            }
        }
        Ok(())
    }

    /// Bits for the weights of weight layer `ordinal` out of `count`.
    pub fn weight_bits_for(&self, ordinal: usize, count: usize) -> u32 {
        if ordinal == 0 {
            self.first_layer_bits
        } else if ordinal + 1 == count {
            self.last_layer_bits
        } else {
            self.weight_bits
        }
    }

    /// Bits for an activation that feeds weight layer `feeds` out of `count`.
    pub fn activation_bits_for(&self, feeds: Option<usize>, count: usize) -> u32 {
        match feeds {
            Some(0) => self.first_layer_bits,
            Some(i) if i + 1 == count => self.last_layer_bits,
            _ => self.activation_bits,
        }
    }
}

/// Everything a fake-quantized forward pass needs beyond the float weights.
/// Weight bounds are recomputed from the live weights on every pass;
/// activation bounds are frozen after calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantState<T: Real = f32> {
    pub policy: QuantPolicy,
    pub activations: Vec<QuantParams<T>>,
}

impl<T: Real> QuantState<T> {
    pub fn cast<U: Real>(&self) -> QuantState<U> {
        QuantState { policy: self.policy, activations: self.activations.iter().map(QuantParams::cast).collect() }
    }

    pub(crate) fn quantize_activation(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        point: usize,
        residuals: Option<&mut SteResiduals<T>>,
    ) -> Result<Var> {
        let q = self
            .activations
            .get(point)
            .ok_or_else(|| Error::Invalid(format!("no calibration for activation point {point}")))?;
        match residuals {
            Some(r) => r.apply(tape, x, &[q.bounds()]),
            None => fake_quantize_ste(tape, x, q),
        }
    }
}

/// Per-layer activation bounds from the min and max seen on `data`.
pub fn calibrate_activation_bounds<T: Real>(
    model: &Network<T>,
    data: &Tensor<T>,
    policy: &QuantPolicy,
) -> Result<Vec<QuantParams<T>>> {
    if data.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let x = tape.constant(data.clone());
    let pass = model.forward(&mut tape, x, ForwardOptions::eval())?;
    let feeds = model.activation_feeds();
    let count = model.weight_layer_count();
    pass.activations
        .iter()
        .zip(&feeds)
        .map(|(&v, &feed)| {
            let d = tape.value(v).data();
            let lo = d.iter().copied().fold(d[0], T::min);
            let hi = d.iter().copied().fold(d[0], T::max);
            QuantParams::from_range(policy.activation_bits_for(feed, count), lo, hi)
        })
        .collect()
}

/// Calibrates a [`QuantState`] for `model` on `data`.
pub fn calibrate<T: Real>(model: &Network<T>, data: &Tensor<T>, policy: QuantPolicy) -> Result<QuantState<T>> {
    policy.validate()?;
    Ok(QuantState { policy, activations: calibrate_activation_bounds(model, data, &policy)? })
}
