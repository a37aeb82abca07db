//! Simulated signed fixed-point quantization.
//!
//! Values stay in `f64`, which represents every grid point exactly: all grids
//! are dyadic and the widest word is 32 bits. A format with `word_bits` bits
//! and `frac_bits` fractional bits has step `eps = 2^-frac_bits` and range
//! `[-2^(word_bits-1) eps, (2^(word_bits-1) - 1) eps]`.
//!
//! In a quantized layer step, `Q` is applied to the weights before they are
//! used and to `P`, `R` and `U` right after each is updated; spikes are
//! generated from the quantized `U`. Stochastic rounding is used while
//! fine-tuning and round-to-nearest-even for evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::net::{self, Form, Layer, Network, RunOptions};
use crate::neuron::{self, StateHook, TrainState};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Magnification applied to weight updates under quantization.
pub const DEFAULT_GRAD_SCALE: f64 = 1e3;

/// Lower bound on the magnitude used by [`calibrate_frac_bits`], so that an
/// all-zero tensor still yields a finite format.
pub const EPS_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;

const FRAC_LIMIT: i32 = 960;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub word_bits: u32,
    pub frac_bits: i32,
}

impl FixedPointFormat {
    pub fn new(word_bits: u32, frac_bits: i32) -> Result<Self> {
        if !(2..=32).contains(&word_bits) {
            return Err(Error::Config(format!("word_bits {word_bits} outside 2..=32")));
        }
        if frac_bits.abs() > FRAC_LIMIT {
            return Err(Error::Config(format!("frac_bits {frac_bits} out of range")));
        }
        Ok(Self { word_bits, frac_bits })
    }

    pub fn eps(&self) -> f64 {
        2f64.powi(-self.frac_bits)
    }

    /// Smallest and largest integer multiples of `eps`.
    pub fn k_range(&self) -> (i64, i64) {
        let half = 1i64 << (self.word_bits - 1);
        (-half, half - 1)
    }

    pub fn min(&self) -> f64 {
        self.k_range().0 as f64 * self.eps()
    }

    pub fn max(&self) -> f64 {
        self.k_range().1 as f64 * self.eps()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min() && x <= self.max()
    }

    /// True when `x` is a grid point inside the range.
    pub fn represents(&self, x: f64) -> bool {
        let k = x / self.eps();
        self.contains(x) && k.fract() == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    pub values: Vec<f64>,
    /// True where the input fell outside the range and was clamped.
    pub clamp_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Stochastic,
    Nearest,
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Input(format!("cannot quantize non-finite x[{i}] = {}", x[i]))),
    }
}

/// Clamps to the range, or returns `None` when `x` is inside it.
#[inline]
fn clamp_value(x: f64, lo: f64, hi: f64) -> Option<f64> {
    if x < lo {
        Some(lo)
    } else if x > hi {
        Some(hi)
    } else {
        None
    }
}

/// Rounds one in-range value down with probability `1 - frac` and up with
/// probability `frac`, where `frac` is its distance above the grid point
/// below, in units of `eps`.
#[inline]
fn round_stochastic(x: f64, eps: f64, rng: &mut StreamRng) -> f64 {
    let scaled = x / eps;
    let floor = scaled.floor();
    let frac = scaled - floor;
    if frac > 0.0 && rng.random::<f64>() < frac {
        (floor + 1.0) * eps
    } else {
        floor * eps
    }
}

#[inline]
fn round_nearest(x: f64, eps: f64) -> f64 {
    (x / eps).round_ties_even() * eps
}

fn quantize_with(x: &[f64], fmt: &FixedPointFormat, mut round: impl FnMut(f64) -> f64) -> QuantResult {
    let (lo, hi) = (fmt.min(), fmt.max());
    let mut values = Vec::with_capacity(x.len());
    let mut clamp_mask = Vec::with_capacity(x.len());
    for &v in x {
        match clamp_value(v, lo, hi) {
            Some(c) => {
                values.push(c);
                clamp_mask.push(true);
            }
            None => {
                // both grid neighbours of an in-range point are in range
                values.push(round(v));
                clamp_mask.push(false);
            }
        }
    }
    QuantResult { values, clamp_mask }
}

pub fn quantize_stochastic(x: &[f64], fmt: &FixedPointFormat, rng: &mut StreamRng) -> Result<QuantResult> {
    check_finite(x)?;
    let eps = fmt.eps();
    Ok(quantize_with(x, fmt, |v| round_stochastic(v, eps, rng)))
}

/// Round-half-to-even on the grid.
pub fn quantize_nearest(x: &[f64], fmt: &FixedPointFormat) -> Result<QuantResult> {
    check_finite(x)?;
    let eps = fmt.eps();
    Ok(quantize_with(x, fmt, |v| round_nearest(v, eps)))
}

pub fn quantize(x: &[f64], fmt: &FixedPointFormat, rounding: Rounding, rng: &mut StreamRng) -> Result<QuantResult> {
    match rounding {
        Rounding::Stochastic => quantize_stochastic(x, fmt, rng),
        Rounding::Nearest => quantize_nearest(x, fmt),
    }
}

/// Zeroes the gradient wherever the forward value was clamped.
pub fn mask_gradient(grad: &[f64], clamp_mask: &[bool]) -> Result<Vec<f64>> {
    if grad.len() != clamp_mask.len() {
        return Err(Error::Config(format!(
            "gradient has {} entries, mask {}",
            grad.len(),
            clamp_mask.len()
        )));
    }
    Ok(grad
        .iter()
        .zip(clamp_mask)
        .map(|(&g, &m)| if m { 0.0 } else { g })
        .collect())
}

/// Largest `frac_bits` for which every value of `x` lies inside the range.
///
/// Starts from `word_bits - 1 - ceil(log2(max(max|x|, EPS_FLOOR)))` and steps
/// down while the positive extreme still exceeds the (asymmetric) upper
/// bound.
pub fn calibrate_frac_bits(x: &[f64], word_bits: u32) -> Result<FixedPointFormat> {
    if x.is_empty() {
        return Err(Error::Input("cannot calibrate on an empty tensor".into()));
    }
    check_finite(x)?;
    let max_pos = x.iter().copied().fold(0.0f64, f64::max);
    let min_neg = x.iter().copied().fold(0.0f64, f64::min);
    let mag = max_pos.max(-min_neg).max(EPS_FLOOR);
    let mut frac = word_bits as i32 - 1 - mag.log2().ceil() as i32;
    loop {
        let fmt = FixedPointFormat::new(word_bits, frac)?;
        if fmt.contains(max_pos) && fmt.contains(min_neg) {
            return Ok(fmt);
        }
        frac -= 1;
    }
}

/// Formats of one layer: weights and the three training-form state
/// variables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub weight: FixedPointFormat,
    pub p: FixedPointFormat,
    pub r: FixedPointFormat,
    pub u: FixedPointFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub layers: Vec<LayerQuant>,
    pub grad_scale: f64,
}

/// Requested word widths for one layer; `frac_bits` absent means calibrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub weight_bits: u32,
    pub state_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frac_bits: Option<i32>,
}

impl QuantPolicy {
    /// Builds a policy for `net`. Weight formats are calibrated on the current
    /// weights; state formats on the largest |P|, |R|, |U| seen while running
    /// `samples` at full precision. An explicit `frac_bits` overrides
    /// calibration for all four formats of its layer.
    pub fn calibrate(net: &Network, samples: &[Sample], bits: &[LayerBits], grad_scale: f64) -> Result<Self> {
        if bits.len() != net.n_layers() {
            return Err(Error::Config(format!(
                "{} bit entries for {} layers",
                bits.len(),
                net.n_layers()
            )));
        }
        if !(grad_scale > 0.0 && grad_scale.is_finite()) {
            return Err(Error::Config(format!("grad_scale must be positive, got {grad_scale}")));
        }
        let ranges = state_ranges(net, samples)?;
        let layers = net
            .layers
            .iter()
            .zip(bits)
            .zip(&ranges)
            .map(|((layer, b), range)| {
                let pick = |word: u32, extreme: f64| match b.frac_bits {
                    Some(frac) => FixedPointFormat::new(word, frac),
                    None => calibrate_frac_bits(&[extreme, -extreme], word),
                };
                Ok(LayerQuant {
                    weight: match b.frac_bits {
                        Some(frac) => FixedPointFormat::new(b.weight_bits, frac)?,
                        None => calibrate_frac_bits(&layer.params.w, b.weight_bits)?,
                    },
                    p: pick(b.state_bits, range[0])?,
                    r: pick(b.state_bits, range[1])?,
                    u: pick(b.state_bits, range[2])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, grad_scale })
    }

    /// Quantizes every layer's weights to its format with round-to-nearest.
    pub fn quantize_weights(&self, net: &mut Network) -> Result<()> {
        for (layer, lq) in net.layers.iter_mut().zip(&self.layers) {
            layer.params.w = quantize_nearest(&layer.params.w, &lq.weight)?.values;
        }
        Ok(())
    }
}

/// Largest |P|, |R|, |U| per layer over the given samples.
pub fn state_ranges(net: &Network, samples: &[Sample]) -> Result<Vec<[f64; 3]>> {
    let mut ranges = vec![[0.0f64; 3]; net.n_layers()];
    for (i, sample) in samples.iter().enumerate() {
        let opts = RunOptions {
            form: Form::Training,
            losses: false,
            grads: false,
            quant: None,
            sample_index: i,
            max_steps: None,
        };
        net::run_sample(net, sample, opts, |l, _, st| {
            let absmax = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let r = &mut ranges[l];
            r[0] = r[0].max(absmax(&st.p));
            r[1] = r[1].max(absmax(&st.r));
            r[2] = r[2].max(absmax(&st.u));
        })?;
    }
    Ok(ranges)
}

/// State hook that quantizes `P`, `R` and `U` in place and remembers which
/// `P` and `U` entries were clamped at the latest step.
pub struct StateQuantizer {
    fmt: LayerQuant,
    rounding: Rounding,
    rng: StreamRng,
    p_mask: Vec<bool>,
    u_mask: Vec<bool>,
}

impl StateQuantizer {
    pub fn new(fmt: &LayerQuant, rounding: Rounding, rng: StreamRng) -> Self {
        Self {
            fmt: *fmt,
            rounding,
            rng,
            p_mask: Vec::new(),
            u_mask: Vec::new(),
        }
    }

    fn apply(
        fmt: &FixedPointFormat,
        rounding: Rounding,
        rng: &mut StreamRng,
        v: &mut [f64],
        mask: Option<&mut Vec<bool>>,
    ) {
        let (lo, hi, eps) = (fmt.min(), fmt.max(), fmt.eps());
        let mut mask = mask;
        if let Some(m) = mask.as_deref_mut() {
            m.clear();
        }
        for x in v.iter_mut() {
            let clamped = clamp_value(*x, lo, hi);
            *x = match (clamped, rounding) {
                (Some(c), _) => c,
                (None, Rounding::Stochastic) => round_stochastic(*x, eps, rng),
                (None, Rounding::Nearest) => round_nearest(*x, eps),
            };
            if let Some(m) = mask.as_deref_mut() {
                m.push(clamped.is_some());
            }
        }
    }

    /// Zeroes per-neuron signals whose potential was clamped.
    pub fn mask_u(&self, delta: &mut [f64]) {
        for (d, &m) in delta.iter_mut().zip(&self.u_mask) {
            if m {
                *d = 0.0;
            }
        }
    }

    /// Zeroes presynaptic traces that were clamped.
    pub fn mask_p(&self, p: &mut [f64]) {
        for (v, &m) in p.iter_mut().zip(&self.p_mask) {
            if m {
                *v = 0.0;
            }
        }
    }
}

impl StateHook for StateQuantizer {
    fn after_p(&mut self, p: &mut [f64]) {
        Self::apply(&self.fmt.p, self.rounding, &mut self.rng, p, Some(&mut self.p_mask));
    }

    fn after_r(&mut self, r: &mut [f64]) {
        Self::apply(&self.fmt.r, self.rounding, &mut self.rng, r, None);
    }

    fn after_u(&mut self, u: &mut [f64]) {
        Self::apply(&self.fmt.u, self.rounding, &mut self.rng, u, Some(&mut self.u_mask));
    }
}

/// One quantized training-form step of `layer`; returns its spikes.
pub fn quantized_step(
    layer: &Layer,
    state: &mut TrainState,
    in_spikes: &[f64],
    fmt: &LayerQuant,
    rounding: Rounding,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let spec = &layer.spec;
    if state.n_in() != spec.n_in() || state.n_out() != spec.n_out() {
        return Err(Error::Config("training state does not match layer shape".into()));
    }
    let w = quantize(&layer.params.w, &fmt.weight, rounding, rng)?.values;
    let mut hook = StateQuantizer::new(fmt, rounding, rng.clone());
    neuron::step_training_with(state, &spec.lif, in_spikes, |p, u| spec.apply(&w, p, u), &mut hook)?;
    *rng = hook.rng;
    Ok(state.s.clone())
}

/// `Q_stochastic(w - lr * grad_scale * grad)` in the layer's weight format.
pub fn scaled_update(
    w: &[f64],
    grad: &[f64],
    lr: f64,
    policy: &QuantPolicy,
    layer: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if w.len() != grad.len() {
        return Err(Error::Config(format!(
            "{} weights, {} gradient entries",
            w.len(),
            grad.len()
        )));
    }
    let fmt = policy
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("no quantization format for layer {layer}")))?;
    let step = lr * policy.grad_scale;
    let target: Vec<f64> = w.iter().zip(grad).map(|(w, g)| w - step * g).collect();
    Ok(quantize_stochastic(&target, &fmt.weight, rng)?.values)
}
