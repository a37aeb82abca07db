//! Spiking layers with frozen random readouts, local losses and SGD.
//!
//! Every layer owns a fixed random readout `B` mapping its spikes to class
//! scores. At each time step the layer's local loss is the cross-entropy of
//! `softmax(B s)` against the label and its back signal is
//! `e = B^T (softmax(B s) - onehot)`. The weight gradient follows the local
//! rule of [`crate::neuron::local_weight_grad`]; no gradient crosses layers
//! and nothing is propagated back in time.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Shape3};
use crate::neuron::{self, BackSignal, InferState, LifParams, Matrix, NoHook, TrainState};
use crate::quant::{self, QuantPolicy, Rounding};
use crate::rng::{self, purpose};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerConfig {
    Conv {
        channels: usize,
        kernel: usize,
        /// Max-downsampling factor applied to the layer's spikes before they
        /// feed the next layer.
        #[serde(default = "one")]
        pool: usize,
        #[serde(default)]
        lif: Option<LifParams>,
    },
    Dense {
        units: usize,
        #[serde(default)]
        lif: Option<LifParams>,
    },
}

fn one() -> usize {
    1
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: Shape3,
    pub n_classes: usize,
    pub layers: Vec<LayerConfig>,
    /// Neuron parameters for layers without their own.
    #[serde(default)]
    pub lif: LifParams,
    /// Weights are drawn from N(0, (gain / sqrt(fan_in))^2).
    #[serde(default = "default_gain")]
    pub init_gain: f64,
}

impl ArchSpec {
    /// Two 5x5 convolutions with 8 and 16 channels on 2x16x16 input.
    pub fn desk() -> Self {
        Self {
            input: Shape3::new(2, 16, 16),
            n_classes: 10,
            layers: vec![
                LayerConfig::Conv {
                    channels: 8,
                    kernel: 5,
                    pool: 1,
                    lif: None,
                },
                LayerConfig::Conv {
                    channels: 16,
                    kernel: 5,
                    pool: 1,
                    lif: None,
                },
            ],
            lif: LifParams {
                alpha: 0.9,
                ..LifParams::default()
            },
            init_gain: 0.3,
        }
    }

    /// Three 7x7 convolutions with 64, 128 and 128 channels on two-polarity
    /// 32x32 input.
    pub fn reference() -> Self {
        let conv = |channels, pool| LayerConfig::Conv {
            channels,
            kernel: 7,
            pool,
            lif: None,
        };
        Self {
            input: Shape3::new(2, 32, 32),
            n_classes: 10,
            layers: vec![conv(64, 2), conv(128, 1), conv(128, 2)],
            lif: LifParams::default(),
            init_gain: 1.0,
        }
    }

    pub fn resolve(&self) -> Result<Vec<LayerSpec>> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.input.is_empty() {
            return Err(Error::Config("input shape is empty".into()));
        }
        let mut shape = self.input;
        let mut specs = Vec::with_capacity(self.layers.len());
        for (index, cfg) in self.layers.iter().enumerate() {
            let spec = match *cfg {
                LayerConfig::Conv {
                    channels,
                    kernel,
                    pool,
                    lif,
                } => {
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "layer {index}: conv kernel {kernel} must be odd"
                        )));
                    }
                    if pool == 0 || pool > shape.h || pool > shape.w {
                        return Err(Error::Config(format!(
                            "layer {index}: pool {pool} invalid for {}x{} maps",
                            shape.h, shape.w
                        )));
                    }
                    if channels == 0 {
                        return Err(Error::Config(format!("layer {index}: zero channels")));
                    }
                    LayerSpec {
                        kind: LayerKind::Conv { kernel },
                        in_shape: shape,
                        out_shape: Shape3::new(channels, shape.h, shape.w),
                        pool,
                        lif: lif.unwrap_or(self.lif),
                    }
                }
                LayerConfig::Dense { units, lif } => {
                    if units == 0 {
                        return Err(Error::Config(format!("layer {index}: zero units")));
                    }
                    LayerSpec {
                        kind: LayerKind::Dense,
                        in_shape: shape,
                        out_shape: Shape3::new(units, 1, 1),
                        pool: 1,
                        lif: lif.unwrap_or(self.lif),
                    }
                }
            };
            spec.lif
                .validate()
                .map_err(|e| Error::Config(format!("layer {index}: {e}")))?;
            shape = spec.next_shape();
            specs.push(spec);
        }
        Ok(specs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    /// Square odd kernel, stride 1, same padding.
    Conv {
        kernel: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    pub pool: usize,
    pub lif: LifParams,
}

impl LayerSpec {
    pub fn n_in(&self) -> usize {
        self.in_shape.len()
    }

    pub fn n_out(&self) -> usize {
        self.out_shape.len()
    }

    pub fn n_weights(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.n_in() * self.n_out(),
            LayerKind::Conv { kernel } => self.in_shape.c * self.out_shape.c * kernel * kernel,
        }
    }

    /// Shape of the spikes handed to the next layer.
    pub fn next_shape(&self) -> Shape3 {
        Shape3::new(
            self.out_shape.c,
            self.out_shape.h / self.pool,
            self.out_shape.w / self.pool,
        )
    }

    /// `out = W x`; for convolutions a same-padded 2-D cross-correlation.
    pub fn apply(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        assert_eq!(w.len(), self.n_weights());
        assert_eq!(x.len(), self.n_in());
        assert_eq!(out.len(), self.n_out());
        match self.kind {
            LayerKind::Dense => {
                for (row, o) in w.chunks_exact(self.n_in()).zip(out.iter_mut()) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            LayerKind::Conv { kernel } => {
                let hw = self.in_shape.h * self.in_shape.w;
                let rows = self.in_shape.c * kernel * kernel;
                let col = self.im2col(kernel, x);
                // SAFETY: the slice lengths match the dimensions and strides
                // (asserted above; im2col sizes `col` itself).
                unsafe {
                    matrixmultiply::dgemm(
                        self.out_shape.c,
                        rows,
                        hw,
                        1.0,
                        w.as_ptr(),
                        rows as isize,
                        1,
                        col.as_ptr(),
                        hw as isize,
                        1,
                        0.0,
                        out.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            }
        }
    }

    /// Patch matrix of a same-padded convolution: row `(ci, ky, kx)`, column
    /// `(y, x)` holds `x[ci, y + ky - pad, x + kx - pad]`, zero outside.
    fn im2col(&self, kernel: usize, x: &[f64]) -> Vec<f64> {
        let (h, wd) = (self.in_shape.h, self.in_shape.w);
        let hw = h * wd;
        let pad = (kernel / 2) as isize;
        let mut col = vec![0.0; self.in_shape.c * kernel * kernel * hw];
        let mut rows = col.chunks_exact_mut(hw);
        for inp in x.chunks_exact(hw) {
            for ky in 0..kernel {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kernel {
                    let row = rows.next().expect("row count matches channels");
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let xi0 = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        row[y * wd + x0..y * wd + x1].copy_from_slice(&inp[yi * wd + xi0..yi * wd + xi0 + (x1 - x0)]);
                    }
                }
            }
        }
        col
    }

    /// `grad += scale * delta p^T`, the weight gradient for a per-neuron
    /// signal `delta` and presynaptic traces `p`.
    pub fn accumulate_grad(&self, delta: &[f64], p: &[f64], scale: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.n_weights());
        assert_eq!(delta.len(), self.n_out());
        assert_eq!(p.len(), self.n_in());
        match self.kind {
            LayerKind::Dense => {
                let n_in = self.n_in();
                for (row, &d) in grad.chunks_exact_mut(n_in).zip(delta) {
                    let d = d * scale;
                    if d == 0.0 {
                        continue;
                    }
                    for (g, &pj) in row.iter_mut().zip(p) {
                        *g += d * pj;
                    }
                }
            }
            LayerKind::Conv { kernel } => {
                let hw = self.in_shape.h * self.in_shape.w;
                let rows = self.in_shape.c * kernel * kernel;
                let col = self.im2col(kernel, p);
                // SAFETY: as in `apply`; the patch matrix is read transposed.
                unsafe {
                    matrixmultiply::dgemm(
                        self.out_shape.c,
                        hw,
                        rows,
                        scale,
                        delta.as_ptr(),
                        hw as isize,
                        1,
                        col.as_ptr(),
                        1,
                        hw as isize,
                        1.0,
                        grad.as_mut_ptr(),
                        rows as isize,
                        1,
                    );
                }
            }
        }
    }

    /// Max-downsamples binary spikes `s` (shape `out_shape`) into `out`
    /// (shape `next_shape()`).
    pub fn pool_spikes(&self, s: &[f64], out: &mut [f64]) {
        let k = self.pool;
        if k == 1 {
            out.copy_from_slice(s);
            return;
        }
        let Shape3 { c, h, w } = self.out_shape;
        let (ph, pw) = (h / k, w / k);
        for ch in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    let mut m = 0.0f64;
                    for y in py * k..py * k + k {
                        for x in px * k..px * k + k {
                            m = m.max(s[(ch * h + y) * w + x]);
                        }
                    }
                    out[(ch * ph + py) * pw + px] = m;
                }
            }
        }
    }
}

/// Output positions `y` for which `y + d` stays inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w: Vec<f64>,
    /// Fixed random readout, `n_classes x n_out`. Never trained.
    pub readout: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

impl Layer {
    pub fn n_classes(&self) -> usize {
        self.params.readout.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input: Shape3,
    pub n_classes: usize,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds a network with seeded Gaussian weights and readouts.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let specs = arch.resolve()?;
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(index, spec)| {
                let fan_in = match spec.kind {
                    LayerKind::Dense => spec.n_in(),
                    LayerKind::Conv { kernel } => spec.in_shape.c * kernel * kernel,
                };
                let std = arch.init_gain / (fan_in as f64).sqrt();
                let mut wrng = rng::stream(seed, &[purpose::INIT_WEIGHTS, index as u64]);
                let w = (0..spec.n_weights())
                    .map(|_| std * wrng.sample::<f64, _>(StandardNormal))
                    .collect();
                let rstd = 1.0 / (spec.n_out() as f64).sqrt();
                let mut rrng = rng::stream(seed, &[purpose::INIT_READOUT, index as u64]);
                let readout = Matrix {
                    rows: arch.n_classes,
                    cols: spec.n_out(),
                    data: (0..arch.n_classes * spec.n_out())
                        .map(|_| rstd * rrng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                Layer {
                    spec,
                    params: LayerParams { w, readout },
                }
            })
            .collect();
        Ok(Self {
            input: arch.input,
            n_classes: arch.n_classes,
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weights(&self) -> Vec<&[f64]> {
        self.layers.iter().map(|l| l.params.w.as_slice()).collect()
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.spikes.shape() != self.input {
            return Err(Error::Config(format!(
                "sample shape {:?} does not match network input {:?}",
                sample.spikes.shape(),
                self.input
            )));
        }
        if sample.label >= self.n_classes {
            return Err(Error::Input(format!(
                "label {} outside 0..{}",
                sample.label, self.n_classes
            )));
        }
        Ok(())
    }
}

/// Neuron state of one layer in either form.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Train(TrainState),
    Infer(InferState),
}

impl LayerState {
    pub fn train(spec: &LayerSpec) -> Self {
        LayerState::Train(TrainState::zeros(spec.n_in(), spec.n_out()))
    }

    pub fn infer(spec: &LayerSpec) -> Self {
        LayerState::Infer(InferState::zeros(spec.n_out()))
    }
}

/// One step of a layer in whichever form `state` holds. Returns the layer's
/// own (not downsampled) spikes.
pub fn layer_forward_step(layer: &Layer, state: &mut LayerState, in_spikes: &[f64]) -> Result<Vec<f64>> {
    let spec = &layer.spec;
    if in_spikes.len() != spec.n_in() {
        return Err(Error::Config(format!(
            "layer expects {} inputs, got {}",
            spec.n_in(),
            in_spikes.len()
        )));
    }
    match state {
        LayerState::Train(st) => {
            if st.n_in() != spec.n_in() || st.n_out() != spec.n_out() {
                return Err(Error::Config("training state does not match layer shape".into()));
            }
            neuron::step_training_with(
                st,
                &spec.lif,
                in_spikes,
                |p, u| spec.apply(&layer.params.w, p, u),
                &mut NoHook,
            )?;
            Ok(st.s.clone())
        }
        LayerState::Infer(st) => {
            if st.len() != spec.n_out() {
                return Err(Error::Config("inference state does not match layer shape".into()));
            }
            let mut x = vec![0.0; spec.n_out()];
            spec.apply(&layer.params.w, in_spikes, &mut x);
            neuron::step_inference(st, &spec.lif, &x)
        }
    }
}

/// `B * spikes`, skipping silent neurons.
fn scores_into(readout: &Matrix, spikes: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(readout.data.chunks_exact(readout.cols)) {
        *o = row
            .iter()
            .zip(spikes)
            .filter(|(_, &s)| s != 0.0)
            .map(|(b, s)| b * s)
            .sum();
    }
}

/// Class scores of the time-averaged spike vector, `B * mean_t s_t`.
pub fn readout_scores(layer: &Layer, spikes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if spikes.is_empty() {
        return Err(Error::Input("readout needs at least one time step".into()));
    }
    let n = layer.spec.n_out();
    let mut mean = vec![0.0; n];
    for s in spikes {
        if s.len() != n {
            return Err(Error::Config(format!("spike vector of {} for {n} neurons", s.len())));
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let t = spikes.len() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    Ok(readout_mean_scores(&layer.params.readout, &mean))
}

fn readout_mean_scores(readout: &Matrix, mean: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; readout.rows];
    for (o, row) in out.iter_mut().zip(readout.data.chunks_exact(readout.cols)) {
        *o = row.iter().zip(mean).map(|(b, m)| b * m).sum();
    }
    out
}

/// Stable softmax in place; returns `log(sum(exp(scores)))`.
fn softmax_in_place(scores: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    scores.iter_mut().for_each(|s| *s /= sum);
    max + sum.ln()
}

/// Cross-entropy of `softmax(B s)` against `target` and its gradient with
/// respect to `s` (treated as real valued).
pub fn readout_loss_and_grad(readout: &Matrix, spikes: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; readout.rows];
    scores_into(readout, spikes, &mut probs);
    let target_score = probs[target];
    let lse = softmax_in_place(&mut probs);
    probs[target] -= 1.0;
    let mut e = vec![0.0; readout.cols];
    for (row, &d) in readout.data.chunks_exact(readout.cols).zip(&probs) {
        for (ei, b) in e.iter_mut().zip(row) {
            *ei += d * b;
        }
    }
    (lse - target_score, e)
}

pub fn local_loss_and_backsignal(layer: &Layer, out_spikes: &[f64], target: usize) -> Result<(f64, BackSignal)> {
    if target >= layer.n_classes() {
        return Err(Error::Input(format!(
            "target {target} outside 0..{}",
            layer.n_classes()
        )));
    }
    if out_spikes.len() != layer.spec.n_out() {
        return Err(Error::Config(format!(
            "{} spikes for a layer of {}",
            out_spikes.len(),
            layer.spec.n_out()
        )));
    }
    let (loss, e) = readout_loss_and_grad(&layer.params.readout, out_spikes, target);
    Ok((loss, BackSignal { e }))
}

fn argmax(v: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    Training,
    Inference,
}

/// Quantization applied during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct QuantRun<'a> {
    pub policy: &'a QuantPolicy,
    pub rounding: Rounding,
    pub seed: u64,
    /// Extra coordinates that make rounding streams unique per call site
    /// (e.g. epoch).
    pub tag: u64,
}

/// Outcome of running one sample through the network.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    /// Per layer, the local loss averaged over time steps (zero if losses
    /// were not requested).
    pub losses: Vec<f64>,
    /// Per layer, class scores of the time-averaged spikes.
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Per layer, the time-averaged local weight gradient (empty unless
    /// requested).
    pub grads: Vec<Vec<f64>>,
    /// Per layer, true where the forward weight quantizer clamped.
    pub weight_masks: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct RunOptions<'a> {
    pub form: Form,
    pub losses: bool,
    pub grads: bool,
    pub quant: Option<QuantRun<'a>>,
    /// Index of the sample within its dataset, used for diagnostics and
    /// rounding streams.
    pub sample_index: usize,
    /// Stop after this many steps instead of the sample's full length.
    pub max_steps: Option<usize>,
}

/// Runs one sample for its full length. `observe(layer, step, state)` sees
/// every training-form state right after it is updated.
pub(crate) fn run_sample<O>(
    net: &Network,
    sample: &Sample,
    opts: RunOptions<'_>,
    mut observe: O,
) -> Result<SampleOutcome>
where
    O: FnMut(usize, usize, &TrainState),
{
    net.check_sample(sample)?;
    let n_layers = net.n_layers();
    let steps = opts
        .max_steps
        .map_or(sample.spikes.steps(), |m| m.min(sample.spikes.steps()));
    if steps == 0 {
        return Err(Error::Input("a forward pass needs at least one step".into()));
    }
    if opts.form == Form::Inference && (opts.grads || opts.quant.is_some()) {
        return Err(Error::Config(
            "gradients and quantization need the training form".into(),
        ));
    }

    let mut weights: Vec<std::borrow::Cow<'_, [f64]>> = net
        .layers
        .iter()
        .map(|l| std::borrow::Cow::Borrowed(l.params.w.as_slice()))
        .collect();
    let mut weight_masks = Vec::new();
    let mut quantizers = Vec::new();
    if let Some(q) = opts.quant {
        if q.policy.layers.len() != n_layers {
            return Err(Error::Config(format!(
                "quant policy has {} layers, network {}",
                q.policy.layers.len(),
                n_layers
            )));
        }
        for (l, layer) in net.layers.iter().enumerate() {
            let lq = &q.policy.layers[l];
            let coords = [purpose::QUANT_WEIGHTS, q.tag, opts.sample_index as u64, l as u64];
            let mut wrng = rng::stream(q.seed, &coords);
            let res = quant::quantize(&layer.params.w, &lq.weight, q.rounding, &mut wrng)?;
            weights[l] = std::borrow::Cow::Owned(res.values);
            weight_masks.push(res.clamp_mask);
            let coords = [purpose::QUANT_STATE, q.tag, opts.sample_index as u64, l as u64];
            quantizers.push(quant::StateQuantizer::new(lq, q.rounding, rng::stream(q.seed, &coords)));
        }
    }

    let mut train: Vec<TrainState> = Vec::new();
    let mut infer: Vec<InferState> = Vec::new();
    match opts.form {
        Form::Training => {
            train = net
                .layers
                .iter()
                .map(|l| TrainState::zeros(l.spec.n_in(), l.spec.n_out()))
                .collect()
        }
        Form::Inference => infer = net.layers.iter().map(|l| InferState::zeros(l.spec.n_out())).collect(),
    }
    let mut spike_sum: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.spec.n_out()]).collect();
    let mut loss_sum = vec![0.0; n_layers];
    let mut grads: Vec<Vec<f64>> = if opts.grads {
        net.layers.iter().map(|l| vec![0.0; l.spec.n_weights()]).collect()
    } else {
        Vec::new()
    };
    // inputs[l] is the spike vector fed to layer l at the current step
    let mut inputs: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.spec.n_in()]).collect();
    let mut infer_spikes: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.spec.n_out()]).collect();
    let mut drive = vec![];
    let mut delta = vec![];
    let mut p_masked = vec![];
    let inv_t = 1.0 / steps as f64;

    for t in 0..steps {
        sample.spikes.frame_into(t, &mut inputs[0]);
        for l in 0..n_layers {
            let layer = &net.layers[l];
            let spec = &layer.spec;
            let (head, tail) = inputs.split_at_mut(l + 1);
            let input = &head[l];
            match opts.form {
                Form::Training => {
                    let st = &mut train[l];
                    let w = &weights[l];
                    let stepped = match quantizers.get_mut(l) {
                        Some(qz) => neuron::step_training_with(st, &spec.lif, input, |p, u| spec.apply(w, p, u), qz),
                        None => {
                            neuron::step_training_with(st, &spec.lif, input, |p, u| spec.apply(w, p, u), &mut NoHook)
                        }
                    };
                    stepped.map_err(|e| annotate(e, l, t, opts.sample_index))?;
                    observe(l, t, st);
                }
                Form::Inference => {
                    drive.resize(spec.n_out(), 0.0);
                    spec.apply(&weights[l], input, &mut drive);
                    neuron::step_inference_into(&mut infer[l], &spec.lif, &drive, &mut infer_spikes[l])
                        .map_err(|e| annotate(e, l, t, opts.sample_index))?;
                }
            }
            let spikes: &[f64] = match opts.form {
                Form::Training => &train[l].s,
                Form::Inference => &infer_spikes[l],
            };
            for (acc, &s) in spike_sum[l].iter_mut().zip(spikes) {
                *acc += s;
            }
            if opts.losses || opts.grads {
                let (loss, e) = readout_loss_and_grad(&layer.params.readout, spikes, sample.label);
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite local loss at layer {l}, step {t}, sample {}",
                        opts.sample_index
                    )));
                }
                loss_sum[l] += loss;
                if opts.grads {
                    let st = &train[l];
                    delta.clear();
                    delta.extend(
                        e.iter()
                            .zip(&st.u)
                            .map(|(e, &u)| e * neuron::surrogate_grad(u, &spec.lif)),
                    );
                    let p: &[f64] = match quantizers.get(l) {
                        Some(qz) => {
                            qz.mask_u(&mut delta);
                            p_masked.clear();
                            p_masked.extend_from_slice(&st.p);
                            qz.mask_p(&mut p_masked);
                            &p_masked
                        }
                        None => &st.p,
                    };
                    spec.accumulate_grad(&delta, p, inv_t, &mut grads[l]);
                }
            }
            if let Some(next) = tail.first_mut() {
                spec.pool_spikes(spikes, next);
            }
        }
    }

    let scores: Vec<Vec<f64>> = net
        .layers
        .iter()
        .zip(&spike_sum)
        .map(|(layer, sum)| {
            let mean: Vec<f64> = sum.iter().map(|s| s * inv_t).collect();
            readout_mean_scores(&layer.params.readout, &mean)
        })
        .collect();
    Ok(SampleOutcome {
        losses: loss_sum.iter().map(|l| l * inv_t).collect(),
        predictions: scores.iter().map(|s| argmax(s)).collect(),
        scores,
        grads,
        weight_masks,
    })
}

fn annotate(err: Error, layer: usize, step: usize, sample: usize) -> Error {
    match err {
        Error::StateCorruption(msg) => Error::Numerical(format!("layer {layer}, step {step}, sample {sample}: {msg}")),
        other => other,
    }
}

/// Per-layer time-averaged local gradients of one sample, exactly the
/// quantities accumulated by [`train_epoch`].
pub fn sample_gradients(net: &Network, sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let opts = RunOptions {
        form: Form::Training,
        losses: false,
        grads: true,
        quant: None,
        sample_index: 0,
        max_steps: None,
    };
    Ok(run_sample(net, sample, opts, |_, _, _| {})?.grads)
}

/// Runs a full-precision sample and returns its outcome.
pub fn forward_sample(net: &Network, sample: &Sample, form: Form) -> Result<SampleOutcome> {
    let opts = RunOptions {
        form,
        losses: form == Form::Training,
        grads: false,
        quant: None,
        sample_index: 0,
        max_steps: None,
    };
    run_sample(net, sample, opts, |_, _, _| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Seed of the per-epoch sample shuffle.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Per layer, mean local loss over samples.
    pub losses: Vec<f64>,
    /// Per layer, training accuracy of the time-averaged readout.
    pub accuracies: Vec<f64>,
}

/// One epoch of local-learning SGD. With a quantization policy the forward
/// pass uses stochastic rounding (Q on weights before use and on P, R, U
/// after every update), clamped coordinates get zero gradient, and updates go
/// through [`quant::scaled_update`].
pub fn train_epoch(
    net: &mut Network,
    data: &Dataset,
    opt: &SgdConfig,
    epoch: usize,
    policy: Option<&QuantPolicy>,
) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    if opt.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_layers = net.n_layers();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(opt.seed, &[purpose::SHUFFLE, epoch as u64]);
    for i in (1..order.len()).rev() {
        let j = shuffle.random_range(0..=i);
        order.swap(i, j);
    }

    let mut loss_sum = vec![0.0; n_layers];
    let mut correct = vec![0usize; n_layers];
    for (batch_index, batch) in order.chunks(opt.batch_size).enumerate() {
        let net_ref: &Network = net;
        let outcomes: Vec<SampleOutcome> = batch
            .par_iter()
            .map(|&i| {
                let quant = policy.map(|policy| QuantRun {
                    policy,
                    rounding: Rounding::Stochastic,
                    seed: opt.seed,
                    tag: epoch as u64,
                });
                let opts = RunOptions {
                    form: Form::Training,
                    losses: true,
                    grads: true,
                    quant,
                    sample_index: i,
                    max_steps: None,
                };
                run_sample(net_ref, &data.samples[i], opts, |_, _, _| {})
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch.len() as f64;
        for l in 0..n_layers {
            let mut g = vec![0.0; net.layers[l].spec.n_weights()];
            for (&i, out) in batch.iter().zip(&outcomes) {
                for (a, b) in g.iter_mut().zip(&out.grads[l]) {
                    *a += b;
                }
                loss_sum[l] += out.losses[l];
                if out.predictions[l] == data.samples[i].label {
                    correct[l] += 1;
                }
            }
            g.iter_mut().for_each(|v| *v *= scale);
            match policy {
                None => {
                    for (w, d) in net.layers[l].params.w.iter_mut().zip(&g) {
                        *w -= opt.lr * d;
                    }
                    if let Some(i) = net.layers[l].params.w.iter().position(|w| !w.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "weight {i} of layer {l} became non-finite at epoch {epoch}, batch {batch_index}"
                        )));
                    }
                }
                Some(policy) => {
                    // A weight clamped by the forward quantizer in any sample
                    // of the batch gets no update.
                    let mut mask = vec![false; g.len()];
                    for out in &outcomes {
                        for (m, &c) in mask.iter_mut().zip(&out.weight_masks[l]) {
                            *m |= c;
                        }
                    }
                    let g = quant::mask_gradient(&g, &mask)?;
                    let coords = [purpose::QUANT_UPDATE, epoch as u64, batch_index as u64, l as u64];
                    let mut urng = rng::stream(opt.seed, &coords);
                    let w = &net.layers[l].params.w;
                    let updated = quant::scaled_update(w, &g, opt.lr, policy, l, &mut urng)?;
                    net.layers[l].params.w = updated;
                }
            }
        }
    }
    let n = data.len() as f64;
    Ok(EpochReport {
        epoch,
        losses: loss_sum.iter().map(|l| l / n).collect(),
        accuracies: correct.iter().map(|&c| c as f64 / n).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per layer, fraction of samples whose readout argmax equals the label.
    pub accuracies: Vec<f64>,
    /// `predictions[sample][layer]`.
    pub predictions: Vec<Vec<usize>>,
}

/// Per-layer accuracy. With a policy, the training form runs with
/// round-to-nearest quantization.
pub fn evaluate(net: &Network, data: &Dataset, form: Form, policy: Option<&QuantPolicy>) -> Result<EvalReport> {
    if policy.is_some() && form == Form::Inference {
        return Err(Error::Config("quantized evaluation uses the training form".into()));
    }
    let predictions: Vec<Vec<usize>> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let quant = policy.map(|policy| QuantRun {
                policy,
                rounding: Rounding::Nearest,
                seed: 0,
                tag: 0,
            });
            let opts = RunOptions {
                form,
                losses: false,
                grads: false,
                quant,
                sample_index: i,
                max_steps: None,
            };
            run_sample(net, sample, opts, |_, _, _| {}).map(|o| o.predictions)
        })
        .collect::<Result<_>>()?;
    let n_layers = net.n_layers();
    let accuracies = (0..n_layers)
        .map(|l| {
            let hits = predictions
                .iter()
                .zip(&data.samples)
                .filter(|(p, s)| p[l] == s.label)
                .count();
            if data.is_empty() {
                0.0
            } else {
                hits as f64 / data.len() as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracies,
        predictions,
    })
}
