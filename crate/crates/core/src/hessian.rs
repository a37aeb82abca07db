//! Layer-wise Hessian traces.
//!
//! The trace of a layer's Hessian is estimated with Gaussian probes,
//! `Tr(H) = E[v^T H v]`, where each `H v` is a central finite difference of
//! the analytic local-loss gradient. [`exact_trace`] sums second differences
//! of the scalar loss coordinate by coordinate and serves as the oracle for
//! small layers.
//!
//! For a spiking layer the loss being differentiated is the straight-through
//! surrogate of the local loss. The base run's spikes `s`, traces `P`, reset
//! traces `R` and surrogate slopes are frozen; perturbed weights move the
//! spike values along the frozen slope only,
//!
//! ```text
//! u(W)  = W P - R
//! s~(W) = s + sigma'(u_base) (u(W) - u_base)
//! L(W)  = sum over (sample, step) of CE(softmax(B s~(W)), label)
//! ```
//!
//! At the base weights `s~ = s` and the gradient of `L` is exactly the local
//! weight gradient used in training (undivided by the sequence length). The
//! spike nonlinearity contributes no curvature of its own, so `H` is the
//! positive semi-definite `J^T H_CE J`.

use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::net::{self, Form, Network, RunOptions};
use crate::neuron::{self, Matrix};
use crate::rng::{self, purpose};
use crate::{Error, Result};

/// A twice-differentiable scalar function around a base point.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Base point at which curvature is measured.
    fn point(&self) -> &[f64];
    fn loss_at(&self, w: &[f64]) -> f64;
    fn grad_at(&self, w: &[f64]) -> Vec<f64>;
    /// Short label for error messages.
    fn label(&self) -> String {
        "objective".into()
    }
}

/// `L(w) = c (1/2 w^T A w + b^T w)` with symmetric `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub w0: Vec<f64>,
    pub scale: f64,
}

impl Quadratic {
    pub fn new(a: Matrix, w0: Vec<f64>) -> Result<Self> {
        if a.rows != a.cols || a.rows != w0.len() {
            return Err(Error::Config(format!(
                "quadratic needs a square matrix matching the point, got {}x{} and {}",
                a.rows,
                a.cols,
                w0.len()
            )));
        }
        let b = vec![0.0; w0.len()];
        Ok(Self { a, b, w0, scale: 1.0 })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut a = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            a.data[i * n + i] = d;
        }
        Self {
            a,
            b: vec![0.0; n],
            w0: vec![0.0; n],
            scale: 1.0,
        }
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.w0.len()
    }

    fn point(&self) -> &[f64] {
        &self.w0
    }

    fn loss_at(&self, w: &[f64]) -> f64 {
        let mut aw = vec![0.0; w.len()];
        self.a.matvec_into(w, &mut aw);
        let quad: f64 = w.iter().zip(&aw).map(|(x, y)| x * y).sum();
        let lin: f64 = w.iter().zip(&self.b).map(|(x, y)| x * y).sum();
        self.scale * (0.5 * quad + lin)
    }

    fn grad_at(&self, w: &[f64]) -> Vec<f64> {
        let mut aw = vec![0.0; w.len()];
        self.a.matvec_into(w, &mut aw);
        aw.iter().zip(&self.b).map(|(x, y)| self.scale * (x + y)).collect()
    }
}

/// Frozen state of one (sample, step) of the base run.
#[derive(Clone, Debug)]
struct SpanEntry {
    batch: usize,
    step: usize,
    label: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    base_u: Vec<f64>,
    s: Vec<f64>,
    /// `sigma'(u_base)` per neuron.
    slope: Vec<f64>,
}

/// Straight-through surrogate local loss of one layer, summed over a span of
/// batches and time steps.
#[derive(Clone, Debug)]
pub struct LayerObjective<'a> {
    net: &'a Network,
    layer: usize,
    entries: Vec<SpanEntry>,
    loss_scale: f64,
}

impl<'a> LayerObjective<'a> {
    /// Runs every sample of every batch for `max_seq` steps at full precision
    /// and freezes the layer's traces and spikes.
    pub fn build(net: &'a Network, layer: usize, batches: &[&[Sample]], max_seq: usize) -> Result<Self> {
        if layer >= net.n_layers() {
            return Err(Error::Input(format!(
                "layer index {layer} outside 0..{}",
                net.n_layers()
            )));
        }
        if max_seq == 0 {
            return Err(Error::Input("max_seq must be positive".into()));
        }
        let mut entries = Vec::new();
        for (b, batch) in batches.iter().enumerate() {
            for (i, sample) in batch.iter().enumerate() {
                let opts = RunOptions {
                    form: Form::Training,
                    losses: false,
                    grads: false,
                    quant: None,
                    sample_index: i,
                    max_steps: Some(max_seq),
                };
                net::run_sample(net, sample, opts, |l, t, st| {
                    if l == layer {
                        entries.push(SpanEntry {
                            batch: b,
                            step: t,
                            label: sample.label,
                            p: st.p.clone(),
                            r: st.r.clone(),
                            base_u: st.u.clone(),
                            s: st.s.clone(),
                            slope: st
                                .u
                                .iter()
                                .map(|&u| neuron::surrogate_grad(u, &net.layers[layer].spec.lif))
                                .collect(),
                        });
                    }
                })?;
            }
        }
        Ok(Self {
            net,
            layer,
            entries,
            loss_scale: 1.0,
        })
    }

    /// Keeps only the entries of one batch at one time step.
    pub fn restricted(&self, batch: usize, step: usize) -> Self {
        Self {
            net: self.net,
            layer: self.layer,
            entries: self
                .entries
                .iter()
                .filter(|e| e.batch == batch && e.step == step)
                .cloned()
                .collect(),
            loss_scale: self.loss_scale,
        }
    }

    pub fn with_loss_scale(mut self, scale: f64) -> Self {
        self.loss_scale = scale;
        self
    }

    /// Number of (sample, step) terms in the span.
    pub fn span_len(&self) -> usize {
        self.entries.len()
    }

    /// Relaxed spikes at weights `w`.
    fn relax(&self, w: &[f64], entry: &SpanEntry, u: &mut Vec<f64>, s: &mut Vec<f64>) {
        let layer = &self.net.layers[self.layer];
        u.resize(layer.spec.n_out(), 0.0);
        layer.spec.apply(w, &entry.p, u);
        s.clear();
        for (i, ui) in u.iter_mut().enumerate() {
            *ui -= entry.r[i];
            s.push(entry.s[i] + entry.slope[i] * (*ui - entry.base_u[i]));
        }
    }
}

impl Objective for LayerObjective<'_> {
    fn dim(&self) -> usize {
        self.net.layers[self.layer].spec.n_weights()
    }

    fn point(&self) -> &[f64] {
        &self.net.layers[self.layer].params.w
    }

    fn loss_at(&self, w: &[f64]) -> f64 {
        let readout = &self.net.layers[self.layer].params.readout;
        let (mut u, mut s) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        for entry in &self.entries {
            self.relax(w, entry, &mut u, &mut s);
            total += net::readout_loss_and_grad(readout, &s, entry.label).0;
        }
        self.loss_scale * total
    }

    fn grad_at(&self, w: &[f64]) -> Vec<f64> {
        let layer = &self.net.layers[self.layer];
        let mut grad = vec![0.0; layer.spec.n_weights()];
        let (mut u, mut s) = (Vec::new(), Vec::new());
        let mut delta = Vec::new();
        for entry in &self.entries {
            self.relax(w, entry, &mut u, &mut s);
            let (_, e) = net::readout_loss_and_grad(&layer.params.readout, &s, entry.label);
            delta.clear();
            delta.extend(e.iter().zip(&entry.slope).map(|(e, g)| e * g));
            layer.spec.accumulate_grad(&delta, &entry.p, self.loss_scale, &mut grad);
        }
        grad
    }

    fn label(&self) -> String {
        format!("layer {}", self.layer)
    }
}

/// Flat local-loss gradient of `layer` summed over `batch` at time `step`.
pub fn layer_gradient(net: &Network, layer: usize, batch: &[Sample], step: usize) -> Result<Vec<f64>> {
    let obj = LayerObjective::build(net, layer, &[batch], step + 1)?.restricted(0, step);
    Ok(obj.grad_at(obj.point()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `H v` by central differences of the gradient with step `fd_step / |v|`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, v: &[f64], fd_step: f64) -> Result<Vec<f64>> {
    if v.len() != obj.dim() {
        return Err(Error::Config(format!(
            "probe of {} for dimension {}",
            v.len(),
            obj.dim()
        )));
    }
    if !(fd_step > 0.0) {
        return Err(Error::Config(format!("fd_step must be positive, got {fd_step}")));
    }
    let vn = norm(v);
    if !(vn > 0.0) {
        return Err(Error::Input("probe vector has zero norm".into()));
    }
    let h = fd_step / vn;
    let w = obj.point();
    let plus: Vec<f64> = w.iter().zip(v).map(|(w, v)| w + h * v).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(w, v)| w - h * v).collect();
    let gp = obj.grad_at(&plus);
    let gm = obj.grad_at(&minus);
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite Hessian-vector product for {} at h = {h:e}",
            obj.label()
        )));
    }
    Ok(out)
}

/// Hessian-vector product of one layer's local loss for a single batch and
/// time step.
pub fn layer_hvp(
    net: &Network,
    layer: usize,
    v: &[f64],
    batch: &[Sample],
    step: usize,
    fd_step: f64,
) -> Result<Vec<f64>> {
    let obj = LayerObjective::build(net, layer, &[batch], step + 1)?.restricted(0, step);
    hvp(&obj, v, fd_step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HutchinsonConfig {
    /// Number of random probes.
    pub max_iter: usize,
    /// Batches in the span.
    pub max_batch: usize,
    /// Samples per batch.
    pub batch_size: usize,
    /// Time steps per sample.
    pub max_seq: usize,
    pub seed: u64,
    pub fd_step: f64,
    /// Scale each probe to unit length; the estimate is then `Tr / d`.
    pub normalize_probe: bool,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            max_batch: 1,
            batch_size: 8,
            max_seq: 50,
            seed: 0,
            fd_step: 1e-3,
            normalize_probe: false,
        }
    }
}

impl HutchinsonConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config(format!("fd_step must be positive, got {}", self.fd_step)));
        }
        if self.max_batch == 0 || self.batch_size == 0 || self.max_seq == 0 {
            return Err(Error::Config(
                "max_batch, batch_size and max_seq must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_probes: usize,
    /// `v^T H v` of every probe, in probe order.
    pub per_probe: Vec<f64>,
}

impl TraceEstimate {
    pub fn from_samples(per_probe: Vec<f64>) -> Self {
        let n = per_probe.len();
        let mean = per_probe.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = per_probe.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_err,
            n_probes: n,
            per_probe,
        }
    }
}

/// Hutchinson estimate with `cfg.max_iter` Gaussian probes. Probe `i` draws
/// from its own stream, so the result does not depend on thread count.
pub fn hutchinson<O: Objective + ?Sized>(obj: &O, cfg: &HutchinsonConfig) -> Result<TraceEstimate> {
    if cfg.max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let d = obj.dim();
    let per_probe: Vec<f64> = (0..cfg.max_iter)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, &[purpose::PROBE, i as u64]);
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            if cfg.normalize_probe {
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
            }
            let z = hvp(obj, &v, cfg.fd_step).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("probe {i}: {msg}")),
                other => other,
            })?;
            Ok(v.iter().zip(&z).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<_>>()?;
    Ok(TraceEstimate::from_samples(per_probe))
}

/// The span of `cfg`: the first `max_batch` batches of `batch_size` samples.
fn span<'d>(data: &'d Dataset, cfg: &HutchinsonConfig) -> Result<Vec<&'d [Sample]>> {
    let batches: Vec<&[Sample]> = data
        .samples
        .chunks(cfg.batch_size)
        .filter(|b| b.len() == cfg.batch_size)
        .take(cfg.max_batch)
        .collect();
    if batches.len() < cfg.max_batch {
        return Err(Error::Input(format!(
            "dataset of {} samples holds fewer than {} full batches of {}",
            data.len(),
            cfg.max_batch,
            cfg.batch_size
        )));
    }
    Ok(batches)
}

/// Hutchinson trace of one layer's local loss summed over the configured
/// span of batches and time steps.
pub fn hutchinson_trace(net: &Network, layer: usize, data: &Dataset, cfg: &HutchinsonConfig) -> Result<TraceEstimate> {
    cfg.validate()?;
    let batches = span(data, cfg)?;
    let obj = LayerObjective::build(net, layer, &batches, cfg.max_seq)?;
    hutchinson(&obj, cfg)
}

/// Largest dimension [`exact_trace`] accepts.
pub const EXACT_TRACE_MAX_DIM: usize = 200;

/// `sum_k d^2 L / dw_k^2` by central second differences with step `h`.
pub fn exact_trace<O: Objective + ?Sized>(obj: &O, h: f64) -> Result<f64> {
    let d = obj.dim();
    if d > EXACT_TRACE_MAX_DIM {
        return Err(Error::Input(format!(
            "exact trace limited to {EXACT_TRACE_MAX_DIM} parameters, got {d}"
        )));
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let mut w = obj.point().to_vec();
    let l0 = obj.loss_at(&w);
    let mut total = 0.0;
    for k in 0..d {
        let orig = w[k];
        w[k] = orig + h;
        let lp = obj.loss_at(&w);
        w[k] = orig - h;
        let lm = obj.loss_at(&w);
        w[k] = orig;
        total += (lp - 2.0 * l0 + lm) / (h * h);
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite exact trace for {}", obj.label())));
    }
    Ok(total)
}

/// Exact trace of one small layer over the same span as [`hutchinson_trace`].
pub fn exact_layer_trace(net: &Network, layer: usize, data: &Dataset, cfg: &HutchinsonConfig) -> Result<f64> {
    cfg.validate()?;
    if layer < net.n_layers() && net.layers[layer].spec.n_weights() > EXACT_TRACE_MAX_DIM {
        return Err(Error::Input(format!(
            "layer {layer} has {} weights; exact trace limited to {EXACT_TRACE_MAX_DIM}",
            net.layers[layer].spec.n_weights()
        )));
    }
    let batches = span(data, cfg)?;
    let obj = LayerObjective::build(net, layer, &batches, cfg.max_seq)?;
    exact_trace(&obj, cfg.fd_step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub estimate: TraceEstimate,
    pub normalized: bool,
    /// (batches, samples per batch, steps) summed over.
    pub span: (usize, usize, usize),
}

/// Hutchinson trace of every layer.
pub fn trace_report(net: &Network, data: &Dataset, cfg: &HutchinsonConfig) -> Result<Vec<LayerTrace>> {
    (0..net.n_layers())
        .map(|layer| {
            Ok(LayerTrace {
                layer,
                estimate: hutchinson_trace(net, layer, data, cfg)?,
                normalized: cfg.normalize_probe,
                span: (cfg.max_batch, cfg.batch_size, cfg.max_seq),
            })
        })
        .collect()
}

pub const TRACE_CSV_HEADER: &str = "layer,trace_mean,trace_stderr,n_probes,normalized";

/// Writes `layer,trace_mean,trace_stderr,n_probes,normalized` rows with
/// 1-based layer names `L1`, `L2`, ...
pub fn write_trace_csv<W: Write>(mut out: W, rows: &[LayerTrace]) -> Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for row in rows {
        writeln!(
            out,
            "L{},{:e},{:e},{},{}",
            row.layer + 1,
            row.estimate.mean,
            row.estimate.std_err,
            row.estimate.n_probes,
            row.normalized
        )?;
    }
    Ok(())
}

/// Row of a trace CSV as read back.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub layer: String,
    pub mean: f64,
    pub std_err: f64,
    pub n_probes: usize,
    pub normalized: bool,
}

pub fn read_trace_csv<R: BufRead>(input: R) -> Result<Vec<TraceRow>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty trace CSV".into()))?;
    if header.trim() != TRACE_CSV_HEADER {
        return Err(Error::Format(format!("unexpected trace CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Data {
            index: i,
            msg: format!("{msg} in {line:?}"),
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        rows.push(TraceRow {
            layer: f[0].to_string(),
            mean: f[1].parse().map_err(|_| bad("bad trace_mean"))?,
            std_err: f[2].parse().map_err(|_| bad("bad trace_stderr"))?,
            n_probes: f[3].parse().map_err(|_| bad("bad n_probes"))?,
            normalized: f[4].parse().map_err(|_| bad("bad normalized flag"))?,
        });
    }
    Ok(rows)
}
