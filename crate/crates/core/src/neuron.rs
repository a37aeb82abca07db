//! Simplified leaky integrate-and-fire neuron.
//!
//! The neuron has two algebraically equivalent forms. The inference form
//! keeps a single membrane potential per neuron:
//!
//! ```text
//! U[n] = alpha * U[n-1] * (1 - S[n-1]) + sum_j W_ij S_j
//! S[n] = step(U[n] - U_thres)
//! ```
//!
//! The training form splits the potential into a presynaptic trace `P` and a
//! reset trace `R`, which makes `dU_i/dW_ij = P_j` available without any
//! backpropagation through time:
//!
//! ```text
//! P[n] = alpha * P[n-1] + S_in
//! R[n] = alpha * R[n-1] + alpha * U[n-1] * S[n-1]
//! U[n] = W P[n] - R[n]
//! S[n] = step(U[n] - U_thres)
//! ```
//!
//! The step function fires at equality: `step(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Per-step decay, strictly between 0 and 1.
    pub alpha: f64,
    /// Firing threshold.
    pub u_thres: f64,
    /// Sharpness of the fast-sigmoid surrogate derivative.
    pub surrogate_beta: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            alpha: 0.97,
            u_thres: 1.0,
            surrogate_beta: 10.0,
        }
    }
}

impl LifParams {
    pub fn new(alpha: f64, u_thres: f64, surrogate_beta: f64) -> Result<Self> {
        let params = Self {
            alpha,
            u_thres,
            surrogate_beta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !self.u_thres.is_finite() {
            return Err(Error::Config(format!("u_thres must be finite, got {}", self.u_thres)));
        }
        if !(self.surrogate_beta > 0.0 && self.surrogate_beta.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate_beta must be positive, got {}",
                self.surrogate_beta
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn fires(&self, u: f64) -> bool {
        u >= self.u_thres
    }

    #[inline]
    pub fn spike(&self, u: f64) -> f64 {
        if self.fires(u) {
            1.0
        } else {
            0.0
        }
    }
}

/// Fast-sigmoid surrogate derivative `1 / (beta |u - u_thres| + 1)^2`.
#[inline]
pub fn surrogate_grad(u: f64, params: &LifParams) -> f64 {
    let d = params.surrogate_beta * (u - params.u_thres).abs() + 1.0;
    1.0 / (d * d)
}

/// Antiderivative of [`surrogate_grad`] that vanishes at threshold:
/// `x / (1 + beta |x|)` with `x = u - u_thres`.
#[inline]
pub fn surrogate_integral(u: f64, params: &LifParams) -> f64 {
    let x = u - params.u_thres;
    x / (1.0 + params.surrogate_beta * x.abs())
}

/// Row-major dense matrix, used for dense weights and weight gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// `out = self * x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferState {
    pub u: Vec<f64>,
}

impl InferState {
    pub fn zeros(n: usize) -> Self {
        Self { u: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Presynaptic traces, one per input.
    pub p: Vec<f64>,
    /// Reset traces, one per neuron.
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    /// Spikes of the last step, 0.0 or 1.0.
    pub s: Vec<f64>,
}

impl TrainState {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            p: vec![0.0; n_in],
            r: vec![0.0; n_out],
            u: vec![0.0; n_out],
            s: vec![0.0; n_out],
        }
    }

    pub fn n_in(&self) -> usize {
        self.p.len()
    }

    pub fn n_out(&self) -> usize {
        self.u.len()
    }
}

/// Loss gradient propagated to each neuron's spike output.
#[derive(Clone, Debug, PartialEq)]
pub struct BackSignal {
    pub e: Vec<f64>,
}

/// Interception points after each state-variable update of the training
/// form. The quantizer uses these to round `P`, `R` and `U` in place.
pub trait StateHook {
    fn after_p(&mut self, _p: &mut [f64]) {}
    fn after_r(&mut self, _r: &mut [f64]) {}
    fn after_u(&mut self, _u: &mut [f64]) {}
}

/// Leaves the state untouched.
pub struct NoHook;

impl StateHook for NoHook {}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::StateCorruption(format!("{what}[{i}] = {}", values[i]))),
    }
}

/// Advances the inference form by one step and writes the emitted spikes.
///
/// The previous step's spike is recovered from the stored potential itself,
/// so `u` is the only state carried between steps.
pub fn step_inference_into(
    state: &mut InferState,
    params: &LifParams,
    weighted_input: &[f64],
    spikes: &mut [f64],
) -> Result<()> {
    if weighted_input.len() != state.u.len() || spikes.len() != state.u.len() {
        return Err(Error::Config(format!(
            "inference step: state has {} neurons, input {}, spike buffer {}",
            state.u.len(),
            weighted_input.len(),
            spikes.len()
        )));
    }
    check_finite(weighted_input, "weighted_input")?;
    check_finite(&state.u, "stored u")?;
    for ((u, &x), s) in state.u.iter_mut().zip(weighted_input).zip(spikes.iter_mut()) {
        // Reset to zero: a neuron that fired last step keeps nothing.
        let carried = if params.fires(*u) { 0.0 } else { params.alpha * *u };
        *u = carried + x;
        *s = params.spike(*u);
    }
    check_finite(&state.u, "u")
}

pub fn step_inference(state: &mut InferState, params: &LifParams, weighted_input: &[f64]) -> Result<Vec<f64>> {
    let mut spikes = vec![0.0; state.u.len()];
    step_inference_into(state, params, weighted_input, &mut spikes)?;
    Ok(spikes)
}

/// Advances the training form by one step.
///
/// `apply_weights(p, u)` must overwrite `u` with `W p`; dense and
/// convolutional layers supply their own weight application.
pub fn step_training_with<F, H>(
    state: &mut TrainState,
    params: &LifParams,
    in_spikes: &[f64],
    apply_weights: F,
    hook: &mut H,
) -> Result<()>
where
    F: FnOnce(&[f64], &mut [f64]),
    H: StateHook + ?Sized,
{
    if in_spikes.len() != state.p.len() {
        return Err(Error::Config(format!(
            "training step: {} input spikes for {} presynaptic traces",
            in_spikes.len(),
            state.p.len()
        )));
    }
    let alpha = params.alpha;
    for (p, &s) in state.p.iter_mut().zip(in_spikes) {
        *p = alpha * *p + s;
    }
    hook.after_p(&mut state.p);
    // Uses the previous step's potential and spike.
    for ((r, &u), &s) in state.r.iter_mut().zip(&state.u).zip(&state.s) {
        *r = alpha * *r + alpha * u * s;
    }
    hook.after_r(&mut state.r);
    apply_weights(&state.p, &mut state.u);
    for (u, &r) in state.u.iter_mut().zip(&state.r) {
        *u -= r;
    }
    hook.after_u(&mut state.u);
    for (s, &u) in state.s.iter_mut().zip(&state.u) {
        *s = params.spike(u);
    }
    check_finite(&state.u, "u")
}

/// Training-form step with a dense weight matrix (`rows` = neurons,
/// `cols` = inputs).
pub fn step_training(state: &mut TrainState, params: &LifParams, weights: &Matrix, in_spikes: &[f64]) -> Result<()> {
    if weights.cols != state.p.len() || weights.rows != state.u.len() {
        return Err(Error::Config(format!(
            "weights are {}x{} but state has {} neurons and {} inputs",
            weights.rows,
            weights.cols,
            state.u.len(),
            state.p.len()
        )));
    }
    step_training_with(state, params, in_spikes, |p, u| weights.matvec_into(p, u), &mut NoHook)
}

/// Local weight gradient `grad[i][j] = e[i] * surrogate_grad(u[i]) * p[j]`.
///
/// Only the current traces enter; nothing is propagated back in time.
pub fn local_weight_grad(back: &BackSignal, state: &TrainState, params: &LifParams) -> Result<Matrix> {
    if back.e.len() != state.u.len() {
        return Err(Error::Config(format!(
            "back signal has {} entries for {} neurons",
            back.e.len(),
            state.u.len()
        )));
    }
    let cols = state.p.len();
    let mut grad = Matrix::zeros(state.u.len(), cols);
    for ((row, &e), &u) in grad.data.chunks_exact_mut(cols.max(1)).zip(&back.e).zip(&state.u) {
        let delta = e * surrogate_grad(u, params);
        for (g, &p) in row.iter_mut().zip(&state.p) {
            *g = delta * p;
        }
    }
    Ok(grad)
}
