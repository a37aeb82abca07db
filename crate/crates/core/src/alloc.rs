//! Model-size accounting and trace-guided bit allocation.
//!
//! Only synaptic weights count towards model size; readouts and biases are
//! excluded. Sizes are reported in decimal megabytes (10^6 bytes).

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::net::{LayerKind, LayerSpec};
use crate::{Error, Result};

pub const BYTES_PER_MB: f64 = 1e6;
/// Upper bound on `menu.len() ^ n_layers` for [`enumerate_configs`].
pub const MAX_CONFIGS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitConfig {
    pub weight_bits: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_bits: Option<Vec<u32>>,
}

impl BitConfig {
    pub fn uniform(n_layers: usize, bits: u32) -> Self {
        Self {
            weight_bits: vec![bits; n_layers],
            state_bits: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |bits: &[u32]| match bits.iter().find(|b| !(2..=32).contains(*b)) {
            Some(b) => Err(Error::Input(format!("bit width {b} outside 2..=32"))),
            None => Ok(()),
        };
        check(&self.weight_bits)?;
        if let Some(state) = &self.state_bits {
            if state.len() != self.weight_bits.len() {
                return Err(Error::Input(format!(
                    "{} state widths for {} layers",
                    state.len(),
                    self.weight_bits.len()
                )));
            }
            check(state)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub params: Vec<u64>,
    pub bytes: Vec<u64>,
    pub total_bytes: u64,
}

impl SizeReport {
    pub fn total_mb(&self) -> f64 {
        self.total_bytes as f64 / BYTES_PER_MB
    }

    /// Megabytes rounded to two decimals, as displayed in reports.
    pub fn display_mb(&self) -> f64 {
        (self.total_mb() * 100.0).round() / 100.0
    }
}

/// Weights per layer: `c_in * c_out * k * k` for convolutions, `n_in * n_out`
/// for dense layers.
pub fn param_counts(specs: &[LayerSpec]) -> Vec<u64> {
    specs
        .iter()
        .map(|s| match s.kind {
            LayerKind::Conv { kernel } => (s.in_shape.c * s.out_shape.c * kernel * kernel) as u64,
            LayerKind::Dense => (s.n_in() * s.n_out()) as u64,
        })
        .collect()
}

pub fn model_size(counts: &[u64], bits: &[u32]) -> Result<SizeReport> {
    if counts.len() != bits.len() {
        return Err(Error::Input(format!(
            "{} parameter counts for {} bit widths",
            counts.len(),
            bits.len()
        )));
    }
    let bytes: Vec<u64> = counts
        .iter()
        .zip(bits)
        .map(|(&n, &b)| (n * u64::from(b)).div_ceil(8))
        .collect();
    Ok(SizeReport {
        params: counts.to_vec(),
        total_bytes: bytes.iter().sum(),
        bytes,
    })
}

/// Layer indices ordered by ascending trace; equal traces keep layer order.
pub fn rank_by_trace(traces: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = traces.iter().position(|t| t.is_nan()) {
        return Err(Error::Input(format!("trace of layer {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by(|&a, &b| traces[a].total_cmp(&traces[b]));
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bits: Vec<u32>,
    pub size: SizeReport,
}

/// Every assignment of `menu` widths to the layers, smallest model first
/// (ties in lexicographic bit order).
pub fn enumerate_configs(counts: &[u64], menu: &[u32]) -> Result<Vec<Candidate>> {
    if menu.is_empty() {
        return Err(Error::Input("bit menu is empty".into()));
    }
    let total = u32::try_from(counts.len())
        .ok()
        .and_then(|n| menu.len().checked_pow(n))
        .filter(|&t| t <= MAX_CONFIGS)
        .ok_or_else(|| {
            Error::Input(format!(
                "{} widths over {} layers exceeds {MAX_CONFIGS} configurations",
                menu.len(),
                counts.len()
            ))
        })?;
    let mut out = Vec::with_capacity(total);
    for mut index in 0..total {
        let mut bits = vec![0; counts.len()];
        // last layer varies fastest
        for b in bits.iter_mut().rev() {
            *b = menu[index % menu.len()];
            index /= menu.len();
        }
        BitConfig {
            weight_bits: bits.clone(),
            state_bits: None,
        }
        .validate()?;
        let size = model_size(counts, &bits)?;
        out.push(Candidate { bits, size });
    }
    out.sort_by(|a, b| {
        a.size
            .total_bytes
            .cmp(&b.size.total_bytes)
            .then_with(|| a.bits.cmp(&b.bits))
    });
    Ok(out)
}

/// Quantization-noise proxy `sum_l trace_l * 2^(-2 bits_l)`: noise power of a
/// uniform quantizer scales with `eps^2`.
pub fn sensitivity(traces: &[f64], bits: &[u32]) -> f64 {
    traces
        .iter()
        .zip(bits)
        .map(|(&t, &b)| t * 2f64.powi(-2 * b as i32))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub bits: Vec<u32>,
    pub size: SizeReport,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Recommendation {
    Ranked(Vec<RankedCandidate>),
    /// No candidate fits the budget.
    InfeasibleBudget {
        max_size_bytes: f64,
        smallest_bytes: u64,
    },
}

/// Candidates within `max_size_bytes`, by ascending [`sensitivity`], then
/// smaller size, then lexicographic bits.
pub fn recommend(traces: &[f64], candidates: &[Candidate], max_size_bytes: f64) -> Result<Recommendation> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidate configurations".into()));
    }
    if let Some(i) = traces.iter().position(|t| !t.is_finite()) {
        return Err(Error::Input(format!("trace of layer {i} is not finite")));
    }
    if let Some(c) = candidates.iter().find(|c| c.bits.len() != traces.len()) {
        return Err(Error::Input(format!(
            "candidate {:?} does not match {} traces",
            c.bits,
            traces.len()
        )));
    }
    let mut ranked: Vec<RankedCandidate> = candidates
        .iter()
        .filter(|c| c.size.total_bytes as f64 <= max_size_bytes)
        .map(|c| RankedCandidate {
            bits: c.bits.clone(),
            size: c.size.clone(),
            sensitivity: sensitivity(traces, &c.bits),
        })
        .collect();
    if ranked.is_empty() {
        let smallest_bytes = candidates.iter().map(|c| c.size.total_bytes).min().unwrap_or(0);
        return Ok(Recommendation::InfeasibleBudget {
            max_size_bytes,
            smallest_bytes,
        });
    }
    ranked.sort_by(|a, b| {
        a.sensitivity
            .total_cmp(&b.sensitivity)
            .then_with(|| a.size.total_bytes.cmp(&b.size.total_bytes))
            .then_with(|| a.bits.cmp(&b.bits))
    });
    Ok(Recommendation::Ranked(ranked))
}

/// `l1_bits,...,lN_bits,size_mb,sensitivity`.
pub fn write_recommendation_csv<W: Write>(mut out: W, ranked: &[RankedCandidate]) -> Result<()> {
    let n = ranked.first().map_or(0, |r| r.bits.len());
    let mut header: Vec<String> = (1..=n).map(|l| format!("l{l}_bits")).collect();
    header.push("size_mb".into());
    header.push("sensitivity".into());
    writeln!(out, "{}", header.join(","))?;
    for r in ranked {
        let bits: Vec<String> = r.bits.iter().map(u32::to_string).collect();
        writeln!(out, "{},{:.2},{:e}", bits.join(","), r.size.display_mb(), r.sensitivity)?;
    }
    Ok(())
}

/// Compares candidates the way [`recommend`] orders them.
pub fn proxy_order(traces: &[f64], a: &[u32], b: &[u32]) -> Ordering {
    sensitivity(traces, a).total_cmp(&sensitivity(traces, b))
}
