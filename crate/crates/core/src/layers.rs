//! Stateless differentiable layers with hand-written backward passes.
//!
//! Weight matrices are stored `fan_in × fan_out` and applied as `Wᵀ x`, so
//! `w[i][j]` connects input `i` to output `j`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, squared_distance, Matrix};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// How the repression layer fuses `F_SLS-1` with `F_ACS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepressionKind {
    /// `Wᵀ (s ∘ a)`
    Prl,
    /// `Wᵀ (s − a)`
    Srl,
    /// `Wᵀ [s; a]`
    Crl,
    /// `Wᵀ s`, ignoring the attribute stream.
    #[serde(rename = "norep")]
    NoRep,
}

impl RepressionKind {
    pub const ALL: [RepressionKind; 4] = [
        RepressionKind::Prl,
        RepressionKind::Srl,
        RepressionKind::Crl,
        RepressionKind::NoRep,
    ];

    /// Rows of the weight matrix for a given input width.
    pub fn weight_rows(self, d_input: usize) -> usize {
        match self {
            RepressionKind::Crl => 2 * d_input,
            _ => d_input,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RepressionKind::Prl => "prl",
            RepressionKind::Srl => "srl",
            RepressionKind::Crl => "crl",
            RepressionKind::NoRep => "norep",
        }
    }
}

impl fmt::Display for RepressionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RepressionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prl" => Ok(RepressionKind::Prl),
            "srl" => Ok(RepressionKind::Srl),
            "crl" => Ok(RepressionKind::Crl),
            "norep" => Ok(RepressionKind::NoRep),
            other => Err(Error::Param(format!("unknown repression kind '{other}'"))),
        }
    }
}

/// Gradients of a layer with respect to its inputs and parameters.
///
/// `d_inputs` follows the forward argument order; `d_bias` is empty for
/// bias-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_inputs: Vec<Vec<f64>>,
    pub d_weights: Matrix,
    pub d_bias: Vec<f64>,
}

fn check_fc(input: &[f64], weights: &Matrix) -> Result<()> {
    if input.len() != weights.rows() {
        return Err(Error::shape(format!(
            "fc input dim {} does not match {}x{} weights",
            input.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    Ok(())
}

/// `Wᵀ x + b`
pub fn fc_forward(input: &[f64], weights: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    check_fc(input, weights)?;
    if bias.len() != weights.cols() {
        return Err(Error::shape(format!(
            "fc bias dim {} does not match {}x{} weights",
            bias.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    let mut out = bias.to_vec();
    for (i, &x) in input.iter().enumerate() {
        if x != 0.0 {
            axpy(x, weights.row(i), &mut out);
        }
    }
    Ok(out)
}

/// Accumulates `input ⊗ delta` into `d_weights` and returns `W δ`.
pub(crate) fn fc_backward_accumulate(
    input: &[f64],
    weights: &Matrix,
    delta: &[f64],
    d_weights: &mut Matrix,
) -> Vec<f64> {
    for (i, &x) in input.iter().enumerate() {
        if x != 0.0 {
            axpy(x, delta, d_weights.row_mut(i));
        }
    }
    (0..weights.rows())
        .map(|i| weights.row(i).iter().zip(delta).map(|(w, d)| w * d).sum())
        .collect()
}

pub fn fc_backward(input: &[f64], weights: &Matrix, delta: &[f64]) -> Result<LayerGrads> {
    check_fc(input, weights)?;
    if delta.len() != weights.cols() {
        return Err(Error::shape(format!(
            "fc delta dim {} does not match {}x{} weights",
            delta.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    let mut d_weights = Matrix::zeros(weights.rows(), weights.cols());
    let d_input = fc_backward_accumulate(input, weights, delta, &mut d_weights);
    Ok(LayerGrads {
        d_inputs: vec![d_input],
        d_weights,
        d_bias: delta.to_vec(),
    })
}

pub fn relu(input: &[f64]) -> Vec<f64> {
    // NaN passes through so divergence is not masked
    input.iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect()
}

/// Masks `delta` where the forward input was ≤ 0.
pub fn relu_backward(input: &[f64], delta: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(delta)
        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Returns `(−log softmax(z)[label], softmax(z) − onehot(label))`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = sum.ln() + max;
    let loss = log_sum - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((if loss < 0.0 { 0.0 } else { loss }, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negative: Vec<f64>,
}

impl TripletOutput {
    pub fn is_active(&self) -> bool {
        self.loss > 0.0
    }
}

/// Hinge triplet loss `max(0, ‖a−p‖² − ‖a−n‖² + margin)` on squared distances.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletOutput> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::shape(format!(
            "triplet dims differ: anchor {}, positive {}, negative {}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Param(format!("triplet margin must be positive, got {margin}")));
    }
    let d_ap = squared_distance(anchor, positive);
    let d_an = squared_distance(anchor, negative);
    let raw = d_ap - d_an + margin;
    let dim = anchor.len();
    if raw <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            d_anchor: vec![0.0; dim],
            d_positive: vec![0.0; dim],
            d_negative: vec![0.0; dim],
        });
    }
    let mut d_anchor = Vec::with_capacity(dim);
    let mut d_positive = Vec::with_capacity(dim);
    let mut d_negative = Vec::with_capacity(dim);
    for i in 0..dim {
        let ap = anchor[i] - positive[i];
        let an = anchor[i] - negative[i];
        d_anchor.push(2.0 * ap - 2.0 * an);
        d_positive.push(-2.0 * ap);
        d_negative.push(2.0 * an);
    }
    Ok(TripletOutput {
        loss: raw,
        d_anchor,
        d_positive,
        d_negative,
    })
}

fn check_rep(kind: RepressionKind, f_sls1: &[f64], f_acs: &[f64], weights: &Matrix) -> Result<()> {
    if f_sls1.len() != f_acs.len() {
        return Err(Error::shape(format!(
            "repression inputs differ: F_SLS-1 dim {} vs F_ACS dim {}",
            f_sls1.len(),
            f_acs.len()
        )));
    }
    let rows = kind.weight_rows(f_sls1.len());
    if weights.rows() != rows {
        return Err(Error::shape(format!(
            "{kind} weights must have {rows} rows for input dim {}, got {}x{}",
            f_sls1.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    Ok(())
}

/// The vector the repression weights act on.
fn rep_fused(kind: RepressionKind, f_sls1: &[f64], f_acs: &[f64]) -> Vec<f64> {
    match kind {
        RepressionKind::Prl => f_sls1.iter().zip(f_acs).map(|(s, a)| s * a).collect(),
        RepressionKind::Srl => f_sls1.iter().zip(f_acs).map(|(s, a)| s - a).collect(),
        RepressionKind::Crl => [f_sls1, f_acs].concat(),
        RepressionKind::NoRep => f_sls1.to_vec(),
    }
}

pub fn rep_forward(kind: RepressionKind, f_sls1: &[f64], f_acs: &[f64], weights: &Matrix) -> Result<Vec<f64>> {
    check_rep(kind, f_sls1, f_acs, weights)?;
    let fused = rep_fused(kind, f_sls1, f_acs);
    weights.tr_mul_vec(&fused)
}

pub(crate) fn rep_backward_accumulate(
    kind: RepressionKind,
    f_sls1: &[f64],
    f_acs: &[f64],
    weights: &Matrix,
    delta: &[f64],
    d_weights: &mut Matrix,
) -> (Vec<f64>, Vec<f64>) {
    let fused = rep_fused(kind, f_sls1, f_acs);
    // d_w[i][j] = δ[j] · fused[i]; the back-projection W δ is split per kind
    let back = fc_backward_accumulate(&fused, weights, delta, d_weights);
    let d = f_sls1.len();
    match kind {
        RepressionKind::Prl => {
            let d_sls1 = back.iter().zip(f_acs).map(|(b, a)| b * a).collect();
            let d_acs = back.iter().zip(f_sls1).map(|(b, s)| b * s).collect();
            (d_sls1, d_acs)
        }
        RepressionKind::Srl => {
            // ∂/∂a of Wᵀ(s − a) carries a minus sign, so the two input
            // gradients are negatives of each other.
            let d_acs = back.iter().map(|b| -b).collect();
            (back, d_acs)
        }
        RepressionKind::Crl => {
            let d_acs = back[d..].to_vec();
            let mut d_sls1 = back;
            d_sls1.truncate(d);
            (d_sls1, d_acs)
        }
        RepressionKind::NoRep => (back, vec![0.0; d]),
    }
}

pub fn rep_backward(
    kind: RepressionKind,
    f_sls1: &[f64],
    f_acs: &[f64],
    weights: &Matrix,
    delta: &[f64],
) -> Result<LayerGrads> {
    check_rep(kind, f_sls1, f_acs, weights)?;
    if delta.len() != weights.cols() {
        return Err(Error::shape(format!(
            "repression delta dim {} does not match {}x{} weights",
            delta.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    let mut d_weights = Matrix::zeros(weights.rows(), weights.cols());
    let (d_sls1, d_acs) = rep_backward_accumulate(kind, f_sls1, f_acs, weights, delta, &mut d_weights);
    Ok(LayerGrads {
        d_inputs: vec![d_sls1, d_acs],
        d_weights,
        d_bias: Vec::new(),
    })
}

/// Returns `(z / ‖z‖, ‖z‖)`; a zero vector stays zero.
pub fn l2_normalize(z: &[f64]) -> (Vec<f64>, f64) {
    let n = crate::linalg::norm(z);
    if n == 0.0 {
        return (vec![0.0; z.len()], 0.0);
    }
    (z.iter().map(|x| x / n).collect(), n)
}

/// Backward of [`l2_normalize`] given its output `y` and input norm.
pub fn l2_normalize_backward(y: &[f64], input_norm: f64, delta: &[f64]) -> Vec<f64> {
    if input_norm == 0.0 {
        return vec![0.0; y.len()];
    }
    let proj: f64 = y.iter().zip(delta).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(delta)
        .map(|(yi, di)| (di - yi * proj) / input_norm)
        .collect()
}
