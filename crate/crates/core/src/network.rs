//! The two-stream network: a shared MLP base, an attribute stream ending in
//! color and model heads, and a similarity stream routed through the
//! repression layer.
//!
//! ```text
//! input ─ base.* ─┬─ acs ── F_ACS ─┬─ color_head
//!                 │                ├─ model_head
//!                 │                │
//!                 └─ sls1 ─ F_SLS-1 ─ rep(F_SLS-1, F_ACS) ─ F_SLS-2 ─ sls3 ─ ‖·‖ ─ F_SLS-3
//! ```
//!
//! ReLU follows every hidden layer (base, acs, sls1, rep). Logits and the
//! pre-normalization embedding are linear.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{validate_triplet, Dataset, Triplet, TripletBatch};
use crate::error::{Error, Result};
use crate::layers::{
    fc_backward_accumulate, fc_forward, l2_normalize, l2_normalize_backward, relu, relu_backward,
    rep_backward_accumulate, rep_forward, softmax, softmax_cross_entropy, triplet_loss, RepressionKind, DEFAULT_MARGIN,
};
use crate::linalg::{axpy, Matrix};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub triplet: f64,
    pub color: f64,
    pub model: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            triplet: 1.0,
            color: 1.0,
            model: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepNetConfig {
    pub input_dim: usize,
    /// Widths of the shared base layers; empty means `F_base` is the input.
    pub base_dims: Vec<usize>,
    pub d_acs: usize,
    pub d_sls1: usize,
    pub d_sls2: usize,
    pub d_sls3: usize,
    pub n_colors: usize,
    pub n_models: usize,
    pub rep_kind: RepressionKind,
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub momentum: f64,
    /// Triplets per step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RepNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            base_dims: vec![64],
            d_acs: 64,
            d_sls1: 64,
            d_sls2: 48,
            d_sls3: 32,
            n_colors: 4,
            n_models: 6,
            rep_kind: RepressionKind::Prl,
            margin: DEFAULT_MARGIN,
            loss_weights: LossWeights::default(),
            base_lr: 0.001,
            decay_factor: 0.5,
            decay_interval: 2000,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl RepNetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("d_acs", self.d_acs),
            ("d_sls1", self.d_sls1),
            ("d_sls2", self.d_sls2),
            ("d_sls3", self.d_sls3),
            ("n_colors", self.n_colors),
            ("n_models", self.n_models),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("{name} must be at least 1")));
        }
        if let Some(i) = self.base_dims.iter().position(|&w| w == 0) {
            return Err(Error::Param(format!("base_dims[{i}] must be at least 1")));
        }
        if self.d_sls1 != self.d_acs {
            return Err(Error::Param(format!(
                "repression inputs need d_sls1 == d_acs, got {} and {}",
                self.d_sls1, self.d_acs
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Param(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_interval == 0 {
            return Err(Error::Param("decay_interval must be at least 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Param(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Param(format!(
                "base_lr must be non-negative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        let w = self.loss_weights;
        if [w.triplet, w.color, w.model]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Param("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols, has_bias)` for every layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize, bool)> {
        let mut shapes = Vec::new();
        let mut prev = self.input_dim;
        for (i, &w) in self.base_dims.iter().enumerate() {
            shapes.push((format!("base.{i}"), prev, w, true));
            prev = w;
        }
        shapes.push(("acs".into(), prev, self.d_acs, true));
        shapes.push(("color_head".into(), self.d_acs, self.n_colors, true));
        shapes.push(("model_head".into(), self.d_acs, self.n_models, true));
        shapes.push(("sls1".into(), prev, self.d_sls1, true));
        shapes.push(("rep".into(), self.rep_kind.weight_rows(self.d_sls1), self.d_sls2, false));
        shapes.push(("sls3".into(), self.d_sls2, self.d_sls3, true));
        shapes
    }
}

/// Step schedule: `base_lr · decay_factor^⌊iteration / decay_interval⌋`.
pub fn lr_at(iteration: u64, config: &RepNetConfig) -> f64 {
    let steps = (iteration / config.decay_interval.max(1)) as i32;
    config.base_lr * config.decay_factor.powi(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weights: Matrix,
    /// Empty for the bias-free repression layer.
    pub bias: Vec<f64>,
}

/// Learnable parameters plus their momentum buffers, in
/// [`RepNetConfig::layer_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct RepNetParams {
    pub layers: Vec<LayerParams>,
    pub momentum: Vec<LayerParams>,
}

impl RepNetParams {
    pub fn zeros(config: &RepNetConfig) -> Self {
        let layers: Vec<LayerParams> = config
            .layer_shapes()
            .into_iter()
            .map(|(name, r, c, has_bias)| LayerParams {
                name,
                weights: Matrix::zeros(r, c),
                bias: if has_bias { vec![0.0; c] } else { Vec::new() },
            })
            .collect();
        Self {
            momentum: layers.clone(),
            layers,
        }
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases.
    pub fn init(config: &RepNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Self::zeros(config);
        for layer in &mut params.layers {
            let (r, c) = layer.weights.shape();
            let limit = (6.0 / (r + c) as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    /// Verifies every layer against the config, naming the first mismatch.
    pub fn check_shapes(&self, config: &RepNetConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        for (table, label) in [(&self.layers, "weights"), (&self.momentum, "momentum")] {
            if table.len() != shapes.len() {
                return Err(Error::shape(format!(
                    "{label} table has {} layers, config expects {}",
                    table.len(),
                    shapes.len()
                )));
            }
            for (layer, (name, r, c, has_bias)) in table.iter().zip(&shapes) {
                if &layer.name != name {
                    return Err(Error::shape(format!(
                        "layer '{}' found where '{name}' expected",
                        layer.name
                    )));
                }
                let bias_len = if *has_bias { *c } else { 0 };
                if layer.weights.shape() != (*r, *c) || layer.bias.len() != bias_len {
                    return Err(Error::shape(format!(
                        "layer '{name}' {label} is {}x{} with bias {}, config expects {r}x{c} with bias {bias_len}",
                        layer.weights.rows(),
                        layer.weights.cols(),
                        layer.bias.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &RepNetParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            axpy(1.0, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|m| m.scale(s));
        self.biases.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|m| m.as_slice())
            .chain(self.biases.iter().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Named intermediate features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureName {
    #[serde(rename = "F_base")]
    Base,
    #[serde(rename = "F_ACS")]
    Acs,
    #[serde(rename = "F_model")]
    Model,
    #[serde(rename = "F_color")]
    Color,
    #[serde(rename = "F_SLS-1")]
    Sls1,
    #[serde(rename = "F_SLS-2")]
    Sls2,
    #[serde(rename = "F_SLS-3")]
    Sls3,
}

impl FeatureName {
    pub const ALL: [FeatureName; 7] = [
        FeatureName::Base,
        FeatureName::Acs,
        FeatureName::Model,
        FeatureName::Color,
        FeatureName::Sls1,
        FeatureName::Sls2,
        FeatureName::Sls3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureName::Base => "F_base",
            FeatureName::Acs => "F_ACS",
            FeatureName::Model => "F_model",
            FeatureName::Color => "F_color",
            FeatureName::Sls1 => "F_SLS-1",
            FeatureName::Sls2 => "F_SLS-2",
            FeatureName::Sls3 => "F_SLS-3",
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Param(format!("unknown feature '{s}'")))
    }
}

/// Every named feature of one forward pass plus the pre-activations needed
/// by backward.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activation and post-ReLU output of each base layer.
    pub base_pre: Vec<Vec<f64>>,
    pub base_out: Vec<Vec<f64>>,
    pub acs_pre: Vec<f64>,
    pub f_acs: Vec<f64>,
    pub f_color: Vec<f64>,
    pub f_model: Vec<f64>,
    pub sls1_pre: Vec<f64>,
    pub f_sls1: Vec<f64>,
    pub rep_pre: Vec<f64>,
    pub f_sls2: Vec<f64>,
    /// Embedding before normalization and its L2 norm.
    pub sls3_raw: Vec<f64>,
    pub sls3_norm: f64,
    pub f_sls3: Vec<f64>,
}

impl ForwardTrace {
    pub fn f_base(&self) -> &[f64] {
        self.base_out.last().unwrap_or(&self.input)
    }

    pub fn feature(&self, name: FeatureName) -> &[f64] {
        match name {
            FeatureName::Base => self.f_base(),
            FeatureName::Acs => &self.f_acs,
            FeatureName::Model => &self.f_model,
            FeatureName::Color => &self.f_color,
            FeatureName::Sls1 => &self.f_sls1,
            FeatureName::Sls2 => &self.f_sls2,
            FeatureName::Sls3 => &self.f_sls3,
        }
    }
}

/// Retrieval-facing outputs of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sls: Vec<f64>,
    pub acs: Vec<f64>,
    pub color_probs: Vec<f64>,
    pub model_probs: Vec<f64>,
}

impl Embedding {
    /// `sls ∥ acs`, the linear-search feature.
    pub fn concatenated(&self) -> Vec<f64> {
        [self.sls.as_slice(), self.acs.as_slice()].concat()
    }
}

/// Losses averaged over a batch, evaluated before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub triplet: f64,
    pub color: f64,
    pub model: f64,
    pub total: f64,
    /// Triplets whose hinge was active.
    pub active_triplets: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n_base: usize,
}

impl Layout {
    fn acs(self) -> usize {
        self.n_base
    }
    fn color(self) -> usize {
        self.n_base + 1
    }
    fn model(self) -> usize {
        self.n_base + 2
    }
    fn sls1(self) -> usize {
        self.n_base + 3
    }
    fn rep(self) -> usize {
        self.n_base + 4
    }
    fn sls3(self) -> usize {
        self.n_base + 5
    }
}

/// Per-sample loss gradients entering the network from its three outputs.
struct OutputDeltas<'a> {
    sls3: Option<&'a [f64]>,
    color: Option<&'a [f64]>,
    model: Option<&'a [f64]>,
}

#[derive(Debug)]
pub struct RepNet {
    config: RepNetConfig,
    params: RepNetParams,
    zero_embeddings: AtomicU64,
}

impl Clone for RepNet {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            zero_embeddings: AtomicU64::new(self.zero_embeddings()),
        }
    }
}

impl RepNet {
    /// Validated config with freshly initialized parameters.
    pub fn new(config: RepNetConfig) -> Result<Self> {
        config.validate()?;
        let params = RepNetParams::init(&config);
        Ok(Self {
            config,
            params,
            zero_embeddings: AtomicU64::new(0),
        })
    }

    pub fn from_params(config: RepNetConfig, params: RepNetParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            zero_embeddings: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &RepNetConfig {
        &self.config
    }

    pub fn params(&self) -> &RepNetParams {
        &self.params
    }

    /// Direct parameter access; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut RepNetParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (RepNetConfig, RepNetParams) {
        (self.config, self.params)
    }

    /// Forward passes whose embedding was the zero vector.
    pub fn zero_embeddings(&self) -> u64 {
        self.zero_embeddings.load(Ordering::Relaxed)
    }

    fn layout(&self) -> Layout {
        Layout {
            n_base: self.config.base_dims.len(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.config.input_dim {
            return Err(Error::shape(format!(
                "input dim {} does not match configured input_dim {}",
                input.len(),
                self.config.input_dim
            )));
        }
        let lay = self.layout();
        let p = &self.params.layers;
        let mut base_pre = Vec::with_capacity(lay.n_base);
        let mut base_out: Vec<Vec<f64>> = Vec::with_capacity(lay.n_base);
        for layer in &p[..lay.n_base] {
            let x = base_out.last().map_or(input, Vec::as_slice);
            let pre = fc_forward(x, &layer.weights, &layer.bias)?;
            base_out.push(relu(&pre));
            base_pre.push(pre);
        }
        let f_base = base_out.last().map_or(input, Vec::as_slice);

        let acs_pre = fc_forward(f_base, &p[lay.acs()].weights, &p[lay.acs()].bias)?;
        let f_acs = relu(&acs_pre);
        let f_color = fc_forward(&f_acs, &p[lay.color()].weights, &p[lay.color()].bias)?;
        let f_model = fc_forward(&f_acs, &p[lay.model()].weights, &p[lay.model()].bias)?;

        let sls1_pre = fc_forward(f_base, &p[lay.sls1()].weights, &p[lay.sls1()].bias)?;
        let f_sls1 = relu(&sls1_pre);
        let rep_pre = rep_forward(self.config.rep_kind, &f_sls1, &f_acs, &p[lay.rep()].weights)?;
        let f_sls2 = relu(&rep_pre);
        let sls3_raw = fc_forward(&f_sls2, &p[lay.sls3()].weights, &p[lay.sls3()].bias)?;
        let (f_sls3, sls3_norm) = l2_normalize(&sls3_raw);
        if sls3_norm == 0.0 {
            self.zero_embeddings.fetch_add(1, Ordering::Relaxed);
        }

        Ok(ForwardTrace {
            input: input.to_vec(),
            base_pre,
            base_out,
            acs_pre,
            f_acs,
            f_color,
            f_model,
            sls1_pre,
            f_sls1,
            rep_pre,
            f_sls2,
            sls3_raw,
            sls3_norm,
            f_sls3,
        })
    }

    pub fn embed(&self, input: &[f64]) -> Result<Embedding> {
        let t = self.forward(input)?;
        Ok(Embedding {
            color_probs: softmax(&t.f_color),
            model_probs: softmax(&t.f_model),
            sls: t.f_sls3,
            acs: t.f_acs,
        })
    }

    pub fn embed_all(&self, dataset: &Dataset, exec: Exec) -> Result<Vec<Embedding>> {
        exec.map(&dataset.samples, |s| self.embed(&s.features))
            .into_iter()
            .collect()
    }

    /// Fraction of samples whose argmax color and model predictions are right.
    pub fn attribute_accuracy(&self, dataset: &Dataset, exec: Exec) -> Result<(f64, f64)> {
        let preds: Vec<(bool, bool)> = exec
            .map(&dataset.samples, |s| {
                self.forward(&s.features).map(|t| {
                    (
                        argmax(&t.f_color) == s.color as usize,
                        argmax(&t.f_model) == s.model as usize,
                    )
                })
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let n = preds.len().max(1) as f64;
        let color = preds.iter().filter(|p| p.0).count() as f64 / n;
        let model = preds.iter().filter(|p| p.1).count() as f64 / n;
        Ok((color, model))
    }

    /// Stacks one feature over a dataset, one row per sample.
    pub fn collect_features(&self, dataset: &Dataset, name: FeatureName, exec: Exec) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = exec
            .map(&dataset.samples, |s| {
                self.forward(&s.features).map(|t| t.feature(name).to_vec())
            })
            .into_iter()
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }

    fn backward_into(&self, trace: &ForwardTrace, deltas: &OutputDeltas<'_>, grads: &mut Gradients) {
        let lay = self.layout();
        let p = &self.params.layers;
        let d_acs_dim = self.config.d_acs;
        let mut d_f_acs = vec![0.0; d_acs_dim];
        let mut d_base = vec![0.0; trace.f_base().len()];

        if let Some(d_emb) = deltas.sls3 {
            let d_raw = l2_normalize_backward(&trace.f_sls3, trace.sls3_norm, d_emb);
            let (s3, rep, s1) = (lay.sls3(), lay.rep(), lay.sls1());
            axpy(1.0, &d_raw, &mut grads.biases[s3]);
            let d_sls2 = fc_backward_accumulate(&trace.f_sls2, &p[s3].weights, &d_raw, &mut grads.weights[s3]);
            let d_rep = relu_backward(&trace.rep_pre, &d_sls2);
            let (d_sls1, d_acs_rep) = rep_backward_accumulate(
                self.config.rep_kind,
                &trace.f_sls1,
                &trace.f_acs,
                &p[rep].weights,
                &d_rep,
                &mut grads.weights[rep],
            );
            axpy(1.0, &d_acs_rep, &mut d_f_acs);
            let d_sls1_pre = relu_backward(&trace.sls1_pre, &d_sls1);
            axpy(1.0, &d_sls1_pre, &mut grads.biases[s1]);
            let back = fc_backward_accumulate(trace.f_base(), &p[s1].weights, &d_sls1_pre, &mut grads.weights[s1]);
            axpy(1.0, &back, &mut d_base);
        }
        for (head, d) in [(lay.color(), deltas.color), (lay.model(), deltas.model)] {
            if let Some(d) = d {
                axpy(1.0, d, &mut grads.biases[head]);
                let back = fc_backward_accumulate(&trace.f_acs, &p[head].weights, d, &mut grads.weights[head]);
                axpy(1.0, &back, &mut d_f_acs);
            }
        }
        if deltas.sls3.is_some() || deltas.color.is_some() || deltas.model.is_some() {
            let a = lay.acs();
            let d_acs_pre = relu_backward(&trace.acs_pre, &d_f_acs);
            axpy(1.0, &d_acs_pre, &mut grads.biases[a]);
            let back = fc_backward_accumulate(trace.f_base(), &p[a].weights, &d_acs_pre, &mut grads.weights[a]);
            axpy(1.0, &back, &mut d_base);
        } else {
            return;
        }
        let mut delta = d_base;
        for i in (0..lay.n_base).rev() {
            let d_pre = relu_backward(&trace.base_pre[i], &delta);
            axpy(1.0, &d_pre, &mut grads.biases[i]);
            let x = if i == 0 { &trace.input } else { &trace.base_out[i - 1] };
            delta = fc_backward_accumulate(x, &p[i].weights, &d_pre, &mut grads.weights[i]);
        }
    }

    /// Unweighted losses and weighted gradient sum for one triplet.
    fn triplet_grads(&self, dataset: &Dataset, t: &Triplet) -> Result<(LossReport, Gradients)> {
        let cfg = &self.config;
        let w = cfg.loss_weights;
        let anchor = &dataset.samples[t.anchor];
        let ta = self.forward(&anchor.features)?;
        let tp = self.forward(&dataset.samples[t.positive].features)?;
        let tn = self.forward(&dataset.samples[t.negative].features)?;
        let trip = triplet_loss(&ta.f_sls3, &tp.f_sls3, &tn.f_sls3, cfg.margin)?;
        let (color_loss, d_color) = softmax_cross_entropy(&ta.f_color, anchor.color as usize)?;
        let (model_loss, d_model) = softmax_cross_entropy(&ta.f_model, anchor.model as usize)?;

        let scale = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<f64>>();
        let d_color = scale(&d_color, w.color);
        let d_model = scale(&d_model, w.model);
        let mut grads = Gradients::zeros_like(&self.params);
        let active = trip.is_active() && w.triplet != 0.0;
        let (da, dp, dn) = (
            scale(&trip.d_anchor, w.triplet),
            scale(&trip.d_positive, w.triplet),
            scale(&trip.d_negative, w.triplet),
        );
        self.backward_into(
            &ta,
            &OutputDeltas {
                sls3: active.then_some(da.as_slice()),
                color: Some(&d_color),
                model: Some(&d_model),
            },
            &mut grads,
        );
        if active {
            self.backward_into(
                &tp,
                &OutputDeltas {
                    sls3: Some(&dp),
                    color: None,
                    model: None,
                },
                &mut grads,
            );
            self.backward_into(
                &tn,
                &OutputDeltas {
                    sls3: Some(&dn),
                    color: None,
                    model: None,
                },
                &mut grads,
            );
        }
        let report = LossReport {
            triplet: trip.loss,
            color: color_loss,
            model: model_loss,
            total: w.triplet * trip.loss + w.color * color_loss + w.model * model_loss,
            active_triplets: usize::from(trip.is_active()),
        };
        Ok((report, grads))
    }

    /// Batch-averaged losses and gradients of the total loss. Per-triplet
    /// work may run in parallel; the reduction is sequential in batch order,
    /// so the result does not depend on `exec`.
    pub fn loss_and_grads(
        &self,
        dataset: &Dataset,
        batch: &TripletBatch,
        exec: Exec,
    ) -> Result<(LossReport, Gradients)> {
        if batch.is_empty() {
            return Err(Error::RejectedBatch("empty batch".into()));
        }
        for t in &batch.triplets {
            validate_triplet(dataset, t)?;
        }
        let per = exec.map(&batch.triplets, |t| self.triplet_grads(dataset, t));
        let mut report = LossReport::default();
        let mut grads = Gradients::zeros_like(&self.params);
        for item in per {
            let (r, g) = item?;
            report.triplet += r.triplet;
            report.color += r.color;
            report.model += r.model;
            report.total += r.total;
            report.active_triplets += r.active_triplets;
            grads.add_assign(&g);
        }
        let inv = 1.0 / batch.len() as f64;
        report.triplet *= inv;
        report.color *= inv;
        report.model *= inv;
        report.total *= inv;
        grads.scale(inv);
        Ok((report, grads))
    }

    /// Applies `buf ← momentum·buf + g; w ← w − lr·buf`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        let mu = self.config.momentum;
        let RepNetParams { layers, momentum } = &mut self.params;
        for (k, (layer, buf)) in layers.iter_mut().zip(momentum.iter_mut()).enumerate() {
            for ((w, b), g) in layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(buf.weights.as_mut_slice())
                .zip(grads.weights[k].as_slice())
            {
                *b = mu * *b + g;
                *w -= lr * *b;
            }
            for ((w, b), g) in layer.bias.iter_mut().zip(buf.bias.iter_mut()).zip(&grads.biases[k]) {
                *b = mu * *b + g;
                *w -= lr * *b;
            }
        }
    }

    /// One SGD-momentum step; returns the losses measured before the update.
    pub fn train_step(
        &mut self,
        dataset: &Dataset,
        batch: &TripletBatch,
        iteration: u64,
        exec: Exec,
    ) -> Result<LossReport> {
        let (report, grads) = self.loss_and_grads(dataset, batch, exec)?;
        if !report.total.is_finite() || !grads.norm().is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at iteration {iteration}"
            )));
        }
        let lr = lr_at(iteration, &self.config);
        self.apply_gradients(&grads, lr);
        Ok(report)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
