//! Feed-forward classifier with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParamVector`]. Each layer stores its weight
//! matrix row-major with shape `(fan_out, fan_in)` followed by its bias.
//! Hidden layers use a rectifier whose derivative at zero is taken as zero;
//! the output layer is linear and produces logits.
//!
//! Second-order quantities are taken by central differences of exact
//! gradients: [`hvp`] along a normalised direction, [`exact_hessian`] one
//! coordinate at a time. Both work on any [`Differentiable`] objective.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, Dataset};
use crate::losses::{batch_loss_grad, LossBreakdown, LossSpec, Supervision};
use crate::numcore::{check_finite, softmax_into, LogitVector, SeededRng};
use crate::{Error, Result};

/// Finite-difference step for Hessian-vector products, applied along a
/// direction scaled to unit infinity norm.
pub const HVP_STEP: f64 = 1e-4;

/// Default ceiling on the parameter count for dense Hessians.
pub const DEFAULT_MAX_HESSIAN_PARAMS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input dimension, hidden widths, class count.
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_init_scale() -> f64 {
    std::f64::consts::SQRT_2
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_dims,
            activation: Activation::Relu,
            init_scale: default_init_scale(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::invalid("a model needs at least an input and an output dimension"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid(format!("zero layer dimension in {:?}", self.layer_dims)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid(format!("init_scale must be non-negative, got {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Maps each layer to its slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerSlot>,
    pub len: usize,
}

impl Layout {
    pub fn for_dims(dims: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(LayerSlot {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        Self { layers, len: offset }
    }
}

/// Flat parameter (or gradient) vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// One input together with its supervision.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub sup: Supervision<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    spec: ModelSpec,
    layout: Layout,
    params: ParamVector,
}

/// Per-layer activations kept for the backward pass.
struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn for_layout(layout: &Layout) -> Self {
        let mut acts = vec![vec![0.0; layout.layers[0].fan_in]];
        acts.extend(layout.layers.iter().map(|l| vec![0.0; l.fan_out]));
        Self { acts }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().expect("non-empty trace")
    }
}

impl MlpModel {
    /// Weights ~ `N(0, 1) * init_scale / sqrt(fan_in)`, biases zero.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::for_dims(&spec.layer_dims);
        let mut params = ParamVector::zeros(layout.len);
        let mut rng = SeededRng::new(spec.seed);
        for slot in &layout.layers {
            let scale = spec.init_scale / (slot.fan_in as f64).sqrt();
            for w in &mut params[slot.weight_offset..slot.bias_offset] {
                *w = scale * rng.standard_normal();
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(spec: &ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::for_dims(&spec.layer_dims);
        if params.len() != layout.len {
            return Err(Error::invalid(format!(
                "expected {} parameters for {:?}, got {}",
                layout.len,
                spec.layer_dims,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            params: ParamVector(params),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn flatten(&self) -> ParamVector {
        self.params.clone()
    }

    /// Replaces every parameter; the layout must match.
    pub fn unflatten(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.layout.len {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.layout.len,
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count()
    }

    /// Weight matrix `(fan_out, fan_in)` row-major and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = &self.layout.layers[l];
        (
            &self.params[s.weight_offset..s.bias_offset],
            &self.params[s.bias_offset..s.bias_offset + s.fan_out],
        )
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut trace = Trace::for_layout(&self.layout);
        self.forward_trace(&self.params, x, &mut trace);
        LogitVector::new(trace.logits().to_vec())
            .map_err(|_| Error::Numerical("forward pass produced non-finite logits".into()))
    }

    /// Logits for every row of `data`, without finiteness checks.
    pub fn logits_for(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.check_input(data.dim())?;
        let mut trace = Trace::for_layout(&self.layout);
        Ok((0..data.len())
            .map(|i| {
                self.forward_trace(&self.params, data.row(i), &mut trace);
                trace.logits().to_vec()
            })
            .collect())
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::invalid(format!("data has {dim} features, model expects {}", self.input_dim())));
        }
        Ok(())
    }

    fn forward_trace(&self, params: &[f64], x: &[f64], trace: &mut Trace) {
        trace.acts[0].copy_from_slice(x);
        let last = self.layout.layers.len() - 1;
        for (l, s) in self.layout.layers.iter().enumerate() {
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let w = &params[s.weight_offset..s.bias_offset];
            let b = &params[s.bias_offset..s.bias_offset + s.fan_out];
            for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(s.fan_in).zip(b)) {
                let pre = bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *o = if l < last { pre.max(0.0) } else { pre };
            }
        }
    }

    /// Adds `d(loss)/d(params)` into `grad`, given `dlogits` for the traced input.
    fn backward(&self, params: &[f64], trace: &Trace, dlogits: &[f64], grad: &mut [f64]) {
        let mut delta = dlogits.to_vec();
        for (l, s) in self.layout.layers.iter().enumerate().rev() {
            let input = &trace.acts[l];
            {
                let gw = &mut grad[s.weight_offset..s.bias_offset];
                for (grow, d) in gw.chunks_exact_mut(s.fan_in).zip(&delta) {
                    for (g, a) in grow.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            for (g, d) in grad[s.bias_offset..s.bias_offset + s.fan_out].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let w = &params[s.weight_offset..s.bias_offset];
                let mut prev = vec![0.0; s.fan_in];
                for (row, d) in w.chunks_exact(s.fan_in).zip(&delta) {
                    for (p, wv) in prev.iter_mut().zip(row) {
                        *p += d * wv;
                    }
                }
                // Rectifier derivative: 1 where the unit was active, 0 otherwise (including at 0).
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Mean loss over `batch` and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[Example<'_>], loss: &LossSpec) -> Result<(f64, ParamVector)> {
        let (value, _, grad) = self.loss_and_grad_detailed(batch, loss)?;
        Ok((value, grad))
    }

    /// As [`MlpModel::loss_and_grad`], also returning the per-term group means.
    pub fn loss_and_grad_detailed(
        &self,
        batch: &[Example<'_>],
        loss: &LossSpec,
    ) -> Result<(f64, LossBreakdown, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut traces = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_input(ex.x.len())?;
            let mut t = Trace::for_layout(&self.layout);
            self.forward_trace(&self.params, ex.x, &mut t);
            traces.push(t);
        }
        let logits: Vec<Vec<f64>> = traces.iter().map(|t| t.logits().to_vec()).collect();
        for z in &logits {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("forward pass produced non-finite logits".into()));
            }
        }
        let sups: Vec<Supervision> = batch.iter().map(|e| e.sup).collect();
        let out = batch_loss_grad(loss, &logits, &sups)?;
        let mut grad = ParamVector::zeros(self.layout.len);
        for (t, dz) in traces.iter().zip(&out.dlogits) {
            self.backward(&self.params, t, dz, &mut grad);
        }
        Ok((out.loss, out.breakdown, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: Checkpoint::FORMAT_VERSION,
            layer_dims: self.spec.layer_dims.clone(),
            activation: self.spec.activation.name().to_string(),
            flat_params: self.params.0.clone(),
            config_hash: None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.activation != Activation::Relu.name() {
            return Err(Error::Format(format!("unsupported MLP activation '{}'", ckpt.activation)));
        }
        let spec = ModelSpec::new(ckpt.layer_dims.clone(), 0);
        Self::from_params(&spec, ckpt.flat_params.clone())
    }
}

/// A scalar training objective with exact per-sample gradients.
///
/// The data-mean of this loss is what [`hvp`], [`exact_hessian`] and the
/// influence module differentiate twice.
pub trait Differentiable {
    fn params(&self) -> &[f64];

    fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Checks that `data` fits this model's inputs and outputs.
    fn check_data(&self, data: &Dataset) -> Result<()>;

    /// Loss of one sample at `params`; adds its gradient into `grad`.
    fn sample_loss_grad(&self, params: &[f64], x: &[f64], label: usize, grad: &mut [f64]) -> f64;

    /// Mean loss over all of `data` at `params` and its gradient.
    fn mean_loss_grad(&self, params: &[f64], data: &Dataset) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for i in 0..data.len() {
            loss += self.sample_loss_grad(params, data.row(i), data.label(i), &mut grad);
        }
        let n = data.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

/// The MLP's own training objective: cross-entropy on the hard label.
impl Differentiable for MlpModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        self.check_input(data.dim())?;
        if data.class_count() > self.class_count() {
            return Err(Error::invalid(format!(
                "data has {} classes, model outputs {}",
                data.class_count(),
                self.class_count()
            )));
        }
        Ok(())
    }

    fn sample_loss_grad(&self, params: &[f64], x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let mut trace = Trace::for_layout(&self.layout);
        self.forward_trace(params, x, &mut trace);
        self.ce_backward(params, &trace, label, grad)
    }

    fn mean_loss_grad(&self, params: &[f64], data: &Dataset) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let mut trace = Trace::for_layout(&self.layout);
        let mut loss = 0.0;
        for i in 0..data.len() {
            self.forward_trace(params, data.row(i), &mut trace);
            loss += self.ce_backward(params, &trace, data.label(i), &mut grad);
        }
        let n = data.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl MlpModel {
    fn ce_backward(&self, params: &[f64], trace: &Trace, label: usize, grad: &mut [f64]) -> f64 {
        let z = trace.logits();
        let mut p = vec![0.0; z.len()];
        softmax_into(z, 1.0, &mut p);
        let loss = -p[label].max(crate::losses::CE_CLAMP).ln();
        if p[label] > crate::losses::CE_CLAMP {
            p[label] -= 1.0;
            self.backward(params, trace, &p, grad);
        }
        loss
    }
}

/// One-parameter objective `0.5 * (theta - x0)^2`, where `x0` is the first
/// feature. Its optimum over a dataset is the feature mean and its Hessian is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimator {
    theta: [f64; 1],
}

impl MeanEstimator {
    pub fn new(theta: f64) -> Self {
        Self { theta: [theta] }
    }

    /// The exact minimiser over `data`.
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len() as f64;
        Self::new((0..data.len()).map(|i| data.row(i)[0]).sum::<f64>() / n)
    }

    pub fn theta(&self) -> f64 {
        self.theta[0]
    }
}

impl Differentiable for MeanEstimator {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn check_data(&self, _data: &Dataset) -> Result<()> {
        Ok(())
    }

    fn sample_loss_grad(&self, params: &[f64], x: &[f64], _label: usize, grad: &mut [f64]) -> f64 {
        let r = params[0] - x[0];
        grad[0] += r;
        0.5 * r * r
    }
}

/// Gradient of the data-mean loss at the model's own parameters.
pub fn mean_gradient<M: Differentiable + ?Sized>(model: &M, data: &Dataset) -> Result<ParamVector> {
    model.check_data(data)?;
    Ok(ParamVector(model.mean_loss_grad(model.params(), data).1))
}

/// `H v`, with `H` the Hessian of the data-mean loss.
///
/// Computed as `|v|_inf * (g(theta + h u) - g(theta - h u)) / 2h` with
/// `u = v / |v|_inf` and `h = HVP_STEP`.
pub fn hvp<M: Differentiable + ?Sized>(model: &M, data: &Dataset, v: &[f64]) -> Result<ParamVector> {
    model.check_data(data)?;
    let n = model.param_count();
    if v.len() != n {
        return Err(Error::invalid(format!("vector has length {}, model has {n} parameters", v.len())));
    }
    check_vector(v)?;
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(ParamVector::zeros(n));
    }
    Ok(ParamVector(directional_difference(model, data, |i| v[i] / scale, scale)))
}

fn check_vector(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("vector has non-finite entries"));
    }
    Ok(())
}

fn directional_difference<M: Differentiable + ?Sized>(
    model: &M,
    data: &Dataset,
    dir: impl Fn(usize) -> f64,
    scale: f64,
) -> Vec<f64> {
    let theta = model.params();
    let plus: Vec<f64> = theta.iter().enumerate().map(|(i, t)| t + HVP_STEP * dir(i)).collect();
    let minus: Vec<f64> = theta.iter().enumerate().map(|(i, t)| t - HVP_STEP * dir(i)).collect();
    let (_, gp) = model.mean_loss_grad(&plus, data);
    let (_, gm) = model.mean_loss_grad(&minus, data);
    gp.iter().zip(&gm).map(|(a, b)| scale * (a - b) / (2.0 * HVP_STEP)).collect()
}

/// Dense Hessian of the data-mean loss.
#[derive(Debug, Clone)]
pub struct Hessian {
    /// Symmetrised `(A + A^T) / 2`.
    pub matrix: DMatrix<f64>,
    /// `max |A - A^T|` of the raw finite-difference matrix.
    pub asymmetry: f64,
}

/// Column `j` is the central difference of the gradient along coordinate `j`.
pub fn exact_hessian<M: Differentiable + ?Sized>(model: &M, data: &Dataset, max_params: usize) -> Result<Hessian> {
    model.check_data(data)?;
    let n = model.param_count();
    if n > max_params {
        return Err(Error::Capacity { params: n, limit: max_params });
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let col = directional_difference(model, data, |i| if i == j { 1.0 } else { 0.0 }, 1.0);
        a.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    let at = a.transpose();
    let asymmetry = (&a - &at).amax();
    let matrix = (a + at) * 0.5;
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Hessian has non-finite entries".into()));
    }
    Ok(Hessian { matrix, asymmetry })
}

/// Hex SHA-256 over the little-endian IEEE-754 bits of every parameter.
pub fn params_checksum(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_bits().to_le_bytes());
    }
    hex(&h.finalize())
}

/// On-disk model: JSON with a versioned schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub flat_params: Vec<f64>,
    /// Hash of the experiment configuration that produced this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.format_version != Self::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format_version {} is not supported (expected {})",
                ckpt.format_version,
                Self::FORMAT_VERSION
            )));
        }
        check_finite(&ckpt.flat_params).map_err(|_| Error::Format("checkpoint has non-finite parameters".into()))?;
        Ok(ckpt)
    }

    pub fn checksum(&self) -> String {
        params_checksum(&self.flat_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, RightPartLoss};
    use crate::numcore::ProbVector;
    use proptest::prelude::*;

    fn random_data(rng: &mut SeededRng, n: usize, d: usize, c: usize) -> Dataset {
        let features = (0..n * d).map(|_| rng.standard_normal()).collect();
        let labels = (0..n).map(|_| rng.below(c)).collect();
        Dataset::new("rand", features, d, labels, c).unwrap()
    }

    /// Straight-line re-implementation of the forward pass.
    fn reference_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let layers = model.layout().layers.len();
        for l in 0..layers {
            let (w, b) = model.layer(l);
            let (fi, fo) = (model.layout().layers[l].fan_in, model.layout().layers[l].fan_out);
            let mut next = vec![0.0; fo];
            for r in 0..fo {
                let mut s = b[r];
                for c in 0..fi {
                    s += w[r * fi + c] * a[c];
                }
                next[r] = if l + 1 < layers { if s > 0.0 { s } else { 0.0 } } else { s };
            }
            a = next;
        }
        a
    }

    /// Smallest |pre-activation| of the first hidden layer over `data`.
    fn kink_margin(model: &MlpModel, data: &Dataset) -> f64 {
        let (w, b) = model.layer(0);
        let fi = model.layout().layers[0].fan_in;
        (0..data.len())
            .flat_map(|i| {
                let x = data.row(i);
                (0..b.len()).map(move |r| (b[r] + (0..fi).map(|c| w[r * fi + c] * x[c]).sum::<f64>()).abs())
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = ModelSpec::new(vec![2, 3], 9);
        let a = MlpModel::init(&spec).unwrap();
        let b = MlpModel::init(&spec).unwrap();
        assert_eq!(a, b);
        let (w, bias) = a.layer(0);
        assert_eq!((w.len(), bias.len()), (6, 3));
        assert!(bias.iter().all(|&v| v == 0.0));
        assert!(MlpModel::init(&ModelSpec::new(vec![2, 0, 3], 0)).is_err());
        assert!(MlpModel::init(&ModelSpec::new(vec![2], 0)).is_err());
    }

    #[test]
    fn zero_scale_gives_constant_logits() {
        let spec = ModelSpec {
            init_scale: 0.0,
            ..ModelSpec::new(vec![3, 5, 4], 1)
        };
        let m = MlpModel::init(&spec).unwrap();
        assert!(m.params().iter().all(|&p| p == 0.0));
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap().as_slice(), &[0.0; 4]);
        assert_eq!(m.forward(&[9.0, 0.5, -1.0]).unwrap().as_slice(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer() {
        let m = MlpModel::from_params(&ModelSpec::new(vec![2, 2], 0), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.forward(&[3.0, 4.0]).unwrap().as_slice(), &[3.0, 4.0]);
        assert!(m.forward(&[3.0]).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = SeededRng::new(3);
        for seed in 0..10 {
            let m = MlpModel::init(&ModelSpec::new(vec![4, 7, 3], seed)).unwrap();
            for _ in 0..10 {
                let x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
                let got = m.forward(&x).unwrap();
                let want = reference_forward(&m, &x);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(got.as_slice(), m.forward(&x).unwrap().as_slice());
            }
        }
    }

    #[test]
    fn flatten_round_trip_and_checkpoint() {
        let mut m = MlpModel::init(&ModelSpec::new(vec![3, 4, 2], 5)).unwrap();
        let flat = m.flatten();
        m.unflatten(flat.clone()).unwrap();
        assert_eq!(m.flatten(), flat);
        assert!(m.unflatten(ParamVector::zeros(3)).is_err());

        let json = m.to_checkpoint().to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        let restored = MlpModel::from_checkpoint(&back).unwrap();
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(restored.params()), bits(m.params()));
        assert_eq!(back.checksum(), m.to_checkpoint().checksum());
        assert!(Checkpoint::from_json(&json.replace("\"format_version\": 1", "\"format_version\": 7")).is_err());
    }

    fn fd_gradient(model: &MlpModel, batch: &[Example<'_>], spec: &LossSpec, h: f64) -> Vec<f64> {
        let base = model.flatten();
        let mut probe = model.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                probe.unflatten(p.clone()).unwrap();
                let up = probe.loss_and_grad(batch, spec).unwrap().0;
                p[i] -= 2.0 * h;
                probe.unflatten(p).unwrap();
                let down = probe.loss_and_grad(batch, spec).unwrap().0;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_loss() {
        let mut rng = SeededRng::new(21);
        let model = MlpModel::init(&ModelSpec::new(vec![2, 4, 3], 2)).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.standard_normal(), rng.standard_normal()]).collect();
        let zt: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
        let p = ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        for kind in [
            LossKind::Ce,
            LossKind::KlDistill,
            LossKind::MseLogits,
            LossKind::MseProbs,
            LossKind::VanillaKd,
            LossKind::Lrds,
        ] {
            let spec = LossSpec {
                kind,
                right_part_loss: RightPartLoss::KlDistill,
                ..LossSpec::default()
            };
            let batch: Vec<Example> = (0..8)
                .map(|i| Example {
                    x: &xs[i],
                    sup: match kind {
                        LossKind::MseProbs => Supervision::revised(1, &p),
                        LossKind::Lrds if i % 3 == 0 => Supervision::revised(1, &p),
                        _ => Supervision::teacher(i % 3, &zt[i]),
                    },
                })
                .collect();
            let (_, g) = model.loss_and_grad(&batch, &spec).unwrap();
            let fd = fd_gradient(&model, &batch, &spec, 1e-5);
            assert!(max_rel_err(&g, &fd) < 1e-4, "{kind:?}: {}", max_rel_err(&g, &fd));
        }
    }

    #[test]
    fn gradient_vanishes_at_stationary_point() {
        // Single class with a single parameter-free optimum: a [1,1] model on
        // one-class data has zero CE loss and gradient everywhere.
        let m = MlpModel::init(&ModelSpec::new(vec![1, 1], 0)).unwrap();
        let x = [0.7];
        let batch = [Example { x: &x, sup: Supervision::label(0) }];
        let (loss, g) = m.loss_and_grad(&batch, &LossSpec::of_kind(LossKind::Ce)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        let est = MeanEstimator::new(2.0);
        let data = Dataset::new("m", vec![1.0, 2.0, 3.0], 1, vec![0; 3], 1).unwrap();
        assert_eq!(mean_gradient(&est, &data).unwrap().0, vec![0.0]);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let m = MlpModel::init(&ModelSpec::new(vec![2, 3, 2], 4)).unwrap();
        let x = [0.3, -0.8];
        let one = [Example { x: &x, sup: Supervision::label(1) }];
        let many = [one[0]; 6];
        let spec = LossSpec::of_kind(LossKind::Ce);
        let (a, ga) = m.loss_and_grad(&one, &spec).unwrap();
        let (b, gb) = m.loss_and_grad(&many, &spec).unwrap();
        assert!((a - b).abs() < 1e-15);
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(m.loss_and_grad(&[], &spec).is_err());
    }

    #[test]
    fn differentiable_matches_ce_loss_and_grad() {
        let mut rng = SeededRng::new(8);
        let data = random_data(&mut rng, 7, 3, 4);
        let m = MlpModel::init(&ModelSpec::new(vec![3, 5, 4], 3)).unwrap();
        let batch: Vec<Example> = (0..data.len())
            .map(|i| Example { x: data.row(i), sup: Supervision::label(data.label(i)) })
            .collect();
        let (l1, g1) = m.loss_and_grad(&batch, &LossSpec::of_kind(LossKind::Ce)).unwrap();
        let (l2, g2) = m.mean_loss_grad(m.params(), &data);
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_estimator_hessian_is_one() {
        let mut rng = SeededRng::new(1);
        let data = random_data(&mut rng, 9, 1, 1);
        let h = exact_hessian(&MeanEstimator::new(0.3), &data, 10).unwrap();
        assert!((h.matrix[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hessian_respects_capacity() {
        let mut rng = SeededRng::new(1);
        let data = random_data(&mut rng, 4, 2, 3);
        let m = MlpModel::init(&ModelSpec::new(vec![2, 5, 3], 0)).unwrap();
        assert!(matches!(exact_hessian(&m, &data, 10), Err(Error::Capacity { params: 33, limit: 10 })));
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let mut rng = SeededRng::new(12);
        let data = random_data(&mut rng, 30, 3, 3);
        let m = MlpModel::init(&ModelSpec::new(vec![3, 6, 3], 7)).unwrap();
        let h = exact_hessian(&m, &data, DEFAULT_MAX_HESSIAN_PARAMS).unwrap();
        assert!(h.asymmetry < 1e-6, "asymmetry {}", h.asymmetry);
        for _ in 0..5 {
            let v: Vec<f64> = (0..m.param_count()).map(|_| rng.standard_normal()).collect();
            let hv = hvp(&m, &data, &v).unwrap();
            let dense = &h.matrix * nalgebra::DVector::from_column_slice(&v);
            let diff = hv.iter().zip(dense.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-5, "diff {diff}");
        }
        assert_eq!(hvp(&m, &data, &vec![0.0; m.param_count()]).unwrap().0, vec![0.0; m.param_count()]);
        assert!(hvp(&m, &data, &[1.0]).is_err());
    }

    #[test]
    fn logistic_hessian_is_psd() {
        let mut rng = SeededRng::new(4);
        let data = random_data(&mut rng, 40, 3, 4);
        let m = MlpModel::init(&ModelSpec::new(vec![3, 4], 2)).unwrap();
        let h = exact_hessian(&m, &data, DEFAULT_MAX_HESSIAN_PARAMS).unwrap();
        let eig = h.matrix.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8), "{}", eig.eigenvalues.min());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn hvp_is_linear_and_symmetric(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let data = random_data(&mut rng, 12, 2, 3);
            let m = MlpModel::init(&ModelSpec::new(vec![2, 4, 3], seed)).unwrap();
            // Finite differences are only linear when no step crosses a ReLU kink.
            prop_assume!(kink_margin(&m, &data) > 1e-2);
            let n = m.param_count();
            let u: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
            let hu = hvp(&m, &data, &u).unwrap();
            let hv = hvp(&m, &data, &v).unwrap();
            let hs = hvp(&m, &data, &sum).unwrap();
            for i in 0..n {
                prop_assert!((hs[i] - hu[i] - hv[i]).abs() < 1e-6);
            }
            prop_assert!((hv.dot(&u) - hu.dot(&v)).abs() < 1e-6);
        }

        #[test]
        fn analytic_gradient_matches_finite_differences(seed in 0u64..10_000) {
            let mut rng = SeededRng::new(seed);
            let data = random_data(&mut rng, 6, 3, 3);
            let m = MlpModel::init(&ModelSpec::new(vec![3, 4, 3], seed)).unwrap();
            let batch: Vec<Example> = (0..data.len())
                .map(|i| Example { x: data.row(i), sup: Supervision::label(data.label(i)) })
                .collect();
            let spec = LossSpec::of_kind(LossKind::Ce);
            let (_, g) = m.loss_and_grad(&batch, &spec).unwrap();
            let fd = fd_gradient(&m, &batch, &spec, 1e-5);
            prop_assert!(max_rel_err(&g, &fd) < 1e-4);
        }
    }
}
