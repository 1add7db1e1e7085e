//! The full network: shared structure layer, stacked representation layers,
//! mean pooling over the concatenated layer outputs, and a linear multi-label
//! classifier trained with per-class sigmoid cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TdnError};
use crate::linalg::{sigmoid, Activation, Matrix};
use crate::representation::{repr_layer_backward, repr_layer_forward, ReprCache, ReprLayerParams, EPS_LN};
use crate::structure::{head_width, structure_backward, structure_forward, StructureParams, StructureTrace, EPS_DEG};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdnConfig {
    /// Frame feature dimension.
    pub m: usize,
    /// Number of dependency structures.
    pub heads: usize,
    /// Stacked representation layers.
    pub layers: usize,
    /// Label vocabulary size.
    pub labels: usize,
    pub eps_deg: f64,
    pub eps_ln: f64,
    pub activation: Activation,
}

impl Default for TdnConfig {
    /// 1024 visual + 128 audio features, four structures, three layers and
    /// the 3862-entry video vocabulary.
    fn default() -> Self {
        TdnConfig {
            m: 1152,
            heads: 4,
            layers: 3,
            labels: 3862,
            eps_deg: EPS_DEG,
            eps_ln: EPS_LN,
            activation: Activation::Relu,
        }
    }
}

impl TdnConfig {
    pub fn new(m: usize, heads: usize, layers: usize, labels: usize) -> Self {
        TdnConfig {
            m,
            heads,
            layers,
            labels,
            ..TdnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        head_width(self.m, self.heads)?;
        if self.layers == 0 {
            return Err(TdnError::validation("at least one representation layer is required"));
        }
        if self.labels == 0 {
            return Err(TdnError::validation("label vocabulary must be non-empty"));
        }
        if !(self.eps_deg > 0.0 && self.eps_ln > 0.0) {
            return Err(TdnError::validation(format!(
                "eps_deg ({}) and eps_ln ({}) must be positive",
                self.eps_deg, self.eps_ln
            )));
        }
        Ok(())
    }
}

/// Every learnable tensor. Gradients and optimizer moments reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct TdnParams {
    pub structure: StructureParams,
    pub layers: Vec<ReprLayerParams>,
    /// `(L·m) × C`.
    pub wc: Matrix,
    /// `1 × C`.
    pub bc: Matrix,
}

impl TdnParams {
    /// All zeros, layer-norm gains included.
    pub fn zeros(config: &TdnConfig) -> Result<Self> {
        config.validate()?;
        let (m, k) = (config.m, config.heads);
        Ok(TdnParams {
            structure: StructureParams::zeros(m, k)?,
            layers: (0..config.layers)
                .map(|_| ReprLayerParams::zeros(m, k))
                .collect::<Result<_>>()?,
            wc: Matrix::zeros(config.layers * m, config.labels),
            bc: Matrix::zeros(1, config.labels),
        })
    }

    /// Glorot-uniform projections, unit layer-norm gains, zero biases and a
    /// zero classifier, so an untrained model predicts 0.5 for every label.
    pub fn init(config: &TdnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (m, k) = (config.m, config.heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let structure = StructureParams::init(m, k, &mut rng)?;
        let layers = (0..config.layers)
            .map(|_| ReprLayerParams::init(m, k, &mut rng))
            .collect::<Result<_>>()?;
        Ok(TdnParams {
            structure,
            layers,
            wc: Matrix::zeros(config.layers * m, config.labels),
            bc: Matrix::zeros(1, config.labels),
        })
    }

    /// Tensors in the canonical traversal order, with their paths.
    ///
    /// Order: structure heads (`wf`, `bf`), then per layer the heads
    /// (`wz`, `wh`, `bh`) followed by `ln1_gain`, `ln1_bias`, `ln2_gain`,
    /// `ln2_bias`, then `classifier.wc`, `classifier.bc`. Checkpoints and the
    /// optimizer follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (k, h) in self.structure.heads.iter().enumerate() {
            out.push((format!("structure.head{k}.wf"), &h.wf));
            out.push((format!("structure.head{k}.bf"), &h.bf));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, h) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{k}.wz"), &h.wz));
                out.push((format!("layer{l}.head{k}.wh"), &h.wh));
                out.push((format!("layer{l}.head{k}.bh"), &h.bh));
            }
            out.push((format!("layer{l}.ln1_gain"), &layer.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &layer.ln1_bias));
            out.push((format!("layer{l}.ln2_gain"), &layer.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &layer.ln2_bias));
        }
        out.push(("classifier.wc".to_string(), &self.wc));
        out.push(("classifier.bc".to_string(), &self.bc));
        out
    }

    /// Mutable tensors, same order as [`TdnParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for h in &mut self.structure.heads {
            out.push(&mut h.wf);
            out.push(&mut h.bf);
        }
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.push(&mut h.wz);
                out.push(&mut h.wh);
                out.push(&mut h.bh);
            }
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
        }
        out.push(&mut self.wc);
        out.push(&mut self.bc);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &TdnParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn add_assign(&mut self, other: &TdnParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(TdnError::contract("parameter trees differ in shape"));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_assign(src)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().fold(0.0, |acc, t| acc.max(t.max_abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdnModel {
    pub config: TdnConfig,
    pub params: TdnParams,
}

/// Gradient of the loss with respect to every parameter.
pub type TdnGradients = TdnParams;

impl TdnModel {
    pub fn new(config: TdnConfig, seed: u64) -> Result<Self> {
        Ok(TdnModel {
            params: TdnParams::init(&config, seed)?,
            config,
        })
    }

    pub fn zeros(config: TdnConfig) -> Result<Self> {
        Ok(TdnModel {
            params: TdnParams::zeros(&config)?,
            config,
        })
    }

    /// Checks every tensor against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !self.params.same_shape(&TdnParams::zeros(&self.config)?) {
            return Err(TdnError::contract("parameter shapes do not match the configuration"));
        }
        if let Some((name, _)) = self.params.named_tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(TdnError::contract(format!("parameter {name} is not finite")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub structure: StructureTrace,
    /// `H⁽¹⁾ … H⁽ᴸ⁾`, each `N × m`.
    pub layer_outputs: Vec<Matrix>,
    pub pooled: Matrix,
    pub logits: Matrix,
    layer_caches: Vec<ReprCache>,
}

impl ForwardTrace {
    /// Normalized adjacency matrices `S_k`.
    pub fn normalized(&self) -> &[Matrix] {
        &self.structure.adjacency.normalized
    }
}

pub fn forward(model: &TdnModel, x: &Matrix) -> Result<ForwardTrace> {
    let cfg = &model.config;
    if x.rows() == 0 {
        return Err(TdnError::EmptyInput("video with zero frames"));
    }
    if x.cols() != cfg.m {
        return Err(TdnError::shape("forward", x.shape(), (x.rows(), cfg.m)));
    }
    let structure = structure_forward(x, &model.params.structure, cfg.eps_deg)?;
    let s = &structure.adjacency.normalized;

    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    let mut layer_caches = Vec::with_capacity(cfg.layers);
    let mut h = x.clone();
    for layer in &model.params.layers {
        let (next, cache) = repr_layer_forward(&h, s, layer, cfg.activation, cfg.eps_ln)?;
        layer_outputs.push(next.clone());
        layer_caches.push(cache);
        h = next;
    }
    let pooled = Matrix::horizontal_concat(&layer_outputs)?.mean_over_rows()?;
    let logits = pooled.matmul(&model.params.wc)?.add(&model.params.bc)?;
    Ok(ForwardTrace {
        structure,
        layer_outputs,
        pooled,
        logits,
        layer_caches,
    })
}

fn targets(labels: &[u32], classes: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; classes];
    for &l in labels {
        let slot = y.get_mut(l as usize).ok_or_else(|| {
            TdnError::validation(format!("label id {l} outside vocabulary of {classes}"))
        })?;
        *slot = 1.0;
    }
    Ok(y)
}

/// Mean per-class binary cross-entropy on raw logits.
pub fn loss(logits: &Matrix, labels: &[u32]) -> Result<f64> {
    let classes = logits.len();
    if classes == 0 {
        return Err(TdnError::EmptyInput("logits"));
    }
    let y = targets(labels, classes)?;
    let total: f64 = logits
        .as_slice()
        .iter()
        .zip(&y)
        .map(|(&s, &t)| s.max(0.0) - s * t + (-s.abs()).exp().ln_1p())
        .sum();
    Ok(total / classes as f64)
}

/// `∂loss/∂logits = (σ(s) − y) / C`.
pub fn loss_grad(logits: &Matrix, labels: &[u32]) -> Result<Matrix> {
    let classes = logits.len();
    let y = targets(labels, classes)?;
    let data = logits
        .as_slice()
        .iter()
        .zip(&y)
        .map(|(&s, &t)| (sigmoid(s) - t) / classes as f64)
        .collect();
    Matrix::from_vec(logits.rows(), logits.cols(), data)
}

pub fn backward(model: &TdnModel, trace: &ForwardTrace, labels: &[u32]) -> Result<TdnGradients> {
    let cfg = &model.config;
    let p = &model.params;
    if trace.layer_outputs.len() != cfg.layers
        || trace.layer_caches.len() != cfg.layers
        || trace.logits.shape() != (1, cfg.labels)
    {
        return Err(TdnError::contract("forward trace does not match this model"));
    }
    let grad_logits = loss_grad(&trace.logits, labels)?;

    let wc = trace.pooled.transposed_matmul(&grad_logits)?;
    let bc = grad_logits.clone();
    let grad_pooled = grad_logits.matmul_transposed(&p.wc)?;

    // Mean pooling spreads the pooled gradient evenly over frames.
    let n = trace.layer_outputs[0].rows();
    let per_frame = grad_pooled.scale(1.0 / n as f64);
    let per_layer = per_frame.split_columns(cfg.layers)?;

    let s = &trace.structure.adjacency.normalized;
    let mut grad_s: Vec<Matrix> = (0..cfg.heads).map(|_| Matrix::zeros(n, n)).collect();
    let mut layer_grads: Vec<Option<ReprLayerParams>> = vec![None; cfg.layers];
    let mut carried = Matrix::zeros(n, cfg.m);
    for l in (0..cfg.layers).rev() {
        let mut grad_h = carried;
        for i in 0..n {
            for (g, &v) in grad_h.row_mut(i).iter_mut().zip(per_layer[l].as_slice()) {
                *g += v;
            }
        }
        let (grad_in, gs, gp) =
            repr_layer_backward(&grad_h, &trace.layer_caches[l], s, &p.layers[l], cfg.activation)?;
        for (acc, g) in grad_s.iter_mut().zip(&gs) {
            acc.add_assign(g)?;
        }
        layer_grads[l] = Some(gp);
        carried = grad_in;
    }

    let (_, structure) = structure_backward(&grad_s, &trace.structure, &p.structure)?;
    Ok(TdnParams {
        structure,
        layers: layer_grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        wc,
        bc,
    })
}

/// Forward, loss and gradient for one sample.
pub fn loss_and_gradients(model: &TdnModel, x: &Matrix, labels: &[u32]) -> Result<(f64, TdnGradients)> {
    let trace = forward(model, x)?;
    let value = loss(&trace.logits, labels)?;
    let grads = backward(model, &trace, labels)?;
    Ok((value, grads))
}

/// The `k` most confident labels as `(id, σ(logit))`, ties broken by lower id.
pub fn predict_topk(logits: &Matrix, k: usize) -> Result<Vec<(u32, f64)>> {
    let classes = logits.len();
    if k == 0 || k > classes {
        return Err(TdnError::validation(format!("top-k of {k} outside 1..={classes}")));
    }
    let mut order: Vec<usize> = (0..classes).collect();
    let s = logits.as_slice();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| (i as u32, sigmoid(s[i])))
        .collect())
}

/// Number of learnable scalars; does not depend on the head count.
pub fn param_count(config: &TdnConfig) -> Result<usize> {
    config.validate()?;
    let (m, l, c) = (config.m, config.layers, config.labels);
    let structure = m * m + m;
    let layer = m * m + m * m + m + 4 * m;
    Ok(structure + l * layer + l * m * c + c)
}
