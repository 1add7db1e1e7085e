//! Optimization loop, finite-difference gradient checking and retrieval
//! metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Result, TdnError};
use crate::linalg::Matrix;
use crate::model::{forward, loss, loss_and_gradients, predict_topk, TdnConfig, TdnGradients, TdnModel, TdnParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            seed: 7,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TdnError::validation(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TdnError::validation(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(TdnError::validation(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if self.epochs == 0 {
            return Err(TdnError::validation("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: TdnParams,
    pub second: TdnParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: &TdnConfig) -> Result<Self> {
        Ok(AdamState {
            first: TdnParams::zeros(config)?,
            second: TdnParams::zeros(config)?,
            step: 0,
        })
    }
}

/// One bias-corrected Adam update. Tensors are visited in the canonical
/// order of [`TdnParams::named_tensors`].
pub fn adam_step(model: &mut TdnModel, grads: &TdnGradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if !model.params.same_shape(grads) || !model.params.same_shape(&state.first) || !model.params.same_shape(&state.second) {
        return Err(TdnError::contract("adam: parameter, gradient and moment trees differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = model.params.tensors_mut();
    let firsts = state.first.tensors_mut();
    let seconds = state.second.tensors_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(firsts).zip(seconds) {
        let p = p.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (i, &gi) in g.as_slice().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss, each measured before that sample's update.
    pub mean_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch<TAB>mean_loss<TAB>seconds`.
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.epoch, format_sig9(self.mean_loss), format_sig9(self.seconds))
    }
}

/// Formats a float with 9 significant digits, like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..9).contains(&exp) {
        trim(&format!("{x:.*}", (8 - exp) as usize))
    } else {
        let mut out = trim(mantissa);
        let _ = write!(out, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
        out
    }
}

fn check_dims(model: &TdnModel, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(TdnError::EmptyInput("dataset with no videos"));
    }
    for (idx, s) in dataset.samples.iter().enumerate() {
        if s.features.cols() != model.config.m || s.frames() == 0 {
            return Err(TdnError::validation(format!(
                "sample {idx}: {}x{} features do not fit a model with m = {}",
                s.features.rows(),
                s.features.cols(),
                model.config.m
            )));
        }
        if let Some(l) = s.labels.iter().find(|&&l| l as usize >= model.config.labels) {
            return Err(TdnError::validation(format!(
                "sample {idx}: label {l} outside vocabulary of {}",
                model.config.labels
            )));
        }
    }
    Ok(())
}

/// Per-video Adam training. `on_epoch` sees each record as it is produced.
pub fn train_with(
    model: &mut TdnModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_dims(model, dataset)?;
    let mut state = AdamState::new(&model.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for &idx in &order {
            let sample = &dataset.samples[idx];
            let (value, grads) = loss_and_gradients(model, &sample.features, &sample.labels)
                .map_err(|e| TdnError::validation(format!("sample {idx}: {e}")))?;
            total += value;
            adam_step(model, &grads, &mut state, cfg)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / dataset.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

pub fn train(model: &mut TdnModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    train_with(model, dataset, cfg, |_| {})
}

pub fn mean_loss(model: &TdnModel, dataset: &Dataset) -> Result<f64> {
    check_dims(model, dataset)?;
    let mut total = 0.0;
    for s in &dataset.samples {
        total += loss(&forward(model, &s.features)?.logits, &s.labels)?;
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub hit_at_1: f64,
    pub gap_at_k: f64,
}

/// Hit@1 and global average precision over the top-`k` predictions of each
/// video. `k` is clamped to the vocabulary size.
pub fn evaluate(model: &TdnModel, dataset: &Dataset, k: usize) -> Result<Metrics> {
    check_dims(model, dataset)?;
    let k = k.clamp(1, model.config.labels);
    let mut hits = 0usize;
    let mut positives = 0usize;
    // (score, video, label, relevant)
    let mut ranked: Vec<(f64, usize, u32, bool)> = Vec::with_capacity(dataset.len() * k);
    for (v, s) in dataset.samples.iter().enumerate() {
        let logits = forward(model, &s.features)?.logits;
        let top = predict_topk(&logits, k)?;
        if s.labels.contains(&top[0].0) {
            hits += 1;
        }
        positives += s.labels.len();
        ranked.extend(top.into_iter().map(|(label, score)| (score, v, label, s.labels.contains(&label))));
    }
    Ok(Metrics {
        hit_at_1: hits as f64 / dataset.len() as f64,
        gap_at_k: average_precision(ranked, positives),
    })
}

/// AP of a scored list against `positives` relevant items overall.
pub fn average_precision(mut ranked: Vec<(f64, usize, u32, bool)>, positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut seen = 0usize;
    let mut sum = 0.0;
    for (rank, item) in ranked.iter().enumerate() {
        if item.3 {
            seen += 1;
            sum += seen as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this move an O(1) loss by less than a few ulps
/// under a `GRADCHECK_STEP` perturbation, so central differences cannot
/// resolve them in f64.
pub const RESOLVABLE_GRADIENT: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst entry, e.g. `layer0.head1.wz[5]`.
    pub worst_path: String,
    /// `(N, m, K, L, C)` of the trial holding the worst entry.
    pub worst_config: (usize, usize, usize, usize, usize),
    /// Worst relative error over entries with `max(|analytic|, |numeric|)`
    /// at least [`RESOLVABLE_GRADIENT`]. Diagnostic only; `passed` uses
    /// `max_rel_error`.
    pub max_rel_error_resolvable: f64,
    /// Entries below [`RESOLVABLE_GRADIENT`].
    pub unresolvable_entries: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Random small problem: model with every tensor perturbed, features and labels.
pub fn random_problem(rng: &mut ChaCha8Rng) -> Result<(TdnModel, Matrix, Vec<u32>)> {
    let heads = rng.gen_range(1..=2);
    let m = heads * rng.gen_range(1..=8 / heads);
    let layers = rng.gen_range(1..=2);
    let labels = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=6);
    let mut model = TdnModel::new(TdnConfig::new(m, heads, layers, labels), rng.gen())?;
    for t in model.params.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let x = Matrix::random_uniform(n, m, 1.0, rng);
    let targets: Vec<u32> = (0..labels as u32).filter(|_| rng.gen_bool(0.5)).collect();
    Ok((model, x, targets))
}

/// Central-difference check of every parameter against `gradient`.
pub fn gradcheck_with<G>(trials: usize, seed: u64, gradient: G) -> Result<GradcheckReport>
where
    G: Fn(&TdnModel, &Matrix, &[u32]) -> Result<TdnGradients>,
{
    if trials == 0 {
        return Err(TdnError::validation("gradcheck needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        trials,
        entries_checked: 0,
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_config: (0, 0, 0, 0, 0),
        max_rel_error_resolvable: 0.0,
        unresolvable_entries: 0,
    };
    for _ in 0..trials {
        let (model, x, labels) = random_problem(&mut rng)?;
        let analytic = gradient(&model, &x, &labels)?;
        if !analytic.same_shape(&model.params) {
            return Err(TdnError::contract("gradient tree does not match the model"));
        }
        let cfg = model.config;
        let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let grads = analytic.tensors();
        let mut probe = model.clone();
        for (t, name) in names.iter().enumerate() {
            for e in 0..grads[t].len() {
                let original = probe.params.tensors_mut()[t].as_slice()[e];
                let mut eval = |value: f64| -> Result<f64> {
                    probe.params.tensors_mut()[t].as_mut_slice()[e] = value;
                    loss(&forward(&probe, &x)?.logits, &labels)
                };
                let plus = eval(original + GRADCHECK_STEP)?;
                let minus = eval(original - GRADCHECK_STEP)?;
                eval(original)?;
                let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
                let analytic = grads[t].as_slice()[e];
                let err = relative_error(analytic, numeric);
                report.entries_checked += 1;
                if analytic.abs().max(numeric.abs()) >= RESOLVABLE_GRADIENT {
                    report.max_rel_error_resolvable = report.max_rel_error_resolvable.max(err);
                } else {
                    report.unresolvable_entries += 1;
                }
                if err > report.max_rel_error || report.worst_path.is_empty() {
                    report.max_rel_error = err;
                    report.worst_path = format!("{name}[{e}]");
                    report.worst_config = (x.rows(), cfg.m, cfg.heads, cfg.layers, cfg.labels);
                }
            }
        }
    }
    Ok(report)
}

pub fn gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(trials, seed, |model, x, labels| {
        loss_and_gradients(model, x, labels).map(|(_, g)| g)
    })
}
