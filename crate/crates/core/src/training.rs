//! RMSProp training with teacher forcing, gradient clipping, and a
//! finite-difference gradient checker.
//!
//! The training loss of a batch is the reduced (mean or sum) negative
//! log-likelihood of its windows plus `l2_weight * |w|^2`, the regularizer
//! counted once per batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{extract_windows, Scene, Window, WindowAgent};
use crate::error::{Error, Result};
use crate::geometry::AgentState;
use crate::network::{forward_sequence, sequence_loss, ModelConfig, ModelVariant, ModelWeights, RolloutMode};
use crate::tensor::{accumulate_grad, DenseMatrix, Gradients, ParamId, RngState};

/// How per-window losses in a batch are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchReduction {
    Mean,
    Sum,
}

impl FromStr for BatchReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(Error::Config(format!("batch_reduction must be `mean` or `sum`, got `{s}`"))),
        }
    }
}

impl fmt::Display for BatchReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub l2_weight: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub obs_len: usize,
    pub pred_len: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub batch_reduction: BatchReduction,
    /// Training window stride; `None` means `pred_len` (non-overlapping
    /// prediction segments).
    pub window_stride: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            rmsprop_decay: 0.95,
            epsilon: 1e-8,
            epochs: 100,
            l2_weight: 1e-4,
            grad_clip: 10.0,
            seed: 0,
            obs_len: 8,
            pred_len: 12,
            batch_size: 1,
            batch_reduction: BatchReduction::Mean,
            window_stride: None,
            model: ModelConfig::default(),
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in the order
/// [`TrainConfig::to_key_values`] emits them.
pub const CONFIG_KEYS: [&str; 20] = [
    "learning_rate",
    "rmsprop_decay",
    "epsilon",
    "epochs",
    "l2_weight",
    "grad_clip",
    "seed",
    "obs_len",
    "pred_len",
    "batch_size",
    "batch_reduction",
    "window_stride",
    "variant",
    "hidden_size",
    "embedding_size",
    "grid_cells",
    "grid_size",
    "frustum_aperture_deg",
    "frustum_depth",
    "anchor_distance",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::Config(format!("rmsprop_decay must be in (0, 1), got {}", self.rmsprop_decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.l2_weight >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("l2_weight and grad_clip must be >= 0".into()));
        }
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("obs_len and pred_len must be at least 1".into()));
        }
        if self.batch_size == 0 || self.window_stride == Some(0) {
            return Err(Error::Config("batch_size and window_stride must be at least 1".into()));
        }
        self.model.validate()
    }

    pub fn stride(&self) -> usize {
        self.window_stride.unwrap_or(self.pred_len)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "rmsprop_decay" => self.rmsprop_decay = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "l2_weight" => self.l2_weight = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "obs_len" => self.obs_len = parse_value(key, value)?,
            "pred_len" => self.pred_len = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "batch_reduction" => self.batch_reduction = value.parse()?,
            "window_stride" => {
                self.window_stride = match value {
                    "" | "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "variant" => self.model.variant = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "hidden_size" => self.model.hidden_size = parse_value(key, value)?,
            "embedding_size" => self.model.embedding_size = parse_value(key, value)?,
            "grid_cells" => self.model.grid_cells = parse_value(key, value)?,
            "grid_size" => self.model.grid_size = parse_value(key, value)?,
            "frustum_aperture_deg" => self.model.frustum_aperture_deg = parse_value(key, value)?,
            "frustum_depth" => self.model.frustum_depth = parse_value(key, value)?,
            "anchor_distance" => self.model.anchor_distance = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file over the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting with defaults materialized, in [`CONFIG_KEYS`] order.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let values = [
            self.learning_rate.to_string(),
            self.rmsprop_decay.to_string(),
            self.epsilon.to_string(),
            self.epochs.to_string(),
            self.l2_weight.to_string(),
            self.grad_clip.to_string(),
            self.seed.to_string(),
            self.obs_len.to_string(),
            self.pred_len.to_string(),
            self.batch_size.to_string(),
            self.batch_reduction.to_string(),
            self.window_stride.map_or_else(|| "auto".to_string(), |s| s.to_string()),
            m.variant.to_string(),
            m.hidden_size.to_string(),
            m.embedding_size.to_string(),
            m.grid_cells.to_string(),
            m.grid_size.to_string(),
            m.frustum_aperture_deg.to_string(),
            m.frustum_depth.to_string(),
            m.anchor_distance.to_string(),
        ];
        CONFIG_KEYS.into_iter().zip(values).collect()
    }

    pub fn to_config_string(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Running mean of squared gradients, one tensor per weight.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub mean_square: Vec<DenseMatrix>,
}

impl OptimizerState {
    pub fn new(weights: &ModelWeights) -> Self {
        Self {
            mean_square: weights
                .params()
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Rescales `grads` to norm `max_norm` if it is larger; direction is kept.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> (f64, bool) {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// `s <- rho s + (1 - rho) g^2`, `w <- w - lr g / sqrt(s + eps)`, after
/// optional global-norm clipping of `g`.
pub fn rmsprop_step(
    weights: &mut ModelWeights,
    grads: &mut Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<StepInfo> {
    if grads.tensors().len() != weights.params().len() || state.mean_square.len() != weights.params().len() {
        return Err(Error::shape("rmsprop_step", "gradient, state and weight lists differ in length"));
    }
    for (i, g) in grads.tensors().iter().enumerate() {
        if g.shape() != weights.params()[i].shape() || state.mean_square[i].shape() != g.shape() {
            return Err(Error::shape("rmsprop_step", format!("tensor `{}`", weights.names()[i])));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("gradient of `{}`", weights.names()[i]),
            });
        }
    }
    let (grad_norm, clipped) = clip_global_norm(grads, config.grad_clip);
    let (rho, lr, eps) = (config.rmsprop_decay, config.learning_rate, config.epsilon);
    for (i, g) in grads.tensors().iter().enumerate() {
        let s = state.mean_square[i].data_mut();
        let w = weights.get_mut(ParamId(i)).data_mut();
        for ((wv, sv), gv) in w.iter_mut().zip(s.iter_mut()).zip(g.data()) {
            *sv = rho * *sv + (1.0 - rho) * gv * gv;
            *wv -= lr * gv / (*sv + eps).sqrt();
        }
    }
    Ok(StepInfo { grad_norm, clipped })
}

/// Windows used for training, extracted with the configured stride.
pub fn training_windows(scenes: &[Scene], config: &TrainConfig) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(extract_windows(s, config.obs_len, config.pred_len, config.stride())?);
    }
    Ok(out)
}

/// Teacher-forced NLL of one window (no regularizer), accumulating its
/// gradient scaled by `scale` into `grads` when given.
pub fn window_nll(
    weights: &ModelWeights,
    window: &Window,
    obs_len: usize,
    pred_len: usize,
    grads: Option<(&mut Gradients, f64)>,
) -> Result<f64> {
    // teacher forcing never draws from the rng
    let mut rng = RngState::new(0);
    let mut pass = forward_sequence(weights, window, RolloutMode::TeacherForced, &mut rng)?;
    let loss = sequence_loss(&mut pass, obs_len, pred_len, 0.0)?;
    let value = pass.tape.scalar(loss);
    if let Some((g, scale)) = grads {
        let scaled = pass.tape.scale(loss, scale);
        accumulate_grad(&pass.tape, scaled, g)?;
    }
    Ok(value)
}

/// Mean teacher-forced NLL over `windows`.
pub fn mean_nll(weights: &ModelWeights, windows: &[Window], obs_len: usize, pred_len: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty { what: "window set" });
    }
    let mut total = 0.0;
    for w in windows {
        total += window_nll(weights, w, obs_len, pred_len, None)?;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches of the regularized batch loss, each
    /// evaluated before its update.
    pub loss: f64,
    /// Mean per-window NLL over the epoch.
    pub nll: f64,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub history: Vec<EpochRecord>,
}

/// Stream 0 of the run seed initializes weights, stream 1 shuffles windows.
pub fn train(scenes: &[Scene], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let windows = training_windows(scenes, config)?;
    if windows.is_empty() {
        return Err(Error::Empty {
            what: "training set (no window has a fully observed agent)",
        });
    }
    let root = RngState::new(config.seed);
    let weights = ModelWeights::init(config.model.clone(), &mut root.derive(0))?;
    train_from(weights, &windows, config, &mut root.derive(1))
}

/// Continues training `weights` on `windows`; `rng` drives the shuffle.
/// Sum that does not depend on the order the values arrived in, so an epoch
/// that leaves the weights unchanged reports exactly the same loss.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub fn train_from(
    mut weights: ModelWeights,
    windows: &[Window],
    config: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainOutcome> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty { what: "training set" });
    }
    if weights.config() != &config.model {
        return Err(Error::Config("weights were built for a different model configuration".into()));
    }
    let mut state = OptimizerState::new(&weights);
    let mut grads = Gradients::zeros_like(weights.params());
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut losses, mut nlls, mut norm_sum) = (Vec::new(), Vec::with_capacity(windows.len()), 0.0);
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            let scale = match config.batch_reduction {
                BatchReduction::Mean => 1.0 / batch.len() as f64,
                BatchReduction::Sum => 1.0,
            };
            let mut batch_nll = 0.0;
            // fixed summation order: the shuffled index order
            for &i in batch {
                let nll = window_nll(
                    &weights,
                    &windows[i],
                    config.obs_len,
                    config.pred_len,
                    Some((&mut grads, scale)),
                )?;
                nlls.push(nll);
                batch_nll += scale * nll;
            }
            let mut reg = 0.0;
            if config.l2_weight > 0.0 {
                reg = config.l2_weight * weights.squared_norm();
                for (g, w) in grads.tensors_mut().iter_mut().zip(weights.params()) {
                    crate::tensor::axpy(2.0 * config.l2_weight, w.data(), g.data_mut());
                }
            }
            let info = rmsprop_step(&mut weights, &mut grads, &mut state, config)?;
            losses.push(batch_nll + reg);
            norm_sum += info.grad_norm;
        }
        let rec = EpochRecord {
            epoch,
            loss: order_free_sum(&mut losses) / losses.len() as f64,
            nll: order_free_sum(&mut nlls) / windows.len() as f64,
            mean_grad_norm: norm_sum / losses.len() as f64,
        };
        log::debug!("epoch {epoch}: loss {:.6} nll {:.6}", rec.loss, rec.nll);
        history.push(rec);
    }
    Ok(TrainOutcome { weights, history })
}

/// Largest disagreement between the tape gradient and central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variant: ModelVariant,
    pub seed: u64,
    pub tolerance: f64,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} variant={} seed={} entries={} max_rel_error={:.3e} tolerance={:.1e} worst={}[{}] analytic={:.9e} numeric={:.9e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.variant,
            self.seed,
            self.entries_checked,
            self.max_relative_error,
            self.tolerance,
            self.worst_tensor,
            self.worst_index,
            self.analytic,
            self.numeric
        )
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Small model used by the gradient checker: every weight is perturbed, so
/// the sizes are kept tiny.
pub fn gradcheck_model_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        hidden_size: 4,
        embedding_size: 3,
        grid_cells: 4,
        grid_size: 4.0,
        ..ModelConfig::default()
    }
}

/// Two pedestrians walking toward each other, heads jittered around the
/// facing direction, so each sits in the other's view frustum and pooling
/// is active. 4 observed and 3 predicted frames.
pub fn gradcheck_window(rng: &mut RngState) -> Window {
    let mut agents = Vec::new();
    for (id, start, dir, pan) in [(1u32, [0.0, 0.0], 1.0, 0.0), (2, [1.6, 0.1], -1.0, std::f64::consts::PI)] {
        let states = (0..7)
            .map(|k| {
                let x = start[0] + dir * 0.12 * k as f64 + rng.uniform(-0.02, 0.02);
                let y = start[1] + rng.uniform(-0.02, 0.02);
                Some(AgentState::new([x, y], pan + rng.uniform(-0.1, 0.1)))
            })
            .collect();
        agents.push(WindowAgent {
            agent_id: id,
            states,
            full: true,
        });
    }
    Window {
        start_frame: 0,
        obs_len: 4,
        pred_len: 3,
        timestep: 0.4,
        agents,
    }
}

/// Checks every weight of a random small model on a seeded two-agent scene.
pub fn gradient_check(variant: ModelVariant, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    gradient_check_with(variant, seed, tolerance, None)
}

/// As [`gradient_check`]; `corrupt = (tensor, entry, delta)` adds `delta` to
/// one analytic entry first, which a working checker must flag.
pub fn gradient_check_with(
    variant: ModelVariant,
    seed: u64,
    tolerance: f64,
    corrupt: Option<(usize, usize, f64)>,
) -> Result<GradCheckReport> {
    let root = RngState::new(seed);
    let mut weights = ModelWeights::zeros(gradcheck_model_config(variant))?;
    let mut wrng = root.derive(0);
    for p in weights.params_mut() {
        for v in p.data_mut() {
            *v = wrng.uniform(-0.5, 0.5);
        }
    }
    let window = gradcheck_window(&mut root.derive(1));
    let (obs, pred, l2) = (window.obs_len, window.pred_len, 1e-3);
    let loss_of = |w: &ModelWeights| -> Result<f64> {
        let mut pass = forward_sequence(w, &window, RolloutMode::TeacherForced, &mut RngState::new(0))?;
        let l = sequence_loss(&mut pass, obs, pred, l2)?;
        Ok(pass.tape.scalar(l))
    };

    let mut analytic = {
        let mut pass = forward_sequence(&weights, &window, RolloutMode::TeacherForced, &mut RngState::new(0))?;
        let l = sequence_loss(&mut pass, obs, pred, l2)?;
        crate::tensor::grad_of_scalar(&pass.tape, l)?
    };
    if let Some((t, e, delta)) = corrupt {
        let g = analytic
            .tensors_mut()
            .get_mut(t)
            .ok_or_else(|| Error::InvalidInput(format!("no tensor {t}")))?;
        let v = g
            .data_mut()
            .get_mut(e)
            .ok_or_else(|| Error::InvalidInput(format!("no entry {e} in tensor {t}")))?;
        *v += delta;
    }

    let mut report = GradCheckReport {
        variant,
        seed,
        tolerance,
        entries_checked: 0,
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        passed: false,
    };
    for p in 0..weights.params().len() {
        for e in 0..weights.params()[p].len() {
            let orig = weights.params()[p].data()[e];
            weights.get_mut(ParamId(p)).data_mut()[e] = orig + FD_STEP;
            let up = loss_of(&weights)?;
            weights.get_mut(ParamId(p)).data_mut()[e] = orig - FD_STEP;
            let down = loss_of(&weights)?;
            weights.get_mut(ParamId(p)).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(ParamId(p)).data()[e];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = err;
                report.worst_tensor = weights.names()[p].clone();
                report.worst_index = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}
