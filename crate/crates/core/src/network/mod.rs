//! The forecasting network: weights, single-step layers, likelihood heads,
//! the sequence forward pass and checkpoints.
//!
//! Coordinate convention: a step consumes the displacement since the previous
//! frame and the vislet anchor relative to the head position, and predicts a
//! Gaussian over the next position and anchor *relative to the current
//! position*. Shifting a Gaussian by a known vector keeps it Gaussian, so the
//! predicted distribution over absolute coordinates is the network output
//! translated by the current position.

mod checkpoint;
mod forward;
mod gaussian;
mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    forward_sequence, sequence_loss, walking_directions, AgentRollout, AgentStep, Feedback, ForwardPass, RolloutMode,
    StepOutput,
};
pub use gaussian::{
    bd_nll, bivariate_nll, covariance_from_logchol, gaussian4_nll, BdGaussianPair, Bivariate, BivariateKernel,
    Gaussian4, Gaussian4Kernel, LogCholParams, LOG_CAP, THETA_INDEX,
};
pub use layers::{embed, lstm_step, project_output, LstmState, LstmWeights};

use crate::error::{Error, Result};
use crate::geometry::{FrustumSpec, PoolingGrid, PoolingMode};
use crate::tensor::{DenseMatrix, ParamId, RngState};

/// Names of the 14 joint-head outputs, in order.
pub const JOINT_OUTPUT_LAYOUT: [&str; 14] = [
    "mu_x", "mu_y", "mu_ax", "mu_ay", "theta_00", "theta_01", "theta_02", "theta_03", "theta_11", "theta_12",
    "theta_13", "theta_22", "theta_23", "theta_33",
];

/// Names of the 10 block-diagonal head outputs, in order.
pub const BD_OUTPUT_LAYOUT: [&str; 10] = [
    "mu_x", "mu_y", "log_sigma_x", "log_sigma_y", "rho_raw_xy", "mu_ax", "mu_ay", "log_sigma_ax", "log_sigma_ay",
    "rho_raw_a",
];

/// Names of the 5 position-only head outputs, in order.
pub const POSITION_OUTPUT_LAYOUT: [&str; 5] = ["mu_x", "mu_y", "log_sigma_x", "log_sigma_y", "rho_raw_xy"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Tracklets + vislets, frustum pooling, full 4x4 covariance.
    Full,
    /// As `Full` but two independent 2-D Gaussians (position, anchor).
    #[serde(rename = "bd")]
    BlockDiagonal,
    /// Pooling over the whole grid, ignoring gaze.
    #[serde(rename = "nofrustum")]
    NoFrustum,
    /// No social pooling.
    Individual,
    /// Head pose replaced by the walking direction.
    Pace,
    /// Positions only, no pooling, 2-D Gaussian.
    Vanilla,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Full,
        ModelVariant::BlockDiagonal,
        ModelVariant::NoFrustum,
        ModelVariant::Individual,
        ModelVariant::Pace,
        ModelVariant::Vanilla,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::BlockDiagonal => "bd",
            ModelVariant::NoFrustum => "nofrustum",
            ModelVariant::Individual => "individual",
            ModelVariant::Pace => "pace",
            ModelVariant::Vanilla => "vanilla",
        }
    }

    pub fn pooling_mode(&self) -> PoolingMode {
        match self {
            ModelVariant::Full | ModelVariant::BlockDiagonal | ModelVariant::Pace => PoolingMode::Frustum,
            ModelVariant::NoFrustum => PoolingMode::All,
            ModelVariant::Individual | ModelVariant::Vanilla => PoolingMode::None,
        }
    }

    pub fn uses_pooling(&self) -> bool {
        self.pooling_mode() != PoolingMode::None
    }

    pub fn uses_vislets(&self) -> bool {
        *self != ModelVariant::Vanilla
    }

    pub fn output_size(&self) -> usize {
        match self {
            ModelVariant::BlockDiagonal => BD_OUTPUT_LAYOUT.len(),
            ModelVariant::Vanilla => POSITION_OUTPUT_LAYOUT.len(),
            _ => JOINT_OUTPUT_LAYOUT.len(),
        }
    }

    pub fn output_layout(&self) -> &'static [&'static str] {
        match self {
            ModelVariant::BlockDiagonal => &BD_OUTPUT_LAYOUT,
            ModelVariant::Vanilla => &POSITION_OUTPUT_LAYOUT,
            _ => &JOINT_OUTPUT_LAYOUT,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let alias = match lower.as_str() {
            "block_diagonal" | "blockdiagonal" | "bd-mx-lstm" => "bd",
            "no_frustum" | "no-frustum" => "nofrustum",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|v| v.name() == alias)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model variant `{s}`")))
    }
}

/// Architecture hyperparameters. Defaults follow the published setup:
/// 64-wide embeddings, 128 hidden units, a 32x32 grid over 4 m, a 40 degree
/// frustum and anchors 0.5 m from the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub grid_cells: usize,
    /// Side of the square pooling region, meters.
    pub grid_size: f64,
    pub frustum_aperture_deg: f64,
    pub frustum_depth: f64,
    pub anchor_distance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::Full,
            hidden_size: 128,
            embedding_size: 64,
            grid_cells: 32,
            grid_size: 4.0,
            frustum_aperture_deg: 40.0,
            frustum_depth: 2.0,
            anchor_distance: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: ModelVariant) -> Self {
        Self {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.embedding_size == 0 {
            return Err(Error::Config("hidden and embedding sizes must be positive".into()));
        }
        if !(self.anchor_distance > 0.0 && self.anchor_distance.is_finite()) {
            return Err(Error::Config(format!(
                "anchor distance must be positive, got {}",
                self.anchor_distance
            )));
        }
        self.grid()?;
        self.frustum()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<PoolingGrid> {
        PoolingGrid::new(self.grid_cells, self.grid_size)
    }

    pub fn frustum(&self) -> Result<FrustumSpec> {
        FrustumSpec::from_degrees(self.frustum_aperture_deg, self.frustum_depth)
    }

    pub fn lstm_input_size(&self) -> usize {
        let streams = 1 + usize::from(self.variant.uses_vislets()) + usize::from(self.variant.uses_pooling());
        streams * self.embedding_size
    }
}

/// Where each role lives in the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub embed_x: (ParamId, ParamId),
    pub embed_a: Option<(ParamId, ParamId)>,
    pub embed_h: Option<(ParamId, ParamId)>,
    /// LSTM kernels; gate rows ordered input, forget, cell, output.
    pub lstm_input: ParamId,
    pub lstm_recurrent: ParamId,
    pub lstm_bias: ParamId,
    pub output: (ParamId, ParamId),
}

/// All trainable tensors of one model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<DenseMatrix>,
    layout: Layout,
}

fn specs(config: &ModelConfig) -> (Vec<(String, (usize, usize))>, Layout) {
    let e = config.embedding_size;
    let d = config.hidden_size;
    let mut out: Vec<(String, (usize, usize))> = Vec::new();
    let mut add = |name: &str, shape: (usize, usize)| {
        out.push((name.to_string(), shape));
        ParamId(out.len() - 1)
    };
    let embed_x = (add("embed_x.weight", (e, 2)), add("embed_x.bias", (e, 1)));
    let embed_a = config
        .variant
        .uses_vislets()
        .then(|| (add("embed_a.weight", (e, 2)), add("embed_a.bias", (e, 1))));
    let embed_h = config.variant.uses_pooling().then(|| {
        (
            add("embed_h.weight", (e, config.grid_cells * config.grid_cells * d)),
            add("embed_h.bias", (e, 1)),
        )
    });
    let lstm_input = add("lstm.weight_ih", (4 * d, config.lstm_input_size()));
    let lstm_recurrent = add("lstm.weight_hh", (4 * d, d));
    let lstm_bias = add("lstm.bias", (4 * d, 1));
    let output = (
        add("output.weight", (config.variant.output_size(), d)),
        add("output.bias", (config.variant.output_size(), 1)),
    );
    let layout = Layout {
        embed_x,
        embed_a,
        embed_h,
        lstm_input,
        lstm_recurrent,
        lstm_bias,
        output,
    };
    (out, layout)
}

/// Uniform init range for every weight.
pub const INIT_SCALE: f64 = 0.08;

impl ModelWeights {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = specs(&config);
        let (names, params) = specs
            .into_iter()
            .map(|(n, (r, c))| (n, DenseMatrix::zeros(r, c)))
            .unzip();
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    /// Uniform `[-0.08, 0.08)` everywhere, forget-gate bias 1.
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        for p in &mut w.params {
            for v in p.data_mut() {
                *v = rng.uniform(-INIT_SCALE, INIT_SCALE);
            }
        }
        let d = w.config.hidden_size;
        let bias = w.params[w.layout.lstm_bias.0].data_mut();
        bias[d..2 * d].iter_mut().for_each(|b| *b = 1.0);
        Ok(w)
    }

    /// Rebuilds weights from named tensors; names and shapes must match the
    /// layout implied by `config` exactly.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, DenseMatrix)>) -> Result<Self> {
        let template = Self::zeros(config)?;
        if tensors.len() != template.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.names.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, t), (want, shape)) in tensors
            .into_iter()
            .zip(template.names.iter().zip(template.params.iter().map(DenseMatrix::shape)))
        {
            if &name != want || t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match expected `{want}` {shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[DenseMatrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.params
    }

    pub fn get(&self, p: ParamId) -> &DenseMatrix {
        &self.params[p.0]
    }

    pub fn get_mut(&mut self, p: ParamId) -> &mut DenseMatrix {
        &mut self.params[p.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseMatrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(DenseMatrix::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(DenseMatrix::sum_squares).sum()
    }
}
