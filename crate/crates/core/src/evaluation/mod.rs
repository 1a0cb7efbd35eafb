//! Forecast metrics, sweeps over horizon and head-pose noise, and the gaze
//! statistics (head/motion discrepancy, circular correlation).
//!
//! Metrics are computed on the deterministic mean rollout unless a caller
//! asks for sampled feedback. The angular error averages over every
//! prediction step, like MAD.

mod analysis;
mod report;
mod sweeps;

use std::f64::consts::PI;

pub use analysis::{
    circular_correlation, circular_mean, discrepancy_profile, motion_samples, moving_average,
    velocity_binned_correlation, DiscrepancyProfile, MotionSample, TrackDiscrepancy, VelocityBin, DEFAULT_SPEED_FLOOR,
    SMOOTHING_WINDOW,
};
pub use report::{read_metrics_csv, write_metrics_csv, MetricRow, METRICS_HEADER};
pub use sweeps::{horizon_sweep, noise_sweep, perturb_observed_pans, shorten_window, trend_test, HorizonRow, NoiseRow, TrendTest};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, AgentState, Point};
use crate::network::{forward_sequence, Feedback, ModelWeights, RolloutMode};
use crate::tensor::RngState;
use crate::AgentId;

/// Predicted and true states of one agent over the prediction frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentForecast {
    pub agent_id: AgentId,
    /// Window start, to tell apart the same agent in different windows.
    pub start_frame: usize,
    pub predicted: Vec<AgentState>,
    pub truth: Vec<AgentState>,
}

impl AgentForecast {
    pub fn new(agent_id: AgentId, start_frame: usize, predicted: Vec<AgentState>, truth: Vec<AgentState>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape(
                "AgentForecast",
                format!("{} predictions for {} ground-truth states", predicted.len(), truth.len()),
            ));
        }
        if predicted.is_empty() {
            return Err(Error::Empty { what: "forecast" });
        }
        Ok(Self {
            agent_id,
            start_frame,
            predicted,
            truth,
        })
    }

    pub fn displacement_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.predicted
            .iter()
            .zip(&self.truth)
            .map(|(p, t)| distance(p.position, t.position))
    }
}

/// Every scored agent of a set of windows.
pub type ForecastResult = Vec<AgentForecast>;

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn nonempty(results: &[AgentForecast]) -> Result<()> {
    if results.is_empty() {
        Err(Error::Empty { what: "forecast set" })
    } else {
        Ok(())
    }
}

/// Mean displacement over all agents and prediction steps, meters.
pub fn mad(results: &[AgentForecast]) -> Result<f64> {
    nonempty(results)?;
    let (sum, n) = results
        .iter()
        .flat_map(AgentForecast::displacement_errors)
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Mean displacement at each agent's last prediction step, meters.
pub fn fad(results: &[AgentForecast]) -> Result<f64> {
    nonempty(results)?;
    let sum: f64 = results
        .iter()
        .map(|r| distance(r.predicted[r.predicted.len() - 1].position, r.truth[r.truth.len() - 1].position))
        .sum();
    Ok(sum / results.len() as f64)
}

/// Mean wrapped absolute pan error over all agents and steps, degrees.
pub fn angular_error(results: &[AgentForecast]) -> Result<f64> {
    nonempty(results)?;
    let (sum, n) = results
        .iter()
        .flat_map(|r| r.predicted.iter().zip(&r.truth))
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + angle_diff(p.pan(), t.pan()), n + 1));
    Ok((sum / n as f64) * 180.0 / PI)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentMetrics {
    pub agent_id: AgentId,
    pub start_frame: usize,
    pub mad: f64,
    pub fad: f64,
    pub e_alpha_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mad: f64,
    pub fad: f64,
    pub e_alpha_deg: f64,
    pub per_agent: Vec<AgentMetrics>,
    /// Scored agent-windows.
    pub agents: usize,
    /// Scored agent-steps.
    pub steps: usize,
}

impl MetricReport {
    pub fn from_results(results: &[AgentForecast]) -> Result<Self> {
        let per_agent = results
            .iter()
            .map(|r| {
                let one = std::slice::from_ref(r);
                Ok(AgentMetrics {
                    agent_id: r.agent_id,
                    start_frame: r.start_frame,
                    mad: mad(one)?,
                    fad: fad(one)?,
                    e_alpha_deg: angular_error(one)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mad: mad(results)?,
            fad: fad(results)?,
            e_alpha_deg: angular_error(results)?,
            per_agent,
            agents: results.len(),
            steps: results.iter().map(|r| r.predicted.len()).sum(),
        })
    }
}

/// Anything that predicts the prediction frames of a window.
pub trait Forecaster {
    fn name(&self) -> String;

    /// Forecasts for every full agent of `window`, over frames
    /// `obs_len..window.len()`.
    fn forecast(&self, window: &Window, rng: &mut RngState) -> Result<ForecastResult>;
}

fn truth_of(window: &Window, states: &[Option<AgentState>]) -> Vec<AgentState> {
    states[window.obs_len..].iter().map(|s| s.expect("full agent")).collect()
}

/// The trained network, rolled out autoregressively.
pub struct ModelForecaster<'a> {
    pub weights: &'a ModelWeights,
    pub feedback: Feedback,
}

impl<'a> ModelForecaster<'a> {
    pub fn new(weights: &'a ModelWeights) -> Self {
        Self {
            weights,
            feedback: Feedback::Mean,
        }
    }
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> String {
        self.weights.variant().name().to_string()
    }

    fn forecast(&self, window: &Window, rng: &mut RngState) -> Result<ForecastResult> {
        let pass = forward_sequence(self.weights, window, RolloutMode::Autoregressive(self.feedback), rng)?;
        pass.agents
            .iter()
            .zip(&window.agents)
            .filter(|(_, w)| w.full)
            .map(|(a, w)| {
                let predicted = a.predicted[window.obs_len..]
                    .iter()
                    .map(|p| p.ok_or_else(|| Error::InvalidInput(format!("no prediction for agent {}", a.agent_id))))
                    .collect::<Result<Vec<_>>>()?;
                AgentForecast::new(a.agent_id, window.start_frame, predicted, truth_of(window, &w.states))
            })
            .collect()
    }
}

/// Returns the ground truth; a fixture for checking the pipeline.
pub struct OracleForecaster;

impl Forecaster for OracleForecaster {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn forecast(&self, window: &Window, _rng: &mut RngState) -> Result<ForecastResult> {
        window
            .full_agents()
            .map(|a| {
                let truth = truth_of(window, &a.states);
                AgentForecast::new(a.agent_id, window.start_frame, truth.clone(), truth)
            })
            .collect()
    }
}

/// Repeats the last observed displacement and holds the last observed pan.
pub struct ConstantVelocity;

impl Forecaster for ConstantVelocity {
    fn name(&self) -> String {
        "constant_velocity".into()
    }

    fn forecast(&self, window: &Window, _rng: &mut RngState) -> Result<ForecastResult> {
        let obs = window.obs_len;
        window
            .full_agents()
            .map(|a| {
                let last = a.states[obs - 1].expect("full agent");
                let step = match obs {
                    1 => [0.0, 0.0],
                    _ => {
                        let prev = a.states[obs - 2].expect("full agent").position;
                        [last.position[0] - prev[0], last.position[1] - prev[1]]
                    }
                };
                let predicted = (1..=window.pred_len)
                    .map(|k| {
                        let k = k as f64;
                        AgentState::new(
                            [last.position[0] + k * step[0], last.position[1] + k * step[1]],
                            last.pan(),
                        )
                    })
                    .collect();
                AgentForecast::new(a.agent_id, window.start_frame, predicted, truth_of(window, &a.states))
            })
            .collect()
    }
}

/// Forecasts every window with one generator stream per window, so
/// results do not depend on evaluation order.
pub fn forecast_windows(forecaster: &dyn Forecaster, windows: &[Window], rng: &RngState) -> Result<ForecastResult> {
    let mut out = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        out.extend(forecaster.forecast(w, &mut rng.derive(i as u64))?);
    }
    Ok(out)
}

pub fn evaluate(forecaster: &dyn Forecaster, windows: &[Window], rng: &RngState) -> Result<MetricReport> {
    MetricReport::from_results(&forecast_windows(forecaster, windows, rng)?)
}
