//! Annotation ingestion, temporal downsampling, windowing, and synthetic scenes.

mod synthetic;
mod tsv;

use std::collections::BTreeMap;

pub use synthetic::{generate_synthetic, SyntheticKind, SyntheticParams};
pub use tsv::{HEADER as TSV_HEADER, parse_annotations, parse_annotations_str, write_annotations, write_annotations_string};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, AgentState};
use crate::tensor::RngState;
use crate::AgentId;

/// Frame rate of the forecasting protocol.
pub const PROTOCOL_FPS: f64 = 2.5;

/// One line of the canonical annotation TSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAnnotation {
    pub frame: i64,
    pub agent_id: AgentId,
    pub x: f64,
    pub y: f64,
    /// Head pan in degrees, `[0, 360)`.
    pub pan_deg: f64,
}

impl RawAnnotation {
    pub fn pan_rad(&self) -> f64 {
        normalize_angle(self.pan_deg.to_radians())
    }
}

/// Contiguous run of states of one pedestrian, one per scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub agent_id: AgentId,
    pub start_frame: usize,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    /// One past the last frame.
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.states.len()
    }

    pub fn state_at(&self, frame: usize) -> Option<&AgentState> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.states.get(i))
    }
}

/// Tracks sampled on a common frame grid with period `timestep` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub timestep: f64,
    pub tracks: Vec<AgentTrack>,
}

impl Scene {
    pub fn new(timestep: f64, tracks: Vec<AgentTrack>) -> Self {
        Self { timestep, tracks }
    }

    pub fn num_frames(&self) -> usize {
        self.tracks.iter().map(AgentTrack::end_frame).max().unwrap_or(0)
    }

    pub fn to_annotations(&self) -> Vec<RawAnnotation> {
        let mut out: Vec<RawAnnotation> = self
            .tracks
            .iter()
            .flat_map(|t| {
                t.states.iter().enumerate().map(move |(i, s)| RawAnnotation {
                    frame: (t.start_frame + i) as i64,
                    agent_id: t.agent_id,
                    x: s.position[0],
                    y: s.position[1],
                    pan_deg: s.pan().to_degrees() % 360.0,
                })
            })
            .collect();
        out.sort_by_key(|a| (a.frame, a.agent_id));
        out
    }
}

/// Keeps every `source_fps / target_fps`-th frame starting at the earliest one
/// and re-indexes the kept frames from zero.
///
/// Agents with gaps on the kept grid are split into separate contiguous
/// tracks. Nothing is interpolated.
pub fn downsample(annotations: &[RawAnnotation], source_fps: f64, target_fps: f64) -> Result<Scene> {
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::InvalidInput("frame rates must be positive".into()));
    }
    let ratio = source_fps / target_fps;
    let step = ratio.round();
    if step < 1.0 || (ratio - step).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "source rate {source_fps} fps is not an integer multiple of {target_fps} fps"
        )));
    }
    let step = step as i64;
    let timestep = 1.0 / target_fps;
    let Some(first) = annotations.iter().map(|a| a.frame).min() else {
        return Ok(Scene::new(timestep, Vec::new()));
    };

    let mut per_agent: BTreeMap<AgentId, Vec<(usize, AgentState)>> = BTreeMap::new();
    for a in annotations {
        let offset = a.frame - first;
        if offset % step != 0 {
            continue;
        }
        per_agent
            .entry(a.agent_id)
            .or_default()
            .push(((offset / step) as usize, AgentState::new([a.x, a.y], a.pan_rad())));
    }

    let mut tracks = Vec::new();
    for (agent_id, mut states) in per_agent {
        states.sort_by_key(|(f, _)| *f);
        let mut current: Option<AgentTrack> = None;
        for (frame, state) in states {
            match current.as_mut() {
                Some(t) if t.end_frame() == frame => t.states.push(state),
                _ => {
                    tracks.extend(current.take());
                    current = Some(AgentTrack {
                        agent_id,
                        start_frame: frame,
                        states: vec![state],
                    });
                }
            }
        }
        tracks.extend(current);
    }
    Ok(Scene::new(timestep, tracks))
}

/// Scene built from annotations that are already at the protocol rate.
pub fn scene_from_annotations(annotations: &[RawAnnotation], fps: f64) -> Result<Scene> {
    downsample(annotations, fps, fps)
}

/// A pedestrian as seen through one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAgent {
    pub agent_id: AgentId,
    /// One entry per window frame; `None` where the agent is absent.
    pub states: Vec<Option<AgentState>>,
    /// Present on every frame of the window. Only full agents are scored;
    /// the others only provide pooling context.
    pub full: bool,
}

/// `obs_len + pred_len` consecutive frames of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start_frame: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub timestep: f64,
    pub agents: Vec<WindowAgent>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn full_agents(&self) -> impl Iterator<Item = &WindowAgent> {
        self.agents.iter().filter(|a| a.full)
    }

    /// Same window with a shorter prediction horizon.
    pub fn truncated(&self, pred_len: usize) -> Window {
        let len = self.obs_len + pred_len.min(self.pred_len);
        let agents = self
            .agents
            .iter()
            .filter_map(|a| {
                let states = a.states[..len].to_vec();
                states.iter().any(Option::is_some).then(|| WindowAgent {
                    agent_id: a.agent_id,
                    full: states.iter().all(Option::is_some),
                    states,
                })
            })
            .collect();
        Window {
            start_frame: self.start_frame,
            obs_len: self.obs_len,
            pred_len: pred_len.min(self.pred_len),
            timestep: self.timestep,
            agents,
        }
    }
}

/// All windows of `obs_len + pred_len` frames, starting every `stride` frames,
/// that contain at least one fully present agent.
pub fn extract_windows(scene: &Scene, obs_len: usize, pred_len: usize, stride: usize) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(Error::InvalidInput("window stride must be at least 1".into()));
    }
    if obs_len == 0 || pred_len == 0 {
        return Err(Error::InvalidInput("observation and prediction lengths must be at least 1".into()));
    }
    let len = obs_len + pred_len;
    let frames = scene.num_frames();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + len <= frames {
        let agents: Vec<WindowAgent> = scene
            .tracks
            .iter()
            .filter(|t| t.start_frame < start + len && t.end_frame() > start)
            .map(|t| {
                let states: Vec<Option<AgentState>> =
                    (start..start + len).map(|f| t.state_at(f).copied()).collect();
                WindowAgent {
                    agent_id: t.agent_id,
                    full: states.iter().all(Option::is_some),
                    states,
                }
            })
            .collect();
        if agents.iter().any(|a| a.full) {
            windows.push(Window {
                start_frame: start,
                obs_len,
                pred_len,
                timestep: scene.timestep,
                agents,
            });
        }
        start += stride;
    }
    Ok(windows)
}

/// Adds `N(0, sigma^2)` (degrees) to every pan; positions are untouched.
pub fn add_pan_noise(scene: &Scene, sigma_deg: f64, rng: &mut RngState) -> Result<Scene> {
    if !(sigma_deg >= 0.0) {
        return Err(Error::InvalidInput(format!("noise sigma must be >= 0, got {sigma_deg}")));
    }
    let sigma = sigma_deg.to_radians();
    let tracks = scene
        .tracks
        .iter()
        .map(|t| AgentTrack {
            agent_id: t.agent_id,
            start_frame: t.start_frame,
            states: t
                .states
                .iter()
                .map(|s| s.with_pan(s.pan() + sigma * rng.std_normal()))
                .collect(),
        })
        .collect();
    Ok(Scene::new(scene.timestep, tracks))
}
