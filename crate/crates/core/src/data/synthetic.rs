use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AgentTrack, Scene};
use crate::error::{Error, Result};
use crate::geometry::AgentState;
use crate::tensor::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Constant-velocity walkers looking where they go.
    Linear,
    /// One turn per walker; the head turns `gaze_lead` steps before the body.
    TurnWithGaze,
    /// Nearly static group members looking around the group.
    ConversationalGroup,
    /// Two perpendicular streams through a shared region.
    Crossing,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::Linear,
        SyntheticKind::TurnWithGaze,
        SyntheticKind::ConversationalGroup,
        SyntheticKind::Crossing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Linear => "linear",
            SyntheticKind::TurnWithGaze => "turn_with_gaze",
            SyntheticKind::ConversationalGroup => "conversational_group",
            SyntheticKind::Crossing => "crossing",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown synthetic scene kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub agents: usize,
    pub frames: usize,
    /// Seconds between frames.
    pub timestep: f64,
    /// Walking speed range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Std of Gaussian noise added to every position, meters.
    pub jitter: f64,
    /// Side of the square in which walkers start, meters.
    pub area: f64,
    /// Steps by which the head leads the body (`turn_with_gaze`).
    pub gaze_lead: usize,
    /// First motion step that follows the new heading, drawn from this
    /// inclusive range (`turn_with_gaze`).
    pub turn_step_min: usize,
    pub turn_step_max: usize,
    /// Magnitude range of the turn, degrees (`turn_with_gaze`).
    pub turn_deg_min: f64,
    pub turn_deg_max: f64,
    /// Peak head swing around the group centre, degrees (`conversational_group`).
    pub pan_amplitude_deg: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            agents: 3,
            frames: 20,
            timestep: 0.4,
            speed_min: 0.8,
            speed_max: 1.6,
            jitter: 0.0,
            area: 10.0,
            gaze_lead: 3,
            turn_step_min: 8,
            turn_step_max: 10,
            turn_deg_min: 45.0,
            turn_deg_max: 90.0,
            pan_amplitude_deg: 60.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.agents == 0 || self.frames == 0 {
            return bad("need at least one agent and one frame".into());
        }
        if !(self.timestep > 0.0) {
            return bad(format!("timestep must be positive, got {}", self.timestep));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad(format!(
                "speed range [{}, {}] is invalid",
                self.speed_min, self.speed_max
            ));
        }
        if !(self.jitter >= 0.0) || !(self.area > 0.0) {
            return bad("jitter must be >= 0 and area > 0".into());
        }
        if self.turn_step_min > self.turn_step_max || self.turn_deg_min > self.turn_deg_max {
            return bad("turn ranges must satisfy min <= max".into());
        }
        Ok(())
    }
}

/// Synthetic scene of `params.agents` pedestrians present on every frame,
/// ids starting at 1. Deterministic given the generator state.
pub fn generate_synthetic(kind: SyntheticKind, params: &SyntheticParams, rng: &mut RngState) -> Result<Scene> {
    params.validate()?;
    let mut tracks = match kind {
        SyntheticKind::Linear => linear(params, rng),
        SyntheticKind::TurnWithGaze => turn_with_gaze(params, rng),
        SyntheticKind::ConversationalGroup => conversational_group(params, rng),
        SyntheticKind::Crossing => crossing(params, rng),
    };
    if params.jitter > 0.0 {
        for t in &mut tracks {
            for s in &mut t.states {
                s.position[0] += params.jitter * rng.std_normal();
                s.position[1] += params.jitter * rng.std_normal();
            }
        }
    }
    Ok(Scene::new(params.timestep, tracks))
}

fn track(agent: usize, states: Vec<AgentState>) -> AgentTrack {
    AgentTrack {
        agent_id: agent as u32 + 1,
        start_frame: 0,
        states,
    }
}

fn walk(start: [f64; 2], step_len: f64, heading: impl Fn(usize) -> f64, pan: impl Fn(usize) -> f64, frames: usize) -> Vec<AgentState> {
    let mut pos = start;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        out.push(AgentState::new(pos, pan(t)));
        let h = heading(t);
        pos = [pos[0] + step_len * h.cos(), pos[1] + step_len * h.sin()];
    }
    out
}

fn linear(p: &SyntheticParams, rng: &mut RngState) -> Vec<AgentTrack> {
    (0..p.agents)
        .map(|i| {
            let start = [rng.uniform(0.0, p.area), rng.uniform(0.0, p.area)];
            let heading = rng.uniform(0.0, TAU);
            let speed = rng.uniform(p.speed_min, p.speed_max);
            track(i, walk(start, speed * p.timestep, |_| heading, |_| heading, p.frames))
        })
        .collect()
}

fn turn_with_gaze(p: &SyntheticParams, rng: &mut RngState) -> Vec<AgentTrack> {
    (0..p.agents)
        .map(|i| {
            let start = [rng.uniform(0.0, p.area), rng.uniform(0.0, p.area)];
            let before = rng.uniform(0.0, TAU);
            let speed = rng.uniform(p.speed_min, p.speed_max);
            let turn_at = p.turn_step_min + rng.index(p.turn_step_max - p.turn_step_min + 1);
            let side = if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            let after = before + side * rng.uniform(p.turn_deg_min, p.turn_deg_max).to_radians();
            // direction of the step x[s+1] - x[s]
            let heading = move |s: usize| if s < turn_at { before } else { after };
            let lead = p.gaze_lead;
            track(i, walk(start, speed * p.timestep, heading, move |t| heading(t + lead), p.frames))
        })
        .collect()
}

fn conversational_group(p: &SyntheticParams, rng: &mut RngState) -> Vec<AgentTrack> {
    let centre = [rng.uniform(0.0, p.area), rng.uniform(0.0, p.area)];
    let radius = 0.8;
    let sway = 0.03;
    let amplitude = p.pan_amplitude_deg.to_radians();
    (0..p.agents)
        .map(|i| {
            let angle = TAU * i as f64 / p.agents as f64 + rng.uniform(-0.2, 0.2);
            let base = [centre[0] + radius * angle.cos(), centre[1] + radius * angle.sin()];
            let sway_phase = rng.uniform(0.0, TAU);
            let pan_phase = rng.uniform(0.0, TAU);
            let pan_period = rng.uniform(6.0, 12.0);
            let facing = angle + PI;
            let states = (0..p.frames)
                .map(|t| {
                    let tf = t as f64;
                    let s = sway * (TAU * tf / 10.0 + sway_phase).sin();
                    let pos = [base[0] + s * angle.cos(), base[1] + s * angle.sin()];
                    let pan = facing + amplitude * (TAU * tf / pan_period + pan_phase).sin();
                    AgentState::new(pos, pan)
                })
                .collect();
            track(i, states)
        })
        .collect()
}

fn crossing(p: &SyntheticParams, rng: &mut RngState) -> Vec<AgentTrack> {
    let centre = [p.area / 2.0, p.area / 2.0];
    (0..p.agents)
        .map(|i| {
            let speed = rng.uniform(p.speed_min, p.speed_max);
            let step = speed * p.timestep;
            // each walker reaches the shared region at a different frame
            let arrival = rng.uniform(0.25, 0.75) * p.frames as f64;
            let lateral = rng.uniform(-1.0, 1.0);
            let (heading, start) = if i % 2 == 0 {
                (0.0, [centre[0] - arrival * step, centre[1] + lateral])
            } else {
                (PI / 2.0, [centre[0] + lateral, centre[1] - arrival * step])
            };
            track(i, walk(start, step, |_| heading, |_| heading, p.frames))
        })
        .collect()
}
