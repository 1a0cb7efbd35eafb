//! Tracklet and vislet geometry, the view-frustum test, and social pooling.
//!
//! Angles are radians, counterclockwise from the world `+x` axis. Positions
//! are meters in a fixed world frame.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::AgentId;

pub type Point = [f64; 2];

/// Wraps an angle into `[0, 2pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid rounds tiny negative inputs up to exactly 2pi
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Absolute angular difference, wrapped into `[0, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = normalize_angle(a - b);
    if d > PI {
        TAU - d
    } else {
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Point,
    pan: f64,
}

impl AgentState {
    pub fn new(position: Point, pan: f64) -> Self {
        Self {
            position,
            pan: normalize_angle(pan),
        }
    }

    /// Head pan in `[0, 2pi)`.
    pub fn pan(&self) -> f64 {
        self.pan
    }

    pub fn with_pan(self, pan: f64) -> Self {
        Self::new(self.position, pan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisletPoint {
    pub anchor: Point,
}

impl VisletPoint {
    /// Anchor relative to the head position.
    pub fn offset_from(&self, position: Point) -> Point {
        [self.anchor[0] - position[0], self.anchor[1] - position[1]]
    }
}

/// Anchor point at distance `r` along the head orientation.
pub fn vislet_anchor(state: &AgentState, r: f64) -> VisletPoint {
    let (s, c) = state.pan.sin_cos();
    VisletPoint {
        anchor: [state.position[0] + r * c, state.position[1] + r * s],
    }
}

/// Pan angle pointing from `position` to `anchor`; `None` when they coincide.
pub fn pan_from_anchor(position: Point, anchor: Point) -> Option<f64> {
    let dx = anchor[0] - position[0];
    let dy = anchor[1] - position[1];
    if dx == 0.0 && dy == 0.0 {
        None
    } else {
        Some(normalize_angle(dy.atan2(dx)))
    }
}

/// Circular sector in front of the head: full aperture and radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrustumSpec {
    aperture: f64,
    depth: f64,
}

impl FrustumSpec {
    /// `aperture` in radians, `0 < aperture <= 2pi`; `depth` in meters.
    ///
    /// A full `2pi` aperture is accepted so an isotropic disc can be expressed.
    pub fn new(aperture: f64, depth: f64) -> Result<Self> {
        if !(aperture > 0.0 && aperture <= TAU) {
            return Err(Error::Range(format!(
                "frustum aperture must be in (0, 2pi], got {aperture}"
            )));
        }
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::Range(format!("frustum depth must be positive, got {depth}")));
        }
        Ok(Self { aperture, depth })
    }

    pub fn from_degrees(aperture_deg: f64, depth: f64) -> Result<Self> {
        Self::new(aperture_deg.to_radians(), depth)
    }

    pub fn aperture(&self) -> f64 {
        self.aperture
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }
}

/// True iff `other` lies within the observer's view frustum. The observer's
/// own position is never inside.
pub fn in_frustum(observer: &AgentState, other: Point, spec: &FrustumSpec) -> bool {
    let dx = other[0] - observer.position[0];
    let dy = other[1] - observer.position[1];
    let dist = dx.hypot(dy);
    if dist == 0.0 || dist > spec.depth {
        return false;
    }
    angle_diff(dy.atan2(dx), observer.pan) <= spec.aperture / 2.0
}

/// Square of side `side_length` centred on the observer, split into
/// `cells_per_side^2` cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingGrid {
    cells_per_side: usize,
    side_length: f64,
}

impl PoolingGrid {
    pub fn new(cells_per_side: usize, side_length: f64) -> Result<Self> {
        if cells_per_side == 0 {
            return Err(Error::Range("pooling grid needs at least one cell".into()));
        }
        if !(side_length > 0.0 && side_length.is_finite()) {
            return Err(Error::Range(format!(
                "pooling grid side must be positive, got {side_length}"
            )));
        }
        Ok(Self {
            cells_per_side,
            side_length,
        })
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_side * self.cells_per_side
    }

    /// Cell `(m, n)` for a displacement relative to the observer, `m` along x.
    ///
    /// The covered region is `[-s/2, s/2)^2`; a point on an interior cell
    /// boundary goes to the higher-index cell and anything outside (including
    /// the `+s/2` edges) is dropped.
    pub fn cell_of(&self, rel: Point) -> Option<(usize, usize)> {
        let half = self.side_length / 2.0;
        let width = self.side_length / self.cells_per_side as f64;
        let axis = |v: f64| -> Option<usize> {
            if !(v >= -half && v < half) {
                return None;
            }
            let k = ((v + half) / width).floor() as usize;
            Some(k.min(self.cells_per_side - 1))
        };
        Some((axis(rel[0])?, axis(rel[1])?))
    }

    /// Row-major flat index of cell `(m, n)`.
    pub fn flat(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.cells_per_side + cell.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Neighbours inside the view frustum.
    Frustum,
    /// Every neighbour inside the grid, regardless of gaze.
    All,
    /// No pooling; the social tensor is always zero.
    None,
}

/// `(flat cell, agent index)` for every agent that contributes to the
/// observer's social tensor, in ascending agent index. `None` entries are
/// agents absent at this step.
pub fn pooling_assignments(
    observer: usize,
    states: &[Option<AgentState>],
    grid: &PoolingGrid,
    frustum: &FrustumSpec,
    mode: PoolingMode,
) -> Vec<(usize, usize)> {
    let Some(obs) = states.get(observer).copied().flatten() else {
        return Vec::new();
    };
    if mode == PoolingMode::None {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (j, other) in states.iter().enumerate() {
        let Some(other) = other else { continue };
        if j == observer {
            continue;
        }
        if mode == PoolingMode::Frustum && !in_frustum(&obs, other.position, frustum) {
            continue;
        }
        let rel = [
            other.position[0] - obs.position[0],
            other.position[1] - obs.position[1],
        ];
        if let Some(cell) = grid.cell_of(rel) {
            out.push((grid.flat(cell), j));
        }
    }
    out
}

/// Dense `N_o x N_o x D` pooled hidden-state grid, row-major in `(m, n, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialTensor {
    cells_per_side: usize,
    hidden_size: usize,
    values: Vec<f64>,
}

impl SocialTensor {
    pub fn zeros(cells_per_side: usize, hidden_size: usize) -> Self {
        Self {
            cells_per_side,
            hidden_size,
            values: vec![0.0; cells_per_side * cells_per_side * hidden_size],
        }
    }

    pub fn cell(&self, m: usize, n: usize) -> &[f64] {
        let start = (m * self.cells_per_side + n) * self.hidden_size;
        &self.values[start..start + self.hidden_size]
    }

    /// Flattened values in the order the social embedding consumes them.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Social tensor of `observer`: each cell holds the sum of the hidden states of
/// the eligible agents that fall in it.
pub fn pool_social_tensor(
    observer: AgentId,
    agents: &[(AgentId, AgentState)],
    hidden_states: &BTreeMap<AgentId, Vec<f64>>,
    hidden_size: usize,
    grid: &PoolingGrid,
    frustum: &FrustumSpec,
    mode: PoolingMode,
) -> Result<SocialTensor> {
    let obs_idx = agents
        .iter()
        .position(|(id, _)| *id == observer)
        .ok_or_else(|| Error::InvalidInput(format!("observer {observer} not in the agent list")))?;
    let states: Vec<Option<AgentState>> = agents.iter().map(|(_, s)| Some(*s)).collect();
    let mut tensor = SocialTensor::zeros(grid.cells_per_side(), hidden_size);
    for (cell, j) in pooling_assignments(obs_idx, &states, grid, frustum, mode) {
        let id = agents[j].0;
        let h = hidden_states
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("no hidden state for agent {id}")))?;
        if h.len() != hidden_size {
            return Err(Error::shape(
                "pool_social_tensor",
                format!("hidden state of agent {id} has length {}, expected {hidden_size}", h.len()),
            ));
        }
        let start = cell * hidden_size;
        for (t, v) in tensor.values[start..start + hidden_size].iter_mut().zip(h) {
            *t += v;
        }
    }
    Ok(tensor)
}
