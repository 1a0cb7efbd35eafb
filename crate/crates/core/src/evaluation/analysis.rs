//! How head pan relates to walking direction.
//!
//! For every step of a track, `alpha` is the head pan and `beta` the
//! direction of the step to the next frame. Their wrapped difference is the
//! discrepancy `omega`.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, normalize_angle};
use crate::AgentId;

/// Below this speed (m/s) a step direction is considered meaningless.
pub const DEFAULT_SPEED_FLOOR: f64 = 0.45;
/// Moving-average length applied to exported speed curves.
pub const SMOOTHING_WINDOW: usize = 10;

/// Direction of the resultant of unit vectors, in `[0, 2pi)`. Zero when the
/// resultant vanishes.
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    normalize_angle(s.atan2(c))
}

/// Circular correlation coefficient of paired angle sequences.
///
/// `Ok(None)` when either sequence has no spread around its circular mean,
/// where the coefficient is undefined.
pub fn circular_correlation(alpha: &[f64], beta: &[f64]) -> Result<Option<f64>> {
    if alpha.len() != beta.len() {
        return Err(Error::shape(
            "circular_correlation",
            format!("{} vs {} angles", alpha.len(), beta.len()),
        ));
    }
    if alpha.len() < 2 {
        return Err(Error::InvalidInput("circular correlation needs at least two pairs".into()));
    }
    let (ma, mb) = (circular_mean(alpha), circular_mean(beta));
    let (mut num, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in alpha.iter().zip(beta) {
        let (sa, sb) = ((a - ma).sin(), (b - mb).sin());
        num += sa * sb;
        saa += sa * sa;
        sbb += sb * sb;
    }
    // identical angles leave rounding residue of order 1e-16 per term
    let floor = alpha.len() as f64 * 1e-20;
    if saa <= floor || sbb <= floor {
        return Ok(None);
    }
    Ok(Some((num / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// One step of one track.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSample {
    pub agent_id: AgentId,
    pub frame: usize,
    /// Head pan at the step's start, radians.
    pub alpha: f64,
    /// Direction of the step, radians.
    pub beta: f64,
    /// m/s.
    pub speed: f64,
}

impl MotionSample {
    pub fn omega(&self) -> f64 {
        angle_diff(self.alpha, self.beta)
    }
}

/// Every step of nonzero length in `scene`.
pub fn motion_samples(scene: &Scene) -> Vec<MotionSample> {
    let mut out = Vec::new();
    for t in &scene.tracks {
        for (k, pair) in t.states.windows(2).enumerate() {
            let dx = pair[1].position[0] - pair[0].position[0];
            let dy = pair[1].position[1] - pair[0].position[1];
            let len = dx.hypot(dy);
            if len == 0.0 {
                continue;
            }
            out.push(MotionSample {
                agent_id: t.agent_id,
                frame: t.start_frame + k,
                alpha: pair[0].pan(),
                beta: normalize_angle(dy.atan2(dx)),
                speed: len / scene.timestep,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackDiscrepancy {
    pub agent_id: AgentId,
    pub mean_omega_deg: f64,
    /// m/s, over the retained steps.
    pub mean_speed: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscrepancyProfile {
    /// Ascending by mean discrepancy.
    pub tracks: Vec<TrackDiscrepancy>,
    /// Tracks with no step above the speed floor.
    pub excluded: Vec<AgentId>,
    /// Over every retained step; `None` if undefined or fewer than two steps.
    pub correlation: Option<f64>,
}

/// Per-track mean discrepancy and speed, ignoring steps slower than
/// `speed_floor`.
pub fn discrepancy_profile(scene: &Scene, speed_floor: f64) -> DiscrepancyProfile {
    let samples: Vec<MotionSample> = motion_samples(scene)
        .into_iter()
        .filter(|s| s.speed >= speed_floor)
        .collect();
    let mut tracks = Vec::new();
    let mut excluded = Vec::new();
    for t in &scene.tracks {
        let mine: Vec<&MotionSample> = samples.iter().filter(|s| s.agent_id == t.agent_id).collect();
        if mine.is_empty() {
            excluded.push(t.agent_id);
            continue;
        }
        let n = mine.len() as f64;
        tracks.push(TrackDiscrepancy {
            agent_id: t.agent_id,
            mean_omega_deg: mine.iter().map(|s| s.omega()).sum::<f64>().to_degrees() / n,
            mean_speed: mine.iter().map(|s| s.speed).sum::<f64>() / n,
            steps: mine.len(),
        });
    }
    tracks.sort_by(|a, b| {
        a.mean_omega_deg
            .partial_cmp(&b.mean_omega_deg)
            .unwrap_or(Ordering::Equal)
            .then(a.agent_id.cmp(&b.agent_id))
    });
    let correlation = if samples.len() >= 2 {
        let alpha: Vec<f64> = samples.iter().map(|s| s.alpha).collect();
        let beta: Vec<f64> = samples.iter().map(|s| s.beta).collect();
        circular_correlation(&alpha, &beta).ok().flatten()
    } else {
        None
    };
    DiscrepancyProfile {
        tracks,
        excluded,
        correlation,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityBin {
    /// Bin centre, m/s.
    pub velocity: f64,
    pub samples: usize,
    pub correlation: Option<f64>,
}

/// Correlation of pan and step direction around `bins` evenly spaced
/// velocities, each pooling the samples within 1% of the velocity range.
pub fn velocity_binned_correlation(samples: &[MotionSample], bins: usize) -> Vec<VelocityBin> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().map(|s| s.speed).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.speed).fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let half = 0.01 * range;
    let centres: BTreeSet<u64> = (0..bins)
        .map(|k| {
            let v = if bins == 1 { lo } else { lo + range * k as f64 / (bins - 1) as f64 };
            v.to_bits()
        })
        .collect();
    let mut out: Vec<VelocityBin> = centres
        .into_iter()
        .map(f64::from_bits)
        .map(|tau| {
            let (alpha, beta): (Vec<f64>, Vec<f64>) = samples
                .iter()
                .filter(|s| (s.speed - tau).abs() <= half)
                .map(|s| (s.alpha, s.beta))
                .unzip();
            let correlation = if alpha.len() >= 2 {
                circular_correlation(&alpha, &beta).ok().flatten()
            } else {
                None
            };
            VelocityBin {
                velocity: tau,
                samples: alpha.len(),
                correlation,
            }
        })
        .collect();
    out.sort_by(|a, b| a.velocity.partial_cmp(&b.velocity).unwrap_or(Ordering::Equal));
    out
}

/// Centred moving average; the window shrinks at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    let before = (window - 1) / 2;
    let after = window / 2;
    (0..values.len())
        .map(|i| {
            let a = i.saturating_sub(before);
            let b = (i + after + 1).min(values.len());
            values[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}
