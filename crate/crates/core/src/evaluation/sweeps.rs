use std::collections::BTreeSet;

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{forecast_windows, Forecaster, MetricReport};
use crate::data::{extract_windows, Scene, Window};
use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonRow {
    pub horizon: usize,
    pub mad: f64,
    pub fad: f64,
    pub e_alpha_deg: f64,
    pub agents: usize,
}

/// Evaluates every feasible horizon on the same observation windows: the
/// windows are cut for the longest feasible horizon and shortened for the
/// others, and the scored agents are those present throughout the longest
/// one. Horizons no scene is long enough for are returned in the second
/// list.
pub fn horizon_sweep(
    forecaster: &dyn Forecaster,
    scenes: &[Scene],
    obs_len: usize,
    horizons: &[usize],
    stride: usize,
    rng: &RngState,
) -> Result<(Vec<HorizonRow>, Vec<usize>)> {
    let longest = scenes.iter().map(Scene::num_frames).max().unwrap_or(0);
    let (feasible, skipped): (Vec<usize>, Vec<usize>) =
        horizons.iter().partition(|&&h| h >= 1 && obs_len + h <= longest);
    for h in &skipped {
        log::warn!("horizon {h} skipped: no scene has {} frames", obs_len + h);
    }
    let Some(&max_h) = feasible.iter().max() else {
        return Ok((Vec::new(), skipped));
    };
    let mut windows = Vec::new();
    for s in scenes {
        windows.extend(extract_windows(s, obs_len, max_h, stride)?);
    }
    let mut rows = Vec::with_capacity(feasible.len());
    for h in feasible {
        let cut: Vec<Window> = windows.iter().map(|w| shorten_window(w, h)).collect();
        let rep = MetricReport::from_results(&forecast_windows(forecaster, &cut, rng)?)?;
        rows.push(HorizonRow {
            horizon: h,
            mad: rep.mad,
            fad: rep.fad,
            e_alpha_deg: rep.e_alpha_deg,
            agents: rep.agents,
        });
    }
    Ok((rows, skipped))
}

/// `w` cut to `pred_len` prediction frames, scoring only the agents that
/// were scored in `w`.
pub fn shorten_window(w: &Window, pred_len: usize) -> Window {
    let scored: BTreeSet<_> = w.full_agents().map(|a| a.agent_id).collect();
    let mut cut = w.truncated(pred_len);
    for a in &mut cut.agents {
        a.full &= scored.contains(&a.agent_id);
    }
    cut
}

/// Adds `N(0, sigma^2)` degrees to the pans of the observation frames only.
pub fn perturb_observed_pans(window: &Window, sigma_deg: f64, rng: &mut RngState) -> Result<Window> {
    if !(sigma_deg >= 0.0 && sigma_deg.is_finite()) {
        return Err(Error::InvalidInput(format!("noise sigma must be >= 0, got {sigma_deg}")));
    }
    let sigma = sigma_deg.to_radians();
    let mut out = window.clone();
    for a in &mut out.agents {
        for s in a.states[..window.obs_len].iter_mut().flatten() {
            *s = s.with_pan(s.pan() + sigma * rng.std_normal());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub sigma_deg: f64,
    pub mad: f64,
    pub fad: f64,
    pub e_alpha_deg: f64,
}

/// Metrics under observation-pan noise of each `sigma`. Every sigma reuses
/// the same standard-normal draws, scaled, so `sigma = 0` reproduces the
/// clean evaluation exactly.
pub fn noise_sweep(
    forecaster: &dyn Forecaster,
    windows: &[Window],
    sigmas_deg: &[f64],
    rng: &RngState,
) -> Result<Vec<NoiseRow>> {
    let noise = rng.derive(0);
    let rollout = rng.derive(1);
    sigmas_deg
        .iter()
        .map(|&sigma| {
            let noisy = windows
                .iter()
                .enumerate()
                .map(|(i, w)| perturb_observed_pans(w, sigma, &mut noise.derive(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let rep = MetricReport::from_results(&forecast_windows(forecaster, &noisy, &rollout)?)?;
            Ok(NoiseRow {
                sigma_deg: sigma,
                mad: rep.mad,
                fad: rep.fad,
                e_alpha_deg: rep.e_alpha_deg,
            })
        })
        .collect()
}

/// Least-squares slope of `y` on `x` with one-sided t-test p-values.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendTest {
    pub slope: f64,
    pub intercept: f64,
    pub t_stat: f64,
    pub dof: usize,
    /// P-value against the alternative `slope > 0`.
    pub p_increasing: f64,
    /// P-value against the alternative `slope < 0`.
    pub p_decreasing: f64,
}

pub fn trend_test(points: &[(f64, f64)]) -> Result<TrendTest> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InvalidInput("a trend test needs at least three points".into()));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidInput("trend test needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let dof = n - 2;
    let se = (sse / dof as f64 / sxx).sqrt();
    let t_stat = if se > 0.0 {
        slope / se
    } else if slope == 0.0 {
        0.0
    } else {
        slope.signum() * f64::INFINITY
    };
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let cdf = dist.cdf(t_stat);
    Ok(TrendTest {
        slope,
        intercept,
        t_stat,
        dof,
        p_increasing: 1.0 - cdf,
        p_decreasing: cdf,
    })
}
