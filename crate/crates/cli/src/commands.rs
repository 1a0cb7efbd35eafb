use std::cmp::Ordering;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use mxlstm::data::{
    add_pan_noise, downsample, extract_windows, generate_synthetic, parse_annotations, write_annotations_string,
    SyntheticParams, PROTOCOL_FPS,
};
use mxlstm::evaluation::{
    circular_correlation, discrepancy_profile, forecast_windows, motion_samples, moving_average,
    perturb_observed_pans, shorten_window, velocity_binned_correlation, write_metrics_csv, ConstantVelocity,
    Forecaster, MetricReport, MetricRow, ModelForecaster, OracleForecaster, TrackDiscrepancy, SMOOTHING_WINDOW,
};
use mxlstm::network::{read_checkpoint, write_checkpoint, Feedback, ModelVariant};
use mxlstm::training::{gradient_check, train as train_model};
use mxlstm::{RngState, Scene, TrainConfig};

use crate::output::{sibling, Run};
use crate::{AnalyzeArgs, Baseline, DataArgs, EvalArgs, GradcheckArgs, Rollout, SynthArgs, TrainArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_scenes(run: &mut Run, data: &DataArgs) -> Result<Vec<Scene>> {
    data.paths
        .iter()
        .map(|p| {
            let bytes = run.read(p)?;
            let ann = parse_annotations(bytes.as_slice()).with_context(|| format!("parsing {}", p.display()))?;
            downsample(&ann, data.fps, PROTOCOL_FPS).map_err(|e| usage(format!("--fps: {e}")))
        })
        .collect()
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut run = Run::start("synth");
    run.set_seed(a.seed);
    let params = SyntheticParams {
        agents: a.agents,
        frames: a.frames,
        timestep: a.timestep,
        speed_min: a.speed_min,
        speed_max: a.speed_max,
        jitter: a.jitter,
        area: a.area,
        gaze_lead: a.gaze_lead,
        ..SyntheticParams::default()
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    if !(a.pan_noise >= 0.0) {
        return Err(usage("--pan-noise must be >= 0"));
    }
    let root = RngState::new(a.seed);
    let mut scene = generate_synthetic(a.kind, &params, &mut root.derive(0))?;
    if a.pan_noise > 0.0 {
        scene = add_pan_noise(&scene, a.pan_noise, &mut root.derive(1))?;
    }
    if (a.timestep - 1.0 / PROTOCOL_FPS).abs() > 1e-12 {
        log::warn!("frames are {} s apart; read the file back with --fps {}", a.timestep, 1.0 / a.timestep);
    }
    #[derive(Serialize)]
    struct SynthConfig<'a> {
        kind: &'a str,
        params: &'a SyntheticParams,
        pan_noise_deg: f64,
    }
    run.set_config(SynthConfig {
        kind: a.kind.name(),
        params: &params,
        pan_noise_deg: a.pan_noise,
    })?;
    let records = scene.to_annotations();
    run.write(&a.out, write_annotations_string(&records).as_bytes())?;
    run.finish(&a.out)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut run = Run::start("train");
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = run.read(p)?;
            let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", p.display()))?;
            TrainConfig::parse(text).with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    for (key, value) in a.flags.overrides() {
        cfg.set(key, value).map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    run.set_seed(cfg.seed);
    run.set_config(&cfg)?;
    let scenes = load_scenes(&mut run, &a.data)?;

    let outcome = train_model(&scenes, &cfg)?;
    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &outcome.weights)?;
    run.write(&a.out, &ckpt)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["epoch", "loss", "nll", "mean_grad_norm"])?;
    for r in &outcome.history {
        csv.serialize((r.epoch, r.loss, r.nll, r.mean_grad_norm))?;
    }
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| sibling(&a.out, ".loss.csv"));
    run.write(&loss_path, &csv.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    run.finish(&a.out)?;

    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "{} epochs: loss {:.6} -> {:.6}; checkpoint {}",
            outcome.history.len(),
            first.loss,
            last.loss,
            a.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut run = Run::start("eval");
    run.set_seed(a.seed);
    if a.obs == 0 || a.stride == 0 || a.samples == 0 {
        return Err(usage("--obs, --stride and --samples must be at least 1"));
    }
    if a.horizon.iter().any(|&h| h == 0) {
        return Err(usage("--horizon values must be at least 1"));
    }
    if a.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(usage("--sigma values must be finite and >= 0"));
    }
    let weights = match &a.checkpoint {
        Some(p) => {
            let bytes = run.read(p)?;
            Some(read_checkpoint(bytes.as_slice()).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let feedback = match a.rollout {
        Rollout::Mean => Feedback::Mean,
        Rollout::Sample => Feedback::Sample,
    };
    let forecaster: Box<dyn Forecaster + '_> = match (&weights, a.baseline) {
        (Some(w), _) => Box::new(ModelForecaster { weights: w, feedback }),
        (None, Some(Baseline::Oracle)) => Box::new(OracleForecaster),
        (None, Some(Baseline::ConstantVelocity)) => Box::new(ConstantVelocity),
        (None, None) => return Err(usage("give --checkpoint or --baseline")),
    };
    let scenes = load_scenes(&mut run, &a.data)?;

    #[derive(Serialize)]
    struct EvalConfig<'a> {
        forecaster: String,
        model: Option<&'a mxlstm::ModelConfig>,
        obs: usize,
        horizons: &'a [usize],
        sigmas_deg: &'a [f64],
        rollout: &'static str,
        samples: usize,
        stride: usize,
        fps: f64,
    }
    let stochastic = matches!(a.rollout, Rollout::Sample) && weights.is_some();
    run.set_config(EvalConfig {
        forecaster: forecaster.name(),
        model: weights.as_ref().map(|w| w.config()),
        obs: a.obs,
        horizons: &a.horizon,
        sigmas_deg: &a.sigma,
        rollout: if stochastic { "sample" } else { "mean" },
        samples: if stochastic { a.samples } else { 1 },
        stride: a.stride,
        fps: a.data.fps,
    })?;

    let max_h = *a.horizon.iter().max().expect("clap default");
    let mut windows = Vec::new();
    for s in &scenes {
        windows.extend(extract_windows(s, a.obs, max_h, a.stride)?);
    }
    if windows.is_empty() {
        bail!(
            "no window of {} observed + {max_h} predicted frames has a fully present agent; \
             the data is too short for the requested horizon",
            a.obs
        );
    }

    let name = forecaster.name();
    let noise = RngState::new(a.seed).derive(0);
    let seeds: Vec<u64> = if stochastic {
        (0..a.samples as u64).map(|k| a.seed.wrapping_add(k)).collect()
    } else {
        vec![a.seed]
    };
    let mut rows = Vec::new();
    println!("{:>8} {:>8} {:>6} {:>10} {:>10} {:>10}", "horizon", "sigma", "seed", "mad", "fad", "e_alpha");
    for &sigma in &a.sigma {
        let noisy = windows
            .iter()
            .enumerate()
            .map(|(i, w)| perturb_observed_pans(w, sigma, &mut noise.derive(i as u64)))
            .collect::<mxlstm::Result<Vec<_>>>()?;
        for &h in &a.horizon {
            let cut: Vec<_> = noisy.iter().map(|w| shorten_window(w, h)).collect();
            let (mut mads, mut fads) = (Vec::new(), Vec::new());
            for &seed in &seeds {
                let rep = MetricReport::from_results(&forecast_windows(
                    forecaster.as_ref(),
                    &cut,
                    &RngState::new(seed).derive(1),
                )?)?;
                println!(
                    "{h:>8} {sigma:>8} {seed:>6} {:>10.5} {:>10.5} {:>10.3}",
                    rep.mad, rep.fad, rep.e_alpha_deg
                );
                rows.push(MetricRow::new("mad", &name, h, sigma, seed, rep.mad));
                rows.push(MetricRow::new("fad", &name, h, sigma, seed, rep.fad));
                rows.push(MetricRow::new("e_alpha", &name, h, sigma, seed, rep.e_alpha_deg));
                rows.push(MetricRow::new("agents", &name, h, sigma, seed, rep.agents as f64));
                mads.push(rep.mad);
                fads.push(rep.fad);
            }
            if seeds.len() > 1 {
                let (m, s) = mean_std(&mads);
                rows.push(MetricRow::new("mad_mean", &name, h, sigma, a.seed, m));
                rows.push(MetricRow::new("mad_std", &name, h, sigma, a.seed, s));
                let (m, s) = mean_std(&fads);
                rows.push(MetricRow::new("fad_mean", &name, h, sigma, a.seed, m));
                rows.push(MetricRow::new("fad_std", &name, h, sigma, a.seed, s));
            }
        }
    }
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    run.write(&a.out, &buf)?;
    run.finish(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AnalysisRow {
    record: &'static str,
    scene: Option<usize>,
    agent_id: Option<u32>,
    rank: Option<usize>,
    omega_deg: Option<f64>,
    speed: Option<f64>,
    speed_smoothed: Option<f64>,
    velocity: Option<f64>,
    samples: usize,
    correlation: Option<f64>,
}

impl AnalysisRow {
    fn empty(record: &'static str) -> Self {
        Self {
            record,
            scene: None,
            agent_id: None,
            rank: None,
            omega_deg: None,
            speed: None,
            speed_smoothed: None,
            velocity: None,
            samples: 0,
            correlation: None,
        }
    }
}

pub fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let mut run = Run::start("analyze");
    if !(a.speed_floor >= 0.0) {
        return Err(usage("--speed-floor must be >= 0"));
    }
    #[derive(Serialize)]
    struct AnalyzeConfig {
        speed_floor: f64,
        bins: usize,
        smoothing_window: usize,
        fps: f64,
    }
    run.set_config(AnalyzeConfig {
        speed_floor: a.speed_floor,
        bins: a.bins,
        smoothing_window: SMOOTHING_WINDOW,
        fps: a.data.fps,
    })?;
    let scenes = load_scenes(&mut run, &a.data)?;

    let mut tracks: Vec<(usize, TrackDiscrepancy)> = Vec::new();
    let mut samples = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        tracks.extend(discrepancy_profile(s, a.speed_floor).tracks.into_iter().map(|t| (i, t)));
        samples.extend(motion_samples(s));
    }
    tracks.sort_by(|(sa, a), (sb, b)| {
        a.mean_omega_deg
            .partial_cmp(&b.mean_omega_deg)
            .unwrap_or(Ordering::Equal)
            .then(sa.cmp(sb))
            .then(a.agent_id.cmp(&b.agent_id))
    });
    let moving: Vec<_> = samples.iter().filter(|s| s.speed >= a.speed_floor).collect();
    let overall = if moving.len() >= 2 {
        let alpha: Vec<f64> = moving.iter().map(|s| s.alpha).collect();
        let beta: Vec<f64> = moving.iter().map(|s| s.beta).collect();
        circular_correlation(&alpha, &beta)?
    } else {
        None
    };

    let mut rows = vec![AnalysisRow {
        samples: moving.len(),
        correlation: overall,
        ..AnalysisRow::empty("overall")
    }];
    let smoothed = moving_average(&tracks.iter().map(|(_, t)| t.mean_speed).collect::<Vec<_>>(), SMOOTHING_WINDOW);
    for (rank, ((scene, t), sm)) in tracks.iter().zip(smoothed).enumerate() {
        rows.push(AnalysisRow {
            scene: Some(*scene),
            agent_id: Some(t.agent_id),
            rank: Some(rank),
            omega_deg: Some(t.mean_omega_deg),
            speed: Some(t.mean_speed),
            speed_smoothed: Some(sm),
            samples: t.steps,
            ..AnalysisRow::empty("track")
        });
    }
    for b in velocity_binned_correlation(&samples, a.bins) {
        rows.push(AnalysisRow {
            velocity: Some(b.velocity),
            samples: b.samples,
            correlation: b.correlation,
            ..AnalysisRow::empty("velocity_bin")
        });
    }
    if tracks.is_empty() {
        eprintln!(
            "notice: no track moves faster than {} m/s; the discrepancy profile is empty",
            a.speed_floor
        );
    }
    match overall {
        Some(r) => println!("{} tracks, circular correlation {r:.4}", tracks.len()),
        None => println!("{} tracks, circular correlation undefined", tracks.len()),
    }

    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv.serialize(r)?;
    }
    run.write(&a.out, &csv.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    run.finish(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let variants: Vec<ModelVariant> = if a.variant == "all" {
        ModelVariant::ALL.to_vec()
    } else {
        vec![a.variant.parse().map_err(|e: mxlstm::Error| usage(e.to_string()))?]
    };
    if !(a.tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let mut run = Run::start("gradcheck");
    run.set_seed(a.seed);
    let mut reports = Vec::new();
    for v in variants {
        let r = gradient_check(v, a.seed, a.tolerance)?;
        println!("{r}");
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct GradcheckConfig {
            tolerance: f64,
        }
        run.set_config(GradcheckConfig { tolerance: a.tolerance })?;
        let mut json = serde_json::to_vec_pretty(&reports)?;
        json.push(b'\n');
        run.write(out, &json)?;
        run.finish(out)?;
    }
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed at tolerance {:e}", a.tolerance);
        Ok(ExitCode::from(1))
    }
}
