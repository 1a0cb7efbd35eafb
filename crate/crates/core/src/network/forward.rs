//! Joint rollout of every agent in a window, recorded on one tape.
//!
//! Step `k` consumes frame `k` and predicts frame `k + 1`, so a window of `L`
//! frames takes `L - 1` steps. Pooling at step `k` places each neighbour by
//! its position at frame `k` and contributes its hidden state from step
//! `k - 1`. An agent gets a fresh zero state on the first frame it appears.

use std::collections::BTreeMap;

use super::gaussian::{BdGaussianPair, Bivariate, BivariateKernel, Gaussian4, Gaussian4Kernel, LogCholParams};
use super::layers::{embed, lstm_step, project_output, LstmState, LstmWeights};
use super::{ModelVariant, ModelWeights};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::geometry::{pan_from_anchor, pooling_assignments, vislet_anchor, AgentState, Point};
use crate::tensor::{GradTape, RngState, Var};
use crate::AgentId;

/// How a prediction is turned into the next input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feedback {
    /// Distribution mean; deterministic.
    Mean,
    /// A draw from the predicted distribution.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Ground-truth inputs wherever they exist.
    TeacherForced,
    /// Ground truth for the observation frames, then the model's own
    /// predictions. Agents not present for the whole window only take part
    /// during observation.
    Autoregressive(Feedback),
}

/// Predicted distribution over the next frame, in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutput {
    Joint(Gaussian4),
    BlockDiagonal(BdGaussianPair),
    Position(Bivariate),
}

impl StepOutput {
    fn from_raw(variant: ModelVariant, raw: &[f64], base: Point) -> Result<Self> {
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("network output {i}"),
            });
        }
        Ok(match variant {
            ModelVariant::BlockDiagonal => {
                let mut pair = BdGaussianPair::from_raw(raw);
                shift(&mut pair.position.mu, base);
                shift(&mut pair.anchor.mu, base);
                StepOutput::BlockDiagonal(pair)
            }
            ModelVariant::Vanilla => {
                let mut b = Bivariate::from_raw(raw);
                shift(&mut b.mu, base);
                StepOutput::Position(b)
            }
            _ => StepOutput::Joint(Gaussian4 {
                mu: [raw[0] + base[0], raw[1] + base[1], raw[2] + base[0], raw[3] + base[1]],
                theta: LogCholParams::from_slice(&raw[4..14])?,
            }),
        })
    }

    pub fn mean_position(&self) -> Point {
        match self {
            StepOutput::Joint(g) => [g.mu[0], g.mu[1]],
            StepOutput::BlockDiagonal(p) => p.position.mu,
            StepOutput::Position(b) => b.mu,
        }
    }

    /// `None` for the position-only head.
    pub fn mean_anchor(&self) -> Option<Point> {
        match self {
            StepOutput::Joint(g) => Some([g.mu[2], g.mu[3]]),
            StepOutput::BlockDiagonal(p) => Some(p.anchor.mu),
            StepOutput::Position(_) => None,
        }
    }

    pub fn sample(&self, rng: &mut RngState) -> (Point, Option<Point>) {
        match self {
            StepOutput::Joint(g) => {
                let s = g.sample(rng);
                ([s[0], s[1]], Some([s[2], s[3]]))
            }
            StepOutput::BlockDiagonal(p) => (p.position.sample(rng), Some(p.anchor.sample(rng))),
            StepOutput::Position(b) => (b.sample(rng), None),
        }
    }
}

fn shift(mu: &mut [f64; 2], base: Point) {
    mu[0] += base[0];
    mu[1] += base[1];
}

#[derive(Clone, Debug)]
pub struct AgentStep {
    /// Window frame this step predicts.
    pub frame: usize,
    /// Network output before squashing, relative to `base`.
    pub raw: Var,
    /// Position the prediction is relative to (the input position).
    pub base: Point,
    pub output: StepOutput,
}

#[derive(Clone, Debug)]
pub struct AgentRollout {
    pub agent_id: AgentId,
    pub full: bool,
    pub steps: Vec<AgentStep>,
    /// Per window frame, the predicted state (mean or sample, following the
    /// rollout mode); `None` where no prediction was made.
    pub predicted: Vec<Option<AgentState>>,
}

impl AgentRollout {
    pub fn step_for_frame(&self, frame: usize) -> Option<&AgentStep> {
        self.steps.iter().find(|s| s.frame == frame)
    }
}

pub struct ForwardPass<'p> {
    pub tape: GradTape<'p>,
    pub agents: Vec<AgentRollout>,
    /// The window the network actually consumed (pans already replaced by
    /// walking directions for the pace variant).
    pub inputs: Window,
    variant: ModelVariant,
    anchor_distance: f64,
}

impl ForwardPass<'_> {
    pub fn variant(&self) -> ModelVariant {
        self.variant
    }
}

/// Replaces pans by the direction of the last step. The first frame takes
/// the direction of the first step; a zero-length step keeps the previous
/// direction; an agent that has not moved yet faces 0.
pub fn walking_directions(states: &[Option<AgentState>]) -> Vec<Option<AgentState>> {
    let step_dir = |k: usize| -> Option<f64> {
        let (a, b) = (states.get(k.wrapping_sub(1))?.as_ref()?, states.get(k)?.as_ref()?);
        pan_from_anchor(a.position, b.position)
    };
    let mut out = Vec::with_capacity(states.len());
    let mut current: Option<f64> = None;
    for k in 0..states.len() {
        let Some(s) = states[k] else {
            current = None;
            out.push(None);
            continue;
        };
        let first = k == 0 || states[k - 1].is_none();
        let fresh = if first { step_dir(k + 1) } else { step_dir(k) };
        current = fresh.or(current);
        out.push(Some(s.with_pan(current.unwrap_or(0.0))));
    }
    out
}

struct Slot {
    lstm: LstmState,
    input: AgentState,
}

/// Runs the network over `window`, all agents jointly.
pub fn forward_sequence<'p>(
    weights: &'p ModelWeights,
    window: &Window,
    mode: RolloutMode,
    rng: &mut RngState,
) -> Result<ForwardPass<'p>> {
    let config = weights.config();
    let variant = config.variant;
    let len = window.len();
    if window.agents.is_empty() {
        return Err(Error::Empty { what: "scene" });
    }
    if window.obs_len == 0 {
        return Err(Error::InvalidInput("observation length must be at least 1".into()));
    }
    if len < 2 {
        return Err(Error::InvalidInput("a window needs at least two frames".into()));
    }
    if let Some(a) = window.agents.iter().find(|a| a.states.len() != len) {
        return Err(Error::shape(
            "forward_sequence",
            format!("agent {} has {} states for a {len}-frame window", a.agent_id, a.states.len()),
        ));
    }

    let mut inputs = window.clone();
    if variant == ModelVariant::Pace {
        for a in &mut inputs.agents {
            a.states = walking_directions(&a.states);
        }
    }

    let grid = config.grid()?;
    let frustum = config.frustum()?;
    let pooling = variant.pooling_mode();
    let r = config.anchor_distance;
    let d = config.hidden_size;
    let layout = weights.layout().clone();
    let lstm_w = LstmWeights {
        input: layout.lstm_input,
        recurrent: layout.lstm_recurrent,
        bias: layout.lstm_bias,
        hidden: d,
    };

    let n = inputs.agents.len();
    let mut tape = GradTape::new(weights.params());
    let mut rollouts: Vec<AgentRollout> = inputs
        .agents
        .iter()
        .map(|a| AgentRollout {
            agent_id: a.agent_id,
            full: a.full,
            steps: Vec::new(),
            predicted: vec![None; len],
        })
        .collect();
    let mut slots: Vec<Option<Slot>> = (0..n).map(|_| None).collect();

    for k in 0..len - 1 {
        let current: Vec<Option<AgentState>> = (0..n)
            .map(|i| {
                let agent = &inputs.agents[i];
                match mode {
                    RolloutMode::TeacherForced => agent.states[k],
                    RolloutMode::Autoregressive(_) if k < inputs.obs_len => agent.states[k],
                    RolloutMode::Autoregressive(_) if agent.full => rollouts[i].predicted[k],
                    RolloutMode::Autoregressive(_) => None,
                }
            })
            .collect();

        let mut next: Vec<Option<Slot>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            let Some(state) = current[i] else { continue };
            let prev = slots[i].as_ref();
            let disp = match prev {
                Some(p) => vec![state.position[0] - p.input.position[0], state.position[1] - p.input.position[1]],
                None => vec![0.0, 0.0],
            };
            let lstm = match prev {
                Some(p) => p.lstm,
                None => LstmState::zeros(&mut tape, d),
            };

            let x = tape.input(disp);
            let mut parts = vec![embed(&mut tape, layout.embed_x.0, layout.embed_x.1, x)];
            if let Some((w, b)) = layout.embed_a {
                let anchor = vislet_anchor(&state, r).offset_from(state.position);
                let a = tape.input(anchor.to_vec());
                parts.push(embed(&mut tape, w, b, a));
            }
            if let Some((w, b)) = layout.embed_h {
                let mut cells: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
                for (cell, j) in pooling_assignments(i, &current, &grid, &frustum, pooling) {
                    if let Some(nb) = &slots[j] {
                        cells.entry(cell).or_default().push(nb.lstm.h);
                    }
                }
                let blocks: Vec<(usize, Vec<Var>)> = cells.into_iter().collect();
                let pooled = tape.block_sparse_matvec(w, &blocks);
                let pooled = tape.add_param(pooled, b);
                parts.push(tape.relu(pooled));
            }
            let joined = tape.concat(&parts);
            let lstm = lstm_step(&mut tape, &lstm_w, lstm, joined);
            let raw = project_output(&mut tape, layout.output.0, layout.output.1, lstm.h);
            let output = StepOutput::from_raw(variant, tape.value(raw), state.position)?;

            let feedback = match mode {
                RolloutMode::Autoregressive(f) => f,
                RolloutMode::TeacherForced => Feedback::Mean,
            };
            let (pos, anchor) = match feedback {
                Feedback::Mean => (output.mean_position(), output.mean_anchor()),
                Feedback::Sample => output.sample(rng),
            };
            let pan = anchor
                .and_then(|a| pan_from_anchor(pos, a))
                .unwrap_or_else(|| state.pan());
            rollouts[i].predicted[k + 1] = Some(AgentState::new(pos, pan));
            rollouts[i].steps.push(AgentStep {
                frame: k + 1,
                raw,
                base: state.position,
                output,
            });
            next[i] = Some(Slot { lstm, input: state });
        }
        slots = next;
    }

    Ok(ForwardPass {
        tape,
        agents: rollouts,
        inputs,
        variant,
        anchor_distance: r,
    })
}

/// Negative log-likelihood of the ground truth over frames
/// `obs_len .. obs_len + pred_len`, summed over fully present agents, plus
/// `l2_weight` times the squared norm of every weight.
pub fn sequence_loss(pass: &mut ForwardPass<'_>, obs_len: usize, pred_len: usize, l2_weight: f64) -> Result<Var> {
    let total = obs_len + pred_len;
    if obs_len == 0 || pred_len == 0 {
        return Err(Error::InvalidInput("observation and prediction lengths must be at least 1".into()));
    }
    if total > pass.inputs.len() {
        return Err(Error::InvalidInput(format!(
            "loss window of {total} frames exceeds the {}-frame sequence",
            pass.inputs.len()
        )));
    }
    let r = pass.anchor_distance;
    let variant = pass.variant;
    let mut terms = Vec::new();
    for (rollout, truth) in pass.agents.iter().zip(&pass.inputs.agents) {
        if !rollout.full {
            continue;
        }
        for f in obs_len..total {
            let step = rollout
                .step_for_frame(f)
                .ok_or_else(|| Error::InvalidInput(format!("no prediction for frame {f}")))?;
            let gt = truth.states[f].expect("full agents are present on every frame");
            let pos = [gt.position[0] - step.base[0], gt.position[1] - step.base[1]];
            let anchor = vislet_anchor(&gt, r).anchor;
            let anchor = [anchor[0] - step.base[0], anchor[1] - step.base[1]];
            let tape = &mut pass.tape;
            match variant {
                ModelVariant::BlockDiagonal => {
                    terms.push(tape.kernel(step.raw, 0, 5, Box::new(BivariateKernel { target: pos })));
                    terms.push(tape.kernel(step.raw, 5, 5, Box::new(BivariateKernel { target: anchor })));
                }
                ModelVariant::Vanilla => {
                    terms.push(tape.kernel(step.raw, 0, 5, Box::new(BivariateKernel { target: pos })));
                }
                _ => {
                    let target = [pos[0], pos[1], anchor[0], anchor[1]];
                    terms.push(tape.kernel(step.raw, 0, 14, Box::new(Gaussian4Kernel { target })));
                }
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Empty {
            what: "fully observed agents",
        });
    }
    let tape = &mut pass.tape;
    let nll = tape.add_n(&terms);
    if l2_weight == 0.0 {
        return Ok(nll);
    }
    let norms: Vec<Var> = (0..tape.params().len())
        .map(|p| tape.param_squared_norm(crate::tensor::ParamId(p)))
        .collect();
    let norm = tape.add_n(&norms);
    let reg = tape.scale(norm, l2_weight);
    Ok(tape.add(nll, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WindowAgent;
    use crate::network::{gaussian4_nll, ModelConfig};
    use crate::tensor::{grad_of_scalar, DenseMatrix, ParamId};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn small(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            hidden_size: 3,
            embedding_size: 3,
            grid_cells: 4,
            grid_size: 4.0,
            frustum_aperture_deg: 90.0,
            frustum_depth: 2.0,
            anchor_distance: 0.5,
        }
    }

    fn agent(id: AgentId, states: Vec<Option<AgentState>>) -> WindowAgent {
        WindowAgent {
            agent_id: id,
            full: states.iter().all(Option::is_some),
            states,
        }
    }

    fn window(obs: usize, pred: usize, agents: Vec<WindowAgent>) -> Window {
        Window {
            start_frame: 0,
            obs_len: obs,
            pred_len: pred,
            timestep: 0.4,
            agents,
        }
    }

    fn walker(start: Point, step: Point, pan: f64, n: usize) -> Vec<Option<AgentState>> {
        (0..n)
            .map(|k| {
                Some(AgentState::new(
                    [start[0] + step[0] * k as f64, start[1] + step[1] * k as f64],
                    pan + 0.1 * k as f64,
                ))
            })
            .collect()
    }

    /// Two walkers approaching each other, each facing the other.
    fn facing_pair(n: usize) -> Window {
        window(
            4,
            n - 4,
            vec![
                agent(1, walker([0.0, 0.0], [0.2, 0.05], 0.0, n)),
                agent(2, walker([1.5, 0.3], [-0.2, 0.0], PI, n)),
            ],
        )
    }

    fn random_weights(cfg: ModelConfig, seed: u64, scale: f64) -> ModelWeights {
        let mut w = ModelWeights::zeros(cfg).unwrap();
        let mut rng = RngState::new(seed);
        for p in w.params_mut() {
            for v in p.data_mut() {
                *v = rng.uniform(-scale, scale);
            }
        }
        w
    }

    #[test]
    fn zero_weights_predict_the_output_bias() {
        let mut w = ModelWeights::zeros(small(ModelVariant::Individual)).unwrap();
        let bias: Vec<f64> = (0..14).map(|i| 0.01 * i as f64).collect();
        *w.by_name_mut("output.bias").unwrap() = DenseMatrix::column(bias.clone());
        let win = window(2, 2, vec![agent(7, walker([1.0, 2.0], [0.3, 0.0], 0.0, 4))]);
        let pass = forward_sequence(&w, &win, RolloutMode::TeacherForced, &mut RngState::new(0)).unwrap();
        assert_eq!(pass.agents[0].steps.len(), 3);
        for step in &pass.agents[0].steps {
            assert_eq!(pass.tape.value(step.raw), &bias[..]);
            let mean = step.output.mean_position();
            assert!((mean[0] - step.base[0] - bias[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_or_degenerate_windows_are_rejected() {
        let w = ModelWeights::zeros(small(ModelVariant::Full)).unwrap();
        let mut rng = RngState::new(0);
        assert!(matches!(
            forward_sequence(&w, &window(2, 2, vec![]), RolloutMode::TeacherForced, &mut rng),
            Err(Error::Empty { .. })
        ));
        let win = window(0, 4, vec![agent(1, walker([0.0; 2], [0.1, 0.0], 0.0, 4))]);
        assert!(forward_sequence(&w, &win, RolloutMode::TeacherForced, &mut rng).is_err());
    }

    /// Folds the constant contribution of an empty social tensor into the
    /// LSTM bias, giving an individual model with identical outputs.
    fn as_individual(full: &ModelWeights) -> ModelWeights {
        let cfg = ModelConfig {
            variant: ModelVariant::Individual,
            ..full.config().clone()
        };
        let e = cfg.embedding_size;
        let mut ind = ModelWeights::zeros(cfg).unwrap();
        for name in ["embed_x.weight", "embed_x.bias", "embed_a.weight", "embed_a.bias", "lstm.weight_hh"] {
            *ind.by_name_mut(name).unwrap() = full.by_name(name).unwrap().clone();
        }
        for name in ["output.weight", "output.bias"] {
            *ind.by_name_mut(name).unwrap() = full.by_name(name).unwrap().clone();
        }
        let w_ih = full.by_name("lstm.weight_ih").unwrap();
        let e_h: Vec<f64> = full.by_name("embed_h.bias").unwrap().data().iter().map(|v| v.max(0.0)).collect();
        let mut bias = full.by_name("lstm.bias").unwrap().clone();
        let mut new_ih = DenseMatrix::zeros(w_ih.rows(), 2 * e);
        for r in 0..w_ih.rows() {
            new_ih.row_mut(r).copy_from_slice(&w_ih.row(r)[..2 * e]);
            let extra: f64 = w_ih.row(r)[2 * e..].iter().zip(&e_h).map(|(a, b)| a * b).sum();
            bias.set(r, 0, bias.get(r, 0) + extra);
        }
        *ind.by_name_mut("lstm.weight_ih").unwrap() = new_ih;
        *ind.by_name_mut("lstm.bias").unwrap() = bias;
        ind
    }

    fn raw_outputs(pass: &ForwardPass<'_>) -> Vec<Vec<f64>> {
        pass.agents
            .iter()
            .flat_map(|a| a.steps.iter().map(|s| pass.tape.value(s.raw).to_vec()))
            .collect()
    }

    #[test]
    fn agents_outside_each_others_view_match_individual_model() {
        let full = random_weights(small(ModelVariant::Full), 3, 0.5);
        let ind = as_individual(&full);
        // walking side by side 1 m apart, both looking straight ahead
        let n = 6;
        let win = window(
            3,
            3,
            vec![
                agent(1, walker([0.0, 0.0], [0.3, 0.0], 0.0, n)),
                agent(2, walker([0.0, 1.0], [0.3, 0.0], 0.0, n)),
            ],
        );
        for a in &win.agents {
            for s in a.states.iter().flatten() {
                assert!(s.pan() < 0.6, "test walkers must keep looking ahead");
            }
        }
        let mut rng = RngState::new(0);
        let a = forward_sequence(&full, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        let b = forward_sequence(&ind, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        for (x, y) in raw_outputs(&a).iter().zip(raw_outputs(&b)) {
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        // the same pair facing each other does interact
        let c = forward_sequence(&full, &facing_pair(6), RolloutMode::TeacherForced, &mut rng).unwrap();
        let d = forward_sequence(&ind, &facing_pair(6), RolloutMode::TeacherForced, &mut rng).unwrap();
        let differs = raw_outputs(&c)
            .iter()
            .zip(raw_outputs(&d))
            .any(|(x, y)| x.iter().zip(&y).any(|(u, v)| (u - v).abs() > 1e-9));
        assert!(differs);
    }

    #[test]
    fn whole_circle_frustum_matches_no_frustum_variant() {
        let mut cfg = small(ModelVariant::Full);
        cfg.frustum_aperture_deg = 360.0;
        // reaches every corner of the grid
        cfg.frustum_depth = cfg.grid_size;
        let full = random_weights(cfg.clone(), 9, 0.5);
        let nf = ModelWeights::from_named(
            ModelConfig {
                variant: ModelVariant::NoFrustum,
                ..cfg
            },
            full.names().iter().cloned().zip(full.params().iter().cloned()).collect(),
        )
        .unwrap();
        let win = window(
            3,
            3,
            vec![
                agent(1, walker([0.0, 0.0], [0.3, 0.0], 0.0, 6)),
                agent(2, walker([0.2, 0.6], [0.25, 0.0], PI, 6)),
                agent(3, walker([1.0, -0.5], [0.0, 0.2], FRAC_PI_2, 6)),
            ],
        );
        let mut rng = RngState::new(0);
        let a = forward_sequence(&full, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        let b = forward_sequence(&nf, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        assert_eq!(raw_outputs(&a), raw_outputs(&b));
    }

    #[test]
    fn vanilla_matches_individual_without_vislet_embedding() {
        let mut ind = random_weights(small(ModelVariant::Individual), 5, 0.5);
        let e = ind.config().embedding_size;
        ind.by_name_mut("embed_a.weight").unwrap().fill(0.0);
        ind.by_name_mut("embed_a.bias").unwrap().fill(0.0);
        let mut van = ModelWeights::zeros(ModelConfig {
            variant: ModelVariant::Vanilla,
            ..ind.config().clone()
        })
        .unwrap();
        for name in ["embed_x.weight", "embed_x.bias", "lstm.weight_hh", "lstm.bias"] {
            *van.by_name_mut(name).unwrap() = ind.by_name(name).unwrap().clone();
        }
        let ih = ind.by_name("lstm.weight_ih").unwrap().clone();
        let v_ih = van.by_name_mut("lstm.weight_ih").unwrap();
        for r in 0..ih.rows() {
            v_ih.row_mut(r).copy_from_slice(&ih.row(r)[..e]);
        }
        for name in ["output.weight", "output.bias"] {
            let src = ind.by_name(name).unwrap().clone();
            let dst = van.by_name_mut(name).unwrap();
            for r in 0..2 {
                dst.row_mut(r).copy_from_slice(src.row(r));
            }
        }
        let win = facing_pair(7);
        let mode = RolloutMode::Autoregressive(Feedback::Mean);
        let a = forward_sequence(&ind, &win, mode, &mut RngState::new(0)).unwrap();
        let b = forward_sequence(&van, &win, mode, &mut RngState::new(0)).unwrap();
        for (x, y) in a.agents.iter().zip(&b.agents) {
            for (s, t) in x.steps.iter().zip(&y.steps) {
                let (p, q) = (s.output.mean_position(), t.output.mean_position());
                assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_diagonal_loss_equals_joint_loss_with_zero_cross_covariance() {
        let (s1, s2, rho, sa1, sa2, rho_a) = (0.7f64, 1.3f64, 0.4f64, 0.5f64, 0.9f64, -0.6f64);
        let mu = [0.1, -0.2, 0.3, 0.05];
        let mut bd = random_weights(small(ModelVariant::BlockDiagonal), 1, 0.3);
        bd.by_name_mut("output.weight").unwrap().fill(0.0);
        *bd.by_name_mut("output.bias").unwrap() = DenseMatrix::column(vec![
            mu[0],
            mu[1],
            s1.ln(),
            s2.ln(),
            rho.atanh(),
            mu[2],
            mu[3],
            sa1.ln(),
            sa2.ln(),
            rho_a.atanh(),
        ]);
        let mut full = random_weights(small(ModelVariant::Full), 1, 0.3);
        full.by_name_mut("output.weight").unwrap().fill(0.0);
        // upper Cholesky factor of each 2x2 block
        let theta = [
            s1.ln(),
            rho * s2,
            0.0,
            0.0,
            (s2 * (1.0 - rho * rho).sqrt()).ln(),
            0.0,
            0.0,
            sa1.ln(),
            rho_a * sa2,
            (sa2 * (1.0 - rho_a * rho_a).sqrt()).ln(),
        ];
        let mut bias = mu.to_vec();
        bias.extend(theta);
        *full.by_name_mut("output.bias").unwrap() = DenseMatrix::column(bias);
        let win = facing_pair(6);
        let mut rng = RngState::new(0);
        let mut a = forward_sequence(&bd, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        let mut b = forward_sequence(&full, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        let la = sequence_loss(&mut a, 4, 2, 0.0).unwrap();
        let lb = sequence_loss(&mut b, 4, 2, 0.0).unwrap();
        assert!((a.tape.scalar(la) - b.tape.scalar(lb)).abs() < 1e-10);
    }

    #[test]
    fn l2_term_is_isolated() {
        // Two weight sets that differ only in the bias of an embedding unit
        // that never activates: same outputs, different norms.
        let mut w1 = random_weights(small(ModelVariant::Full), 2, 0.4);
        let mut w2 = w1.clone();
        w1.by_name_mut("embed_x.bias").unwrap().set(0, 0, -50.0);
        w2.by_name_mut("embed_x.bias").unwrap().set(0, 0, -100.0);
        let win = facing_pair(6);
        let mut rng = RngState::new(0);
        let mut a = forward_sequence(&w1, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        let mut b = forward_sequence(&w2, &win, RolloutMode::TeacherForced, &mut rng).unwrap();
        let (la0, lb0) = (
            sequence_loss(&mut a, 4, 2, 0.0).unwrap(),
            sequence_loss(&mut b, 4, 2, 0.0).unwrap(),
        );
        assert_eq!(a.tape.scalar(la0), b.tape.scalar(lb0));
        let (la, lb) = (
            sequence_loss(&mut a, 4, 2, 1.0).unwrap(),
            sequence_loss(&mut b, 4, 2, 1.0).unwrap(),
        );
        let diff = a.tape.scalar(la) - b.tape.scalar(lb);
        assert!((diff - (w1.squared_norm() - w2.squared_norm())).abs() < 1e-9);
    }

    #[test]
    fn single_prediction_step_is_one_nll() {
        let w = random_weights(small(ModelVariant::Individual), 4, 0.4);
        let win = window(3, 1, vec![agent(1, walker([0.0, 0.0], [0.3, 0.1], 0.2, 4))]);
        let mut pass = forward_sequence(&w, &win, RolloutMode::TeacherForced, &mut RngState::new(0)).unwrap();
        let loss = sequence_loss(&mut pass, 3, 1, 0.0).unwrap();
        let StepOutput::Joint(g) = pass.agents[0].steps[2].output else {
            panic!("joint head expected")
        };
        let gt = win.agents[0].states[3].unwrap();
        let a = vislet_anchor(&gt, 0.5).anchor;
        let x = [gt.position[0], gt.position[1], a[0], a[1]];
        assert!((pass.tape.scalar(loss) - gaussian4_nll(&x, &g.mu, &g.theta)).abs() < 1e-12);
        assert!(sequence_loss(&mut pass, 3, 2, 0.0).is_err());
    }

    #[test]
    fn partial_agents_pool_but_are_not_scored() {
        let w = random_weights(small(ModelVariant::Full), 6, 0.4);
        let mut late = walker([1.0, 0.2], [-0.2, 0.0], PI, 6);
        late[0] = None;
        late[1] = None;
        let win = window(3, 3, vec![agent(1, walker([0.0, 0.0], [0.2, 0.0], 0.0, 6)), agent(2, late)]);
        assert!(!win.agents[1].full);
        let mut pass = forward_sequence(&w, &win, RolloutMode::TeacherForced, &mut RngState::new(0)).unwrap();
        assert_eq!(pass.agents[1].steps.first().unwrap().frame, 3);
        let l = sequence_loss(&mut pass, 3, 3, 0.0).unwrap();
        let only_first: f64 = (3..6)
            .map(|f| {
                let step = pass.agents[0].step_for_frame(f).unwrap();
                let StepOutput::Joint(g) = step.output else { unreachable!() };
                let gt = win.agents[0].states[f].unwrap();
                let a = vislet_anchor(&gt, 0.5).anchor;
                gaussian4_nll(&[gt.position[0], gt.position[1], a[0], a[1]], &g.mu, &g.theta)
            })
            .sum();
        assert!((pass.tape.scalar(l) - only_first).abs() < 1e-12);

        // autoregressive: the late agent only takes part while observed
        let ar = forward_sequence(&w, &win, RolloutMode::Autoregressive(Feedback::Mean), &mut RngState::new(0))
            .unwrap();
        assert_eq!(ar.agents[1].steps.len(), 1);
        assert_eq!(ar.agents[0].steps.len(), 5);
    }

    #[test]
    fn autoregressive_rollout_feeds_back_the_mean() {
        let w = random_weights(small(ModelVariant::Full), 8, 0.4);
        let win = facing_pair(7);
        let tf = forward_sequence(&w, &win, RolloutMode::TeacherForced, &mut RngState::new(0)).unwrap();
        let ar = forward_sequence(&w, &win, RolloutMode::Autoregressive(Feedback::Mean), &mut RngState::new(0))
            .unwrap();
        for (a, b) in tf.agents.iter().zip(&ar.agents) {
            // identical while observing
            for k in 0..4 {
                assert_eq!(tf.tape.value(a.steps[k].raw), ar.tape.value(b.steps[k].raw));
            }
            // after that the input is the previous prediction
            for k in 4..6 {
                let fed = b.predicted[k].unwrap();
                assert_eq!(b.steps[k].base, fed.position);
                assert_eq!(fed.position, b.steps[k - 1].output.mean_position());
            }
        }
        let s1 = forward_sequence(&w, &win, RolloutMode::Autoregressive(Feedback::Sample), &mut RngState::new(3))
            .unwrap();
        let s2 = forward_sequence(&w, &win, RolloutMode::Autoregressive(Feedback::Sample), &mut RngState::new(3))
            .unwrap();
        assert_eq!(s1.agents[0].predicted, s2.agents[0].predicted);
        assert_ne!(s1.agents[0].predicted, ar.agents[0].predicted);
    }

    #[test]
    fn walking_direction_rules() {
        let s = |x: f64, y: f64| Some(AgentState::new([x, y], 2.0));
        let dirs = walking_directions(&[s(0.0, 0.0), s(1.0, 0.0), s(1.0, 0.0), s(1.0, 1.0), None]);
        let pans: Vec<Option<f64>> = dirs.iter().map(|d| d.map(|d| d.pan())).collect();
        assert_eq!(pans[0], Some(0.0));
        assert_eq!(pans[1], Some(0.0));
        assert_eq!(pans[2], Some(0.0));
        assert!((pans[3].unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(pans[4], None);
        let still = walking_directions(&[s(2.0, 2.0), s(2.0, 2.0)]);
        assert!(still.iter().all(|d| d.unwrap().pan() == 0.0));
        let late = walking_directions(&[None, s(0.0, 0.0), s(0.0, -1.0)]);
        assert!((late[1].unwrap().pan() - 3.0 * FRAC_PI_2).abs() < 1e-15);
    }

    fn max_fd_error(w: &ModelWeights, win: &Window, obs: usize, pred: usize, l2: f64) -> f64 {
        let loss_at = |w: &ModelWeights| {
            let mut p = forward_sequence(w, win, RolloutMode::TeacherForced, &mut RngState::new(0)).unwrap();
            let l = sequence_loss(&mut p, obs, pred, l2).unwrap();
            p.tape.scalar(l)
        };
        let mut pass = forward_sequence(w, win, RolloutMode::TeacherForced, &mut RngState::new(0)).unwrap();
        let l = sequence_loss(&mut pass, obs, pred, l2).unwrap();
        let grads = grad_of_scalar(&pass.tape, l).unwrap();
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        let mut probe = w.clone();
        for p in 0..w.params().len() {
            for e in 0..w.params()[p].len() {
                let orig = probe.params()[p].data()[e];
                probe.get_mut(ParamId(p)).data_mut()[e] = orig + h;
                let up = loss_at(&probe);
                probe.get_mut(ParamId(p)).data_mut()[e] = orig - h;
                let dn = loss_at(&probe);
                probe.get_mut(ParamId(p)).data_mut()[e] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.get(ParamId(p)).data()[e];
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
            }
        }
        worst
    }

    #[test]
    fn loss_gradients_match_finite_differences_for_every_variant() {
        let mut cfg_base = small(ModelVariant::Full);
        cfg_base.grid_cells = 2;
        cfg_base.hidden_size = 2;
        cfg_base.embedding_size = 2;
        for (i, v) in ModelVariant::ALL.into_iter().enumerate() {
            let w = random_weights(
                ModelConfig {
                    variant: v,
                    ..cfg_base.clone()
                },
                40 + i as u64,
                0.6,
            );
            let err = max_fd_error(&w, &facing_pair(5), 3, 2, 1e-3);
            assert!(err < 1e-4, "{v}: relative error {err}");
        }
    }
}
