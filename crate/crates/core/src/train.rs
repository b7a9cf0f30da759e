//! Deep Q-learning for one curriculum level: double Q-learning targets,
//! prioritized replay, a periodically synced target network and linearly
//! decaying epsilon-greedy exploration.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qnet::{argmax, GradSample, OptimizerState, QNetwork, QnetError};
use crate::replay::{PrioritizedBuffer, ReplayError};
use crate::seed::{rng_from, Rng};
use crate::sim::{Outcome, SimError};

pub mod synthetic;

const STREAM_ACT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Qnet(#[from] QnetError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed learning curve: {0}")]
    Parse(String),
}

/// One stored ego transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Terminal: no bootstrapping past this transition.
    pub done: bool,
    /// The episode ends here without being terminal.
    pub truncated: bool,
    pub outcome: Option<Outcome>,
}

/// An episodic decision process driven one action at a time.
pub trait Environment {
    fn action_count(&self) -> usize;
    fn reset(&mut self, rng: &mut Rng) -> Result<Vec<f64>, TrainError>;
    fn step(&mut self, action: usize, rng: &mut Rng) -> Result<EnvStep, TrainError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.02,
            decay_steps: 20_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.end;
        }
        let f = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Environment decision steps.
    pub total_steps: u64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient updates between target syncs.
    pub target_sync: u64,
    pub epsilon: EpsilonSchedule,
    pub buffer_capacity: usize,
    pub warmup: usize,
    pub priority_alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_floor: f64,
    /// Steps between greedy evaluations; 0 disables them.
    pub eval_interval: u64,
    pub eval_episodes: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 500_000,
            gamma: 0.99,
            learning_rate: 1e-4,
            batch_size: 32,
            target_sync: 500,
            epsilon: EpsilonSchedule::default(),
            buffer_capacity: 100_000,
            warmup: 1_000,
            priority_alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_floor: 1e-3,
            eval_interval: 25_000,
            eval_episodes: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon.start) || !unit.contains(&self.epsilon.end) {
            return bad("epsilon endpoints must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_sync == 0 {
            return bad("batch_size, buffer_capacity and target_sync must be positive");
        }
        if !(self.priority_floor > 0.0) {
            return bad("priority_floor must be positive");
        }
        Ok(())
    }

    fn beta(&self, step: u64) -> f64 {
        let f = if self.total_steps == 0 {
            1.0
        } else {
            (step as f64 / self.total_steps as f64).min(1.0)
        };
        self.beta_start + (self.beta_end - self.beta_start) * f
    }
}

/// `r` if terminal, else `r + gamma Q(s', argmax_a Q(s', a; online); target)`.
pub fn double_dqn_target(
    reward: f64,
    next_state: &[f64],
    done: bool,
    online: &QNetwork,
    target: &QNetwork,
    gamma: f64,
) -> f64 {
    if done || gamma == 0.0 {
        return reward;
    }
    let a = online.greedy_action(next_state);
    reward + gamma * target.q_values(next_state)[a]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    pub mean_return: f64,
    pub epsilon: f64,
}

pub const CURVE_HEADER: &str = "step,success_rate,collision_rate,timeout_rate,mean_return,epsilon";

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.step, p.success_rate, p.collision_rate, p.timeout_rate, p.mean_return, p.epsilon
        );
    }
    s
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurvePoint>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(TrainError::Parse("bad header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(TrainError::Parse(l.to_string()));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| TrainError::Parse(l.to_string()));
            Ok(CurvePoint {
                step: f[0].parse().map_err(|_| TrainError::Parse(l.to_string()))?,
                success_rate: num(1)?,
                collision_rate: num(2)?,
                timeout_rate: num(3)?,
                mean_return: num(4)?,
                epsilon: num(5)?,
            })
        })
        .collect()
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), TrainError> {
    fs::write(path, curve_to_csv(curve))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub network: QNetwork,
    pub curve: Vec<CurvePoint>,
    pub updates: u64,
    pub episodes: u64,
}

/// Online and target networks, optimizer and replay memory.
#[derive(Debug, Clone)]
pub(crate) struct Learner {
    pub(crate) online: QNetwork,
    pub(crate) target: QNetwork,
    opt: OptimizerState,
    pub(crate) buffer: PrioritizedBuffer<Experience>,
    pub(crate) updates: u64,
    cfg: TrainConfig,
}

impl Learner {
    pub(crate) fn new(init: QNetwork, cfg: &TrainConfig) -> Result<Self, TrainError> {
        Ok(Self {
            target: init.clone(),
            opt: OptimizerState::new(init.params().len(), cfg.learning_rate),
            online: init,
            buffer: PrioritizedBuffer::new(cfg.buffer_capacity, cfg.priority_alpha, cfg.priority_floor)?,
            updates: 0,
            cfg: *cfg,
        })
    }

    pub(crate) fn ready(&self) -> bool {
        self.buffer.len() >= self.cfg.warmup.max(1)
    }

    /// One prioritized double-DQN gradient step; returns the loss.
    pub(crate) fn update(&mut self, step: u64, rng: &mut Rng) -> Result<f64, TrainError> {
        let cfg = &self.cfg;
        let batch = self.buffer.sample(cfg.batch_size, cfg.beta(step), rng)?;
        let mut samples = Vec::with_capacity(batch.indices.len());
        for (&i, &w) in batch.indices.iter().zip(&batch.weights) {
            let e = self.buffer.get(i).expect("sampled index is stored");
            let y = double_dqn_target(e.reward, &e.next_state, e.done, &self.online, &self.target, cfg.gamma);
            samples.push(GradSample {
                input: &e.state,
                action: e.action,
                target: y,
                weight: w,
            });
        }
        let diverged = |reason: String| TrainError::Diverged { step, reason };
        let g = self.online.gradient(&samples).map_err(|e| diverged(e.to_string()))?;
        if !g.loss.is_finite() {
            return Err(diverged(format!("loss {}", g.loss)));
        }
        self.opt
            .step_network(&mut self.online, &g.grad)
            .map_err(|e| diverged(e.to_string()))?;
        self.buffer.update_priorities(&batch.indices, &g.td_errors)?;
        self.updates += 1;
        if self.updates % cfg.target_sync == 0 {
            self.target.copy_from(&self.online);
        }
        Ok(g.loss)
    }
}

/// Greedy rollouts of `net`; every episode starts from the same eval stream
/// so successive curve points are comparable.
pub fn evaluate_greedy<E: Environment>(
    env: &mut E,
    net: &QNetwork,
    episodes: u32,
    rng: &mut Rng,
) -> Result<(f64, f64, f64, f64), TrainError> {
    let mut counts = [0u32; 3];
    let mut total_return = 0.0;
    for _ in 0..episodes {
        let mut s = env.reset(rng)?;
        loop {
            let step = env.step(net.greedy_action(&s), rng)?;
            total_return += step.reward;
            if step.done || step.truncated {
                let k = match step.outcome {
                    Some(Outcome::Success) => 0,
                    Some(Outcome::Collision) => 1,
                    Some(Outcome::Timeout) | None => 2,
                };
                counts[k] += 1;
                break;
            }
            s = step.next_state;
        }
    }
    let n = episodes.max(1) as f64;
    Ok((
        counts[0] as f64 / n,
        counts[1] as f64 / n,
        counts[2] as f64 / n,
        total_return / n,
    ))
}

/// Trains `init` on environments produced by `make_env`.
///
/// Acts epsilon-greedily, stores every transition, and after warm-up takes
/// one gradient step per environment step. Every `eval_interval` steps a
/// fresh environment runs greedy episodes to add a learning-curve point.
/// `on_point` observes curve points as they are produced.
pub fn train_level<E, F>(
    mut make_env: F,
    init: QNetwork,
    cfg: &TrainConfig,
    seed: u64,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<TrainOutput, TrainError>
where
    E: Environment,
    F: FnMut() -> E,
{
    cfg.validate()?;
    let mut curve = Vec::new();
    if cfg.total_steps == 0 {
        return Ok(TrainOutput {
            network: init,
            curve,
            updates: 0,
            episodes: 0,
        });
    }
    let mut env = make_env();
    let actions = env.action_count();
    let mut act_rng = rng_from(seed, &[STREAM_ACT]);
    let mut env_rng = rng_from(seed, &[STREAM_ENV]);
    let mut replay_rng = rng_from(seed, &[STREAM_REPLAY]);
    let mut learner = Learner::new(init, cfg)?;
    let mut episodes = 0u64;
    let mut state = env.reset(&mut env_rng)?;

    for step in 0..cfg.total_steps {
        let eps = cfg.epsilon.value(step);
        let action = if act_rng.gen::<f64>() < eps {
            act_rng.gen_range(0..actions)
        } else {
            argmax(&learner.online.q_values(&state))
        };
        let out = env.step(action, &mut env_rng)?;
        let end = out.done || out.truncated;
        let next = out.next_state;
        learner.buffer.push(Experience {
            state: std::mem::take(&mut state),
            action,
            reward: out.reward,
            next_state: next.clone(),
            done: out.done,
        });
        state = if end {
            episodes += 1;
            env.reset(&mut env_rng)?
        } else {
            next
        };

        if learner.ready() {
            learner.update(step, &mut replay_rng)?;
        }

        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            let mut eval_env = make_env();
            let mut eval_rng = rng_from(seed, &[STREAM_EVAL]);
            let (success_rate, collision_rate, timeout_rate, mean_return) =
                evaluate_greedy(&mut eval_env, &learner.online, cfg.eval_episodes, &mut eval_rng)?;
            let point = CurvePoint {
                step: step + 1,
                success_rate,
                collision_rate,
                timeout_rate,
                mean_return,
                epsilon: eps,
            };
            log::info!(
                "step {} success {:.3} collision {:.3} timeout {:.3} return {:.3}",
                point.step,
                success_rate,
                collision_rate,
                timeout_rate,
                mean_return
            );
            on_point(&point);
            curve.push(point);
        }
    }
    Ok(TrainOutput {
        network: learner.online,
        curve,
        updates: learner.updates,
        episodes,
    })
}
