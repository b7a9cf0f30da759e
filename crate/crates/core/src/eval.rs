//! Policy-level × environment-level evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::curriculum::{CurriculumError, EgoMode, EnvConfig, MergeEnv, PolicyRegistry};
use crate::qnet::QNetwork;
use crate::seed::{derive_seed, Rng};
use crate::sim::{run_episode, EpisodeSummary, Outcome, SimError, Task};
use crate::traffic::decode_action;

use rand::SeedableRng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("registry has no level {0}")]
    MissingLevel(u8),
    #[error("n_episodes must be positive")]
    NoEpisodes,
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed matrix CSV: {0}")]
    Parse(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub policy_level: u8,
    pub env_level: u8,
    pub n_episodes: u32,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean episode duration, s.
    pub mean_time: f64,
}

impl CellMetrics {
    /// Exact outcome frequencies of `episodes`.
    pub fn from_episodes(policy_level: u8, env_level: u8, episodes: &[EpisodeRecord]) -> Self {
        let n = episodes.len() as f64;
        let count = |o: Outcome| episodes.iter().filter(|e| e.outcome == o).count() as f64 / n;
        Self {
            policy_level,
            env_level,
            n_episodes: episodes.len() as u32,
            success_rate: count(Outcome::Success),
            collision_rate: count(Outcome::Collision),
            timeout_rate: count(Outcome::Timeout),
            mean_time: episodes.iter().map(|e| e.elapsed).sum::<f64>() / n,
        }
    }
}

/// The ego's driver in an evaluation cell.
#[derive(Debug, Clone)]
pub enum EgoDriver {
    /// Level-0 rule-based driver in the merging role.
    Rule,
    /// Greedy network policy on the given task.
    Network { task: Task, network: Arc<QNetwork> },
}

impl EgoDriver {
    pub fn for_level(level: u8, registry: &PolicyRegistry) -> Result<Self, EvalError> {
        if level == 0 {
            return Ok(EgoDriver::Rule);
        }
        let network = registry
            .network(level)
            .map_err(|_| EvalError::MissingLevel(level))?;
        Ok(EgoDriver::Network {
            task: Task::for_level(level),
            network: Arc::clone(network),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            EgoDriver::Rule => Task::Merge,
            EgoDriver::Network { task, .. } => *task,
        }
    }
}

/// What an evaluation keeps of each episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub outcome: Outcome,
    pub elapsed: f64,
    pub ego_lanes: Vec<u8>,
}

impl From<EpisodeSummary> for EpisodeRecord {
    fn from(s: EpisodeSummary) -> Self {
        Self {
            outcome: s.outcome,
            elapsed: s.elapsed,
            ego_lanes: s.ego_lanes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub env: EnvConfig,
    /// Every evaluation scene holds exactly this many other cars.
    pub n_cars: u32,
    pub seed: u64,
    /// Worker threads; 1 runs inline.
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            n_cars: 50,
            seed: 0,
            threads: 1,
        }
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs one episode per index with seed `hash(seed, policy, env, index)`.
pub fn run_cell(
    ego: &EgoDriver,
    policy_level: u8,
    env_level: u8,
    n_episodes: u32,
    registry: &Arc<PolicyRegistry>,
    settings: &EvalSettings,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    if n_episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    if env_level > registry.max_level() {
        return Err(EvalError::MissingLevel(env_level));
    }
    let mut env_cfg = settings.env;
    env_cfg.scene = env_cfg.scene.with_cars(settings.n_cars);
    let mode = match ego {
        EgoDriver::Rule => EgoMode::Rule,
        EgoDriver::Network { .. } => EgoMode::Agent,
    };
    let env = MergeEnv::for_evaluation(ego.task(), env_level, mode, Arc::clone(registry), env_cfg);
    let one = |i: u32| -> Result<EpisodeRecord, EvalError> {
        let seed = derive_seed(settings.seed, &[policy_level as u64, env_level as u64, i as u64]);
        let mut rng = Rng::seed_from_u64(seed);
        let episode = env.start_episode(&mut rng)?;
        let (summary, _) = match ego {
            EgoDriver::Rule => run_episode(episode, &mut |_| unreachable!("rule ego needs no actions"))?,
            EgoDriver::Network { network, .. } => run_episode(episode, &mut |obs| {
                decode_action(network.greedy_action(&obs.features())).expect("network emits valid actions")
            })?,
        };
        Ok(summary.into())
    };
    with_pool(settings.threads, || {
        (0..n_episodes).into_par_iter().map(one).collect::<Result<Vec<_>, _>>()
    })?
}

/// Metrics of `policy_level` driving against opponents of levels up to
/// `env_level`.
pub fn evaluate_cell(
    policy_level: u8,
    env_level: u8,
    n_episodes: u32,
    registry: &Arc<PolicyRegistry>,
    settings: &EvalSettings,
) -> Result<CellMetrics, EvalError> {
    let ego = EgoDriver::for_level(policy_level, registry)?;
    let records = run_cell(&ego, policy_level, env_level, n_episodes, registry, settings)?;
    Ok(CellMetrics::from_episodes(policy_level, env_level, &records))
}

/// Every (policy level, environment level) cell for levels `0..=max_level`,
/// row-major by policy level.
pub fn cross_matrix(
    registry: &Arc<PolicyRegistry>,
    max_level: u8,
    n_episodes: u32,
    settings: &EvalSettings,
) -> Result<Vec<CellMetrics>, EvalError> {
    if registry.max_level() < max_level {
        return Err(EvalError::MissingLevel(registry.max_level() + 1));
    }
    let mut cells = Vec::new();
    for p in 0..=max_level {
        for e in 0..=max_level {
            let cell = evaluate_cell(p, e, n_episodes, registry, settings)?;
            log::info!(
                "policy {p} env {e}: success {:.3} collision {:.3} timeout {:.3}",
                cell.success_rate,
                cell.collision_rate,
                cell.timeout_rate
            );
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub const MATRIX_HEADER: &str =
    "policy_level,env_level,n_episodes,success_rate,collision_rate,timeout_rate,mean_time";

pub fn matrix_to_csv(cells: &[CellMetrics]) -> String {
    let mut s = String::from(MATRIX_HEADER);
    s.push('\n');
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.policy_level,
            c.env_level,
            c.n_episodes,
            c.success_rate,
            c.collision_rate,
            c.timeout_rate,
            c.mean_time
        );
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<Vec<CellMetrics>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(MATRIX_HEADER) {
        return Err(EvalError::Parse("bad header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || EvalError::Parse(l.to_string());
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(CellMetrics {
                policy_level: f[0].parse().map_err(|_| bad())?,
                env_level: f[1].parse().map_err(|_| bad())?,
                n_episodes: f[2].parse().map_err(|_| bad())?,
                success_rate: num(3)?,
                collision_rate: num(4)?,
                timeout_rate: num(5)?,
                mean_time: num(6)?,
            })
        })
        .collect()
}

pub fn write_matrix(path: &Path, cells: &[CellMetrics]) -> Result<(), EvalError> {
    fs::write(path, matrix_to_csv(cells))?;
    Ok(())
}
