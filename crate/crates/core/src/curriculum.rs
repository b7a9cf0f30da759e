//! Level-k curriculum: each level trains against a traffic population drawn
//! from the already trained lower levels.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::driver::{sample_driver_params, sample_yield, Role, DESIRED_SPEED_RANGE};
use crate::qnet::{NetworkConfig, QNetwork, QnetError};
use crate::seed::{derive_seed, rng_from, Rng};
use crate::sim::{
    generate_initial_scene, Episode, InitialSceneParams, Outcome, PolicyTable, RewardWeights,
    SimConfig, SimError, Task,
};
use crate::traffic::{decode_action, Behavior, RoadGeometry, Scene, ACTION_COUNT, TOP_LANE};
use crate::train::{train_level, write_curve, CurvePoint, EnvStep, Environment, TrainConfig, TrainError};

const STREAM_INIT: u64 = 11;
const STREAM_TRAIN: u64 = 12;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("registry has no level {0}")]
    MissingLevel(u8),
    #[error("levels must be registered contiguously: expected {expected}, got {got}")]
    NonContiguous { expected: u8, got: u8 },
    #[error("weights file for level {level} carries task tag {tag}, expected {expected}")]
    TaskMismatch { level: u8, tag: u8, expected: u8 },
    #[error("weights file {path} is labelled level {found}")]
    LevelMismatch { path: PathBuf, found: u8 },
    #[error("maximum level must be at least 1")]
    NoLevels,
    #[error("training level {level} failed: {source}")]
    Level {
        level: u8,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Qnet(#[from] QnetError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<CurriculumError> for TrainError {
    fn from(e: CurriculumError) -> Self {
        match e {
            CurriculumError::Sim(s) => TrainError::Sim(s),
            other => TrainError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyEntry {
    /// Cooperative IDM with MOBIL, parameters resampled per vehicle.
    RuleBased,
    Learned { task: Task, network: Arc<QNetwork> },
}

/// Trained policies by reasoning level. Level 0 is always the rule-based
/// driver; odd levels merge and even levels keep their lane.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRegistry {
    network: NetworkConfig,
    entries: BTreeMap<u8, PolicyEntry>,
    table: Arc<PolicyTable>,
}

pub fn weights_file_name(level: u8) -> String {
    format!("level_{level}.lkqn")
}

pub fn curve_file_name(level: u8) -> String {
    format!("curve_level_{level}.csv")
}

impl PolicyRegistry {
    pub fn new(network: NetworkConfig) -> Self {
        Self {
            network,
            entries: BTreeMap::from([(0, PolicyEntry::RuleBased)]),
            table: Arc::new(PolicyTable::new()),
        }
    }

    pub fn network_config(&self) -> &NetworkConfig {
        &self.network
    }

    pub fn max_level(&self) -> u8 {
        *self.entries.keys().next_back().expect("level 0 always present")
    }

    pub fn levels(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, level: u8) -> Option<&PolicyEntry> {
        self.entries.get(&level)
    }

    pub fn network(&self, level: u8) -> Result<&Arc<QNetwork>, CurriculumError> {
        match self.entries.get(&level) {
            Some(PolicyEntry::Learned { network, .. }) => Ok(network),
            _ => Err(CurriculumError::MissingLevel(level)),
        }
    }

    /// Learned networks keyed by level, shared with running episodes.
    pub fn policy_table(&self) -> Arc<PolicyTable> {
        Arc::clone(&self.table)
    }

    pub fn register(&mut self, level: u8, network: QNetwork) -> Result<(), CurriculumError> {
        let expected = self.max_level() + 1;
        if level != expected {
            return Err(CurriculumError::NonContiguous { expected, got: level });
        }
        let network = Arc::new(network);
        self.entries.insert(
            level,
            PolicyEntry::Learned {
                task: Task::for_level(level),
                network: Arc::clone(&network),
            },
        );
        Arc::make_mut(&mut self.table).insert(level, network);
        Ok(())
    }

    /// Writes one weights file per learned level.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, CurriculumError> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (&level, entry) in &self.entries {
            if let PolicyEntry::Learned { task, network } = entry {
                let path = dir.join(weights_file_name(level));
                network.save(&path, task.tag(), level)?;
                paths.push(path);
            }
        }
        Ok(paths)
    }

    /// Loads `level_1.lkqn`, `level_2.lkqn`, ... until the first gap.
    pub fn load(dir: &Path, network: NetworkConfig) -> Result<Self, CurriculumError> {
        let mut reg = Self::new(network);
        for level in 1..=u8::MAX {
            let path = dir.join(weights_file_name(level));
            if !path.exists() {
                break;
            }
            let (net, tag, found) = QNetwork::load(&path, network)?;
            if found != level {
                return Err(CurriculumError::LevelMismatch { path, found });
            }
            let expected = Task::for_level(level).tag();
            if tag != expected {
                return Err(CurriculumError::TaskMismatch { level, tag, expected });
            }
            reg.register(level, net)?;
        }
        Ok(reg)
    }
}

/// Levels that may populate `lane` when training level `k`: level 0 plus
/// the lower levels whose task matches the lane.
pub fn admissible_levels(k: u8, lane: usize) -> Vec<u8> {
    let parity = if lane == TOP_LANE { 0 } else { 1 };
    std::iter::once(0)
        .chain((1..k).filter(|l| l % 2 == parity))
        .collect()
}

/// Assigns a reasoning level to every vehicle other than the ego and the
/// blocked car, uniformly over the levels admissible in its lane. Level-0
/// vehicles keep the rule-based driver they were generated with.
pub fn populate_environment<R: rand::Rng + ?Sized>(
    k: u8,
    registry: &PolicyRegistry,
    scene: &mut Scene,
    rng: &mut R,
) -> Result<(), CurriculumError> {
    if k > 0 && registry.max_level() < k - 1 {
        return Err(CurriculumError::MissingLevel(registry.max_level() + 1));
    }
    let (ego, blocked) = (scene.ego_id, scene.blocked_id);
    for v in scene.vehicles.iter_mut() {
        if v.id == ego || v.id == blocked {
            continue;
        }
        let levels = admissible_levels(k, v.state.lane_id);
        let level = levels[rng.gen_range(0..levels.len())];
        if level > 0 {
            v.behavior = Behavior::Learned {
                level,
                task: Task::for_level(level),
            };
        }
    }
    Ok(())
}

/// Initial weights for level `k`: fresh for the first level of each task,
/// otherwise a copy of level `k - 2`.
pub fn warm_start<R: rand::Rng + ?Sized>(
    k: u8,
    registry: &PolicyRegistry,
    rng: &mut R,
) -> Result<QNetwork, CurriculumError> {
    if k <= 2 {
        Ok(QNetwork::new_random(*registry.network_config(), rng))
    } else {
        Ok(registry.network(k - 2)?.as_ref().clone())
    }
}

/// Scene, road, dynamics and reward settings shared by training and
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub scene: InitialSceneParams,
    pub road: RoadGeometry,
    pub sim: SimConfig,
    pub reward: RewardWeights,
}

/// How the ego is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgoMode {
    /// Actions are supplied from outside.
    Agent,
    /// Level-0 rule-based driver in the merging role.
    Rule,
}

/// The merge scenario as an [`Environment`].
#[derive(Debug, Clone)]
pub struct MergeEnv {
    task: Task,
    opponent_bound: u8,
    ego_mode: EgoMode,
    registry: Arc<PolicyRegistry>,
    env: EnvConfig,
    episode: Option<Episode>,
}

impl MergeEnv {
    /// Environment for training level `k`.
    pub fn for_training(k: u8, registry: Arc<PolicyRegistry>, env: EnvConfig) -> Self {
        Self {
            task: Task::for_level(k),
            opponent_bound: k,
            ego_mode: EgoMode::Agent,
            registry,
            env,
            episode: None,
        }
    }

    /// Environment with opponents of levels up to `env_level`.
    pub fn for_evaluation(
        task: Task,
        env_level: u8,
        ego_mode: EgoMode,
        registry: Arc<PolicyRegistry>,
        env: EnvConfig,
    ) -> Self {
        Self {
            task,
            opponent_bound: env_level + 1,
            ego_mode,
            registry,
            env,
            episode: None,
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Draws a fresh scene and population.
    pub fn start_episode(&self, rng: &mut Rng) -> Result<Episode, CurriculumError> {
        let mut scene = generate_initial_scene(rng, &self.env.scene, &self.env.road, self.task)?;
        populate_environment(self.opponent_bound, &self.registry, &mut scene, rng)?;
        let ego_desired_speed = match self.task {
            Task::Merge => self.env.reward.merge_desired_speed,
            Task::KeepLane => rng.gen_range(DESIRED_SPEED_RANGE.0..=DESIRED_SPEED_RANGE.1),
        };
        if self.ego_mode == EgoMode::Rule {
            let params = sample_driver_params(rng);
            let yields = sample_yield(&params, rng);
            let ego = &mut scene.vehicles[0];
            ego.behavior = Behavior::Rule {
                params,
                yields,
                role: Role::Merge,
            };
            ego.control.desired_speed = params.desired_speed;
        }
        Ok(Episode::new(
            scene,
            self.env.sim,
            self.env.reward,
            self.task,
            ego_desired_speed,
            self.registry.policy_table(),
        )?)
    }
}

impl Environment for MergeEnv {
    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn reset(&mut self, rng: &mut Rng) -> Result<Vec<f64>, TrainError> {
        let ep = self.start_episode(rng)?;
        let obs = ep.observe_ego().features().to_vec();
        self.episode = Some(ep);
        Ok(obs)
    }

    fn step(&mut self, action: usize, _rng: &mut Rng) -> Result<EnvStep, TrainError> {
        let ep = self.episode.as_mut().ok_or(SimError::Finished)?;
        let a = decode_action(action).map_err(SimError::from)?;
        let out = ep.step(Some(a))?;
        // The clock is not observed, so running out of time cuts the episode
        // without making the last state terminal.
        let cut = match out.outcome {
            Some(Outcome::Timeout) => true,
            Some(Outcome::Success) => self.task == Task::KeepLane,
            _ => false,
        };
        Ok(EnvStep {
            next_state: ep.observe_ego().features().to_vec(),
            reward: out.reward,
            done: out.done && !cut,
            truncated: cut,
            outcome: out.outcome,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub max_level: u8,
    pub seed: u64,
    pub train: TrainConfig,
    /// Overrides of `train` for individual levels.
    pub level_train: BTreeMap<u8, TrainConfig>,
    pub env: EnvConfig,
    pub network: NetworkConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            max_level: 5,
            seed: 0,
            train: TrainConfig::default(),
            level_train: BTreeMap::new(),
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl CurriculumConfig {
    pub fn train_for(&self, level: u8) -> &TrainConfig {
        self.level_train.get(&level).unwrap_or(&self.train)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLevel {
    pub level: u8,
    pub task: Task,
    pub seed: u64,
    pub train_config_hash: String,
    pub weights_file: String,
    pub weights_sha256: String,
    pub curve_file: String,
    pub curve_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub config_hash: String,
    pub levels: Vec<ManifestLevel>,
}

#[derive(Debug, Clone)]
pub struct CurriculumOutput {
    pub registry: PolicyRegistry,
    pub curves: BTreeMap<u8, Vec<CurvePoint>>,
    /// Wall-clock training time per level, seconds.
    pub timings: BTreeMap<u8, f64>,
    pub manifest: Manifest,
}

/// Trains levels `1..=max_level` in order. With `out_dir`, every finished
/// level immediately writes its weights and learning curve, and the
/// manifest and timings files are rewritten.
pub fn run_curriculum(
    cfg: &CurriculumConfig,
    out_dir: Option<&Path>,
) -> Result<CurriculumOutput, CurriculumError> {
    if cfg.max_level == 0 {
        return Err(CurriculumError::NoLevels);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut registry = PolicyRegistry::new(cfg.network);
    let mut curves = BTreeMap::new();
    let mut timings = BTreeMap::new();
    let mut manifest = Manifest {
        master_seed: cfg.seed,
        config_hash: cfg.hash(),
        levels: Vec::new(),
    };
    for k in 1..=cfg.max_level {
        let train = cfg.train_for(k);
        let init = warm_start(k, &registry, &mut rng_from(cfg.seed, &[STREAM_INIT, k as u64]))?;
        let frozen = Arc::new(registry.clone());
        let seed = derive_seed(cfg.seed, &[STREAM_TRAIN, k as u64]);
        log::info!("training level {k} ({}) for {} steps", Task::for_level(k).name(), train.total_steps);
        let started = Instant::now();
        let out = train_level(
            || MergeEnv::for_training(k, Arc::clone(&frozen), cfg.env),
            init,
            train,
            seed,
            |_| {},
        )
        .map_err(|source| CurriculumError::Level { level: k, source })?;
        let seconds = started.elapsed().as_secs_f64();
        log::info!("level {k} finished in {seconds:.1} s");
        registry.register(k, out.network)?;
        timings.insert(k, seconds);

        if let Some(dir) = out_dir {
            let weights_file = weights_file_name(k);
            let curve_file = curve_file_name(k);
            let net = registry.network(k)?;
            net.save(&dir.join(&weights_file), Task::for_level(k).tag(), k)?;
            write_curve(&dir.join(&curve_file), &out.curve).map_err(|source| CurriculumError::Level { level: k, source })?;
            manifest.levels.push(ManifestLevel {
                level: k,
                task: Task::for_level(k),
                seed,
                train_config_hash: hex(&Sha256::digest(serde_json::to_vec(train)?)),
                weights_sha256: sha256_file(&dir.join(&weights_file))?,
                curve_sha256: sha256_file(&dir.join(&curve_file))?,
                weights_file,
                curve_file,
            });
            fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
        }
        curves.insert(k, out.curve);
    }
    Ok(CurriculumOutput {
        registry,
        curves,
        timings,
        manifest,
    })
}
