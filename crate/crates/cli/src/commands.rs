use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lkmerge::curriculum::{sha256_file, weights_file_name};
use lkmerge::eval::write_matrix;
use lkmerge::{
    cross_matrix, decode_action, run_curriculum, run_episode, CurriculumError, EgoMode, EvalError,
    EvalSettings, Manifest, MergeEnv, PolicyRegistry, QNetwork, QnetError, SimError, Task,
};
use rand::SeedableRng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::trace::trace_csv;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("incomplete registry {dir}: {reason}")]
    Registry { dir: PathBuf, reason: String },
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("policy {path}: {source}")]
    Policy { path: PathBuf, source: QnetError },
    #[error("policy {path} carries unknown task tag {tag}")]
    UnknownTask { path: PathBuf, tag: u8 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn warn_overrides(cfg: &RunConfig) {
    for key in cfg.overridden_constants() {
        log::warn!("`{key}` differs from the standard scenario value");
    }
}

/// The config saved next to a registry, or defaults when there is none.
fn registry_config(dir: &Path) -> Result<RunConfig, CliError> {
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        Ok(RunConfig::load(&path)?)
    } else {
        Ok(RunConfig::default())
    }
}

pub struct CurriculumArgs {
    pub config: PathBuf,
    pub max_level: Option<u8>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn curriculum(args: &CurriculumArgs) -> Result<Manifest, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(k) = args.max_level {
        cfg.max_level = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if cfg.max_level == 0 {
        return Err(CliError::Usage("--max-level must be at least 1".into()));
    }
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))?;
    let curriculum = cfg.curriculum()?;
    warn_overrides(&cfg);

    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let saved = out.join(CONFIG_FILE);
    fs::write(&saved, cfg.to_toml()).map_err(io_err(&saved))?;
    let result = run_curriculum(&curriculum, Some(&out))?;
    for (level, secs) in &result.timings {
        log::info!("level {level}: {secs:.1} s");
    }
    Ok(result.manifest)
}

/// Loads a registry and checks it against its manifest, when present.
pub fn load_registry(dir: &Path, cfg: &RunConfig) -> Result<PolicyRegistry, CliError> {
    let incomplete = |reason: String| CliError::Registry {
        dir: dir.to_path_buf(),
        reason,
    };
    if !dir.is_dir() {
        return Err(incomplete("not a directory".into()));
    }
    let registry = PolicyRegistry::load(dir, cfg.network)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| incomplete(format!("unreadable manifest: {e}")))?;
        for level in &manifest.levels {
            let path = dir.join(&level.weights_file);
            if !path.exists() {
                return Err(incomplete(format!("missing {}", level.weights_file)));
            }
            let digest = sha256_file(&path).map_err(io_err(&path))?;
            if digest != level.weights_sha256 {
                return Err(incomplete(format!("{} does not match the manifest", level.weights_file)));
            }
        }
        let listed = manifest.levels.iter().map(|l| l.level).max().unwrap_or(0);
        if registry.max_level() < listed {
            return Err(incomplete(format!("missing {}", weights_file_name(registry.max_level() + 1))));
        }
    }
    if registry.max_level() == 0 {
        return Err(incomplete("no trained levels".into()));
    }
    Ok(registry)
}

pub struct EvaluateArgs {
    pub registry: PathBuf,
    pub episodes: u32,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub n_cars: Option<u32>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    if args.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let cfg = registry_config(&args.registry)?;
    let registry = Arc::new(load_registry(&args.registry, &cfg)?);
    let settings = EvalSettings {
        env: cfg.env(),
        n_cars: args.n_cars.unwrap_or(cfg.eval.n_cars),
        seed: cfg.seed,
        threads: args.threads.unwrap_or(cfg.eval.threads),
    };
    let cells = cross_matrix(&registry, registry.max_level(), args.episodes, &settings)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_matrix(&args.out, &cells)?;
    Ok(())
}

pub struct RolloutArgs {
    pub policy: PathBuf,
    pub env_level: u8,
    pub seed: u64,
    pub trace: PathBuf,
    pub registry: Option<PathBuf>,
}

pub fn rollout(args: &RolloutArgs) -> Result<lkmerge::Outcome, CliError> {
    let dir = match &args.registry {
        Some(d) => d.clone(),
        None => args
            .policy
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let cfg = registry_config(&dir)?;
    let (network, tag, level) = QNetwork::load(&args.policy, cfg.network).map_err(|source| CliError::Policy {
        path: args.policy.clone(),
        source,
    })?;
    let task = Task::from_tag(tag).ok_or_else(|| CliError::UnknownTask {
        path: args.policy.clone(),
        tag,
    })?;
    let registry = if args.env_level == 0 {
        PolicyRegistry::new(cfg.network)
    } else {
        PolicyRegistry::load(&dir, cfg.network)?
    };
    if registry.max_level() < args.env_level {
        return Err(CliError::Registry {
            dir,
            reason: format!("environment level {} needs levels up to {}", args.env_level, args.env_level),
        });
    }
    let mut env_cfg = cfg.env();
    env_cfg.scene = env_cfg.scene.with_cars(cfg.eval.n_cars);
    let env = MergeEnv::for_evaluation(task, args.env_level, EgoMode::Agent, Arc::new(registry), env_cfg);
    let mut rng = lkmerge::seed::Rng::seed_from_u64(args.seed);
    let episode = env.start_episode(&mut rng)?.with_trace();
    let (summary, _) = run_episode(episode, &mut |obs| {
        decode_action(network.greedy_action(&obs.features())).expect("network emits valid actions")
    })?;
    log::info!("level {level} policy: {:?} after {:.1} s", summary.outcome, summary.elapsed);
    let text = trace_csv(&summary);
    if let Some(parent) = args.trace.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&args.trace, text).map_err(io_err(&args.trace))?;
    Ok(summary.outcome)
}
