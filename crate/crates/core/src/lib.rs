//! Level-k curriculum for learning dense-traffic merge maneuvers.
//!
//! The crate bundles a two-lane traffic microsimulator with rule-based
//! drivers (cooperative IDM + MOBIL), a dueling double deep Q-network trained
//! with prioritized replay, the iterative-reasoning curriculum that trains
//! level-k policies against populations of lower levels, and an evaluation
//! harness that produces the policy-level × environment-level outcome matrix.
//!
//! Module map:
//!
//! - [`traffic`]: road geometry, vehicle state, actions and observations.
//! - [`driver`]: IDM, cooperative IDM, MOBIL, PD lateral control, level-0.
//! - [`sim`]: kinematics, scene generation, collisions, reward, episodes.
//! - [`qnet`]: the dueling Q-network with hand-written backprop and Adam.
//! - [`replay`]: sum tree and proportional prioritized replay buffer.
//! - [`train`]: the deep Q-learning loop for one curriculum level.
//! - [`curriculum`]: population sampling, warm starts, the policy registry.
//! - [`eval`]: per-cell metrics and the cross-level matrix.

pub mod curriculum;
pub mod driver;
pub mod eval;
pub mod qnet;
pub mod replay;
pub mod seed;
pub mod sim;
pub mod traffic;
pub mod train;

pub use curriculum::{
    populate_environment, run_curriculum, warm_start, CurriculumConfig, CurriculumError,
    CurriculumOutput, EgoMode, EnvConfig, Manifest, MergeEnv, PolicyEntry, PolicyRegistry,
};
pub use driver::{
    cidm_acceleration, idm_acceleration, level0_step, mobil_decision, pd_lateral,
    sample_driver_params, CidmParams, ControllerGains, DriverError, MobilParams, Role,
};
pub use eval::{
    cross_matrix, evaluate_cell, matrix_from_csv, matrix_to_csv, run_cell, CellMetrics, EgoDriver,
    EpisodeRecord, EvalError, EvalSettings,
};
pub use qnet::{GradSample, Gradient, NetworkConfig, OptimizerState, QNetwork, QnetError};
pub use replay::{PrioritizedBuffer, ReplayError, SampledBatch, SumTree};
pub use sim::{
    compute_reward, detect_collisions, generate_initial_scene, integrate_state, run_episode,
    DecisionStep, Episode, EpisodeSummary, InitialSceneParams, Outcome, PolicyTable,
    RewardWeights, SimConfig, SimError, Task, TraceRow,
};
pub use traffic::{
    build_observation, decode_action, lane_attribution, Action, Behavior, LateralCommand,
    Observation, RoadGeometry, Scene, TrafficError, Vehicle, VehicleId, VehicleState,
};
pub use train::{
    curve_from_csv, curve_to_csv, double_dqn_target, evaluate_greedy, train_level, CurvePoint,
    EnvStep, Environment, EpsilonSchedule, Experience, TrainConfig, TrainError, TrainOutput,
};
