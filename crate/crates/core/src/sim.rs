//! Time stepping, kinematics with steering limits, scene generation,
//! collision detection, reward and episode outcome classification.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{
    cidm_index, idm_acceleration, level0_target_lane, pd_lateral, sample_driver_params,
    sample_yield, CidmParams, ControllerGains, MobilParams, Role,
};
use crate::qnet::QNetwork;
use crate::traffic::{
    decode_action, lane_attribution, observe_index, Action, Behavior, Control, LateralCommand,
    Observation, RoadGeometry, Scene, TrafficError, Vehicle, VehicleId, VehicleState, BOTTOM_LANE,
    TOP_LANE,
};
use crate::train::Experience;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("road of length {road_length} m holds {capacity} vehicles, {requested} requested")]
    RoadTooShort {
        road_length: f64,
        capacity: usize,
        requested: usize,
    },
    #[error("no policy registered for level {0}")]
    MissingPolicy(u8),
    #[error("ego is externally controlled but no action was supplied")]
    MissingEgoAction,
    #[error("episode already finished")]
    Finished,
    #[error(transparent)]
    Traffic(#[from] TrafficError),
}

/// Which maneuver the ego is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Merge,
    KeepLane,
}

impl Task {
    /// Odd levels merge, even levels keep their lane.
    pub fn for_level(level: u8) -> Task {
        if level % 2 == 1 {
            Task::Merge
        } else {
            Task::KeepLane
        }
    }

    pub fn start_lane(self) -> usize {
        match self {
            Task::Merge => BOTTOM_LANE,
            Task::KeepLane => TOP_LANE,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Task::Merge => 1,
            Task::KeepLane => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Task> {
        match tag {
            1 => Some(Task::Merge),
            2 => Some(Task::KeepLane),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Merge => "merge",
            Task::KeepLane => "keep_lane",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Simulation step, s.
    pub dt: f64,
    /// Simulation steps between two decisions.
    pub decision_period: u32,
    pub max_episode_time: f64,
    /// Continuous time in the target lane that counts as a successful merge.
    pub success_dwell: f64,
    /// rad/s.
    pub steering_rate_max: f64,
    /// rad.
    pub steering_angle_max: f64,
    pub gains: ControllerGains,
    pub mobil: MobilParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            decision_period: 5,
            max_episode_time: 40.0,
            success_dwell: 5.0,
            steering_rate_max: 0.4,
            steering_angle_max: 0.5,
            gains: ControllerGains::default(),
            mobil: MobilParams::default(),
        }
    }
}

impl SimConfig {
    pub fn max_steps(&self) -> u32 {
        (self.max_episode_time / self.dt).round() as u32
    }

    pub fn dwell_steps(&self) -> u32 {
        (self.success_dwell / self.dt).round() as u32
    }

    pub fn decision_interval(&self) -> f64 {
        self.decision_period as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSceneParams {
    /// Initial speed bounds, m/s.
    pub speed: (f64, f64),
    /// Initial lateral offset bounds, m.
    pub lateral_offset: (f64, f64),
    /// Initial heading bounds, rad.
    pub heading: (f64, f64),
    /// Bounds on the number of other cars (inclusive).
    pub n_cars: (u32, u32),
    /// Bumper-to-bumper gap, m.
    pub gap: f64,
    pub ego_start: f64,
    pub blocked_position: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
}

impl Default for InitialSceneParams {
    fn default() -> Self {
        Self {
            speed: (1.0, 2.0),
            lateral_offset: (-0.75, 0.75),
            heading: (-0.1, 0.1),
            n_cars: (10, 50),
            gap: 6.0,
            ego_start: 30.0,
            blocked_position: 100.0,
            vehicle_length: 4.0,
            vehicle_width: 1.8,
        }
    }
}

impl InitialSceneParams {
    pub fn with_cars(self, n: u32) -> Self {
        Self {
            n_cars: (n, n),
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub collision: f64,
    /// Multiplies `|v_ego - v_desired|`.
    pub speed: f64,
    /// Per simulation step in the top lane, merge task only.
    pub top_lane: f64,
    /// Once, when the ego's rear bumper clears the blocked vehicle.
    pub pass_blockage: f64,
    /// Desired ego speed for the merge task, m/s.
    pub merge_desired_speed: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            collision: -1.0,
            speed: -0.001,
            top_lane: 0.01,
            pass_blockage: 1.0,
            merge_desired_speed: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

/// Level-k networks available to non-ego vehicles.
pub type PolicyTable = BTreeMap<u8, Arc<QNetwork>>;

/// Advances one vehicle by one simulation step.
///
/// Positions move with the old velocities and velocities with the applied
/// accelerations. The direction of travel (`steering_angle`) may turn by at
/// most `steering_rate_max * dt` per step and never exceed
/// `steering_angle_max`; when a request would break either limit the lateral
/// velocity is set to `v_lon * tan(limited angle)` instead. A stopped vehicle
/// therefore cannot move sideways.
pub fn integrate_state(
    state: &VehicleState,
    a_lon: f64,
    a_lat: f64,
    cfg: &SimConfig,
    road: &RoadGeometry,
) -> VehicleState {
    let dt = cfg.dt;
    let lat = state.global_lat(road) + state.v_lat * dt;
    let v_lon = (state.v_lon + a_lon * dt).max(0.0);
    let requested = state.v_lat + a_lat * dt;
    let wanted = requested.atan2(v_lon);
    let max_delta = cfg.steering_rate_max * dt;
    let limited = (state.steering_angle + (wanted - state.steering_angle).clamp(-max_delta, max_delta))
        .clamp(-cfg.steering_angle_max, cfg.steering_angle_max);
    let (v_lat, angle) = if limited == wanted {
        (requested, wanted)
    } else {
        (v_lon * limited.tan(), limited)
    };
    let (lane_id, p_lat) = lane_attribution(lat, road);
    VehicleState {
        p_lon: state.p_lon + state.v_lon * dt,
        p_lat,
        v_lon,
        v_lat,
        heading: angle,
        steering_angle: angle,
        lane_id,
        length: state.length,
        width: state.width,
    }
}

/// Builds the initial scene: the ego (id 0), the blocked vehicle (id 1) and
/// `n_cars` level-0 drivers (ids 2..). Cars alternate between the top and
/// bottom lane and fill each lane from the rear on a grid of pitch
/// `length + gap`; the top-lane grid is shifted by half a pitch. A merging
/// ego has a clear bottom lane up to the blocked vehicle.
pub fn generate_initial_scene<R: rand::Rng + ?Sized>(
    rng: &mut R,
    params: &InitialSceneParams,
    road: &RoadGeometry,
    task: Task,
) -> Result<Scene, SimError> {
    let n_cars = rng.gen_range(params.n_cars.0..=params.n_cars.1) as usize;
    let pitch = params.vehicle_length + params.gap;
    let grid_offset = |lane: usize| if lane == TOP_LANE { 0.5 * pitch } else { 0.0 };
    let ego_lane = task.start_lane();
    let ego_pos = params.ego_start + grid_offset(ego_lane);

    let occupied: [Vec<f64>; 2] = {
        let mut o = [Vec::new(), Vec::new()];
        o[ego_lane].push(ego_pos);
        o[BOTTOM_LANE].push(params.blocked_position);
        o
    };
    let mut free: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for lane in [BOTTOM_LANE, TOP_LANE] {
        let origin = params.ego_start + grid_offset(lane);
        let first = (-origin / pitch).ceil() as i64;
        let last = ((road.road_length - origin) / pitch).floor() as i64;
        for i in first..=last {
            let x = origin + i as f64 * pitch;
            let clear_run = task == Task::Merge
                && lane == BOTTOM_LANE
                && x > ego_pos
                && x < params.blocked_position;
            if !clear_run && occupied[lane].iter().all(|o| (x - o).abs() >= pitch - 1e-9) {
                free[lane].push(x);
            }
        }
    }
    let capacity = free[0].len() + free[1].len();
    if n_cars > capacity {
        return Err(SimError::RoadTooShort {
            road_length: road.road_length,
            capacity,
            requested: n_cars,
        });
    }

    let base = |p_lon: f64, lane: usize| VehicleState {
        p_lon,
        p_lat: 0.0,
        v_lon: 0.0,
        v_lat: 0.0,
        heading: 0.0,
        steering_angle: 0.0,
        lane_id: lane,
        length: params.vehicle_length,
        width: params.vehicle_width,
    };

    let mut vehicles = Vec::with_capacity(n_cars + 2);
    let ego_speed = rng.gen_range(params.speed.0..=params.speed.1);
    vehicles.push(Vehicle {
        id: VehicleId(0),
        state: VehicleState {
            v_lon: ego_speed,
            ..base(ego_pos, ego_lane)
        },
        behavior: Behavior::Agent { task },
        control: Control {
            target_lane: ego_lane,
            desired_speed: ego_speed,
            action: None,
        },
    });
    vehicles.push(Vehicle {
        id: VehicleId(1),
        state: base(params.blocked_position, BOTTOM_LANE),
        behavior: Behavior::Stopped,
        control: Control {
            target_lane: BOTTOM_LANE,
            desired_speed: 0.0,
            action: None,
        },
    });

    let mut next = [0usize; 2];
    for k in 0..n_cars {
        let preferred = if k % 2 == 0 { TOP_LANE } else { BOTTOM_LANE };
        let lane = if next[preferred] < free[preferred].len() {
            preferred
        } else {
            1 - preferred
        };
        let p_lon = free[lane][next[lane]];
        next[lane] += 1;

        let v0 = rng.gen_range(params.speed.0..=params.speed.1);
        let offset = rng.gen_range(params.lateral_offset.0..=params.lateral_offset.1);
        let phi = rng.gen_range(params.heading.0..=params.heading.1);
        let cidm = sample_driver_params(rng);
        let yields = sample_yield(&cidm, rng);
        let role = if lane == TOP_LANE {
            Role::KeepLane
        } else {
            Role::Merge
        };
        vehicles.push(Vehicle {
            id: VehicleId(k as u32 + 2),
            state: VehicleState {
                p_lat: offset,
                v_lon: v0 * phi.cos(),
                v_lat: v0 * phi.sin(),
                heading: phi,
                steering_angle: phi,
                ..base(p_lon, lane)
            },
            behavior: Behavior::Rule {
                params: cidm,
                yields,
                role,
            },
            control: Control {
                target_lane: lane,
                desired_speed: cidm.desired_speed,
                action: None,
            },
        });
    }

    Ok(Scene {
        time: 0.0,
        road: *road,
        vehicles,
        ego_id: VehicleId(0),
        blocked_id: VehicleId(1),
    })
}

/// Oriented rectangle of a vehicle in the road frame.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Footprint {
    center: (f64, f64),
    axis: (f64, f64),
    half_length: f64,
    half_width: f64,
}

impl Footprint {
    pub(crate) fn of(state: &VehicleState, road: &RoadGeometry) -> Self {
        Self {
            center: (state.p_lon, state.global_lat(road)),
            axis: (state.heading.cos(), state.heading.sin()),
            half_length: 0.5 * state.length,
            half_width: 0.5 * state.width,
        }
    }

    #[cfg(test)]
    pub(crate) fn corners(&self) -> [(f64, f64); 4] {
        let (cx, cy) = self.center;
        let (ux, uy) = self.axis;
        let (nx, ny) = (-uy, ux);
        let (l, w) = (self.half_length, self.half_width);
        [
            (cx + ux * l + nx * w, cy + uy * l + ny * w),
            (cx - ux * l + nx * w, cy - uy * l + ny * w),
            (cx - ux * l - nx * w, cy - uy * l - ny * w),
            (cx + ux * l - nx * w, cy + uy * l - ny * w),
        ]
    }

    fn project(&self, axis: (f64, f64)) -> (f64, f64) {
        let c = self.center.0 * axis.0 + self.center.1 * axis.1;
        let r = self.half_length * (self.axis.0 * axis.0 + self.axis.1 * axis.1).abs()
            + self.half_width * (-self.axis.1 * axis.0 + self.axis.0 * axis.1).abs();
        (c - r, c + r)
    }

    /// Separating-axis test; touching rectangles do not overlap.
    pub(crate) fn overlaps(&self, other: &Footprint) -> bool {
        let axes = [
            self.axis,
            (-self.axis.1, self.axis.0),
            other.axis,
            (-other.axis.1, other.axis.0),
        ];
        axes.iter().all(|&axis| {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            a1 > b0 && b1 > a0
        })
    }

    fn reach(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }
}

/// All overlapping pairs, each as `(smaller id, larger id)`, sorted.
pub fn detect_collisions(scene: &Scene) -> Vec<(VehicleId, VehicleId)> {
    let prints: Vec<Footprint> = scene
        .vehicles
        .iter()
        .map(|v| Footprint::of(&v.state, &scene.road))
        .collect();
    let mut order: Vec<usize> = (0..prints.len()).collect();
    order.sort_by(|&a, &b| prints[a].center.0.total_cmp(&prints[b].center.0));
    let mut pairs = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if prints[j].center.0 - prints[i].center.0 > prints[i].reach() + prints[j].reach() {
                break;
            }
            if prints[i].overlaps(&prints[j]) {
                let (a, b) = (scene.vehicles[i].id, scene.vehicles[j].id);
                pairs.push((a.min(b), a.max(b)));
            }
        }
    }
    pairs.sort();
    pairs
}

fn collides_with_any(scene: &Scene, idx: usize) -> bool {
    let me = Footprint::of(&scene.vehicles[idx].state, &scene.road);
    scene.vehicles.iter().enumerate().any(|(j, v)| {
        j != idx
            && (v.state.p_lon - me.center.0).abs() <= me.reach() + 0.5 * v.state.length.hypot(v.state.width)
            && me.overlaps(&Footprint::of(&v.state, &scene.road))
    })
}

fn ego_in_collision(scene: &Scene) -> bool {
    scene
        .index_of(scene.ego_id)
        .map(|i| collides_with_any(scene, i))
        .unwrap_or(false)
}

fn passed_blockage(scene: &Scene) -> bool {
    scene.ego().state.rear() > scene.blocked().state.front()
}

/// Reward for the transition `prev -> next` of one decision step.
pub fn compute_reward(
    prev: &Scene,
    next: &Scene,
    task: Task,
    v_desired: f64,
    w: &RewardWeights,
) -> f64 {
    let mut r = 0.0;
    if ego_in_collision(next) && !ego_in_collision(prev) {
        r += w.collision;
    }
    let ego = &next.ego().state;
    r += w.speed * (ego.v_lon - v_desired).abs();
    if task == Task::Merge && ego.lane_id == TOP_LANE {
        r += w.top_lane;
    }
    if passed_blockage(next) && !passed_blockage(prev) {
        r += w.pass_blockage;
    }
    r
}

/// One row of an episode trace: a vehicle's state after a simulation step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub vehicle_id: VehicleId,
    pub lane_id: usize,
    pub p_lon: f64,
    pub p_lat: f64,
    pub v_lon: f64,
    pub v_lat: f64,
    pub heading: f64,
    /// Ego rows only: action in force.
    pub action: Option<usize>,
    /// Ego rows only: reward earned over this step.
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionStep {
    pub reward: f64,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub outcome: Outcome,
    pub task: Task,
    pub elapsed: f64,
    pub sim_steps: u32,
    pub total_reward: f64,
    pub passed_blockage: bool,
    /// Newly overlapping pairs not involving the ego.
    pub other_collisions: u32,
    /// Ego lane after every simulation step.
    pub ego_lanes: Vec<u8>,
    pub trace: Option<Vec<TraceRow>>,
}

/// A running episode. The ego is either rule-driven or controlled through
/// the action passed to [`Episode::step`].
#[derive(Debug, Clone)]
pub struct Episode {
    scene: Scene,
    cfg: SimConfig,
    weights: RewardWeights,
    task: Task,
    ego_desired_speed: f64,
    policies: Arc<PolicyTable>,
    ego_idx: usize,
    steps: u32,
    dwell: u32,
    left_top: bool,
    total_reward: f64,
    other_collisions: u32,
    colliding: HashSet<(VehicleId, VehicleId)>,
    ego_lanes: Vec<u8>,
    trace: Option<Vec<TraceRow>>,
    outcome: Option<Outcome>,
}


impl Episode {
    /// `ego_desired_speed` is the reference of the reward's speed term.
    pub fn new(
        scene: Scene,
        cfg: SimConfig,
        weights: RewardWeights,
        task: Task,
        ego_desired_speed: f64,
        policies: Arc<PolicyTable>,
    ) -> Result<Self, SimError> {
        let ego_idx = scene.index_of(scene.ego_id)?;
        for v in &scene.vehicles {
            if let Behavior::Learned { level, .. } = v.behavior {
                if !policies.contains_key(&level) {
                    return Err(SimError::MissingPolicy(level));
                }
            }
        }
        Ok(Self {
            scene,
            cfg,
            weights,
            task,
            ego_desired_speed,
            policies,
            ego_idx,
            steps: 0,
            dwell: 0,
            left_top: false,
            total_reward: 0.0,
            other_collisions: 0,
            colliding: HashSet::new(),
            ego_lanes: Vec::new(),
            trace: None,
            outcome: None,
        })
    }

    /// Records one trace row per vehicle per simulation step.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn ego_is_agent(&self) -> bool {
        matches!(self.scene.vehicles[self.ego_idx].behavior, Behavior::Agent { .. })
    }

    pub fn observe_ego(&self) -> Observation {
        observe_index(&self.scene, self.ego_idx)
    }

    fn decide(&self, idx: usize, ego_action: Option<Action>) -> Result<Control, SimError> {
        let v = &self.scene.vehicles[idx];
        let from_action = |a: Action| Control {
            target_lane: match a.lateral {
                LateralCommand::Stay => v.control.target_lane,
                LateralCommand::ChangeLane => 1 - v.control.target_lane,
            },
            desired_speed: a.desired_speed(),
            action: Some(a.index()),
        };
        Ok(match &v.behavior {
            Behavior::Stopped => v.control,
            Behavior::Rule { params, role, .. } => Control {
                target_lane: level0_target_lane(&self.scene, idx, params, *role, &self.cfg.mobil),
                ..v.control
            },
            Behavior::Agent { .. } => from_action(ego_action.ok_or(SimError::MissingEgoAction)?),
            Behavior::Learned { level, .. } => {
                let net = self
                    .policies
                    .get(level)
                    .ok_or(SimError::MissingPolicy(*level))?;
                let features = observe_index(&self.scene, idx).features();
                from_action(decode_action(net.greedy_action(&features))?)
            }
        })
    }

    fn accelerations(&self, idx: usize) -> (f64, f64) {
        let scene = &self.scene;
        let v = &scene.vehicles[idx];
        let s = &v.state;
        let stop = -s.v_lon / self.cfg.dt;
        let a_lon = match &v.behavior {
            Behavior::Stopped => return (0.0, 0.0),
            Behavior::Rule { params, yields, .. } => {
                cidm_index(scene, idx, params, *yields).unwrap_or(stop)
            }
            Behavior::Learned { .. } | Behavior::Agent { .. } => {
                let params = CidmParams::SHIELD.with_desired_speed(v.control.desired_speed);
                let res = match scene.nearest_ahead(idx, s.lane_id) {
                    Some((j, gap)) => {
                        idm_acceleration(s.v_lon, gap, s.v_lon - scene.vehicles[j].state.v_lon, &params)
                    }
                    None => idm_acceleration(s.v_lon, f64::INFINITY, 0.0, &params),
                };
                res.unwrap_or(stop)
            }
        };
        let a_lat = pd_lateral(
            s.global_lat(&scene.road) - scene.road.centerline(v.control.target_lane),
            s.v_lat,
            &self.cfg.gains,
        );
        (a_lon, a_lat)
    }

    /// Runs one decision period. `ego_action` is required when the ego is
    /// externally controlled and ignored otherwise.
    pub fn step(&mut self, ego_action: Option<Action>) -> Result<DecisionStep, SimError> {
        if self.outcome.is_some() {
            return Err(SimError::Finished);
        }
        let controls = (0..self.scene.vehicles.len())
            .map(|i| self.decide(i, ego_action))
            .collect::<Result<Vec<_>, _>>()?;
        for (v, c) in self.scene.vehicles.iter_mut().zip(controls) {
            v.control = c;
        }

        let max_steps = self.cfg.max_steps();
        let dwell_steps = self.cfg.dwell_steps();
        let mut reward = 0.0;
        for _ in 0..self.cfg.decision_period {
            let prev = self.scene.clone();
            let accels: Vec<(f64, f64)> = (0..self.scene.vehicles.len())
                .map(|i| self.accelerations(i))
                .collect();
            let road = self.scene.road;
            for (v, (a_lon, a_lat)) in self.scene.vehicles.iter_mut().zip(accels) {
                if matches!(v.behavior, Behavior::Stopped) {
                    continue;
                }
                v.state = integrate_state(&v.state, a_lon, a_lat, &self.cfg, &road);
            }
            self.steps += 1;
            self.scene.time = self.steps as f64 * self.cfg.dt;

            let pairs = detect_collisions(&self.scene);
            let ego_id = self.scene.ego_id;
            let ego_hit = pairs.iter().any(|&(a, b)| a == ego_id || b == ego_id);
            let current: HashSet<_> = pairs
                .into_iter()
                .filter(|&(a, b)| a != ego_id && b != ego_id)
                .collect();
            self.other_collisions += current.difference(&self.colliding).count() as u32;
            self.colliding = current;

            let r = compute_reward(
                &prev,
                &self.scene,
                self.task,
                self.ego_desired_speed,
                &self.weights,
            );
            reward += r;

            let ego_lane = self.scene.vehicles[self.ego_idx].state.lane_id;
            self.ego_lanes.push(ego_lane as u8);
            if ego_lane == TOP_LANE {
                self.dwell += 1;
            } else {
                self.dwell = 0;
                self.left_top = true;
            }

            if let Some(trace) = self.trace.as_mut() {
                for (i, v) in self.scene.vehicles.iter().enumerate() {
                    let is_ego = i == self.ego_idx;
                    trace.push(TraceRow {
                        time: self.scene.time,
                        vehicle_id: v.id,
                        lane_id: v.state.lane_id,
                        p_lon: v.state.p_lon,
                        p_lat: v.state.p_lat,
                        v_lon: v.state.v_lon,
                        v_lat: v.state.v_lat,
                        heading: v.state.heading,
                        action: if is_ego { v.control.action } else { None },
                        reward: is_ego.then_some(r),
                    });
                }
            }

            self.outcome = if ego_hit {
                Some(Outcome::Collision)
            } else if self.task == Task::Merge && self.dwell >= dwell_steps {
                Some(Outcome::Success)
            } else if self.steps >= max_steps {
                Some(match self.task {
                    Task::KeepLane if !self.left_top => Outcome::Success,
                    _ => Outcome::Timeout,
                })
            } else {
                None
            };
            if self.outcome.is_some() {
                break;
            }
        }

        self.total_reward += reward;
        Ok(DecisionStep {
            reward,
            done: self.outcome.is_some(),
            outcome: self.outcome,
        })
    }

    /// Consumes a finished episode.
    pub fn summary(self) -> Result<EpisodeSummary, SimError> {
        let outcome = self.outcome.ok_or(SimError::Finished)?;
        Ok(EpisodeSummary {
            outcome,
            task: self.task,
            elapsed: self.scene.time,
            sim_steps: self.steps,
            total_reward: self.total_reward,
            passed_blockage: passed_blockage(&self.scene),
            other_collisions: self.other_collisions,
            ego_lanes: self.ego_lanes,
            trace: self.trace,
        })
    }
}

/// Runs an episode to completion. `ego_policy` is consulted at every
/// decision step when the ego is externally controlled; the ego's
/// transitions are returned for training.
pub fn run_episode(
    mut episode: Episode,
    ego_policy: &mut dyn FnMut(&Observation) -> Action,
) -> Result<(EpisodeSummary, Vec<Experience>), SimError> {
    let agent = episode.ego_is_agent();
    let mut transitions = Vec::new();
    while !episode.is_done() {
        if agent {
            let obs = episode.observe_ego();
            let action = ego_policy(&obs);
            let step = episode.step(Some(action))?;
            transitions.push(Experience {
                state: obs.features().to_vec(),
                action: action.index(),
                reward: step.reward,
                next_state: episode.observe_ego().features().to_vec(),
                done: step.done,
            });
        } else {
            episode.step(None)?;
        }
    }
    Ok((episode.summary()?, transitions))
}
