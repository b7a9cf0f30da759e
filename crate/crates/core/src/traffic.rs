//! Road geometry, vehicle state, the discrete action set and ego-relative
//! observations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{CidmParams, Role};
use crate::sim::Task;

pub const LANE_COUNT: usize = 2;
/// Lane the ego starts in for the merge task.
pub const BOTTOM_LANE: usize = 0;
/// Target lane of the merge task.
pub const TOP_LANE: usize = 1;

pub const ACTION_COUNT: usize = 6;
pub const SPEED_LEVELS: [f64; 3] = [0.0, 3.0, 5.0];

pub const FIELD_OF_VIEW: f64 = 30.0;
pub const NEIGHBOR_SLOTS: usize = 8;
pub const SLOT_FEATURES: usize = 4;
pub const EGO_FEATURES: usize = 4;
pub const OBS_DIM: usize = EGO_FEATURES + NEIGHBOR_SLOTS * SLOT_FEATURES;

/// Normalization scales applied by [`Observation::features`].
pub const LON_SCALE: f64 = 30.0;
pub const LAT_SCALE: f64 = 3.0;
pub const SPEED_SCALE: f64 = 5.0;
pub const HEADING_SCALE: f64 = 0.5;

/// Raw feature block describing an absent vehicle.
pub const SENTINEL: [f64; SLOT_FEATURES] = [FIELD_OF_VIEW, 0.0, 0.0, 0.0];

/// Network input: the normalized observation.
pub type Features = [f64; OBS_DIM];

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("action index {0} out of range 0..{ACTION_COUNT}")]
    ActionOutOfRange(usize),
    #[error("unknown vehicle {0:?}")]
    UnknownVehicle(VehicleId),
}

/// Straight two-lane corridor. Lane 0 is the bottom lane, lane 1 the top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadGeometry {
    pub lane_width: f64,
    pub road_length: f64,
}

impl Default for RoadGeometry {
    fn default() -> Self {
        Self {
            lane_width: 3.0,
            road_length: 300.0,
        }
    }
}

impl RoadGeometry {
    pub fn lane_count(&self) -> usize {
        LANE_COUNT
    }

    /// Lateral coordinate of a lane centerline in the road frame, measured
    /// from the bottom centerline.
    pub fn centerline(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }
}

/// Maps a road-frame lateral coordinate to the nearest lane and the offset
/// from its centerline. The midpoint between the centerlines belongs to the
/// lower lane.
pub fn lane_attribution(p_lat_global: f64, road: &RoadGeometry) -> (usize, f64) {
    let lane = if p_lat_global > 0.5 * road.lane_width {
        TOP_LANE
    } else {
        BOTTOM_LANE
    };
    (lane, p_lat_global - road.centerline(lane))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Along the centerline, meters.
    pub p_lon: f64,
    /// Signed offset from the centerline of `lane_id`, meters.
    pub p_lat: f64,
    pub v_lon: f64,
    pub v_lat: f64,
    /// Relative to the centerline, radians.
    pub heading: f64,
    pub steering_angle: f64,
    pub lane_id: usize,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn global_lat(&self, road: &RoadGeometry) -> f64 {
        road.centerline(self.lane_id) + self.p_lat
    }

    pub fn rear(&self) -> f64 {
        self.p_lon - 0.5 * self.length
    }

    pub fn front(&self) -> f64 {
        self.p_lon + 0.5 * self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VehicleId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LateralCommand {
    /// Keep tracking the current target lane, finishing any lane change.
    Stay,
    /// Switch the target to the other lane, which turns back a lane change
    /// in progress.
    ChangeLane,
}

/// One of the six high-level actions: a desired speed and a lateral command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    speed_idx: usize,
    pub lateral: LateralCommand,
}

impl Action {
    pub fn new(desired_speed_idx: usize, lateral: LateralCommand) -> Self {
        assert!(desired_speed_idx < SPEED_LEVELS.len());
        Self {
            speed_idx: desired_speed_idx,
            lateral,
        }
    }

    pub fn desired_speed(&self) -> f64 {
        SPEED_LEVELS[self.speed_idx]
    }

    /// `index = 2 * speed_idx + lateral_idx`.
    pub fn index(&self) -> usize {
        let lat = match self.lateral {
            LateralCommand::Stay => 0,
            LateralCommand::ChangeLane => 1,
        };
        2 * self.speed_idx + lat
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..ACTION_COUNT).map(|i| decode_action(i).expect("in range"))
    }
}

pub fn decode_action(index: usize) -> Result<Action, TrafficError> {
    if index >= ACTION_COUNT {
        return Err(TrafficError::ActionOutOfRange(index));
    }
    let lateral = if index % 2 == 0 {
        LateralCommand::Stay
    } else {
        LateralCommand::ChangeLane
    };
    Ok(Action::new(index / 2, lateral))
}

/// How a vehicle is driven.
#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    /// The broken-down vehicle; never moves.
    Stopped,
    /// Level-0 rule-based driver. `yields` is the per-episode Bernoulli(c)
    /// draw.
    Rule {
        params: CidmParams,
        yields: bool,
        role: Role,
    },
    /// Greedy level-k policy taken from the registry.
    Learned { level: u8, task: Task },
    /// Actions are supplied from outside the simulator (the learning ego).
    Agent { task: Task },
}

/// Per-vehicle control targets, refreshed at each decision step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub target_lane: usize,
    pub desired_speed: f64,
    /// Last action index chosen by a policy-driven vehicle.
    pub action: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: VehicleId,
    pub state: VehicleState,
    pub behavior: Behavior,
    pub control: Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub time: f64,
    pub road: RoadGeometry,
    pub vehicles: Vec<Vehicle>,
    pub ego_id: VehicleId,
    pub blocked_id: VehicleId,
}

impl Scene {
    pub fn index_of(&self, id: VehicleId) -> Result<usize, TrafficError> {
        self.vehicles
            .iter()
            .position(|v| v.id == id)
            .ok_or(TrafficError::UnknownVehicle(id))
    }

    pub fn vehicle(&self, id: VehicleId) -> Result<&Vehicle, TrafficError> {
        self.index_of(id).map(|i| &self.vehicles[i])
    }

    pub fn ego(&self) -> &Vehicle {
        self.vehicle(self.ego_id).expect("scene always holds its ego")
    }

    pub fn blocked(&self) -> &Vehicle {
        self.vehicle(self.blocked_id)
            .expect("scene always holds the blocked vehicle")
    }

    /// Nearest vehicle whose center is strictly ahead of `subject` in
    /// `lane`, with the bumper-to-bumper gap.
    pub fn nearest_ahead(&self, subject: usize, lane: usize) -> Option<(usize, f64)> {
        let s = &self.vehicles[subject].state;
        self.vehicles
            .iter()
            .enumerate()
            .filter(|(i, v)| *i != subject && v.state.lane_id == lane && v.state.p_lon > s.p_lon)
            .min_by(|a, b| a.1.state.p_lon.total_cmp(&b.1.state.p_lon))
            .map(|(i, v)| (i, v.state.rear() - s.front()))
    }

    /// Nearest vehicle whose center is strictly behind `subject` in `lane`,
    /// with the bumper-to-bumper gap.
    pub fn nearest_behind(&self, subject: usize, lane: usize) -> Option<(usize, f64)> {
        let s = &self.vehicles[subject].state;
        self.vehicles
            .iter()
            .enumerate()
            .filter(|(i, v)| *i != subject && v.state.lane_id == lane && v.state.p_lon < s.p_lon)
            .max_by(|a, b| a.1.state.p_lon.total_cmp(&b.1.state.p_lon))
            .map(|(i, v)| (i, s.rear() - v.state.front()))
    }
}

/// Ego-relative view of a scene.
///
/// The ego block is `[lateral position in the road frame, v_lon, v_lat,
/// heading]`. Each neighbor slot is `[rel_p_lon, rel_p_lat, rel_v_lon,
/// rel_v_lat]`, ordered by ascending absolute longitudinal distance; unused
/// slots hold [`SENTINEL`]. Values are raw (SI units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub ego: [f64; EGO_FEATURES],
    pub neighbors: [[f64; SLOT_FEATURES]; NEIGHBOR_SLOTS],
}

impl Observation {
    pub fn is_sentinel(slot: &[f64; SLOT_FEATURES]) -> bool {
        *slot == SENTINEL
    }

    pub fn occupied_slots(&self) -> usize {
        self.neighbors
            .iter()
            .filter(|s| !Self::is_sentinel(s))
            .count()
    }

    /// Normalized network input.
    pub fn features(&self) -> Features {
        let mut out = [0.0; OBS_DIM];
        out[0] = self.ego[0] / LAT_SCALE;
        out[1] = self.ego[1] / SPEED_SCALE;
        out[2] = self.ego[2] / SPEED_SCALE;
        out[3] = self.ego[3] / HEADING_SCALE;
        for (k, slot) in self.neighbors.iter().enumerate() {
            let o = EGO_FEATURES + k * SLOT_FEATURES;
            out[o] = slot[0] / LON_SCALE;
            out[o + 1] = slot[1] / LAT_SCALE;
            out[o + 2] = slot[2] / SPEED_SCALE;
            out[o + 3] = slot[3] / SPEED_SCALE;
        }
        out
    }
}

pub fn build_observation(scene: &Scene, subject: VehicleId) -> Result<Observation, TrafficError> {
    let idx = scene.index_of(subject)?;
    Ok(observe_index(scene, idx))
}

pub(crate) fn observe_index(scene: &Scene, idx: usize) -> Observation {
    let road = &scene.road;
    let s = &scene.vehicles[idx].state;
    let s_lat = s.global_lat(road);

    let mut candidates: Vec<(f64, u32, [f64; SLOT_FEATURES])> = scene
        .vehicles
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .filter_map(|(_, v)| {
            let dx = v.state.p_lon - s.p_lon;
            (dx.abs() <= FIELD_OF_VIEW).then(|| {
                (
                    dx.abs(),
                    v.id.0,
                    [
                        dx,
                        v.state.global_lat(road) - s_lat,
                        v.state.v_lon - s.v_lon,
                        v.state.v_lat - s.v_lat,
                    ],
                )
            })
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut neighbors = [SENTINEL; NEIGHBOR_SLOTS];
    for (slot, c) in neighbors.iter_mut().zip(candidates.iter()) {
        *slot = c.2;
    }
    Observation {
        ego: [s_lat, s.v_lon, s.v_lat, s.heading],
        neighbors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Task;
    use proptest::prelude::*;

    fn state(p_lon: f64, lane: usize) -> VehicleState {
        VehicleState {
            p_lon,
            p_lat: 0.0,
            v_lon: 1.0,
            v_lat: 0.0,
            heading: 0.0,
            steering_angle: 0.0,
            lane_id: lane,
            length: 4.0,
            width: 1.8,
        }
    }

    fn vehicle(id: u32, p_lon: f64, lane: usize) -> Vehicle {
        Vehicle {
            id: VehicleId(id),
            state: state(p_lon, lane),
            behavior: Behavior::Stopped,
            control: Control {
                target_lane: lane,
                desired_speed: 0.0,
                action: None,
            },
        }
    }

    fn scene(vehicles: Vec<Vehicle>) -> Scene {
        Scene {
            time: 0.0,
            road: RoadGeometry::default(),
            ego_id: vehicles[0].id,
            blocked_id: vehicles[0].id,
            vehicles,
        }
    }

    #[test]
    fn action_decoding() {
        let a = decode_action(0).unwrap();
        assert_eq!(a.desired_speed(), 0.0);
        assert_eq!(a.lateral, LateralCommand::Stay);
        let a = decode_action(5).unwrap();
        assert_eq!(a.desired_speed(), 5.0);
        assert_eq!(a.lateral, LateralCommand::ChangeLane);
        for i in 0..ACTION_COUNT {
            assert_eq!(decode_action(i).unwrap().index(), i);
        }
        assert_eq!(Action::all().count(), 6);
        assert_eq!(
            decode_action(6).unwrap_err(),
            TrafficError::ActionOutOfRange(6)
        );
    }

    #[test]
    fn attribution_cases() {
        let road = RoadGeometry::default();
        assert_eq!(lane_attribution(0.0, &road), (0, 0.0));
        assert_eq!(lane_attribution(road.lane_width, &road), (1, 0.0));
        assert_eq!(
            lane_attribution(road.lane_width / 2.0, &road),
            (0, road.lane_width / 2.0)
        );
        let (lane, p) = lane_attribution(1.6, &road);
        assert_eq!(lane, 1);
        assert!((p + 1.4).abs() < 1e-12);
    }

    #[test]
    fn lone_vehicle_sees_only_sentinels() {
        let sc = scene(vec![vehicle(0, 50.0, 0)]);
        let obs = build_observation(&sc, VehicleId(0)).unwrap();
        assert!(obs.neighbors.iter().all(|s| *s == SENTINEL));
        assert_eq!(obs.occupied_slots(), 0);
    }

    #[test]
    fn vehicle_beyond_field_of_view_is_excluded() {
        let sc = scene(vec![vehicle(0, 50.0, 0), vehicle(1, 81.0, 1)]);
        let obs = build_observation(&sc, VehicleId(0)).unwrap();
        assert_eq!(obs.occupied_slots(), 0);
        let sc = scene(vec![vehicle(0, 50.0, 0), vehicle(1, 80.0, 1)]);
        let obs = build_observation(&sc, VehicleId(0)).unwrap();
        assert_eq!(obs.occupied_slots(), 1);
    }

    #[test]
    fn keeps_the_eight_nearest_in_order() {
        let mut vs = vec![vehicle(0, 50.0, 0)];
        // Insert out of order and on both sides.
        for (k, d) in [7.0, -3.0, 10.0, 1.0, -9.0, 5.0, 2.0, -6.0, 4.0, 8.0]
            .iter()
            .enumerate()
        {
            vs.push(vehicle(k as u32 + 1, 50.0 + d, k % 2));
        }
        let sc = scene(vs);
        let obs = build_observation(&sc, VehicleId(0)).unwrap();
        let got: Vec<f64> = obs.neighbors.iter().map(|s| s[0].abs()).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn unknown_subject_rejected() {
        let sc = scene(vec![vehicle(0, 50.0, 0)]);
        assert_eq!(
            build_observation(&sc, VehicleId(9)).unwrap_err(),
            TrafficError::UnknownVehicle(VehicleId(9))
        );
    }

    #[test]
    fn sentinel_normalizes_to_unit_distance() {
        let sc = scene(vec![vehicle(0, 50.0, 0)]);
        let f = build_observation(&sc, VehicleId(0)).unwrap().features();
        assert_eq!(&f[4..8], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn neighbor_scan_finds_leader_and_follower() {
        let sc = scene(vec![
            vehicle(0, 50.0, 0),
            vehicle(1, 60.0, 0),
            vehicle(2, 70.0, 0),
            vehicle(3, 40.0, 0),
            vehicle(4, 55.0, 1),
        ]);
        assert_eq!(sc.nearest_ahead(0, 0), Some((1, 6.0)));
        assert_eq!(sc.nearest_behind(0, 0), Some((3, 6.0)));
        assert_eq!(sc.nearest_ahead(0, 1), Some((4, 1.0)));
        assert_eq!(sc.nearest_behind(0, 1), None);
        let _ = Task::Merge;
    }

    fn arb_scene() -> impl Strategy<Value = Scene> {
        prop::collection::vec((-240i32..240, 0usize..2, -1.4f64..1.4, 0.0f64..5.0), 0..24)
            .prop_map(|others| {
                let mut vs = vec![vehicle(0, 100.0, 0)];
                for (k, (dx, lane, lat, v)) in others.into_iter().enumerate() {
                    let mut veh = vehicle(k as u32 + 1, 100.0 + f64::from(dx) * 0.25, lane);
                    veh.state.p_lat = lat;
                    veh.state.v_lon = v;
                    vs.push(veh);
                }
                scene(vs)
            })
    }

    proptest! {
        #[test]
        fn occupied_slot_count_matches_brute_force(sc in arb_scene()) {
            let obs = build_observation(&sc, VehicleId(0)).unwrap();
            let in_range = sc.vehicles[1..]
                .iter()
                .filter(|v| (v.state.p_lon - 100.0).abs() <= FIELD_OF_VIEW)
                .count();
            prop_assert_eq!(obs.occupied_slots(), in_range.min(NEIGHBOR_SLOTS));
            for s in obs.neighbors.iter().filter(|s| !Observation::is_sentinel(s)) {
                prop_assert!(s[0].abs() <= FIELD_OF_VIEW);
            }
        }

        #[test]
        fn observation_is_translation_invariant(sc in arb_scene(), shift in -200i32..200) {
            // Quarter-meter grid keeps the shifted differences exact.
            let shift = f64::from(shift) * 0.25;
            let a = build_observation(&sc, VehicleId(0)).unwrap();
            let mut moved = sc.clone();
            for v in &mut moved.vehicles {
                v.state.p_lon += shift;
            }
            let b = build_observation(&moved, VehicleId(0)).unwrap();
            prop_assert_eq!(a.ego, b.ego);
            prop_assert_eq!(a.neighbors, b.neighbors);
        }

        #[test]
        fn observation_is_pure(sc in arb_scene()) {
            let a = build_observation(&sc, VehicleId(0)).unwrap().features();
            let b = build_observation(&sc.clone(), VehicleId(0)).unwrap().features();
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
