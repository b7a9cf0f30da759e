//! Rule-based driving: IDM, cooperative IDM with a yield area, MOBIL lane
//! changes, the PD lateral controller and the composed level-0 driver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traffic::{Behavior, LateralCommand, Scene, TrafficError, VehicleId, TOP_LANE};

#[derive(Debug, Error, PartialEq)]
pub enum DriverError {
    #[error("non-positive gap {gap} to leader: vehicles already overlap")]
    Colliding { gap: f64 },
    #[error(transparent)]
    Traffic(#[from] TrafficError),
}

/// One driver's cooperative-IDM parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CidmParams {
    /// Yield-area extent as a fraction of lane width.
    pub eta_percept: f64,
    /// Probability of yielding to a merging vehicle.
    pub cooperation: f64,
    /// Acceleration exponent δ.
    pub delta: f64,
    /// Desired time gap, s.
    pub time_gap: f64,
    /// Minimum standstill gap, m.
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub desired_speed: f64,
}

impl CidmParams {
    /// Longitudinal law used under the IDM shield by policy-driven vehicles:
    /// the center of the level-0 distribution, never yielding. The desired
    /// speed is replaced by the chosen action.
    pub const SHIELD: CidmParams = CidmParams {
        eta_percept: 0.0,
        cooperation: 0.0,
        delta: 4.0,
        time_gap: 4.0,
        min_gap: 1.5,
        max_accel: 3.0,
        comfort_decel: 2.0,
        desired_speed: 5.0,
    };

    pub fn with_desired_speed(self, desired_speed: f64) -> Self {
        Self {
            desired_speed,
            ..self
        }
    }

    /// Whether every field lies in the support of the level-0 distribution.
    pub fn within_support(&self) -> bool {
        let within = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
        within(self.eta_percept, ETA_RANGE)
            && within(self.cooperation, COOPERATION_RANGE)
            && within(self.delta, DELTA_RANGE)
            && within(self.time_gap, TIME_GAP_RANGE)
            && within(self.min_gap, MIN_GAP_RANGE)
            && within(self.max_accel, MAX_ACCEL_RANGE)
            && within(self.comfort_decel, COMFORT_DECEL_RANGE)
            && within(self.desired_speed, DESIRED_SPEED_RANGE)
    }
}

pub const ETA_RANGE: (f64, f64) = (-0.15, 0.15);
pub const COOPERATION_RANGE: (f64, f64) = (0.0, 1.0);
pub const DELTA_RANGE: (f64, f64) = (3.5, 4.5);
pub const TIME_GAP_RANGE: (f64, f64) = (3.5, 4.5);
pub const MIN_GAP_RANGE: (f64, f64) = (1.0, 2.0);
pub const MAX_ACCEL_RANGE: (f64, f64) = (2.5, 3.5);
pub const COMFORT_DECEL_RANGE: (f64, f64) = (1.5, 2.5);
pub const DESIRED_SPEED_RANGE: (f64, f64) = (2.0, 5.0);

/// Longitudinal reach of the yield area ahead of a driver, m.
pub const YIELD_AREA_LENGTH: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilParams {
    pub politeness: f64,
    /// Incentive threshold Δa_th, m/s².
    pub threshold: f64,
    /// Maximum deceleration imposed on the new follower, m/s².
    pub safe_braking: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self {
            politeness: 0.5,
            threshold: 0.1,
            safe_braking: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    /// 1/s².
    pub kp: f64,
    /// 1/s.
    pub kd: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { kp: 3.0, kd: 3.0 }
    }
}

/// Which maneuver a level-0 driver performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Seeks the top lane with MOBIL, re-evaluated every decision step.
    Merge,
    KeepLane,
}

/// Intelligent driver model.
///
/// `gap` is bumper-to-bumper; pass `f64::INFINITY` for a free road.
/// `closing_speed` is `v - v_leader`. A non-positive desired speed commands
/// a comfortable stop: the free-road term becomes `-comfort_decel` while
/// moving and zero at standstill.
pub fn idm_acceleration(
    v: f64,
    gap: f64,
    closing_speed: f64,
    params: &CidmParams,
) -> Result<f64, DriverError> {
    if gap <= 0.0 {
        return Err(DriverError::Colliding { gap });
    }
    let free = if params.desired_speed > 0.0 {
        params.max_accel * (1.0 - (v / params.desired_speed).powf(params.delta))
    } else if v > 0.0 {
        -params.comfort_decel
    } else {
        0.0
    };
    if gap.is_infinite() {
        return Ok(free);
    }
    let dynamic = v * params.time_gap
        + v * closing_speed / (2.0 * (params.max_accel * params.comfort_decel).sqrt());
    let desired_gap = params.min_gap + dynamic.max(0.0);
    Ok(free - params.max_accel * (desired_gap / gap).powi(2))
}

/// IDM against an optional leader given as `(gap, leader speed)`.
fn idm_against(v: f64, leader: Option<(f64, f64)>, params: &CidmParams) -> Result<f64, DriverError> {
    match leader {
        Some((gap, v_leader)) => idm_acceleration(v, gap, v - v_leader, params),
        None => idm_acceleration(v, f64::INFINITY, 0.0, params),
    }
}

/// Longitudinal parameters a vehicle follows, if it moves at all.
pub(crate) fn longitudinal_params(scene: &Scene, idx: usize) -> Option<CidmParams> {
    let v = &scene.vehicles[idx];
    match &v.behavior {
        Behavior::Stopped => None,
        Behavior::Rule { params, .. } => Some(*params),
        Behavior::Learned { .. } | Behavior::Agent { .. } => {
            Some(CidmParams::SHIELD.with_desired_speed(v.control.desired_speed))
        }
    }
}

/// Cooperative IDM. Besides the own-lane leader, when `yields` is set every
/// vehicle ahead in the adjacent lane within [`YIELD_AREA_LENGTH`] whose
/// lateral offset toward the subject's lane exceeds
/// `(0.5 - eta_percept) * lane_width` acts as a virtual leader. The result is
/// the most restrictive IDM acceleration over all effective leaders.
pub fn cidm_acceleration(
    scene: &Scene,
    subject: VehicleId,
    params: &CidmParams,
    yields: bool,
) -> Result<f64, DriverError> {
    let idx = scene.index_of(subject)?;
    cidm_index(scene, idx, params, yields)
}

pub(crate) fn cidm_index(
    scene: &Scene,
    idx: usize,
    params: &CidmParams,
    yields: bool,
) -> Result<f64, DriverError> {
    let s = &scene.vehicles[idx].state;
    let own = scene
        .nearest_ahead(idx, s.lane_id)
        .map(|(j, gap)| (gap, scene.vehicles[j].state.v_lon));
    let mut accel = idm_against(s.v_lon, own, params)?;
    if !yields {
        return Ok(accel);
    }
    let other_lane = 1 - s.lane_id;
    // +1 when the subject's lane lies above the other lane.
    let toward = if s.lane_id > other_lane { 1.0 } else { -1.0 };
    let threshold = (0.5 - params.eta_percept) * scene.road.lane_width;
    for (j, v) in scene.vehicles.iter().enumerate() {
        if j == idx || v.state.lane_id != other_lane || v.state.p_lon <= s.p_lon {
            continue;
        }
        let gap = v.state.rear() - s.front();
        if gap > YIELD_AREA_LENGTH || toward * v.state.p_lat <= threshold {
            continue;
        }
        let a = idm_acceleration(s.v_lon, gap, s.v_lon - v.state.v_lon, params)?;
        accel = accel.min(a);
    }
    Ok(accel)
}

/// IDM acceleration for `follower` behind `leader`, with overlapping pairs
/// mapped to a standstill request.
fn follower_accel(scene: &Scene, follower: usize, leader: Option<usize>) -> f64 {
    let Some(params) = longitudinal_params(scene, follower) else {
        return 0.0;
    };
    let f = &scene.vehicles[follower].state;
    let lead = leader.map(|l| {
        let ls = &scene.vehicles[l].state;
        (ls.rear() - f.front(), ls.v_lon)
    });
    idm_against(f.v_lon, lead, &params).unwrap_or(f64::NEG_INFINITY)
}

/// MOBIL decision for moving into the adjacent lane.
pub fn mobil_decision(
    scene: &Scene,
    subject: VehicleId,
    mobil: &MobilParams,
    cidm: &CidmParams,
) -> Result<LateralCommand, DriverError> {
    let idx = scene.index_of(subject)?;
    Ok(mobil_index(scene, idx, mobil, cidm))
}

pub(crate) fn mobil_index(
    scene: &Scene,
    idx: usize,
    mobil: &MobilParams,
    cidm: &CidmParams,
) -> LateralCommand {
    let s = &scene.vehicles[idx].state;
    let lane = s.lane_id;
    let target = 1 - lane;

    let old_leader = scene.nearest_ahead(idx, lane);
    let old_follower = scene.nearest_behind(idx, lane);
    let new_leader = scene.nearest_ahead(idx, target);
    let new_follower = scene.nearest_behind(idx, target);

    let with_speed = |l: Option<(usize, f64)>| l.map(|(j, gap)| (gap, scene.vehicles[j].state.v_lon));

    // Moving next to or into another vehicle is never safe.
    if new_leader.is_some_and(|(_, gap)| gap <= 0.0) || new_follower.is_some_and(|(_, gap)| gap <= 0.0)
    {
        return LateralCommand::Stay;
    }

    // Safety: deceleration imposed on the prospective new follower.
    let (nf_before, nf_after) = match new_follower {
        Some((nf, _)) => (
            follower_accel(scene, nf, new_leader.map(|(j, _)| j)),
            follower_accel(scene, nf, Some(idx)),
        ),
        None => (0.0, 0.0),
    };
    if nf_after < -mobil.safe_braking {
        return LateralCommand::Stay;
    }

    let Ok(current) = idm_against(s.v_lon, with_speed(old_leader), cidm) else {
        return LateralCommand::Stay;
    };
    let Ok(prospective) = idm_against(s.v_lon, with_speed(new_leader), cidm) else {
        return LateralCommand::Stay;
    };
    let (of_before, of_after) = match old_follower {
        Some((of, _)) => (
            follower_accel(scene, of, Some(idx)),
            follower_accel(scene, of, old_leader.map(|(j, _)| j)),
        ),
        None => (0.0, 0.0),
    };
    let incentive = prospective - current
        + mobil.politeness * ((nf_after - nf_before) + (of_after - of_before));
    if incentive > mobil.threshold {
        LateralCommand::ChangeLane
    } else {
        LateralCommand::Stay
    }
}

/// `a_lat = -kp * p_lat - kd * v_lat`, with `p_lat` measured from the
/// centerline of the lane being tracked.
pub fn pd_lateral(p_lat: f64, v_lat: f64, gains: &ControllerGains) -> f64 {
    -gains.kp * p_lat - gains.kd * v_lat
}

/// Draws a level-0 parameter set, each field uniform over its support.
pub fn sample_driver_params<R: rand::Rng + ?Sized>(rng: &mut R) -> CidmParams {
    let mut draw = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
    CidmParams {
        eta_percept: draw(ETA_RANGE),
        cooperation: draw(COOPERATION_RANGE),
        delta: draw(DELTA_RANGE),
        time_gap: draw(TIME_GAP_RANGE),
        min_gap: draw(MIN_GAP_RANGE),
        max_accel: draw(MAX_ACCEL_RANGE),
        comfort_decel: draw(COMFORT_DECEL_RANGE),
        desired_speed: draw(DESIRED_SPEED_RANGE),
    }
}

/// Per-episode yield stance, Bernoulli with the driver's cooperation level.
pub fn sample_yield<R: rand::Rng + ?Sized>(params: &CidmParams, rng: &mut R) -> bool {
    rng.gen::<f64>() < params.cooperation
}

/// Lane a level-0 driver steers toward at a decision step.
pub(crate) fn level0_target_lane(
    scene: &Scene,
    idx: usize,
    params: &CidmParams,
    role: Role,
    mobil: &MobilParams,
) -> usize {
    let lane = scene.vehicles[idx].state.lane_id;
    match role {
        Role::Merge if lane != TOP_LANE => match mobil_index(scene, idx, mobil, params) {
            LateralCommand::ChangeLane => TOP_LANE,
            LateralCommand::Stay => lane,
        },
        _ => lane,
    }
}

/// One level-0 control evaluation: `(a_lon, a_lat)`.
///
/// The merging role decides its desired lane with MOBIL; the keep-lane role
/// tracks its current lane.
pub fn level0_step(
    scene: &Scene,
    subject: VehicleId,
    params: &CidmParams,
    yields: bool,
    role: Role,
    mobil: &MobilParams,
    gains: &ControllerGains,
) -> Result<(f64, f64), DriverError> {
    let idx = scene.index_of(subject)?;
    let target = level0_target_lane(scene, idx, params, role, mobil);
    let s = &scene.vehicles[idx].state;
    let a_lon = cidm_index(scene, idx, params, yields)?;
    let a_lat = pd_lateral(
        s.global_lat(&scene.road) - scene.road.centerline(target),
        s.v_lat,
        gains,
    );
    Ok((a_lon, a_lat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Rng;
    use crate::traffic::{Control, RoadGeometry, Vehicle, VehicleState, BOTTOM_LANE};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn params() -> CidmParams {
        CidmParams {
            eta_percept: 0.1,
            cooperation: 0.5,
            delta: 4.0,
            time_gap: 4.0,
            min_gap: 1.5,
            max_accel: 3.0,
            comfort_decel: 2.0,
            desired_speed: 2.0,
        }
    }

    fn vehicle(id: u32, p_lon: f64, lane: usize, v: f64, behavior: Behavior) -> Vehicle {
        Vehicle {
            id: VehicleId(id),
            state: VehicleState {
                p_lon,
                p_lat: 0.0,
                v_lon: v,
                v_lat: 0.0,
                heading: 0.0,
                steering_angle: 0.0,
                lane_id: lane,
                length: 4.0,
                width: 1.8,
            },
            behavior,
            control: Control {
                target_lane: lane,
                desired_speed: 0.0,
                action: None,
            },
        }
    }

    fn rule(p: CidmParams) -> Behavior {
        Behavior::Rule {
            params: p,
            yields: false,
            role: Role::Merge,
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
    fn idm_free_road_limits() {
        let p = params();
        assert_eq!(idm_acceleration(0.0, f64::INFINITY, 0.0, &p).unwrap(), 3.0);
        assert_eq!(idm_acceleration(2.0, f64::INFINITY, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn idm_hand_evaluated_case() {
        let p = params();
        // s* = 1.5 + 2 * 4 = 9.5 = s, so a = 3 * (1 - 1 - 1).
        let a = idm_acceleration(2.0, 9.5, 0.0, &p).unwrap();
        assert!((a + 3.0).abs() < 1e-12, "{a}");
    }

    #[test]
    fn idm_rejects_overlap() {
        assert_eq!(
            idm_acceleration(1.0, 0.0, 0.0, &params()),
            Err(DriverError::Colliding { gap: 0.0 })
        );
    }

    #[test]
    fn idm_zero_desired_speed_stops() {
        let p = params().with_desired_speed(0.0);
        assert_eq!(idm_acceleration(1.0, f64::INFINITY, 0.0, &p).unwrap(), -2.0);
        assert_eq!(idm_acceleration(0.0, f64::INFINITY, 0.0, &p).unwrap(), 0.0);
        assert!(idm_acceleration(0.0, 3.0, 0.0, &p).unwrap() < 0.0);
    }

    #[test]
    fn cidm_without_cooperation_is_plain_idm() {
        let mut p = params();
        p.cooperation = 0.0;
        let mut merger = vehicle(2, 59.0, BOTTOM_LANE, 1.0, rule(p));
        merger.state.p_lat = 1.4;
        let sc = scene(vec![
            vehicle(0, 50.0, TOP_LANE, 1.5, rule(p)),
            vehicle(1, 74.0, TOP_LANE, 1.0, rule(p)),
            merger,
        ]);
        let plain = idm_acceleration(1.5, 20.0, 0.5, &p).unwrap();
        let yields = sample_yield(&p, &mut Rng::seed_from_u64(1));
        assert!(!yields);
        let a = cidm_acceleration(&sc, VehicleId(0), &p, yields).unwrap();
        assert_eq!(a, plain);
    }

    #[test]
    fn cidm_yields_to_merger_in_area() {
        let p = params();
        // Own-lane leader 20 m ahead; merger 5 m ahead straddling the
        // boundary (threshold (0.5 - 0.1) * 3 = 1.2 m).
        let mut merger = vehicle(2, 59.0, BOTTOM_LANE, 1.0, rule(p));
        merger.state.p_lat = 1.4;
        let sc = scene(vec![
            vehicle(0, 50.0, TOP_LANE, 1.0, rule(p)),
            vehicle(1, 74.0, TOP_LANE, 1.0, rule(p)),
            merger,
        ]);
        let a = cidm_acceleration(&sc, VehicleId(0), &p, true).unwrap();
        // Oracle: nearest effective leader by brute force.
        let leaders: [(f64, f64); 2] = [(20.0, 1.0), (5.0, 1.0)];
        let nearest = leaders
            .iter()
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .unwrap();
        let expected = idm_acceleration(1.0, nearest.0, 1.0 - nearest.1, &p).unwrap();
        assert_eq!(a, expected);
        assert!(a < idm_acceleration(1.0, 20.0, 0.0, &p).unwrap());
    }

    #[test]
    fn cidm_ignores_vehicles_outside_area() {
        let p = params();
        let mut low = vehicle(2, 59.0, BOTTOM_LANE, 1.0, rule(p));
        low.state.p_lat = 1.0; // below the 1.2 m threshold
        let far = {
            let mut v = vehicle(3, 75.0, BOTTOM_LANE, 1.0, rule(p));
            v.state.p_lat = 1.4; // beyond 15 m
            v
        };
        let sc = scene(vec![
            vehicle(0, 50.0, TOP_LANE, 1.0, rule(p)),
            vehicle(1, 74.0, TOP_LANE, 1.0, rule(p)),
            low,
            far,
        ]);
        let a = cidm_acceleration(&sc, VehicleId(0), &p, true).unwrap();
        assert_eq!(a, idm_acceleration(1.0, 20.0, 0.0, &p).unwrap());
    }

    #[test]
    fn mobil_stays_on_empty_road() {
        let p = params();
        let sc = scene(vec![vehicle(0, 50.0, BOTTOM_LANE, 2.0, rule(p))]);
        let d = mobil_decision(&sc, VehicleId(0), &MobilParams::default(), &p).unwrap();
        assert_eq!(d, LateralCommand::Stay);
    }

    #[test]
    fn mobil_leaves_blocked_lane() {
        let p = params();
        let sc = scene(vec![
            vehicle(0, 50.0, BOTTOM_LANE, 1.0, rule(p)),
            vehicle(1, 57.0, BOTTOM_LANE, 0.0, Behavior::Stopped),
        ]);
        let m = MobilParams::default();
        // Oracle: evaluate both IDM terms and the inequality directly.
        let current = idm_acceleration(1.0, 3.0, 1.0, &p).unwrap();
        let prospective = idm_acceleration(1.0, f64::INFINITY, 0.0, &p).unwrap();
        assert!(prospective - current > m.threshold);
        assert_eq!(
            mobil_decision(&sc, VehicleId(0), &m, &p).unwrap(),
            LateralCommand::ChangeLane
        );
    }

    #[test]
    fn mobil_safety_dominates_incentive() {
        let p = params();
        // Fast follower 1 m behind in the target lane.
        let sc = scene(vec![
            vehicle(0, 50.0, BOTTOM_LANE, 1.0, rule(p)),
            vehicle(1, 57.0, BOTTOM_LANE, 0.0, Behavior::Stopped),
            vehicle(2, 45.0, TOP_LANE, 2.0, rule(p)),
        ]);
        let m = MobilParams::default();
        let imposed = idm_acceleration(2.0, 1.0, 1.0, &p).unwrap();
        assert!(imposed < -m.safe_braking);
        assert_eq!(
            mobil_decision(&sc, VehicleId(0), &m, &p).unwrap(),
            LateralCommand::Stay
        );
    }

    #[test]
    fn pd_cases() {
        let g = ControllerGains::default();
        assert_eq!(pd_lateral(0.0, 0.0, &g), 0.0);
        assert_eq!(pd_lateral(0.5, 0.0, &g), -1.5);
        assert_eq!(pd_lateral(0.0, 1.0, &g), -3.0);
    }

    #[test]
    fn sampled_params_stay_in_support_and_repeat() {
        let mut a = Rng::seed_from_u64(11);
        let mut b = Rng::seed_from_u64(11);
        let mut sum_c = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let p = sample_driver_params(&mut a);
            assert!(p.within_support());
            assert_eq!(p, sample_driver_params(&mut b));
            sum_c += p.cooperation;
        }
        let mean = sum_c / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn level0_keep_lane_equilibrium() {
        let mut p = params();
        p.desired_speed = 2.0;
        let sc = scene(vec![vehicle(0, 50.0, TOP_LANE, 2.0, rule(p))]);
        let (a_lon, a_lat) = level0_step(
            &sc,
            VehicleId(0),
            &p,
            false,
            Role::KeepLane,
            &MobilParams::default(),
            &ControllerGains::default(),
        )
        .unwrap();
        assert_eq!((a_lon, a_lat), (0.0, 0.0));
    }

    #[test]
    fn level0_brakes_at_standstill_gap() {
        let p = params();
        let sc = scene(vec![
            vehicle(0, 50.0, TOP_LANE, 1.0, rule(p)),
            vehicle(1, 50.0 + 4.0 + p.min_gap, TOP_LANE, 0.0, Behavior::Stopped),
        ]);
        let (a_lon, _) = level0_step(
            &sc,
            VehicleId(0),
            &p,
            false,
            Role::KeepLane,
            &MobilParams::default(),
            &ControllerGains::default(),
        )
        .unwrap();
        assert!(a_lon < -p.max_accel, "{a_lon}");
    }

    #[test]
    fn level0_merging_role_steers_to_top_lane() {
        let p = params();
        let sc = scene(vec![
            vehicle(0, 50.0, BOTTOM_LANE, 1.0, rule(p)),
            vehicle(1, 57.0, BOTTOM_LANE, 0.0, Behavior::Stopped),
        ]);
        let (_, a_lat) = level0_step(
            &sc,
            VehicleId(0),
            &p,
            false,
            Role::Merge,
            &MobilParams::default(),
            &ControllerGains::default(),
        )
        .unwrap();
        assert_eq!(a_lat, 3.0 * 3.0);
    }

    fn arb_params() -> impl Strategy<Value = CidmParams> {
        any::<u64>().prop_map(|s| sample_driver_params(&mut Rng::seed_from_u64(s)))
    }

    proptest! {
        #[test]
        fn idm_bounded_and_monotone(
            p in arb_params(),
            v in 0.0f64..6.0,
            s in 0.1f64..60.0,
            ds in 0.01f64..5.0,
            dv in -3.0f64..3.0,
            ddv in 0.01f64..2.0,
        ) {
            let a = idm_acceleration(v, s, dv, &p).unwrap();
            prop_assert!(a <= p.max_accel);
            prop_assert!(a.is_finite());
            // Strictly increasing in the gap.
            prop_assert!(idm_acceleration(v, s + ds, dv, &p).unwrap() > a);
            // Non-increasing in closing speed; strict where the dynamic term is active.
            let b = idm_acceleration(v, s, dv + ddv, &p).unwrap();
            prop_assert!(b <= a);
            let dynamic = v * p.time_gap + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
            if v > 0.0 && dynamic > 0.0 {
                prop_assert!(b < a);
            }
        }

        #[test]
        fn pd_is_linear(x in -3.0f64..3.0, v in -2.0f64..2.0, alpha in -4.0f64..4.0) {
            let g = ControllerGains::default();
            let lhs = pd_lateral(alpha * x, alpha * v, &g);
            let rhs = alpha * pd_lateral(x, v, &g);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn mobil_never_violates_safety(
            p in arb_params(),
            gap_ahead in 0.5f64..30.0,
            follower_gap in 0.1f64..20.0,
            v_subject in 0.0f64..4.0,
            v_follower in 0.0f64..5.0,
            with_leader in any::<bool>(),
        ) {
            let mut vs = vec![
                vehicle(0, 50.0, BOTTOM_LANE, v_subject, rule(p)),
                vehicle(1, 54.0 + gap_ahead, BOTTOM_LANE, 0.0, Behavior::Stopped),
                vehicle(2, 50.0 - 4.0 - follower_gap, TOP_LANE, v_follower, rule(p)),
            ];
            if with_leader {
                vs.push(vehicle(3, 60.0 + gap_ahead, TOP_LANE, 1.0, rule(p)));
            }
            let sc = scene(vs);
            let m = MobilParams::default();
            let imposed = idm_acceleration(v_follower, follower_gap, v_follower - v_subject, &p).unwrap();
            let d = mobil_decision(&sc, VehicleId(0), &m, &p).unwrap();
            if imposed < -m.safe_braking {
                prop_assert_eq!(d, LateralCommand::Stay);
            }
        }

        #[test]
        fn yielding_never_accelerates_harder(
            p in arb_params(),
            lead_gap in 1.0f64..40.0,
            merger_gap in 0.1f64..15.0,
            merger_lat in 0.0f64..1.5,
            v in 0.0f64..5.0,
            v_lead in 0.0f64..5.0,
            v_merger in 0.0f64..5.0,
        ) {
            let mut p = p;
            p.cooperation = 1.0;
            let mut merger = vehicle(2, 54.0 + merger_gap, BOTTOM_LANE, v_merger, rule(p));
            merger.state.p_lat = merger_lat;
            let sc = scene(vec![
                vehicle(0, 50.0, TOP_LANE, v, rule(p)),
                vehicle(1, 54.0 + lead_gap, TOP_LANE, v_lead, rule(p)),
                merger,
            ]);
            let plain = cidm_acceleration(&sc, VehicleId(0), &p, false).unwrap();
            let yielding = cidm_acceleration(&sc, VehicleId(0), &p, true).unwrap();
            prop_assert!(yielding <= plain);
        }
    }
}
