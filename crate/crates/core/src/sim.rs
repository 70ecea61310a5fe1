//! Kinematic simulation of single and bidirectional crossings.
//!
//! The ego vehicle drives along a horizontal route; surrounding vehicles drive
//! along one or two vertical cross routes and follow the Intelligent Driver
//! Model. All motion is one-dimensional along each route. The world is
//! advanced with explicit Euler integration at 25 Hz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physics step, 25 Hz.
pub const PHYSICS_DT: f64 = 0.04;
/// Hard bound on any vehicle acceleration magnitude.
pub const MAX_ABS_ACCEL: f64 = 10.0;
/// Smallest gap handed to the IDM by the simulator itself.
pub const MIN_IDM_GAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_gap: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub exponent: f64,
}

impl IdmParams {
    /// Parameters used by every surrounding vehicle.
    pub fn surrounding(desired_speed: f64) -> Self {
        Self {
            desired_speed,
            time_gap: 1.0,
            min_gap: 2.0,
            max_accel: 3.0,
            comfort_decel: 2.5,
            exponent: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("desired_speed", self.desired_speed),
            ("time_gap", self.time_gap),
            ("min_gap", self.min_gap),
            ("max_accel", self.max_accel),
            ("comfort_decel", self.comfort_decel),
            ("exponent", self.exponent),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "IDM parameter {name} must be finite and positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// IDM acceleration for a vehicle at speed `v` with bumper gap `gap` to a
/// leader driving at `v_lead`. An infinite gap means free road.
pub fn idm_acceleration(gap: f64, v: f64, v_lead: f64, p: &IdmParams) -> Result<f64> {
    if gap.is_nan() || gap <= 0.0 {
        return Err(Error::NonPositiveGap(gap));
    }
    let free = 1.0 - (v / p.desired_speed).powf(p.exponent);
    if gap.is_infinite() {
        return Ok(p.max_accel * free);
    }
    let desired_gap = p.min_gap
        + v * p.time_gap
        + v * (v - v_lead) / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
    // The interaction term only brakes; a negative desired gap is clamped as in
    // the reference formulation.
    let desired_gap = desired_gap.max(0.0);
    Ok(p.max_accel * (free - (desired_gap / gap).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouteId {
    Ego,
    /// Crosses the ego route at the first crossing point, traffic from the top.
    Cross1,
    /// Crosses at the second crossing point (bidirectional only), traffic from the bottom.
    Cross2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub route: RouteId,
    /// Signed distance from the vehicle centre to its crossing point, positive
    /// while approaching. For the ego this is measured to the first crossing.
    pub dist_to_crossing: f64,
    pub speed: f64,
    pub accel: f64,
    pub desired_speed: f64,
    pub yields: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    Single,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLayout {
    pub kind: ScenarioKind,
    /// Crossing points in ego route coordinates; the ego starts at 0.
    pub crossing_points: Vec<f64>,
    /// Distance from a crossing point to the edge of the crossed lane.
    pub intersection_entry_offset: f64,
    pub goal_coordinate: f64,
    pub lane_width: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Cross routes span `[-road_half_length, road_half_length]` around the crossing.
    pub road_half_length: f64,
}

pub const LANE_WIDTH: f64 = 4.0;
pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 2.0;
pub const ROAD_HALF_LENGTH: f64 = 60.0;
pub const GOAL_BEYOND_LAST_CROSSING: f64 = 10.0;

impl ScenarioLayout {
    pub fn new(kind: ScenarioKind, first_crossing: f64) -> Self {
        let crossing_points = match kind {
            ScenarioKind::Single => vec![first_crossing],
            ScenarioKind::Bidirectional => vec![first_crossing, first_crossing + LANE_WIDTH],
        };
        let last = *crossing_points.last().expect("at least one crossing");
        Self {
            kind,
            crossing_points,
            intersection_entry_offset: LANE_WIDTH / 2.0,
            goal_coordinate: last + GOAL_BEYOND_LAST_CROSSING,
            lane_width: LANE_WIDTH,
            vehicle_length: VEHICLE_LENGTH,
            vehicle_width: VEHICLE_WIDTH,
            road_half_length: ROAD_HALF_LENGTH,
        }
    }

    pub fn routes(&self) -> &'static [RouteId] {
        match self.kind {
            ScenarioKind::Single => &[RouteId::Cross1],
            ScenarioKind::Bidirectional => &[RouteId::Cross1, RouteId::Cross2],
        }
    }

    /// Ego-route coordinate where `route` crosses the ego route.
    pub fn crossing_of(&self, route: RouteId) -> f64 {
        match route {
            RouteId::Ego | RouteId::Cross1 => self.crossing_points[0],
            RouteId::Cross2 => self.crossing_points[self.crossing_points.len() - 1],
        }
    }

    pub fn last_crossing(&self) -> f64 {
        self.crossing_points[self.crossing_points.len() - 1]
    }

    /// Distance from a vehicle front bumper to the edge of the lane it is about
    /// to cross, given the centre distance to the crossing point.
    pub fn front_to_entry(&self, dist_to_crossing: f64) -> f64 {
        dist_to_crossing - self.intersection_entry_offset - self.vehicle_length / 2.0
    }
}

/// Sampling ranges for new episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub vehicles_min: usize,
    pub vehicles_max: usize,
    pub ego_start_min: f64,
    pub ego_start_max: f64,
    pub target_start_min: f64,
    pub target_start_max: f64,
    pub desired_speed_min: f64,
    pub desired_speed_max: f64,
    pub ego_initial_speed: f64,
    pub ego_desired_speed: f64,
    pub yield_probability: f64,
    pub bidirectional_probability: f64,
    /// Minimum centre spacing between vehicles spawned on the same route.
    pub min_spawn_spacing: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vehicles_min: 1,
            vehicles_max: 4,
            ego_start_min: 50.0,
            ego_start_max: 60.0,
            target_start_min: 10.0,
            target_start_max: 55.0,
            desired_speed_min: 8.0,
            desired_speed_max: 12.0,
            ego_initial_speed: 10.0,
            ego_desired_speed: 10.0,
            yield_probability: 0.25,
            bidirectional_probability: 0.5,
            min_spawn_spacing: VEHICLE_LENGTH + 2.0,
        }
    }
}

impl SimConfig {
    /// Same ranges, but every surrounding vehicle gets desired speed `speed`.
    pub fn with_fixed_speed(&self, speed: f64) -> Self {
        Self {
            desired_speed_min: speed,
            desired_speed_max: speed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let interval = |name: &str, lo: f64, hi: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "{name} interval [{lo}, {hi}] is empty"
                )));
            }
            Ok(())
        };
        if self.vehicles_min == 0 || self.vehicles_min > self.vehicles_max || self.vehicles_max > 4 {
            return Err(Error::InvalidConfig(format!(
                "vehicle count range {{{}..{}}} must lie within 1..=4 and be non-empty",
                self.vehicles_min, self.vehicles_max
            )));
        }
        interval("ego start", self.ego_start_min, self.ego_start_max)?;
        interval("target start", self.target_start_min, self.target_start_max)?;
        interval("desired speed", self.desired_speed_min, self.desired_speed_max)?;
        if self.desired_speed_min <= 0.0 || self.ego_desired_speed <= 0.0 {
            return Err(Error::InvalidConfig("desired speeds must be positive".into()));
        }
        if self.ego_initial_speed < 0.0 {
            return Err(Error::InvalidConfig("ego initial speed must be non-negative".into()));
        }
        for (name, p) in [
            ("yield probability", self.yield_probability),
            ("bidirectional probability", self.bidirectional_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.target_start_max >= ROAD_HALF_LENGTH {
            return Err(Error::InvalidConfig(format!(
                "target start must stay inside the road extent of {ROAD_HALF_LENGTH} m"
            )));
        }
        // Rejection sampling of spawn positions needs slack beyond the bare
        // packing limit.
        let room = self.target_start_max - self.target_start_min;
        let needed = 2.0 * (self.vehicles_max as f64 - 1.0) * self.min_spawn_spacing;
        if self.min_spawn_spacing < 0.0 || room < needed {
            return Err(Error::InvalidConfig(format!(
                "target start interval of {room} m cannot hold {} vehicles spaced {} m apart",
                self.vehicles_max, self.min_spawn_spacing
            )));
        }
        Ok(())
    }
}

/// Complete ground truth of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub ego: VehicleState,
    pub others: Vec<VehicleState>,
    pub layout: ScenarioLayout,
    /// Number of physics steps taken; simulated time is `steps * PHYSICS_DT`.
    pub steps: u64,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    // One draw regardless of the interval width, so that narrowing a range
    // leaves every later sample of the stream untouched.
    let u: f64 = rng.gen();
    lo + (hi - lo) * u
}

/// Samples a fresh scenario. Equal seeds give equal states.
pub fn init_scenario(seed: u64, cfg: &SimConfig) -> Result<SimState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if rng.gen::<f64>() < cfg.bidirectional_probability {
        ScenarioKind::Bidirectional
    } else {
        ScenarioKind::Single
    };
    let n = rng.gen_range(cfg.vehicles_min..=cfg.vehicles_max);
    let ego_start = uniform(&mut rng, cfg.ego_start_min, cfg.ego_start_max);
    let layout = ScenarioLayout::new(kind, ego_start);
    let routes = layout.routes();

    let mut others: Vec<VehicleState> = Vec::with_capacity(n);
    for _ in 0..n {
        let route = routes[rng.gen_range(0..routes.len())];
        let dist = loop {
            let d = uniform(&mut rng, cfg.target_start_min, cfg.target_start_max);
            let clear = others
                .iter()
                .filter(|o| o.route == route)
                .all(|o| (o.dist_to_crossing - d).abs() >= cfg.min_spawn_spacing);
            if clear {
                break d;
            }
        };
        let desired_speed = uniform(&mut rng, cfg.desired_speed_min, cfg.desired_speed_max);
        let yields = rng.gen::<f64>() < cfg.yield_probability;
        others.push(VehicleState {
            route,
            dist_to_crossing: dist,
            speed: desired_speed,
            accel: 0.0,
            desired_speed,
            yields,
        });
    }

    Ok(SimState {
        ego: VehicleState {
            route: RouteId::Ego,
            dist_to_crossing: ego_start,
            speed: cfg.ego_initial_speed,
            accel: 0.0,
            desired_speed: cfg.ego_desired_speed,
            yields: false,
        },
        others,
        layout,
        steps: 0,
    })
}

/// Axis-aligned footprint: centre and half extents in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Footprint {
    pub fn overlaps(&self, other: &Footprint) -> bool {
        (self.cx - other.cx).abs() < self.hx + other.hx
            && (self.cy - other.cy).abs() < self.hy + other.hy
    }
}

impl SimState {
    pub fn sim_time(&self) -> f64 {
        self.steps as f64 * PHYSICS_DT
    }

    /// Ego position along its own route.
    pub fn ego_coordinate(&self) -> f64 {
        self.layout.crossing_points[0] - self.ego.dist_to_crossing
    }

    /// Ego centre distance to the crossing point of `route`.
    pub fn ego_dist_to(&self, route: RouteId) -> f64 {
        self.layout.crossing_of(route) - self.ego_coordinate()
    }

    pub fn ego_footprint(&self) -> Footprint {
        Footprint {
            cx: self.ego_coordinate(),
            cy: 0.0,
            hx: self.layout.vehicle_length / 2.0,
            hy: self.layout.vehicle_width / 2.0,
        }
    }

    pub fn footprint(&self, v: &VehicleState) -> Footprint {
        let cy = match v.route {
            RouteId::Ego => 0.0,
            RouteId::Cross1 => v.dist_to_crossing,
            RouteId::Cross2 => -v.dist_to_crossing,
        };
        Footprint {
            cx: self.layout.crossing_of(v.route),
            cy,
            hx: self.layout.vehicle_width / 2.0,
            hy: self.layout.vehicle_length / 2.0,
        }
    }

    /// True iff the ego footprint overlaps any other vehicle.
    pub fn detect_collision(&self) -> bool {
        let ego = self.ego_footprint();
        self.others.iter().any(|o| ego.overlaps(&self.footprint(o)))
    }

    pub fn check_goal(&self) -> bool {
        self.ego_coordinate() >= self.layout.goal_coordinate
    }

    /// One physics step with a pure-value interface.
    pub fn step(&self, ego_accel_command: f64) -> Result<SimState> {
        let mut next = self.clone();
        next.step_in_place(ego_accel_command)?;
        Ok(next)
    }

    fn other_accel(&self, i: usize) -> Result<f64> {
        let me = &self.others[i];
        let params = IdmParams::surrounding(me.desired_speed);
        let length = self.layout.vehicle_length;
        let leader = self
            .others
            .iter()
            .enumerate()
            .filter(|&(j, o)| j != i && o.route == me.route && o.dist_to_crossing < me.dist_to_crossing)
            .min_by(|a, b| b.1.dist_to_crossing.total_cmp(&a.1.dist_to_crossing))
            .map(|(_, o)| o);
        let mut accel = match leader {
            Some(lead) => {
                let gap = (me.dist_to_crossing - lead.dist_to_crossing - length).max(MIN_IDM_GAP);
                idm_acceleration(gap, me.speed, lead.speed, &params)?
            }
            None => idm_acceleration(f64::INFINITY, me.speed, 0.0, &params)?,
        };
        if me.yields {
            let gap = self.layout.front_to_entry(me.dist_to_crossing).max(MIN_IDM_GAP);
            accel = accel.min(idm_acceleration(gap, me.speed, 0.0, &params)?);
        }
        Ok(accel.clamp(-MAX_ABS_ACCEL, MAX_ABS_ACCEL))
    }

    pub fn step_in_place(&mut self, ego_accel_command: f64) -> Result<()> {
        if !(ego_accel_command.abs() <= MAX_ABS_ACCEL) {
            return Err(Error::InvalidCommand(ego_accel_command));
        }
        let accels = (0..self.others.len())
            .map(|i| self.other_accel(i))
            .collect::<Result<Vec<_>>>()?;

        integrate(&mut self.ego, ego_accel_command);
        let span = 2.0 * self.layout.road_half_length;
        for (v, a) in self.others.iter_mut().zip(accels) {
            integrate(v, a);
            if v.dist_to_crossing < -self.layout.road_half_length {
                v.dist_to_crossing += span;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

fn integrate(v: &mut VehicleState, accel: f64) {
    v.dist_to_crossing -= v.speed * PHYSICS_DT;
    v.speed = (v.speed + accel * PHYSICS_DT).max(0.0);
    v.accel = accel;
}
