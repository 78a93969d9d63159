//! Rule-based generator of signalized four-arm intersection episodes with
//! motorized vehicles, cyclists and pedestrians.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{pairwise_ttc, Disc};
use crate::metrics::{Histogram, HistogramSpec};
use crate::rng::rng_from;
use crate::scene::{
    AgentAttributes, AgentId, AgentKind, AgentState, Bounds, Episode, LightDef, LightPhase,
    MapContext, RoutePolyline, SceneFrame, FRAME_RATE_HZ,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub arms: usize,
    pub lanes_per_approach: usize,
    pub green_s: f64,
    pub yellow_s: f64,
    pub red_s: f64,
    /// Total arrivals per minute, split across kinds by `kind_mix`.
    pub spawn_rate_per_min: f64,
    /// Share of motorized vehicles, non-motorized vehicles, pedestrians.
    pub kind_mix: [f64; 3],
    pub frames: usize,
    /// Simulated seconds before the first recorded frame.
    pub warmup_s: f64,
    /// Probability that a track ends early inside the scene.
    pub dropout_probability: f64,
    pub half_extent: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            arms: 4,
            lanes_per_approach: 2,
            green_s: 30.0,
            yellow_s: 3.0,
            red_s: 33.0,
            spawn_rate_per_min: 50.0,
            kind_mix: [0.542, 0.433, 0.025],
            frames: 500,
            warmup_s: 60.0,
            dropout_probability: 0.02,
            half_extent: 60.0,
            substeps: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("world: {m}")));
        if self.arms != 4 || self.lanes_per_approach != 2 {
            return bad("only the four-arm, two-lane layout is available");
        }
        if !(self.green_s > 0.0 && self.yellow_s >= 0.0 && self.red_s > 0.0) {
            return bad("signal phases must have positive length");
        }
        if (self.red_s - self.green_s - self.yellow_s).abs() > 1e-9 {
            return bad("two-phase signal needs red = green + yellow");
        }
        if self.spawn_rate_per_min < 0.0 || !self.spawn_rate_per_min.is_finite() {
            return bad("spawn rate must be finite and non-negative");
        }
        if self.kind_mix.iter().any(|&p| p < 0.0) || (self.kind_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("kind mix must be non-negative and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return bad("dropout probability outside [0, 1]");
        }
        if self.half_extent < 40.0 || self.substeps == 0 || self.warmup_s < 0.0 {
            return bad("extent, substeps or warmup out of range");
        }
        Ok(())
    }

    pub fn cycle_s(&self) -> f64 {
        self.green_s + self.yellow_s + self.red_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorProfile {
    /// m/s per kind.
    pub desired_speed: [f64; 3],
    /// Relative spread of per-agent desired speed.
    pub speed_spread: f64,
    /// Time gap kept to the leader, seconds.
    pub reaction_gap: [f64; 3],
    /// Standstill gap, meters.
    pub min_gap: [f64; 3],
    pub max_accel: [f64; 3],
    pub comfort_decel: f64,
    pub red_running_nmv: f64,
}

impl Default for BehaviorProfile {
    fn default() -> Self {
        Self {
            desired_speed: [8.0, 3.5, 1.3],
            speed_spread: 0.15,
            reaction_gap: [1.2, 1.0, 0.8],
            min_gap: [2.0, 1.0, 0.5],
            max_accel: [2.0, 1.2, 0.8],
            comfort_decel: 3.0,
            red_running_nmv: 0.05,
        }
    }
}

impl BehaviorProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.desired_speed.iter().all(|&v| v > 0.0)
            && self.reaction_gap.iter().all(|&v| v > 0.0)
            && self.min_gap.iter().all(|&v| v >= 0.0)
            && self.max_accel.iter().all(|&v| v > 0.0)
            && self.comfort_decel > 0.0
            && (0.0..1.0).contains(&self.speed_spread)
            && (0.0..=1.0).contains(&self.red_running_nmv);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("behavior profile out of range".into()))
        }
    }

    /// Highest speed an agent of `kind` can be assigned.
    pub fn max_speed(&self, kind: AgentKind) -> f64 {
        self.desired_speed[kind.index()] * (1.0 + self.speed_spread)
    }
}

// layout, in the frame of an arm approached along +x from the west
const BOX: f64 = 14.0;
const STOP_LINE: f64 = 18.5;
const INNER_LANE: f64 = 3.5;
const OUTER_LANE: f64 = 7.0;
const BIKE_LANE: f64 = 9.5;
const SIDEWALK: f64 = 12.0;
const CROSSWALK: f64 = 16.0;
const WALK_OFFSET: f64 = 0.75;
const OVERRUN: f64 = 5.0;
const STALL_LIMIT: f64 = 10.0;
/// Where two-stage cyclists wait, along the far side of the box.
const CORNER_WAIT: f64 = 12.5;
const CORNER_WAIT_Y: f64 = 11.0;

/// Dense arc-length parameterized path.
#[derive(Debug, Clone)]
struct Path {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Path {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn sample(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.partition_point(|&c| c <= s) {
            0 => 0,
            k => (k - 1).min(self.pts.len() - 2),
        };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let u = s - self.cum[i];
        ([a[0] + t[0] * u, a[1] + t[1] * u], t)
    }
}

fn rotate(p: [f64; 2], arm: usize) -> [f64; 2] {
    let a = arm as f64 * FRAC_PI_2;
    let (c, s) = (a.cos(), a.sin());
    let r = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
    // snap away rotation round-off so mirrored arms stay exactly symmetric
    r.map(|v| (v * 1e9).round() / 1e9)
}

fn arc(center: [f64; 2], radius: f64, from: f64, to: f64) -> Vec<[f64; 2]> {
    let n = ((to - from).abs() * radius / 0.5).ceil().max(2.0) as usize;
    (0..=n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Movement {
    Left,
    Through,
    Right,
    Cross,
}

#[derive(Debug, Clone)]
struct RouteInfo {
    kind: AgentKind,
    arm: usize,
    movement: Movement,
    path: Path,
    /// Waiting points as (arc length, governing light): the stop line for
    /// vehicles, the curb for pedestrians, and a second one at the far corner
    /// for two-stage cyclist left turns.
    entries: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct Conflict {
    /// Extent of the conflict zone along the other route.
    other_lo: f64,
    other_hi: f64,
    /// Extent of the zone along this route.
    own_lo: f64,
    own_hi: f64,
}

/// Static intersection: map, routes, and pairwise route conflicts.
#[derive(Debug, Clone)]
pub struct Intersection {
    pub map: MapContext<f64>,
    routes: Vec<RouteInfo>,
    /// `conflicts[a][stage][b]`: where route `b` conflicts with the part of
    /// route `a` between two waiting points.
    conflicts: Vec<Vec<Vec<Option<Conflict>>>>,
}

fn vehicle_path(movement: Movement, lane: f64, left_exit: f64, right_exit: f64, far: f64) -> Vec<[f64; 2]> {
    let start = [-far, -lane];
    match movement {
        Movement::Through => vec![start, [far, -lane]],
        Movement::Right => {
            let r = BOX - lane;
            let mut p = vec![start];
            p.extend(arc([-BOX, -BOX], r, FRAC_PI_2, 0.0));
            p.push([-right_exit, -far]);
            p
        }
        Movement::Left => {
            let r = BOX + left_exit;
            let mut p = vec![start];
            p.extend(arc([-BOX, r - lane], r, -FRAC_PI_2, 0.0));
            p.push([left_exit, far]);
            p
        }
        Movement::Cross => unreachable!(),
    }
}

/// Cyclist left turn: over to a waiting spot in the far corner, then across
/// with the perpendicular flow. The second value is the waiting vertex.
fn two_stage_left(lane: f64, far: f64) -> (Vec<[f64; 2]>, usize) {
    let mut p = vec![
        [-far, -lane],
        [CORNER_WAIT - 8.0, -lane],
        [CORNER_WAIT, -CORNER_WAIT_Y],
    ];
    let wait = p.len() - 1;
    p.extend(arc([CORNER_WAIT, -CORNER_WAIT_Y + 1.0], 1.0, -FRAC_PI_2, 0.0).into_iter().skip(1));
    p.push([CORNER_WAIT + 1.0, 0.0]);
    p.push([BIKE_LANE, CROSSWALK]);
    p.push([BIKE_LANE, far]);
    (p, wait)
}

fn walk_paths(far: f64) -> [Vec<[f64; 2]>; 2] {
    // along the near sidewalk, over the crosswalk, around the corner and out
    let o = WALK_OFFSET;
    let out = vec![
        [-far, -SIDEWALK - o],
        [-CROSSWALK + o, -SIDEWALK - o],
        [-CROSSWALK + o, SIDEWALK],
        [-SIDEWALK + o, CROSSWALK],
        [-SIDEWALK + o, far],
    ];
    let back = vec![
        [-SIDEWALK - o, far],
        [-SIDEWALK - o, CROSSWALK],
        [-CROSSWALK - o, SIDEWALK],
        [-CROSSWALK - o, -SIDEWALK + o],
        [-far, -SIDEWALK + o],
    ];
    [out, back]
}

fn dedup(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.dedup_by(|b, a| (a[0] - b[0]).hypot(a[1] - b[1]) < 1e-9);
    pts
}

/// Coarse polyline with points at most `spacing` apart, for the map context.
fn coarse(path: &Path, spacing: f64) -> Vec<[f64; 2]> {
    let n = (path.length() / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| path.sample(path.length() * k as f64 / n as f64).0)
        .collect()
}

impl Intersection {
    pub fn new(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let far = config.half_extent + OVERRUN;
        let mut routes = Vec::new();
        for arm in 0..4 {
            for (kind, lanes) in [
                (AgentKind::MotorizedVehicle, [INNER_LANE, OUTER_LANE, OUTER_LANE]),
                (AgentKind::NonMotorizedVehicle, [BIKE_LANE - 0.9, BIKE_LANE, BIKE_LANE]),
            ] {
                let (left_exit, right_exit) = match kind {
                    AgentKind::MotorizedVehicle => (INNER_LANE, OUTER_LANE),
                    _ => (BIKE_LANE, BIKE_LANE),
                };
                for (movement, lane) in [Movement::Left, Movement::Through, Movement::Right]
                    .into_iter()
                    .zip(lanes)
                {
                    let two_stage = kind == AgentKind::NonMotorizedVehicle && movement == Movement::Left;
                    let (pts, wait) = if two_stage {
                        let (p, w) = two_stage_left(lane, far);
                        (p, Some(w))
                    } else {
                        (vehicle_path(movement, lane, left_exit, right_exit, far), None)
                    };
                    let path = Path::new(dedup(pts.into_iter().map(|p| rotate(p, arm)).collect()));
                    let mut entries = vec![(far - STOP_LINE, arm)];
                    if let Some(w) = wait {
                        entries.push((path.cum[w], (arm + 1) % 4));
                    }
                    routes.push(RouteInfo {
                        kind,
                        arm,
                        movement,
                        path,
                        entries,
                    });
                }
            }
            for pts in walk_paths(far) {
                let curb = {
                    let p = Path::new(pts.clone());
                    // arc length where the crosswalk starts
                    let mut s = 0.0;
                    for (i, w) in pts.windows(2).enumerate() {
                        if (w[0][0] - w[1][0]).abs() < 1e-9 && (w[0][0] + CROSSWALK).abs() < 1.0 {
                            s = p.cum[i];
                        }
                    }
                    s
                };
                routes.push(RouteInfo {
                    kind: AgentKind::Pedestrian,
                    arm,
                    movement: Movement::Cross,
                    path: Path::new(dedup(pts.into_iter().map(|p| rotate(p, arm)).collect())),
                    entries: vec![(curb, arm)],
                });
            }
        }
        let conflicts = compute_conflicts(&routes);
        let h = config.half_extent;
        let map = MapContext {
            routes: routes
                .iter()
                .enumerate()
                .map(|(i, r)| RoutePolyline {
                    route_id: i,
                    points: coarse(&r.path, 10.0),
                    allowed_kinds: vec![r.kind],
                })
                .collect(),
            lights: (0..4)
                .map(|arm| LightDef {
                    position: rotate([-STOP_LINE, -SIDEWALK], arm),
                    routes: routes
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.arm == arm && r.kind != AgentKind::Pedestrian)
                        .map(|(i, _)| i)
                        .collect(),
                })
                .collect(),
            bounds: Bounds {
                min_x: -h,
                min_y: -h,
                max_x: h,
                max_y: h,
            },
            scene_origin: [0.0, 0.0],
        };
        map.validate()?;
        Ok(Self {
            map,
            routes,
            conflicts,
        })
    }

    fn conflict(&self, route: usize, stage: usize, other: usize) -> Option<Conflict> {
        let per_stage = &self.conflicts[route];
        per_stage[stage.min(per_stage.len() - 1)][other]
    }

    pub fn route_count(&self) -> usize {
        self.routes.len()
    }

    pub fn route_kind(&self, route: usize) -> AgentKind {
        self.routes[route].kind
    }

    /// Position of the stop line (or curb) along a route and the index of the light governing it.
    pub fn route_entry(&self, route: usize) -> (f64, usize) {
        self.routes[route].entries[0]
    }

    /// Arc length of the point of `route` nearest to `p`.
    pub fn project(&self, route: usize, p: [f64; 2]) -> f64 {
        let path = &self.routes[route].path;
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in path.pts.windows(2).enumerate() {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len2 = dx * dx + dy * dy;
            let u = (((p[0] - w[0][0]) * dx + (p[1] - w[0][1]) * dy) / len2).clamp(0.0, 1.0);
            let q = [w[0][0] + u * dx, w[0][1] + u * dy];
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best.0 {
                best = (d, path.cum[i] + u * len2.sqrt());
            }
        }
        best.1
    }
}

fn compute_conflicts(routes: &[RouteInfo]) -> Vec<Vec<Vec<Option<Conflict>>>> {
    let dense: Vec<Vec<(f64, [f64; 2], [f64; 2])>> = routes
        .iter()
        .map(|r| {
            let n = (r.path.length() / 0.5).ceil() as usize;
            (0..=n)
                .map(|k| {
                    let s = r.path.length() * k as f64 / n as f64;
                    let (p, t) = r.path.sample(s);
                    (s, p, t)
                })
                .filter(|(_, p, _)| p[0].abs() <= BOX + 8.0 && p[1].abs() <= BOX + 8.0)
                .collect()
        })
        .collect();
    let width = |k: AgentKind| match k {
        AgentKind::MotorizedVehicle => 2.0,
        AgentKind::NonMotorizedVehicle => 1.0,
        AgentKind::Pedestrian => 0.8,
    };
    let n = routes.len();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let e = &routes[a].entries;
        let mut per_stage = Vec::with_capacity(e.len());
        for stage in 0..e.len() {
            let from = if stage == 0 { f64::NEG_INFINITY } else { e[stage].0 };
            let to = e.get(stage + 1).map_or(f64::INFINITY, |x| x.0);
            let mut row = vec![None; n];
            for (b, slot) in row.iter_mut().enumerate() {
                if a == b || routes[a].path.pts[0] == routes[b].path.pts[0] {
                    continue;
                }
                let thr = 0.5 * (width(routes[a].kind) + width(routes[b].kind)) + 0.6;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                let (mut own_lo, mut own) = (f64::INFINITY, f64::NEG_INFINITY);
                for &(sa, pa, ta) in dense[a].iter().filter(|d| d.0 >= from && d.0 < to) {
                    for &(sb, pb, tb) in &dense[b] {
                        let close = (pa[0] - pb[0]).hypot(pa[1] - pb[1]) < thr;
                        let crossing = ta[0] * tb[0] + ta[1] * tb[1] < (25f64).to_radians().cos();
                        if close && crossing {
                            lo = lo.min(sb);
                            hi = hi.max(sb);
                            own_lo = own_lo.min(sa);
                            own = own.max(sa);
                        }
                    }
                }
                if hi.is_finite() {
                    *slot = Some(Conflict {
                        other_lo: lo,
                        other_hi: hi,
                        own_lo,
                        own_hi: own,
                    });
                }
            }
            per_stage.push(row);
        }
        out.push(per_stage);
    }
    out
}

/// Light phases over time: arms 0 and 2 share one phase, arms 1 and 3 the other.
pub fn light_phases(config: &WorldConfig, time_s: f64) -> Vec<LightPhase> {
    let cycle = config.cycle_s();
    (0..4)
        .map(|arm| {
            let offset = if arm % 2 == 0 { 0.0 } else { config.red_s };
            let u = (time_s + cycle - offset).rem_euclid(cycle);
            if u < config.green_s {
                LightPhase::Green
            } else if u < config.green_s + config.yellow_s {
                LightPhase::Yellow
            } else {
                LightPhase::Red
            }
        })
        .collect()
}

/// Seconds until the phase of `arm` next changes.
fn phase_remaining(config: &WorldConfig, time_s: f64, arm: usize) -> f64 {
    let cycle = config.cycle_s();
    let offset = if arm % 2 == 0 { 0.0 } else { config.red_s };
    let u = (time_s + cycle - offset).rem_euclid(cycle);
    if u < config.green_s {
        config.green_s - u
    } else if u < config.green_s + config.yellow_s {
        config.green_s + config.yellow_s - u
    } else {
        cycle - u
    }
}

#[derive(Debug, Clone)]
struct SimAgent {
    id: AgentId,
    kind: AgentKind,
    route: usize,
    s: f64,
    v: f64,
    v_des: f64,
    length: f64,
    width: f64,
    height: f64,
    committed: bool,
    red_runner: bool,
    drop_at: Option<f64>,
    request_time: Option<f64>,
    seen: bool,
    last_pos: Option<[f64; 2]>,
    /// Seconds spent standing still while committed.
    stalled: f64,
    /// Index of the next waiting point.
    stage: usize,
}

impl SimAgent {
    fn front(&self) -> f64 {
        self.s + 0.5 * self.length
    }

    /// Point the agent checks in at: its front for vehicles, its center for pedestrians.
    fn edge(&self) -> f64 {
        if self.kind == AgentKind::Pedestrian {
            self.s
        } else {
            self.front()
        }
    }

    fn entry(&self, inter: &Intersection) -> (f64, usize) {
        let e = &inter.routes[self.route].entries;
        e[self.stage.min(e.len() - 1)]
    }
}

/// Generated episode plus the route each recorded agent followed.
#[derive(Debug, Clone)]
pub struct Generated {
    pub episode: Episode<f64>,
    pub routes: BTreeMap<AgentId, usize>,
    pub intersection: Intersection,
}

pub fn generate_episode(world: &WorldConfig, profile: &BehaviorProfile) -> Result<Episode<f64>> {
    Ok(generate(world, profile)?.episode)
}

fn sample_size(kind: AgentKind, rng: &mut impl Rng) -> (f64, f64, f64) {
    match kind {
        AgentKind::MotorizedVehicle => (
            rng.random_range(4.0..5.0),
            rng.random_range(1.7..2.0),
            rng.random_range(1.4..1.8),
        ),
        AgentKind::NonMotorizedVehicle => (
            rng.random_range(1.6..1.9),
            rng.random_range(0.5..0.7),
            rng.random_range(1.5..1.9),
        ),
        AgentKind::Pedestrian => (
            rng.random_range(0.4..0.6),
            rng.random_range(0.4..0.6),
            rng.random_range(1.5..1.9),
        ),
    }
}

pub fn generate(world: &WorldConfig, profile: &BehaviorProfile) -> Result<Generated> {
    profile.validate()?;
    let inter = Intersection::new(world)?;
    let mut rng = rng_from(world.seed, "world", 0);
    let dt = 1.0 / (FRAME_RATE_HZ * world.substeps as f64);
    let routes_of: [Vec<usize>; 3] = AgentKind::ALL.map(|k| {
        (0..inter.routes.len())
            .filter(|&r| inter.routes[r].kind == k)
            .collect()
    });
    let pickers: Vec<WeightedIndex<f64>> = routes_of
        .iter()
        .map(|rs| {
            WeightedIndex::new(rs.iter().map(|&r| match inter.routes[r].movement {
                Movement::Left => 0.2,
                Movement::Through => 0.5,
                Movement::Right => 0.3,
                Movement::Cross => 1.0,
            }))
            .expect("every kind has routes")
        })
        .collect();
    let rates: Vec<f64> = world
        .kind_mix
        .iter()
        .map(|m| m * world.spawn_rate_per_min / 60.0)
        .collect();
    let mut next_arrival: Vec<f64> = rates
        .iter()
        .map(|&r| {
            if r > 0.0 {
                Exp::new(r).unwrap().sample(&mut rng)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut queues: Vec<VecDeque<AgentKind>> = vec![VecDeque::new(); inter.routes.len()];
    let mut agents: Vec<SimAgent> = Vec::new();
    let mut next_id = 0u64;
    let bounds = inter.map.bounds;

    let warm_frames = (world.warmup_s * FRAME_RATE_HZ).round() as usize;
    let total_frames = warm_frames + world.frames;
    let mut frames = Vec::with_capacity(world.frames);
    let mut attributes = BTreeMap::new();
    let mut route_of = BTreeMap::new();

    for frame in 0..total_frames {
        let frame_time = frame as f64 / FRAME_RATE_HZ;
        let phases = light_phases(world, frame_time);
        if frame >= warm_frames {
            let mut agents_out = BTreeMap::new();
            for a in agents.iter_mut() {
                let (p, t) = inter.routes[a.route].path.sample(a.s);
                if !bounds.contains(p, 0.0) {
                    continue;
                }
                let vel = match a.last_pos {
                    Some(q) if a.seen => [(p[0] - q[0]) * FRAME_RATE_HZ, (p[1] - q[1]) * FRAME_RATE_HZ],
                    _ => [t[0] * a.v, t[1] * a.v],
                };
                agents_out.insert(a.id, AgentState::new(p[0], p[1], vel[0], vel[1], t[1].atan2(t[0])));
                if !a.seen {
                    a.seen = true;
                    attributes.insert(
                        a.id,
                        AgentAttributes::new(a.id, a.kind, a.length, a.width, a.height)?,
                    );
                    route_of.insert(a.id, a.route);
                }
                a.last_pos = Some(p);
            }
            frames.push(SceneFrame {
                t: (frame - warm_frames) as u64,
                agents: agents_out,
                lights: phases.clone(),
            });
        } else {
            for a in agents.iter_mut() {
                a.last_pos = Some(inter.routes[a.route].path.sample(a.s).0);
            }
        }
        if frame + 1 == total_frames {
            break;
        }
        for sub in 0..world.substeps {
            let time = frame_time + sub as f64 * dt;
            // arrivals
            for k in 0..3 {
                while next_arrival[k] <= time {
                    let r = routes_of[k][pickers[k].sample(&mut rng)];
                    queues[r].push_back(AgentKind::ALL[k]);
                    next_arrival[k] += Exp::new(rates[k]).unwrap().sample(&mut rng);
                }
            }
            for r in 0..queues.len() {
                let Some(&kind) = queues[r].front() else { continue };
                let clear = match kind {
                    AgentKind::MotorizedVehicle => 9.0,
                    AgentKind::NonMotorizedVehicle => 4.0,
                    AgentKind::Pedestrian => 1.5,
                };
                let start = inter.routes[r].path.pts[0];
                let blocked = agents
                    .iter()
                    .any(|a| inter.routes[a.route].path.pts[0] == start && a.s - 0.5 * a.length < clear);
                if blocked {
                    continue;
                }
                queues[r].pop_front();
                let ki = kind.index();
                let v_des = profile.desired_speed[ki]
                    * (1.0 + rng.random_range(-profile.speed_spread..=profile.speed_spread));
                let (length, width, height) = sample_size(kind, &mut rng);
                let red_runner = kind == AgentKind::NonMotorizedVehicle
                    && rng.random_bool(profile.red_running_nmv);
                let len = inter.routes[r].path.length();
                let drop_at = rng
                    .random_bool(world.dropout_probability)
                    .then(|| rng.random_range(0.3..0.8) * len);
                agents.push(SimAgent {
                    id: AgentId(next_id),
                    kind,
                    route: r,
                    s: 0.0,
                    v: 0.8 * v_des,
                    v_des,
                    length,
                    width,
                    height,
                    committed: false,
                    red_runner,
                    drop_at,
                    request_time: None,
                    seen: false,
                    last_pos: None,
                    stalled: 0.0,
                    stage: 0,
                });
                next_id += 1;
            }
            step_agents(&inter, world, profile, &mut agents, &phases, time, dt);
            agents.retain(|a| {
                let path = &inter.routes[a.route].path;
                if a.s >= path.length() || a.drop_at.is_some_and(|d| a.s >= d) {
                    return false;
                }
                // once seen, leaving the bounds ends the track
                !(a.seen && !bounds.contains(path.sample(a.s).0, 0.0))
            });
        }
    }

    let episode = Episode {
        map: Arc::new(inter.map.clone()),
        attributes,
        frames,
        frame_rate_hz: FRAME_RATE_HZ,
    };
    episode.validate()?;
    Ok(Generated {
        episode,
        routes: route_of,
        intersection: inter,
    })
}

fn light_permits(
    inter: &Intersection,
    world: &WorldConfig,
    profile: &BehaviorProfile,
    a: &SimAgent,
    phases: &[LightPhase],
    time: f64,
) -> bool {
    let (entry, light) = a.entry(inter);
    match a.kind {
        AgentKind::Pedestrian => {
            let crossing = 2.0 * (SIDEWALK + WALK_OFFSET) / a.v_des + 2.0;
            phases[light] == LightPhase::Red && phase_remaining(world, time, light) >= crossing
        }
        _ if a.red_runner => true,
        _ => match phases[light] {
            LightPhase::Green => true,
            LightPhase::Yellow => {
                let dist = entry - a.front();
                a.v * a.v / (2.0 * profile.comfort_decel) > dist
            }
            LightPhase::Red => false,
        },
    }
}

/// Right of way inside the box: pedestrians, through, right, then left turns
/// with cyclists last.
fn rank(inter: &Intersection, route: usize) -> u8 {
    let r = &inter.routes[route];
    match (r.kind, r.movement) {
        (AgentKind::Pedestrian, _) => 4,
        (_, Movement::Through) => 3,
        (_, Movement::Right) => 2,
        (AgentKind::MotorizedVehicle, _) => 1,
        // two-stage cyclist turns only ever cross straight
        _ => 3,
    }
}

/// Seconds to cover `d` meters starting at speed `v` under acceleration `a`.
fn travel_time(d: f64, v: f64, a: f64) -> f64 {
    ((v * v + 2.0 * a * d.max(0.0)).sqrt() - v) / a
}

/// Nearest agent ahead: same route by arc length, otherwise within a
/// heading-aligned corridor. Returns (index, bumper gap).
fn leader(agents: &[SimAgent], pos: &[([f64; 2], [f64; 2])], i: usize) -> Option<(usize, f64)> {
    let a = &agents[i];
    let (p, t) = pos[i];
    let mut best: Option<(usize, f64)> = None;
    for (j, b) in agents.iter().enumerate() {
        if j == i {
            continue;
        }
        let ahead = if b.route == a.route {
            if b.s <= a.s {
                continue;
            }
            b.s - a.s
        } else {
            let (q, u) = pos[j];
            let d = [q[0] - p[0], q[1] - p[1]];
            let along = d[0] * t[0] + d[1] * t[1];
            let lateral = (d[0] * t[1] - d[1] * t[0]).abs();
            let aligned = t[0] * u[0] + t[1] * u[1] > (25f64).to_radians().cos();
            let corridor = 0.5 * (a.width + b.width) + 0.1;
            if along <= 0.0 || along > 40.0 || lateral > corridor || !aligned {
                continue;
            }
            // merging side by side: order the pair along their mean heading so
            // exactly one of them yields
            let order = d[0] * (t[0] + u[0]) + d[1] * (t[1] + u[1]);
            if order < 0.0 || (order == 0.0 && b.id > a.id) {
                continue;
            }
            along
        };
        let gap = ahead - 0.5 * (a.length + b.length);
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((j, gap));
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn step_agents(
    inter: &Intersection,
    world: &WorldConfig,
    profile: &BehaviorProfile,
    agents: &mut [SimAgent],
    phases: &[LightPhase],
    time: f64,
    dt: f64,
) {
    let pos: Vec<([f64; 2], [f64; 2])> = agents
        .iter()
        .map(|a| inter.routes[a.route].path.sample(a.s))
        .collect();
    let leaders: Vec<Option<(usize, f64)>> = (0..agents.len()).map(|i| leader(agents, &pos, i)).collect();

    // a vehicle that has not reached its stop line backs out of its commitment on red
    for a in agents.iter_mut() {
        let (entry, light) = a.entry(inter);
        if a.committed
            && a.kind != AgentKind::Pedestrian
            && !a.red_runner
            && a.front() <= entry
            && phases[light] == LightPhase::Red
        {
            a.committed = false;
        }
        // past a waiting point with another one ahead: check in again
        let entries = &inter.routes[a.route].entries;
        if a.committed && a.stage + 1 < entries.len() && a.edge() > entries[a.stage].0 {
            a.stage += 1;
            a.committed = false;
            a.red_runner = false;
        }
    }

    // entry requests, pedestrians first, then by arrival order
    let mut requests: Vec<usize> = Vec::new();
    for (i, a) in agents.iter_mut().enumerate() {
        let reach = match a.kind {
            AgentKind::Pedestrian => 1.0,
            _ => a.v * a.v / (2.0 * profile.comfort_decel) + 3.0,
        };
        let (entry, _) = a.entry(inter);
        let edge = a.edge();
        if !a.committed && edge <= entry && entry - edge <= reach {
            a.request_time.get_or_insert(time);
            requests.push(i);
        }
    }
    requests.sort_by(|&i, &j| {
        let key = |k: usize| {
            let a = &agents[k];
            (a.kind != AgentKind::Pedestrian, a.request_time.unwrap_or(time))
        };
        let (ki, kj) = (key(i), key(j));
        ki.0.cmp(&kj.0)
            .then(ki.1.total_cmp(&kj.1))
            .then(agents[i].id.cmp(&agents[j].id))
    });
    let mut pending: Vec<usize> = Vec::new();
    for &i in &requests {
        if !light_permits(inter, world, profile, &agents[i], phases, time) {
            continue;
        }
        // queue behind an agent that is itself still waiting to enter
        if let Some((l, _)) = leaders[i] {
            let lead = &agents[l];
            if !lead.committed && lead.edge() <= lead.entry(inter).0 {
                continue;
            }
        }
        let ri = agents[i].route;
        let me = &agents[i];
        let my_rank = rank(inter, ri);
        let blocked_by_committed = agents.iter().any(|b| {
            if !b.committed {
                return false;
            }
            let Some(c) = inter.conflict(ri, me.stage, b.route) else { return false };
            if b.s - 0.5 * b.length > c.other_hi + 1.0 {
                return false;
            }
            let to_zone = c.other_lo - 1.0 - (b.s + 0.5 * b.length);
            let b_rank = rank(inter, b.route);
            // the lower-ranked side waits at its yield point
            if b_rank > my_rank && me.kind == AgentKind::MotorizedVehicle && c.own_lo - 1.0 - me.front() >= 0.0 {
                return false;
            }
            if b_rank < my_rank && to_zone > b.v * b.v / (2.0 * profile.comfort_decel) + 1.0 {
                return false;
            }
            let clear = travel_time(c.own_hi + 0.5 * me.length + 1.0 - me.s, me.v, profile.max_accel[me.kind.index()]);
            to_zone / b.v.max(0.5) < clear + 1.0
        });
        let blocked_by_pending = pending
            .iter()
            .any(|&p| inter.conflict(ri, agents[i].stage, agents[p].route).is_some());
        if blocked_by_committed || blocked_by_pending {
            if agents[i].kind == AgentKind::Pedestrian {
                pending.push(i);
            }
            continue;
        }
        agents[i].committed = true;
    }

    // longitudinal update from the positions at the start of the substep
    let mut new_v = vec![0.0; agents.len()];
    for (i, a) in agents.iter().enumerate() {
        let ki = a.kind.index();
        let mut target = a.v_des;
        let mut hard_limit = f64::INFINITY;
        if let Some((_, gap)) = leaders[i] {
            let s0 = profile.min_gap[ki];
            target = target.min(((gap - s0) / profile.reaction_gap[ki]).max(0.0));
            hard_limit = hard_limit.min(((gap - 0.5 * s0) / dt).max(0.0));
        }
        // yield before a conflict zone that is occupied or about to be taken by
        // higher-ranked traffic; a long stall means a standoff, so push through
        if a.committed && a.stalled < STALL_LIMIT {
            let my_rank = rank(inter, a.route);
            for (j, b) in agents.iter().enumerate() {
                if j == i || !b.committed {
                    continue;
                }
                let Some(c) = inter.conflict(a.route, a.stage, b.route) else { continue };
                let hold = c.own_lo - 1.0 - a.front();
                if hold < 0.0 || b.s - 0.5 * b.length > c.other_hi + 1.0 {
                    continue;
                }
                let to_zone = c.other_lo - 1.0 - (b.s + 0.5 * b.length);
                let must_wait = to_zone < 0.0
                    || (rank(inter, b.route) > my_rank && {
                        let clear = travel_time(c.own_hi + 0.5 * a.length + 1.0 - a.s, a.v, profile.max_accel[ki]);
                        to_zone / b.v.max(0.5) < clear + 1.0
                    });
                if must_wait {
                    target = target.min((2.0 * profile.comfort_decel * (hold - 0.2).max(0.0)).sqrt());
                    hard_limit = hard_limit.min(hold / dt);
                }
            }
        }
        let (entry, _) = a.entry(inter);
        if !a.committed && a.edge() <= entry {
            let dist = entry - a.edge();
            target = target.min((2.0 * profile.comfort_decel * (dist - 0.2).max(0.0)).sqrt());
            hard_limit = hard_limit.min(dist / dt);
        }
        let mut v = if target > a.v {
            (a.v + profile.max_accel[ki] * dt).min(target)
        } else {
            (a.v - 2.5 * profile.comfort_decel * dt).max(target)
        };
        v = v.min(hard_limit).max(0.0);
        new_v[i] = v;
    }
    for (a, v) in agents.iter_mut().zip(new_v) {
        a.v = v;
        a.s += v * dt;
        a.stalled = if a.stalled >= STALL_LIMIT || (a.committed && v < 0.05) {
            a.stalled + dt
        } else {
            0.0
        };
    }
}

/// Kind ratios, agents-per-frame and pairwise TTC histograms of a set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub episodes: usize,
    pub frames: usize,
    pub kind_counts: [usize; 3],
    pub kind_ratios: [f64; 3],
    pub agents_per_frame: Histogram,
    /// Per agent and frame, the smallest positive TTC to any other agent;
    /// agents with no finite TTC contribute nothing.
    pub ttc: Histogram,
}

pub const AGENTS_PER_FRAME_SPEC: HistogramSpec = HistogramSpec {
    lower: 0.0,
    upper: 200.0,
    width: 5.0,
};

pub const TTC_SPEC: HistogramSpec = HistogramSpec {
    lower: 0.0,
    upper: 10.0,
    width: 0.5,
};

pub fn dataset_statistics(episodes: &[Episode<f64>], ttc_horizon: f64) -> Result<DatasetStatistics> {
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("no episodes".into()));
    }
    let mut kind_counts = [0usize; 3];
    let mut apf = Histogram::new(AGENTS_PER_FRAME_SPEC)?;
    let mut ttc = Histogram::new(TTC_SPEC)?;
    let mut frames = 0;
    for ep in episodes {
        for a in ep.attributes.values() {
            kind_counts[a.kind.index()] += 1;
        }
        for f in &ep.frames {
            frames += 1;
            apf.add(f.agents.len() as f64);
            let discs: Vec<Disc<f64>> = f
                .agents
                .iter()
                .map(|(id, s)| Disc {
                    position: s.position(),
                    velocity: s.velocity(),
                    radius: ep.attributes[id].bounding_radius(),
                })
                .collect();
            let mut nearest = vec![f64::INFINITY; discs.len()];
            for i in 0..discs.len() {
                for j in i + 1..discs.len() {
                    let t = pairwise_ttc(&discs[i], &discs[j], ttc_horizon);
                    // zero means already overlapping, which is not a forecast
                    if t > 0.0 {
                        nearest[i] = nearest[i].min(t);
                        nearest[j] = nearest[j].min(t);
                    }
                }
            }
            for t in nearest.into_iter().filter(|t| t.is_finite()) {
                ttc.add(t);
            }
        }
    }
    let total: usize = kind_counts.iter().sum();
    let kind_ratios = kind_counts.map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 });
    Ok(DatasetStatistics {
        episodes: episodes.len(),
        frames,
        kind_counts,
        kind_ratios,
        agents_per_frame: apf,
        ttc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, frames: usize) -> WorldConfig {
        WorldConfig {
            frames,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn layout_has_expected_routes_and_lights() {
        let inter = Intersection::new(&WorldConfig::default()).unwrap();
        assert_eq!(inter.route_count(), 32);
        let count = |k| (0..32).filter(|&r| inter.route_kind(r) == k).count();
        assert_eq!(count(AgentKind::MotorizedVehicle), 12);
        assert_eq!(count(AgentKind::NonMotorizedVehicle), 12);
        assert_eq!(count(AgentKind::Pedestrian), 8);
        assert_eq!(inter.map.lights.len(), 4);
    }

    #[test]
    fn two_phase_signal() {
        let w = WorldConfig::default();
        assert_eq!(light_phases(&w, 0.0)[0], LightPhase::Green);
        assert_eq!(light_phases(&w, 0.0)[1], LightPhase::Red);
        assert_eq!(light_phases(&w, 31.0)[0], LightPhase::Yellow);
        assert_eq!(light_phases(&w, 40.0)[0], LightPhase::Red);
        assert_eq!(light_phases(&w, 40.0)[1], LightPhase::Green);
        for k in 0..660 {
            let p = light_phases(&w, k as f64 * 0.1);
            assert_eq!(p[0], p[2]);
            assert_eq!(p[1], p[3]);
            // never green on both axes
            assert!(!(p[0] != LightPhase::Red && p[1] != LightPhase::Red));
        }
    }

    #[test]
    fn zero_rate_gives_empty_scene_with_cycling_lights() {
        let w = WorldConfig {
            spawn_rate_per_min: 0.0,
            frames: 200,
            ..Default::default()
        };
        let ep = generate_episode(&w, &BehaviorProfile::default()).unwrap();
        assert_eq!(ep.len(), 200);
        assert!(ep.frames.iter().all(|f| f.agents.is_empty()));
        let phases: std::collections::BTreeSet<_> = ep.frames.iter().map(|f| f.lights[0] as u8).collect();
        assert_eq!(phases.len(), 3);
    }

    #[test]
    fn same_seed_same_episode() {
        let a = generate_episode(&small(5, 150), &BehaviorProfile::default()).unwrap();
        let b = generate_episode(&small(5, 150), &BehaviorProfile::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(&small(6, 150), &BehaviorProfile::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let p = BehaviorProfile::default();
        for w in [
            WorldConfig {
                green_s: 0.0,
                ..Default::default()
            },
            WorldConfig {
                kind_mix: [0.5, 0.5, 0.5],
                ..Default::default()
            },
            WorldConfig {
                spawn_rate_per_min: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_episode(&w, &p), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn no_teleporting_and_mv_signal_compliance() {
        let profile = BehaviorProfile::default();
        let g = generate(&small(11, 1500), &profile).unwrap();
        let ep = &g.episode;
        let dt = ep.dt();
        for w in ep.frames.windows(2) {
            for (id, s) in &w[1].agents {
                let Some(p) = w[0].agents.get(id) else { continue };
                let kind = ep.attributes[id].kind;
                let d = (s.x - p.x).hypot(s.y - p.y);
                assert!(d <= profile.max_speed(kind) * 1.5 * dt, "{id} moved {d}");
                if kind == AgentKind::MotorizedVehicle {
                    let route = g.routes[id];
                    let (entry, light) = g.intersection.route_entry(route);
                    let half = 0.5 * ep.attributes[id].size.length;
                    let before = g.intersection.project(route, p.position()) + half;
                    let after = g.intersection.project(route, s.position()) + half;
                    if before <= entry && after > entry + 1e-6 {
                        assert_ne!(w[0].lights[light], LightPhase::Red, "{id} ran a red light");
                    }
                }
            }
        }
    }

    #[test]
    fn density_in_target_range() {
        let ep = generate_episode(&small(12, 1000), &BehaviorProfile::default()).unwrap();
        let mean = ep.frames.iter().map(|f| f.agents.len()).sum::<usize>() as f64 / ep.len() as f64;
        assert!((20.0..=60.0).contains(&mean), "mean density {mean}");
    }

    #[test]
    fn long_run_matches_calibration_targets() {
        let ep = generate_episode(&small(21, 10_000), &BehaviorProfile::default()).unwrap();
        // count distinct agents from the frames themselves
        let mut seen = std::collections::BTreeMap::new();
        for f in &ep.frames {
            for id in f.agents.keys() {
                seen.entry(*id).or_insert(ep.attributes[id].kind);
            }
        }
        let total = seen.len() as f64;
        let targets = [0.542, 0.433, 0.025];
        for (k, target) in AgentKind::ALL.iter().zip(targets) {
            let share = seen.values().filter(|v| *v == k).count() as f64 / total;
            assert!((share - target).abs() <= 0.03, "{k:?}: {share}");
        }
        let stats = dataset_statistics(std::slice::from_ref(&ep), 10.0).unwrap();
        let mode = stats.ttc.mode().unwrap();
        assert!((1.0..3.0).contains(&mode), "ttc mode {mode}");
    }

    #[test]
    fn presence_is_contiguous() {
        let ep = generate_episode(&small(22, 800), &BehaviorProfile::default()).unwrap();
        let mut spans: BTreeMap<AgentId, Vec<usize>> = BTreeMap::new();
        for (t, f) in ep.frames.iter().enumerate() {
            for id in f.agents.keys() {
                spans.entry(*id).or_default().push(t);
            }
        }
        for (id, ts) in spans {
            assert_eq!(ts.last().unwrap() - ts[0] + 1, ts.len(), "{id} has a gap");
        }
    }

    #[test]
    fn ttc_histogram_matches_brute_force() {
        let ep = generate_episode(&small(23, 120), &BehaviorProfile::default()).unwrap();
        let stats = dataset_statistics(std::slice::from_ref(&ep), 10.0).unwrap();
        let mut counts = vec![0u64; 20];
        for f in &ep.frames {
            for (a, sa) in &f.agents {
                let mut best = f64::INFINITY;
                for (b, sb) in &f.agents {
                    if a == b {
                        continue;
                    }
                    // smallest root of |dp + dv t| = r by the quadratic formula
                    let (px, py) = (sb.x - sa.x, sb.y - sa.y);
                    let (vx, vy) = (sb.vx - sa.vx, sb.vy - sa.vy);
                    let r = ep.attributes[a].bounding_radius() + ep.attributes[b].bounding_radius();
                    let qa = vx * vx + vy * vy;
                    let qb = 2.0 * (px * vx + py * vy);
                    let qc = px * px + py * py - r * r;
                    if qc <= 0.0 || qa == 0.0 {
                        continue;
                    }
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc < 0.0 {
                        continue;
                    }
                    let t = (-qb - disc.sqrt()) / (2.0 * qa);
                    if t > 0.0 && t <= 10.0 {
                        best = best.min(t);
                    }
                }
                if best < 10.0 {
                    counts[(best / 0.5) as usize] += 1;
                }
            }
        }
        assert_eq!(stats.ttc.counts, counts);
    }

    #[test]
    fn statistics_recount() {
        let eps: Vec<_> = (0..2)
            .map(|s| generate_episode(&small(s, 200), &BehaviorProfile::default()).unwrap())
            .collect();
        let stats = dataset_statistics(&eps, 10.0).unwrap();
        let mut counts = [0usize; 3];
        let mut seen = std::collections::BTreeSet::new();
        for (e, ep) in eps.iter().enumerate() {
            for f in &ep.frames {
                for id in f.agents.keys() {
                    if seen.insert((e, *id)) {
                        counts[ep.attributes[id].kind.index()] += 1;
                    }
                }
            }
        }
        assert_eq!(stats.kind_counts, counts);
        let total: usize = counts.iter().sum();
        for k in 0..3 {
            assert!((stats.kind_ratios[k] - counts[k] as f64 / total as f64).abs() < 1e-15);
        }
        assert_eq!(stats.frames, 400);
    }

    #[test]
    fn stationary_agent_has_no_ttc() {
        let mut ep = crate::scene::fixtures::episode(5, &[(0, 4)]);
        for f in &mut ep.frames {
            for s in f.agents.values_mut() {
                s.vx = 0.0;
            }
        }
        let stats = dataset_statistics(&[ep], 10.0).unwrap();
        assert_eq!(stats.ttc.total(), 0);
    }

    #[test]
    fn walkers_yield_at_curbs() {
        let g = generate(&small(13, 400), &BehaviorProfile::default()).unwrap();
        assert!(g.episode.attributes.values().any(|a| a.kind == AgentKind::Pedestrian));
    }
}
