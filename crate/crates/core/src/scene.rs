//! Scene data model: agents, map context, frames, episodes and history windows.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Scalar};

pub const T_HIST: usize = 10;
pub const T_PRED: usize = 10;
pub const FRAME_RATE_HZ: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u64);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "mv")]
    MotorizedVehicle,
    #[serde(rename = "nmv")]
    NonMotorizedVehicle,
    #[serde(rename = "ped")]
    Pedestrian,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [
        AgentKind::MotorizedVehicle,
        AgentKind::NonMotorizedVehicle,
        AgentKind::Pedestrian,
    ];

    pub fn index(self) -> usize {
        match self {
            AgentKind::MotorizedVehicle => 0,
            AgentKind::NonMotorizedVehicle => 1,
            AgentKind::Pedestrian => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot<T: Scalar>(self) -> [T; 3] {
        let mut v = [T::zero(); 3];
        v[self.index()] = T::one();
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::MotorizedVehicle => "mv",
            AgentKind::NonMotorizedVehicle => "nmv",
            AgentKind::Pedestrian => "ped",
        }
    }
}

/// Encodes a heading as its unit vector.
pub fn heading_encode<T: Scalar>(theta: T) -> (T, T) {
    (theta.cos(), theta.sin())
}

/// Decodes a (possibly unnormalized) heading vector into an angle in `[-pi, pi)`.
pub fn heading_decode<T: Scalar>(c: T, s: T) -> Result<T> {
    let norm = c.hypot(s);
    if !(norm > T::lit(1e-6)) {
        return Err(Error::DegenerateHeading(norm.as_f64()));
    }
    Ok(wrap_angle((s / norm).atan2(c / norm)))
}

/// Kinematic state of one agent at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AgentState<T: Scalar> {
    pub x: T,
    pub y: T,
    pub vx: T,
    pub vy: T,
    pub theta: T,
}

impl<T: Scalar> AgentState<T> {
    /// Builds a state with the heading wrapped into `[-pi, pi)`.
    pub fn new(x: T, y: T, vx: T, vy: T, theta: T) -> Self {
        Self {
            x,
            y,
            vx,
            vy,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> [T; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [T; 2] {
        [self.vx, self.vy]
    }

    pub fn speed(&self) -> T {
        self.vx.hypot(self.vy)
    }

    pub fn heading_vec(&self) -> (T, T) {
        heading_encode(self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.vx.is_finite()
            && self.vy.is_finite()
            && self.theta.is_finite()
    }

    /// The 6-vector `(x, y, vx, vy, cos, sin)`.
    pub fn features(&self) -> [T; 6] {
        let (c, s) = self.heading_vec();
        [self.x, self.y, self.vx, self.vy, c, s]
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Rotates position, velocity and heading about the origin.
    pub fn rotated(&self, angle: T) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        Self::new(
            c * self.x - s * self.y,
            s * self.x + c * self.y,
            c * self.vx - s * self.vy,
            s * self.vx + c * self.vy,
            self.theta + angle,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AgentSize<T: Scalar> {
    pub length: T,
    pub width: T,
    pub height: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AgentAttributes<T: Scalar> {
    pub id: AgentId,
    pub kind: AgentKind,
    pub size: AgentSize<T>,
}

impl<T: Scalar> AgentAttributes<T> {
    pub fn new(id: AgentId, kind: AgentKind, length: T, width: T, height: T) -> Result<Self> {
        let attrs = Self {
            id,
            kind,
            size: AgentSize {
                length,
                width,
                height,
            },
        };
        attrs.validate()?;
        Ok(attrs)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.size;
        if !(s.length > T::zero() && s.width > T::zero() && s.height > T::zero()) {
            return Err(Error::InvalidEpisode(format!(
                "agent {} has non-positive size",
                self.id
            )));
        }
        Ok(())
    }

    /// Radius of the circle circumscribing the footprint.
    pub fn bounding_radius(&self) -> T {
        T::lit(0.5) * self.size.length.hypot(self.size.width)
    }

    /// The 6-vector `(length, width, height, one-hot kind)`.
    pub fn features(&self) -> [T; 6] {
        let k = self.kind.one_hot::<T>();
        [
            self.size.length,
            self.size.width,
            self.size.height,
            k[0],
            k[1],
            k[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightPhase {
    Red,
    Green,
    Yellow,
}

impl LightPhase {
    pub fn one_hot<T: Scalar>(self) -> [T; 3] {
        let mut v = [T::zero(); 3];
        let i = match self {
            LightPhase::Red => 0,
            LightPhase::Green => 1,
            LightPhase::Yellow => 2,
        };
        v[i] = T::one();
        v
    }
}

/// A light as carried by a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficLightState {
    pub light_id: usize,
    pub phase: LightPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RoutePolyline<T: Scalar> {
    pub route_id: usize,
    pub points: Vec<[T; 2]>,
    pub allowed_kinds: Vec<AgentKind>,
}

impl<T: Scalar> RoutePolyline<T> {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::InvalidMap(format!(
                "route {} has {} points, need at least 2",
                self.route_id,
                self.points.len()
            )));
        }
        for w in self.points.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidMap(format!(
                    "route {} repeats a point",
                    self.route_id
                )));
            }
        }
        Ok(())
    }

    pub fn length(&self) -> T {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .fold(T::zero(), |a, b| a + b)
    }

    /// Point and unit tangent at arc length `s` (clamped to the polyline).
    pub fn sample(&self, s: T) -> ([T; 2], [T; 2]) {
        let mut rest = s.max(T::zero());
        let n = self.points.len();
        for (i, w) in self.points.windows(2).enumerate() {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len = dx.hypot(dy);
            let tangent = [dx / len, dy / len];
            if rest <= len || i + 2 == n {
                let u = rest.min(len);
                return ([w[0][0] + tangent[0] * u, w[0][1] + tangent[1] * u], tangent);
            }
            rest -= len;
        }
        unreachable!("validated polyline has at least one segment")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LightDef<T: Scalar> {
    pub position: [T; 2],
    pub routes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Bounds<T: Scalar> {
    pub min_x: T,
    pub min_y: T,
    pub max_x: T,
    pub max_y: T,
}

impl<T: Scalar> Bounds<T> {
    pub fn contains(&self, p: [T; 2], margin: T) -> bool {
        p[0] >= self.min_x - margin
            && p[0] <= self.max_x + margin
            && p[1] >= self.min_y - margin
            && p[1] <= self.max_y + margin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MapContext<T: Scalar> {
    pub routes: Vec<RoutePolyline<T>>,
    pub lights: Vec<LightDef<T>>,
    pub bounds: Bounds<T>,
    pub scene_origin: [T; 2],
}

impl<T: Scalar> MapContext<T> {
    pub fn validate(&self) -> Result<()> {
        if self.routes.is_empty() {
            return Err(Error::InvalidMap("no routes".into()));
        }
        let margin = T::lit(10.0);
        for r in &self.routes {
            r.validate()?;
            if r.points.iter().any(|&p| !self.bounds.contains(p, margin)) {
                return Err(Error::InvalidMap(format!(
                    "route {} leaves the map bounds",
                    r.route_id
                )));
            }
        }
        Ok(())
    }

    /// Translates every coordinate by `-origin`.
    pub fn translated(&self, dx: T, dy: T) -> Self {
        let mv = |p: [T; 2]| [p[0] + dx, p[1] + dy];
        Self {
            routes: self
                .routes
                .iter()
                .map(|r| RoutePolyline {
                    points: r.points.iter().map(|&p| mv(p)).collect(),
                    ..r.clone()
                })
                .collect(),
            lights: self
                .lights
                .iter()
                .map(|l| LightDef {
                    position: mv(l.position),
                    routes: l.routes.clone(),
                })
                .collect(),
            bounds: Bounds {
                min_x: self.bounds.min_x + dx,
                min_y: self.bounds.min_y + dy,
                max_x: self.bounds.max_x + dx,
                max_y: self.bounds.max_y + dy,
            },
            scene_origin: mv(self.scene_origin),
        }
    }

    /// Rotates every coordinate about the origin. Bounds become the
    /// axis-aligned box of the rotated corners.
    pub fn rotated(&self, angle: T) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |p: [T; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let b = &self.bounds;
        let corners = [
            rot([b.min_x, b.min_y]),
            rot([b.min_x, b.max_y]),
            rot([b.max_x, b.min_y]),
            rot([b.max_x, b.max_y]),
        ];
        let fold = |f: fn(T, T) -> T, i: usize| {
            corners[1..].iter().fold(corners[0][i], |a, p| f(a, p[i]))
        };
        Self {
            routes: self
                .routes
                .iter()
                .map(|r| RoutePolyline {
                    points: r.points.iter().map(|&p| rot(p)).collect(),
                    ..r.clone()
                })
                .collect(),
            lights: self
                .lights
                .iter()
                .map(|l| LightDef {
                    position: rot(l.position),
                    routes: l.routes.clone(),
                })
                .collect(),
            bounds: Bounds {
                min_x: fold(T::min, 0),
                min_y: fold(T::min, 1),
                max_x: fold(T::max, 0),
                max_y: fold(T::max, 1),
            },
            scene_origin: rot(self.scene_origin),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SceneFrame<T: Scalar> {
    pub t: u64,
    pub agents: BTreeMap<AgentId, AgentState<T>>,
    pub lights: Vec<LightPhase>,
}

impl<T: Scalar> SceneFrame<T> {
    pub fn light_states(&self) -> impl Iterator<Item = TrafficLightState> + '_ {
        self.lights
            .iter()
            .enumerate()
            .map(|(light_id, &phase)| TrafficLightState { light_id, phase })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.agents.iter().find(|(_, s)| !s.is_finite()) {
            Some((&id, _)) => Err(Error::NonFiniteState(id)),
            None => Ok(()),
        }
    }

    pub fn map_states(&self, f: impl Fn(&AgentState<T>) -> AgentState<T>) -> Self {
        Self {
            t: self.t,
            agents: self.agents.iter().map(|(&id, s)| (id, f(s))).collect(),
            lights: self.lights.clone(),
        }
    }

    pub fn retain_agents(&self, keep: impl Fn(AgentId) -> bool) -> Self {
        Self {
            t: self.t,
            agents: self
                .agents
                .iter()
                .filter(|(&id, _)| keep(id))
                .map(|(&id, &s)| (id, s))
                .collect(),
            lights: self.lights.clone(),
        }
    }
}

/// Translates every agent position by `-origin`.
pub fn normalize_frame<T: Scalar>(frame: &SceneFrame<T>, origin: [T; 2]) -> Result<SceneFrame<T>> {
    if !(origin[0].is_finite() && origin[1].is_finite()) {
        return Err(Error::NonFiniteOrigin);
    }
    frame.check_finite()?;
    Ok(frame.map_states(|s| s.translated(-origin[0], -origin[1])))
}

/// Inverse of [`normalize_frame`].
pub fn denormalize_frame<T: Scalar>(
    frame: &SceneFrame<T>,
    origin: [T; 2],
) -> Result<SceneFrame<T>> {
    if !(origin[0].is_finite() && origin[1].is_finite()) {
        return Err(Error::NonFiniteOrigin);
    }
    frame.check_finite()?;
    Ok(frame.map_states(|s| s.translated(origin[0], origin[1])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T: Scalar> {
    pub map: Arc<MapContext<T>>,
    pub attributes: BTreeMap<AgentId, AgentAttributes<T>>,
    pub frames: Vec<SceneFrame<T>>,
    pub frame_rate_hz: T,
}

impl<T: Scalar> Episode<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> T {
        T::one() / self.frame_rate_hz
    }

    /// Frame-index interval `[first, last]` for each agent.
    pub fn presence(&self) -> BTreeMap<AgentId, (usize, usize)> {
        let mut out: BTreeMap<AgentId, (usize, usize)> = BTreeMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            for &id in f.agents.keys() {
                out.entry(id).and_modify(|e| e.1 = i).or_insert((i, i));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        if !(self.frame_rate_hz > T::zero()) {
            return Err(Error::InvalidEpisode("frame rate must be positive".into()));
        }
        for a in self.attributes.values() {
            a.validate()?;
        }
        let n_lights = self.map.lights.len();
        let mut counts: BTreeMap<AgentId, usize> = BTreeMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            if i > 0 && f.t != self.frames[i - 1].t + 1 {
                return Err(Error::InvalidEpisode(format!(
                    "frame {} has timestamp {} after {}",
                    i,
                    f.t,
                    self.frames[i - 1].t
                )));
            }
            if f.lights.len() != n_lights {
                return Err(Error::InvalidEpisode(format!(
                    "frame {} carries {} light states for {} lights",
                    f.t,
                    f.lights.len(),
                    n_lights
                )));
            }
            f.check_finite()?;
            for &id in f.agents.keys() {
                if !self.attributes.contains_key(&id) {
                    return Err(Error::InvalidEpisode(format!(
                        "agent {id} has no attributes"
                    )));
                }
                *counts.entry(id).or_default() += 1;
            }
        }
        for (id, (first, last)) in self.presence() {
            if last - first + 1 != counts[&id] {
                return Err(Error::InvalidEpisode(format!(
                    "agent {id} leaves and re-enters the scene"
                )));
            }
        }
        Ok(())
    }

    /// Translates the whole episode so that the map's scene origin becomes (0, 0).
    pub fn normalized(&self) -> Result<Self> {
        let o = self.map.scene_origin;
        Ok(Self {
            map: Arc::new(self.map.translated(-o[0], -o[1])),
            attributes: self.attributes.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| normalize_frame(f, o))
                .collect::<Result<_>>()?,
            frame_rate_hz: self.frame_rate_hz,
        })
    }

    /// Pivot frames admitting a full history and future.
    pub fn valid_pivots(&self, t_hist: usize, t_pred: usize) -> std::ops::Range<usize> {
        let lo = t_hist.saturating_sub(1);
        let hi = self.frames.len().saturating_sub(t_pred);
        lo..hi.max(lo)
    }
}

/// High-level per-agent outcome at the next frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Transition {
    Stay,
    Leaving,
    Invalid,
}

impl Transition {
    pub const ALL: [Transition; 3] = [Transition::Stay, Transition::Leaving, Transition::Invalid];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Label for an agent present at frame `at`: Stay if present at `at+1`,
/// Leaving if its constant-velocity extrapolation exits the bounds,
/// otherwise Invalid (track terminated inside the scene).
pub fn transition_label<T: Scalar>(
    current: &AgentState<T>,
    present_next: bool,
    bounds: &Bounds<T>,
    dt: T,
) -> Transition {
    if present_next {
        return Transition::Stay;
    }
    let next = [current.x + current.vx * dt, current.y + current.vy * dt];
    if bounds.contains(next, T::zero()) {
        Transition::Invalid
    } else {
        Transition::Leaving
    }
}

/// History and future frames around a pivot, restricted to the agents present at the pivot.
///
/// `frames` may carry extra margin frames on either side, so a pivot shift
/// by a frame stays possible after slicing.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T: Scalar> {
    pub map: Arc<MapContext<T>>,
    pub attributes: BTreeMap<AgentId, AgentAttributes<T>>,
    pub frames: Vec<SceneFrame<T>>,
    pub pivot_index: usize,
    pub t_hist: usize,
    pub t_pred: usize,
    pub pivot_agents: Vec<AgentId>,
    pub labels: BTreeMap<AgentId, Transition>,
    pub frame_rate_hz: T,
}

impl<T: Scalar> Window<T> {
    pub fn pivot_frame(&self) -> &SceneFrame<T> {
        &self.frames[self.pivot_index]
    }

    pub fn history(&self) -> &[SceneFrame<T>] {
        &self.frames[self.pivot_index + 1 - self.t_hist..=self.pivot_index]
    }

    /// Ground-truth future; shorter than `t_pred` only for rollout windows.
    pub fn future(&self) -> &[SceneFrame<T>] {
        let end = (self.pivot_index + 1 + self.t_pred).min(self.frames.len());
        &self.frames[self.pivot_index + 1..end]
    }

    /// Per-history-frame presence of `id`.
    pub fn history_mask(&self, id: AgentId) -> Vec<bool> {
        self.history()
            .iter()
            .map(|f| f.agents.contains_key(&id))
            .collect()
    }

    pub fn dt(&self) -> T {
        T::one() / self.frame_rate_hz
    }

    /// Keeps only the listed agents (which must be pivot agents).
    pub fn restricted_to(&self, keep: &[AgentId]) -> Self {
        let set: std::collections::BTreeSet<AgentId> = keep.iter().copied().collect();
        Self {
            map: Arc::clone(&self.map),
            attributes: self
                .attributes
                .iter()
                .filter(|(id, _)| set.contains(id))
                .map(|(&id, a)| (id, a.clone()))
                .collect(),
            frames: self
                .frames
                .iter()
                .map(|f| f.retain_agents(|id| set.contains(&id)))
                .collect(),
            pivot_index: self.pivot_index,
            t_hist: self.t_hist,
            t_pred: self.t_pred,
            pivot_agents: self
                .pivot_agents
                .iter()
                .copied()
                .filter(|id| set.contains(id))
                .collect(),
            labels: self
                .labels
                .iter()
                .filter(|(id, _)| set.contains(id))
                .map(|(&id, &l)| (id, l))
                .collect(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    /// Moves the pivot by `delta` frames within the margin. Agents not present
    /// at the new pivot are dropped. Returns `None` when the shift is not
    /// possible or leaves no agent.
    pub fn shifted(&self, delta: isize) -> Option<Self> {
        let new_pivot = self.pivot_index as isize + delta;
        if new_pivot + 1 < self.t_hist as isize
            || new_pivot as usize + self.t_pred >= self.frames.len()
        {
            return None;
        }
        let new_pivot = new_pivot as usize;
        let pivot = &self.frames[new_pivot];
        let keep: Vec<AgentId> = self
            .pivot_agents
            .iter()
            .copied()
            .filter(|id| pivot.agents.contains_key(id))
            .collect();
        if keep.is_empty() {
            return None;
        }
        let mut out = self.restricted_to(&keep);
        out.pivot_index = new_pivot;
        out.labels = compute_labels(&out.frames, new_pivot, &keep, &out.map.bounds, out.dt());
        Some(out)
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self {
            map: Arc::new(self.map.translated(dx, dy)),
            frames: self
                .frames
                .iter()
                .map(|f| f.map_states(|s| s.translated(dx, dy)))
                .collect(),
            ..self.clone()
        }
    }

    pub fn rotated(&self, angle: T) -> Self {
        Self {
            map: Arc::new(self.map.rotated(angle)),
            frames: self
                .frames
                .iter()
                .map(|f| f.map_states(|s| s.rotated(angle)))
                .collect(),
            ..self.clone()
        }
    }
}

fn compute_labels<T: Scalar>(
    frames: &[SceneFrame<T>],
    pivot: usize,
    agents: &[AgentId],
    bounds: &Bounds<T>,
    dt: T,
) -> BTreeMap<AgentId, Transition> {
    let Some(next) = frames.get(pivot + 1) else {
        return BTreeMap::new();
    };
    agents
        .iter()
        .map(|&id| {
            let s = &frames[pivot].agents[&id];
            (id, transition_label(s, next.agents.contains_key(&id), bounds, dt))
        })
        .collect()
}

/// History `[t-T_hist+1, t]` and future `[t+1, t+T_pred]` around pivot `t`.
pub fn slice_window<T: Scalar>(episode: &Episode<T>, t: usize) -> Result<Window<T>> {
    slice_window_with(episode, t, T_HIST, T_PRED, 0)
}

/// Like [`slice_window`], with explicit horizons and up to `margin` extra
/// frames on both sides.
pub fn slice_window_with<T: Scalar>(
    episode: &Episode<T>,
    t: usize,
    t_hist: usize,
    t_pred: usize,
    margin: usize,
) -> Result<Window<T>> {
    let range = episode.valid_pivots(t_hist, t_pred);
    if !range.contains(&t) {
        return Err(Error::PivotOutOfRange {
            t,
            lo: range.start,
            hi: range.end.saturating_sub(1).max(range.start),
        });
    }
    let first = (t + 1 - t_hist).saturating_sub(margin);
    let last = (t + t_pred + margin).min(episode.len() - 1);
    let pivot_agents: Vec<AgentId> = episode.frames[t].agents.keys().copied().collect();
    let set: std::collections::BTreeSet<AgentId> = pivot_agents.iter().copied().collect();
    let frames: Vec<SceneFrame<T>> = episode.frames[first..=last]
        .iter()
        .map(|f| f.retain_agents(|id| set.contains(&id)))
        .collect();
    let pivot_index = t - first;
    let labels = compute_labels(
        &frames,
        pivot_index,
        &pivot_agents,
        &episode.map.bounds,
        episode.dt(),
    );
    Ok(Window {
        map: Arc::clone(&episode.map),
        attributes: pivot_agents
            .iter()
            .map(|id| (*id, episode.attributes[id].clone()))
            .collect(),
        frames,
        pivot_index,
        t_hist,
        t_pred,
        pivot_agents,
        labels,
        frame_rate_hz: episode.frame_rate_hz,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn heading_examples() {
        let (c, s) = heading_encode(0.0f64);
        assert_eq!((c, s), (1.0, 0.0));
        let (c, s) = heading_encode(std::f64::consts::FRAC_PI_2);
        assert!(c.abs() < 1e-16 && (s - 1.0).abs() < 1e-16);
        assert!(matches!(
            heading_decode(1e-8, 0.0),
            Err(Error::DegenerateHeading(_))
        ));
    }

    #[test]
    fn heading_round_trip_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let theta: f64 = rng.random_range(-20.0..20.0);
            let (c, s) = heading_encode(theta);
            let back = heading_decode(c * 3.0, s * 3.0).unwrap();
            // modular angle difference
            let d = (theta - back).rem_euclid(std::f64::consts::TAU);
            let d = d.min(std::f64::consts::TAU - d);
            assert!(d < 1e-9, "theta {theta} back {back}");
        }
    }

    #[test]
    fn normalize_examples() {
        let mut frame = SceneFrame::<f64> {
            t: 0,
            agents: BTreeMap::new(),
            lights: vec![],
        };
        frame
            .agents
            .insert(AgentId(1), AgentState::new(100.0, 50.0, 1.0, 2.0, 0.5));
        let n = normalize_frame(&frame, [100.0, 50.0]).unwrap();
        assert_eq!(n.agents[&AgentId(1)].position(), [0.0, 0.0]);
        assert_eq!(n.agents[&AgentId(1)].velocity(), [1.0, 2.0]);
        assert_eq!(normalize_frame(&frame, [0.0, 0.0]).unwrap(), frame);
        assert!(matches!(
            normalize_frame(&frame, [f64::NAN, 0.0]),
            Err(Error::NonFiniteOrigin)
        ));
        frame
            .agents
            .insert(AgentId(9), AgentState::new(f64::NAN, 0.0, 0.0, 0.0, 0.0));
        match normalize_frame(&frame, [1.0, 1.0]) {
            Err(Error::NonFiniteState(id)) => assert_eq!(id, AgentId(9)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalize_round_trip_is_exact() {
        // Offsets and positions on a dyadic grid keep translation exact in f64.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let grid = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-4096i64..4096) as f64 / 64.0;
        let mut max_err = 0.0f64;
        for t in 0..1000 {
            let agents = (0..rng.random_range(0..12))
                .map(|i| {
                    (
                        AgentId(i),
                        AgentState::new(grid(&mut rng), grid(&mut rng), 1.0, -1.0, 0.25),
                    )
                })
                .collect();
            let frame = SceneFrame {
                t,
                agents,
                lights: vec![],
            };
            let origin = [grid(&mut rng), grid(&mut rng)];
            let back = denormalize_frame(&normalize_frame(&frame, origin).unwrap(), origin).unwrap();
            for (id, s) in &frame.agents {
                let b = back.agents[id];
                max_err = max_err.max((b.x - s.x).abs()).max((b.y - s.y).abs());
            }
        }
        assert_eq!(max_err, 0.0);
    }

    #[test]
    fn slice_boundaries() {
        let ep = episode(30, &[(0, 29)]);
        let w = slice_window(&ep, 9).unwrap();
        let hist: Vec<u64> = w.history().iter().map(|f| f.t).collect();
        let fut: Vec<u64> = w.future().iter().map(|f| f.t).collect();
        assert_eq!(hist, (0..10).collect::<Vec<_>>());
        assert_eq!(fut, (10..20).collect::<Vec<_>>());
        match slice_window(&ep, 8) {
            Err(Error::PivotOutOfRange { lo, hi, .. }) => assert_eq!((lo, hi), (9, 19)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(slice_window(&ep, 20).is_err());
        assert!(slice_window(&ep, 19).is_ok());
    }

    #[test]
    fn history_mask_matches_presence_scan() {
        let ep = episode(30, &[(5, 29), (0, 29)]);
        let w = slice_window(&ep, 9).unwrap();
        let mask = w.history_mask(AgentId(0));
        // oracle: scan each history frame of the episode directly
        let oracle: Vec<bool> = (0..10)
            .map(|t| ep.frames[t].agents.contains_key(&AgentId(0)))
            .collect();
        assert_eq!(mask, oracle);
        assert_eq!(
            mask.iter().map(|&b| b as u8).collect::<Vec<_>>(),
            vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]
        );
        assert_eq!(w.pivot_agents, vec![AgentId(0), AgentId(1)]);
    }

    #[test]
    fn labels_follow_future_presence() {
        // agent 0 drives off the +x edge; agent 1 vanishes mid-scene
        let mut ep = episode(40, &[(0, 39), (0, 12)]);
        for f in ep.frames.iter_mut() {
            if let Some(s) = f.agents.get_mut(&AgentId(0)) {
                s.x = 49.0;
            }
        }
        let w = slice_window(&ep, 12).unwrap();
        assert_eq!(w.labels[&AgentId(0)], Transition::Stay);
        assert_eq!(w.labels[&AgentId(1)], Transition::Invalid);
        let mut ep = episode(40, &[(0, 12)]);
        for f in ep.frames.iter_mut() {
            if let Some(s) = f.agents.get_mut(&AgentId(0)) {
                s.x = 49.5;
            }
        }
        let w = slice_window(&ep, 12).unwrap();
        assert_eq!(w.labels[&AgentId(0)], Transition::Leaving);
    }

    #[test]
    fn validation_catches_reentry_and_gaps() {
        let mut ep = episode(20, &[(0, 19)]);
        assert!(ep.validate().is_ok());
        ep.frames[5].agents.clear();
        assert!(matches!(ep.validate(), Err(Error::InvalidEpisode(_))));
        let mut ep = episode(20, &[(0, 19)]);
        ep.frames[3].t = 9;
        assert!(ep.validate().is_err());
        let mut ep = episode(20, &[(0, 19)]);
        ep.attributes.clear();
        assert!(ep.validate().is_err());
    }

    #[test]
    fn normalization_commutes_with_slicing() {
        let mut ep = episode(30, &[(2, 25), (0, 29)]);
        Arc::make_mut(&mut ep.map).scene_origin = [12.5, -3.25];
        let a = slice_window(&ep.normalized().unwrap(), 15).unwrap();
        let b = slice_window(&ep, 15).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, &normalize_frame(fb, [12.5, -3.25]).unwrap());
        }
    }

    #[test]
    fn shift_moves_pivot_and_relabels() {
        let ep = episode(40, &[(0, 39), (12, 39)]);
        let w = slice_window_with(&ep, 12, T_HIST, T_PRED, 1).unwrap();
        assert_eq!(w.pivot_frame().t, 12);
        let back = w.shifted(-1).unwrap();
        assert_eq!(back.pivot_frame().t, 11);
        assert_eq!(back.pivot_agents, vec![AgentId(0)]);
        let fwd = w.shifted(1).unwrap();
        assert_eq!(fwd.pivot_frame().t, 13);
        assert_eq!(fwd.history().len(), T_HIST);
        assert_eq!(fwd.future().len(), T_PRED);
        assert!(fwd.shifted(1).is_none());
    }

    #[test]
    fn bounding_radius_from_size() {
        let a = AgentAttributes::new(AgentId(0), AgentKind::Pedestrian, 3.0, 4.0, 1.0).unwrap();
        assert_eq!(a.bounding_radius(), 2.5);
        assert!(AgentAttributes::new(AgentId(0), AgentKind::Pedestrian, 0.0, 4.0, 1.0).is_err());
    }

    #[test]
    fn polyline_sampling() {
        let r = RoutePolyline {
            route_id: 0,
            points: vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]],
            allowed_kinds: vec![AgentKind::Pedestrian],
        };
        assert_eq!(r.length(), 20.0);
        assert_eq!(r.sample(5.0), ([5.0, 0.0], [1.0, 0.0]));
        assert_eq!(r.sample(15.0), ([10.0, 5.0], [0.0, 1.0]));
        assert_eq!(r.sample(25.0).0, [10.0, 10.0]);
        let bad = RoutePolyline {
            points: vec![[0.0, 0.0]],
            ..r.clone()
        };
        assert!(bad.validate().is_err());
    }
}
