//! Closed-loop simulation: one-frame autoregressive stepping over the whole
//! scene, agent injection from a reference episode, and collapse detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::input::attribute_features;
use crate::model::{DynamicsModel, ModelConfig, ModelInput, PredictionOutput};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::scene::{
    heading_decode, AgentAttributes, AgentId, AgentKind, AgentState, Episode, LightPhase,
    MapContext, SceneFrame, Transition,
};

/// Anything that maps a scene history to per-agent futures.
pub trait Predictor<T: Scalar> {
    fn model_config(&self) -> &ModelConfig;
    fn predict(&self, input: &ModelInput<T>) -> PredictionOutput<T>;
}

impl<T: Scalar> Predictor<T> for DynamicsModel<T> {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict(&self, input: &ModelInput<T>) -> PredictionOutput<T> {
        DynamicsModel::predict(self, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Draw positions from the predicted Gaussian.
    Sample,
    /// Use the predicted mean.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseThresholds {
    /// Per-kind desired speed (m/s), indexed like [`AgentKind::ALL`].
    pub desired_speed: [f64; 3],
    pub speed_factor: f64,
    pub bounds_margin: f64,
    pub overlap_distance: f64,
    pub overlap_frames: usize,
    pub frozen_displacement: f64,
    pub frozen_frames: usize,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self {
            desired_speed: crate::synth::BehaviorProfile::default().desired_speed,
            speed_factor: 3.0,
            bounds_margin: 20.0,
            overlap_distance: 0.2,
            overlap_frames: 5,
            frozen_displacement: 0.01,
            frozen_frames: 25,
        }
    }
}

impl CollapseThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.desired_speed.iter().all(|v| *v > 0.0)
            && self.speed_factor > 0.0
            && self.bounds_margin >= 0.0
            && self.overlap_distance >= 0.0
            && self.overlap_frames >= 1
            && self.frozen_displacement >= 0.0
            && self.frozen_frames >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad collapse thresholds {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Total frames in the trace, warm start included.
    pub max_frames: usize,
    pub mode: SampleMode,
    pub seed: u64,
    pub collapse: CollapseThresholds,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_frames: 250,
            mode: SampleMode::Sample,
            seed: 0,
            collapse: CollapseThresholds::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::InvalidConfig("max_frames must be at least 1".into()));
        }
        self.collapse.validate()
    }
}

/// Detector that fired. Declared in checking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseReason {
    NonFinite,
    Runaway,
    OffMap,
    Overlap,
    Frozen,
}

impl CollapseReason {
    pub const ALL: [CollapseReason; 5] = [
        CollapseReason::NonFinite,
        CollapseReason::Runaway,
        CollapseReason::OffMap,
        CollapseReason::Overlap,
        CollapseReason::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollapseReason::NonFinite => "non_finite",
            CollapseReason::Runaway => "runaway",
            CollapseReason::OffMap => "off_map",
            CollapseReason::Overlap => "overlap",
            CollapseReason::Frozen => "frozen",
        }
    }
}

impl fmt::Display for CollapseReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stateful plausibility checks over consecutive frames.
#[derive(Debug, Clone)]
pub struct CollapseDetector {
    pub thresholds: CollapseThresholds,
    overlaps: BTreeMap<(AgentId, AgentId), usize>,
    frozen: usize,
    /// Agent that tripped the last firing criterion, when there is one.
    pub culprit: Option<AgentId>,
}

impl CollapseDetector {
    pub fn new(thresholds: CollapseThresholds) -> Self {
        Self {
            thresholds,
            overlaps: BTreeMap::new(),
            frozen: 0,
            culprit: None,
        }
    }

    /// Feeds `frame` (with its predecessor, if any) and reports the first
    /// criterion that fires.
    ///
    /// Speeds are displacements over `dt`, so an agent's reported velocity
    /// cannot hide a jump. The frozen counter only advances on frames where
    /// some light is green and some agent is present; frames without a green
    /// light leave it unchanged.
    pub fn observe<T: Scalar>(
        &mut self,
        prev: Option<&SceneFrame<T>>,
        frame: &SceneFrame<T>,
        attributes: &BTreeMap<AgentId, AgentAttributes<T>>,
        map: &MapContext<T>,
        dt: f64,
    ) -> Option<CollapseReason> {
        let th = &self.thresholds;
        let states: Vec<(AgentId, [f64; 2], f64)> = frame
            .agents
            .iter()
            .map(|(id, s)| {
                let v = match prev.and_then(|p| p.agents.get(id)) {
                    Some(q) => (s.x - q.x).as_f64().hypot((s.y - q.y).as_f64()) / dt,
                    None => s.speed().as_f64(),
                };
                (*id, [s.x.as_f64(), s.y.as_f64()], v)
            })
            .collect();

        self.culprit = None;
        if let Some((id, _)) = frame.agents.iter().find(|(_, s)| !s.is_finite()) {
            self.culprit = Some(*id);
            return Some(CollapseReason::NonFinite);
        }
        for (id, _, v) in &states {
            let kind = attributes.get(id).map_or(AgentKind::MotorizedVehicle, |a| a.kind);
            if *v > th.speed_factor * th.desired_speed[kind.index()] {
                self.culprit = Some(*id);
                return Some(CollapseReason::Runaway);
            }
        }
        let b = &map.bounds;
        let m = th.bounds_margin;
        for (id, p, _) in &states {
            if p[0] < b.min_x.as_f64() - m
                || p[0] > b.max_x.as_f64() + m
                || p[1] < b.min_y.as_f64() - m
                || p[1] > b.max_y.as_f64() + m
            {
                self.culprit = Some(*id);
                return Some(CollapseReason::OffMap);
            }
        }

        let mut overlaps = BTreeMap::new();
        let mut fired = false;
        for (i, (a, pa, _)) in states.iter().enumerate() {
            for (b, pb, _) in &states[i + 1..] {
                if (pa[0] - pb[0]).hypot(pa[1] - pb[1]) < th.overlap_distance {
                    let n = self.overlaps.get(&(*a, *b)).copied().unwrap_or(0) + 1;
                    if n >= th.overlap_frames && !fired {
                        fired = true;
                        self.culprit = Some(*a);
                    }
                    overlaps.insert((*a, *b), n);
                }
            }
        }
        self.overlaps = overlaps;
        if fired {
            return Some(CollapseReason::Overlap);
        }

        let any_green = frame.lights.contains(&LightPhase::Green);
        if any_green && !states.is_empty() {
            let still = match prev {
                Some(p) => frame.agents.iter().all(|(id, s)| {
                    p.agents.get(id).is_some_and(|q| {
                        (s.x - q.x).as_f64().hypot((s.y - q.y).as_f64()) < th.frozen_displacement
                    })
                }),
                None => false,
            };
            if still {
                self.frozen += 1;
                if self.frozen >= th.frozen_frames {
                    return Some(CollapseReason::Frozen);
                }
            } else {
                self.frozen = 0;
            }
        }
        None
    }
}

/// Per-frame summary written next to a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub n_agents: usize,
    /// `None` with fewer than two agents.
    pub min_dist: Option<f64>,
    pub max_speed: f64,
    pub collapsed: bool,
}

impl FrameDiagnostics {
    pub fn of<T: Scalar>(frame: &SceneFrame<T>, collapsed: bool) -> Self {
        let pts: Vec<[f64; 2]> = frame
            .agents
            .values()
            .map(|s| [s.x.as_f64(), s.y.as_f64()])
            .collect();
        let mut min_dist: Option<f64> = None;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                let d = (a[0] - b[0]).hypot(a[1] - b[1]);
                min_dist = Some(match min_dist {
                    Some(m) if !(d < m) => m,
                    _ => d,
                });
            }
        }
        let max_speed = frame
            .agents
            .values()
            .map(|s| s.speed().as_f64())
            .fold(0.0, |m, v| if v > m || v.is_nan() { v } else { m });
        Self {
            frame: frame.t,
            n_agents: frame.agents.len(),
            min_dist,
            max_speed,
            collapsed,
        }
    }
}

/// Id re-assigned on injection because the reference id was already live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rekey {
    pub frame: u64,
    pub reference_id: AgentId,
    pub assigned_id: AgentId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace<T: Scalar> {
    /// Frames up to, not including, the collapse frame.
    pub episode: Episode<T>,
    /// One row per frame, including the collapse frame when there is one.
    pub diagnostics: Vec<FrameDiagnostics>,
    pub collapse_frame: Option<usize>,
    pub collapse_reason: Option<CollapseReason>,
    /// Agent that tripped the detector, if a single one did.
    pub collapse_agent: Option<AgentId>,
    pub rekeys: Vec<Rekey>,
    /// Number of warm-start frames copied from the reference.
    pub warm_start: usize,
    /// Frame budget actually available (the configured maximum, limited by
    /// the reference length).
    pub frame_cap: usize,
}

impl<T: Scalar> RolloutTrace<T> {
    /// Seconds from the last warm-start frame to the collapse frame, or to
    /// the final frame when the run reached its cap.
    pub fn duration_s(&self) -> f64 {
        let dt = 1.0 / self.episode.frame_rate_hz.as_f64();
        let end = self.collapse_frame.unwrap_or(self.frame_cap.max(1) - 1);
        (end + 1).saturating_sub(self.warm_start) as f64 * dt
    }

    pub fn censored(&self) -> bool {
        self.collapse_frame.is_none()
    }

    /// CSV with columns `frame,n_agents,min_dist,max_speed,collapsed`.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("frame,n_agents,min_dist,max_speed,collapsed\n");
        for d in &self.diagnostics {
            let md = d.min_dist.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                d.frame, d.n_agents, md, d.max_speed, d.collapsed as u8
            ));
        }
        out
    }
}

/// Predicts the next frame from `history` (oldest first).
///
/// Only the first predicted step is used. Agents whose most likely
/// transition is not `Stay` are dropped. Velocities are finite differences
/// against the last history frame. Non-finite model outputs propagate into
/// the returned states so the caller's detector can flag them.
pub fn step<T: Scalar, P: Predictor<T>, R: Rng>(
    history: &[SceneFrame<T>],
    attributes: &BTreeMap<AgentId, AgentAttributes<T>>,
    map: &MapContext<T>,
    dt: T,
    next_lights: Vec<LightPhase>,
    model: &P,
    mode: SampleMode,
    rng: &mut R,
) -> Result<SceneFrame<T>> {
    let current = history
        .last()
        .ok_or_else(|| Error::InvalidConfig("step needs at least one history frame".into()))?;
    let next_t = current.t + 1;
    let ids: Vec<AgentId> = current.agents.keys().copied().collect();
    if ids.is_empty() {
        return Ok(SceneFrame {
            t: next_t,
            agents: BTreeMap::new(),
            lights: next_lights,
        });
    }
    let mut kinds = Vec::with_capacity(ids.len());
    for id in &ids {
        let a = attributes
            .get(id)
            .ok_or_else(|| Error::InvalidEpisode(format!("agent {id} has no attributes")))?;
        kinds.push(a.kind);
    }
    let cfg = model.model_config();
    let th = cfg.t_hist.min(history.len());
    let window = &history[history.len() - th..];
    let mut input = ModelInput::build(&ids, kinds, window, map, cfg, dt);
    for (i, id) in ids.iter().enumerate() {
        input
            .attributes
            .row_mut(i)
            .copy_from_slice(&attribute_features(&attributes[id]));
    }
    let pred = model.predict(&input);

    let mut agents = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let logits = pred.logits(i);
        let best = (0..3).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
        let finite = logits.iter().all(|v| v.is_finite());
        if finite && best != Transition::Stay.index() {
            continue;
        }
        let p = pred.step(i, 0);
        let (x, y) = match mode {
            SampleMode::Mean => (p.mean[0], p.mean[1]),
            SampleMode::Sample => {
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                (p.mean[0] + p.std[0] * T::lit(zx), p.mean[1] + p.std[1] * T::lit(zy))
            }
        };
        let prev = &current.agents[id];
        let theta = heading_decode(p.heading[0], p.heading[1]).unwrap_or_else(|_| {
            if p.heading.iter().all(|v| v.is_finite()) {
                prev.theta
            } else {
                T::nan()
            }
        });
        let vx = (x - prev.x) / dt;
        let vy = (y - prev.y) / dt;
        agents.insert(*id, AgentState::new(x, y, vx, vy, theta));
    }
    Ok(SceneFrame {
        t: next_t,
        agents,
        lights: next_lights,
    })
}

/// Injection bookkeeping for one rollout.
#[derive(Debug, Clone, Default)]
pub struct Injector {
    first_seen: BTreeMap<usize, Vec<AgentId>>,
    used: BTreeSet<AgentId>,
    next_free: u64,
}

impl Injector {
    pub fn new<T: Scalar>(reference: &Episode<T>) -> Self {
        let mut first_seen: BTreeMap<usize, Vec<AgentId>> = BTreeMap::new();
        for (id, (first, _)) in reference.presence() {
            first_seen.entry(first).or_default().push(id);
        }
        let next_free = reference.attributes.keys().map(|a| a.0 + 1).max().unwrap_or(0);
        Self {
            first_seen,
            used: BTreeSet::new(),
            next_free,
        }
    }

    /// Marks ids already present (e.g. from the warm start) as taken.
    pub fn reserve(&mut self, ids: impl IntoIterator<Item = AgentId>) {
        self.used.extend(ids);
    }

    /// Copies agents whose first appearance in `reference` is frame `t` into
    /// `frame`. Existing agents are never overwritten; an id that is already
    /// in use gets the next unused id, recorded in the returned list.
    pub fn inject<T: Scalar>(
        &mut self,
        frame: &mut SceneFrame<T>,
        attributes: &mut BTreeMap<AgentId, AgentAttributes<T>>,
        reference: &Episode<T>,
        t: usize,
    ) -> Result<Vec<Rekey>> {
        let Some(entering) = self.first_seen.get(&t) else {
            return Ok(Vec::new());
        };
        let src = reference.frames.get(t).ok_or_else(|| {
            Error::InvalidEpisode(format!("reference has no frame {t} to inject from"))
        })?;
        let mut rekeys = Vec::new();
        for rid in entering {
            let mut id = *rid;
            if self.used.contains(&id) || frame.agents.contains_key(&id) {
                while self.used.contains(&AgentId(self.next_free))
                    || reference.attributes.contains_key(&AgentId(self.next_free))
                {
                    self.next_free += 1;
                }
                id = AgentId(self.next_free);
                self.next_free += 1;
                rekeys.push(Rekey {
                    frame: frame.t,
                    reference_id: *rid,
                    assigned_id: id,
                });
            }
            let mut attr = reference.attributes[rid].clone();
            attr.id = id;
            attributes.insert(id, attr);
            frame.agents.insert(id, src.agents[rid]);
            self.used.insert(id);
        }
        Ok(rekeys)
    }
}

/// Agents of `reference` entering at frame `t`, copied into `frame`.
/// Convenience wrapper around [`Injector`] for a single frame.
pub fn inject_agents<T: Scalar>(
    frame: &SceneFrame<T>,
    attributes: &mut BTreeMap<AgentId, AgentAttributes<T>>,
    reference: &Episode<T>,
    t: usize,
) -> Result<(SceneFrame<T>, Vec<Rekey>)> {
    let mut inj = Injector::new(reference);
    inj.reserve(frame.agents.keys().copied());
    inj.reserve(attributes.keys().copied());
    let mut out = frame.clone();
    let rekeys = inj.inject(&mut out, attributes, reference, t)?;
    Ok((out, rekeys))
}

/// Warm-starts from the first `t_hist` reference frames, then steps, injects
/// and checks for collapse until the frame budget is used up.
///
/// The frame budget is `config.max_frames`, limited to the reference length
/// because lights and injections come from the reference.
pub fn run_rollout<T: Scalar, P: Predictor<T>>(
    config: &RolloutConfig,
    model: &P,
    reference: &Episode<T>,
) -> Result<RolloutTrace<T>> {
    config.validate()?;
    let t_hist = model.model_config().t_hist;
    if reference.len() < t_hist {
        return Err(Error::InvalidEpisode(format!(
            "reference has {} frames, warm start needs {t_hist}",
            reference.len()
        )));
    }
    let cap = config.max_frames.min(reference.len());
    let warm = t_hist.min(cap);
    let dt = reference.dt();
    let dt64 = dt.as_f64();
    let map = &*reference.map;
    let mut rng = rng_from(config.seed, "rollout", 0);
    let mut detector = CollapseDetector::new(config.collapse.clone());

    let mut frames: Vec<SceneFrame<T>> = reference.frames[..warm].to_vec();
    let mut attributes: BTreeMap<AgentId, AgentAttributes<T>> = BTreeMap::new();
    for f in &frames {
        for id in f.agents.keys() {
            attributes.insert(*id, reference.attributes[id].clone());
        }
    }
    let mut injector = Injector::new(reference);
    injector.reserve(attributes.keys().copied());
    // warm-start entries are already in place
    for t in 0..warm {
        injector.first_seen.remove(&t);
    }

    let mut diagnostics: Vec<FrameDiagnostics> = frames
        .iter()
        .map(|f| FrameDiagnostics::of(f, false))
        .collect();
    let mut collapse = None;
    let mut rekeys = Vec::new();
    for t in warm..cap {
        let lights = reference.frames[t].lights.clone();
        let mut next = step(
            &frames,
            &attributes,
            map,
            dt,
            lights,
            model,
            config.mode,
            &mut rng,
        )?;
        next.t = reference.frames[t].t;
        let reason = detector.observe(frames.last(), &next, &attributes, map, dt64);
        if let Some(r) = reason {
            diagnostics.push(FrameDiagnostics::of(&next, true));
            collapse = Some((t, r, detector.culprit));
            break;
        }
        rekeys.extend(injector.inject(&mut next, &mut attributes, reference, t)?);
        diagnostics.push(FrameDiagnostics::of(&next, false));
        frames.push(next);
    }
    let live: BTreeSet<AgentId> = frames.iter().flat_map(|f| f.agents.keys().copied()).collect();
    attributes.retain(|id, _| live.contains(id));
    Ok(RolloutTrace {
        episode: Episode {
            map: reference.map.clone(),
            attributes,
            frames,
            frame_rate_hz: reference.frame_rate_hz,
        },
        diagnostics,
        collapse_frame: collapse.map(|c| c.0),
        collapse_reason: collapse.map(|c| c.1),
        collapse_agent: collapse.and_then(|c| c.2),
        rekeys,
        warm_start: warm,
        frame_cap: cap,
    })
}
