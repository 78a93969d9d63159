//! Dense model inputs and training targets built from a window.

use std::ops::Range;

use crate::scalar::Scalar;
use crate::scene::{AgentId, AgentKind, AgentState, MapContext, SceneFrame, Transition, Window};
use crate::tape::Matrix;

use super::ModelConfig;

pub const STATE_DIM: usize = 6;
pub const ATTR_DIM: usize = 6;
pub const ROUTE_POINT_DIM: usize = 7;
pub const LIGHT_DIM: usize = 5;

/// Network inputs for one scene. Agent rows follow `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T: Scalar> {
    pub ids: Vec<AgentId>,
    pub kinds: Vec<AgentKind>,
    /// `(N·T_hist) × 6`, agent-major; masked frames are zero.
    pub history: Matrix<T>,
    pub mask: Vec<bool>,
    /// Raw (unscaled) pivot states, used to anchor the outputs.
    pub pivot: Vec<AgentState<T>>,
    /// `N × 6`: size and one-hot kind.
    pub attributes: Matrix<T>,
    /// `ΣP × 7` per-point route features.
    pub route_points: Matrix<T>,
    pub route_rows: Vec<Range<usize>>,
    /// `(N_L·T_hist) × 5`: one-hot phase and light position, light-major.
    pub lights: Matrix<T>,
    pub n_lights: usize,
    /// Whether each pivot state, extrapolated one frame at constant velocity,
    /// lies outside the map bounds.
    pub exits: Vec<bool>,
    /// Optional key mask over agents; `false` rows are never attended to.
    pub agent_mask: Option<Vec<bool>>,
    pub dt: T,
}

impl<T: Scalar> ModelInput<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn t_hist(&self) -> usize {
        if self.ids.is_empty() {
            self.lights.rows / self.n_lights.max(1)
        } else {
            self.mask.len() / self.ids.len()
        }
    }

    pub fn from_window(window: &Window<T>, config: &ModelConfig) -> Self {
        let history = window.history();
        let kinds = window
            .pivot_agents
            .iter()
            .map(|id| window.attributes[id].kind)
            .collect();
        let attrs: Vec<_> = window
            .pivot_agents
            .iter()
            .map(|id| &window.attributes[id])
            .collect();
        let mut input = Self::build(
            &window.pivot_agents,
            kinds,
            history,
            &window.map,
            config,
            window.dt(),
        );
        for (i, a) in attrs.iter().enumerate() {
            input.attributes.row_mut(i).copy_from_slice(&attribute_features(a));
        }
        input
    }

    /// Builds inputs from raw history frames; attributes must be filled by
    /// the caller via [`attribute_features`].
    pub fn build(
        ids: &[AgentId],
        kinds: Vec<AgentKind>,
        history: &[SceneFrame<T>],
        map: &MapContext<T>,
        config: &ModelConfig,
        dt: T,
    ) -> Self {
        let n = ids.len();
        let th = history.len();
        let pos_scale = T::lit(config.position_scale);
        let vel_scale = T::lit(config.velocity_scale);
        let mut hist = Matrix::zeros(n * th, STATE_DIM);
        let mut mask = vec![false; n * th];
        for (i, id) in ids.iter().enumerate() {
            for (tau, frame) in history.iter().enumerate() {
                if let Some(s) = frame.agents.get(id) {
                    let row = i * th + tau;
                    mask[row] = true;
                    hist.row_mut(row)
                        .copy_from_slice(&scaled_state(s, pos_scale, vel_scale));
                }
            }
        }
        let pivot_frame = history.last().expect("non-empty history");
        let pivot: Vec<AgentState<T>> = ids.iter().map(|id| pivot_frame.agents[id]).collect();
        let exits = pivot
            .iter()
            .map(|s| !map.bounds.contains([s.x + s.vx * dt, s.y + s.vy * dt], T::zero()))
            .collect();

        let mut route_rows = Vec::with_capacity(map.routes.len());
        let mut pts = Vec::new();
        for r in &map.routes {
            let start = pts.len() / ROUTE_POINT_DIM;
            let n_pts = r.points.len();
            for (k, p) in r.points.iter().enumerate() {
                let (a, b) = if k + 1 < n_pts {
                    (p, &r.points[k + 1])
                } else {
                    (&r.points[k - 1], p)
                };
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len = dx.hypot(dy);
                pts.extend_from_slice(&[p[0] / pos_scale, p[1] / pos_scale, dx / len, dy / len]);
                for kind in AgentKind::ALL {
                    pts.push(if r.allowed_kinds.contains(&kind) {
                        T::one()
                    } else {
                        T::zero()
                    });
                }
            }
            route_rows.push(start..start + n_pts);
        }
        let n_pts_total = pts.len() / ROUTE_POINT_DIM;

        let n_lights = map.lights.len();
        let mut lights = Matrix::zeros(n_lights * th, LIGHT_DIM);
        for (l, def) in map.lights.iter().enumerate() {
            for (tau, frame) in history.iter().enumerate() {
                let oh = frame.lights[l].one_hot::<T>();
                lights.row_mut(l * th + tau).copy_from_slice(&[
                    oh[0],
                    oh[1],
                    oh[2],
                    def.position[0] / pos_scale,
                    def.position[1] / pos_scale,
                ]);
            }
        }

        Self {
            ids: ids.to_vec(),
            kinds,
            history: hist,
            mask,
            pivot,
            attributes: Matrix::zeros(n, ATTR_DIM),
            route_points: Matrix::from_vec(n_pts_total, ROUTE_POINT_DIM, pts),
            route_rows,
            lights,
            n_lights,
            exits,
            agent_mask: None,
            dt,
        }
    }
}

pub fn scaled_state<T: Scalar>(s: &AgentState<T>, pos_scale: T, vel_scale: T) -> [T; 6] {
    let (c, sn) = s.heading_vec();
    [
        s.x / pos_scale,
        s.y / pos_scale,
        s.vx / vel_scale,
        s.vy / vel_scale,
        c,
        sn,
    ]
}

/// Size (roughly unit-scaled) and one-hot kind.
pub fn attribute_features<T: Scalar>(a: &crate::scene::AgentAttributes<T>) -> [T; 6] {
    let f = a.features();
    [
        f[0] / T::lit(5.0),
        f[1] / T::lit(2.0),
        f[2] / T::lit(2.0),
        f[3],
        f[4],
        f[5],
    ]
}

/// Ground-truth futures and transition labels aligned with a [`ModelInput`].
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<T: Scalar> {
    /// Per agent, per future step: `(x, y, theta)` when present.
    pub future: Vec<Vec<Option<[T; 3]>>>,
    pub labels: Vec<Transition>,
}

impl<T: Scalar> Targets<T> {
    pub fn from_window(window: &Window<T>) -> Self {
        let future = window.future();
        Self {
            future: window
                .pivot_agents
                .iter()
                .map(|id| {
                    future
                        .iter()
                        .map(|f| f.agents.get(id).map(|s| [s.x, s.y, s.theta]))
                        .collect()
                })
                .collect(),
            labels: window
                .pivot_agents
                .iter()
                .map(|id| window.labels.get(id).copied().unwrap_or(Transition::Stay))
                .collect(),
        }
    }

    pub fn valid_steps(&self) -> usize {
        self.future.iter().flatten().filter(|g| g.is_some()).count()
    }
}
