//! Pairwise time-to-collision, interaction graph partitioning, and the
//! group sampler used for decoupled training.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::{AgentAttributes, AgentId, SceneFrame, Window};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    /// Edge when TTC <= this many seconds. Zero links only overlapping agents.
    pub ttc_threshold: f64,
    /// Edge when center distance <= this many meters.
    pub distance_threshold: f64,
    /// TTC beyond this is treated as infinite.
    pub ttc_horizon: f64,
    pub proximity_edges: bool,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 1.0,
            distance_threshold: 2.0,
            ttc_horizon: 10.0,
            proximity_edges: true,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ttc_threshold >= 0.0
            && self.distance_threshold > 0.0
            && self.ttc_horizon > 0.0
            && self.ttc_threshold <= self.ttc_horizon;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("interaction thresholds {self:?}")))
        }
    }
}

/// A circle moving at constant velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disc<T: Scalar> {
    pub position: [T; 2],
    pub velocity: [T; 2],
    pub radius: T,
}

/// Earliest `t >= 0` at which the two discs touch, or infinity when they
/// never do (or only after `horizon`).
pub fn pairwise_ttc<T: Scalar>(a: &Disc<T>, b: &Disc<T>, horizon: T) -> T {
    let px = b.position[0] - a.position[0];
    let py = b.position[1] - a.position[1];
    let vx = b.velocity[0] - a.velocity[0];
    let vy = b.velocity[1] - a.velocity[1];
    let r = a.radius + b.radius;
    // |p + v t|^2 = r^2  <=>  qa t^2 + qb t + qc = 0
    let qc = px * px + py * py - r * r;
    if qc <= T::zero() {
        return T::zero();
    }
    let qa = vx * vx + vy * vy;
    let qb = T::lit(2.0) * (px * vx + py * vy);
    if qa == T::zero() || qb >= T::zero() {
        // no relative motion, or separating
        return T::infinity();
    }
    let disc = qb * qb - T::lit(4.0) * qa * qc;
    if disc < T::zero() {
        return T::infinity();
    }
    // qb < 0, so the stable form is q = -(qb - sqrt(disc)) / 2 > 0 and the
    // smaller root is qc / q.
    let q = T::lit(-0.5) * (qb - disc.sqrt());
    let t = qc / q;
    if t > horizon {
        T::infinity()
    } else {
        t
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Disjoint, exhaustive interaction groups at a pivot frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionPartition {
    pub pivot_frame: u64,
    /// Each group sorted by id; groups ordered by their smallest member.
    pub groups: Vec<Vec<AgentId>>,
}

impl InteractionPartition {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Union of the selected groups, sorted by id.
    pub fn members(&self, selection: &[usize]) -> Vec<AgentId> {
        let mut out: Vec<AgentId> = selection
            .iter()
            .flat_map(|&i| self.groups[i].iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// The partition with every agent in one group.
    pub fn single_group(pivot_frame: u64, agents: Vec<AgentId>) -> Self {
        Self {
            pivot_frame,
            groups: if agents.is_empty() { vec![] } else { vec![agents] },
        }
    }
}

fn discs<T: Scalar>(
    frame: &SceneFrame<T>,
    attributes: &BTreeMap<AgentId, AgentAttributes<T>>,
) -> Vec<(AgentId, Disc<T>)> {
    frame
        .agents
        .iter()
        .map(|(&id, s)| {
            (
                id,
                Disc {
                    position: s.position(),
                    velocity: s.velocity(),
                    radius: attributes[&id].bounding_radius(),
                },
            )
        })
        .collect()
}

/// Whether two agents interact under `config`.
pub fn interacts<T: Scalar>(a: &Disc<T>, b: &Disc<T>, config: &InteractionConfig) -> bool {
    if config.proximity_edges {
        let d = (a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]);
        if d <= T::lit(config.distance_threshold) {
            return true;
        }
    }
    pairwise_ttc(a, b, T::lit(config.ttc_horizon)) <= T::lit(config.ttc_threshold)
}

/// Adjacency of the interaction graph over the frame's agents (id order).
pub fn interaction_edges<T: Scalar>(
    frame: &SceneFrame<T>,
    attributes: &BTreeMap<AgentId, AgentAttributes<T>>,
    config: &InteractionConfig,
) -> (Vec<AgentId>, Vec<(usize, usize)>) {
    let d = discs(frame, attributes);
    let mut edges = Vec::new();
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            if interacts(&d[i].1, &d[j].1, config) {
                edges.push((i, j));
            }
        }
    }
    (d.into_iter().map(|(id, _)| id).collect(), edges)
}

/// Connected components of the interaction graph.
pub fn build_partition<T: Scalar>(
    frame: &SceneFrame<T>,
    attributes: &BTreeMap<AgentId, AgentAttributes<T>>,
    config: &InteractionConfig,
) -> InteractionPartition {
    let (ids, edges) = interaction_edges(frame, attributes, config);
    let mut dsu = DisjointSet::new(ids.len());
    for (i, j) in edges {
        dsu.union(i, j);
    }
    // ids are sorted, so the first time a root is seen is at its smallest member
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<AgentId>> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        let root = dsu.find(i);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(id);
    }
    InteractionPartition {
        pivot_frame: frame.t,
        groups,
    }
}

pub const P_INCLUDE: f64 = 0.5;

/// Draws a nonempty subset of group indices: each group independently with
/// probability one half, redrawn until nonempty.
pub fn sample_groups<R: Rng>(partition: &InteractionPartition, rng: &mut R) -> Result<Vec<usize>> {
    let k = partition.len();
    if k == 0 {
        return Err(Error::EmptySelection);
    }
    loop {
        let picked: Vec<usize> = (0..k).filter(|_| rng.random_bool(P_INCLUDE)).collect();
        if !picked.is_empty() {
            return Ok(picked);
        }
    }
}

/// A window restricted to the agents of the selected groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledInstance<T: Scalar> {
    pub selected_groups: Vec<usize>,
    pub window: Window<T>,
}

/// Filters the window to the union of the selected groups. Membership is the
/// one fixed at the pivot; map and lights are kept whole.
pub fn restrict_window<T: Scalar>(
    window: &Window<T>,
    selection: &[usize],
    partition: &InteractionPartition,
) -> Result<SampledInstance<T>> {
    if selection.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&bad) = selection.iter().find(|&&i| i >= partition.len()) {
        return Err(Error::InvalidConfig(format!(
            "group index {bad} out of {} groups",
            partition.len()
        )));
    }
    let members = partition.members(selection);
    let mut selected_groups = selection.to_vec();
    selected_groups.sort_unstable();
    selected_groups.dedup();
    Ok(SampledInstance {
        selected_groups,
        window: window.restricted_to(&members),
    })
}
