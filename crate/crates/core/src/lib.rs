//! Scene-level simulation of signalized urban intersections with
//! heterogeneous agents, trained by interaction decoupling.

pub mod episode_io;
pub mod error;
pub mod interaction;
pub mod metrics;
pub mod pipeline;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use scene::{AgentId, AgentKind, LightPhase, Transition, FRAME_RATE_HZ, T_HIST, T_PRED};

pub type AgentState = scene::AgentState<f64>;
pub type AgentAttributes = scene::AgentAttributes<f64>;
pub type MapContext = scene::MapContext<f64>;
pub type SceneFrame = scene::SceneFrame<f64>;
pub type Episode = scene::Episode<f64>;
pub type Window = scene::Window<f64>;
pub type DynamicsModel = model::DynamicsModel<f64>;
pub type RolloutTrace = rollout::RolloutTrace<f64>;
