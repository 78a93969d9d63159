//! Scene-aware attention network: modality encoders, dual-cross attention
//! between agents and scene context, an agent-agent transformer, and
//! per-kind Gaussian prediction heads with a shared transition head.

pub mod augment;
pub mod checkpoint;
pub mod input;
pub mod loss;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::scene::{AgentId, AgentKind};
use crate::tape::{ColumnMap, Gradients, Matrix, Tape, Var};

pub use input::{ModelInput, Targets};

pub const OUT_PER_STEP: usize = 6;
pub const N_TRANSITIONS: usize = 3;
/// Added to the Leaving logit of agents whose constant-velocity next
/// position is off the map.
pub const EXIT_PRIOR_LOGIT: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    /// Context attends to agents, then agents attend to the updated context.
    Dual,
    /// Agents attend to the raw context only.
    Uni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub attention_heads: usize,
    pub interaction_layers: usize,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
    pub t_hist: usize,
    pub t_pred: usize,
    pub cross_mode: CrossMode,
    /// Meters per unit of position input.
    pub position_scale: f64,
    /// m/s per unit of velocity input.
    pub velocity_scale: f64,
    pub sigma_floor: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            attention_heads: 2,
            interaction_layers: 2,
            head_hidden: 64,
            ffn_hidden: 64,
            t_hist: crate::scene::T_HIST,
            t_pred: crate::scene::T_PRED,
            cross_mode: CrossMode::Dual,
            position_scale: 20.0,
            velocity_scale: 10.0,
            sigma_floor: 1e-4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.attention_heads == 0 {
            return Err(Error::InvalidConfig("latent_dim and heads must be positive".into()));
        }
        if self.latent_dim % self.attention_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "latent_dim {} not divisible by {} heads",
                self.latent_dim, self.attention_heads
            )));
        }
        if self.t_hist == 0 || self.t_pred == 0 {
            return Err(Error::InvalidConfig("horizons must be positive".into()));
        }
        if !(self.sigma_floor > 0.0 && self.position_scale > 0.0 && self.velocity_scale > 0.0) {
            return Err(Error::InvalidConfig("scales must be positive".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    pub names: Vec<String>,
    pub values: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: String, value: Matrix<T>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

struct Init<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> usize {
        let data = (0..rows * cols)
            .map(|_| T::lit(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.store
            .add(name, Matrix::from_vec(rows, cols, vec![T::lit(v); rows * cols]))
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Weight {
        Weight {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out, gain / (fan_in as f64).sqrt()),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out, gain / (fan_in as f64).sqrt()),
            b: self.constant(format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(format!("{name}.gain"), 1, dim, 1.0),
            bias: self.constant(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    fn attention(&mut self, name: &str, dim: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), dim, dim, 1.0),
            k: self.linear(&format!("{name}.k"), dim, dim, 1.0),
            v: self.linear(&format!("{name}.v"), dim, dim, 1.0),
            o: self.linear(&format!("{name}.o"), dim, dim, 1.0),
            heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Weight {
    w: usize,
}

impl Weight {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(self.w, &p.values[self.w]);
        tape.matmul(x, w)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(self.w, &p.values[self.w]);
        let b = tape.param(self.b, &p.values[self.b]);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(self.gain, &p.values[self.gain]);
        let b = tape.param(self.bias, &p.values[self.bias]);
        let z = tape.standardize(x, T::lit(1e-5));
        let z = tape.mul_row(z, g);
        tape.add_row(z, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    /// Multi-head attention of `queries` over `keys`. `key_valid` masks key rows.
    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamStore<T>,
        queries: Var,
        keys: Var,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let q = self.q.apply(tape, p, queries);
        let k = self.k.apply(tape, p, keys);
        let v = self.v.apply(tape, p, keys);
        let dim = tape.value(q).cols;
        let nq = tape.value(q).rows;
        let dh = dim / self.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mask = key_valid.map(|valid| {
            (0..nq)
                .flat_map(|_| valid.iter().copied())
                .collect::<Vec<bool>>()
        });
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, mask.clone());
            outs.push(tape.matmul(a, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.o.apply(tape, p, cat)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    state_embed: Weight,
    gate_query: usize,
    gate_time: usize,
    pivot_embed: Weight,
    attr_embed: Linear,
    route_point: Linear,
    route_out: Linear,
    light_embed: Linear,
    cross_ctx: Attention,
    cross_ctx_norm: LayerNorm,
    cross_agent: Attention,
    cross_agent_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    heads: [Head; 3],
    transition: Linear,
}

/// The dynamics model: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct DynamicsModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Per-agent Gaussian futures and transition logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput<T: Scalar> {
    pub ids: Vec<AgentId>,
    pub kinds: Vec<AgentKind>,
    pub t_pred: usize,
    /// `N × (T_pred·6)`; per step `(μx, μy, σx, σy, cos, sin)`.
    pub values: Matrix<T>,
    /// `N × 3` logits over (Stay, Leaving, Invalid).
    pub logits: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPrediction<T> {
    pub mean: [T; 2],
    pub std: [T; 2],
    pub heading: [T; 2],
}

impl<T: Scalar> PredictionOutput<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn step(&self, agent: usize, step: usize) -> StepPrediction<T> {
        let r = &self.values.row(agent)[step * OUT_PER_STEP..(step + 1) * OUT_PER_STEP];
        StepPrediction {
            mean: [r[0], r[1]],
            std: [r[2], r[3]],
            heading: [r[4], r[5]],
        }
    }

    pub fn logits(&self, agent: usize) -> [T; 3] {
        let r = self.logits.row(agent);
        [r[0], r[1], r[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite() && self.logits.is_finite()
    }
}

/// Handles to the output nodes of a recorded forward pass.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub values: Var,
    pub logits: Var,
    pub agent_features: Var,
    pub context_features: Var,
    pub enhanced: Var,
    pub refined: Var,
}

/// Parameter groups used for gradient checking.
pub const LAYER_TYPES: [&str; 7] = [
    "agent_encoder",
    "context_encoder",
    "cross_attention",
    "self_attention",
    "feed_forward",
    "layer_norm",
    "output_heads",
];

/// Which of [`LAYER_TYPES`] a parameter belongs to.
pub fn layer_type(name: &str) -> &'static str {
    if name.contains("norm") {
        "layer_norm"
    } else if name.starts_with("agent.") {
        "agent_encoder"
    } else if name.starts_with("ctx.") {
        "context_encoder"
    } else if name.starts_with("cross.") {
        "cross_attention"
    } else if name.contains(".attn.") {
        "self_attention"
    } else if name.contains(".ff") {
        "feed_forward"
    } else {
        "output_heads"
    }
}

impl<T: Scalar> DynamicsModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(config.init_seed, "model-init", 0);
        let d = config.latent_dim;
        let h = config.attention_heads;
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let state_embed = init.weight("agent.state", input::STATE_DIM, d, 1.0);
        let gate_query = init.uniform("agent.gate.query".into(), d, 1, 1.0 / (d as f64).sqrt());
        let gate_time = init.constant("agent.gate.time".into(), config.t_hist, 1, 0.0);
        let pivot_embed = init.weight("agent.pivot", input::STATE_DIM, d, 1.0);
        let attr_embed = init.linear("agent.attr", input::ATTR_DIM, d, 1.0);
        let route_point = init.linear("ctx.route.point", input::ROUTE_POINT_DIM, d, 1.0);
        let route_out = init.linear("ctx.route.out", d, d, 1.0);
        let light_embed = init.linear("ctx.light", input::LIGHT_DIM, d, 1.0);
        let cross_ctx = init.attention("cross.ctx", d, h);
        let cross_ctx_norm = init.norm("cross.ctx.norm", d);
        let cross_agent = init.attention("cross.agent", d, h);
        let cross_agent_norm = init.norm("cross.agent.norm", d);
        let layers = (0..config.interaction_layers)
            .map(|l| EncoderLayer {
                attn: init.attention(&format!("xf{l}.attn"), d, h),
                norm1: init.norm(&format!("xf{l}.norm1"), d),
                ff1: init.linear(&format!("xf{l}.ff1"), d, config.ffn_hidden, 1.0),
                ff2: init.linear(&format!("xf{l}.ff2"), config.ffn_hidden, d, 1.0),
                norm2: init.norm(&format!("xf{l}.norm2"), d),
            })
            .collect();
        let out_dim = config.t_pred * OUT_PER_STEP;
        let heads = AgentKind::ALL.map(|k| Head {
            hidden: init.linear(&format!("head.{}.hidden", k.name()), d, config.head_hidden, 1.0),
            // small output layer so the untrained model starts near its kinematic prior
            out: init.linear(&format!("head.{}.out", k.name()), config.head_hidden, out_dim, 0.1),
        });
        let transition = init.linear("transition", d, N_TRANSITIONS, 0.1);
        let layout = Layout {
            state_embed,
            gate_query,
            gate_time,
            pivot_embed,
            attr_embed,
            route_point,
            route_out,
            light_embed,
            cross_ctx,
            cross_ctx_norm,
            cross_agent,
            cross_agent_norm,
            layers,
            heads,
            transition,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Rebuilds a model from stored parameter values (names and shapes must match).
    pub fn with_params(config: ModelConfig, names: &[String], values: Vec<Matrix<T>>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if names != model.params.names.as_slice() {
            return Err(Error::Format("parameter names do not match the model layout".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != model.params.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    names[i],
                    v.shape(),
                    model.params.values[i].shape()
                )));
            }
        }
        model.params.values = values;
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records a full forward pass on a fresh tape.
    pub fn forward_pass(&self, input: &ModelInput<T>) -> ForwardPass<T> {
        let mut tape = Tape::new();
        let p = &self.params;
        let l = &self.layout;
        let agent_features = self.encode_agents(&mut tape, input);
        let context_features = self.encode_context(&mut tape, input);
        let valid = input.agent_mask.as_deref();
        let enhanced = self.dual_cross_attention(&mut tape, agent_features, context_features, valid);
        let refined = self.interaction_transformer(&mut tape, enhanced, valid);

        // per-kind heads on the rows of that kind
        let n = input.len();
        let mut parts = Vec::new();
        for kind in AgentKind::ALL {
            let idx: Vec<usize> = (0..n).filter(|&i| input.kinds[i] == kind).collect();
            if idx.is_empty() {
                continue;
            }
            let head = &l.heads[kind.index()];
            let x = tape.gather_rows(refined, &idx);
            let hdn = head.hidden.apply(&mut tape, p, x);
            let hdn = tape.silu(hdn);
            parts.push((head.out.apply(&mut tape, p, hdn), idx));
        }
        let raw = tape.scatter_rows(n, parts);
        let values = tape.column_map(raw, self.output_map(input));
        let logits = l.transition.apply(&mut tape, p, refined);
        let logits = self.add_exit_prior(&mut tape, logits, input);
        ForwardPass {
            tape,
            values,
            logits,
            agent_features,
            context_features,
            enhanced,
            refined,
        }
    }

    fn add_exit_prior(&self, tape: &mut Tape<T>, logits: Var, input: &ModelInput<T>) -> Var {
        let mut offset = Matrix::zeros(input.len(), N_TRANSITIONS);
        for (i, &e) in input.exits.iter().enumerate() {
            if e {
                offset.set(i, crate::scene::Transition::Leaving.index(), T::lit(EXIT_PRIOR_LOGIT));
            }
        }
        let offset = tape.input(offset);
        tape.add(logits, offset)
    }

    /// Means are anchored at the pivot position plus constant-velocity
    /// displacement; headings at the pivot heading.
    fn output_map(&self, input: &ModelInput<T>) -> ColumnMap<T> {
        let t_pred = self.config.t_pred;
        let cols = t_pred * OUT_PER_STEP;
        let mut positive = vec![false; cols];
        let mut scale = vec![T::one(); cols];
        let mut offset = Matrix::zeros(input.len(), cols);
        for k in 0..t_pred {
            positive[k * OUT_PER_STEP + 2] = true;
            positive[k * OUT_PER_STEP + 3] = true;
            scale[k * OUT_PER_STEP + 2] = T::zero();
            scale[k * OUT_PER_STEP + 3] = T::zero();
        }
        for (i, s) in input.pivot.iter().enumerate() {
            let (c, sn) = s.heading_vec();
            for k in 0..t_pred {
                let ahead = input.dt * T::from_usize(k + 1).unwrap();
                let row = offset.row_mut(i);
                let b = k * OUT_PER_STEP;
                row[b] = s.x + s.vx * ahead;
                row[b + 1] = s.y + s.vy * ahead;
                row[b + 4] = c;
                row[b + 5] = sn;
            }
        }
        ColumnMap {
            positive,
            scale,
            offset,
            floor: T::lit(self.config.sigma_floor),
        }
    }

    /// `N × D` agent features: gated temporal pooling of per-frame state
    /// embeddings, plus pivot-state and attribute embeddings.
    fn encode_agents(&self, tape: &mut Tape<T>, input: &ModelInput<T>) -> Var {
        let p = &self.params;
        let l = &self.layout;
        let n = input.len();
        let th = input.t_hist();
        let hist = tape.input(input.history.clone());
        // no bias: an all-zero state embeds to zero
        let e = l.state_embed.apply(tape, p, hist);
        let e = tape.silu(e);
        let q = tape.param(l.gate_query, &p.values[l.gate_query]);
        let score = tape.matmul(e, q);
        let time = tape.param(l.gate_time, &p.values[l.gate_time]);
        let tiled: Vec<usize> = (0..n * th).map(|r| r % th).collect();
        let time = tape.gather_rows(time, &tiled);
        let score = tape.add(score, time);
        let gate = tape.sigmoid(score);
        let mask = Matrix::from_vec(
            n * th,
            1,
            input
                .mask
                .iter()
                .map(|&m| if m { T::one() } else { T::zero() })
                .collect(),
        );
        let gate = tape.mul_const(gate, mask);
        let weighted = tape.scale_rows_by(e, gate);
        let pooled = tape.segment_sum(weighted, th);
        let pooled = tape.scale(pooled, T::one() / T::from_usize(th).unwrap());

        let last: Vec<usize> = (0..n).map(|i| i * th + th - 1).collect();
        let pivot_rows = tape.gather_rows(hist, &last);
        let pivot = l.pivot_embed.apply(tape, p, pivot_rows);
        let attrs = tape.input(input.attributes.clone());
        let attrs = l.attr_embed.apply(tape, p, attrs);
        let f = tape.add(pooled, pivot);
        tape.add(f, attrs)
    }

    /// `(N_R + N_L) × D`: max-pooled route polylines, then time-averaged lights.
    fn encode_context(&self, tape: &mut Tape<T>, input: &ModelInput<T>) -> Var {
        let p = &self.params;
        let l = &self.layout;
        let pts = tape.input(input.route_points.clone());
        let e = l.route_point.apply(tape, p, pts);
        let e = tape.silu(e);
        let pooled: Vec<Var> = input
            .route_rows
            .iter()
            .map(|r| {
                let rows: Vec<usize> = r.clone().collect();
                let g = tape.gather_rows(e, &rows);
                tape.max_rows(g)
            })
            .collect();
        let routes = tape.concat_rows(&pooled);
        let routes = l.route_out.apply(tape, p, routes);
        if input.n_lights == 0 {
            return routes;
        }
        let th = input.lights.rows / input.n_lights;
        let lights = tape.input(input.lights.clone());
        let le = l.light_embed.apply(tape, p, lights);
        let le = tape.silu(le);
        let le = tape.segment_sum(le, th);
        let le = tape.scale(le, T::one() / T::from_usize(th).unwrap());
        tape.concat_rows(&[routes, le])
    }

    fn dual_cross_attention(
        &self,
        tape: &mut Tape<T>,
        agents: Var,
        context: Var,
        valid: Option<&[bool]>,
    ) -> Var {
        let p = &self.params;
        let l = &self.layout;
        let context = match self.config.cross_mode {
            CrossMode::Dual => {
                let upd = l.cross_ctx.apply(tape, p, context, agents, valid);
                let c = tape.add(context, upd);
                l.cross_ctx_norm.apply(tape, p, c)
            }
            CrossMode::Uni => context,
        };
        let upd = l.cross_agent.apply(tape, p, agents, context, None);
        let a = tape.add(agents, upd);
        l.cross_agent_norm.apply(tape, p, a)
    }

    fn interaction_transformer(&self, tape: &mut Tape<T>, x: Var, valid: Option<&[bool]>) -> Var {
        let p = &self.params;
        let mut x = x;
        for layer in &self.layout.layers {
            let a = layer.attn.apply(tape, p, x, x, valid);
            let y = tape.add(x, a);
            let y = layer.norm1.apply(tape, p, y);
            let f = layer.ff1.apply(tape, p, y);
            let f = tape.silu(f);
            let f = layer.ff2.apply(tape, p, f);
            let z = tape.add(y, f);
            x = layer.norm2.apply(tape, p, z);
        }
        x
    }

    /// Inference.
    pub fn predict(&self, input: &ModelInput<T>) -> PredictionOutput<T> {
        let cols = self.config.t_pred * OUT_PER_STEP;
        if input.is_empty() {
            return PredictionOutput {
                ids: vec![],
                kinds: vec![],
                t_pred: self.config.t_pred,
                values: Matrix::zeros(0, cols),
                logits: Matrix::zeros(0, N_TRANSITIONS),
            };
        }
        let fp = self.forward_pass(input);
        PredictionOutput {
            ids: input.ids.clone(),
            kinds: input.kinds.clone(),
            t_pred: self.config.t_pred,
            values: fp.tape.value(fp.values).clone(),
            logits: fp.tape.value(fp.logits).clone(),
        }
    }

    /// Loss and parameter gradients for one instance.
    pub fn loss_and_gradients(
        &self,
        input: &ModelInput<T>,
        targets: &Targets<T>,
        weights: &loss::LossWeights,
    ) -> Result<(loss::LossBreakdown<T>, Vec<Matrix<T>>)> {
        if input.is_empty() {
            return Err(Error::EmptyBatch("instance has no agents"));
        }
        let fp = self.forward_pass(input);
        let pred = PredictionOutput {
            ids: input.ids.clone(),
            kinds: input.kinds.clone(),
            t_pred: self.config.t_pred,
            values: fp.tape.value(fp.values).clone(),
            logits: fp.tape.value(fp.logits).clone(),
        };
        let (breakdown, g) = loss::loss_with_gradient(&pred, targets, weights)?;
        let grads = fp
            .tape
            .backward(&[(fp.values, g.values), (fp.logits, g.logits)]);
        let out = self.collect_gradients(&grads)?;
        Ok((breakdown, out))
    }

    fn collect_gradients(&self, grads: &Gradients<T>) -> Result<Vec<Matrix<T>>> {
        self.params
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let g = grads
                    .param(i)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(v.rows, v.cols));
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(Error::NonFiniteGradient(self.params.names[i].clone()))
                }
            })
            .collect()
    }

    /// Intermediate features, exposed for inspection and tests.
    pub fn features(&self, input: &ModelInput<T>) -> FeatureDump<T> {
        let fp = self.forward_pass(input);
        FeatureDump {
            agent: fp.tape.value(fp.agent_features).clone(),
            context: fp.tape.value(fp.context_features).clone(),
            enhanced: fp.tape.value(fp.enhanced).clone(),
            refined: fp.tape.value(fp.refined).clone(),
        }
    }

    /// Runs only the dual-cross stage on given features.
    pub fn cross_attend(&self, agents: &Matrix<T>, context: &Matrix<T>) -> Matrix<T> {
        let mut tape = Tape::new();
        let a = tape.input(agents.clone());
        let c = tape.input(context.clone());
        let out = self.dual_cross_attention(&mut tape, a, c, None);
        tape.value(out).clone()
    }

    /// Runs only the agent-agent transformer on given features.
    pub fn interact(&self, features: &Matrix<T>, valid: Option<&[bool]>) -> Matrix<T> {
        let mut tape = Tape::new();
        let x = tape.input(features.clone());
        let out = self.interaction_transformer(&mut tape, x, valid);
        tape.value(out).clone()
    }

    /// Runs only the prediction heads on given refined features.
    pub fn heads(&self, refined: &Matrix<T>, input: &ModelInput<T>) -> PredictionOutput<T> {
        let mut tape = Tape::new();
        let p = &self.params;
        let x = tape.input(refined.clone());
        let n = refined.rows;
        let mut parts = Vec::new();
        for kind in AgentKind::ALL {
            let idx: Vec<usize> = (0..n).filter(|&i| input.kinds[i] == kind).collect();
            if idx.is_empty() {
                continue;
            }
            let head = &self.layout.heads[kind.index()];
            let g = tape.gather_rows(x, &idx);
            let h = head.hidden.apply(&mut tape, p, g);
            let h = tape.silu(h);
            parts.push((head.out.apply(&mut tape, p, h), idx));
        }
        let raw = tape.scatter_rows(n, parts);
        let values = tape.column_map(raw, self.output_map(input));
        let logits = self.layout.transition.apply(&mut tape, p, x);
        let logits = self.add_exit_prior(&mut tape, logits, input);
        PredictionOutput {
            ids: input.ids.clone(),
            kinds: input.kinds.clone(),
            t_pred: self.config.t_pred,
            values: tape.value(values).clone(),
            logits: tape.value(logits).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureDump<T> {
    pub agent: Matrix<T>,
    pub context: Matrix<T>,
    pub enhanced: Matrix<T>,
    pub refined: Matrix<T>,
}

#[cfg(test)]
pub(crate) mod tests;
