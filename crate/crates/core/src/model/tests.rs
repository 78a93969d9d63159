use super::loss::{loss, LossWeights};
use super::*;
use crate::scene::{
    AgentAttributes, AgentState, Bounds, LightDef, LightPhase, MapContext, RoutePolyline,
    SceneFrame, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

type TestRng = ChaCha8Rng;

pub(crate) fn random_map(rng: &mut TestRng, n_routes: usize, n_lights: usize) -> MapContext<f64> {
    let routes = (0..n_routes)
        .map(|r| {
            let n = rng.random_range(2..7);
            let mut p = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)];
            let points = (0..n)
                .map(|_| {
                    p = [p[0] + rng.random_range(1.0..8.0), p[1] + rng.random_range(-4.0..4.0)];
                    p
                })
                .collect();
            RoutePolyline {
                route_id: r,
                points,
                allowed_kinds: AgentKind::ALL
                    .into_iter()
                    .filter(|_| rng.random_bool(0.6))
                    .collect(),
            }
        })
        .collect();
    let lights = (0..n_lights)
        .map(|l| LightDef {
            position: [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)],
            routes: vec![l % n_routes],
        })
        .collect();
    MapContext {
        routes,
        lights,
        bounds: Bounds {
            min_x: -60.0,
            min_y: -60.0,
            max_x: 60.0,
            max_y: 60.0,
        },
        scene_origin: [0.0, 0.0],
    }
}

pub(crate) fn random_state(rng: &mut TestRng) -> AgentState<f64> {
    AgentState::new(
        rng.random_range(-40.0..40.0),
        rng.random_range(-40.0..40.0),
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
        rng.random_range(-PI..PI),
    )
}

/// `n` agents with random kinds, random entry frames, 12 routes and 4 lights.
pub(crate) fn random_input(n: usize, seed: u64) -> (ModelInput<f64>, Targets<f64>) {
    let mut rng = TestRng::seed_from_u64(seed);
    let map = random_map(&mut rng, 12, 4);
    let config = ModelConfig::default();
    let ids: Vec<AgentId> = (0..n as u64).map(AgentId).collect();
    let kinds: Vec<AgentKind> = (0..n)
        .map(|i| AgentKind::ALL[if i < 3 { i } else { rng.random_range(0..3) }])
        .collect();
    let enter: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let history: Vec<SceneFrame<f64>> = (0..10)
        .map(|tau| SceneFrame {
            t: tau as u64,
            agents: ids
                .iter()
                .zip(&enter)
                .filter(|(_, &e)| tau >= e)
                .map(|(&id, _)| (id, random_state(&mut rng)))
                .collect(),
            lights: (0..4)
                .map(|_| [LightPhase::Red, LightPhase::Green, LightPhase::Yellow][rng.random_range(0..3)])
                .collect(),
        })
        .collect();
    let mut input = ModelInput::build(&ids, kinds.clone(), &history, &map, &config, 0.4);
    for (i, &k) in kinds.iter().enumerate() {
        let a = AgentAttributes::new(
            ids[i],
            k,
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..2.0),
            rng.random_range(1.0..2.0),
        )
        .unwrap();
        input
            .attributes
            .row_mut(i)
            .copy_from_slice(&input::attribute_features(&a));
    }
    let targets = Targets {
        future: (0..n)
            .map(|i| {
                let p = input.pivot[i];
                (0..10)
                    .map(|k| {
                        rng.random_bool(0.9).then(|| {
                            let t = 0.4 * (k + 1) as f64;
                            [
                                p.x + p.vx * t + rng.random_range(-2.0..2.0),
                                p.y + p.vy * t + rng.random_range(-2.0..2.0),
                                p.theta + rng.random_range(-0.5..0.5),
                            ]
                        })
                    })
                    .collect()
            })
            .collect(),
        labels: (0..n).map(|_| Transition::ALL[rng.random_range(0..3)]).collect(),
    };
    (input, targets)
}

fn model(seed: u64) -> DynamicsModel<f64> {
    DynamicsModel::new(ModelConfig {
        init_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Picks agents by index (repeats allowed): new row `i` is old row `idx[i]`.
fn permute_input(input: &ModelInput<f64>, idx: &[usize]) -> ModelInput<f64> {
    let th = input.t_hist();
    let n = idx.len();
    let mut out = ModelInput {
        ids: idx.iter().map(|&j| input.ids[j]).collect(),
        kinds: idx.iter().map(|&j| input.kinds[j]).collect(),
        pivot: idx.iter().map(|&j| input.pivot[j]).collect(),
        history: Matrix::zeros(n * th, input.history.cols),
        mask: vec![false; n * th],
        attributes: Matrix::zeros(n, input.attributes.cols),
        exits: idx.iter().map(|&j| input.exits[j]).collect(),
        agent_mask: input
            .agent_mask
            .as_ref()
            .map(|m| idx.iter().map(|&j| m[j]).collect()),
        ..input.clone()
    };
    for (i, &j) in idx.iter().enumerate() {
        out.attributes.row_mut(i).copy_from_slice(input.attributes.row(j));
        for tau in 0..th {
            out.history
                .row_mut(i * th + tau)
                .copy_from_slice(input.history.row(j * th + tau));
            out.mask[i * th + tau] = input.mask[j * th + tau];
        }
    }
    out
}

fn permute_rows(m: &Matrix<f64>, perm: &[usize]) -> Matrix<f64> {
    let mut out = m.clone();
    for (i, &j) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(j));
    }
    out
}

#[test]
fn shapes() {
    let m = model(0);
    for n in [1, 2, 7] {
        let (input, _) = random_input(n, n as u64);
        let f = m.features(&input);
        assert_eq!(f.agent.shape(), (n, 32));
        assert_eq!(f.context.shape(), (16, 32));
        assert_eq!(f.refined.shape(), (n, 32));
        let out = m.predict(&input);
        assert_eq!(out.values.shape(), (n, 10 * 6));
        assert_eq!(out.logits.shape(), (n, 3));
        assert!(out.is_finite());
    }
}

#[test]
fn parameter_count_is_stable() {
    assert_eq!(model(1).parameter_count(), model(2).parameter_count());
    assert_eq!(model(1).params.names, model(2).params.names);
    assert_ne!(model(1).params.values, model(2).params.values);
    assert_eq!(model(3).params.values, model(3).params.values);
}

#[test]
fn duplicated_agent_gets_identical_features() {
    let m = model(0);
    let (input, _) = random_input(4, 11);
    let dup = permute_input(&input, &[0, 1, 2, 3, 1]);
    let f = m.features(&dup);
    assert_eq!(f.agent.row(1), f.agent.row(4));
    assert_eq!(f.refined.row(1), f.refined.row(4));
}

#[test]
fn masking_frame_matters_only_for_nonzero_states() {
    let m = model(0);
    let (mut input, _) = random_input(3, 12);
    let th = 10;
    // force full history for agent 0 and a zero state at frame 3
    for tau in 0..th {
        input.mask[tau] = true;
    }
    input.history.row_mut(3).iter_mut().for_each(|v| *v = 0.0);
    input.history.row_mut(5).copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.6, 0.8]);
    let base = m.features(&input).agent;
    for tau in 0..th - 1 {
        let mut masked = input.clone();
        masked.mask[tau] = false;
        let f = m.features(&masked).agent;
        let state_is_zero = input.history.row(tau).iter().all(|&v| v == 0.0);
        let changed = f.row(0) != base.row(0);
        assert_eq!(changed, !state_is_zero, "frame {tau}");
        assert_eq!(f.row(1), base.row(1));
    }
}

#[test]
fn agent_present_only_at_pivot_is_encoded() {
    let m = model(0);
    let (mut input, _) = random_input(2, 13);
    for tau in 0..9 {
        input.mask[tau] = false;
        input.history.row_mut(tau).iter_mut().for_each(|v| *v = 0.0);
    }
    input.mask[9] = true;
    let f = m.features(&input).agent;
    assert!(f.row(0).iter().all(|v| v.is_finite()));
    assert!(f.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn route_points_are_order_free() {
    let m = model(0);
    let (input, _) = random_input(2, 14);
    let base = m.features(&input).context;
    let mut shuffled = input.clone();
    for r in &input.route_rows {
        let rows: Vec<usize> = r.clone().collect();
        for (k, &src) in rows.iter().rev().enumerate() {
            shuffled
                .route_points
                .row_mut(r.start + k)
                .copy_from_slice(input.route_points.row(src));
        }
    }
    assert_ne!(shuffled.route_points, input.route_points);
    assert_eq!(m.features(&shuffled).context, base);
}

#[test]
fn light_phase_changes_its_context_row() {
    let m = model(0);
    let (input, _) = random_input(2, 15);
    let set_phase = |onehot: [f64; 3]| {
        let mut x = input.clone();
        for r in 0..x.lights.rows {
            x.lights.row_mut(r)[..3].copy_from_slice(&onehot);
        }
        m.features(&x).context
    };
    let red = set_phase([1.0, 0.0, 0.0]);
    let green = set_phase([0.0, 1.0, 0.0]);
    for l in 0..4 {
        assert_ne!(red.row(12 + l), green.row(12 + l));
    }
    for r in 0..12 {
        assert_eq!(red.row(r), green.row(r));
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut TestRng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn dual_and_uni_differ() {
    let mut rng = TestRng::seed_from_u64(16);
    let dual = model(5);
    let mut uni = dual.clone();
    uni.config.cross_mode = CrossMode::Uni;
    let a = random_matrix(3, 32, &mut rng);
    let c = random_matrix(16, 32, &mut rng);
    assert!(max_abs_diff(&dual.cross_attend(&a, &c), &uni.cross_attend(&a, &c)) > 1e-6);
}

#[test]
fn cross_attention_ignores_context_order() {
    let mut rng = TestRng::seed_from_u64(17);
    for mode in [CrossMode::Dual, CrossMode::Uni] {
        let mut m = model(6);
        m.config.cross_mode = mode;
        let a = random_matrix(4, 32, &mut rng);
        let c = random_matrix(16, 32, &mut rng);
        let perm: Vec<usize> = (0..16).rev().collect();
        let out = m.cross_attend(&a, &c);
        let out_p = m.cross_attend(&a, &permute_rows(&c, &perm));
        assert!(max_abs_diff(&out, &out_p) < 1e-12);
    }
}

/// Row-vector helpers on plain slices for the hand-written attention.
fn named<'a>(m: &'a DynamicsModel<f64>, name: &str) -> &'a Matrix<f64> {
    &m.params.values[m.params.index_of(name).unwrap()]
}

fn affine(x: &[f64], m: &DynamicsModel<f64>, prefix: &str) -> Vec<f64> {
    let w = named(m, &format!("{prefix}.w"));
    let b = named(m, &format!("{prefix}.b"));
    (0..w.cols)
        .map(|j| b.data[j] + (0..w.rows).map(|i| x[i] * w.get(i, j)).sum::<f64>())
        .collect()
}

#[test]
fn single_agent_uni_matches_hand_computation() {
    let mut rng = TestRng::seed_from_u64(18);
    let mut m = model(7);
    m.config.cross_mode = CrossMode::Uni;
    let a = random_matrix(1, 32, &mut rng);
    let c = random_matrix(5, 32, &mut rng);
    let q = affine(a.row(0), &m, "cross.agent.q");
    let ks: Vec<Vec<f64>> = (0..5).map(|r| affine(c.row(r), &m, "cross.agent.k")).collect();
    let vs: Vec<Vec<f64>> = (0..5).map(|r| affine(c.row(r), &m, "cross.agent.v")).collect();
    let mut heads = vec![0.0; 32];
    for h in 0..2 {
        let cols = h * 16..(h + 1) * 16;
        let scores: Vec<f64> = ks
            .iter()
            .map(|k| cols.clone().map(|j| q[j] * k[j]).sum::<f64>() / 4.0)
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in cols {
            heads[j] = (0..5).map(|r| w[r] / z * vs[r][j]).sum();
        }
    }
    let attn = affine(&heads, &m, "cross.agent.o");
    let resid: Vec<f64> = a.row(0).iter().zip(&attn).map(|(x, y)| x + y).collect();
    let mean = resid.iter().sum::<f64>() / 32.0;
    let var = resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
    let gain = named(&m, "cross.agent.norm.gain");
    let bias = named(&m, "cross.agent.norm.bias");
    let expect: Vec<f64> = (0..32)
        .map(|j| (resid[j] - mean) / (var + 1e-5).sqrt() * gain.data[j] + bias.data[j])
        .collect();
    let got = m.cross_attend(&a, &c);
    for j in 0..32 {
        assert!((got.data[j] - expect[j]).abs() < 1e-12);
    }
}

#[test]
fn transformer_is_permutation_equivariant() {
    let mut rng = TestRng::seed_from_u64(19);
    let m = model(8);
    let x = random_matrix(6, 32, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let out = m.interact(&x, None);
    let out_p = m.interact(&permute_rows(&x, &perm), None);
    assert!(max_abs_diff(&permute_rows(&out, &perm), &out_p) < 1e-9);
}

#[test]
fn single_agent_transformer_is_finite() {
    let mut rng = TestRng::seed_from_u64(20);
    let out = model(9).interact(&random_matrix(1, 32, &mut rng), None);
    assert!(out.is_finite());
}

#[test]
fn masked_agent_does_not_affect_others() {
    let mut rng = TestRng::seed_from_u64(21);
    let m = model(10);
    let x = random_matrix(5, 32, &mut rng);
    let mut y = x.clone();
    y.row_mut(2).iter_mut().for_each(|v| *v = 0.0);
    let valid = [true, true, false, true, true];
    let a = m.interact(&x, Some(&valid));
    let b = m.interact(&y, Some(&valid));
    for r in [0, 1, 3, 4] {
        for (u, v) in a.row(r).iter().zip(b.row(r)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    // and through the full model
    let (mut input, _) = random_input(5, 22);
    input.agent_mask = Some(valid.to_vec());
    let base = m.predict(&input);
    let mut moved = input.clone();
    for tau in 0..10 {
        moved.history.row_mut(2 * 10 + tau)[0] += 0.7;
    }
    let out = m.predict(&moved);
    for r in [0, 1, 3, 4] {
        for (u, v) in base.values.row(r).iter().zip(out.values.row(r)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn heads_are_separate_per_kind() {
    let mut rng = TestRng::seed_from_u64(23);
    let m = model(11);
    let (mut input, _) = random_input(3, 24);
    input.pivot = vec![input.pivot[0]; 3];
    let row = random_matrix(1, 32, &mut rng);
    let refined = Matrix::from_rows(&vec![row.row(0).to_vec(); 3]);
    let out = m.heads(&refined, &input);
    assert_eq!(
        input.kinds,
        vec![AgentKind::MotorizedVehicle, AgentKind::NonMotorizedVehicle, AgentKind::Pedestrian]
    );
    assert_ne!(out.values.row(0), out.values.row(1));
    assert_ne!(out.values.row(1), out.values.row(2));
    assert_eq!(out.logits.row(0), out.logits.row(1));
}

#[test]
fn sigma_respects_floor_for_wild_weights() {
    let mut rng = TestRng::seed_from_u64(25);
    for s in 0..5 {
        let mut m = model(s);
        for p in &mut m.params.values {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-50.0..50.0));
        }
        let (input, _) = random_input(4, s);
        let out = m.predict(&input);
        for i in 0..4 {
            for k in 0..10 {
                let st = out.step(i, k);
                assert!(st.std[0] >= 1e-4 && st.std[1] >= 1e-4);
            }
        }
    }
}

#[test]
fn end_to_end_permutation_equivariance() {
    let m = model(12);
    let (input, _) = random_input(6, 26);
    let perm = [5, 3, 1, 0, 2, 4];
    let out = m.predict(&input);
    let out_p = m.predict(&permute_input(&input, &perm));
    assert!(max_abs_diff(&permute_rows(&out.values, &perm), &out_p.values) < 1e-9);
    assert!(max_abs_diff(&permute_rows(&out.logits, &perm), &out_p.logits) < 1e-9);
}

#[test]
fn exit_prior_raises_leaving_logit() {
    let (mut input, _) = random_input(3, 28);
    let m = model(0);
    input.exits = vec![false; 3];
    let base = m.predict(&input);
    input.exits[1] = true;
    let out = m.predict(&input);
    for i in 0..3 {
        for j in 0..3 {
            let d = out.logits.get(i, j) - base.logits.get(i, j);
            let want = if (i, j) == (1, 1) { EXIT_PRIOR_LOGIT } else { 0.0 };
            assert!((d - want).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_scene_predicts_nothing() {
    let (input, _) = random_input(2, 27);
    let empty = ModelInput {
        ids: vec![],
        kinds: vec![],
        history: Matrix::zeros(0, 6),
        mask: vec![],
        pivot: vec![],
        attributes: Matrix::zeros(0, 6),
        exits: vec![],
        ..input
    };
    let out = model(0).predict(&empty);
    assert!(out.is_empty());
    assert_eq!(out.values.shape(), (0, 60));
}

/// Analytic loss of a fixed prediction is unchanged when the prediction and
/// ground truth are rotated together (isotropic σ).
#[test]
fn loss_is_rotation_consistent() {
    let m = model(13);
    let (input, targets) = random_input(4, 28);
    let mut pred = m.predict(&input);
    for i in 0..4 {
        for k in 0..10 {
            let r = pred.values.row_mut(i);
            r[k * 6 + 3] = r[k * 6 + 2];
        }
    }
    let w = LossWeights::default();
    let base = loss(&pred, &targets, &w).unwrap().total;
    for phi in [0.3, 1.7, PI, 5.0] {
        let (c, s) = (f64::cos(phi), f64::sin(phi));
        let mut rp = pred.clone();
        for i in 0..4 {
            let r = rp.values.row_mut(i);
            for k in 0..10 {
                let b = k * 6;
                let (x, y) = (r[b], r[b + 1]);
                r[b] = c * x - s * y;
                r[b + 1] = s * x + c * y;
                let (u, v) = (r[b + 4], r[b + 5]);
                r[b + 4] = c * u - s * v;
                r[b + 5] = s * u + c * v;
            }
        }
        let mut rt = targets.clone();
        for f in rt.future.iter_mut().flatten().flatten() {
            *f = [c * f[0] - s * f[1], s * f[0] + c * f[1], f[2] + phi];
        }
        let rotated = loss(&rp, &rt, &w).unwrap().total;
        assert!((rotated - base).abs() < 1e-9, "{phi}: {rotated} vs {base}");
    }
}

fn total_loss(m: &DynamicsModel<f64>, input: &ModelInput<f64>, t: &Targets<f64>) -> f64 {
    loss(&m.predict(input), t, &LossWeights::default()).unwrap().total
}

/// Central differences over random coordinates of every layer type.
fn check_gradients(n_agents: usize, per_type: usize, seed: u64) {
    let m = model(seed);
    let (input, targets) = random_input(n_agents, seed + 100);
    let (_, grads) = m
        .loss_and_gradients(&input, &targets, &LossWeights::default())
        .unwrap();
    let mut rng = TestRng::seed_from_u64(seed);
    let h = 1e-5;
    for ty in LAYER_TYPES {
        let coords: Vec<(usize, usize)> = m
            .params
            .names
            .iter()
            .enumerate()
            .filter(|(_, n)| layer_type(n) == ty)
            .flat_map(|(p, _)| (0..m.params.values[p].data.len()).map(move |k| (p, k)))
            .collect();
        assert!(!coords.is_empty(), "{ty}");
        let mut worst = 0.0f64;
        for _ in 0..per_type {
            let (p, k) = coords[rng.random_range(0..coords.len())];
            let mut plus = m.clone();
            plus.params.values[p].data[k] += h;
            let mut minus = m.clone();
            minus.params.values[p].data[k] -= h;
            let fd = (total_loss(&plus, &input, &targets) - total_loss(&minus, &input, &targets))
                / (2.0 * h);
            let an = grads[p].data[k];
            // absolute floor well above the round-off of a difference quotient
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{ty} {}[{k}]: analytic {an} vs numeric {fd}",
                m.params.names[p]
            );
        }
        assert!(worst < 1e-3);
    }
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(5, 100, 31);
}

#[test]
fn gradients_on_two_agent_toy_batch() {
    check_gradients(2, 20, 32);
}

#[test]
fn non_finite_gradient_names_a_tensor() {
    let mut m = model(14);
    let (input, targets) = random_input(3, 33);
    let i = m.params.index_of("head.mv.out.b").unwrap();
    m.params.values[i].data[2] = f64::NAN;
    match m.loss_and_gradients(&input, &targets, &LossWeights::default()) {
        Err(Error::NonFiniteGradient(name)) => assert!(m.params.index_of(&name).is_some()),
        other => panic!("expected non-finite gradient, got {:?}", other.map(|r| r.0)),
    }
}

#[test]
fn works_in_single_precision() {
    let m = DynamicsModel::<f32>::new(ModelConfig::default()).unwrap();
    let (input, targets) = random_input(3, 34);
    let cast = |x: &Matrix<f64>| Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v as f32).collect());
    let input32 = ModelInput {
        ids: input.ids.clone(),
        kinds: input.kinds.clone(),
        history: cast(&input.history),
        mask: input.mask.clone(),
        pivot: input
            .pivot
            .iter()
            .map(|s| AgentState::new(s.x as f32, s.y as f32, s.vx as f32, s.vy as f32, s.theta as f32))
            .collect(),
        attributes: cast(&input.attributes),
        route_points: cast(&input.route_points),
        route_rows: input.route_rows.clone(),
        lights: cast(&input.lights),
        n_lights: input.n_lights,
        exits: input.exits.clone(),
        agent_mask: None,
        dt: 0.4,
    };
    let targets32 = Targets {
        future: targets
            .future
            .iter()
            .map(|f| f.iter().map(|g| g.map(|v| v.map(|x| x as f32))).collect())
            .collect(),
        labels: targets.labels.clone(),
    };
    let (b, g) = m
        .loss_and_gradients(&input32, &targets32, &LossWeights::default())
        .unwrap();
    assert!(b.total.is_finite());
    assert!(g.iter().all(Matrix::is_finite));
    let m64 = DynamicsModel::<f64>::new(ModelConfig::default()).unwrap();
    let l64 = total_loss(&m64, &input, &targets);
    assert!((b.total as f64 - l64).abs() < 1e-3 * l64.abs());
}
