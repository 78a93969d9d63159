//! Gaussian position NLL, heading cosine loss and transition cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Matrix;

use super::{PredictionOutput, Targets, N_TRANSITIONS, OUT_PER_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub heading: f64,
    pub transition: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heading: 1.0,
            transition: 0.5,
        }
    }
}

/// Loss terms; `total = position + heading + transition`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub position: T,
    pub heading: T,
    pub transition: T,
    pub valid_steps: usize,
}

/// Adjoints of the loss with respect to the prediction tensors.
#[derive(Debug, Clone)]
pub struct OutputGradient<T> {
    pub values: Matrix<T>,
    pub logits: Matrix<T>,
}

pub fn loss<T: Scalar>(
    pred: &PredictionOutput<T>,
    targets: &Targets<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    loss_with_gradient(pred, targets, weights).map(|(b, _)| b)
}

pub fn loss_with_gradient<T: Scalar>(
    pred: &PredictionOutput<T>,
    targets: &Targets<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown<T>, OutputGradient<T>)> {
    let n = pred.len();
    if targets.future.len() != n || targets.labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "targets cover {} agents, prediction {}",
            targets.future.len(),
            n
        )));
    }
    let valid = targets.valid_steps();
    if valid == 0 {
        return Err(Error::EmptyBatch("no valid future steps"));
    }
    let half = T::lit(0.5);
    let ln_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
    let inv_v = T::one() / T::from_usize(valid).unwrap();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let lh = T::lit(weights.heading);
    let lc = T::lit(weights.transition);

    let mut g_values = Matrix::zeros(n, pred.values.cols);
    let mut g_logits = Matrix::zeros(n, N_TRANSITIONS);
    let mut pos = T::zero();
    let mut head = T::zero();
    let mut trans = T::zero();

    for i in 0..n {
        let row = pred.values.row(i);
        for (k, gt) in targets.future[i].iter().enumerate() {
            let Some([gx, gy, gth]) = *gt else { continue };
            let b = k * OUT_PER_STEP;
            let grow = g_values.row_mut(i);
            let mut term = ln_2pi;
            for (d, g) in [gx, gy].into_iter().enumerate() {
                let mu = row[b + d];
                let sigma = row[b + 2 + d];
                let r = g - mu;
                let s2 = sigma * sigma;
                term += half * (r * r / s2) + sigma.ln();
                grow[b + d] = -r / s2 * inv_v;
                grow[b + 2 + d] = (-(r * r) / (s2 * sigma) + T::one() / sigma) * inv_v;
            }
            pos += term;

            let (u0, u1) = (row[b + 4], row[b + 5]);
            let norm = u0.hypot(u1);
            let (c, s) = (gth.cos(), gth.sin());
            let dot = u0 * c + u1 * s;
            head += lh * (T::one() - dot / norm);
            let n3 = norm * norm * norm;
            grow[b + 4] = -lh * (c / norm - dot * u0 / n3) * inv_v;
            grow[b + 5] = -lh * (s / norm - dot * u1 / n3) * inv_v;
        }

        let z = pred.logits.row(i);
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = z.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        let lse = m + sum.ln();
        let label = targets.labels[i].index();
        trans += lc * (lse - z[label]);
        for (j, gl) in g_logits.row_mut(i).iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            let y = if j == label { T::one() } else { T::zero() };
            *gl = lc * (p - y) * inv_n;
        }
    }

    let position = pos * inv_v;
    let heading = head * inv_v;
    let transition = trans * inv_n;
    Ok((
        LossBreakdown {
            total: position + heading + transition,
            position,
            heading,
            transition,
            valid_steps: valid,
        },
        OutputGradient {
            values: g_values,
            logits: g_logits,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentId, AgentKind, Transition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn prediction(n: usize, t_pred: usize, rng: &mut ChaCha8Rng) -> PredictionOutput<f64> {
        let mut values = Matrix::zeros(n, t_pred * 6);
        for i in 0..n {
            for k in 0..t_pred {
                let r = &mut values.row_mut(i)[k * 6..k * 6 + 6];
                r[0] = rng.random_range(-10.0..10.0);
                r[1] = rng.random_range(-10.0..10.0);
                r[2] = rng.random_range(0.1..3.0);
                r[3] = rng.random_range(0.1..3.0);
                r[4] = rng.random_range(-1.0..1.0);
                r[5] = rng.random_range(-1.0..1.0);
            }
        }
        let logits = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect());
        PredictionOutput {
            ids: (0..n as u64).map(AgentId).collect(),
            kinds: vec![AgentKind::MotorizedVehicle; n],
            t_pred,
            values,
            logits,
        }
    }

    fn targets(n: usize, t_pred: usize, rng: &mut ChaCha8Rng) -> Targets<f64> {
        Targets {
            future: (0..n)
                .map(|_| {
                    (0..t_pred)
                        .map(|_| {
                            rng.random_bool(0.8).then(|| {
                                [
                                    rng.random_range(-10.0..10.0),
                                    rng.random_range(-10.0..10.0),
                                    rng.random_range(-PI..PI),
                                ]
                            })
                        })
                        .collect()
                })
                .collect(),
            labels: (0..n)
                .map(|_| Transition::ALL[rng.random_range(0..3)])
                .collect(),
        }
    }

    /// Straight-line evaluation of the same objective.
    fn reference(p: &PredictionOutput<f64>, t: &Targets<f64>) -> f64 {
        let mut pos = Vec::new();
        let mut head = Vec::new();
        for i in 0..p.len() {
            for k in 0..p.t_pred {
                if let Some(g) = t.future[i][k] {
                    let s = p.step(i, k);
                    let nll_x = 0.5 * ((g[0] - s.mean[0]) / s.std[0]).powi(2) + s.std[0].ln();
                    let nll_y = 0.5 * ((g[1] - s.mean[1]) / s.std[1]).powi(2) + s.std[1].ln();
                    pos.push(nll_x + nll_y + (2.0 * PI).ln());
                    let pred_th = s.heading[1].atan2(s.heading[0]);
                    head.push(1.0 - (pred_th - g[2]).cos());
                }
            }
        }
        let ce: Vec<f64> = (0..p.len())
            .map(|i| {
                let z = p.logits(i);
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                -(z[t.labels[i].index()].exp() / denom).ln()
            })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        mean(&pos) + mean(&head) + 0.5 * mean(&ce)
    }

    #[test]
    fn gaussian_at_mean_is_ln_2pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = prediction(1, 1, &mut rng);
        p.values.row_mut(0).copy_from_slice(&[1.0, 2.0, 1.0, 1.0, 1.0, 0.0]);
        p.logits.row_mut(0).copy_from_slice(&[30.0, 0.0, 0.0]);
        let t = Targets {
            future: vec![vec![Some([1.0, 2.0, 0.0])]],
            labels: vec![Transition::Stay],
        };
        let b = loss(&p, &t, &LossWeights::default()).unwrap();
        assert!((b.position - 1.8378770664093453).abs() < 1e-12);
        assert!(b.heading.abs() < 1e-15);
        assert!(b.transition < 1e-12);
    }

    #[test]
    fn opposite_heading_costs_twice_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = prediction(1, 1, &mut rng);
        p.values.row_mut(0).copy_from_slice(&[0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let t = Targets {
            future: vec![vec![Some([0.0, 0.0, PI])]],
            labels: vec![Transition::Stay],
        };
        let b = loss(&p, &t, &LossWeights::default()).unwrap();
        assert!((b.heading - 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_valid_steps_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = prediction(2, 3, &mut rng);
        let t = Targets {
            future: vec![vec![None; 3]; 2],
            labels: vec![Transition::Stay; 2],
        };
        assert!(matches!(
            loss(&p, &t, &LossWeights::default()),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn matches_reference_and_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let p = prediction(n, 10, &mut rng);
            let mut t = targets(n, 10, &mut rng);
            t.future[0][0] = Some([0.0, 0.0, 0.0]);
            let b = loss(&p, &t, &LossWeights::default()).unwrap();
            assert!((b.total - reference(&p, &t)).abs() < 1e-12);
            assert!((b.total - (b.position + b.heading + b.transition)).abs() < 1e-12);
        }
    }

    #[test]
    fn output_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = prediction(3, 4, &mut rng);
        let t = targets(3, 4, &mut rng);
        let w = LossWeights::default();
        let (_, g) = loss_with_gradient(&p, &t, &w).unwrap();
        let h = 1e-6;
        for idx in 0..p.values.data.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.values.data[idx] += h;
            b.values.data[idx] -= h;
            let fd = (loss(&a, &t, &w).unwrap().total - loss(&b, &t, &w).unwrap().total) / (2.0 * h);
            assert!((fd - g.values.data[idx]).abs() < 1e-6, "value {idx}: {fd} vs {}", g.values.data[idx]);
        }
        for idx in 0..p.logits.data.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.logits.data[idx] += h;
            b.logits.data[idx] -= h;
            let fd = (loss(&a, &t, &w).unwrap().total - loss(&b, &t, &w).unwrap().total) / (2.0 * h);
            assert!((fd - g.logits.data[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn stationary_at_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = prediction(2, 3, &mut rng);
        let mut t = targets(2, 3, &mut rng);
        for i in 0..2 {
            for k in 0..3 {
                let s = p.step(i, k);
                t.future[i][k] = Some([s.mean[0], s.mean[1], 0.0]);
            }
        }
        p.values.data.iter_mut().skip(2).step_by(6).for_each(|v| *v = 1.0);
        let (_, g) = loss_with_gradient(&p, &t, &LossWeights::default()).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                assert_eq!(g.values.get(i, k * 6), 0.0);
                assert_eq!(g.values.get(i, k * 6 + 1), 0.0);
            }
        }
    }
}
