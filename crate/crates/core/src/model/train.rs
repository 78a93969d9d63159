//! Gradient training on decoupled (group-sampled) instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{
    build_partition, restrict_window, sample_groups, InteractionConfig, InteractionPartition,
    SampledInstance,
};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::scene::{slice_window_with, Episode};
use crate::tape::Matrix;

use super::augment::{augment, AugmentConfig};
use super::loss::{LossBreakdown, LossWeights};
use super::{DynamicsModel, ModelInput, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient steps.
    Sgd,
    /// Adam with bias correction.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Train on sampled interaction groups; `false` trains on whole scenes.
    pub ids: bool,
    pub interaction: InteractionConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ids: true,
            interaction: InteractionConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.interaction.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs, steps_per_epoch and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("learning_rate and clip_norm must be positive".into()));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(unit(self.adam_beta1) && unit(self.adam_beta2) && self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub position: f64,
    pub heading: f64,
    pub transition: f64,
    pub instances: usize,
}

/// Episodes prepared for training, with every usable `(episode, pivot)` pair.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub episodes: Vec<Episode<T>>,
    pivots: Vec<(usize, usize)>,
}

impl<T: Scalar> Dataset<T> {
    /// Keeps pivots with at least one agent; windows get a one-frame margin for shifting.
    pub fn new(episodes: Vec<Episode<T>>, t_hist: usize, t_pred: usize) -> Result<Self> {
        let mut pivots = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            for t in ep.valid_pivots(t_hist, t_pred) {
                if !ep.frames[t].agents.is_empty() {
                    pivots.push((e, t));
                }
            }
        }
        if pivots.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no episode has {} frames with agents present",
                t_hist + t_pred
            )));
        }
        Ok(Self { episodes, pivots })
    }

    pub fn pivot_count(&self) -> usize {
        self.pivots.len()
    }
}

/// Serializable training progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub history: Vec<EpochStats>,
    /// Adam moment estimates, one flat vector per parameter tensor.
    #[serde(default)]
    pub moments: Option<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// Updates applied so far (bias correction exponent).
    pub updates: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

pub struct Trainer<T: Scalar> {
    pub model: DynamicsModel<T>,
    pub config: TrainConfig,
    pub state: TrainState,
}

/// One prepared training instance.
pub struct Prepared<T: Scalar> {
    pub partition: InteractionPartition,
    pub instance: SampledInstance<T>,
    pub input: ModelInput<T>,
    pub targets: Targets<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DynamicsModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            state: TrainState {
                step: 0,
                history: Vec::new(),
                moments: None,
            },
        })
    }

    pub fn resume(model: DynamicsModel<T>, config: TrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        t.state = state;
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.state.history.len()
    }

    /// Builds batch item `item` of step `step`. Depends only on the seed, the
    /// step, and the item index.
    pub fn prepare(&self, data: &Dataset<T>, step: u64, item: usize) -> Result<Prepared<T>> {
        let cfg = &self.config;
        let mc = &self.model.config;
        let mut rng = rng_from(cfg.seed, &format!("train-step-{step}"), item as u64);
        let (e, t) = data.pivots[rand::Rng::random_range(&mut rng, 0..data.pivots.len())];
        let ep = &data.episodes[e];
        let window = slice_window_with(ep, t, mc.t_hist, mc.t_pred, cfg.augment.max_shift)?;
        let partition = build_partition(window.pivot_frame(), &window.attributes, &cfg.interaction);
        let selection: Vec<usize> = if cfg.ids {
            sample_groups(&partition, &mut rng)?
        } else {
            (0..partition.len()).collect()
        };
        let instance = restrict_window(&window, &selection, &partition)?;
        let (instance, _) = augment(&instance, &cfg.augment, &mut rng);
        let input = ModelInput::from_window(&instance.window, mc);
        let targets = Targets::from_window(&instance.window);
        Ok(Prepared {
            partition,
            instance,
            input,
            targets,
        })
    }

    /// One update. Returns the mean loss over the batch items that had
    /// supervised steps, or `None` when none had.
    pub fn step(&mut self, data: &Dataset<T>) -> Result<Option<LossBreakdown<f64>>> {
        let step = self.state.step;
        let this = &*self;
        let results: Vec<Result<Option<(LossBreakdown<T>, Vec<Matrix<T>>)>>> = (0..this
            .config
            .batch_size)
            .into_par_iter()
            .map(|item| {
                let p = this.prepare(data, step, item)?;
                if p.targets.valid_steps() == 0 {
                    return Ok(None);
                }
                let (b, g) = this
                    .model
                    .loss_and_gradients(&p.input, &p.targets, &this.config.loss)?;
                Ok(Some((b, g)))
            })
            .collect();

        let mut sum: Option<Vec<Matrix<T>>> = None;
        let mut terms = [0.0f64; 4];
        let mut count = 0usize;
        for r in results {
            let Some((b, g)) = (match r {
                Err(Error::NonFiniteGradient(_)) => return Err(Error::Divergence { step }),
                other => other?,
            }) else {
                continue;
            };
            if !b.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            count += 1;
            terms[0] += b.total.as_f64();
            terms[1] += b.position.as_f64();
            terms[2] += b.heading.as_f64();
            terms[3] += b.transition.as_f64();
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        for (u, v) in a.data.iter_mut().zip(&x.data) {
                            *u += *v;
                        }
                    }
                }
            }
        }
        self.state.step += 1;
        let Some(mut grads) = sum else {
            return Ok(None);
        };
        let inv = T::one() / T::from_usize(count).unwrap();
        let mut norm_sq = T::zero();
        for g in &mut grads {
            g.data.iter_mut().for_each(|v| *v *= inv);
            norm_sq += g.norm_sq();
        }
        let norm = norm_sq.sqrt();
        let clip = T::lit(self.config.clip_norm);
        let factor = if norm > clip { clip / norm } else { T::one() };
        let mut updated = self.model.params.values.clone();
        let mut moments = self.state.moments.clone();
        match self.config.optimizer {
            Optimizer::Sgd => {
                let lr = T::lit(self.config.learning_rate) * factor;
                for (p, g) in updated.iter_mut().zip(&grads) {
                    for (u, v) in p.data.iter_mut().zip(&g.data) {
                        *u -= lr * *v;
                    }
                }
            }
            Optimizer::Adam => {
                let c = &self.config;
                let m = moments.get_or_insert_with(|| Moments {
                    updates: 0,
                    first: updated.iter().map(|p| vec![0.0; p.data.len()]).collect(),
                    second: updated.iter().map(|p| vec![0.0; p.data.len()]).collect(),
                });
                m.updates += 1;
                let t = m.updates as i32;
                let (b1, b2) = (c.adam_beta1, c.adam_beta2);
                let lr = c.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
                let factor = factor.as_f64();
                for (k, (p, g)) in updated.iter_mut().zip(&grads).enumerate() {
                    for (j, (u, v)) in p.data.iter_mut().zip(&g.data).enumerate() {
                        let g = v.as_f64() * factor;
                        let m1 = &mut m.first[k][j];
                        *m1 = b1 * *m1 + (1.0 - b1) * g;
                        let m2 = &mut m.second[k][j];
                        *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                        *u -= T::lit(lr * m.first[k][j] / (m.second[k][j].sqrt() + c.adam_eps));
                    }
                }
            }
        }
        if !updated.iter().all(Matrix::is_finite) {
            self.state.step -= 1;
            return Err(Error::Divergence { step });
        }
        self.model.params.values = updated;
        self.state.moments = moments;
        let n = count as f64;
        Ok(Some(LossBreakdown {
            total: terms[0] / n,
            position: terms[1] / n,
            heading: terms[2] / n,
            transition: terms[3] / n,
            valid_steps: count,
        }))
    }

    /// Runs one epoch of `steps_per_epoch` updates. On divergence the model
    /// keeps the parameters from before the failing step.
    pub fn run_epoch(&mut self, data: &Dataset<T>) -> Result<EpochStats> {
        let mut acc = [0.0f64; 4];
        let mut n = 0usize;
        for _ in 0..self.config.steps_per_epoch {
            if let Some(b) = self.step(data)? {
                let w = b.valid_steps as f64;
                acc[0] += b.total * w;
                acc[1] += b.position * w;
                acc[2] += b.heading * w;
                acc[3] += b.transition * w;
                n += b.valid_steps;
            }
        }
        let d = n.max(1) as f64;
        let stats = EpochStats {
            epoch: self.state.history.len() + 1,
            mean_loss: acc[0] / d,
            position: acc[1] / d,
            heading: acc[2] / d,
            transition: acc[3] / d,
            instances: n,
        };
        self.state.history.push(stats);
        Ok(stats)
    }

    /// Trains until `epochs` epochs are recorded.
    pub fn train(&mut self, data: &Dataset<T>) -> Result<&[EpochStats]> {
        while self.state.history.len() < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(&self.state.history)
    }
}

/// Loss curve CSV.
pub fn loss_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_loss,position,heading,transition,instances\n");
    for e in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.mean_loss, e.position, e.heading, e.transition, e.instances
        ));
    }
    s
}
