//! Training-time augmentation of sampled instances.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::interaction::SampledInstance;
use crate::scalar::Scalar;
use crate::scene::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Activation probability of each transform.
    pub probability: f64,
    pub max_translation: f64,
    pub max_shift: usize,
    pub history_noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            max_translation: 5.0,
            max_shift: 1,
            history_noise_std: 0.1,
        }
    }
}

/// Transforms that were actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Applied {
    pub shift: Option<isize>,
    pub translation: Option<[f64; 2]>,
    pub rotation: Option<f64>,
    pub noise: bool,
}

impl Applied {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Applies shift, translation, rotation (about the scene origin) and history
/// position noise, each independently with the configured probability.
/// Random draws happen in a fixed order whether or not a transform fires.
pub fn augment<T: Scalar, R: Rng>(
    instance: &SampledInstance<T>,
    config: &AugmentConfig,
    rng: &mut R,
) -> (SampledInstance<T>, Applied) {
    let mut applied = Applied::default();
    if !config.enabled {
        return (instance.clone(), applied);
    }
    let p = config.probability;
    let do_shift = rng.random_bool(p);
    let shift_mag = if config.max_shift > 0 {
        rng.random_range(1..=config.max_shift) as isize
    } else {
        0
    };
    let shift = if rng.random_bool(0.5) { shift_mag } else { -shift_mag };
    let do_translate = rng.random_bool(p);
    let m = config.max_translation;
    let tx = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let ty = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let do_rotate = rng.random_bool(p);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let do_noise = rng.random_bool(p);

    let mut window = instance.window.clone();
    if do_shift && shift != 0 {
        if let Some(w) = window.shifted(shift) {
            window = w;
            applied.shift = Some(shift);
        }
    }
    if do_translate {
        window = window.translated(T::lit(tx), T::lit(ty));
        applied.translation = Some([tx, ty]);
    }
    if do_rotate {
        let o = window.map.scene_origin;
        window = window
            .translated(-o[0], -o[1])
            .rotated(T::lit(angle))
            .translated(o[0], o[1]);
        applied.rotation = Some(angle);
    }
    if do_noise && config.history_noise_std > 0.0 {
        let normal = Normal::new(0.0, config.history_noise_std).expect("finite std");
        let rate = window.frame_rate_hz;
        // velocities stay the finite difference of the (now noisy) positions,
        // as they are in closed-loop rollouts
        let mut last: BTreeMap<AgentId, [f64; 2]> = BTreeMap::new();
        for f in &mut window.frames[..=window.pivot_index] {
            for (id, s) in f.agents.iter_mut() {
                let n = [normal.sample(rng), normal.sample(rng)];
                let p = last.insert(*id, n).unwrap_or([0.0; 2]);
                s.x += T::lit(n[0]);
                s.y += T::lit(n[1]);
                s.vx += T::lit(n[0] - p[0]) * rate;
                s.vy += T::lit(n[1] - p[1]) * rate;
            }
        }
        applied.noise = true;
    }
    (
        SampledInstance {
            selected_groups: instance.selected_groups.clone(),
            window,
        },
        applied,
    )
}
