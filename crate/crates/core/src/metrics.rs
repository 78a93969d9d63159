//! Histograms, Wasserstein distance, displacement errors, distribution
//! fidelity and collapse statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::rollout::{CollapseReason, Predictor, RolloutTrace};
use crate::scalar::Scalar;
use crate::scene::{slice_window_with, AgentId, AgentKind, Episode};

/// Final-step error above which a forecast counts as missed (m).
pub const MISS_THRESHOLD_M: f64 = 2.0;
/// Neighbours farther than this are ignored by the closest-distance statistic (m).
pub const INTERACTION_RADIUS_M: f64 = 30.0;
pub const SPEED_SPEC: HistogramSpec = HistogramSpec {
    lower: 0.0,
    upper: 15.0,
    width: 0.25,
};
pub const CLOSEST_DISTANCE_SPEC: HistogramSpec = HistogramSpec {
    lower: 0.0,
    upper: 30.0,
    width: 0.5,
};
/// Published mean collapse times (s) with and without decoupled training,
/// kept in reports for comparison.
pub const PUBLISHED_COLLAPSE_S: (f64, f64) = (895.0, 15.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.upper > self.lower && self.lower.is_finite() && self.upper.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad histogram range {self:?}")));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        ((self.upper - self.lower) / self.width - 1e-9).ceil() as usize
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let l = self.lower + bin as f64 * self.width;
        (l, (l + self.width).min(self.upper))
    }
}

/// Fixed-width histogram with underflow and overflow counts. Values outside
/// the range keep their mass so that normalization sees every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(spec: HistogramSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            counts: vec![0; spec.bins()],
            underflow: 0,
            overflow: 0,
        })
    }

    pub fn from_values(spec: HistogramSpec, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut h = Self::new(spec)?;
        for v in values {
            h.add(v);
        }
        Ok(h)
    }

    /// Non-finite values are ignored.
    pub fn add(&mut self, v: f64) {
        if !v.is_finite() {
            return;
        }
        if v < self.spec.lower {
            self.underflow += 1;
        } else if v >= self.spec.upper {
            self.overflow += 1;
        } else {
            let i = ((v - self.spec.lower) / self.spec.width).floor() as usize;
            let last = self.counts.len() - 1;
            self.counts[i.min(last)] += 1;
        }
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::InvalidConfig("merging histograms with different ranges".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Probability mass per in-range bin.
    pub fn mass(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyHistogram("histogram has no samples".into()));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Left edge of the fullest bin.
    pub fn mode(&self) -> Option<f64> {
        let (i, &c) = self.counts.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i)))?;
        (c > 0).then(|| self.spec.edges(i).0)
    }

    /// `(underflow, per-bin, overflow)` masses; they sum to one.
    pub fn normalized(&self) -> Result<(f64, Vec<f64>, f64)> {
        let total = self.total() as f64;
        Ok((self.underflow as f64 / total, self.mass()?, self.overflow as f64 / total))
    }

    /// Cumulative mass at the right edge of each in-range bin.
    fn cdf(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyHistogram("histogram has no samples".into()));
        }
        let mut acc = self.underflow;
        Ok(self
            .counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total as f64
            })
            .collect())
    }
}

/// 1-Wasserstein distance between two binned distributions on the same grid,
/// integrated over the histogram range.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::InvalidConfig("histograms use different ranges".into()));
    }
    let (ca, cb) = (a.cdf()?, b.cdf()?);
    Ok(ca
        .iter()
        .zip(&cb)
        .enumerate()
        .map(|(i, (x, y))| {
            let (l, r) = a.spec.edges(i);
            (x - y).abs() * (r - l)
        })
        .sum())
}

/// CSV with columns `bin_left,bin_right,ref_mass,sim_mass`.
pub fn histogram_csv(reference: &Histogram, simulated: &Histogram) -> Result<String> {
    if reference.spec != simulated.spec {
        return Err(Error::InvalidConfig("histograms use different ranges".into()));
    }
    let (r, s) = (reference.mass()?, simulated.mass()?);
    let mut out = String::from("bin_left,bin_right,ref_mass,sim_mass\n");
    for i in 0..r.len() {
        let (l, h) = reference.spec.edges(i);
        out.push_str(&format!("{l},{h},{},{}\n", r[i], s[i]));
    }
    Ok(out)
}

/// One agent's predicted positions and the aligned ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub id: AgentId,
    pub kind: AgentKind,
    pub predicted: Vec<[f64; 2]>,
    /// `None` where the agent is absent.
    pub truth: Vec<Option<[f64; 2]>>,
}

impl Forecast {
    /// `(ADE, FDE)`, or `None` without any valid step.
    pub fn errors(&self) -> Option<(f64, f64)> {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut last = None;
        for (p, g) in self.predicted.iter().zip(&self.truth) {
            if let Some(g) = g {
                let e = (p[0] - g[0]).hypot(p[1] - g[1]);
                sum += e;
                n += 1;
                last = Some(e);
            }
        }
        last.map(|fde| (sum / n as f64, fde))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindErrors {
    pub ade: f64,
    pub fde: f64,
    pub missing_rate: f64,
    pub agents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementErrors {
    pub per_kind: BTreeMap<AgentKind, KindErrors>,
    /// Agent-count-weighted mean of the per-kind values.
    pub average: KindErrors,
    pub miss_threshold_m: f64,
}

/// Per-kind and average ADE, FDE and missing rate. Forecasts without a
/// valid step are skipped.
pub fn ade_fde(forecasts: &[Forecast]) -> Result<DisplacementErrors> {
    let mut acc: BTreeMap<AgentKind, [f64; 4]> = BTreeMap::new();
    for f in forecasts {
        if let Some((ade, fde)) = f.errors() {
            let a = acc.entry(f.kind).or_default();
            a[0] += ade;
            a[1] += fde;
            a[2] += (fde > MISS_THRESHOLD_M) as u8 as f64;
            a[3] += 1.0;
        }
    }
    if acc.is_empty() {
        return Err(Error::EmptyBatch("no forecast has a valid ground-truth step"));
    }
    let per_kind: BTreeMap<AgentKind, KindErrors> = acc
        .iter()
        .map(|(k, a)| {
            (
                *k,
                KindErrors {
                    ade: a[0] / a[3],
                    fde: a[1] / a[3],
                    missing_rate: a[2] / a[3],
                    agents: a[3] as usize,
                },
            )
        })
        .collect();
    let total: usize = per_kind.values().map(|e| e.agents).sum();
    let weighted = |f: fn(&KindErrors) -> f64| {
        per_kind.values().map(|e| f(e) * e.agents as f64).sum::<f64>() / total as f64
    };
    let average = KindErrors {
        ade: weighted(|e| e.ade),
        fde: weighted(|e| e.fde),
        missing_rate: weighted(|e| e.missing_rate),
        agents: total,
    };
    Ok(DisplacementErrors {
        per_kind,
        average,
        miss_threshold_m: MISS_THRESHOLD_M,
    })
}

/// Fraction of evaluated agents per kind whose final error exceeds `threshold`.
pub fn missing_rate(forecasts: &[Forecast], threshold: f64) -> Result<BTreeMap<AgentKind, f64>> {
    let mut acc: BTreeMap<AgentKind, (usize, usize)> = BTreeMap::new();
    for f in forecasts {
        if let Some((_, fde)) = f.errors() {
            let a = acc.entry(f.kind).or_default();
            a.0 += (fde > threshold) as usize;
            a.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::EmptyBatch("no forecast has a valid ground-truth step"));
    }
    Ok(acc.into_iter().map(|(k, (m, n))| (k, m as f64 / n as f64)).collect())
}

/// Open-loop forecasts: at every `stride`-th pivot the model sees the
/// ground-truth history of the full scene and its mean prediction is
/// compared with the recorded future.
pub fn open_loop_forecasts<T: Scalar, P: Predictor<T> + Sync>(
    model: &P,
    episodes: &[Episode<T>],
    stride: usize,
) -> Result<Vec<Forecast>> {
    let cfg = model.model_config();
    let stride = stride.max(1);
    let jobs: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| {
            ep.valid_pivots(cfg.t_hist, cfg.t_pred)
                .step_by(stride)
                .filter(move |t| !ep.frames[*t].agents.is_empty())
                .map(move |t| (e, t))
        })
        .collect();
    let parts: Vec<Result<Vec<Forecast>>> = jobs
        .par_iter()
        .map(|&(e, t)| {
            let window = slice_window_with(&episodes[e], t, cfg.t_hist, cfg.t_pred, 0)?;
            let input = ModelInput::from_window(&window, cfg);
            let pred = model.predict(&input);
            let future = window.future();
            Ok(window
                .pivot_agents
                .iter()
                .enumerate()
                .map(|(i, id)| Forecast {
                    id: *id,
                    kind: window.attributes[id].kind,
                    predicted: (0..cfg.t_pred)
                        .map(|k| {
                            let m = pred.step(i, k).mean;
                            [m[0].as_f64(), m[1].as_f64()]
                        })
                        .collect(),
                    truth: (0..cfg.t_pred)
                        .map(|k| {
                            future
                                .get(k)
                                .and_then(|f| f.agents.get(id))
                                .map(|s| [s.x.as_f64(), s.y.as_f64()])
                        })
                        .collect(),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Speed,
    ClosestDistance,
}

impl Statistic {
    pub const ALL: [Statistic; 2] = [Statistic::Speed, Statistic::ClosestDistance];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Speed => "speed",
            Statistic::ClosestDistance => "closest_distance",
        }
    }

    pub fn spec(self) -> HistogramSpec {
        match self {
            Statistic::Speed => SPEED_SPEC,
            Statistic::ClosestDistance => CLOSEST_DISTANCE_SPEC,
        }
    }
}

/// Per-agent-frame samples of `stat`, split by kind.
pub fn samples<T: Scalar>(episodes: &[Episode<T>], stat: Statistic) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for ep in episodes {
        for f in &ep.frames {
            let pts: Vec<(AgentKind, [f64; 2], f64)> = f
                .agents
                .iter()
                .map(|(id, s)| {
                    (ep.attributes[id].kind, [s.x.as_f64(), s.y.as_f64()], s.speed().as_f64())
                })
                .collect();
            for (i, (kind, p, v)) in pts.iter().enumerate() {
                match stat {
                    Statistic::Speed => out[kind.index()].push(*v),
                    Statistic::ClosestDistance => {
                        let nearest = pts
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != i)
                            .map(|(_, (_, q, _))| (p[0] - q[0]).hypot(p[1] - q[1]))
                            .filter(|d| *d <= INTERACTION_RADIUS_M)
                            .fold(f64::INFINITY, f64::min);
                        if nearest.is_finite() {
                            out[kind.index()].push(nearest);
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: Histogram,
    pub simulated: Histogram,
    pub wasserstein1: f64,
}

/// Histograms of one statistic for one kind on both sides.
pub fn compare<T: Scalar>(
    simulated: &[Episode<T>],
    reference: &[Episode<T>],
    stat: Statistic,
    kind: AgentKind,
) -> Result<Comparison> {
    let label = |side: &str| format!("{}/{}/{side}", stat.name(), kind.name());
    let build = |eps: &[Episode<T>], side: &str| -> Result<Histogram> {
        let values = std::mem::take(&mut samples(eps, stat)[kind.index()]);
        let h = Histogram::from_values(stat.spec(), values)?;
        if h.total() == 0 {
            return Err(Error::EmptyHistogram(label(side)));
        }
        Ok(h)
    };
    let reference = build(reference, "reference")?;
    let simulated = build(simulated, "simulated")?;
    let wasserstein1 = wasserstein1(&reference, &simulated)?;
    Ok(Comparison {
        reference,
        simulated,
        wasserstein1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub comparisons: BTreeMap<Statistic, BTreeMap<AgentKind, Comparison>>,
    /// `(statistic, kind)` pairs left out because one side had no samples.
    pub skipped: Vec<String>,
}

/// Every statistic for every kind. Kinds without samples on one side are
/// listed in `skipped`; if nothing at all can be compared the first empty
/// histogram is reported as an error.
pub fn distribution_fidelity<T: Scalar>(
    simulated: &[Episode<T>],
    reference: &[Episode<T>],
) -> Result<Fidelity> {
    let mut comparisons: BTreeMap<Statistic, BTreeMap<AgentKind, Comparison>> = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut first_err = None;
    for stat in Statistic::ALL {
        for kind in AgentKind::ALL {
            match compare(simulated, reference, stat, kind) {
                Ok(c) => {
                    comparisons.entry(stat).or_default().insert(kind, c);
                }
                Err(Error::EmptyHistogram(name)) => {
                    skipped.push(name.clone());
                    first_err.get_or_insert(Error::EmptyHistogram(name));
                }
                Err(e) => return Err(e),
            }
        }
    }
    if comparisons.is_empty() {
        return Err(first_err.expect("some statistic was attempted"));
    }
    Ok(Fidelity {
        comparisons,
        skipped,
    })
}

/// Duration and outcome of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseRecord {
    pub seconds: f64,
    /// `None` when the run reached its cap.
    pub reason: Option<CollapseReason>,
}

impl<T: Scalar> From<&RolloutTrace<T>> for CollapseRecord {
    fn from(t: &RolloutTrace<T>) -> Self {
        Self {
            seconds: t.duration_s(),
            reason: t.collapse_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub runs: usize,
    /// Capped runs enter at their cap.
    pub mean_s: f64,
    pub median_s: f64,
    pub censored: usize,
    pub all_censored: bool,
    pub by_reason: BTreeMap<CollapseReason, usize>,
    pub published_with_ids_s: f64,
    pub published_without_ids_s: f64,
}

pub fn collapse_summary(records: &[CollapseRecord]) -> Result<CollapseSummary> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("no rollouts to summarize"));
    }
    let n = records.len();
    let mut secs: Vec<f64> = records.iter().map(|r| r.seconds).collect();
    let mean_s = secs.iter().sum::<f64>() / n as f64;
    secs.sort_by(f64::total_cmp);
    let median_s = if n % 2 == 1 {
        secs[n / 2]
    } else {
        0.5 * (secs[n / 2 - 1] + secs[n / 2])
    };
    let censored = records.iter().filter(|r| r.reason.is_none()).count();
    let mut by_reason = BTreeMap::new();
    for r in records.iter().filter_map(|r| r.reason) {
        *by_reason.entry(r).or_insert(0) += 1;
    }
    Ok(CollapseSummary {
        runs: n,
        mean_s,
        median_s,
        censored,
        all_censored: censored == n,
        by_reason,
        published_with_ids_s: PUBLISHED_COLLAPSE_S.0,
        published_without_ids_s: PUBLISHED_COLLAPSE_S.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const UNIT: HistogramSpec = HistogramSpec {
        lower: 0.0,
        upper: 10.0,
        width: 1.0,
    };

    #[test]
    fn binning_edges() {
        let h = Histogram::from_values(UNIT, [-1.0, 0.0, 0.999, 1.0, 9.99, 10.0, f64::NAN]).unwrap();
        assert_eq!(h.underflow, 1);
        assert_eq!(h.overflow, 1);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.total(), 6);
        assert_eq!(h.mode(), Some(0.0));
    }

    #[test]
    fn empty_histogram_errors() {
        let h = Histogram::new(UNIT).unwrap();
        assert!(matches!(h.mass(), Err(Error::EmptyHistogram(_))));
        assert!(wasserstein1(&h, &h).is_err());
    }

    #[test]
    fn point_masses_are_their_distance_apart() {
        let a = Histogram::from_values(UNIT, [2.5]).unwrap();
        let b = Histogram::from_values(UNIT, [7.5]).unwrap();
        assert!((wasserstein1(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let a = Histogram::from_values(UNIT, [0.5, 1.5]).unwrap();
        let csv = histogram_csv(&a, &a).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,ref_mass,sim_mass");
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[1], "0,1,0.5,0.5");
    }

    use crate::model::{ModelConfig, PredictionOutput, N_TRANSITIONS, OUT_PER_STEP};
    use crate::rollout::Predictor;
    use crate::scene::fixtures::episode;
    use crate::tape::Matrix;

    fn forecast(kind: AgentKind, predicted: Vec<[f64; 2]>, truth: Vec<Option<[f64; 2]>>) -> Forecast {
        Forecast {
            id: AgentId(0),
            kind,
            predicted,
            truth,
        }
    }

    const MV: AgentKind = AgentKind::MotorizedVehicle;
    const PED: AgentKind = AgentKind::Pedestrian;

    #[test]
    fn exact_forecasts_have_zero_error() {
        let path: Vec<[f64; 2]> = (0..10).map(|k| [k as f64, 2.0 * k as f64]).collect();
        let f = forecast(MV, path.clone(), path.iter().map(|p| Some(*p)).collect());
        let e = ade_fde(&[f.clone()]).unwrap();
        assert_eq!(e.average.ade, 0.0);
        assert_eq!(e.average.fde, 0.0);
        assert_eq!(missing_rate(&[f], 2.0).unwrap()[&MV], 0.0);
    }

    #[test]
    fn unit_offset_gives_unit_errors() {
        let truth: Vec<Option<[f64; 2]>> = (0..10).map(|k| Some([k as f64, 0.0])).collect();
        let pred = (0..10).map(|k| [k as f64, 1.0]).collect();
        let e = ade_fde(&[forecast(PED, pred, truth)]).unwrap();
        assert!((e.per_kind[&PED].ade - 1.0).abs() < 1e-15);
        assert!((e.per_kind[&PED].fde - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_meter_final_offset_is_always_missed() {
        let fs: Vec<Forecast> = (0..4)
            .map(|i| {
                let truth = vec![Some([0.0, 0.0]), Some([1.0, i as f64])];
                forecast(MV, vec![[0.0, 0.0], [4.0, i as f64]], truth)
            })
            .collect();
        assert_eq!(missing_rate(&fs, MISS_THRESHOLD_M).unwrap()[&MV], 1.0);
        assert_eq!(ade_fde(&fs).unwrap().average.missing_rate, 1.0);
    }

    #[test]
    fn mixed_batch_missing_rate_by_hand() {
        // mv: final errors 0.5, 2.5, 2.0 (not above), 3.0 -> 2 of 4
        // ped: final errors 1.0, 2.1 -> 1 of 2; third ped has no valid step
        let mk = |kind, err: f64| forecast(kind, vec![[0.0, 0.0], [err, 0.0]], vec![None, Some([0.0, 0.0])]);
        let fs = vec![
            mk(MV, 0.5),
            mk(MV, 2.5),
            mk(MV, 2.0),
            mk(MV, 3.0),
            mk(PED, 1.0),
            mk(PED, 2.1),
            forecast(PED, vec![[9.0, 9.0]], vec![None]),
        ];
        let m = missing_rate(&fs, 2.0).unwrap();
        assert_eq!(m[&MV], 0.5);
        assert_eq!(m[&PED], 0.5);
        let e = ade_fde(&fs).unwrap();
        assert_eq!(e.per_kind[&PED].agents, 2);
        assert!((e.average.missing_rate - 0.5).abs() < 1e-15);
        // agent-weighted average of per-kind ADE
        let want = (4.0 * e.per_kind[&MV].ade + 2.0 * e.per_kind[&PED].ade) / 6.0;
        assert!((e.average.ade - want).abs() < 1e-15);
    }

    #[test]
    fn empty_evaluation_set_is_an_error() {
        assert!(matches!(ade_fde(&[]), Err(Error::EmptyBatch(_))));
        let f = forecast(MV, vec![[0.0, 0.0]], vec![None]);
        assert!(ade_fde(&[f.clone()]).is_err());
        assert!(missing_rate(&[f], 2.0).is_err());
    }

    /// Constant-velocity extrapolation from the pivot state.
    struct ConstantVelocity(ModelConfig);

    impl Predictor<f64> for ConstantVelocity {
        fn model_config(&self) -> &ModelConfig {
            &self.0
        }

        fn predict(&self, input: &crate::model::ModelInput<f64>) -> PredictionOutput<f64> {
            let tp = self.0.t_pred;
            let mut values = Matrix::zeros(input.len(), tp * OUT_PER_STEP);
            for (i, s) in input.pivot.iter().enumerate() {
                for k in 0..tp {
                    let h = input.dt * (k + 1) as f64;
                    values.row_mut(i)[k * OUT_PER_STEP..(k + 1) * OUT_PER_STEP]
                        .copy_from_slice(&[s.x + s.vx * h, s.y + s.vy * h, 1.0, 1.0, 1.0, 0.0]);
                }
            }
            PredictionOutput {
                ids: input.ids.clone(),
                kinds: input.kinds.clone(),
                t_pred: tp,
                values,
                logits: Matrix::zeros(input.len(), N_TRANSITIONS),
            }
        }
    }

    #[test]
    fn open_loop_constant_velocity_on_constant_velocity_scene() {
        // fixture agents move exactly 2 m per frame at 5 m/s
        let ep = episode(40, &[(0, 39), (3, 30)]);
        let fs = open_loop_forecasts(&ConstantVelocity(ModelConfig::default()), &[ep], 1).unwrap();
        assert_eq!(fs.len(), 21 + 21);
        // agent 1 leaves at frame 30, so late pivots see partial futures
        assert!(fs.iter().any(|f| f.truth.iter().any(Option::is_none)));
        let e = ade_fde(&fs).unwrap();
        assert!(e.average.ade < 1e-12 && e.average.fde < 1e-12);
    }

    #[test]
    fn identical_sides_have_zero_distance() {
        let ep = episode(30, &[(0, 29), (2, 20), (5, 29)]);
        let fid = distribution_fidelity(&[ep.clone()], &[ep]).unwrap();
        for by_kind in fid.comparisons.values() {
            for c in by_kind.values() {
                assert_eq!(c.wasserstein1, 0.0);
            }
        }
        assert_eq!(fid.skipped.len(), 4);
    }

    #[test]
    fn one_bin_speeds_one_meter_per_second_apart() {
        let mut a = episode(3, &[(0, 2)]);
        let mut b = a.clone();
        for f in &mut a.frames {
            f.agents.get_mut(&AgentId(0)).unwrap().vx = 1.0;
        }
        for f in &mut b.frames {
            f.agents.get_mut(&AgentId(0)).unwrap().vx = 2.0;
        }
        let c = compare(&[a], &[b], Statistic::Speed, MV).unwrap();
        assert!((c.wasserstein1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closest_distance_ignores_far_pairs_and_names_empty_statistic() {
        // agents 3 m apart, a third 40 m away from both
        let mut ep = episode(2, &[(0, 1), (0, 1), (0, 1)]);
        for f in &mut ep.frames {
            f.agents.get_mut(&AgentId(2)).unwrap().y = 45.0;
        }
        let d = samples(&[ep.clone()], Statistic::ClosestDistance);
        assert_eq!(d[MV.index()], vec![3.0; 4]);
        match compare(&[ep.clone()], &[ep], Statistic::ClosestDistance, PED) {
            Err(Error::EmptyHistogram(name)) => assert_eq!(name, "closest_distance/ped/reference"),
            other => panic!("{other:?}"),
        }
        let lonely = episode(2, &[(0, 1)]);
        assert!(matches!(
            distribution_fidelity(&[lonely.clone()], &[lonely]).map(|f| f.skipped.len()),
            Ok(5)
        ));
        let empty = episode(2, &[]);
        assert!(matches!(distribution_fidelity(&[empty.clone()], &[empty]), Err(Error::EmptyHistogram(_))));
    }

    fn rec(seconds: f64, reason: Option<CollapseReason>) -> CollapseRecord {
        CollapseRecord { seconds, reason }
    }

    #[test]
    fn collapse_summary_examples() {
        let s = collapse_summary(&[rec(10.0, Some(CollapseReason::Overlap)), rec(20.0, Some(CollapseReason::Overlap))]).unwrap();
        assert_eq!(s.mean_s, 15.0);
        assert_eq!(s.median_s, 15.0);
        assert_eq!(s.by_reason[&CollapseReason::Overlap], 2);
        assert!(!s.all_censored);

        let s = collapse_summary(&[rec(400.0, None); 3]).unwrap();
        assert_eq!(s.mean_s, 400.0);
        assert_eq!(s.censored, 3);
        assert!(s.all_censored);
        assert!(s.by_reason.is_empty());
        assert_eq!((s.published_with_ids_s, s.published_without_ids_s), (895.0, 15.0));

        let s = collapse_summary(&[rec(1.0, Some(CollapseReason::Frozen)), rec(400.0, None), rec(4.0, Some(CollapseReason::Runaway))]).unwrap();
        assert_eq!(s.median_s, 4.0);
        assert_eq!(s.censored, 1);
        assert!(collapse_summary(&[]).is_err());
    }

    /// Per-element recomputation: explicit step errors, then reductions.
    fn oracle(fs: &[Forecast]) -> BTreeMap<AgentKind, (f64, f64, usize)> {
        let mut by_kind: BTreeMap<AgentKind, Vec<(f64, f64)>> = BTreeMap::new();
        for f in fs {
            let errs: Vec<f64> = (0..f.truth.len())
                .filter_map(|k| f.truth[k].map(|g| ((f.predicted[k][0] - g[0]).powi(2) + (f.predicted[k][1] - g[1]).powi(2)).sqrt()))
                .collect();
            if errs.is_empty() {
                continue;
            }
            let last = *errs.last().unwrap();
            by_kind.entry(f.kind).or_default().push((errs.iter().sum::<f64>() / errs.len() as f64, last));
        }
        by_kind
            .into_iter()
            .map(|(k, v)| {
                let n = v.len();
                (k, (v.iter().map(|e| e.0).sum::<f64>() / n as f64, v.iter().map(|e| e.1).sum::<f64>() / n as f64, n))
            })
            .collect()
    }

    fn arb_forecast() -> impl Strategy<Value = Forecast> {
        (0usize..3, prop::collection::vec(((-50.0f64..50.0, -50.0f64..50.0), prop::option::of((-50.0f64..50.0, -50.0f64..50.0))), 1..12))
            .prop_map(|(k, steps)| Forecast {
                id: AgentId(0),
                kind: AgentKind::ALL[k],
                predicted: steps.iter().map(|s| [s.0 .0, s.0 .1]).collect(),
                truth: steps.iter().map(|s| s.1.map(|g| [g.0, g.1])).collect(),
            })
    }

    /// Exact W1 between equal-size samples: mean gap of sorted pairs.
    fn sorted_matching(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    proptest! {
        #[test]
        fn matches_sorted_oracle_on_bin_centers(
            pairs in prop::collection::vec((0usize..10, 0usize..10), 1..40)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 + 0.5).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 + 0.5).collect();
            let ha = Histogram::from_values(UNIT, a.iter().copied()).unwrap();
            let hb = Histogram::from_values(UNIT, b.iter().copied()).unwrap();
            prop_assert!((wasserstein1(&ha, &hb).unwrap() - sorted_matching(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn metric_axioms(
            a in prop::collection::vec(-2.0f64..12.0, 1..30),
            b in prop::collection::vec(-2.0f64..12.0, 1..30),
            c in prop::collection::vec(-2.0f64..12.0, 1..30),
        ) {
            let [ha, hb, hc] = [a, b, c].map(|v| Histogram::from_values(UNIT, v).unwrap());
            let ab = wasserstein1(&ha, &hb).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!(wasserstein1(&ha, &ha).unwrap() == 0.0);
            prop_assert!((ab - wasserstein1(&hb, &ha).unwrap()).abs() < 1e-12);
            let ac = wasserstein1(&ha, &hc).unwrap();
            let cb = wasserstein1(&hc, &hb).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn displacement_errors_match_recomputation(fs in prop::collection::vec(arb_forecast(), 1..20)) {
            let want = oracle(&fs);
            match ade_fde(&fs) {
                Err(_) => prop_assert!(want.is_empty()),
                Ok(e) => {
                    prop_assert_eq!(e.per_kind.len(), want.len());
                    for (k, (ade, fde, n)) in want {
                        let got = e.per_kind[&k];
                        prop_assert!((got.ade - ade).abs() < 1e-12);
                        prop_assert!((got.fde - fde).abs() < 1e-12);
                        prop_assert_eq!(got.agents, n);
                    }
                }
            }
        }

        #[test]
        fn ade_is_bounded_by_worst_step(f in arb_forecast()) {
            if let Some((ade, fde)) = f.errors() {
                let worst = f.predicted.iter().zip(&f.truth)
                    .filter_map(|(p, g)| g.map(|g| (p[0] - g[0]).hypot(p[1] - g[1])))
                    .fold(0.0, f64::max);
                prop_assert!(ade >= 0.0 && fde >= 0.0);
                prop_assert!(ade <= worst + 1e-12);
            }
        }

        #[test]
        fn normalized_masses_sum_to_one(v in prop::collection::vec(-5.0f64..35.0, 1..200)) {
            let h = Histogram::from_values(CLOSEST_DISTANCE_SPEC, v).unwrap();
            let (u, m, o) = h.normalized().unwrap();
            prop_assert!((u + m.iter().sum::<f64>() + o - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn masses_sum_to_at_most_one(v in prop::collection::vec(-5.0f64..15.0, 1..50)) {
            let h = Histogram::from_values(UNIT, v.iter().copied()).unwrap();
            let m: f64 = h.mass().unwrap().iter().sum();
            let inside = v.iter().filter(|x| (0.0..10.0).contains(*x)).count() as f64;
            prop_assert!((m - inside / v.len() as f64).abs() < 1e-12);
        }
    }
}
