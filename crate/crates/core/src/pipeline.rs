//! Run configuration and the gen / train / rollout / eval / ablate commands.
//!
//! Every command writes its artifacts, a frozen copy of the resolved
//! configuration and a manifest of content hashes into its output location.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode_io::{read_episode, write_episode};
use crate::error::Error;
use crate::metrics::{
    ade_fde, collapse_summary, distribution_fidelity, histogram_csv, open_loop_forecasts,
    CollapseRecord, CollapseSummary, DisplacementErrors, KindErrors, Statistic, CLOSEST_DISTANCE_SPEC,
    INTERACTION_RADIUS_M, MISS_THRESHOLD_M, SPEED_SPEC,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{loss_csv, Dataset, TrainConfig, Trainer};
use crate::model::{CrossMode, DynamicsModel, ModelConfig};
use crate::rng::derive_seed;
use crate::rollout::{run_rollout, CollapseReason, CollapseThresholds, RolloutConfig, RolloutTrace, SampleMode};
use crate::scene::{AgentKind, Episode};
use crate::synth::{dataset_statistics, generate_episode, BehaviorProfile, WorldConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum RunError {
    Config(String),
    MissingInput(PathBuf),
    Divergence(String),
    /// Every rollout collapsed on its first simulated frame.
    Collapsed(String),
    Io(std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::MissingInput(_) => 3,
            RunError::Divergence(_) => 4,
            RunError::Collapsed(_) => 5,
            RunError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::MissingInput(p) => write!(f, "missing input: {}", p.display()),
            RunError::Divergence(m) => write!(f, "numeric divergence: {m}"),
            RunError::Collapsed(m) => write!(f, "all rollouts collapsed immediately: {m}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => RunError::Divergence(e.to_string()),
            Error::Io(io) => RunError::Io(io),
            other => RunError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    pub test_episodes: usize,
    /// Frames per held-out episode; long enough for the stability cap.
    pub test_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            test_episodes: 10,
            test_frames: 1010,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub open_loop_stride: usize,
    pub fidelity_rollouts: usize,
    pub fidelity_frames: usize,
    pub stability_rollouts: usize,
    pub stability_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            open_loop_stride: 5,
            fidelity_rollouts: 5,
            fidelity_frames: 250,
            stability_rollouts: 10,
            stability_frames: 1010,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub ttc_thresholds: Vec<f64>,
    pub no_ids: bool,
    pub uni_cross: bool,
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            ttc_thresholds: vec![0.0, 1.0, 2.0, 4.0],
            no_ids: false,
            uni_cross: false,
            seeds: 1,
        }
    }
}

/// Everything a run needs. Component seeds are derived from `seed` when the
/// configuration is resolved.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub behavior: BehaviorProfile,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    /// Output root; never written to the frozen config.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; never written to the frozen config.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
}

/// Seeds stay below 2^53 so they survive TOML and JSON unchanged.
fn component_seed(root: u64, tag: &str) -> u64 {
    derive_seed(root, tag, 0) >> 11
}

impl RunConfig {
    pub fn from_toml(text: &str) -> RunResult<Self> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = fs::read_to_string(path).map_err(|_| RunError::MissingInput(path.to_path_buf()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> RunResult<String> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Derives component seeds from the root seed and validates.
    pub fn resolve(mut self) -> RunResult<Self> {
        let root = self.seed;
        if root >= 1 << 53 {
            return Err(RunError::Config("seed must be below 2^53".into()));
        }
        self.world.seed = component_seed(root, "world");
        self.model.init_seed = component_seed(root, "model-init");
        self.train.seed = component_seed(root, "train");
        self.rollout.seed = component_seed(root, "rollout");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> RunResult<()> {
        self.world.validate()?;
        self.behavior.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.rollout.validate()?;
        let e = &self.eval;
        if self.data.episodes == 0 || self.data.test_frames < self.model.t_hist + self.model.t_pred {
            return Err(RunError::Config("data needs episodes and test episodes of at least t_hist + t_pred frames".into()));
        }
        if e.open_loop_stride == 0 || e.fidelity_frames == 0 || e.stability_frames == 0 {
            return Err(RunError::Config("eval strides and frame counts must be positive".into()));
        }
        if self.ablate.ttc_thresholds.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(RunError::Config("ttc thresholds must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn episode_world(&self, split: &str, index: usize, frames: usize) -> WorldConfig {
        WorldConfig {
            seed: derive_seed(self.world.seed, split, index as u64) >> 11,
            frames,
            ..self.world.clone()
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Inputs are recorded by file name; outputs relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: FileHash,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Collects written files for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileHash>,
}

impl Outputs {
    fn new(dir: &Path) -> RunResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> RunResult<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    fn write_episode(&mut self, rel: &str, ep: &Episode<f64>) -> RunResult<PathBuf> {
        let bytes = write_episode(Vec::new(), ep)?;
        self.write(rel, &bytes)
    }

    fn write_json<S: Serialize>(&mut self, rel: &str, value: &S) -> RunResult<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Writes the frozen config and the manifest (named with `prefix`).
    fn finish(mut self, prefix: &str, command: &str, config: &RunConfig, inputs: Vec<FileHash>) -> RunResult<Manifest> {
        let text = config.to_toml()?;
        let config_rel = format!("{prefix}config.toml");
        let path = self.dir.join(&config_rel);
        fs::write(&path, text.as_bytes())?;
        let manifest = Manifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed: config.seed,
            config: FileHash {
                path: config_rel,
                sha256: sha256_hex(text.as_bytes()),
            },
            inputs,
            outputs: std::mem::take(&mut self.files),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
        bytes.push(b'\n');
        fs::write(self.dir.join(format!("{prefix}manifest.json")), bytes)?;
        Ok(manifest)
    }
}

fn input_hash(path: &Path) -> RunResult<FileHash> {
    let bytes = fs::read(path).map_err(|_| RunError::MissingInput(path.to_path_buf()))?;
    Ok(FileHash {
        path: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn load_episode(path: &Path) -> RunResult<Episode<f64>> {
    let file = File::open(path).map_err(|_| RunError::MissingInput(path.to_path_buf()))?;
    let ep = read_episode(BufReader::new(file))
        .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    Ok(ep)
}

/// Episode files named by `paths`; directories contribute their `*.jsonl`
/// files in name order.
pub fn episode_files(paths: &[PathBuf]) -> RunResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(RunError::MissingInput(p.clone()));
        }
    }
    Ok(out)
}

fn load_episodes(files: &[PathBuf]) -> RunResult<Vec<Episode<f64>>> {
    files.par_iter().map(|f| load_episode(f)).collect()
}

/// Generated train and test splits.
pub fn generate_splits(config: &RunConfig) -> RunResult<(Vec<Episode<f64>>, Vec<Episode<f64>>)> {
    let gen = |split: &str, i: usize, frames: usize| {
        generate_episode(&config.episode_world(split, i, frames), &config.behavior)
    };
    let train = (0..config.data.episodes)
        .into_par_iter()
        .map(|i| gen("train", i, config.world.frames))
        .collect::<Result<Vec<_>, _>>()?;
    let test = (0..config.data.test_episodes)
        .into_par_iter()
        .map(|i| gen("test", i, config.data.test_frames))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train, test))
}

/// Writes `train/`, `test/` and `stats.json` under `out`.
pub fn cmd_gen(config: &RunConfig, out: &Path) -> RunResult<Manifest> {
    let (train, test) = generate_splits(config)?;
    let mut outputs = Outputs::new(out)?;
    for (split, eps) in [("train", &train), ("test", &test)] {
        for (i, ep) in eps.iter().enumerate() {
            outputs.write_episode(&format!("{split}/episode_{i:04}.jsonl"), ep)?;
        }
    }
    let stats = dataset_statistics(&train, config.train.interaction.ttc_horizon)?;
    outputs.write_json("stats.json", &stats)?;
    outputs.finish("", "gen", config, Vec::new())
}

/// Training variant used by ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ids: bool,
    pub ttc_threshold: f64,
    pub cross_mode: CrossMode,
}

impl Variant {
    pub fn apply(&self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        c.train.ids = self.ids;
        c.train.interaction.ttc_threshold = self.ttc_threshold;
        c.model.cross_mode = self.cross_mode;
        c
    }
}

/// The variant grid: one IDS row per threshold, then the optional baselines.
pub fn variants(ablate: &AblateConfig, default_ttc: f64) -> Vec<Variant> {
    let mut out: Vec<Variant> = ablate
        .ttc_thresholds
        .iter()
        .map(|&t| Variant {
            name: format!("ids_ttc_{t}"),
            ids: true,
            ttc_threshold: t,
            cross_mode: CrossMode::Dual,
        })
        .collect();
    if ablate.no_ids {
        out.push(Variant {
            name: "no_ids".into(),
            ids: false,
            ttc_threshold: default_ttc,
            cross_mode: CrossMode::Dual,
        });
    }
    if ablate.uni_cross {
        out.push(Variant {
            name: "uni_cross".into(),
            ids: true,
            ttc_threshold: 1.0,
            cross_mode: CrossMode::Uni,
        });
    }
    out
}

/// Trains from scratch (or resumes) on `episodes`.
pub fn train_model(
    config: &RunConfig,
    episodes: Vec<Episode<f64>>,
    resume: Option<&Checkpoint>,
) -> RunResult<Trainer<f64>> {
    let data = Dataset::new(episodes, config.model.t_hist, config.model.t_pred)?;
    let mut trainer = match resume {
        Some(ck) => {
            if ck.model != config.model {
                return Err(RunError::Config("checkpoint model config differs from the run config".into()));
            }
            let mut t = ck.trainer::<f64>()?;
            t.config = config.train.clone();
            t
        }
        None => Trainer::new(DynamicsModel::new(config.model.clone())?, config.train.clone())?,
    };
    trainer.train(&data)?;
    Ok(trainer)
}

pub fn cmd_train(config: &RunConfig, data: &[PathBuf], resume: Option<&Path>, out: &Path) -> RunResult<Manifest> {
    for d in data {
        if !d.exists() {
            return Err(RunError::MissingInput(d.clone()));
        }
    }
    let files = episode_files(data)?;
    if files.is_empty() {
        return Err(RunError::Config("no episode files in the training data".into()));
    }
    let mut inputs = files.iter().map(|f| input_hash(f)).collect::<RunResult<Vec<_>>>()?;
    let resume = match resume {
        Some(p) => {
            inputs.push(input_hash(p)?);
            Some(Checkpoint::load(p).map_err(|e| RunError::Config(e.to_string()))?)
        }
        None => None,
    };
    let episodes = load_episodes(&files)?;
    let trainer = train_model(config, episodes, resume.as_ref())?;
    let mut outputs = Outputs::new(out)?;
    outputs.write("checkpoint.json", Checkpoint::from_trainer(&trainer).to_json()?.as_bytes())?;
    outputs.write("loss.csv", loss_csv(&trainer.state.history).as_bytes())?;
    outputs.finish("", "train", config, inputs)
}

pub fn load_model(path: &Path) -> RunResult<DynamicsModel<f64>> {
    if !path.exists() {
        return Err(RunError::MissingInput(path.to_path_buf()));
    }
    let ck = Checkpoint::load(path).map_err(|e| RunError::Config(e.to_string()))?;
    Ok(ck.model()?)
}

/// Outcome written next to a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub frames: usize,
    pub warm_start: usize,
    pub frame_cap: usize,
    pub collapse_frame: Option<usize>,
    pub collapse_reason: Option<CollapseReason>,
    pub seconds: f64,
    pub censored: bool,
    pub rekeys: Vec<crate::rollout::Rekey>,
    pub detector: CollapseThresholds,
}

impl TraceSummary {
    pub fn of(trace: &RolloutTrace<f64>, detector: &CollapseThresholds) -> Self {
        Self {
            frames: trace.episode.len(),
            warm_start: trace.warm_start,
            frame_cap: trace.frame_cap,
            collapse_frame: trace.collapse_frame,
            collapse_reason: trace.collapse_reason,
            seconds: trace.duration_s(),
            censored: trace.censored(),
            rekeys: trace.rekeys.clone(),
            detector: detector.clone(),
        }
    }

    pub fn record(&self) -> CollapseRecord {
        CollapseRecord {
            seconds: self.seconds,
            reason: self.collapse_reason,
        }
    }
}

fn collapsed_immediately(t: &RolloutTrace<f64>) -> bool {
    t.collapse_frame == Some(t.warm_start)
}

/// Writes `<stem>.jsonl`, `<stem>.diagnostics.csv`, `<stem>.summary.json`
/// plus `<stem>.config.toml` and `<stem>.manifest.json` next to `out`.
pub fn cmd_rollout(config: &RunConfig, checkpoint: &Path, reference: &Path, out: &Path) -> RunResult<(Manifest, TraceSummary)> {
    let model = load_model(checkpoint)?;
    let inputs = vec![input_hash(checkpoint)?, input_hash(reference)?];
    let reference = load_episode(reference)?;
    let trace = run_rollout(&config.rollout, &model, &reference)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());
    let mut outputs = Outputs::new(dir)?;
    outputs.write_episode(&format!("{stem}.jsonl"), &trace.episode)?;
    outputs.write(&format!("{stem}.diagnostics.csv"), trace.diagnostics_csv().as_bytes())?;
    let summary = TraceSummary::of(&trace, &config.rollout.collapse);
    outputs.write_json(&format!("{stem}.summary.json"), &summary)?;
    let manifest = outputs.finish(&format!("{stem}."), "rollout", config, inputs)?;
    if collapsed_immediately(&trace) {
        return Err(RunError::Collapsed(format!(
            "collapsed at the first simulated frame ({})",
            trace.collapse_reason.map(|r| r.name()).unwrap_or("?")
        )));
    }
    Ok((manifest, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticReport {
    pub wasserstein1: f64,
    pub reference_samples: u64,
    pub simulated_samples: u64,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub miss_threshold_m: f64,
    pub interaction_radius_m: f64,
    pub speed_bins: crate::metrics::HistogramSpec,
    pub closest_distance_bins: crate::metrics::HistogramSpec,
    pub open_loop: Option<DisplacementErrors>,
    pub fidelity: BTreeMap<Statistic, BTreeMap<AgentKind, StatisticReport>>,
    pub fidelity_skipped: Vec<String>,
    pub collapse: Option<CollapseSummary>,
    pub detector: CollapseThresholds,
}

/// Inputs of one `eval` invocation.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub reference: Vec<PathBuf>,
    pub traces: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub test: Vec<PathBuf>,
}

fn summary_path(trace: &Path) -> PathBuf {
    let stem = trace.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    trace.with_file_name(format!("{stem}.summary.json"))
}

pub fn cmd_eval(config: &RunConfig, inputs: &EvalInputs, out: &Path) -> RunResult<(Manifest, MetricsReport)> {
    let ref_files = episode_files(&inputs.reference)?;
    let trace_files: Vec<PathBuf> = episode_files(&inputs.traces)?
        .into_iter()
        .filter(|f| !f.to_string_lossy().ends_with(".summary.json"))
        .collect();
    let test_files = episode_files(&inputs.test)?;
    let mut hashes = Vec::new();
    for f in ref_files.iter().chain(&trace_files).chain(&test_files) {
        hashes.push(input_hash(f)?);
    }

    let open_loop = match &inputs.checkpoint {
        Some(ck) => {
            hashes.push(input_hash(ck)?);
            let model = load_model(ck)?;
            let test = load_episodes(if test_files.is_empty() { &ref_files } else { &test_files })?;
            let forecasts = open_loop_forecasts(&model, &test, config.eval.open_loop_stride)?;
            Some(ade_fde(&forecasts)?)
        }
        None => None,
    };

    let mut fidelity = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut outputs = Outputs::new(out)?;
    if !trace_files.is_empty() {
        if ref_files.is_empty() {
            return Err(RunError::Config("traces given without reference episodes".into()));
        }
        let refs = load_episodes(&ref_files)?;
        let sims = load_episodes(&trace_files)?;
        let fid = distribution_fidelity(&sims, &refs)?;
        skipped = fid.skipped.clone();
        for (stat, by_kind) in &fid.comparisons {
            let mut m = BTreeMap::new();
            for (kind, c) in by_kind {
                let csv_name = format!("hist_{}_{}.csv", stat.name(), kind.name());
                outputs.write(&csv_name, histogram_csv(&c.reference, &c.simulated)?.as_bytes())?;
                m.insert(
                    *kind,
                    StatisticReport {
                        wasserstein1: c.wasserstein1,
                        reference_samples: c.reference.total(),
                        simulated_samples: c.simulated.total(),
                        csv: csv_name,
                    },
                );
            }
            fidelity.insert(*stat, m);
        }
    }

    let mut records = Vec::new();
    for t in &trace_files {
        let p = summary_path(t);
        if p.exists() {
            hashes.push(input_hash(&p)?);
            let s: TraceSummary = serde_json::from_slice(&fs::read(&p)?)
                .map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
            records.push(s.record());
        }
    }
    let collapse = if records.is_empty() { None } else { Some(collapse_summary(&records)?) };
    if open_loop.is_none() && fidelity.is_empty() && collapse.is_none() {
        return Err(RunError::Config("nothing to evaluate: give traces with references, or a checkpoint".into()));
    }
    let report = MetricsReport {
        version: VERSION.to_string(),
        miss_threshold_m: MISS_THRESHOLD_M,
        interaction_radius_m: INTERACTION_RADIUS_M,
        speed_bins: SPEED_SPEC,
        closest_distance_bins: CLOSEST_DISTANCE_SPEC,
        open_loop,
        fidelity,
        fidelity_skipped: skipped,
        collapse,
        detector: config.rollout.collapse.clone(),
    };
    outputs.write_json("report.json", &report)?;
    let manifest = outputs.finish("", "eval", config, hashes)?;
    Ok((manifest, report))
}

/// Rollouts against `references` (cycled), seeded per index.
pub fn rollouts(
    model: &DynamicsModel<f64>,
    references: &[Episode<f64>],
    base: &RolloutConfig,
    count: usize,
    max_frames: usize,
) -> RunResult<Vec<RolloutTrace<f64>>> {
    if references.is_empty() {
        return Err(RunError::Config("no reference episodes for rollouts".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = RolloutConfig {
                max_frames,
                seed: derive_seed(base.seed, "rollout-run", i as u64),
                ..base.clone()
            };
            Ok(run_rollout(&cfg, model, &references[i % references.len()])?)
        })
        .collect()
}

/// Column groups of the ablation table, in order.
pub const ABLATION_GROUPS: [&str; 4] = ["mv", "nmv", "ped", "avg"];

/// One variant, averaged over seeds. `errors` follows [`ABLATION_GROUPS`];
/// a group is `None` when no seed had agents of that kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ids: bool,
    pub ttc_threshold: f64,
    pub cross_mode: CrossMode,
    pub errors: Vec<Option<KindErrors>>,
    pub mean_collapse_s: f64,
    pub censored_runs: usize,
    pub runs: usize,
}

/// One variant trained and evaluated with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub errors: DisplacementErrors,
    pub collapse: CollapseSummary,
    /// Rollouts that collapsed on their first simulated frame.
    pub immediate_collapses: usize,
}

pub fn evaluate_variant(
    config: &RunConfig,
    variant: &Variant,
    train: &[Episode<f64>],
    test: &[Episode<f64>],
) -> RunResult<VariantResult> {
    let cfg = variant.apply(config);
    let trainer = train_model(&cfg, train.to_vec(), None)?;
    let forecasts = open_loop_forecasts(&trainer.model, test, cfg.eval.open_loop_stride)?;
    let errors = ade_fde(&forecasts)?;
    let traces = rollouts(&trainer.model, test, &cfg.rollout, cfg.eval.stability_rollouts, cfg.eval.stability_frames)?;
    let records: Vec<CollapseRecord> = traces.iter().map(CollapseRecord::from).collect();
    Ok(VariantResult {
        variant: variant.clone(),
        seed: config.seed,
        errors,
        collapse: collapse_summary(&records)?,
        immediate_collapses: traces.iter().filter(|t| collapsed_immediately(t)).count(),
    })
}

fn mean_errors(vals: &[KindErrors]) -> Option<KindErrors> {
    if vals.is_empty() {
        return None;
    }
    let m = vals.len() as f64;
    Some(KindErrors {
        ade: vals.iter().map(|e| e.ade).sum::<f64>() / m,
        fde: vals.iter().map(|e| e.fde).sum::<f64>() / m,
        missing_rate: vals.iter().map(|e| e.missing_rate).sum::<f64>() / m,
        agents: vals.iter().map(|e| e.agents).sum(),
    })
}

/// Seed-averaged rows of the ablation table, in first-seen variant order.
pub fn ablation_rows(results: &[VariantResult]) -> Vec<AblationRow> {
    let mut order: Vec<&Variant> = Vec::new();
    for r in results {
        if !order.iter().any(|v| v.name == r.variant.name) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let rs: Vec<&VariantResult> = results.iter().filter(|r| r.variant.name == v.name).collect();
            let mut errors: Vec<Option<KindErrors>> = AgentKind::ALL
                .iter()
                .map(|k| mean_errors(&rs.iter().filter_map(|r| r.errors.per_kind.get(k).copied()).collect::<Vec<_>>()))
                .collect();
            errors.push(mean_errors(&rs.iter().map(|r| r.errors.average).collect::<Vec<_>>()));
            AblationRow {
                variant: v.name.clone(),
                ids: v.ids,
                ttc_threshold: v.ttc_threshold,
                cross_mode: v.cross_mode,
                errors,
                mean_collapse_s: rs.iter().map(|r| r.collapse.mean_s).sum::<f64>() / rs.len() as f64,
                censored_runs: rs.iter().map(|r| r.collapse.censored).sum(),
                runs: rs.iter().map(|r| r.collapse.runs).sum(),
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,ids,ttc_threshold,cross_mode");
    for g in ABLATION_GROUPS {
        s.push_str(&format!(",{g}_ade,{g}_fde,{g}_missing_rate"));
    }
    s.push_str(",mean_collapse_s,censored_runs,runs\n");
    for r in rows {
        let cross = match r.cross_mode {
            CrossMode::Dual => "dual",
            CrossMode::Uni => "uni",
        };
        s.push_str(&format!("{},{},{},{}", r.variant, r.ids, r.ttc_threshold, cross));
        for e in &r.errors {
            match e {
                Some(e) => s.push_str(&format!(",{},{},{}", e.ade, e.fde, e.missing_rate)),
                None => s.push_str(",,,"),
            }
        }
        s.push_str(&format!(",{},{},{}\n", r.mean_collapse_s, r.censored_runs, r.runs));
    }
    s
}

/// Trains every variant for `config.ablate.seeds` consecutive root seeds.
pub fn cmd_ablate(config: &RunConfig, train: &[PathBuf], test: &[PathBuf], out: &Path) -> RunResult<(Manifest, Vec<AblationRow>)> {
    let grid = variants(&config.ablate, config.train.interaction.ttc_threshold);
    if grid.is_empty() {
        return Err(RunError::Config("no ablation variants selected".into()));
    }
    if config.ablate.seeds == 0 {
        return Err(RunError::Config("ablate.seeds must be positive".into()));
    }
    for p in train.iter().chain(test) {
        if !p.exists() {
            return Err(RunError::MissingInput(p.clone()));
        }
    }
    let train_files = episode_files(train)?;
    let test_files = episode_files(test)?;
    if train_files.is_empty() || test_files.is_empty() {
        return Err(RunError::Config("ablation needs training and test episodes".into()));
    }
    let inputs = train_files
        .iter()
        .chain(&test_files)
        .map(|f| input_hash(f))
        .collect::<RunResult<Vec<_>>>()?;
    let train_eps = load_episodes(&train_files)?;
    let test_eps = load_episodes(&test_files)?;
    let mut results = Vec::new();
    for s in 0..config.ablate.seeds as u64 {
        let seeded = RunConfig {
            seed: config.seed + s,
            ..config.clone()
        }
        .resolve()?;
        for v in &grid {
            results.push(evaluate_variant(&seeded, v, &train_eps, &test_eps)?);
        }
    }
    let rows = ablation_rows(&results);
    let mut outputs = Outputs::new(out)?;
    outputs.write("ablation.csv", ablation_csv(&rows).as_bytes())?;
    outputs.write_json("ablation.json", &results)?;
    let manifest = outputs.finish("", "ablate", config, inputs)?;
    if results.iter().all(|r| r.immediate_collapses == r.collapse.runs) {
        return Err(RunError::Collapsed("every ablation rollout collapsed at its first frame".into()));
    }
    Ok((manifest, rows))
}

/// Writes `text` to `path` through a buffered file.
pub fn write_text(path: &Path, text: &str) -> RunResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Rollout mode by name.
pub fn parse_mode(s: &str) -> RunResult<SampleMode> {
    match s {
        "sample" => Ok(SampleMode::Sample),
        "mean" => Ok(SampleMode::Mean),
        other => Err(RunError::Config(format!("unknown rollout mode `{other}`"))),
    }
}
