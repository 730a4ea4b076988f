//! Reproducible experiment pipeline over synthetic data.
//!
//! Artifacts live under one output directory:
//!
//! ```text
//! config.toml                      effective configuration
//! data/<split>.ds                  synthesized datasets
//! checkpoints/teacher.ckpt         encoder + teacher
//! checkpoints/branches.ckpt        + exit branches
//! checkpoints/downstream.ckpt      + downstream probe
//! policy.txt                       calibrated unconstrained policy
//! reports/*.csv, reports/*.json    analyses; reports/timing.json is the
//!                                  only file that varies between reruns
//! ```
//!
//! Every stage reads its inputs from disk, so stages can run one at a time
//! from the CLI. A stage whose input is missing fails with
//! [`Error::Dependency`] naming the stage that produces it. Within one
//! [`Pipeline`] value, full-depth hidden states of each dataset are cached:
//! the encoder is frozen, and the lazy forward pass yields bit-identical
//! prefixes, so exit decisions on cached states equal those of a real
//! early-exit run.

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use config::{
    BenchConfig, DataConfig, DownstreamConfig, EncoderSection, EvalConfig, HeadConfig, MixtureEntry,
    Seeds, TeacherConfig, TrainNoise,
};
pub use report::spearman;

use config::{sub_seed, Stream};
use report::{write_file, write_json, Csv};

use crate::branches::{profile_from_states, train_branches_on_states, BranchSet, EntropyProfile};
use crate::checkpoint::Checkpoint;
use crate::data::{add_noise, make_mixture, synth_dataset, Dataset, NoiseSpec, Snr};
use crate::encoder::{Encoder, HiddenStates};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::policy::{calibrate, constrain, ExitPolicy, ExitTrace, SpanKind, SpanStats};
use crate::probe::{
    evaluate_on_states, evaluate_static_on_states, measure_forward_time,
    train_downstream_on_states, DownstreamHead, EvalMetrics, ForwardTiming, SampleLabels, SampleOutcome,
};
use crate::teacher::{train_teacher_on_features, TeacherHead};

/// Stage names in execution order, as accepted by the CLI.
pub const STAGES: [&str; 9] = [
    "synth",
    "train-teacher",
    "train-branches",
    "profile-entropy",
    "calibrate",
    "train-downstream",
    "eval",
    "noise-sweep",
    "compare-static",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    BranchTrain,
    Heldout,
    DownstreamTrain,
    Test,
}

impl Split {
    const ALL: [Split; 4] = [Split::BranchTrain, Split::Heldout, Split::DownstreamTrain, Split::Test];

    fn name(self) -> &'static str {
        match self {
            Split::BranchTrain => "branch_train",
            Split::Heldout => "heldout",
            Split::DownstreamTrain => "downstream_train",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub sequences: usize,
    pub frames: usize,
    /// Sample count per noise level, keyed by level name.
    pub noise_levels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub pseudo_classes: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub encoder_hash: String,
    pub teacher_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    /// Training loss of each branch at the last step.
    pub final_losses: Vec<f64>,
    /// Held-out pseudo-label loss of each branch.
    pub heldout_losses: Vec<f64>,
    pub encoder_hash: String,
    pub branches_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub layer_means: Vec<f64>,
    pub e_max: f64,
    pub e_min: f64,
    /// Upper bound `ln C` of any branch entropy.
    pub max_entropy: f64,
    pub samples: usize,
    /// Rank correlation of mean entropy with layer index.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rho: f64,
    pub tau: f64,
    pub e_max: f64,
    pub e_min: f64,
    pub layer_means: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub stats: SpanStats,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Softmax layer weights over the full depth after training.
    pub mix_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub noise_level: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_exit: f64,
    pub compute_saved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub rho: f64,
    pub tau: f64,
    pub allowed_layers: Vec<usize>,
    pub metrics: EvalMetrics,
    pub per_level: Vec<LevelMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr: String,
    pub samples: usize,
    /// Samples left clean because their SNR is undefined.
    pub skipped: usize,
    pub fractions: Vec<f64>,
    pub min_exit: usize,
    pub mean_exit: f64,
    pub max_exit: usize,
    pub accuracy: f64,
    pub compute_saved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rho: f64,
    pub tau: f64,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    /// A noise level name, or `average` for the unweighted mean over levels.
    pub noise_level: String,
    pub accuracy: f64,
    pub mean_exit: f64,
    pub compute_saved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedCheck {
    pub layer: usize,
    pub forced_accuracy: f64,
    pub static_accuracy: f64,
    /// Per-sample outcomes agree exactly.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub static_layer: usize,
    /// Mean-span mean exit layer on the mixture, rounded.
    pub matched_layer: usize,
    pub noise_levels: Vec<String>,
    pub rows: Vec<CompareRow>,
    pub mean_average_accuracy: f64,
    pub matched_static_average_accuracy: f64,
    pub mean_at_least_matched: bool,
    pub forced_checks: Vec<ForcedCheck>,
}

/// Everything a full run produces, for callers that want numbers rather
/// than files.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub splits: Vec<SplitSummary>,
    pub teacher: TeacherReport,
    pub branches: BranchReport,
    pub profile: ProfileReport,
    pub calibration: CalibrationReport,
    pub downstream: DownstreamReport,
    pub evals: Vec<EvalReport>,
    pub sweep: SweepReport,
    pub compare: CompareReport,
}

struct Trained {
    encoder: Encoder,
    branches: BranchSet,
    head: DownstreamHead,
    policy: ExitPolicy,
    profile: EntropyProfile,
    stats: SpanStats,
}

pub struct Pipeline {
    cfg: BenchConfig,
    root: PathBuf,
    cache: HashMap<String, Rc<Vec<HiddenStates>>>,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn level_name(snr: Snr) -> String {
    snr.to_string()
}

fn read_artifact(path: &Path, stage: &'static str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Dependency {
            stage,
            detail: format!("{} not found", path.display()),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn missing(stage: &'static str, what: &str) -> Error {
    Error::Dependency {
        stage,
        detail: format!("checkpoint has no {what}"),
    }
}

/// Per-level metrics in `levels` order; levels with no samples are omitted.
fn per_level(outcomes: &[SampleOutcome], tags: &[String], levels: &[String], layers: usize) -> Vec<LevelMetrics> {
    levels
        .iter()
        .filter_map(|level| {
            let group: Vec<SampleOutcome> = outcomes
                .iter()
                .zip(tags)
                .filter(|(_, t)| *t == level)
                .map(|(o, _)| o.clone())
                .collect();
            let m = EvalMetrics::from_outcomes(&group, layers).ok()?;
            Some(LevelMetrics {
                noise_level: level.clone(),
                samples: m.samples,
                accuracy: m.accuracy,
                mean_exit: m.mean_exit_layer,
                compute_saved: m.layer_compute_saved,
            })
        })
        .collect()
}

fn average(levels: &[LevelMetrics], f: impl Fn(&LevelMetrics) -> f64) -> f64 {
    levels.iter().map(f).sum::<f64>() / levels.len().max(1) as f64
}

fn compare_rows(strategy: &str, levels: &[LevelMetrics]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = levels
        .iter()
        .map(|l| CompareRow {
            strategy: strategy.to_string(),
            noise_level: l.noise_level.clone(),
            accuracy: l.accuracy,
            mean_exit: l.mean_exit,
            compute_saved: l.compute_saved,
        })
        .collect();
    rows.push(CompareRow {
        strategy: strategy.to_string(),
        noise_level: "average".to_string(),
        accuracy: average(levels, |l| l.accuracy),
        mean_exit: average(levels, |l| l.mean_exit),
        compute_saved: average(levels, |l| l.compute_saved),
    });
    rows
}

fn traces_csv(traces: &[ExitTrace], tags: &[String], layers: usize) -> String {
    let mut header = vec!["sample_id".to_string(), "noise_level".into(), "exit_layer".into(), "forced".into()];
    header.extend((1..=layers).map(|k| format!("entropy_{k}")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (t, tag) in traces.iter().zip(tags) {
        let mut cells = vec![t.sample_id.to_string(), tag.clone(), t.exit_layer.to_string(), t.forced.to_string()];
        cells.extend(t.entropies.iter().map(|e| e.map(|v| v.to_string()).unwrap_or_default()));
        csv.raw(&cells);
    }
    csv.into_string()
}

fn histogram_csv(m: &EvalMetrics) -> String {
    let mut csv = Csv::new(&["layer", "count", "fraction"]);
    for (i, (c, f)) in m.exit_histogram.iter().zip(&m.exit_fractions).enumerate() {
        csv.row(&[&(i + 1), c, f]);
    }
    csv.into_string()
}

fn profile_csv(means: &[f64]) -> String {
    let mut csv = Csv::new(&["layer", "mean_entropy"]);
    for (i, e) in means.iter().enumerate() {
        csv.row(&[&(i + 1), e]);
    }
    csv.into_string()
}

impl Pipeline {
    pub fn new(cfg: BenchConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            root: root.into(),
            cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &BenchConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn dataset_path(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{}.ds", split.name()))
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn policy_path(&self) -> PathBuf {
        self.root.join("policy.txt")
    }

    /// Runs one stage by CLI name. `static_layer` only affects
    /// `compare-static`.
    pub fn run_stage(&mut self, stage: &str, static_layer: Option<usize>) -> Result<()> {
        match stage {
            "synth" => self.synth().map(drop),
            "train-teacher" => self.train_teacher().map(drop),
            "train-branches" => self.train_branches().map(drop),
            "profile-entropy" => self.profile_entropy().map(drop),
            "calibrate" => self.calibrate().map(drop),
            "train-downstream" => self.train_downstream().map(drop),
            "eval" => self.eval().map(drop),
            "noise-sweep" => self.noise_sweep().map(drop),
            "compare-static" => self.compare_static(static_layer).map(drop),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }

    /// All stages in order.
    pub fn run_all(&mut self) -> Result<PipelineSummary> {
        write_file(&self.root.join("config.toml"), self.cfg.to_toml())?;
        let splits = self.synth()?;
        let teacher = self.train_teacher()?;
        let branches = self.train_branches()?;
        let profile = self.profile_entropy()?;
        let calibration = self.calibrate()?;
        let downstream = self.train_downstream()?;
        let evals = self.eval()?;
        let sweep = self.noise_sweep()?;
        let compare = self.compare_static(None)?;
        Ok(PipelineSummary {
            splits,
            teacher,
            branches,
            profile,
            calibration,
            downstream,
            evals,
            sweep,
            compare,
        })
    }

    // ---- artifact loading -------------------------------------------------

    fn load_dataset(&self, split: Split) -> Result<Dataset> {
        Dataset::from_bytes(&read_artifact(&self.dataset_path(split), "synth")?)
    }

    fn load_checkpoint(&self, name: &str, stage: &'static str) -> Result<Checkpoint> {
        let ckpt = Checkpoint::from_bytes(&read_artifact(&self.checkpoint_path(name), stage)?)?;
        if *ckpt.encoder.config() != self.cfg.encoder_config() {
            return Err(Error::config(format!(
                "{name}.ckpt was built with a different encoder configuration; rerun from train-teacher"
            )));
        }
        Ok(ckpt)
    }

    fn load_calibration(&self) -> Result<(ExitPolicy, EntropyProfile)> {
        let text = read_artifact(&self.policy_path(), "calibrate")?;
        let policy = ExitPolicy::from_text(&String::from_utf8_lossy(&text))?;
        let report: CalibrationReport = serde_json::from_slice(&read_artifact(
            &self.report_path("calibration.json"),
            "calibrate",
        )?)
        .map_err(|e| Error::config(format!("calibration.json: {e}")))?;
        let profile = EntropyProfile::from_layer_means(report.layer_means, report.samples)?;
        Ok((policy, profile))
    }

    fn load_trained(&self) -> Result<Trained> {
        let ckpt = self.load_checkpoint("downstream", "train-downstream")?;
        let stats: SpanStats = serde_json::from_slice(&read_artifact(
            &self.report_path("span_stats.json"),
            "train-downstream",
        )?)
        .map_err(|e| Error::config(format!("span_stats.json: {e}")))?;
        let (policy, profile) = self.load_calibration()?;
        Ok(Trained {
            branches: ckpt.branches.ok_or_else(|| missing("train-branches", "exit branches"))?,
            head: ckpt.downstream.ok_or_else(|| missing("train-downstream", "downstream head"))?,
            encoder: ckpt.encoder,
            policy,
            profile,
            stats,
        })
    }

    /// Full-depth states of `data`, cached under `key`.
    fn states(&mut self, key: &str, enc: &Encoder, data: &Dataset) -> Result<Rc<Vec<HiddenStates>>> {
        let key = format!("{key}#{:016x}", enc.param_hash());
        if let Some(s) = self.cache.get(&key) {
            return Ok(Rc::clone(s));
        }
        let states = Rc::new(enc.forward_batch(&data.inputs())?);
        self.cache.insert(key, Rc::clone(&states));
        Ok(states)
    }

    fn evict(&mut self, key: &str) {
        self.cache.retain(|k, _| !k.starts_with(&format!("{key}#")));
    }

    /// Test split noised with the configured mixture.
    fn test_mixture(&self) -> Result<Dataset> {
        let test = self.load_dataset(Split::Test)?;
        let seeds = self.cfg.seeds;
        let spec = self.cfg.mixture(sub_seed(seeds.data_seed, Stream::TestMixNoise))?;
        Ok(make_mixture(&test, &spec, sub_seed(seeds.data_seed, Stream::TestMixAssign))?.0)
    }

    fn mixture_levels(&self) -> Result<Vec<String>> {
        let mut levels: Vec<String> = Vec::new();
        for (spec, _) in self.cfg.mixture(0)?.entries {
            let name = level_name(spec.snr);
            if !levels.contains(&name) {
                levels.push(name);
            }
        }
        Ok(levels)
    }

    // ---- stages ------------------------------------------------------------

    pub fn synth(&mut self) -> Result<Vec<SplitSummary>> {
        let mut out = Vec::new();
        for split in Split::ALL {
            let mut data = synth_dataset(&self.cfg.synth_spec(split.index()))?;
            if split == Split::DownstreamTrain && self.cfg.downstream.train_noise == TrainNoise::Mixture {
                let seeds = self.cfg.seeds;
                let spec = self.cfg.mixture(sub_seed(seeds.data_seed, Stream::TrainMixNoise))?;
                data = make_mixture(&data, &spec, sub_seed(seeds.data_seed, Stream::TrainMixAssign))?.0;
            }
            write_file(&self.dataset_path(split), data.to_bytes())?;
            let mut noise_levels = BTreeMap::new();
            for t in data.tags() {
                *noise_levels.entry(level_name(t)).or_insert(0) += 1;
            }
            out.push(SplitSummary {
                name: split.name().to_string(),
                sequences: data.len(),
                frames: self.cfg.data.frames,
                noise_levels,
            });
        }
        write_json(&self.root.join("data").join("manifest.json"), &out)?;
        Ok(out)
    }

    pub fn train_teacher(&mut self) -> Result<TeacherReport> {
        let data = self.load_dataset(Split::BranchTrain)?;
        let enc = Encoder::init(self.cfg.encoder_config())?;
        let states = self.states("branch_train", &enc, &data)?;
        let last: Vec<&Matrix> = states
            .iter()
            .map(|h| h.layer(h.total_layers()))
            .collect::<Result<_>>()?;
        let labels = data.frame_labels();
        let labels: Vec<&[u32]> = labels.iter().map(Vec::as_slice).collect();
        let fit = train_teacher_on_features(
            &last,
            &labels,
            self.cfg.teacher.pseudo_classes,
            &self.cfg.teacher_settings(),
        )?;

        let mut loss_csv = Csv::new(&["step", "loss"]);
        for (i, l) in fit.losses.iter().enumerate() {
            loss_csv.row(&[&(i + 1), l]);
        }
        write_file(&self.report_path("teacher_loss.csv"), loss_csv.into_string())?;
        let report = TeacherReport {
            pseudo_classes: fit.head.num_classes(),
            train_accuracy: fit.head.accuracy(&last, &labels),
            final_loss: fit.losses.last().copied().unwrap_or(f64::NAN),
            encoder_hash: hex(enc.param_hash()),
            teacher_hash: hex(fit.head.param_hash()),
        };
        write_json(&self.report_path("teacher.json"), &report)?;
        let mut ckpt = Checkpoint::new(enc);
        ckpt.teacher = Some(fit.head);
        write_file(&self.checkpoint_path("teacher"), ckpt.to_bytes())?;
        Ok(report)
    }

    pub fn train_branches(&mut self) -> Result<BranchReport> {
        let mut ckpt = self.load_checkpoint("teacher", "train-teacher")?;
        let teacher: TeacherHead = ckpt.teacher.clone().ok_or_else(|| missing("train-teacher", "teacher"))?;
        let data = self.load_dataset(Split::BranchTrain)?;
        let states = self.states("branch_train", &ckpt.encoder, &data)?;
        let fit = train_branches_on_states(&states, &teacher, &self.cfg.branch_settings())?;
        drop(states);
        self.evict("branch_train");

        let heldout = self.load_dataset(Split::Heldout)?;
        let held_states = self.states("heldout", &ckpt.encoder, &heldout)?;
        let heldout_losses = fit.branches.pseudo_label_losses(&held_states, &teacher)?;

        let mut loss_csv = Csv::new(&["step", "layer", "loss"]);
        for (step, per_layer) in fit.losses.iter().enumerate() {
            for (k, l) in per_layer.iter().enumerate() {
                loss_csv.row(&[&(step + 1), &(k + 1), l]);
            }
        }
        write_file(&self.report_path("branch_loss.csv"), loss_csv.into_string())?;
        let report = BranchReport {
            final_losses: fit.losses.last().cloned().unwrap_or_default(),
            heldout_losses,
            encoder_hash: hex(ckpt.encoder.param_hash()),
            branches_hash: hex(fit.branches.param_hash()),
        };
        write_json(&self.report_path("branches.json"), &report)?;
        ckpt.branches = Some(fit.branches);
        write_file(&self.checkpoint_path("branches"), ckpt.to_bytes())?;
        Ok(report)
    }

    pub fn profile_entropy(&mut self) -> Result<ProfileReport> {
        let ckpt = self.load_checkpoint("branches", "train-branches")?;
        let branches = ckpt.branches.ok_or_else(|| missing("train-branches", "exit branches"))?;
        let data = self.load_dataset(Split::Heldout)?;
        let states = self.states("heldout", &ckpt.encoder, &data)?;
        let profile = profile_from_states(&branches, &states)?;
        let index: Vec<f64> = (1..=profile.layer_means.len()).map(|k| k as f64).collect();
        let report = ProfileReport {
            spearman: spearman(&index, &profile.layer_means),
            layer_means: profile.layer_means.clone(),
            e_max: profile.e_max,
            e_min: profile.e_min,
            max_entropy: (branches.num_classes() as f64).ln(),
            samples: profile.samples,
        };
        write_file(&self.report_path("entropy_profile.csv"), profile_csv(&profile.layer_means))?;
        write_json(&self.report_path("entropy_profile.json"), &report)?;
        Ok(report)
    }

    pub fn calibrate(&mut self) -> Result<CalibrationReport> {
        let ckpt = self.load_checkpoint("branches", "train-branches")?;
        let branches = ckpt.branches.ok_or_else(|| missing("train-branches", "exit branches"))?;
        let data = self.load_dataset(Split::DownstreamTrain)?;
        let states = self.states("downstream_train", &ckpt.encoder, &data)?;
        let profile = profile_from_states(&branches, &states)?;
        let policy = calibrate(&profile, self.cfg.downstream.rho)?;
        let report = CalibrationReport {
            rho: policy.rho(),
            tau: policy.tau(),
            e_max: profile.e_max,
            e_min: profile.e_min,
            layer_means: profile.layer_means.clone(),
            samples: profile.samples,
        };
        write_file(&self.policy_path(), policy.to_text())?;
        write_file(&self.report_path("calibration_profile.csv"), profile_csv(&profile.layer_means))?;
        write_json(&self.report_path("calibration.json"), &report)?;
        Ok(report)
    }

    pub fn train_downstream(&mut self) -> Result<DownstreamReport> {
        let mut ckpt = self.load_checkpoint("branches", "train-branches")?;
        let branches = ckpt.branches.clone().ok_or_else(|| missing("train-branches", "exit branches"))?;
        let (policy, _) = self.load_calibration()?;
        let data = self.load_dataset(Split::DownstreamTrain)?;
        let states = self.states("downstream_train", &ckpt.encoder, &data)?;
        let layers = ckpt.encoder.num_layers();
        let init = DownstreamHead::init(
            layers,
            self.cfg.data.num_classes,
            ckpt.encoder.config().model_dim,
            self.cfg.downstream.task,
            self.cfg.downstream.weight_mode,
            self.cfg.downstream_init_seed(),
        )?;
        let labels = data.sample_labels();
        let fit = train_downstream_on_states(
            &states,
            &branches,
            &policy,
            init,
            &labels,
            &self.cfg.downstream_settings(),
        )?;
        let train_eval = evaluate_on_states(&states, &branches, &policy, &fit.head, &labels)?;

        let mut loss_csv = Csv::new(&["step", "loss"]);
        for (i, l) in fit.losses.iter().enumerate() {
            loss_csv.row(&[&(i + 1), l]);
        }
        write_file(&self.report_path("downstream_loss.csv"), loss_csv.into_string())?;
        let tags: Vec<String> = data.tags().into_iter().map(level_name).collect();
        write_file(&self.report_path("train_traces.csv"), traces_csv(&fit.traces, &tags, layers))?;
        write_json(&self.report_path("span_stats.json"), &fit.stats)?;
        let report = DownstreamReport {
            stats: fit.stats.clone(),
            final_loss: fit.losses.last().copied().unwrap_or(f64::NAN),
            train_accuracy: train_eval.metrics.accuracy,
            mix_weights: fit.head.mix_weights(layers),
        };
        write_json(&self.report_path("downstream.json"), &report)?;
        ckpt.downstream = Some(fit.head);
        write_file(&self.checkpoint_path("downstream"), ckpt.to_bytes())?;
        Ok(report)
    }

    /// Each configured span at each inference-time ratio on the mixed test
    /// set. Wall-clock timing goes to `reports/timing.json`.
    pub fn eval(&mut self) -> Result<Vec<EvalReport>> {
        let t = self.load_trained()?;
        let data = self.test_mixture()?;
        let states = self.states("test_mixture", &t.encoder, &data)?;
        let labels = data.sample_labels();
        let tags: Vec<String> = data.tags().into_iter().map(level_name).collect();
        let levels = self.mixture_levels()?;
        let layers = t.encoder.num_layers();

        let mut reports = Vec::new();
        let mut summary = Csv::new(&["strategy", "rho", "tau", "accuracy", "mean_exit", "compute_saved", "forced_fraction"]);
        for kind in self.cfg.span_kinds()? {
            for &rho in &self.cfg.eval.rhos {
                let policy = constrain(
                    &t.policy.with_rho(&t.profile, rho)?,
                    kind,
                    &t.stats,
                    self.cfg.eval.threshold_cutoff,
                )?;
                let ev = evaluate_on_states(&states, &t.branches, &policy, &t.head, &labels)?;
                let name = format!("{}_rho{rho}", kind.name());
                write_file(&self.report_path(&format!("eval/{name}_histogram.csv")), histogram_csv(&ev.metrics))?;
                write_file(
                    &self.report_path(&format!("eval/{name}_traces.csv")),
                    traces_csv(&ev.traces, &tags, layers),
                )?;
                let report = EvalReport {
                    strategy: kind.name().to_string(),
                    rho,
                    tau: policy.tau(),
                    allowed_layers: policy.allowed_layers(),
                    per_level: per_level(&ev.outcomes, &tags, &levels, layers),
                    metrics: ev.metrics,
                };
                write_json(&self.report_path(&format!("eval/{name}.json")), &report)?;
                let m = &report.metrics;
                summary.row(&[
                    &report.strategy,
                    &rho,
                    &report.tau,
                    &m.accuracy,
                    &m.mean_exit_layer,
                    &m.layer_compute_saved,
                    &m.forced_fraction,
                ]);
                reports.push(report);
            }
        }
        write_file(&self.report_path("eval_summary.csv"), summary.into_string())?;

        let n = self.cfg.eval.timing_samples.min(data.len());
        if n > 0 {
            let inputs: Vec<Matrix> = data.inputs().into_iter().take(n).collect();
            let timing: ForwardTiming = measure_forward_time(&t.encoder, &t.branches, &t.policy, &inputs)?;
            write_json(&self.report_path("timing.json"), &timing)?;
        }
        Ok(reports)
    }

    /// Exit distribution of the unconstrained policy at the training ratio,
    /// with the whole test split noised at each configured SNR.
    pub fn noise_sweep(&mut self) -> Result<SweepReport> {
        let t = self.load_trained()?;
        let test = self.load_dataset(Split::Test)?;
        let layers = t.encoder.num_layers();
        let labels = test.sample_labels();
        let noise_seed = sub_seed(self.cfg.seeds.data_seed, Stream::SweepNoise);
        let mut rows = Vec::new();
        for snr in self.cfg.sweep_snrs()? {
            let spec = NoiseSpec {
                snr,
                kind: self.cfg.data.noise_kind,
                seed: noise_seed,
            };
            let (noisy, skipped) = add_noise(&test, &spec)?;
            let states = self.states(&format!("test@{snr}"), &t.encoder, &noisy)?;
            let ev = evaluate_on_states(&states, &t.branches, &t.policy, &t.head, &labels)?;
            let m = ev.metrics;
            rows.push(SweepRow {
                snr: level_name(snr),
                samples: m.samples,
                skipped: skipped.len(),
                fractions: m.exit_fractions,
                min_exit: m.min_exit_layer,
                mean_exit: m.mean_exit_layer,
                max_exit: m.max_exit_layer,
                accuracy: m.accuracy,
                compute_saved: m.layer_compute_saved,
            });
        }
        let mut dist = Csv::new(&["snr", "layer", "fraction"]);
        let mut summary = Csv::new(&["snr", "min_exit", "mean_exit", "max_exit", "accuracy", "compute_saved"]);
        for r in &rows {
            for (k, f) in r.fractions.iter().enumerate() {
                dist.row(&[&r.snr, &(k + 1), f]);
            }
            summary.row(&[&r.snr, &r.min_exit, &r.mean_exit, &r.max_exit, &r.accuracy, &r.compute_saved]);
        }
        debug_assert!(rows.iter().all(|r| r.fractions.len() == layers));
        let report = SweepReport {
            rho: t.policy.rho(),
            tau: t.policy.tau(),
            rows,
        };
        write_file(&self.report_path("noise_sweep.csv"), dist.into_string())?;
        write_file(&self.report_path("noise_sweep_summary.csv"), summary.into_string())?;
        write_json(&self.report_path("noise_sweep.json"), &report)?;
        Ok(report)
    }

    /// Every span strategy at the training ratio against the encoder
    /// truncated at a fixed depth, per mixture noise level. `static_layer`
    /// overrides the configured baseline depth.
    pub fn compare_static(&mut self, static_layer: Option<usize>) -> Result<CompareReport> {
        let layers = self.cfg.encoder.num_layers;
        let k = static_layer.unwrap_or(self.cfg.static_layer());
        if k == 0 || k > layers {
            return Err(Error::invalid(format!("static layer {k} outside 1..={layers}")));
        }
        let t = self.load_trained()?;
        let data = self.test_mixture()?;
        let states = self.states("test_mixture", &t.encoder, &data)?;
        let labels: Vec<SampleLabels> = data.sample_labels();
        let tags: Vec<String> = data.tags().into_iter().map(level_name).collect();
        let levels = self.mixture_levels()?;
        let cutoff = self.cfg.eval.threshold_cutoff;

        let mut rows = Vec::new();
        let mut kinds = self.cfg.span_kinds()?;
        if !kinds.contains(&SpanKind::Mean) {
            kinds.push(SpanKind::Mean);
        }
        let mut mean_levels = Vec::new();
        let mut mean_exit = 0.0;
        for kind in kinds {
            let policy = constrain(&t.policy, kind, &t.stats, cutoff)?;
            let ev = evaluate_on_states(&states, &t.branches, &policy, &t.head, &labels)?;
            let lv = per_level(&ev.outcomes, &tags, &levels, layers);
            rows.extend(compare_rows(&format!("early-exit-{}", kind.name()), &lv));
            if kind == SpanKind::Mean {
                mean_exit = ev.metrics.mean_exit_layer;
                mean_levels = lv;
            }
        }
        let matched = (mean_exit.round() as usize).clamp(1, layers);

        let static_levels = |depth: usize, name: String, rows: &mut Vec<CompareRow>| -> Result<Vec<LevelMetrics>> {
            let outcomes = evaluate_static_on_states(&states, &t.head, &labels, depth)?;
            let lv = per_level(&outcomes, &tags, &levels, layers);
            rows.extend(compare_rows(&name, &lv));
            Ok(lv)
        };
        static_levels(k, format!("static-{k}"), &mut rows)?;
        let matched_levels = static_levels(matched, format!("static-matched-{matched}"), &mut rows)?;

        let mut forced_checks = Vec::new();
        let mut checked: Vec<usize> = vec![k, matched];
        checked.dedup();
        for depth in checked {
            let forced = evaluate_on_states(
                &states,
                &t.branches,
                &ExitPolicy::fixed_layer(depth, layers)?,
                &t.head,
                &labels,
            )?;
            let fixed = evaluate_static_on_states(&states, &t.head, &labels, depth)?;
            let acc = |o: &[SampleOutcome]| {
                o.iter().map(|x| x.correct).sum::<usize>() as f64 / o.iter().map(|x| x.total).sum::<usize>().max(1) as f64
            };
            forced_checks.push(ForcedCheck {
                layer: depth,
                forced_accuracy: acc(&forced.outcomes),
                static_accuracy: acc(&fixed),
                identical: forced
                    .outcomes
                    .iter()
                    .zip(&fixed)
                    .all(|(a, b)| a.exit_layer == b.exit_layer && a.correct == b.correct && a.total == b.total),
            });
        }

        let mean_avg = average(&mean_levels, |l| l.accuracy);
        let matched_avg = average(&matched_levels, |l| l.accuracy);
        let report = CompareReport {
            static_layer: k,
            matched_layer: matched,
            noise_levels: levels,
            rows,
            mean_average_accuracy: mean_avg,
            matched_static_average_accuracy: matched_avg,
            mean_at_least_matched: mean_avg >= matched_avg,
            forced_checks,
        };
        let mut csv = Csv::new(&["strategy", "noise_level", "accuracy", "mean_exit", "compute_saved"]);
        for r in &report.rows {
            csv.row(&[&r.strategy, &r.noise_level, &r.accuracy, &r.mean_exit, &r.compute_saved]);
        }
        write_file(&self.report_path("compare_static.csv"), csv.into_string())?;
        write_json(&self.report_path("compare_static.json"), &report)?;
        Ok(report)
    }
}
