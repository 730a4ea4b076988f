use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MixtureSpec, NoiseKind, NoiseSpec, Snr, SynthSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::linear::TrainSettings;
use crate::numeric::{Optimizer, SeededRng};
use crate::policy::{SpanKind, DEFAULT_THRESHOLD_CUTOFF};
use crate::probe::{Task, WeightMode};
use crate::teacher::DEFAULT_PSEUDO_CLASSES;

/// Full pipeline configuration. Every field has a default, so an empty file
/// is the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: Seeds,
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub teacher: TeacherConfig,
    pub branches: HeadConfig,
    pub downstream: DownstreamConfig,
    pub eval: EvalConfig,
}

/// All randomness in the pipeline is derived from these three values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data_seed: u64,
    pub encoder_seed: u64,
    pub train_seed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data_seed: 1,
            encoder_seed: 42,
            train_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub context_window: usize,
    pub markov_self_prob: f64,
    pub jitter: f64,
    pub branch_train: usize,
    pub heldout: usize,
    pub downstream_train: usize,
    pub test: usize,
    pub noise_kind: NoiseKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            frames: s.frames,
            input_dim: s.input_dim,
            num_classes: s.num_classes,
            context_window: s.context_window,
            markov_self_prob: s.markov_self_prob,
            jitter: s.jitter,
            branch_train: 2000,
            heldout: 200,
            downstream_train: 1000,
            test: 500,
            noise_kind: NoiseKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_frames: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        Self {
            num_layers: c.num_layers,
            model_dim: c.model_dim,
            num_heads: c.num_heads,
            ffn_dim: c.ffn_dim,
            max_frames: c.max_frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub pseudo_classes: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: Optimizer,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            pseudo_classes: DEFAULT_PSEUDO_CLASSES,
            lr: 1e-3,
            batch: 32,
            steps: 1000,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: Optimizer,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            steps: 2000,
            optimizer: Optimizer::Adam,
        }
    }
}

/// Noise applied to the downstream training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainNoise {
    Clean,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub task: Task,
    pub weight_mode: WeightMode,
    /// Training-time threshold ratio.
    pub rho: f64,
    pub train_noise: TrainNoise,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: Optimizer,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            task: Task::Frame,
            weight_mode: WeightMode::Prefix,
            rho: 0.7,
            train_noise: TrainNoise::Mixture,
            lr: 1e-3,
            batch: 32,
            steps: 1000,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub snr: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub spans: Vec<String>,
    /// Inference-time threshold ratios.
    pub rhos: Vec<f64>,
    pub threshold_cutoff: f64,
    /// SNR levels of the noise sweep; `"clean"` or a dB value.
    pub snrs: Vec<String>,
    pub mixture: Vec<MixtureEntry>,
    /// Static baseline depth; half the encoder depth when absent.
    pub static_layer: Option<usize>,
    /// Inputs timed for the wall-clock comparison; 0 disables timing.
    pub timing_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let entry = |snr: &str, fraction| MixtureEntry {
            snr: snr.to_string(),
            fraction,
        };
        Self {
            spans: SpanKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            rhos: vec![0.5, 0.7, 0.9],
            threshold_cutoff: DEFAULT_THRESHOLD_CUTOFF,
            snrs: ["clean", "10", "5", "0"].map(String::from).to_vec(),
            mixture: vec![entry("clean", 0.4), entry("10", 0.3), entry("5", 0.2), entry("0", 0.1)],
            static_layer: None,
            timing_samples: 100,
        }
    }
}

/// Seed streams; one per independent random draw in the pipeline.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Prototypes = 1,
    BranchTrain,
    Heldout,
    DownstreamTrain,
    Test,
    TrainMixNoise,
    TrainMixAssign,
    TestMixNoise,
    TestMixAssign,
    SweepNoise,
    Teacher,
    Branches,
    Downstream,
    DownstreamInit,
}

pub(crate) fn sub_seed(base: u64, stream: Stream) -> u64 {
    SeededRng::derive(base, stream as u64).next_u64()
}

impl BenchConfig {
    /// Reads a TOML config (or the defaults when `path` is `None`) and
    /// applies `section.key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: BenchConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        for split in [0, 1, 2, 3] {
            self.synth_spec(split).validate()?;
        }
        if self.data.frames > self.encoder.max_frames {
            return Err(Error::config(format!(
                "data.frames {} exceeds encoder.max_frames {}",
                self.data.frames, self.encoder.max_frames
            )));
        }
        for (name, s) in [
            ("teacher", self.teacher_settings()),
            ("branches", self.branch_settings()),
            ("downstream", self.downstream_settings()),
        ] {
            s.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        if self.teacher.pseudo_classes < self.data.num_classes.max(2) {
            return Err(Error::config(format!(
                "teacher.pseudo_classes {} must cover the {} label classes",
                self.teacher.pseudo_classes, self.data.num_classes
            )));
        }
        let rho_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rho_ok(self.downstream.rho) || !self.eval.rhos.iter().all(|&r| rho_ok(r)) {
            return Err(Error::config("threshold ratios must lie in [0, 1]"));
        }
        if self.eval.rhos.is_empty() || self.eval.spans.is_empty() {
            return Err(Error::config("eval.spans and eval.rhos must be non-empty"));
        }
        self.span_kinds()?;
        self.sweep_snrs()?;
        self.mixture(0)?.validate()?;
        if let Some(k) = self.eval.static_layer {
            if k == 0 || k > self.encoder.num_layers {
                return Err(Error::config(format!(
                    "eval.static_layer {k} outside 1..={}",
                    self.encoder.num_layers
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.encoder.num_layers,
            model_dim: self.encoder.model_dim,
            num_heads: self.encoder.num_heads,
            ffn_dim: self.encoder.ffn_dim,
            max_frames: self.encoder.max_frames,
            input_dim: self.data.input_dim,
            seed: self.seeds.encoder_seed,
        }
    }

    /// Splits: 0 branch-train, 1 held-out, 2 downstream-train, 3 test.
    pub(crate) fn synth_spec(&self, split: usize) -> SynthSpec {
        let (n, stream) = match split {
            0 => (self.data.branch_train, Stream::BranchTrain),
            1 => (self.data.heldout, Stream::Heldout),
            2 => (self.data.downstream_train, Stream::DownstreamTrain),
            _ => (self.data.test, Stream::Test),
        };
        SynthSpec {
            num_sequences: n,
            frames: self.data.frames,
            input_dim: self.data.input_dim,
            num_classes: self.data.num_classes,
            context_window: self.data.context_window,
            markov_self_prob: self.data.markov_self_prob,
            jitter: self.data.jitter,
            prototype_seed: sub_seed(self.seeds.data_seed, Stream::Prototypes),
            seed: sub_seed(self.seeds.data_seed, stream),
        }
    }

    fn settings(&self, h: HeadConfig, stream: Stream) -> TrainSettings {
        TrainSettings {
            lr: h.lr,
            batch: h.batch,
            steps: h.steps,
            seed: sub_seed(self.seeds.train_seed, stream),
            optimizer: h.optimizer,
        }
    }

    pub fn teacher_settings(&self) -> TrainSettings {
        let t = self.teacher;
        self.settings(
            HeadConfig {
                lr: t.lr,
                batch: t.batch,
                steps: t.steps,
                optimizer: t.optimizer,
            },
            Stream::Teacher,
        )
    }

    pub fn branch_settings(&self) -> TrainSettings {
        self.settings(self.branches, Stream::Branches)
    }

    pub fn downstream_settings(&self) -> TrainSettings {
        let d = self.downstream;
        self.settings(
            HeadConfig {
                lr: d.lr,
                batch: d.batch,
                steps: d.steps,
                optimizer: d.optimizer,
            },
            Stream::Downstream,
        )
    }

    pub(crate) fn downstream_init_seed(&self) -> u64 {
        sub_seed(self.seeds.train_seed, Stream::DownstreamInit)
    }

    pub fn span_kinds(&self) -> Result<Vec<SpanKind>> {
        self.eval.spans.iter().map(|s| s.parse()).collect()
    }

    pub fn sweep_snrs(&self) -> Result<Vec<Snr>> {
        self.eval.snrs.iter().map(|s| s.parse()).collect()
    }

    pub fn static_layer(&self) -> usize {
        self.eval.static_layer.unwrap_or((self.encoder.num_layers / 2).max(1))
    }

    /// Mixture with noise drawn from `seed`.
    pub(crate) fn mixture(&self, seed: u64) -> Result<MixtureSpec> {
        let entries = self
            .eval
            .mixture
            .iter()
            .map(|e| {
                Ok((
                    NoiseSpec {
                        snr: e.snr.parse()?,
                        kind: self.data.noise_kind,
                        seed,
                    },
                    e.fraction,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MixtureSpec { entries })
    }
}

/// `a.b.c=value`; the value is parsed as TOML and kept as a string when it
/// is not valid TOML (so `--set eval.snrs='["clean","5"]'` and
/// `--set data.noise_kind=tonal` both work).
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(BenchConfig::from_toml("").unwrap(), BenchConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = BenchConfig::default();
        assert_eq!(BenchConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides_win() {
        let text = "[seeds]\ndata_seed = 5\n";
        let cfg = BenchConfig::from_toml_with(
            text,
            &[
                "seeds.data_seed=9".into(),
                "data.noise_kind=tonal".into(),
                "eval.rhos=[0.3]".into(),
                "eval.static_layer=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seeds.data_seed, 9);
        assert_eq!(cfg.data.noise_kind, NoiseKind::Tonal);
        assert_eq!(cfg.eval.rhos, vec![0.3]);
        assert_eq!(cfg.static_layer(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            "[data]\ncontext_window = 4\n",
            "[encoder]\nnum_heads = 5\n",
            "[eval]\nrhos = [1.5]\n",
            "[eval]\nspans = [\"widest\"]\n",
            "[eval]\nstatic_layer = 9\n",
            "[eval]\nmixture = [{ snr = \"clean\", fraction = 0.5 }]\n",
            "[typo]\nx = 1\n",
        ] {
            let err = BenchConfig::from_toml(bad).unwrap_err();
            assert_eq!(err.kind(), "config", "{bad}: {err}");
        }
    }

    #[test]
    fn default_static_layer_is_half_depth() {
        assert_eq!(BenchConfig::default().static_layer(), 4);
    }

    #[test]
    fn splits_share_prototypes_but_not_samples() {
        let cfg = BenchConfig::default();
        let specs: Vec<_> = (0..4).map(|s| cfg.synth_spec(s)).collect();
        assert!(specs.iter().all(|s| s.prototype_seed == specs[0].prototype_seed));
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(specs[i].seed, specs[j].seed);
            }
        }
    }
}
