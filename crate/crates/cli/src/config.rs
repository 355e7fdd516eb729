//! Experiment configuration: a versioned TOML tree in which every key has a
//! default and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use diagflow::analysis::AnalysisConfig;
use diagflow::gradflow::{FlowConfig, SgdConfig};
use diagflow::model::{ModelKind, ModelSpec};
use diagflow::objective::{generate, DataConfig, Dataset, Theta};
use diagflow::stagewise::ScheduleConfig;
use diagflow::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::AttentionHead,
            n: 10,
            d: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_samples: usize,
    pub seed: u64,
    pub teacher_seed: Option<u64>,
    pub teacher_scale: f64,
    pub label_noise: f64,
    /// Load samples from this file instead of generating them: `.csv` in the
    /// dataset CSV layout, anything else raw with a JSON sidecar.
    pub file: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            seed: 0,
            teacher_seed: None,
            teacher_scale: 1.0,
            label_noise: 0.0,
            file: None,
        }
    }
}

/// Direction `θ̂₀` of the initialization `θ(0) = α θ̂₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub scale: f64,
    pub seed: u64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self { scale: 1.0, seed: 1234 }
    }
}

/// SGD settings; the initialization scale is `flow.alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; `0` means full batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for SgdSection {
    fn default() -> Self {
        let d = SgdConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            batch: d.batch,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    #[default]
    Sgd,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub engine: Engine,
    /// Uniform snapshot count used when `flow.snapshot_grid` is empty.
    pub grid_points: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            engine: Engine::Sgd,
            grid_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub alpha_list: Vec<f64>,
    /// Explicit probe times; empty means the stage-0 midpoint plus the
    /// midpoints of the `probe_count` longest later stages.
    pub probe_times: Vec<f64>,
    pub probe_count: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            alpha_list: vec![1e-2, 1e-4, 1e-8],
            probe_times: Vec::new(),
            probe_count: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    /// Write every `stride`-th trajectory snapshot (the last one always).
    pub stride: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Jsonl],
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelSection,
    pub data: DataSection,
    pub init: InitSection,
    pub flow: FlowConfig,
    pub sgd: SgdSection,
    pub simulate: SimulateSection,
    pub stagewise: ScheduleConfig,
    pub compare: CompareSection,
    pub analysis: AnalysisConfig,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            model: ModelSection::default(),
            data: DataSection::default(),
            init: InitSection::default(),
            flow: FlowConfig::default(),
            sgd: SgdSection::default(),
            simulate: SimulateSection::default(),
            stagewise: ScheduleConfig::default(),
            compare: CompareSection::default(),
            analysis: AnalysisConfig::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The attention-head toy problem: `n = 10`, `d = 50`, 1000 samples.
    ToyAppendixA,
    /// `n = 4`, `d = 8`, 200 samples.
    ToySmall,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Preset> {
        match name {
            "toy-appendix-a" => Ok(Preset::ToyAppendixA),
            "toy-small" => Ok(Preset::ToySmall),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected toy-appendix-a or toy-small)"
            ))),
        }
    }

    pub fn config(self) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        match self {
            Preset::ToyAppendixA => {
                c.model = ModelSection {
                    kind: ModelKind::AttentionHead,
                    n: 10,
                    d: 50,
                };
                c.data.num_samples = 1000;
                c.flow.t_end = 6.0;
                // lr = 0.05 oscillates on this problem at α = 0.01
                c.sgd = SgdSection {
                    lr: 0.01,
                    epochs: 300,
                    batch: 100,
                    seed: 0,
                };
            }
            Preset::ToySmall => {
                c.model = ModelSection {
                    kind: ModelKind::AttentionHead,
                    n: 4,
                    d: 8,
                };
                c.data.num_samples = 200;
                c.flow.alpha = 1e-32;
                c.flow.t_end = 14.0;
                c.sgd = SgdSection {
                    lr: 0.01,
                    epochs: 45_000,
                    batch: 100,
                    seed: 0,
                };
                c.output.stride = 10;
            }
        }
        c
    }
}

/// Command-line overrides applied on top of the file or preset.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    /// Preset (or defaults), then the config file, then flag overrides. A file
    /// given together with a preset must be a complete configuration; keys it
    /// omits take the schema defaults, not the preset's.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
        let mut c = match (file, preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                let mut c = Self::from_toml(&text)?;
                if let Some(dir) = path.parent() {
                    if let Some(f) = &c.data.file {
                        if f.is_relative() {
                            c.data.file = Some(dir.join(f));
                        }
                    }
                }
                c
            }
            (None, Some(name)) => Preset::from_name(name)?.config(),
            (None, None) => ExperimentConfig::default(),
        };
        if file.is_some() {
            if let Some(name) = preset {
                Preset::from_name(name)?;
            }
        }
        if let Some(out) = &overrides.out {
            c.output.directory = out.clone();
        }
        if let Some(seed) = overrides.seed {
            c.data.seed = seed;
            c.sgd.seed = seed;
            c.analysis.seed = seed;
        }
        if let Some(alpha) = overrides.alpha {
            c.flow.alpha = alpha;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.model_spec()?;
        self.flow.validate()?;
        self.sgd_config().validate()?;
        self.stagewise.validate()?;
        self.analysis.validate()?;
        if !(self.init.scale > 0.0 && self.init.scale.is_finite()) {
            return Err(Error::Config("init.scale must be positive".into()));
        }
        if self.compare.alpha_list.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Config("compare.alpha_list entries must lie in (0, 1)".into()));
        }
        if self.simulate.grid_points == 0 || self.output.stride == 0 {
            return Err(Error::Config("simulate.grid_points and output.stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.model.kind, self.model.n, self.model.d).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.sgd.lr,
            epochs: self.sgd.epochs,
            batch: self.sgd.batch,
            seed: self.sgd.seed,
            alpha: self.flow.alpha,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let spec = self.model_spec()?;
        match &self.data.file {
            Some(path) => {
                let ds = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    Dataset::read_csv(path, spec, self.data.seed)?
                } else {
                    Dataset::read_raw(path)?
                };
                if ds.spec != spec {
                    return Err(Error::Config(format!(
                        "{} holds a {:?} dataset but the model section describes {:?}",
                        path.display(),
                        ds.spec,
                        spec
                    )));
                }
                Ok(ds)
            }
            None => {
                let cfg = DataConfig {
                    kind: spec.kind,
                    n: spec.n,
                    d: spec.d,
                    num_samples: self.data.num_samples,
                    seed: self.data.seed,
                    teacher_seed: self.data.teacher_seed,
                    teacher_scale: self.data.teacher_scale,
                    label_noise: self.data.label_noise,
                };
                Ok(generate(&cfg)?.0)
            }
        }
    }

    /// `θ̂₀`, before scaling by α.
    pub fn init_direction(&self, p: usize) -> Theta {
        Theta::gaussian(p, self.init.scale, self.init.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Preset::ToySmall.config();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("version = 1\n[flow]\nalpha = 0.1\nbogus = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(ExperimentConfig::from_toml("version = 1\nextra = true\n").is_err());
    }

    #[test]
    fn version_and_alpha_are_validated() {
        let c = ExperimentConfig::from_toml("version = 2\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let o = Overrides {
            alpha: Some(1.5),
            ..Overrides::default()
        };
        assert_eq!(ExperimentConfig::resolve(Some("toy-small"), None, &o).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            out: Some("elsewhere".into()),
            seed: Some(9),
            alpha: Some(1e-3),
        };
        let c = ExperimentConfig::resolve(Some("toy-appendix-a"), None, &o).unwrap();
        assert_eq!((c.data.seed, c.sgd.seed, c.flow.alpha), (9, 9, 1e-3));
        assert_eq!(c.output.directory, PathBuf::from("elsewhere"));
        assert_eq!(c.sgd_config().alpha, 1e-3);
        assert!(Preset::from_name("huge").is_err());
    }
}
