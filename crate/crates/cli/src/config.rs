//! Experiment configuration: one TOML file with sections, overridable by flags.

use std::fs;
use std::path::{Path, PathBuf};

use metacount::metatrain::TrainConfig;
use metacount::nn::NetConfig;
use metacount::scenes::SyntheticConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Existing dataset with `train/` and `test/` scene directories. When
    /// unset, `generate` writes a synthetic one under the output directory.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: Vec<usize>,
    /// Fine-tuning steps for the adapting methods.
    pub steps: usize,
    pub trials: usize,
    pub roi: bool,
    /// Scene ids for `curves`; empty means every test scene.
    pub curve_scenes: Vec<u32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: vec![1, 5],
            steps: 10,
            trials: 5,
            roi: false,
            curve_scenes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default") }
    }
}

/// Everything a run needs. `seed` is the single source of randomness: it
/// replaces the seeds of the model and train sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<Vec<usize>>,
    pub steps: Option<usize>,
    pub trials: Option<usize>,
    pub roi: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message().trim())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(k) = &o.k {
            self.eval.k = k.clone();
        }
        if let Some(s) = o.steps {
            self.eval.steps = s;
        }
        if let Some(t) = o.trials {
            self.eval.trials = t;
        }
        if let Some(r) = o.roi {
            self.eval.roi = r;
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Checks every section; nothing is touched on disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: metacount::Error| CliError::Usage(e.to_string());
        let max_k = self.eval.k.iter().copied().max().unwrap_or(0).max(self.train.k);
        if self.dataset.path.is_none() {
            self.dataset.synthetic.validate(max_k).map_err(usage)?;
            let s = self.model.downsample();
            let syn = &self.dataset.synthetic;
            if s == 0 || syn.height % s != 0 || syn.width % s != 0 {
                return Err(CliError::Usage(format!(
                    "image extent {}x{} must be divisible by the network's downsample factor {s}",
                    syn.height, syn.width
                )));
            }
        } else if !(self.dataset.synthetic.gt_sigma > 0.0) {
            return Err(CliError::Usage("dataset.synthetic.gt_sigma must be positive".into()));
        }
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(CliError::Usage("eval.k must list shot counts >= 1".into()));
        }
        if self.eval.trials == 0 {
            return Err(CliError::Usage("eval.trials must be >= 1".into()));
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(CliError::Usage("output.dir must not be empty".into()));
        }
        Ok(())
    }
}
