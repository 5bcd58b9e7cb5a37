use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::mlkit::{Arch, Hyperparams};
use crate::schemes::{FederationConfig, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Local,
    Dist,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Local => "local",
            Mode::Dist => "dist",
        })
    }
}

impl FromStr for Mode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Mode::Local),
            "dist" => Ok(Mode::Dist),
            other => Err(ExperimentError::Config(format!("unknown mode `{other}` (expected local or dist)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub scheme: Scheme,
    pub workers: u32,
    pub rounds: u32,
    pub seed: u64,
    pub mode: Mode,
    pub group: Option<String>,
    pub manifest: Option<PathBuf>,
    /// A DSL file replacing the built-in program of the scheme.
    pub program: Option<PathBuf>,
    pub out: PathBuf,
    pub repetitions: u32,
    pub watchdog_secs: u64,
    /// First port of the default local plan.
    pub base_port: u16,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            scheme: Scheme::MasterWorker,
            workers: 2,
            rounds: 20,
            seed: 0,
            mode: Mode::Local,
            group: None,
            manifest: None,
            program: None,
            out: PathBuf::from("out"),
            repetitions: 1,
            watchdog_secs: 60,
            base_port: 9000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub arch: String,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: u32,
    pub epochs_per_round: u32,
    /// Use only the first N training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Evaluate the model at every test stage.
    pub evaluate: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let hp = Hyperparams::default();
        TrainSection {
            arch: Arch::mnist().to_string(),
            learning_rate: hp.learning_rate,
            momentum: hp.momentum,
            batch_size: hp.batch_size,
            epochs_per_round: hp.epochs_per_round,
            train_limit: None,
            test_limit: None,
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding the four MNIST IDX files.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSection {
    pub leaves: u32,
    pub combiners: u32,
    pub frames: u32,
    pub threshold: f32,
    pub height: u32,
    pub width: u32,
    /// One raw frame file per leaf; synthetic frames when empty.
    pub frame_files: Vec<PathBuf>,
}

impl Default for TreeSection {
    fn default() -> Self {
        TreeSection {
            leaves: 2,
            combiners: 1,
            frames: 148,
            threshold: 0.5,
            height: 8,
            width: 8,
            frame_files: Vec::new(),
        }
    }
}

/// User-supplied power readings for the energy-per-FLOP figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    pub mean_power_w: f32,
    pub t_epoch_s: f32,
    /// Images per epoch; defaults to the shard size.
    #[serde(default)]
    pub images: Option<u32>,
    /// Backward FLOPs per image; defaults to twice the forward count.
    #[serde(default)]
    pub flops_backward: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub energy: Option<EnergySection>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub scheme: Option<Scheme>,
    pub workers: Option<u32>,
    pub rounds: Option<u32>,
    pub mode: Option<Mode>,
    pub group: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let e = &mut self.experiment;
        e.manifest.iter_mut().for_each(fix);
        e.program.iter_mut().for_each(fix);
        fix(&mut e.out);
        self.data.dir.iter_mut().for_each(fix);
        self.tree.frame_files.iter_mut().for_each(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        let e = &mut self.experiment;
        if let Some(v) = o.scheme {
            e.scheme = v;
        }
        if let Some(v) = o.workers {
            e.workers = v;
        }
        if let Some(v) = o.rounds {
            e.rounds = v;
        }
        if let Some(v) = o.mode {
            e.mode = v;
        }
        if let Some(v) = &o.group {
            e.group = Some(v.clone());
        }
        if let Some(v) = o.seed {
            e.seed = v;
        }
        if let Some(v) = &o.out {
            e.out = v.clone();
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            epochs_per_round: self.train.epochs_per_round,
            rounds: self.experiment.rounds,
        }
    }

    pub fn arch(&self) -> Result<Arch, ExperimentError> {
        Ok(self.train.arch.parse::<Arch>()?)
    }

    pub fn federation(&self, seed: u64) -> FederationConfig {
        FederationConfig {
            scheme: self.experiment.scheme,
            workers: self.experiment.workers,
            leaves: self.tree.leaves,
            combiners: self.tree.combiners,
            rounds: self.experiment.rounds,
            hyperparams: self.hyperparams(),
            threshold: self.tree.threshold,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let e = &self.experiment;
        if e.repetitions == 0 {
            return Err(ExperimentError::Config("repetitions must be >= 1".into()));
        }
        if e.mode == Mode::Dist {
            if e.manifest.is_none() {
                return Err(ExperimentError::Config("dist mode needs a manifest".into()));
            }
            if e.group.is_none() {
                return Err(ExperimentError::Config("dist mode needs a dgroup name".into()));
            }
        }
        self.arch()?;
        self.federation(e.seed).validate()?;
        if !self.tree.frame_files.is_empty() && self.tree.frame_files.len() != self.tree.leaves as usize {
            return Err(ExperimentError::Config(format!(
                "{} frame files for {} leaves",
                self.tree.frame_files.len(),
                self.tree.leaves
            )));
        }
        Ok(())
    }
}
