//! Run configuration: one flat `section.key = value` file covering every stage.
//!
//! The file is TOML restricted to dotted keys, so `rl.epochs = 80` and a
//! `[rl]` table are equivalent. Unknown sections and keys are rejected.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, PretrainConfig, SamplerConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::oracle::{synthetic_tasks, FoldingOracle, HelixOracle, HelixOracleParams, SubprocessOracle, Task, MIN_TASK_LENGTH};
use crate::rewards::RewardConfig;
use crate::rl::RlConfig;
use crate::struct_io::parse_pdb_backbone_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    None,
    Helix,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Shell command with `{fasta}` and `{out_pdb}` placeholders.
    pub command: String,
    pub timeout_s: f64,
    pub pool_size: usize,
    /// Parent for per-call temp dirs; empty means the system temp dir.
    pub workdir: String,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Helix,
            command: String::new(),
            timeout_s: 600.0,
            pool_size: 4,
            workdir: String::new(),
        }
    }
}

/// Where design targets come from: PDB files if any are listed, otherwise synthetic helix tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_tasks: usize,
    pub length: usize,
    pub seed: u64,
    pub pdbs: Vec<String>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            length: 20,
            seed: 0,
            pdbs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub pretrain: PretrainConfig,
    pub rl: RlConfig,
    pub reward: RewardConfig,
    pub encoder: EncoderConfig,
    pub oracle: OracleConfig,
    pub tasks: TaskConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse {
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.sampler.validate()?;
        self.pretrain.validate()?;
        self.rl.validate()?;
        self.reward.validate()?;
        self.encoder.validate()?;
        if self.tasks.pdbs.is_empty() {
            if self.tasks.n_tasks == 0 {
                return Err(Error::Config("tasks.n_tasks must be positive".into()));
            }
            if self.tasks.length < MIN_TASK_LENGTH {
                return Err(Error::Config(format!("tasks.length must be at least {MIN_TASK_LENGTH}")));
            }
        }
        let o = &self.oracle;
        if !(o.timeout_s > 0.0 && o.timeout_s.is_finite()) || o.pool_size == 0 {
            return Err(Error::Config("oracle.timeout_s and oracle.pool_size must be positive".into()));
        }
        if o.kind == OracleKind::Subprocess && o.command.is_empty() {
            return Err(Error::Config("oracle.kind = \"subprocess\" needs oracle.command".into()));
        }
        Ok(())
    }

    /// Every setting as `section.key = value`, one per line, in declaration order.
    pub fn to_flat(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                match body {
                    toml::Value::Table(keys) => {
                        for (key, v) in keys {
                            out.push_str(&format!("{section}.{key} = {v}\n"));
                        }
                    }
                    other => out.push_str(&format!("{section} = {other}\n")),
                }
            }
        }
        out
    }

    /// The configured oracle, or `None` when `oracle.kind = "none"`.
    pub fn build_oracle(&self) -> Result<Option<Box<dyn FoldingOracle>>> {
        Ok(match self.oracle.kind {
            OracleKind::None => None,
            OracleKind::Helix => Some(Box::new(HelixOracle::default())),
            OracleKind::Subprocess => {
                let workdir = (!self.oracle.workdir.is_empty()).then(|| PathBuf::from(&self.oracle.workdir));
                Some(Box::new(SubprocessOracle::new(
                    self.oracle.command.clone(),
                    Duration::from_secs_f64(self.oracle.timeout_s),
                    workdir,
                    self.oracle.pool_size,
                )?))
            }
        })
    }

    /// Targets with native sequences: parsed from `tasks.pdbs`, or synthetic helix tasks.
    pub fn build_tasks(&self) -> Result<Vec<Task>> {
        if self.tasks.pdbs.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.tasks.seed);
            return synthetic_tasks(&HelixOracleParams::default(), self.tasks.n_tasks, self.tasks.length, &mut rng);
        }
        self.tasks
            .pdbs
            .iter()
            .map(|path| {
                let text = std::fs::read_to_string(path)?;
                let parsed = parse_pdb_backbone_from(&text, path)?;
                let id = Path::new(path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.clone());
                Ok(Task {
                    id,
                    native: parsed.structure.sequence(),
                    target: parsed.structure,
                })
            })
            .collect()
    }
}
