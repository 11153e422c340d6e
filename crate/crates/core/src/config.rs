//! Run configuration, loaded from TOML with dotted section keys.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auxcon::{MimicConfig, DEFAULT_EVALUATION, DEFAULT_SUPERVISION};
use crate::error::{Error, Result};
use crate::micronet::{BackboneWidths, TrainConfig};
use crate::mulmem::{StandardizeMode, DEFAULT_CAPACITY, DEFAULT_MOMENTUM, DEFAULT_THRESHOLD};
use crate::scenario::ScenarioSpec;
use crate::tensorgrid::LayerId;

/// Seed of the named sub-stream `name` of run seed `seed`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub teacher_widths: [usize; 6],
    pub student_widths: [usize; 6],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let teacher = [8, 12, 16, 16, 16, 16];
        ModelConfig {
            teacher_widths: teacher,
            student_widths: BackboneWidths(teacher).halved().0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub layers: Vec<LayerId>,
    pub threshold: f64,
    pub capacity: usize,
    pub momentum: f64,
    /// Momentum-update passes over the training set after initialization.
    pub passes: usize,
    pub standardize: StandardizeMode,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            layers: vec![LayerId::C4, LayerId::C5, LayerId::LH],
            threshold: DEFAULT_THRESHOLD,
            capacity: DEFAULT_CAPACITY,
            momentum: DEFAULT_MOMENTUM,
            passes: 1,
            standardize: StandardizeMode::PerClass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub supervision: Vec<LayerId>,
    pub evaluation: Vec<LayerId>,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            supervision: DEFAULT_SUPERVISION.to_vec(),
            evaluation: DEFAULT_EVALUATION.to_vec(),
        }
    }
}

/// Artifact locations, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: String,
    pub checkpoints: String,
    pub banks: String,
    pub dumps: String,
    pub reports: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            banks: "banks".into(),
            dumps: "dumps".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenario: ScenarioSpec,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub memory: MemoryConfig,
    pub aux: AuxConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            scenario: ScenarioSpec::default(),
            model: ModelConfig::default(),
            teacher: TrainConfig {
                learning_rate: 0.1,
                batch_size: 4,
                epochs: 40,
                seed: 0,
            },
            student: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 1,
                epochs: 50,
                seed: 0,
            },
            memory: MemoryConfig::default(),
            aux: AuxConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn check_unique(name: &str, layers: &[LayerId]) -> Result<()> {
    let set: BTreeSet<_> = layers.iter().collect();
    if set.len() != layers.len() {
        return Err(Error::config(format!("{name} lists a layer twice")));
    }
    if layers.is_empty() {
        return Err(Error::config(format!("{name} is empty")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization; embedded in every report.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        for (name, w) in [("model.teacher_widths", self.model.teacher_widths), ("model.student_widths", self.model.student_widths)] {
            if w.contains(&0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let m = &self.memory;
        check_unique("memory.layers", &m.layers)?;
        check_unique("aux.supervision", &self.aux.supervision)?;
        check_unique("aux.evaluation", &self.aux.evaluation)?;
        if !(-1.0..=1.0).contains(&m.threshold) {
            return Err(Error::config(format!("memory.threshold {} outside [-1, 1]", m.threshold)));
        }
        if !(0.0..=1.0).contains(&m.momentum) {
            return Err(Error::config(format!("memory.momentum {} outside [0, 1]", m.momentum)));
        }
        if m.capacity == 0 {
            return Err(Error::config("memory.capacity must be >= 1"));
        }
        self.mimic().validate()
    }

    /// Scenario with its seed drawn from the run seed.
    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            seed: stream_seed(self.seed, "scenario"),
            ..self.scenario.clone()
        }
    }

    pub fn teacher_train(&self) -> TrainConfig {
        TrainConfig {
            seed: stream_seed(self.seed, "teacher.shuffle"),
            ..self.teacher
        }
    }

    pub fn mimic(&self) -> MimicConfig {
        MimicConfig {
            supervision: self.aux.supervision.clone(),
            evaluation: self.aux.evaluation.clone(),
            train: TrainConfig {
                seed: stream_seed(self.seed, "student.shuffle"),
                ..self.student
            },
        }
    }

    pub fn teacher_init_seed(&self) -> u64 {
        stream_seed(self.seed, "teacher.init")
    }

    pub fn student_init_seed(&self) -> u64 {
        stream_seed(self.seed, "student.init")
    }

    pub fn memory_init_seed(&self) -> u64 {
        stream_seed(self.seed, "memory.init")
    }
}
