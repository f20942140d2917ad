//! Run configuration: one TOML document reaching every tunable.
//!
//! ```toml
//! seed = 42
//!
//! [model]          # architecture; [model.block] holds layers/heads/widths/fusion
//! [train]          # schedule, budgets, learning rates, optimizer
//! [corpus]         # n_speakers, n_texts, seed
//! [eval]           # n_requests, cfg_scale, num_steps, seed
//! [paths]          # corpus, out_dir (relative to the config file)
//! [[ablation.variants]]  # name, mode, model
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BlockConfig, Fusion, ModelConfig};
use crate::error::{CastError, Result};
use crate::eval::{EvalConfig, Variant};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub n_texts: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_speakers: 20, n_texts: 50, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { corpus: "corpus.castds".into(), out_dir: "runs".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let arm = |name: &str, fusion, mode| Variant {
            name: name.into(),
            model: ModelConfig { block: BlockConfig { fusion, ..BlockConfig::default() }, ..ModelConfig::default() },
            mode,
        };
        Self {
            variants: vec![
                arm("CA", Fusion::Ca, TrainMode::Staged),
                arm("SA", Fusion::Sa, TrainMode::Staged),
                arm("SACA", Fusion::Saca, TrainMode::Staged),
                arm("CA_TV", Fusion::CaTv, TrainMode::Staged),
                arm("CA-BASE", Fusion::Ca, TrainMode::Base),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization and training seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn collect(errs: &mut Vec<String>, section: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(CastError::Validation(v)) => errs.extend(v.into_iter().map(|e| format!("{section}: {e}"))),
        Err(e) => errs.push(format!("{section}: {e}")),
    }
}

fn parent_exists(p: &Path) -> bool {
    match p.parent() {
        None => false,
        Some(d) if d.as_os_str().is_empty() => true,
        Some(d) => d.is_dir(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CastError::Validation(vec![e.message().to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses `path` and makes relative paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.paths.corpus, &mut self.paths.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Checks every section and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        collect(&mut errs, "model", self.model.validate());
        collect(&mut errs, "train", self.train.validate());
        collect(&mut errs, "eval", self.eval.validate());
        if self.corpus.n_speakers == 0 {
            errs.push("corpus: n_speakers must be positive".into());
        }
        if self.corpus.n_texts == 0 {
            errs.push("corpus: n_texts must be positive".into());
        }
        if self.paths.corpus.as_os_str().is_empty() || !parent_exists(&self.paths.corpus) {
            errs.push(format!("paths: corpus directory of {} does not exist", self.paths.corpus.display()));
        }
        if self.paths.out_dir.as_os_str().is_empty()
            || !(self.paths.out_dir.is_dir() || parent_exists(&self.paths.out_dir))
        {
            errs.push(format!("paths: out_dir {} is not creatable", self.paths.out_dir.display()));
        }
        if self.ablation.variants.len() < 2 {
            errs.push("ablation: at least two variants are required".into());
        }
        for v in &self.ablation.variants {
            collect(&mut errs, &format!("ablation.{}", v.name), v.model.validate());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CastError::Validation(errs))
        }
    }
}
