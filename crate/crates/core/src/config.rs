//! Run configuration, keyed by the method's hyper-parameter symbols.
//!
//! ```toml
//! name = "gs-c"
//! seed = 0
//! N = 500
//! n = 100
//! "Δp" = 0.05
//! C_m = 0.5
//! C_M = 0.9
//! N_MB = 4
//! p_MB = 0.75
//! p_CM = 0.5
//!
//! [self_training]
//! p_m = 0.5
//! p_M = 0.6
//! K_m = 1
//! K_M = 10
//!
//! [co_training]
//! p_m = 0.5
//! p_M = 0.6
//! K = 5
//! w = 1
//! "λ" = 0.8
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{CollabSource, PipelineInputs, PipelineParams};
use crate::preprocess::{align_to_target, class_balance_weights, DEFAULT_STATS_SAMPLE};
use crate::trainer::TrainerConfig;
use crate::types::{CoTrainParams, CurriculumParams, FinalSelector, MixParams, SelfTrainParams};

/// Overrides `trainer.program`.
pub const ENV_TRAINER: &str = "COTRAIN_TRAINER";
/// Overrides the run root.
pub const ENV_RUN_ROOT: &str = "COTRAIN_RUN_ROOT";

pub const PRESETS: [&str; 4] = ["gs-c", "sia-c", "g-c", "gs-b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTrainingSection {
    pub p_m: f64,
    #[serde(rename = "p_M")]
    pub p_max: f64,
    #[serde(rename = "K_m")]
    pub k_min: u32,
    #[serde(rename = "K_M")]
    pub k_max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoTrainingSection {
    pub p_m: f64,
    #[serde(rename = "p_M")]
    pub p_max: f64,
    #[serde(rename = "K")]
    pub cycles: u32,
    pub w: FinalSelector,
    #[serde(rename = "λ")]
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Labeled source manifest (`D^L`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Unlabeled target manifest (`D^U`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Labeled target manifest used only for metric snapshots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Toy,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub kind: TrainerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<PathBuf>,
    #[serde(default)]
    pub args: Vec<String>,
    pub timeout_secs: u64,
    /// Softmax temperature of the toy trainer.
    pub temperature: f64,
    pub finetune_batches: usize,
    pub final_batches: usize,
    #[serde(default)]
    pub passthrough: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub candidates: usize,
    #[serde(rename = "n")]
    pub keep: usize,
    #[serde(rename = "Δp")]
    pub p_step: f64,
    #[serde(rename = "C_m")]
    pub c_min: f64,
    #[serde(rename = "C_M")]
    pub c_max: f64,
    #[serde(rename = "N_MB")]
    pub n_mb: usize,
    #[serde(rename = "p_MB")]
    pub p_mb: f64,
    #[serde(rename = "p_CM")]
    pub p_cm: f64,
    pub collab_source: CollabSource,
    /// Class-balanced source sampling.
    pub cb: bool,
    /// LAB alignment of the source to the target.
    pub lab: bool,
    pub self_training: SelfTrainingSection,
    pub co_training: CoTrainingSection,
    #[serde(default)]
    pub paths: PathsSection,
    pub trainer: TrainerSection,
}

impl Default for RunConfig {
    /// The `gs-c` preset: S or G+S to C or M.
    fn default() -> Self {
        RunConfig {
            name: "gs-c".into(),
            seed: 0,
            candidates: 500,
            keep: 100,
            p_step: 0.05,
            c_min: 0.5,
            c_max: 0.9,
            n_mb: 4,
            p_mb: 0.75,
            p_cm: 0.5,
            collab_source: CollabSource::Cross,
            cb: false,
            lab: true,
            self_training: SelfTrainingSection {
                p_m: 0.5,
                p_max: 0.6,
                k_min: 1,
                k_max: 10,
            },
            co_training: CoTrainingSection {
                p_m: 0.5,
                p_max: 0.6,
                cycles: 5,
                w: FinalSelector::Branch1,
                lambda: 0.8,
            },
            paths: PathsSection::default(),
            trainer: TrainerSection {
                kind: TrainerKind::Toy,
                program: None,
                args: Vec::new(),
                timeout_secs: 3600,
                temperature: crate::trainer::ToyModelState::DEFAULT_TEMPERATURE,
                finetune_batches: 400,
                final_batches: 400,
                passthrough: TrainerConfig::default_passthrough(),
            },
        }
    }
}

impl RunConfig {
    /// Shipped presets: `gs-c` (default; S or G+S to C or M), `sia-c`, `g-c`
    /// (with class-balanced sampling) and `gs-b`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            name: name.to_string(),
            ..RunConfig::default()
        };
        match name {
            "gs-c" | "sia-c" => {}
            "g-c" => {
                cfg.cb = true;
                cfg.self_training.p_m = 0.3;
                cfg.self_training.p_max = 0.5;
            }
            "gs-b" => {
                cfg.n_mb = 2;
                cfg.p_mb = 0.5;
                cfg.self_training.p_m = 0.3;
                cfg.self_training.p_max = 0.5;
                let pt = &mut cfg.trainer.passthrough;
                pt.insert("baseline_iterations".into(), 120000.into());
                pt.insert("cycle_iterations".into(), 16000.into());
                pt.insert("crop".into(), serde_json::json!([1280, 720]));
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")),
                ))
            }
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            Error::config(
                span.map_or("<config>".to_string(), |line| format!("line {line}")),
                e.message().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Reads and validates a file. Relative manifest and program paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut self.paths.source);
        resolve(&mut self.paths.target);
        resolve(&mut self.paths.eval);
        if self.trainer.program.as_ref().is_some_and(|p| p.components().count() > 1) {
            resolve(&mut self.trainer.program);
        }
    }

    /// Applies [`ENV_TRAINER`]; returns the run root from [`ENV_RUN_ROOT`]
    /// when set.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Option<PathBuf> {
        if let Some(program) = lookup(ENV_TRAINER).filter(|s| !s.is_empty()) {
            self.trainer.program = Some(program.into());
            self.trainer.kind = TrainerKind::External;
        }
        lookup(ENV_RUN_ROOT).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    fn curriculum(&self, p_min: f64, p_max: f64) -> CurriculumParams {
        CurriculumParams {
            p_min,
            p_max,
            p_step: self.p_step,
            c_min: self.c_min as f32,
            c_max: self.c_max as f32,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.n_mb,
            seed: self.seed,
            finetune_batches: self.trainer.finetune_batches,
            final_batches: self.trainer.final_batches,
            passthrough: self.trainer.passthrough.clone(),
        }
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            trainer: self.trainer_config(),
            self_training: SelfTrainParams {
                curriculum: self.curriculum(self.self_training.p_m, self.self_training.p_max),
                candidates: self.candidates,
                keep: self.keep,
                k_min: self.self_training.k_min,
                k_max: self.self_training.k_max,
                mix: MixParams {
                    p_mb: self.p_mb,
                    p_cm: self.p_cm,
                },
            },
            co_training: CoTrainParams {
                curriculum: self.curriculum(self.co_training.p_m, self.co_training.p_max),
                cycles: self.co_training.cycles,
                selector: self.co_training.w,
                lambda: self.co_training.lambda,
            },
            collab_source: self.collab_source,
            seed: self.seed,
        }
    }

    fn manifest(&self, key: &str, path: Option<&PathBuf>) -> Result<PathBuf> {
        path.cloned()
            .ok_or_else(|| Error::config(format!("paths.{key}"), "manifest path is not set"))
    }

    /// Loads the configured manifests. With `lab` the source is aligned to
    /// the target under `run_dir/lab` (reused when present); with `cb` the
    /// source entries carry class-balance weights.
    pub fn prepare_inputs(&self, run_dir: &Path) -> Result<PipelineInputs> {
        let mut source = io::load_manifest(&self.manifest("source", self.paths.source.as_ref())?)?;
        let target = io::load_manifest(&self.manifest("target", self.paths.target.as_ref())?)?;
        let eval = match &self.paths.eval {
            Some(p) => Some(io::load_manifest(p)?),
            None => None,
        };
        if self.lab {
            source = align_to_target(&source, &target, DEFAULT_STATS_SAMPLE, self.seed, &run_dir.join("lab"))?.0;
        }
        let sampling = if self.cb {
            let w = class_balance_weights(&source)?;
            for e in &mut source.entries {
                e.sampling_weight = w.get(&e.image_id);
            }
            Some(w)
        } else {
            None
        };
        Ok(PipelineInputs {
            source,
            target,
            eval,
            sampling,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::config("name", "must be a plain directory name"));
        }
        for (key, v) in [("C_m", self.c_min), ("C_M", self.c_max)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        self.pipeline_params().validate()?;
        let t = &self.trainer;
        if !(t.temperature > 0.0) {
            return Err(Error::config("trainer.temperature", "must be positive"));
        }
        if t.timeout_secs == 0 {
            return Err(Error::config("trainer.timeout_secs", "must be positive"));
        }
        if t.finetune_batches == 0 || t.final_batches == 0 {
            return Err(Error::config("trainer.finetune_batches", "batch counts must be positive"));
        }
        if t.kind == TrainerKind::External && t.program.is_none() {
            return Err(Error::config("trainer.program", format!("external trainer needs a program (or {ENV_TRAINER})")));
        }
        Ok(())
    }
}
