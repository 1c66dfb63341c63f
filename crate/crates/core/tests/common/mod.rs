#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use cotrain_core::config::RunConfig;
use cotrain_core::datagen::{generate_split, DomainSpec};
use cotrain_core::pipeline::{Pipeline, PipelineInputs};
use cotrain_core::trainer::{ToyTrainer, TrainerSession};
use cotrain_core::BranchTag;

/// Source, target and eval splits under `root/data`, seeded like `toygen`.
pub fn toy_data(root: &Path, seed: u64, source: usize, target: usize, eval: usize) -> RunConfig {
    let data = root.join("data");
    let mut tspec = DomainSpec::default_target();
    generate_split(&DomainSpec::default_source(), source, seed, true, &data.join("source")).unwrap();
    generate_split(&tspec, target, seed.wrapping_add(1), false, &data.join("target")).unwrap();
    tspec.name = "eval".into();
    generate_split(&tspec, eval, seed.wrapping_add(2), true, &data.join("eval")).unwrap();
    let mut cfg = RunConfig {
        name: "toy".into(),
        seed,
        ..RunConfig::default()
    };
    cfg.paths.source = Some(data.join("source/manifest.json"));
    cfg.paths.target = Some(data.join("target/manifest.json"));
    cfg.paths.eval = Some(data.join("eval/manifest.json"));
    cfg
}

/// The scaled-down schedule: N=60, n=20, K_m=1, K_M=5, K=3.
pub fn scaled(mut cfg: RunConfig) -> RunConfig {
    cfg.candidates = 60;
    cfg.keep = 20;
    cfg.self_training.k_min = 1;
    cfg.self_training.k_max = 5;
    cfg.co_training.cycles = 3;
    cfg
}

/// A tiny schedule for tests that only care about plumbing.
pub fn tiny(mut cfg: RunConfig) -> RunConfig {
    cfg.candidates = 12;
    cfg.keep = 6;
    cfg.self_training.k_min = 0;
    cfg.self_training.k_max = 1;
    cfg.co_training.cycles = 2;
    cfg.trainer.finetune_batches = 30;
    cfg.trainer.final_batches = 30;
    cfg
}

pub fn session(cfg: &RunConfig, run_dir: &Path, branch: BranchTag) -> TrainerSession {
    let trainer = ToyTrainer::new(run_dir.join("models"), 8).with_temperature(cfg.trainer.temperature);
    TrainerSession::new(branch.as_str(), branch, Box::new(trainer))
}

pub fn sessions(cfg: &RunConfig, run_dir: &Path) -> (TrainerSession, TrainerSession) {
    (
        session(cfg, run_dir, BranchTag::Branch1),
        session(cfg, run_dir, BranchTag::Branch2),
    )
}

pub fn inputs(cfg: &RunConfig, run_dir: &Path) -> PipelineInputs {
    cfg.prepare_inputs(run_dir).unwrap()
}

pub fn pipeline(cfg: &RunConfig, run_dir: &Path) -> Pipeline {
    Pipeline::new(run_dir, cfg.pipeline_params(), inputs(cfg, run_dir)).unwrap()
}

/// Every file below `root` with its bytes, by relative path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
