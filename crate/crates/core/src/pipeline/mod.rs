//! The orchestrators: the self-training stage, the co-training loop and the
//! final training, persisted cycle by cycle under a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! params.json                       resolved parameters and seed
//! models/                           weights owned by the toy trainer
//! baseline/record.json
//! selftrain/cycle_<k>/{pseudo/, record.json}
//! cycle_<k>/{branch1,branch2}/pseudo/, cycle_<k>/record.json
//! final/{pseudo/, record.json}
//! ```
//!
//! A step whose `record.json` exists is loaded instead of recomputed, so an
//! interrupted run resumes where it stopped. Records are written last.

mod collab;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use collab::{
    class_image_stats, collaboration_exchange, dynamic_threshold, ensemble_confidence, sort_rank, ClassImageIndex,
    CollabSource,
};

use crate::error::{Error, Result};
use crate::io::{load_label_map, load_pseudo_set, read_json, save_pseudo_set, write_json};
use crate::labeling::{fuse, combine_void, pseudolabel_stacks, run_pseudolabel, select_top_n, PseudoLabelSet};
use crate::metrics::{evaluate_pairs, MetricReport};
use crate::mixing::{compose_batches, MixSources, SampleOrigin, SourcePool, TargetImages};
use crate::preprocess::SamplingWeights;
use crate::trainer::{finetune, TrainerConfig, TrainerSession};
use crate::types::{
    BranchTag, CoTrainParams, DatasetSplit, FinalSelector, ModelHandle, PseudoLabeledImage, SelfTrainParams,
    SplitKind, ThresholdVector,
};

pub const RECORD: &str = "record.json";
pub const PARAMS: &str = "params.json";

/// Everything that shapes a run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub trainer: TrainerConfig,
    pub self_training: SelfTrainParams,
    pub co_training: CoTrainParams,
    pub collab_source: CollabSource,
    pub seed: u64,
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.self_training.validate()?;
        self.co_training.validate()
    }
}

/// `D^L`, `D^U` and the optional held-out split used for metric snapshots.
#[derive(Clone, Debug)]
pub struct PipelineInputs {
    pub source: DatasetSplit,
    pub target: DatasetSplit,
    pub eval: Option<DatasetSplit>,
    /// Class-balanced sampling of source images.
    pub sampling: Option<SamplingWeights>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    SelfTraining,
    CoTraining,
    Final,
}

impl Stage {
    fn id(self) -> u64 {
        match self {
            Stage::Baseline => 0,
            Stage::SelfTraining => 1,
            Stage::CoTraining => 2,
            Stage::Final => 3,
        }
    }
}

/// Where a run stops with [`Error::Interrupted`], after persisting the cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopPoint {
    pub stage: Stage,
    pub cycle: u32,
}

/// One executed or resumed step, in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub stage: Stage,
    pub cycle: u32,
    pub step: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub branch: BranchTag,
    pub thresholds: ThresholdVector,
    /// Images that entered the branch's set this cycle.
    pub selected: Vec<String>,
    pub fused_size: usize,
    pub model: ModelHandle,
    /// mIoU in percent on the eval split, when one is configured.
    pub eval_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub stage: Stage,
    pub cycle: u32,
    pub candidates: Vec<String>,
    pub branches: Vec<BranchRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub stage: Stage,
    pub model: ModelHandle,
    pub eval_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_labeled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<ThresholdVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainOutcome {
    pub baseline: ModelHandle,
    pub w_k_min: ModelHandle,
    pub w_k_max: ModelHandle,
    pub cycles: Vec<CycleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoTrainOutcome {
    pub self_training: SelfTrainOutcome,
    pub branch1: ModelHandle,
    pub branch2: ModelHandle,
    pub cycles: Vec<CycleRecord>,
    pub final_record: ModelRecord,
}

/// Seed of the stream used by `stage` for `purpose` in cycle `cycle` on
/// lane `lane`.
pub fn derive_seed(seed: u64, stage: Stage, purpose: u64, cycle: u32, lane: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.id() << 48) | ((purpose & 0xff) << 40) | ((lane & 0xff) << 32) | cycle as u64);
    rng.random()
}

const DRAW: u64 = 1;
const BATCHES: u64 = 2;

/// Seeded draw of `n` images without replacement, kept in split order.
pub fn draw_candidates(split: &DatasetSplit, n: usize, seed: u64) -> Result<DatasetSplit> {
    if n > split.len() {
        return Err(Error::config("N", format!("{n} candidates requested from {} images", split.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, split.len(), n).into_vec();
    indices.sort_unstable();
    Ok(split.subset(&indices))
}

/// Predicts `eval` with `model` and scores the argmax maps.
pub fn evaluate_model(session: &TrainerSession, model: &ModelHandle, eval: &DatasetSplit) -> Result<MetricReport> {
    let stacks = session.predict(model, &eval.entries)?;
    let mut pairs = Vec::with_capacity(eval.len());
    for (stack, entry) in stacks.iter().zip(&eval.entries) {
        let path = entry
            .label_path
            .as_ref()
            .ok_or_else(|| Error::data(&entry.image_path, "eval entry without label"))?;
        pairs.push((stack.argmax_map(), load_label_map(path)?));
    }
    let cm = evaluate_pairs(pairs.iter().map(|(p, g)| (p, g)), &eval.label_space)?;
    MetricReport::new(&cm, &eval.label_space, eval.label_space.eval_subset.clone())
}

fn run_pair<A: Send, B: Send>(
    parallel: bool,
    a: impl FnOnce() -> Result<A> + Send,
    b: impl FnOnce() -> Result<B> + Send,
) -> Result<(A, B)> {
    if !parallel {
        return Ok((a()?, b()?));
    }
    std::thread::scope(|s| {
        let hb = s.spawn(b);
        let ra = a();
        let rb = hb.join().unwrap_or_else(|e| std::panic::resume_unwind(e));
        Ok((ra?, rb?))
    })
}

fn ids(images: &[PseudoLabeledImage]) -> Vec<String> {
    images.iter().map(|i| i.image_id().to_string()).collect()
}

/// Holds the loaded data and drives the stages against trainer sessions.
pub struct Pipeline {
    run_dir: PathBuf,
    params: PipelineParams,
    inputs: PipelineInputs,
    pool: SourcePool,
    target_images: TargetImages,
    stop_after: Option<StopPoint>,
    parallel: bool,
    trace: Vec<TraceEvent>,
}

impl Pipeline {
    /// Loads the data and claims `run_dir`. A run directory created with
    /// different parameters is refused.
    pub fn new(run_dir: impl Into<PathBuf>, params: PipelineParams, inputs: PipelineInputs) -> Result<Self> {
        params.validate()?;
        if inputs.source.kind != SplitKind::Labeled {
            return Err(Error::Invalid("source split must be labeled".into()));
        }
        if inputs.target.is_empty() {
            return Err(Error::Invalid("target split is empty".into()));
        }
        if inputs.source.label_space.num_classes() != inputs.target.label_space.num_classes() {
            return Err(Error::Invalid("source and target label spaces differ".into()));
        }
        let target = inputs.target.as_unlabeled();
        let max_n = params.self_training.candidates;
        if max_n > target.len() {
            return Err(Error::config("N", format!("N = {max_n} exceeds the {} target images", target.len())));
        }
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir)?;
        let params_path = run_dir.join(PARAMS);
        if params_path.exists() {
            let stored: PipelineParams = read_json(&params_path)?;
            if stored != params {
                return Err(Error::config(
                    "run_dir",
                    format!("{} was created with different parameters", run_dir.display()),
                ));
            }
        } else {
            write_json(&params_path, &params)?;
        }
        let mut pool = SourcePool::load(&inputs.source)?;
        if let Some(w) = &inputs.sampling {
            pool = pool.with_weights(w)?;
        }
        let target_images = TargetImages::load(&target)?;
        Ok(Pipeline {
            run_dir,
            params,
            inputs: PipelineInputs { target, ..inputs },
            pool,
            target_images,
            stop_after: None,
            parallel: true,
            trace: Vec::new(),
        })
    }

    pub fn with_stop_after(mut self, stop: StopPoint) -> Self {
        self.stop_after = Some(stop);
        self
    }

    /// Runs the two branches of a co-training cycle one after the other.
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn params(&self) -> &PipelineParams {
        &self.params
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    fn event(&mut self, stage: Stage, cycle: u32, step: &'static str) {
        log::debug!("{stage:?} cycle {cycle}: {step}");
        self.trace.push(TraceEvent { stage, cycle, step });
    }

    fn check_stop(&self, stage: Stage, cycle: u32) -> Result<()> {
        if self.stop_after == Some(StopPoint { stage, cycle }) {
            return Err(Error::Interrupted(format!("{stage:?} cycle {cycle}")));
        }
        Ok(())
    }

    fn snapshot(&self, session: &TrainerSession, model: &ModelHandle) -> Result<Option<f64>> {
        match &self.inputs.eval {
            Some(eval) => Ok(Some(evaluate_model(session, model, eval)?.miou * 100.0)),
            None => Ok(None),
        }
    }

    fn train_on(
        &self,
        session: &TrainerSession,
        base: &ModelHandle,
        set: &PseudoLabelSet,
        vct: &ThresholdVector,
        seed: u64,
        output: &str,
    ) -> Result<ModelHandle> {
        let pseudo: Vec<&PseudoLabeledImage> = set.iter().collect();
        let sources = MixSources {
            source: &self.pool,
            pseudo: &pseudo,
            target_images: &self.target_images,
            vct,
        };
        let mix = self.params.self_training.mix;
        finetune(session, base, &self.params.trainer, sources, &mix, true, seed, output)
    }

    /// `W_0`: the source-only model.
    pub fn baseline(&mut self, session: &TrainerSession) -> Result<ModelHandle> {
        let path = self.run_dir.join("baseline").join(RECORD);
        if path.exists() {
            self.event(Stage::Baseline, 0, "resume");
            let record: ModelRecord = read_json(&path)?;
            return Ok(record.model);
        }
        self.event(Stage::Baseline, 0, "train");
        let model = session.baseline_train(&self.params.trainer, &self.inputs.source, "baseline")?;
        let record = ModelRecord {
            stage: Stage::Baseline,
            eval_miou: self.snapshot(session, &model)?,
            model,
            pseudo_labeled: None,
            thresholds: None,
        };
        write_json(&path, &record)?;
        Ok(record.model)
    }

    /// Self-training cycles `k = 0..=K_M`, returning `W_{K_m}` and `W_{K_M}`.
    pub fn self_training_stage(&mut self, session: &TrainerSession) -> Result<SelfTrainOutcome> {
        let w0 = self.baseline(session)?;
        let st = self.params.self_training;
        let mut fused = PseudoLabelSet::new();
        let mut current = w0.clone();
        let mut cycles = Vec::new();
        let (mut w_k_min, mut w_k_max) = (None, None);
        for k in 0..=st.k_max {
            let dir = self.run_dir.join("selftrain").join(format!("cycle_{k}"));
            let record_path = dir.join(RECORD);
            let record = if record_path.exists() {
                self.event(Stage::SelfTraining, k, "resume");
                fused = load_pseudo_set(&dir.join("pseudo"))?.0;
                read_json::<CycleRecord>(&record_path)?
            } else {
                let seed = self.params.seed;
                let candidates = draw_candidates(
                    &self.inputs.target,
                    st.candidates,
                    derive_seed(seed, Stage::SelfTraining, DRAW, k, 0),
                )?;
                self.event(Stage::SelfTraining, k, "run");
                let (labeled, vct) = run_pseudolabel(session, &current, &candidates, k, &st.curriculum)?;
                self.event(Stage::SelfTraining, k, "select");
                let top = select_top_n(labeled, st.keep);
                let selected = ids(&top);
                self.event(Stage::SelfTraining, k, "fuse");
                fused = fuse(&fused, top);
                self.event(Stage::SelfTraining, k, "train");
                let model = self.train_on(
                    session,
                    &w0,
                    &fused,
                    &vct,
                    derive_seed(seed, Stage::SelfTraining, BATCHES, k, 0),
                    &format!("selftrain_c{k}"),
                )?;
                save_pseudo_set(&dir.join("pseudo"), &fused, Some(&vct))?;
                let record = CycleRecord {
                    stage: Stage::SelfTraining,
                    cycle: k,
                    candidates: candidates.entries.iter().map(|e| e.image_id.clone()).collect(),
                    branches: vec![BranchRecord {
                        branch: model.branch,
                        thresholds: vct,
                        selected,
                        fused_size: fused.len(),
                        eval_miou: self.snapshot(session, &model)?,
                        model,
                    }],
                };
                write_json(&record_path, &record)?;
                self.check_stop(Stage::SelfTraining, k)?;
                record
            };
            current = record.branches[0].model.clone();
            if k == st.k_min {
                w_k_min = Some(current.clone());
            }
            if k == st.k_max {
                w_k_max = Some(current.clone());
            }
            cycles.push(record);
        }
        Ok(SelfTrainOutcome {
            baseline: w0,
            w_k_min: w_k_min.expect("K_m < K_M is validated"),
            w_k_max: w_k_max.expect("loop reaches K_M"),
            cycles,
        })
    }

    /// Self-training, then co-training cycles `k = 0..=K`, then the final
    /// training. Branch 1 starts from `W_{K_m}`, branch 2 from `W_{K_M}`.
    /// The self-training stage runs on `s1`; both sessions must resolve each
    /// other's weights references.
    pub fn co_training(&mut self, s1: &TrainerSession, s2: &TrainerSession) -> Result<CoTrainOutcome> {
        let st_outcome = self.self_training_stage(s1)?;
        let w01 = s1.adopt(&st_outcome.w_k_min);
        let w02 = s2.adopt(&st_outcome.w_k_max);
        let st = self.params.self_training;
        let ct = self.params.co_training;
        let seed = self.params.seed;
        let mut fused = [PseudoLabelSet::new(), PseudoLabelSet::new()];
        let mut current = [w01.clone(), w02.clone()];
        let mut cycles = Vec::new();
        for k in 0..=ct.cycles {
            let dir = self.run_dir.join(format!("cycle_{k}"));
            let record_path = dir.join(RECORD);
            let branch_dirs = [dir.join("branch1"), dir.join("branch2")];
            let record = if record_path.exists() {
                self.event(Stage::CoTraining, k, "resume");
                for (set, d) in fused.iter_mut().zip(&branch_dirs) {
                    *set = load_pseudo_set(&d.join("pseudo"))?.0;
                }
                read_json::<CycleRecord>(&record_path)?
            } else {
                let candidates = draw_candidates(
                    &self.inputs.target,
                    st.candidates,
                    derive_seed(seed, Stage::CoTraining, DRAW, k, 0),
                )?;
                self.event(Stage::CoTraining, k, "run");
                let ((l1, v1), (l2, v2)) = run_pair(
                    self.parallel,
                    || run_pseudolabel(s1, &current[0], &candidates, k, &ct.curriculum),
                    || run_pseudolabel(s2, &current[1], &candidates, k, &ct.curriculum),
                )?;
                self.event(Stage::CoTraining, k, "combine");
                let (mut c1, mut c2) = (Vec::with_capacity(l1.len()), Vec::with_capacity(l2.len()));
                for (a, b) in l1.iter().zip(&l2) {
                    let (a, b) = combine_void(a, b)?;
                    c1.push(a);
                    c2.push(b);
                }
                self.event(Stage::CoTraining, k, "collaborate");
                let (n1, n2) =
                    collaboration_exchange(&c1, &v1, &c2, &v2, st.keep, ct.lambda, self.params.collab_source)?;
                let selected = [ids(&n1), ids(&n2)];
                self.event(Stage::CoTraining, k, "fuse");
                fused = [fuse(&fused[0], n1), fuse(&fused[1], n2)];
                self.event(Stage::CoTraining, k, "train");
                let (m1, m2) = run_pair(
                    self.parallel,
                    || {
                        let seed = derive_seed(seed, Stage::CoTraining, BATCHES, k, 1);
                        let m = self.train_on(s1, &w01, &fused[0], &v1, seed, &format!("cotrain_c{k}_branch1"))?;
                        let eval = self.snapshot(s1, &m)?;
                        Ok((m, eval))
                    },
                    || {
                        let seed = derive_seed(seed, Stage::CoTraining, BATCHES, k, 2);
                        let m = self.train_on(s2, &w02, &fused[1], &v2, seed, &format!("cotrain_c{k}_branch2"))?;
                        let eval = self.snapshot(s2, &m)?;
                        Ok((m, eval))
                    },
                )?;
                let mut branches = Vec::with_capacity(2);
                for (i, ((model, eval_miou), vct)) in [m1, m2].into_iter().zip([v1, v2]).enumerate() {
                    save_pseudo_set(&branch_dirs[i].join("pseudo"), &fused[i], Some(&vct))?;
                    branches.push(BranchRecord {
                        branch: model.branch,
                        thresholds: vct,
                        selected: selected[i].clone(),
                        fused_size: fused[i].len(),
                        model,
                        eval_miou,
                    });
                }
                let record = CycleRecord {
                    stage: Stage::CoTraining,
                    cycle: k,
                    candidates: candidates.entries.iter().map(|e| e.image_id.clone()).collect(),
                    branches,
                };
                write_json(&record_path, &record)?;
                self.check_stop(Stage::CoTraining, k)?;
                record
            };
            current = [record.branches[0].model.clone(), record.branches[1].model.clone()];
            cycles.push(record);
        }
        let [branch1, branch2] = current;
        let final_record = self.final_training(s1, s2, &branch1, &branch2)?;
        Ok(CoTrainOutcome {
            self_training: st_outcome,
            branch1,
            branch2,
            cycles,
            final_record,
        })
    }

    /// Pseudo-labels the whole target split with the selected predictor at
    /// curriculum cycle `K` and trains a fresh model on source plus those
    /// pseudo-labels, mixing minibatches without the collage.
    pub fn final_training(
        &mut self,
        s1: &TrainerSession,
        s2: &TrainerSession,
        w1: &ModelHandle,
        w2: &ModelHandle,
    ) -> Result<ModelRecord> {
        let dir = self.run_dir.join("final");
        let record_path = dir.join(RECORD);
        if record_path.exists() {
            self.event(Stage::Final, 0, "resume");
            return read_json(&record_path);
        }
        let ct = self.params.co_training;
        self.event(Stage::Final, 0, "run");
        let target = &self.inputs.target;
        let image_ids: Vec<String> = target.entries.iter().map(|e| e.image_id.clone()).collect();
        let (stacks, tag) = match ct.selector {
            FinalSelector::Branch1 => (s1.predict(w1, &target.entries)?, BranchTag::Branch1),
            FinalSelector::Branch2 => (s2.predict(w2, &target.entries)?, BranchTag::Branch2),
            FinalSelector::Ensemble => {
                let (a, b) = run_pair(
                    self.parallel,
                    || s1.predict(w1, &target.entries),
                    || s2.predict(w2, &target.entries),
                )?;
                let stacks = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| ensemble_confidence(x, y))
                    .collect::<Result<Vec<_>>>()?;
                (stacks, BranchTag::Ensemble)
            }
        };
        let (images, vct) = pseudolabel_stacks(&image_ids, &stacks, ct.cycles, &ct.curriculum, tag)?;
        let set: PseudoLabelSet = images.into_iter().collect();
        save_pseudo_set(&dir.join("pseudo"), &set, Some(&vct))?;
        self.event(Stage::Final, 0, "train");
        let session = if ct.selector == FinalSelector::Branch2 { s2 } else { s1 };
        let pseudo: Vec<&PseudoLabeledImage> = set.iter().collect();
        let sources = MixSources {
            source: &self.pool,
            pseudo: &pseudo,
            target_images: &self.target_images,
            vct: &vct,
        };
        let cfg = &self.params.trainer;
        let batches = compose_batches(
            sources,
            cfg.final_batches,
            cfg.batch_size,
            &self.params.self_training.mix,
            false,
            derive_seed(self.params.seed, Stage::Final, BATCHES, 0, 0),
        )?;
        if batches.iter().flatten().any(|s| s.origin == SampleOrigin::CollagedTarget) {
            return Err(Error::Invalid("collaged sample in a final-training batch".into()));
        }
        let model = session.train_from_init(cfg, &batches, "final")?;
        let record = ModelRecord {
            stage: Stage::Final,
            eval_miou: self.snapshot(session, &model)?,
            model,
            pseudo_labeled: Some(set.len()),
            thresholds: Some(vct),
        };
        write_json(&record_path, &record)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DatasetEntry, LabelSpace};

    fn split(n: usize) -> DatasetSplit {
        DatasetSplit {
            name: "t".into(),
            kind: SplitKind::Unlabeled,
            label_space: LabelSpace::new(["a", "b"]).unwrap(),
            entries: (0..n)
                .map(|i| DatasetEntry {
                    image_id: format!("t{i:03}"),
                    image_path: format!("t{i:03}.png").into(),
                    label_path: None,
                    sampling_weight: None,
                })
                .collect(),
        }
    }

    #[test]
    fn candidate_draws_are_seeded_and_ordered() {
        let s = split(50);
        let a = draw_candidates(&s, 10, 3).unwrap();
        assert_eq!(a, draw_candidates(&s, 10, 3).unwrap());
        assert_ne!(a, draw_candidates(&s, 10, 4).unwrap());
        let ids: Vec<_> = a.entries.iter().map(|e| e.image_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(ids, sorted);
        assert_eq!(draw_candidates(&s, 50, 0).unwrap(), s);
        assert!(draw_candidates(&s, 51, 0).is_err());
    }

    #[test]
    fn derived_seeds_differ_per_lane_and_cycle() {
        let a = derive_seed(0, Stage::CoTraining, BATCHES, 1, 1);
        assert_ne!(a, derive_seed(0, Stage::CoTraining, BATCHES, 1, 2));
        assert_ne!(a, derive_seed(0, Stage::CoTraining, BATCHES, 2, 1));
        assert_ne!(a, derive_seed(0, Stage::SelfTraining, BATCHES, 1, 1));
        assert_eq!(a, derive_seed(0, Stage::CoTraining, BATCHES, 1, 1));
    }
}
