mod common;

use std::collections::BTreeSet;

use cotrain_core::datagen::{class_histogram, generate_split, toy_label_space, DomainSpec};
use cotrain_core::io;
use cotrain_core::metrics::{evaluate_pairs, MetricReport};
use cotrain_core::mixing::SourcePool;
use cotrain_core::pipeline::{evaluate_model, Stage, StopPoint, TraceEvent, RECORD};
use cotrain_core::preprocess::dataset_lab_stats;
use cotrain_core::trainer::{toy_fit, toy_predict, ToyModelState};
use cotrain_core::{DatasetSplit, Error};

fn steps(trace: &[TraceEvent], stage: Stage, cycle: u32) -> Vec<&'static str> {
    trace
        .iter()
        .filter(|e| e.stage == stage && e.cycle == cycle)
        .map(|e| e.step)
        .collect()
}

#[test]
fn co_training_cycle_order_and_final_model_quality() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::scaled(common::toy_data(dir.path(), 0, 200, 200, 50));
    let run = dir.path().join("run");
    let (s1, s2) = common::sessions(&cfg, &run);
    let mut p = common::pipeline(&cfg, &run);
    let out = p.co_training(&s1, &s2).unwrap();

    for k in 0..=cfg.co_training.cycles {
        assert_eq!(
            steps(p.trace(), Stage::CoTraining, k),
            ["run", "combine", "collaborate", "fuse", "train"],
            "cycle {k}"
        );
    }
    assert_eq!(out.cycles.len(), 4);
    for c in &out.cycles {
        assert_eq!(c.candidates.len(), 60);
        let pool: BTreeSet<&String> = c.candidates.iter().collect();
        for b in &c.branches {
            assert!(b.selected.len() <= 20);
            assert!(b.selected.iter().all(|id| pool.contains(id)));
        }
    }
    assert_eq!(out.final_record.pseudo_labeled, Some(200));

    let last = out.cycles.last().unwrap();
    let best = last.branches.iter().filter_map(|b| b.eval_miou).fold(f64::MIN, f64::max);
    let eval = io::load_manifest(cfg.paths.eval.as_ref().unwrap()).unwrap();
    let final_miou = evaluate_model(&s1, &out.final_record.model, &eval).unwrap().miou * 100.0;
    assert_eq!(out.final_record.eval_miou.map(|m| (m * 1e9).round()), Some((final_miou * 1e9).round()));
    assert!(final_miou >= best - 2.0, "final {final_miou:.2} vs best branch {best:.2}");
}

#[test]
fn stopping_leaves_a_resumable_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny(common::toy_data(dir.path(), 3, 20, 20, 4));

    let full = dir.path().join("full");
    let (s1, s2) = common::sessions(&cfg, &full);
    common::pipeline(&cfg, &full).co_training(&s1, &s2).unwrap();

    let part = dir.path().join("part");
    let (s1, s2) = common::sessions(&cfg, &part);
    let stop = StopPoint {
        stage: Stage::SelfTraining,
        cycle: 0,
    };
    let err = common::pipeline(&cfg, &part).with_stop_after(stop).co_training(&s1, &s2).unwrap_err();
    assert!(matches!(err, Error::Interrupted(_)), "{err}");
    assert!(part.join("selftrain/cycle_0").join(RECORD).exists());
    assert!(!part.join("selftrain/cycle_1").exists());

    let mut p = common::pipeline(&cfg, &part);
    p.co_training(&s1, &s2).unwrap();
    assert_eq!(steps(p.trace(), Stage::Baseline, 0), ["resume"]);
    assert_eq!(steps(p.trace(), Stage::SelfTraining, 0), ["resume"]);
    assert_eq!(common::tree(&part), common::tree(&full));

    // a finished run only replays its records
    let mut p = common::pipeline(&cfg, &part);
    p.co_training(&s1, &s2).unwrap();
    assert!(p.trace().iter().all(|e| e.step == "resume"));
}

#[test]
fn changed_parameters_refuse_an_existing_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny(common::toy_data(dir.path(), 1, 10, 20, 2));
    let run = dir.path().join("run");
    let s = common::session(&cfg, &run, cotrain_core::BranchTag::Branch1);
    common::pipeline(&cfg, &run).baseline(&s).unwrap();

    let mut other = cfg.clone();
    other.keep = 5;
    let inputs = common::inputs(&other, &run);
    assert!(cotrain_core::pipeline::Pipeline::new(&run, other.pipeline_params(), inputs).is_err());
}

fn fit_and_score(train: &[&DatasetSplit], eval: &DatasetSplit) -> f64 {
    let mut state = ToyModelState::new(8, 1.0);
    for split in train {
        let pool = SourcePool::load(split).unwrap();
        let samples: Vec<_> = pool.images().iter().map(|i| i.to_sample()).collect();
        state = toy_fit(state, &samples).unwrap();
    }
    let mut pairs = Vec::new();
    for e in &eval.entries {
        let pred = toy_predict(&state, &io::load_rgb(&e.image_path).unwrap()).argmax_map();
        pairs.push((pred, io::load_label_map(e.label_path.as_ref().unwrap()).unwrap()));
    }
    let space = toy_label_space();
    let cm = evaluate_pairs(pairs.iter().map(|(p, g)| (p, g)), &space).unwrap();
    MetricReport::new(&cm, &space, None).unwrap().miou * 100.0
}

#[test]
fn generated_domains_have_a_gap_that_target_labels_close() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let source = DomainSpec::default_source();
    let target = DomainSpec::default_target();
    let src_train = generate_split(&source, 100, 10, true, &d.join("s_train")).unwrap();
    let src_eval = generate_split(&source, 30, 11, true, &d.join("s_eval")).unwrap();
    let tgt_train = generate_split(&target, 100, 12, true, &d.join("t_train")).unwrap();
    let tgt_eval = generate_split(&target, 30, 13, true, &d.join("t_eval")).unwrap();

    let on_source = fit_and_score(&[&src_train], &src_eval);
    let on_target = fit_and_score(&[&src_train], &tgt_eval);
    assert!(on_source - on_target >= 15.0, "source {on_source:.2}, target {on_target:.2}");

    let with_truth = fit_and_score(&[&src_train, &tgt_train], &tgt_eval);
    assert!(with_truth >= on_target, "with target labels {with_truth:.2} vs source only {on_target:.2}");

    let a = dataset_lab_stats(&src_train, 100, 0).unwrap();
    let b = dataset_lab_stats(&tgt_train, 100, 0).unwrap();
    let shift = (0..3).map(|c| (a.mean[c] - b.mean[c]).abs()).fold(0.0, f64::max);
    assert!(shift > 2.0, "LAB means differ by only {shift:.3}");
}

#[test]
fn class_histograms_are_reproducible_and_match_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainSpec::default_target();
    let h = class_histogram(&spec, 12, 5).unwrap();
    assert_eq!(h, class_histogram(&spec, 12, 5).unwrap());
    assert_ne!(h, class_histogram(&spec, 12, 6).unwrap());

    let split = generate_split(&spec, 12, 5, true, dir.path()).unwrap();
    let mut counted = vec![0u64; h.len()];
    for e in &split.entries {
        for &v in io::load_label_map(e.label_path.as_ref().unwrap()).unwrap().values() {
            counted[v as usize] += 1;
        }
    }
    assert_eq!(counted, h);
}
